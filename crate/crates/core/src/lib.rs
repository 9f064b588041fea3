//! q-space knowledge transfer for learned diffusion-MRI microstructure
//! estimation.
//!
//! Densely sampled source signals are fitted with a SHORE dictionary and
//! re-evaluated on a target acquisition scheme; the interpolated signals
//! are cut into patches and used to train a patch-to-microstructure
//! regressor that is then applied to target data.

pub mod baseline;
pub mod error;
pub mod eval;
pub mod learn;
pub mod nifti;
pub mod patches;
pub mod resample;
pub mod scheme;
pub mod shore;
pub mod synth;
pub mod volume;

pub use error::{Error, ErrorKind, Result};
pub use nifti::{read_nifti, write_nifti, Datatype, VolumeHeader};
pub use scheme::{parse_fsl_gradients, GradientEntry, GradientScheme, QPoint};
pub use shore::{
    design_matrix, fit_coefficients, index_set, interpolate, CoefficientVector, DesignMatrix, Lambdas,
    QSpaceInterpolator, RegularizerSpec, ShoreBasisSpec, ShoreFitter, ShoreIndex,
};
pub use volume::{Dims3, DwiVolume, ScalarVolume};
