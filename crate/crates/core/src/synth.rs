//! Analytic multi-tensor phantoms with known microstructure.
//!
//! Each voxel is a mixture of Gaussian compartments,
//! `S(b, g) = s0 · Σ fᵢ exp(−b gᵀDᵢg)`, so signals on any scheme are exact.
//! Compartments with fractional anisotropy above [`FA_THRESHOLD`] count as
//! anisotropic. The three reported measures are the anisotropic fraction,
//! the isotropic fraction and the FA of the fraction-weighted anisotropic
//! tensor.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Matrix3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nifti::{Datatype, VolumeHeader};
use crate::scheme::GradientScheme;
use crate::volume::{linear_index, voxels, Dims3, DwiVolume, ScalarVolume};

pub const FA_THRESHOLD: f64 = 0.2;

/// Names of the ground-truth measures, in map order.
pub const MEASURE_NAMES: [&str; 3] = ["f_aniso", "f_iso", "fa_aniso"];

pub type Tensor = [[f64; 3]; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Compartment {
    pub fraction: f64,
    /// Diffusion tensor in mm²/s.
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelModel {
    compartments: Vec<Compartment>,
    s0: f64,
}

fn eigenvalues(d: &Tensor) -> [f64; 3] {
    let m = Matrix3::from_fn(|i, j| d[i][j]);
    let e = SymmetricEigen::new(m).eigenvalues;
    [e[0], e[1], e[2]]
}

/// Fractional anisotropy; 0 for the zero tensor.
pub fn fractional_anisotropy(d: &Tensor) -> f64 {
    let [a, b, c] = eigenvalues(d);
    let norm = a * a + b * b + c * c;
    if norm <= 0.0 {
        return 0.0;
    }
    (0.5 * ((a - b).powi(2) + (b - c).powi(2) + (c - a).powi(2)) / norm).sqrt().min(1.0)
}

/// Isotropic tensor `d·I`.
pub fn isotropic(d: f64) -> Tensor {
    [[d, 0.0, 0.0], [0.0, d, 0.0], [0.0, 0.0, d]]
}

/// Axially symmetric tensor `d_perp·I + (d_par − d_perp)·uuᵀ`.
pub fn axial(d_par: f64, d_perp: f64, u: [f64; 3]) -> Tensor {
    let n = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    let u = u.map(|v| v / n);
    let mut t = isotropic(d_perp);
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] += (d_par - d_perp) * u[i] * u[j];
        }
    }
    t
}

impl VoxelModel {
    pub fn new(compartments: Vec<Compartment>, s0: f64) -> Result<Self> {
        if !(s0 > 0.0 && s0.is_finite()) {
            return Err(Error::Invalid(format!("s0 {s0} must be positive")));
        }
        if compartments.is_empty() {
            return Err(Error::Invalid("a voxel needs at least one compartment".into()));
        }
        let total: f64 = compartments.iter().map(|c| c.fraction).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("compartment fractions sum to {total}, not 1")));
        }
        for c in &compartments {
            if !(0.0..=1.0).contains(&c.fraction) {
                return Err(Error::Invalid(format!("fraction {} outside [0, 1]", c.fraction)));
            }
            let t = &c.tensor;
            let scale = t.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            if t.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Invalid("tensor has non-finite entries".into()));
            }
            for i in 0..3 {
                for j in 0..i {
                    if (t[i][j] - t[j][i]).abs() > 1e-12 * scale.max(1e-300) {
                        return Err(Error::Invalid(format!("tensor {t:?} is not symmetric")));
                    }
                }
            }
            if eigenvalues(t).iter().any(|&e| e < -1e-12 * scale) {
                return Err(Error::Invalid(format!("tensor {t:?} is not positive semidefinite")));
            }
        }
        Ok(Self { compartments, s0 })
    }

    pub fn compartments(&self) -> &[Compartment] {
        &self.compartments
    }

    pub fn s0(&self) -> f64 {
        self.s0
    }
}

/// Noiseless signal for every entry of `scheme`.
pub fn signal(model: &VoxelModel, scheme: &GradientScheme) -> Vec<f64> {
    scheme
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| {
            if scheme.is_b0(i) {
                return model.s0;
            }
            let g = e.bvec;
            let s: f64 = model
                .compartments
                .iter()
                .map(|c| {
                    let t = &c.tensor;
                    let mut q = 0.0;
                    for i in 0..3 {
                        for j in 0..3 {
                            q += g[i] * t[i][j] * g[j];
                        }
                    }
                    c.fraction * (-e.bval * q).exp()
                })
                .sum();
            model.s0 * s
        })
        .collect()
}

/// `[f_aniso, f_iso, fa_aniso]`.
pub fn ground_truth_measures(model: &VoxelModel) -> [f64; 3] {
    let mut f_aniso = 0.0;
    let mut weighted = [[0.0; 3]; 3];
    for c in &model.compartments {
        if fractional_anisotropy(&c.tensor) > FA_THRESHOLD {
            f_aniso += c.fraction;
            for i in 0..3 {
                for j in 0..3 {
                    weighted[i][j] += c.fraction * c.tensor[i][j];
                }
            }
        }
    }
    let fa = if f_aniso > 0.0 { fractional_anisotropy(&weighted) } else { 0.0 };
    [f_aniso, 1.0 - f_aniso, fa]
}

fn rician_into(signals: &mut [f64], scale: f64, rng: &mut ChaCha8Rng) {
    if scale == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, scale).expect("finite scale");
    for s in signals {
        let a = *s + normal.sample(rng);
        let b = normal.sample(rng);
        *s = a.hypot(b);
    }
}

/// `sqrt((S + n₁)² + n₂²)` with `n₁, n₂ ~ N(0, (σ·s0)²)`.
pub fn add_rician_noise(signals: &[f64], sigma: f64, s0: f64, seed: u64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Invalid(format!("noise sigma {sigma} must be >= 0")));
    }
    let mut out = signals.to_vec();
    rician_into(&mut out, sigma * s0, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}

/// Stream seed for one voxel, independent of visiting order.
pub fn voxel_seed(seed: u64, stream: u64, [x, y, z]: [usize; 3]) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for w in [stream, x as u64, y as u64, z as u64] {
        h = (h ^ w).wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// Ellipsoid in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    /// Normalized radius: below 1 inside.
    pub fn radius_at(&self, p: [usize; 3]) -> f64 {
        (0..3)
            .map(|i| ((p[i] as f64 - self.center[i]) / self.radii[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        self.radius_at(p) <= 1.0
    }
}

/// How voxels are assigned a compartment mixture.
#[derive(Debug, Clone, PartialEq)]
pub enum Tissue {
    /// Brain-like ellipsoid with ventricles, a CSF rim and smoothly varying
    /// fibre fraction, perpendicular diffusivity and orientation.
    Smooth,
    /// Fixed models per region; later regions override earlier ones and
    /// voxels outside every region are background.
    Regions(Vec<(Ellipsoid, VoxelModel)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub dims: Dims3,
    pub voxel_size: [f64; 3],
    pub tissue: Tissue,
    /// Noise standard deviation relative to s0.
    pub noise_sigma: f64,
    pub s0: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [24, 24, 24],
            voxel_size: [1.25; 3],
            tissue: Tissue::Smooth,
            noise_sigma: 0.02,
            s0: 100.0,
            seed: 0,
        }
    }
}

pub const D_PAR: f64 = 1.7e-3;
pub const D_HINDERED: f64 = 0.9e-3;
pub const D_CSF: f64 = 3.0e-3;

/// Sum of a few random plane waves mapped to [0, 1].
struct SmoothField {
    waves: Vec<([f64; 3], f64)>,
}

impl SmoothField {
    fn new(rng: &mut ChaCha8Rng, dims: Dims3) -> Self {
        let waves = (0..4)
            .map(|_| {
                let k = [0, 1, 2].map(|i| rng.random_range(-1.5..1.5) * 2.0 * PI / dims[i] as f64);
                (k, rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        Self { waves }
    }

    fn at(&self, p: [usize; 3]) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|(k, phase)| (k[0] * p[0] as f64 + k[1] * p[1] as f64 + k[2] * p[2] as f64 + phase).cos())
            .sum();
        0.5 + 0.5 * s / self.waves.len() as f64
    }
}

struct SmoothTissue {
    brain: Ellipsoid,
    ventricles: [Ellipsoid; 2],
    fibre: SmoothField,
    perp: SmoothField,
    theta: SmoothField,
    phi: SmoothField,
}

impl SmoothTissue {
    fn new(dims: Dims3, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1e1d);
        let c = dims.map(|d| (d as f64 - 1.0) / 2.0);
        let brain = Ellipsoid { center: c, radii: dims.map(|d| 0.45 * d as f64) };
        let off = 0.12 * dims[0] as f64;
        let vr = [0.07 * dims[0] as f64, 0.16 * dims[1] as f64, 0.09 * dims[2] as f64];
        let ventricles = [
            Ellipsoid { center: [c[0] - off, c[1], c[2]], radii: vr },
            Ellipsoid { center: [c[0] + off, c[1], c[2]], radii: vr },
        ];
        Self {
            brain,
            ventricles,
            fibre: SmoothField::new(&mut rng, dims),
            perp: SmoothField::new(&mut rng, dims),
            theta: SmoothField::new(&mut rng, dims),
            phi: SmoothField::new(&mut rng, dims),
        }
    }

    fn model(&self, p: [usize; 3], s0: f64) -> Option<VoxelModel> {
        let r = self.brain.radius_at(p);
        if r > 1.0 {
            return None;
        }
        let f_csf = if self.ventricles.iter().any(|v| v.contains(p)) {
            1.0
        } else {
            (0.9 * (r - 0.8) / 0.2).clamp(0.0, 0.9)
        };
        let tissue = 1.0 - f_csf;
        let fibre = 0.25 + 0.6 * self.fibre.at(p);
        let d_perp = (0.1 + 0.5 * self.perp.at(p)) * 1e-3;
        let theta = PI * self.theta.at(p);
        let phi = 2.0 * PI * self.phi.at(p);
        let u = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
        let mut comps = vec![
            Compartment { fraction: tissue * fibre, tensor: axial(D_PAR, d_perp, u) },
            Compartment { fraction: tissue * (1.0 - fibre), tensor: isotropic(D_HINDERED) },
            Compartment { fraction: f_csf, tensor: isotropic(D_CSF) },
        ];
        comps.retain(|c| c.fraction > 0.0);
        let total: f64 = comps.iter().map(|c| c.fraction).sum();
        for c in &mut comps {
            c.fraction /= total;
        }
        Some(VoxelModel::new(comps, s0).expect("valid smooth tissue"))
    }
}

/// Source and target acquisitions of one phantom with shared ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub source: DwiVolume,
    pub target: DwiVolume,
    /// One map per entry of [`MEASURE_NAMES`]; 0 outside the mask.
    pub measures: Vec<ScalarVolume>,
    pub mask: ScalarVolume,
}

fn validate_config(config: &PhantomConfig) -> Result<()> {
    if config.dims.iter().any(|&d| d < 3) {
        return Err(Error::Invalid(format!("phantom dims {:?} must be at least 3 per axis", config.dims)));
    }
    if config.voxel_size.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Invalid(format!("voxel size {:?} must be positive", config.voxel_size)));
    }
    if !(config.s0 > 0.0 && config.s0.is_finite()) {
        return Err(Error::Invalid(format!("s0 {} must be positive", config.s0)));
    }
    if !(config.noise_sigma >= 0.0 && config.noise_sigma.is_finite()) {
        return Err(Error::Invalid(format!("noise sigma {} must be >= 0", config.noise_sigma)));
    }
    Ok(())
}

/// Voxel models of the phantom, `None` for background.
pub fn voxel_models(config: &PhantomConfig) -> Result<Vec<Option<VoxelModel>>> {
    validate_config(config)?;
    let dims = config.dims;
    Ok(match &config.tissue {
        Tissue::Smooth => {
            let t = SmoothTissue::new(dims, config.seed);
            voxels(dims).map(|p| t.model(p, config.s0)).collect()
        }
        Tissue::Regions(regions) => voxels(dims)
            .map(|p| regions.iter().rev().find(|(e, _)| e.contains(p)).map(|(_, m)| m.clone()))
            .collect(),
    })
}

fn noisy_volume(
    models: &[Option<VoxelModel>],
    config: &PhantomConfig,
    scheme: &GradientScheme,
    stream: u64,
) -> Result<DwiVolume> {
    let dims = config.dims;
    let coords: Vec<[usize; 3]> = voxels(dims).collect();
    let rows: Vec<f64> = coords
        .par_iter()
        .map(|&p| {
            let mut s = match &models[linear_index(dims, p)] {
                Some(m) => signal(m, scheme),
                None => vec![0.0; scheme.len()],
            };
            let mut rng = ChaCha8Rng::seed_from_u64(voxel_seed(config.seed, stream, p));
            rician_into(&mut s, config.noise_sigma * config.s0, &mut rng);
            s
        })
        .collect::<Vec<_>>()
        .concat();
    let header = VolumeHeader::new(&[dims[0], dims[1], dims[2], scheme.len()], config.voxel_size, Datatype::F32);
    DwiVolume::from_voxel_rows(header, &rows, scheme.clone())
}

/// Builds the phantom on both schemes. Source and target noise come from
/// independent per-voxel streams.
pub fn generate(config: &PhantomConfig, source: &GradientScheme, target: &GradientScheme) -> Result<Phantom> {
    let models = voxel_models(config)?;
    if models.iter().all(Option::is_none) {
        return Err(Error::Invalid("phantom has no foreground voxels".into()));
    }
    let dims = config.dims;
    let mask = ScalarVolume::mask_from(dims, config.voxel_size, |p| models[linear_index(dims, p)].is_some());
    let mut measures: Vec<ScalarVolume> = (0..3).map(|_| ScalarVolume::zeros(dims, config.voxel_size)).collect();
    for (i, m) in models.iter().enumerate() {
        if let Some(m) = m {
            for (k, v) in ground_truth_measures(m).into_iter().enumerate() {
                measures[k].data[i] = v;
            }
        }
    }
    Ok(Phantom {
        source: noisy_volume(&models, config, source, 1)?,
        target: noisy_volume(&models, config, target, 2)?,
        measures,
        mask,
    })
}

/// Default dense source acquisition: 60 directions over b = 1000, 2000,
/// 3000 plus one b0.
pub fn default_source_scheme() -> GradientScheme {
    GradientScheme::multi_shell(1, &[(1000.0, 20), (2000.0, 20), (3000.0, 20)]).expect("valid scheme")
}

/// Default sparse target acquisition: 18 directions on each of b = 1000 and
/// 3000 plus one b0.
pub fn default_target_scheme() -> GradientScheme {
    GradientScheme::multi_shell_rotated(1, &[(1000.0, 18), (3000.0, 18)], 0.35).expect("valid scheme")
}

/// Human-readable record of a phantom configuration.
pub fn manifest(config: &PhantomConfig, source: &GradientScheme, target: &GradientScheme) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# qxfer phantom");
    let _ = writeln!(s, "seed = {}", config.seed);
    let _ = writeln!(s, "dims = {}x{}x{}", config.dims[0], config.dims[1], config.dims[2]);
    let _ = writeln!(
        s,
        "voxel_size = {} {} {}",
        config.voxel_size[0], config.voxel_size[1], config.voxel_size[2]
    );
    let _ = writeln!(s, "noise_sigma = {}", config.noise_sigma);
    let _ = writeln!(s, "s0 = {}", config.s0);
    match &config.tissue {
        Tissue::Smooth => {
            let _ = writeln!(s, "tissue = smooth");
            let _ = writeln!(s, "d_par = {D_PAR}");
            let _ = writeln!(s, "d_hindered = {D_HINDERED}");
            let _ = writeln!(s, "d_csf = {D_CSF}");
        }
        Tissue::Regions(r) => {
            let _ = writeln!(s, "tissue = regions ({})", r.len());
        }
    }
    let _ = writeln!(s, "fa_threshold = {FA_THRESHOLD}");
    let _ = writeln!(s, "measures = {}", MEASURE_NAMES.join(" "));
    let _ = writeln!(s, "source_gradients = {} (fingerprint {:016x})", source.len(), source.fingerprint());
    let _ = writeln!(s, "target_gradients = {} (fingerprint {:016x})", target.len(), target.fingerprint());
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheme::GradientEntry;

    fn one(b: f64, g: [f64; 3]) -> GradientScheme {
        GradientScheme::new(vec![GradientEntry { bval: 0.0, bvec: [0.0; 3] }, GradientEntry { bval: b, bvec: g }]).unwrap()
    }

    #[test]
    fn isotropic_closed_form() {
        let m = VoxelModel::new(vec![Compartment { fraction: 1.0, tensor: isotropic(1e-3) }], 50.0).unwrap();
        for g in [[1.0, 0.0, 0.0], [0.0, 0.6, 0.8]] {
            let s = signal(&m, &one(2000.0, g));
            assert_eq!(s[0], 50.0);
            assert!((s[1] - 50.0 * (-2.0f64).exp()).abs() < 1e-12);
        }
        assert_eq!(ground_truth_measures(&m), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn stick_perpendicular_is_unattenuated() {
        let stick = [[1.7e-3, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let m = VoxelModel::new(vec![Compartment { fraction: 1.0, tensor: stick }], 1.0).unwrap();
        for b in [500.0, 3000.0] {
            assert!((signal(&m, &one(b, [0.0, 1.0, 0.0]))[1] - 1.0).abs() < 1e-15);
        }
        let gt = ground_truth_measures(&m);
        assert_eq!(gt[0], 1.0);
        assert!((gt[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_mixture() {
        let m = VoxelModel::new(
            vec![
                Compartment { fraction: 0.5, tensor: axial(1.7e-3, 0.2e-3, [0.0, 0.0, 1.0]) },
                Compartment { fraction: 0.5, tensor: isotropic(3e-3) },
            ],
            1.0,
        )
        .unwrap();
        let gt = ground_truth_measures(&m);
        assert!((gt[1] - 0.5).abs() < 1e-15);
        let want = fractional_anisotropy(&axial(1.7e-3, 0.2e-3, [1.0, 0.0, 0.0]));
        assert!((gt[2] - want).abs() < 1e-12);
    }

    #[test]
    fn fa_of_known_tensor() {
        // eigenvalues 1.7, 0.3, 0.3 (×1e-3)
        let l = [1.7, 0.3, 0.3];
        let mean = 0.7666666666666667;
        let num: f64 = l.iter().map(|v| (v - mean) * (v - mean)).sum();
        let den: f64 = l.iter().map(|v| v * v).sum();
        let want = (1.5 * num / den).sqrt();
        let got = fractional_anisotropy(&axial(1.7e-3, 0.3e-3, [1.0, 1.0, 0.0]));
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn invalid_models() {
        let t = isotropic(1e-3);
        assert!(VoxelModel::new(vec![Compartment { fraction: 0.7, tensor: t }], 1.0).is_err());
        let neg = [[1e-3, 0.0, 0.0], [0.0, -1e-3, 0.0], [0.0, 0.0, 1e-3]];
        assert!(VoxelModel::new(vec![Compartment { fraction: 1.0, tensor: neg }], 1.0).is_err());
        let asym = [[1e-3, 2e-4, 0.0], [0.0, 1e-3, 0.0], [0.0, 0.0, 1e-3]];
        assert!(VoxelModel::new(vec![Compartment { fraction: 1.0, tensor: asym }], 1.0).is_err());
        assert!(VoxelModel::new(vec![Compartment { fraction: 1.0, tensor: t }], 0.0).is_err());
    }

    #[test]
    fn noise_zero_sigma_is_identity_and_seeded() {
        let s = vec![1.0, 0.5, 0.25];
        assert_eq!(add_rician_noise(&s, 0.0, 1.0, 3).unwrap(), s);
        let a = add_rician_noise(&s, 0.1, 1.0, 3).unwrap();
        assert_eq!(a, add_rician_noise(&s, 0.1, 1.0, 3).unwrap());
        assert_ne!(a, add_rician_noise(&s, 0.1, 1.0, 4).unwrap());
        assert!(add_rician_noise(&s, -0.1, 1.0, 3).is_err());
    }

    #[test]
    fn voxel_seeds_differ() {
        let a = voxel_seed(1, 1, [0, 0, 0]);
        assert_ne!(a, voxel_seed(1, 1, [1, 0, 0]));
        assert_ne!(a, voxel_seed(1, 2, [0, 0, 0]));
        assert_ne!(a, voxel_seed(2, 1, [0, 0, 0]));
    }

    #[test]
    fn phantom_shape_and_determinism() {
        let cfg = PhantomConfig { dims: [8, 8, 8], seed: 5, ..Default::default() };
        let src = default_source_scheme();
        let tgt = default_target_scheme();
        let p = generate(&cfg, &src, &tgt).unwrap();
        assert_eq!(p.source.header.dims, vec![8, 8, 8, 61]);
        assert_eq!(p.target.header.dims, vec![8, 8, 8, 37]);
        assert_eq!(p.measures.len(), 3);
        assert!(p.mask.count_nonzero() > 100);
        let q = generate(&cfg, &src, &tgt).unwrap();
        assert_eq!(p.source.to_nifti().unwrap(), q.source.to_nifti().unwrap());
        assert_eq!(p, q);
        for i in 0..p.mask.data.len() {
            if p.mask.data[i] == 1.0 {
                assert!((p.measures[0].data[i] + p.measures[1].data[i] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn region_phantom_is_piecewise_constant() {
        let a = VoxelModel::new(vec![Compartment { fraction: 1.0, tensor: isotropic(3e-3) }], 10.0).unwrap();
        let b = VoxelModel::new(
            vec![
                Compartment { fraction: 0.6, tensor: axial(1.7e-3, 0.3e-3, [1.0, 0.0, 0.0]) },
                Compartment { fraction: 0.4, tensor: isotropic(1e-3) },
            ],
            10.0,
        )
        .unwrap();
        let big = Ellipsoid { center: [4.5; 3], radii: [4.0; 3] };
        let small = Ellipsoid { center: [4.5; 3], radii: [2.0; 3] };
        let cfg = PhantomConfig {
            dims: [10, 10, 10],
            tissue: Tissue::Regions(vec![(big, a), (small, b)]),
            noise_sigma: 0.0,
            ..Default::default()
        };
        let p = generate(&cfg, &default_source_scheme(), &default_target_scheme()).unwrap();
        let mut seen: Vec<f64> = p.measures[1].data.clone();
        seen.sort_by(f64::total_cmp);
        seen.dedup();
        assert_eq!(seen, vec![0.0, 0.4, 1.0]);
        assert_eq!(p.target.signal([4, 4, 4])[0], 10.0);
    }

    #[test]
    fn manifest_records_seed() {
        let cfg = PhantomConfig { seed: 1234, ..Default::default() };
        let m = manifest(&cfg, &default_source_scheme(), &default_target_scheme());
        assert!(m.contains("seed = 1234"));
        assert!(m.contains("source_gradients = 61"));
    }
}
