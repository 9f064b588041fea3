//! In-memory volumes: 3D scalar maps and 4D diffusion series.
//!
//! Storage is x-fastest, then y, z and (for diffusion data) gradient, the
//! NIfTI order, so volumes map one-to-one onto file payloads.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nifti::{read_nifti, write_nifti, Datatype, VolumeHeader};
use crate::scheme::{parse_fsl_gradients, GradientScheme};

/// Spatial extents `[nx, ny, nz]`.
pub type Dims3 = [usize; 3];

#[inline]
pub fn linear_index(dims: Dims3, [x, y, z]: [usize; 3]) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

/// Iterates voxel coordinates in storage order.
pub fn voxels(dims: Dims3) -> impl Iterator<Item = [usize; 3]> {
    let [nx, ny, nz] = dims;
    (0..nz).flat_map(move |z| (0..ny).flat_map(move |y| (0..nx).map(move |x| [x, y, z])))
}

/// A 3D map: microstructure measure, mask or coefficient slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    pub header: VolumeHeader,
    pub data: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(header: VolumeHeader, data: Vec<f64>) -> Result<Self> {
        let dims = header.spatial_dims();
        if header.volumes() != 1 || data.len() != dims.iter().product::<usize>() {
            return Err(Error::Dimension(format!(
                "scalar volume header {:?} does not match {} values",
                header.dims,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("scalar volume contains non-finite values".into()));
        }
        Ok(Self { header, data })
    }

    pub fn zeros(dims: Dims3, voxel_size: [f64; 3]) -> Self {
        Self {
            header: VolumeHeader::new(&dims, voxel_size, Datatype::F32),
            data: vec![0.0; dims.iter().product()],
        }
    }

    /// Binary mask from a predicate over coordinates.
    pub fn mask_from(dims: Dims3, voxel_size: [f64; 3], inside: impl Fn([usize; 3]) -> bool) -> Self {
        let data = voxels(dims).map(|p| if inside(p) { 1.0 } else { 0.0 }).collect();
        Self { header: VolumeHeader::new(&dims, voxel_size, Datatype::U8), data }
    }

    pub fn dims(&self) -> Dims3 {
        self.header.spatial_dims()
    }

    #[inline]
    pub fn get(&self, p: [usize; 3]) -> f64 {
        self.data[linear_index(self.dims(), p)]
    }

    #[inline]
    pub fn set(&mut self, p: [usize; 3], v: f64) {
        let i = linear_index(self.dims(), p);
        self.data[i] = v;
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Errors unless every value is 0 or 1.
    pub fn require_binary(&self) -> Result<()> {
        if self.is_binary() {
            Ok(())
        } else {
            Err(Error::Invalid("mask must contain only 0 and 1".into()))
        }
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// Element-wise conjunction of two masks with the same grid.
    pub fn and(&self, other: &ScalarVolume) -> Result<ScalarVolume> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension(format!("mask dims {:?} vs {:?}", self.dims(), other.dims())));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| if a != 0.0 && b != 0.0 { 1.0 } else { 0.0 })
            .collect();
        Ok(ScalarVolume { header: self.header.reshaped(&self.dims(), Datatype::U8), data })
    }

    pub fn to_nifti(&self) -> Result<Vec<u8>> {
        write_nifti(&self.header, &self.data)
    }

    pub fn from_nifti(bytes: &[u8]) -> Result<Self> {
        let (header, data) = read_nifti(bytes)?;
        if header.volumes() != 1 {
            return Err(Error::Dimension(format!("expected a 3D volume, found extents {:?}", header.dims)));
        }
        Self::new(header, data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_nifti(&fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_nifti()?)?;
        Ok(())
    }
}

/// A diffusion-weighted series with its gradient scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct DwiVolume {
    pub header: VolumeHeader,
    pub data: Vec<f64>,
    pub scheme: GradientScheme,
}

impl DwiVolume {
    pub fn new(header: VolumeHeader, data: Vec<f64>, scheme: GradientScheme) -> Result<Self> {
        if header.element_count() != data.len() {
            return Err(Error::Dimension(format!(
                "header extents {:?} do not match {} values",
                header.dims,
                data.len()
            )));
        }
        if header.volumes() != scheme.len() {
            return Err(Error::Dimension(format!(
                "{} volumes but {} gradient entries",
                header.volumes(),
                scheme.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("diffusion volume contains non-finite values".into()));
        }
        Ok(Self { header, data, scheme })
    }

    /// Zero-filled series on a grid.
    pub fn zeros(dims: Dims3, voxel_size: [f64; 3], scheme: GradientScheme) -> Self {
        let n = scheme.len();
        let mut shape = dims.to_vec();
        shape.push(n);
        Self {
            header: VolumeHeader::new(&shape, voxel_size, Datatype::F32),
            data: vec![0.0; dims.iter().product::<usize>() * n],
            scheme,
        }
    }

    pub fn dims(&self) -> Dims3 {
        self.header.spatial_dims()
    }

    pub fn n_voxels(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn n_gradients(&self) -> usize {
        self.scheme.len()
    }

    /// Copies the signal vector of one voxel into `out`.
    pub fn signal_into(&self, p: [usize; 3], out: &mut [f64]) {
        let nvox = self.n_voxels();
        let base = linear_index(self.dims(), p);
        for (g, o) in out.iter_mut().enumerate() {
            *o = self.data[base + g * nvox];
        }
    }

    pub fn signal(&self, p: [usize; 3]) -> Vec<f64> {
        let mut v = vec![0.0; self.n_gradients()];
        self.signal_into(p, &mut v);
        v
    }

    pub fn set_signal(&mut self, p: [usize; 3], values: &[f64]) {
        let nvox = self.n_voxels();
        let base = linear_index(self.dims(), p);
        for (g, &v) in values.iter().enumerate() {
            self.data[base + g * nvox] = v;
        }
    }

    /// Converts voxel-major rows (one signal vector per voxel, storage order)
    /// into the gradient-major layout.
    pub fn from_voxel_rows(
        header: VolumeHeader,
        rows: &[f64],
        scheme: GradientScheme,
    ) -> Result<Self> {
        let n = scheme.len();
        let nvox: usize = header.spatial_dims().iter().product();
        if rows.len() != nvox * n {
            return Err(Error::Dimension(format!("{} values for {nvox} voxels x {n}", rows.len())));
        }
        let mut data = vec![0.0; rows.len()];
        for v in 0..nvox {
            for g in 0..n {
                data[v + g * nvox] = rows[v * n + g];
            }
        }
        let mut shape = header.spatial_dims().to_vec();
        shape.push(n);
        Self::new(header.reshaped(&shape, header.datatype), data, scheme)
    }

    /// Copy with every signal outside `mask` set to zero.
    pub fn masked(&self, mask: &ScalarVolume) -> Result<DwiVolume> {
        if mask.dims() != self.dims() {
            return Err(Error::Dimension(format!(
                "mask extents {:?} differ from data extents {:?}",
                mask.dims(),
                self.dims()
            )));
        }
        let nvox = self.n_voxels();
        let mut out = self.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            if mask.data[i % nvox] == 0.0 {
                *v = 0.0;
            }
        }
        Ok(out)
    }

    pub fn to_nifti(&self) -> Result<Vec<u8>> {
        write_nifti(&self.header, &self.data)
    }

    /// Reads a 4D NIfTI image and FSL gradient files.
    pub fn load(nii: impl AsRef<Path>, bvals: impl AsRef<Path>, bvecs: impl AsRef<Path>) -> Result<Self> {
        let scheme = parse_fsl_gradients(&fs::read_to_string(bvals)?, &fs::read_to_string(bvecs)?)?;
        let (header, data) = read_nifti(&fs::read(nii)?)?;
        Self::new(header, data, scheme)
    }

    /// Writes the image and its gradient files.
    pub fn save(&self, nii: impl AsRef<Path>, bvals: impl AsRef<Path>, bvecs: impl AsRef<Path>) -> Result<()> {
        fs::write(nii, self.to_nifti()?)?;
        fs::write(bvals, self.scheme.to_fsl_bvals())?;
        fs::write(bvecs, self.scheme.to_fsl_bvecs())?;
        Ok(())
    }
}
