//! Training-sample extraction and reassembly of predicted patches.
//!
//! An input patch is the `in_size³` neighbourhood of a centre voxel, flattened
//! voxel-major (x fastest, then y, z) and gradient-minor:
//! `input[voxel * n_signals + g]`. Targets are flattened the same way with
//! measures in place of gradients: `target[voxel * n_measures + k]`.
//!
//! A centre is eligible when it lies in the mask and its whole input patch is
//! inside the array; neighbours outside the mask are used as they are.
//! Centres are visited in storage order (x fastest).
//!
//! # Sample file layout
//!
//! Little-endian throughout:
//!
//! | offset | type | field |
//! |---|---|---|
//! | 0 | `[u8; 8]` | magic `QXSAMPL1` |
//! | 8 | `u8` | mode (0 = q-DL, 1 = SR) |
//! | 9 | `[u8; 3]` | zero padding |
//! | 12 | `u32` × 5 | in_size, out_size, gamma, n_signals, n_measures |
//! | 32 | `u64` | sample count M |
//! | 40 | records | per sample: centre `u32` × 3, input `f32` × in_size³·n_signals, target `f32` × out_size³·n_measures |

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nifti::Datatype;
use crate::volume::{linear_index, voxels, Dims3, DwiVolume, ScalarVolume};

/// Which estimator family a patch geometry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchMode {
    /// Same-resolution input and output (`3³ → 1³` by default).
    QDl,
    /// Low-resolution input, γ-times finer output (`5³ → 2³` by default).
    Sr,
}

impl PatchMode {
    fn code(self) -> u8 {
        match self {
            PatchMode::QDl => 0,
            PatchMode::Sr => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(PatchMode::QDl),
            1 => Ok(PatchMode::Sr),
            c => Err(Error::Parse(format!("unknown patch mode code {c}"))),
        }
    }
}

/// Shape of one training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub mode: PatchMode,
    pub in_size: usize,
    pub out_size: usize,
    pub gamma: usize,
    pub n_signals: usize,
    pub n_measures: usize,
}

impl PatchGeometry {
    /// `3³ → 1³` at the same resolution.
    pub fn qdl(n_signals: usize, n_measures: usize) -> Self {
        Self { mode: PatchMode::QDl, in_size: 3, out_size: 1, gamma: 1, n_signals, n_measures }
    }

    /// `5³` low-resolution input to a `γ³` high-resolution block.
    pub fn sr(gamma: usize, n_signals: usize, n_measures: usize) -> Self {
        Self { mode: PatchMode::Sr, in_size: 5, out_size: gamma, gamma, n_signals, n_measures }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_size % 2 == 0 || self.in_size == 0 {
            return Err(Error::Invalid(format!("input patch size {} must be odd", self.in_size)));
        }
        if self.n_signals == 0 || self.n_measures == 0 {
            return Err(Error::Invalid("patch geometry needs at least one signal and one measure".into()));
        }
        match self.mode {
            PatchMode::QDl => {
                if self.out_size % 2 == 0 || self.out_size > self.in_size {
                    return Err(Error::Invalid(format!(
                        "q-DL output size {} must be odd and at most the input size {}",
                        self.out_size, self.in_size
                    )));
                }
                if self.gamma != 1 {
                    return Err(Error::Invalid("q-DL geometry uses gamma = 1".into()));
                }
            }
            PatchMode::Sr => {
                if self.gamma < 1 || self.out_size != self.gamma {
                    return Err(Error::Invalid(format!(
                        "SR output size {} must equal gamma {}",
                        self.out_size, self.gamma
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.in_size.pow(3) * self.n_signals
    }

    pub fn target_len(&self) -> usize {
        self.out_size.pow(3) * self.n_measures
    }

    /// Position of gradient `g` at patch offset `o` (each component in
    /// `0..in_size`) within a flattened input.
    pub fn input_offset(&self, o: [usize; 3], g: usize) -> usize {
        let s = self.in_size;
        (o[0] + s * (o[1] + s * o[2])) * self.n_signals + g
    }

    /// Position of measure `k` at output-block offset `o` within a flattened
    /// target.
    pub fn target_offset(&self, o: [usize; 3], k: usize) -> usize {
        let s = self.out_size;
        (o[0] + s * (o[1] + s * o[2])) * self.n_measures + k
    }

    /// Output-grid extents for an input grid.
    pub fn output_dims(&self, input: Dims3) -> Dims3 {
        match self.mode {
            PatchMode::QDl => input,
            PatchMode::Sr => input.map(|d| d * self.gamma),
        }
    }

    /// First output-grid voxel covered by the block of `center`.
    fn block_origin(&self, center: [usize; 3]) -> [isize; 3] {
        match self.mode {
            PatchMode::QDl => {
                let r = (self.out_size / 2) as isize;
                center.map(|c| c as isize - r)
            }
            PatchMode::Sr => center.map(|c| (c * self.gamma) as isize),
        }
    }
}

/// One `(input patch, target patch)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub center: [usize; 3],
}

/// Homogeneous collection of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub geometry: PatchGeometry,
    pub samples: Vec<PatchSample>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks every sample against the geometry.
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let (ni, nt) = (self.geometry.input_len(), self.geometry.target_len());
        for (i, s) in self.samples.iter().enumerate() {
            if s.input.len() != ni || s.target.len() != nt {
                return Err(Error::Dimension(format!(
                    "sample {i}: lengths {}/{} do not match geometry {ni}/{nt}",
                    s.input.len(),
                    s.target.len()
                )));
            }
            if s.input.iter().chain(&s.target).any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("sample {i} has non-finite values")));
            }
        }
        Ok(())
    }

    /// Serializes to the documented little-endian layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let g = &self.geometry;
        let mut out = Vec::with_capacity(40 + self.len() * (12 + 4 * (g.input_len() + g.target_len())));
        out.extend_from_slice(SAMPLE_MAGIC);
        out.push(g.mode.code());
        out.extend_from_slice(&[0; 3]);
        for v in [g.in_size, g.out_size, g.gamma, g.n_signals, g.n_measures] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for s in &self.samples {
            for c in s.center {
                out.extend_from_slice(&(c as u32).to_le_bytes());
            }
            for v in s.input.iter().chain(&s.target) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 40 || &bytes[..8] != SAMPLE_MAGIC {
            return Err(Error::Parse("not a sample file (bad magic)".into()));
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let geometry = PatchGeometry {
            mode: PatchMode::from_code(bytes[8])?,
            in_size: u32_at(12),
            out_size: u32_at(16),
            gamma: u32_at(20),
            n_signals: u32_at(24),
            n_measures: u32_at(28),
        };
        geometry.validate()?;
        let count = u64::from_le_bytes(bytes[32..40].try_into().unwrap()) as usize;
        let (ni, nt) = (geometry.input_len(), geometry.target_len());
        let record = 12 + 4 * (ni + nt);
        if bytes.len() != 40 + count * record {
            return Err(Error::Parse(format!(
                "sample file holds {} bytes, expected {} for {count} samples",
                bytes.len(),
                40 + count * record
            )));
        }
        let f32_at = |at: usize| f64::from(f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()));
        let samples = (0..count)
            .map(|i| {
                let base = 40 + i * record;
                let center = [u32_at(base), u32_at(base + 4), u32_at(base + 8)];
                let vals = base + 12;
                PatchSample {
                    center,
                    input: (0..ni).map(|j| f32_at(vals + 4 * j)).collect(),
                    target: (0..nt).map(|j| f32_at(vals + 4 * (ni + j))).collect(),
                }
            })
            .collect();
        Ok(Self { geometry, samples })
    }
}

const SAMPLE_MAGIC: &[u8; 8] = b"QXSAMPL1";

/// Centres whose input patch fits inside `dims` and that lie in `mask`,
/// keeping every `stride`-th position along each axis.
pub fn eligible_centers(mask: &ScalarVolume, in_size: usize, stride: usize) -> Vec<[usize; 3]> {
    let r = in_size / 2;
    let dims = mask.dims();
    let stride = stride.max(1);
    voxels(dims)
        .filter(|p| {
            (0..3).all(|a| p[a] >= r && p[a] + r < dims[a] && (p[a] - r) % stride == 0) && mask.get(*p) != 0.0
        })
        .collect()
}

/// Copies the flattened input patch around `center` into `out`.
pub fn gather_input(signals: &DwiVolume, geometry: &PatchGeometry, center: [usize; 3], out: &mut [f64]) {
    let s = geometry.in_size;
    let r = s / 2;
    let dims = signals.dims();
    let nvox = signals.n_voxels();
    let m = geometry.n_signals;
    let mut k = 0;
    for dz in 0..s {
        for dy in 0..s {
            for dx in 0..s {
                let p = [center[0] + dx - r, center[1] + dy - r, center[2] + dz - r];
                let base = linear_index(dims, p);
                for g in 0..m {
                    out[k + g] = signals.data[base + g * nvox];
                }
                k += m;
            }
        }
    }
}

fn gather_target(measures: &[ScalarVolume], geometry: &PatchGeometry, center: [usize; 3]) -> Vec<f64> {
    let s = geometry.out_size;
    let origin = geometry.block_origin(center);
    let mut out = vec![0.0; geometry.target_len()];
    for dz in 0..s {
        for dy in 0..s {
            for dx in 0..s {
                let p = [
                    (origin[0] + dx as isize) as usize,
                    (origin[1] + dy as isize) as usize,
                    (origin[2] + dz as isize) as usize,
                ];
                for (k, m) in measures.iter().enumerate() {
                    out[geometry.target_offset([dx, dy, dz], k)] = m.get(p);
                }
            }
        }
    }
    out
}

fn check_signal_geometry(signals: &DwiVolume, geometry: &PatchGeometry) -> Result<()> {
    if signals.n_gradients() != geometry.n_signals {
        return Err(Error::Dimension(format!(
            "signals have {} gradients, geometry expects {}",
            signals.n_gradients(),
            geometry.n_signals
        )));
    }
    Ok(())
}

fn extract(
    signals: &DwiVolume,
    measures: &[ScalarVolume],
    mask: &ScalarVolume,
    geometry: PatchGeometry,
) -> Result<SampleSet> {
    geometry.validate()?;
    check_signal_geometry(signals, &geometry)?;
    if mask.dims() != signals.dims() {
        return Err(Error::Dimension(format!(
            "mask extents {:?} differ from signal extents {:?}",
            mask.dims(),
            signals.dims()
        )));
    }
    let centers = eligible_centers(mask, geometry.in_size, 1);
    let samples = centers
        .par_iter()
        .map(|&c| {
            let mut input = vec![0.0; geometry.input_len()];
            gather_input(signals, &geometry, c, &mut input);
            PatchSample { input, target: gather_target(measures, &geometry, c), center: c }
        })
        .collect();
    Ok(SampleSet { geometry, samples })
}

/// q-DL samples: `in_size³` signal patches paired with the `out_size³` block
/// of measures centred on the same voxel.
pub fn extract_qdl(
    signals: &DwiVolume,
    measures: &[ScalarVolume],
    mask: &ScalarVolume,
    in_size: usize,
    out_size: usize,
) -> Result<SampleSet> {
    let geometry = PatchGeometry {
        mode: PatchMode::QDl,
        in_size,
        out_size,
        gamma: 1,
        n_signals: signals.n_gradients(),
        n_measures: measures.len(),
    };
    if measures.is_empty() {
        return Err(Error::Invalid("at least one measure map is required".into()));
    }
    for m in measures {
        if m.dims() != signals.dims() {
            return Err(Error::Dimension(format!(
                "measure extents {:?} differ from signal extents {:?}",
                m.dims(),
                signals.dims()
            )));
        }
    }
    extract(signals, measures, mask, geometry)
}

/// SR samples: `in_size³` low-resolution signal patches paired with the
/// `γ³` high-resolution block `[γi, γi+γ)` per axis under centre `(i, j, k)`.
/// High-resolution maps may carry up to `γ − 1` extra voxels per axis (the
/// part cropped by block-mean downsampling).
pub fn extract_sr(
    lr_signals: &DwiVolume,
    hr_measures: &[ScalarVolume],
    lr_mask: &ScalarVolume,
    gamma: usize,
    in_size: usize,
    out_size: usize,
) -> Result<SampleSet> {
    let geometry = PatchGeometry {
        mode: PatchMode::Sr,
        in_size,
        out_size,
        gamma,
        n_signals: lr_signals.n_gradients(),
        n_measures: hr_measures.len(),
    };
    geometry.validate()?;
    if hr_measures.is_empty() {
        return Err(Error::Invalid("at least one measure map is required".into()));
    }
    let lr = lr_signals.dims();
    for m in hr_measures {
        let hr = m.dims();
        if (0..3).any(|a| hr[a] / gamma != lr[a]) {
            return Err(Error::Dimension(format!(
                "high-resolution extents {hr:?} are not {gamma} x low-resolution extents {lr:?}"
            )));
        }
    }
    extract(lr_signals, hr_measures, lr_mask, geometry)
}

/// Input patches (no targets) for prediction, in centre order.
pub fn extract_inputs(
    signals: &DwiVolume,
    mask: &ScalarVolume,
    geometry: &PatchGeometry,
    stride: usize,
) -> Result<Vec<([usize; 3], Vec<f64>)>> {
    geometry.validate()?;
    check_signal_geometry(signals, geometry)?;
    if mask.dims() != signals.dims() {
        return Err(Error::Dimension(format!(
            "mask extents {:?} differ from signal extents {:?}",
            mask.dims(),
            signals.dims()
        )));
    }
    Ok(eligible_centers(mask, geometry.in_size, stride)
        .into_par_iter()
        .map(|c| {
            let mut input = vec![0.0; geometry.input_len()];
            gather_input(signals, geometry, c, &mut input);
            (c, input)
        })
        .collect())
}

/// Scatters predicted target patches into one map per measure on a grid of
/// `out_dims`. Voxels written by several patches receive the mean; uncovered
/// voxels are 0.
pub fn assemble(
    predictions: &[([usize; 3], Vec<f64>)],
    geometry: &PatchGeometry,
    out_dims: Dims3,
    voxel_size: [f64; 3],
) -> Result<Vec<ScalarVolume>> {
    let nvox: usize = out_dims.iter().product();
    let nm = geometry.n_measures;
    let mut sums = vec![0.0; nvox * nm];
    let mut counts = vec![0u32; nvox];
    let s = geometry.out_size;
    for (center, values) in predictions {
        if values.len() != geometry.target_len() {
            return Err(Error::Dimension(format!(
                "prediction has {} values, geometry expects {}",
                values.len(),
                geometry.target_len()
            )));
        }
        let origin = geometry.block_origin(*center);
        for dz in 0..s {
            for dy in 0..s {
                for dx in 0..s {
                    let p = [origin[0] + dx as isize, origin[1] + dy as isize, origin[2] + dz as isize];
                    if (0..3).any(|a| p[a] < 0 || p[a] as usize >= out_dims[a]) {
                        return Err(Error::Dimension(format!(
                            "patch at centre {center:?} writes outside the {out_dims:?} output grid"
                        )));
                    }
                    let i = linear_index(out_dims, p.map(|c| c as usize));
                    counts[i] += 1;
                    for k in 0..nm {
                        sums[k * nvox + i] += values[geometry.target_offset([dx, dy, dz], k)];
                    }
                }
            }
        }
    }
    (0..nm)
        .map(|k| {
            let data = (0..nvox)
                .map(|i| if counts[i] > 0 { sums[k * nvox + i] / f64::from(counts[i]) } else { 0.0 })
                .collect();
            let mut vol = ScalarVolume::zeros(out_dims, voxel_size);
            vol.header.datatype = Datatype::F32;
            vol.data = data;
            Ok(vol)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheme::GradientScheme;

    fn ramp_dwi(dims: Dims3, n: usize) -> DwiVolume {
        let scheme = GradientScheme::multi_shell(0, &[(1000.0, n)]).unwrap();
        let mut d = DwiVolume::zeros(dims, [1.0; 3], scheme);
        for p in voxels(dims) {
            let s: Vec<f64> = (0..n).map(|g| (linear_index(dims, p) * 10 + g) as f64).collect();
            d.set_signal(p, &s);
        }
        d
    }

    fn map(dims: Dims3, f: impl Fn([usize; 3]) -> f64) -> ScalarVolume {
        let mut v = ScalarVolume::zeros(dims, [1.0; 3]);
        for p in voxels(dims) {
            v.set(p, f(p));
        }
        v
    }

    #[test]
    fn empty_mask_gives_no_samples() {
        let d = ramp_dwi([5, 5, 5], 2);
        let mask = ScalarVolume::mask_from([5, 5, 5], [1.0; 3], |_| false);
        let m = map([5, 5, 5], |_| 1.0);
        assert!(extract_qdl(&d, &[m], &mask, 3, 1).unwrap().is_empty());
    }

    #[test]
    fn full_mask_5_cubed_gives_27() {
        let d = ramp_dwi([5, 5, 5], 2);
        let mask = ScalarVolume::mask_from([5, 5, 5], [1.0; 3], |_| true);
        let m = map([5, 5, 5], |p| p[0] as f64);
        let set = extract_qdl(&d, &[m], &mask, 3, 1).unwrap();
        assert_eq!(set.len(), 27);
        assert_eq!(set.samples[0].center, [1, 1, 1]);
        assert_eq!(set.samples[1].center, [2, 1, 1]);
        assert_eq!(set.samples[1].target, vec![2.0]);
    }

    #[test]
    fn constant_signal_gives_identical_inputs() {
        let scheme = GradientScheme::multi_shell(0, &[(1000.0, 3)]).unwrap();
        let mut d = DwiVolume::zeros([4, 4, 4], [1.0; 3], scheme);
        d.data.iter_mut().for_each(|v| *v = 0.7);
        let mask = ScalarVolume::mask_from([4, 4, 4], [1.0; 3], |_| true);
        let set = extract_qdl(&d, &[map([4, 4, 4], |_| 0.0)], &mask, 3, 1).unwrap();
        assert_eq!(set.len(), 8);
        assert!(set.samples.iter().all(|s| s.input == set.samples[0].input));
    }

    #[test]
    fn input_layout_is_voxel_major() {
        let d = ramp_dwi([5, 6, 7], 3);
        let mask = ScalarVolume::mask_from([5, 6, 7], [1.0; 3], |_| true);
        let set = extract_qdl(&d, &[map([5, 6, 7], |_| 0.0)], &mask, 3, 1).unwrap();
        let g = set.geometry;
        for s in set.samples.iter().step_by(7) {
            for o in voxels([3, 3, 3]) {
                let p = [s.center[0] + o[0] - 1, s.center[1] + o[1] - 1, s.center[2] + o[2] - 1];
                for k in 0..3 {
                    assert_eq!(s.input[g.input_offset(o, k)], d.signal(p)[k]);
                }
            }
        }
    }

    #[test]
    fn sr_samples_and_blocks() {
        let lr = ramp_dwi([7, 7, 7], 2);
        let mask = ScalarVolume::mask_from([7, 7, 7], [1.0; 3], |_| true);
        let hr = map([14, 14, 14], |p| (p[0] + 100 * p[1] + 10000 * p[2]) as f64);
        let set = extract_sr(&lr, &[hr.clone()], &mask, 2, 5, 2).unwrap();
        assert_eq!(set.len(), 27);
        let s = &set.samples[0];
        assert_eq!(s.center, [2, 2, 2]);
        // Block under centre (2,2,2) spans hr voxels 4..6 on each axis.
        for o in voxels([2, 2, 2]) {
            let p = [4 + o[0], 4 + o[1], 4 + o[2]];
            assert_eq!(s.target[set.geometry.target_offset(o, 0)], hr.get(p));
        }
    }

    #[test]
    fn sr_block_for_center_one() {
        let g = PatchGeometry::sr(2, 1, 1);
        assert_eq!(g.block_origin([1, 1, 1]), [2, 2, 2]);
    }

    #[test]
    fn sr_geometry_errors() {
        let lr = ramp_dwi([7, 7, 7], 2);
        let mask = ScalarVolume::mask_from([7, 7, 7], [1.0; 3], |_| true);
        let bad = map([12, 14, 14], |_| 0.0);
        assert!(extract_sr(&lr, &[bad], &mask, 2, 5, 2).is_err());
        let hr = map([14, 14, 14], |_| 0.0);
        assert!(extract_sr(&lr, &[hr.clone()], &mask, 2, 5, 3).is_err());
        // One cropped voxel per axis is tolerated.
        let hr_odd = map([15, 15, 15], |_| 0.0);
        assert!(extract_sr(&lr, &[hr_odd], &mask, 2, 5, 2).is_ok());
    }

    #[test]
    fn assemble_direct_and_averaged() {
        let g = PatchGeometry::qdl(1, 1);
        let maps = assemble(&[([1, 0, 0], vec![0.5]), ([0, 0, 0], vec![0.25])], &g, [2, 1, 1], [1.0; 3]).unwrap();
        assert_eq!(maps[0].data, vec![0.25, 0.5]);

        let maps = assemble(&[([0, 0, 0], vec![0.2]), ([0, 0, 0], vec![0.4])], &g, [1, 1, 1], [1.0; 3]).unwrap();
        assert!((maps[0].data[0] - 0.3).abs() < 1e-15);

        let sr = PatchGeometry::sr(2, 1, 1);
        let preds = vec![([0, 0, 0], vec![1.0; 8]), ([1, 0, 0], vec![2.0; 8])];
        let maps = assemble(&preds, &sr, [4, 2, 2], [1.0; 3]).unwrap();
        assert_eq!(maps[0].get([1, 1, 1]), 1.0);
        assert_eq!(maps[0].get([2, 0, 0]), 2.0);
        assert!(assemble(&[([2, 0, 0], vec![1.0; 8])], &sr, [4, 2, 2], [1.0; 3]).is_err());
    }

    #[test]
    fn stride_skips_centers() {
        let mask = ScalarVolume::mask_from([7, 7, 7], [1.0; 3], |_| true);
        assert_eq!(eligible_centers(&mask, 3, 1).len(), 125);
        assert_eq!(eligible_centers(&mask, 3, 2).len(), 27);
    }

    #[test]
    fn sample_file_round_trip() {
        let d = ramp_dwi([4, 4, 4], 2);
        let mask = ScalarVolume::mask_from([4, 4, 4], [1.0; 3], |p| p[0] != 2);
        let set = extract_qdl(&d, &[map([4, 4, 4], |p| p[1] as f64 * 0.25)], &mask, 3, 1).unwrap();
        let bytes = set.to_bytes();
        assert_eq!(&bytes[..8], b"QXSAMPL1");
        let back = SampleSet::from_bytes(&bytes).unwrap();
        assert_eq!(back, set);
        assert!(SampleSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
