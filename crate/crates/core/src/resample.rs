//! Spatial block-mean downsampling and voxel-wise q-space resampling.
//!
//! Non-divisible extents are cropped to the largest multiple of γ before
//! averaging; the crop is recorded in the output header description.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nifti::Datatype;
use crate::scheme::GradientScheme;
use crate::shore::{design_matrix, QSpaceInterpolator, ShoreBasisSpec, ShoreFitter};
use crate::volume::{linear_index, voxels, Dims3, DwiVolume, ScalarVolume};

/// Result of b0 normalization.
#[derive(Debug, Clone)]
pub struct Normalized {
    /// Diffusion-weighted volumes divided by the b0 mean; b0 entries removed.
    pub dwi: DwiVolume,
    /// Mean of the b0 volumes.
    pub b0_map: ScalarVolume,
    /// 1 where the b0 mean is not positive and the signal was zeroed.
    pub excluded: ScalarVolume,
}

/// Divides every diffusion-weighted volume by the mean b0 image.
pub fn normalize_b0(dwi: &DwiVolume) -> Result<Normalized> {
    let b0_idx: Vec<usize> = (0..dwi.n_gradients()).filter(|&g| dwi.scheme.is_b0(g)).collect();
    if b0_idx.is_empty() {
        return Err(Error::Invalid("scheme has no b0 entries to normalize by".into()));
    }
    let dw_idx: Vec<usize> = (0..dwi.n_gradients()).filter(|&g| !dwi.scheme.is_b0(g)).collect();
    let nvox = dwi.n_voxels();
    let dims = dwi.dims();
    let mut b0 = vec![0.0; nvox];
    for &g in &b0_idx {
        for (acc, &v) in b0.iter_mut().zip(&dwi.data[g * nvox..(g + 1) * nvox]) {
            *acc += v;
        }
    }
    let inv = 1.0 / b0_idx.len() as f64;
    b0.iter_mut().for_each(|v| *v *= inv);

    let mut data = Vec::with_capacity(nvox * dw_idx.len());
    for &g in &dw_idx {
        let vol = &dwi.data[g * nvox..(g + 1) * nvox];
        data.extend(vol.iter().zip(&b0).map(|(&s, &b)| if b > 0.0 { s / b } else { 0.0 }));
    }
    let excluded = b0.iter().map(|&b| if b > 0.0 { 0.0 } else { 1.0 }).collect();
    let mut shape = dims.to_vec();
    shape.push(dw_idx.len());
    let header = dwi.header.reshaped(&shape, Datatype::F32);
    Ok(Normalized {
        dwi: DwiVolume::new(header, data, dwi.scheme.without_b0())?,
        b0_map: ScalarVolume::new(dwi.header.reshaped(&dims, Datatype::F32), b0)?,
        excluded: ScalarVolume::new(dwi.header.reshaped(&dims, Datatype::U8), excluded)?,
    })
}

/// Averages non-overlapping γ³ blocks of each of `volumes` stacked 3D
/// arrays. Returns the data and the reduced extents.
pub fn block_mean_downsample(data: &[f64], dims: Dims3, volumes: usize, gamma: usize) -> Result<(Vec<f64>, Dims3)> {
    if gamma < 1 {
        return Err(Error::Invalid("block size must be >= 1".into()));
    }
    let nvox: usize = dims.iter().product();
    if data.len() != nvox * volumes {
        return Err(Error::Dimension(format!("{} values for {dims:?} x {volumes}", data.len())));
    }
    if dims.iter().any(|&d| d < gamma) {
        return Err(Error::Dimension(format!("extents {dims:?} smaller than block size {gamma}")));
    }
    let out_dims = dims.map(|d| d / gamma);
    let out_vox: usize = out_dims.iter().product();
    let scale = 1.0 / (gamma * gamma * gamma) as f64;
    let mut out = vec![0.0; out_vox * volumes];
    for v in 0..volumes {
        let src = &data[v * nvox..(v + 1) * nvox];
        let dst = &mut out[v * out_vox..(v + 1) * out_vox];
        for p in voxels(out_dims) {
            let mut acc = 0.0;
            for dz in 0..gamma {
                for dy in 0..gamma {
                    for dx in 0..gamma {
                        let q = [p[0] * gamma + dx, p[1] * gamma + dy, p[2] * gamma + dz];
                        acc += src[linear_index(dims, q)];
                    }
                }
            }
            dst[linear_index(out_dims, p)] = acc * scale;
        }
    }
    Ok((out, out_dims))
}

fn crop_note(dims: Dims3, gamma: usize) -> String {
    format!("block-mean gamma={gamma} crop-to-multiple from {}x{}x{}", dims[0], dims[1], dims[2])
}

/// Block-mean downsampling of a diffusion series; voxel size scales by γ.
pub fn downsample_dwi(dwi: &DwiVolume, gamma: usize) -> Result<DwiVolume> {
    let (data, out) = block_mean_downsample(&dwi.data, dwi.dims(), dwi.n_gradients(), gamma)?;
    let mut shape = out.to_vec();
    shape.push(dwi.n_gradients());
    let mut header = dwi.header.downsampled(&shape, gamma);
    header.description = crop_note(dwi.dims(), gamma);
    DwiVolume::new(header, data, dwi.scheme.clone())
}

/// Block-mean downsampling of a scalar map.
pub fn downsample_scalar(vol: &ScalarVolume, gamma: usize) -> Result<ScalarVolume> {
    let (data, out) = block_mean_downsample(&vol.data, vol.dims(), 1, gamma)?;
    let mut header = vol.header.downsampled(&out, gamma);
    header.datatype = Datatype::F32;
    header.description = crop_note(vol.dims(), gamma);
    ScalarVolume::new(header, data)
}

/// Downsamples a binary mask: block mean thresholded at 0.5.
pub fn downsample_mask(mask: &ScalarVolume, gamma: usize) -> Result<ScalarVolume> {
    mask.require_binary()?;
    let mut low = downsample_scalar(mask, gamma)?;
    low.data.iter_mut().for_each(|v| *v = if *v >= 0.5 { 1.0 } else { 0.0 });
    low.header.datatype = Datatype::U8;
    Ok(low)
}

/// Nearest-neighbour (block replication) upsampling of a diffusion series by
/// an integer factor; the inverse geometry of [`downsample_dwi`].
pub fn block_upsample_dwi(dwi: &DwiVolume, gamma: usize) -> Result<DwiVolume> {
    if gamma < 1 {
        return Err(Error::Invalid("block size must be >= 1".into()));
    }
    let dims = dwi.dims();
    let hr = dims.map(|d| d * gamma);
    let hr_vox: usize = hr.iter().product();
    let nvox = dwi.n_voxels();
    let mut data = vec![0.0; hr_vox * dwi.n_gradients()];
    for g in 0..dwi.n_gradients() {
        let src = &dwi.data[g * nvox..(g + 1) * nvox];
        let dst = &mut data[g * hr_vox..(g + 1) * hr_vox];
        for p in voxels(hr) {
            dst[linear_index(hr, p)] = src[linear_index(dims, p.map(|c| c / gamma))];
        }
    }
    let mut shape = hr.to_vec();
    shape.push(dwi.n_gradients());
    let mut header = dwi.header.reshaped(&shape, dwi.header.datatype);
    header.voxel_size = dwi.header.voxel_size.map(|v| v / gamma as f64);
    for row in 0..3 {
        for c in 0..3 {
            header.affine[row][c] = dwi.header.affine[row][c] / gamma as f64;
        }
    }
    DwiVolume::new(header, data, dwi.scheme.clone())
}

/// Block replication of a scalar map by an integer factor.
pub fn block_upsample_scalar(vol: &ScalarVolume, gamma: usize) -> Result<ScalarVolume> {
    if gamma < 1 {
        return Err(Error::Invalid("block size must be >= 1".into()));
    }
    let dims = vol.dims();
    let hr = dims.map(|d| d * gamma);
    let data = voxels(hr).map(|p| vol.data[linear_index(dims, p.map(|c| c / gamma))]).collect();
    let mut header = vol.header.reshaped(&hr, vol.header.datatype);
    header.voxel_size = vol.header.voxel_size.map(|v| v / gamma as f64);
    for row in 0..3 {
        for c in 0..3 {
            header.affine[row][c] = vol.header.affine[row][c] / gamma as f64;
        }
    }
    ScalarVolume::new(header, data)
}

/// Masked voxel coordinates in storage order.
pub fn masked_voxels(mask: &ScalarVolume) -> Vec<[usize; 3]> {
    voxels(mask.dims()).filter(|&p| mask.get(p) != 0.0).collect()
}

/// Applies `f` to the signal of every masked voxel in parallel and writes
/// the `n_out`-long results into a voxel-major buffer (zeros elsewhere). The
/// layout is independent of the worker count; the first failing voxel in
/// storage order is reported.
pub fn map_masked_voxels<F>(dwi: &DwiVolume, mask: &ScalarVolume, n_out: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &mut [f64]) -> Result<()> + Sync,
{
    if mask.dims() != dwi.dims() {
        return Err(Error::Dimension(format!(
            "mask extents {:?} differ from data extents {:?}",
            mask.dims(),
            dwi.dims()
        )));
    }
    let dims = dwi.dims();
    let coords = masked_voxels(mask);
    let results: Vec<Result<Vec<f64>>> = coords
        .par_iter()
        .map_init(
            || vec![0.0; dwi.n_gradients()],
            |signal, &p| {
                dwi.signal_into(p, signal);
                let mut out = vec![0.0; n_out];
                f(signal, &mut out).map_err(|e| e.at_voxel(p))?;
                if out.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical("non-finite output".into()).at_voxel(p));
                }
                Ok(out)
            },
        )
        .collect();
    let mut rows = vec![0.0; dwi.n_voxels() * n_out];
    for (p, r) in coords.iter().zip(results) {
        let i = linear_index(dims, *p);
        rows[i * n_out..(i + 1) * n_out].copy_from_slice(&r?);
    }
    Ok(rows)
}

/// Options for [`resample_qspace_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ResampleOptions {
    /// Clamp interpolated values to `[0, clip_max]`.
    pub clip_max: Option<f64>,
}

/// Fits every masked voxel of a (b0-normalized) series with the SHORE basis
/// and evaluates the fit on `target`. Unmasked voxels are zero; the output
/// scheme is `target` without its b0 entries.
pub fn resample_qspace(
    dwi: &DwiVolume,
    mask: &ScalarVolume,
    spec: &ShoreBasisSpec,
    target: &GradientScheme,
) -> Result<DwiVolume> {
    resample_qspace_with(dwi, mask, spec, target, ResampleOptions::default())
}

pub fn resample_qspace_with(
    dwi: &DwiVolume,
    mask: &ScalarVolume,
    spec: &ShoreBasisSpec,
    target: &GradientScheme,
    options: ResampleOptions,
) -> Result<DwiVolume> {
    let target = target.without_b0();
    let interp = QSpaceInterpolator::between(&dwi.scheme, &target, spec)?;
    let n_out = target.len();
    let rows = map_masked_voxels(dwi, mask, n_out, |signal, out| {
        interp.apply_into(signal, out)?;
        if let Some(max) = options.clip_max {
            out.iter_mut().for_each(|v| *v = v.clamp(0.0, max));
        }
        Ok(())
    })?;
    let header = dwi.header.reshaped(&dwi.dims(), Datatype::F32);
    DwiVolume::from_voxel_rows(header, &rows, target)
}

/// Per-voxel SHORE coefficients as voxel-major rows (`K` per voxel, zeros
/// outside the mask), with the fitter that produced them.
pub fn fit_volume(dwi: &DwiVolume, mask: &ScalarVolume, spec: &ShoreBasisSpec) -> Result<(Vec<f64>, ShoreFitter)> {
    let fitter = ShoreFitter::from_spec(design_matrix(&dwi.scheme, spec)?, spec)?;
    let k = fitter.design().cols();
    let pinv = fitter.pseudo_inverse().transpose();
    let pinv = pinv.as_slice();
    let m = dwi.n_gradients();
    let rows = map_masked_voxels(dwi, mask, k, |signal, out| {
        for (o, col) in out.iter_mut().zip(pinv.chunks_exact(m)) {
            *o = col.iter().zip(signal).map(|(a, b)| a * b).sum();
        }
        Ok(())
    })?;
    Ok((rows, fitter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nifti::VolumeHeader;

    fn dwi_with(dims: Dims3, scheme: GradientScheme, f: impl Fn([usize; 3], usize) -> f64) -> DwiVolume {
        let mut d = DwiVolume::zeros(dims, [1.0; 3], scheme);
        for p in voxels(dims) {
            let s: Vec<f64> = (0..d.n_gradients()).map(|g| f(p, g)).collect();
            d.set_signal(p, &s);
        }
        d
    }

    #[test]
    fn normalize_single_b0() {
        let scheme = GradientScheme::multi_shell(1, &[(1000.0, 1)]).unwrap();
        let d = dwi_with([1, 1, 1], scheme, |_, g| if g == 0 { 2.0 } else { 1.0 });
        let n = normalize_b0(&d).unwrap();
        assert_eq!(n.dwi.data, vec![0.5]);
        assert_eq!(n.dwi.scheme.len(), 1);
        assert_eq!(n.b0_map.data, vec![2.0]);
    }

    #[test]
    fn normalize_two_b0_and_zero_b0() {
        let scheme = GradientScheme::multi_shell(2, &[(1000.0, 1)]).unwrap();
        let d = dwi_with([2, 1, 1], scheme, |p, g| match (p[0], g) {
            (0, 0) => 1.0,
            (0, 1) => 3.0,
            (1, 0) | (1, 1) => 0.0,
            _ => 1.0,
        });
        let n = normalize_b0(&d).unwrap();
        assert_eq!(n.b0_map.data, vec![2.0, 0.0]);
        assert_eq!(n.dwi.data, vec![0.5, 0.0]);
        assert_eq!(n.excluded.data, vec![0.0, 1.0]);
    }

    #[test]
    fn normalize_requires_b0() {
        let scheme = GradientScheme::multi_shell(0, &[(1000.0, 2)]).unwrap();
        let d = DwiVolume::zeros([1, 1, 1], [1.0; 3], scheme);
        assert!(normalize_b0(&d).is_err());
    }

    #[test]
    fn block_mean_examples() {
        let data: Vec<f64> = (1..=8).map(f64::from).collect();
        let (out, dims) = block_mean_downsample(&data, [2, 2, 2], 1, 2).unwrap();
        assert_eq!(dims, [1, 1, 1]);
        assert_eq!(out, vec![4.5]);

        let c = vec![3.25; 6 * 4 * 5 * 2];
        let (out, dims) = block_mean_downsample(&c, [6, 4, 5], 2, 2).unwrap();
        assert_eq!(dims, [3, 2, 2]);
        assert!(out.iter().all(|&v| v == 3.25));

        let (out, _) = block_mean_downsample(&data, [2, 2, 2], 1, 1).unwrap();
        assert_eq!(out, data);
        assert!(block_mean_downsample(&data, [2, 2, 2], 1, 0).is_err());
        assert!(block_mean_downsample(&data, [2, 2, 2], 1, 3).is_err());
    }

    #[test]
    fn mask_downsampling() {
        let full = ScalarVolume::mask_from([4, 4, 4], [1.0; 3], |_| true);
        assert_eq!(downsample_mask(&full, 2).unwrap().count_nonzero(), 8);
        let empty = ScalarVolume::mask_from([4, 4, 4], [1.0; 3], |_| false);
        assert_eq!(downsample_mask(&empty, 2).unwrap().count_nonzero(), 0);
        let five = ScalarVolume::mask_from([2, 2, 2], [1.0; 3], |p| p[0] + p[1] + p[2] <= 1 || p == [1, 1, 0]);
        assert_eq!(five.count_nonzero(), 5);
        assert_eq!(downsample_mask(&five, 2).unwrap().data, vec![1.0]);
        let bad = ScalarVolume::new(VolumeHeader::new(&[2, 1, 1], [1.0; 3], Datatype::F32), vec![0.5, 1.0]).unwrap();
        assert!(downsample_mask(&bad, 1).is_err());
    }

    #[test]
    fn downsampled_header_records_crop() {
        let scheme = GradientScheme::multi_shell(1, &[(1000.0, 2)]).unwrap();
        let d = DwiVolume::zeros([5, 4, 4], [1.25; 3], scheme);
        let low = downsample_dwi(&d, 2).unwrap();
        assert_eq!(low.dims(), [2, 2, 2]);
        assert_eq!(low.header.voxel_size, [2.5; 3]);
        assert!(low.header.description.contains("5x4x4"));
    }

    #[test]
    fn upsample_inverts_block_geometry() {
        let scheme = GradientScheme::multi_shell(0, &[(1000.0, 2)]).unwrap();
        let d = dwi_with([2, 3, 1], scheme, |p, g| (p[0] + 10 * p[1] + 100 * g) as f64);
        let up = block_upsample_dwi(&d, 2).unwrap();
        assert_eq!(up.dims(), [4, 6, 2]);
        assert_eq!(up.signal([3, 5, 1]), d.signal([1, 2, 0]));
        let back = downsample_dwi(&up, 2).unwrap();
        assert_eq!(back.data, d.data);
    }

    #[test]
    fn scalar_upsample_replicates_blocks() {
        let mut v = ScalarVolume::zeros([2, 1, 1], [2.0; 3]);
        v.data = vec![1.0, 5.0];
        let up = block_upsample_scalar(&v, 3).unwrap();
        assert_eq!(up.dims(), [6, 3, 3]);
        assert_eq!(up.header.voxel_size, [2.0 / 3.0; 3]);
        assert_eq!(up.get([2, 2, 2]), 1.0);
        assert_eq!(up.get([3, 0, 1]), 5.0);
        assert_eq!(downsample_scalar(&up, 3).unwrap().data, v.data);
    }

    #[test]
    fn zero_signals_resample_to_zero() {
        let src = GradientScheme::multi_shell(0, &[(1000.0, 20), (2000.0, 20), (3000.0, 20)]).unwrap();
        let tgt = GradientScheme::multi_shell_rotated(1, &[(1000.0, 18), (3000.0, 18)], 0.3).unwrap();
        let d = DwiVolume::zeros([2, 2, 2], [1.0; 3], src);
        let mask = ScalarVolume::mask_from([2, 2, 2], [1.0; 3], |_| true);
        let out = resample_qspace(&d, &mask, &ShoreBasisSpec::default(), &tgt).unwrap();
        assert_eq!(out.n_gradients(), 36);
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unmasked_voxels_are_zero_and_mask_dims_checked() {
        let src = GradientScheme::multi_shell(1, &[(1000.0, 20), (2000.0, 20), (3000.0, 20)]).unwrap();
        let d = dwi_with([2, 1, 1], src.clone(), |_, g| 1.0 / (1.0 + g as f64));
        let mask = ScalarVolume::mask_from([2, 1, 1], [1.0; 3], |p| p[0] == 0);
        let out = resample_qspace(&d, &mask, &ShoreBasisSpec::default(), &src).unwrap();
        assert!(out.signal([1, 0, 0]).iter().all(|&v| v == 0.0));
        assert!(out.signal([0, 0, 0]).iter().any(|&v| v != 0.0));
        let wrong = ScalarVolume::mask_from([1, 1, 1], [1.0; 3], |_| true);
        assert!(resample_qspace(&d, &wrong, &ShoreBasisSpec::default(), &src).is_err());
    }

    #[test]
    fn singular_fit_reports_error() {
        let src = GradientScheme::multi_shell(0, &[(1000.0, 20), (2000.0, 20), (3000.0, 20)]).unwrap();
        let d = DwiVolume::zeros([1, 1, 1], [1.0; 3], src.clone());
        let mask = ScalarVolume::mask_from([1, 1, 1], [1.0; 3], |_| true);
        let spec = ShoreBasisSpec { lambda_l: 0.0, lambda_n: 0.0, ..Default::default() };
        let err = resample_qspace(&d, &mask, &spec, &src).unwrap_err();
        assert_eq!(err.kind(), crate::error::ErrorKind::Numerical);
    }

    #[test]
    fn clamp_option_bounds_output() {
        let src = GradientScheme::multi_shell(1, &[(1000.0, 20), (2000.0, 20), (3000.0, 20)]).unwrap();
        let d = dwi_with([1, 1, 1], src.clone(), |_, g| if g % 2 == 0 { 2.0 } else { -1.0 });
        let mask = ScalarVolume::mask_from([1, 1, 1], [1.0; 3], |_| true);
        let out = resample_qspace_with(&d, &mask, &ShoreBasisSpec::default(), &src, ResampleOptions { clip_max: Some(1.0) })
            .unwrap();
        assert!(out.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn coefficient_volume_matches_fitter() {
        let src = GradientScheme::multi_shell(1, &[(1000.0, 20), (2000.0, 20), (3000.0, 20)]).unwrap();
        let d = dwi_with([2, 1, 1], src, |p, g| (-(g as f64) / 50.0).exp() * (1.0 + p[0] as f64));
        let mask = ScalarVolume::mask_from([2, 1, 1], [1.0; 3], |_| true);
        let (rows, fitter) = fit_volume(&d, &mask, &ShoreBasisSpec::default()).unwrap();
        let direct = fitter.fit(&d.signal([1, 0, 0])).unwrap();
        for (a, b) in rows[50..100].iter().zip(direct.as_slice()) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} {b}");
        }
    }
}
