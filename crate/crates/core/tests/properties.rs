use proptest::prelude::*;
use qxfer_core::patches::{assemble, eligible_centers, extract_qdl, extract_sr, PatchGeometry};
use qxfer_core::resample::{block_mean_downsample, resample_qspace};
use qxfer_core::shore::real_sph_harm;
use qxfer_core::synth::{add_rician_noise, isotropic, signal, Compartment, VoxelModel};
use qxfer_core::volume::{linear_index, voxels};
use qxfer_core::{
    design_matrix, read_nifti, write_nifti, Datatype, DwiVolume, GradientEntry, GradientScheme, QSpaceInterpolator,
    ScalarVolume, ShoreBasisSpec, VolumeHeader,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn datatype() -> impl Strategy<Value = Datatype> {
    prop_oneof![Just(Datatype::U8), Just(Datatype::F32), Just(Datatype::F64)]
}

fn volume_from(dims: [usize; 3], values: &[f64]) -> ScalarVolume {
    let mut v = ScalarVolume::zeros(dims, [1.0; 3]);
    let n = v.data.len();
    v.data.copy_from_slice(&values[..n]);
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nifti_round_trip_is_exact(
        dt in datatype(),
        dims in prop::collection::vec(1usize..5, 1..=4),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let header = VolumeHeader::new(&dims, [1.0, 1.5, 2.0], dt);
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| match dt {
                Datatype::U8 => f64::from(rng.random::<u8>()),
                Datatype::F32 => f64::from(rng.random_range(-1e6f32..1e6)),
                Datatype::F64 => rng.random_range(-1e6..1e6),
            })
            .collect();
        let bytes = write_nifti(&header, &data).unwrap();
        let (back, values) = read_nifti(&bytes).unwrap();
        prop_assert_eq!(&values, &data);
        prop_assert_eq!(back.datatype, dt);
        prop_assert_eq!(write_nifti(&back, &values).unwrap(), bytes);
    }

    #[test]
    fn interpolation_is_linear(seed in any::<u64>(), alpha in -5.0f64..5.0) {
        let source = GradientScheme::multi_shell(1, &[(1000.0, 20), (2000.0, 20), (3000.0, 20)]).unwrap();
        let target = GradientScheme::multi_shell_rotated(0, &[(1000.0, 18), (3000.0, 18)], 0.35).unwrap();
        let interp = QSpaceInterpolator::between(&source, &target, &ShoreBasisSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..source.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..source.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let scaled: Vec<f64> = a.iter().map(|x| alpha * x).collect();
        let (fa, fb) = (interp.apply(&a).unwrap(), interp.apply(&b).unwrap());
        let (fs, fsc) = (interp.apply(&sum).unwrap(), interp.apply(&scaled).unwrap());
        for i in 0..fa.len() {
            prop_assert!((fs[i] - fa[i] - fb[i]).abs() < 1e-10);
            prop_assert!((fsc[i] - alpha * fa[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn block_mean_preserves_global_mean(
        gamma in 1usize..4,
        m in prop::array::uniform3(1usize..4),
        volumes in 1usize..3,
        seed in any::<u64>(),
    ) {
        let dims = m.map(|k| k * gamma);
        let n: usize = dims.iter().product::<usize>() * volumes;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-100.0..100.0)).collect();
        let (low, low_dims) = block_mean_downsample(&data, dims, volumes, gamma).unwrap();
        prop_assert_eq!(low_dims, m);
        let before = data.iter().sum::<f64>() / n as f64;
        let after = low.iter().sum::<f64>() / low.len() as f64;
        prop_assert!((before - after).abs() < 1e-11);
    }

    #[test]
    fn sample_count_matches_brute_force(
        dims in prop::array::uniform3(1usize..8),
        density in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep: Vec<bool> = voxels(dims).map(|_| rng.random_bool(density)).collect();
        let mask = ScalarVolume::mask_from(dims, [1.0; 3], |p| keep[linear_index(dims, p)]);
        let mut brute = 0;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let inside = [x, y, z].iter().zip(&dims).all(|(&c, &d)| c >= 1 && c + 1 < d);
                    if inside && keep[x + dims[0] * (y + dims[1] * z)] {
                        brute += 1;
                    }
                }
            }
        }
        prop_assert_eq!(eligible_centers(&mask, 3, 1).len(), brute);
    }

    #[test]
    fn extract_then_assemble_is_lossless(
        dims in prop::array::uniform3(3usize..7),
        density in 0.2f64..1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep: Vec<bool> = voxels(dims).map(|_| rng.random_bool(density)).collect();
        let mask = ScalarVolume::mask_from(dims, [1.0; 3], |p| keep[linear_index(dims, p)]);
        let scheme = GradientScheme::multi_shell(0, &[(1000.0, 3)]).unwrap();
        let dwi = DwiVolume::zeros(dims, [1.0; 3], scheme);
        let n: usize = dims.iter().product();
        let values: Vec<f64> = (0..8 * n).map(|_| rng.random_range(0.0..1.0)).collect();

        let gold = volume_from(dims, &values);
        let set = extract_qdl(&dwi, std::slice::from_ref(&gold), &mask, 3, 1).unwrap();
        let preds: Vec<_> = set.samples.iter().map(|s| (s.center, s.target.clone())).collect();
        let maps = assemble(&preds, &set.geometry, dims, [1.0; 3]).unwrap();
        for s in &set.samples {
            prop_assert_eq!(maps[0].get(s.center), gold.get(s.center));
        }

        let hr_dims = dims.map(|d| 2 * d);
        let hr_gold = volume_from(hr_dims, &values);
        let set = extract_sr(&dwi, std::slice::from_ref(&hr_gold), &mask, 2, 5, 2).unwrap();
        let preds: Vec<_> = set.samples.iter().map(|s| (s.center, s.target.clone())).collect();
        let maps = assemble(&preds, &set.geometry, hr_dims, [0.5; 3]).unwrap();
        for s in &set.samples {
            for o in voxels([2; 3]) {
                let p = [0, 1, 2].map(|a| 2 * s.center[a] + o[a]);
                prop_assert_eq!(maps[0].get(p), hr_gold.get(p));
            }
        }
    }

    #[test]
    fn resample_commutes_with_voxel_scaling(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let dims = [3, 2, 2];
        let source = GradientScheme::multi_shell(0, &[(1000.0, 20), (2000.0, 20), (3000.0, 20)]).unwrap();
        let target = GradientScheme::multi_shell_rotated(0, &[(1000.0, 18), (3000.0, 18)], 0.35).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dwi = DwiVolume::zeros(dims, [1.0; 3], source.clone());
        let mut scaled = dwi.clone();
        for p in voxels(dims) {
            let s: Vec<f64> = (0..source.len()).map(|_| rng.random_range(0.0..1.0)).collect();
            dwi.set_signal(p, &s);
            scaled.set_signal(p, &s.iter().map(|v| v * scale).collect::<Vec<_>>());
        }
        let mask = ScalarVolume::mask_from(dims, [1.0; 3], |_| true);
        let spec = ShoreBasisSpec::default();
        let a = resample_qspace(&dwi, &mask, &spec, &target).unwrap();
        let b = resample_qspace(&scaled, &mask, &spec, &target).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            prop_assert!((x * scale - y).abs() < 1e-10 * scale.max(1.0));
        }
    }
}

#[test]
fn patch_input_layout_decodes() {
    // Distinct values per (voxel, gradient) identify every slot of the
    // flattened input; decoding by the documented order recovers the patch.
    let dims = [4, 5, 6];
    let scheme = GradientScheme::multi_shell(0, &[(1000.0, 3)]).unwrap();
    let mut dwi = DwiVolume::zeros(dims, [1.0; 3], scheme);
    for p in voxels(dims) {
        let s: Vec<f64> = (0..3).map(|g| (linear_index(dims, p) * 3 + g) as f64).collect();
        dwi.set_signal(p, &s);
    }
    let mask = ScalarVolume::mask_from(dims, [1.0; 3], |_| true);
    let gold = ScalarVolume::zeros(dims, [1.0; 3]);
    let set = extract_qdl(&dwi, &[gold], &mask, 3, 1).unwrap();
    let geometry = PatchGeometry::qdl(3, 1);
    for s in &set.samples {
        for o in voxels([3; 3]) {
            let p = [0, 1, 2].map(|a| s.center[a] + o[a] - 1);
            for g in 0..3 {
                assert_eq!(s.input[geometry.input_offset(o, g)], dwi.signal(p)[g]);
            }
        }
    }
}

fn smallest_singular_value(b0: usize) -> f64 {
    let scheme = GradientScheme::multi_shell(b0, &[(1000.0, 90), (2000.0, 90), (3000.0, 90)]).unwrap();
    let d = design_matrix(&scheme, &ShoreBasisSpec::default()).unwrap();
    assert_eq!((d.rows(), d.cols()), (270 + b0, 50));
    d.values.clone().singular_values().iter().copied().fold(f64::INFINITY, f64::min)
}

#[test]
fn dense_design_has_full_column_rank() {
    // Three shells carry three radial samples, the l = 0 block has four radial
    // functions. One q = 0 row completes the rank.
    assert!(smallest_singular_value(0) < 1e-8);
    let min = smallest_singular_value(1);
    assert!(min > 1e-8, "smallest singular value {min:e}");
}

#[test]
fn spherical_harmonics_are_orthogonal_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 1_000_000;
    let (mut cross, mut norm) = (0.0, 0.0);
    for _ in 0..n {
        let z: f64 = rng.random_range(-1.0..1.0);
        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let r = (1.0 - z * z).sqrt();
        let u = [r * phi.cos(), r * phi.sin(), z];
        let a = real_sph_harm(2, 1, u).unwrap();
        let b = real_sph_harm(2, -1, u).unwrap();
        cross += a * b;
        norm += a * a;
    }
    let area = 4.0 * std::f64::consts::PI / n as f64;
    assert!((cross * area).abs() < 5e-3, "cross {}", cross * area);
    assert!((norm * area - 1.0).abs() < 5e-3, "norm {}", norm * area);
}

#[test]
fn isotropic_signal_is_rotation_independent() {
    // Exact only for the unregularized fit. The penalty trades residual for
    // coefficient size and leaks into l > 0 on non-symmetric direction sets.
    let spec = ShoreBasisSpec { lambda_l: 0.0, lambda_n: 0.0, ..ShoreBasisSpec::default() };
    let source = GradientScheme::multi_shell(1, &[(1000.0, 20), (2000.0, 20), (3000.0, 20)]).unwrap();
    let target = GradientScheme::multi_shell_rotated(0, &[(1000.0, 18), (3000.0, 18)], 1.1).unwrap();
    let interp = QSpaceInterpolator::between(&source, &target, &spec).unwrap();
    for d in [0.7e-3, 1.5e-3, 3.0e-3] {
        let model = VoxelModel::new(vec![Compartment { fraction: 1.0, tensor: isotropic(d) }], 1.0).unwrap();
        let out = interp.apply(&signal(&model, &source)).unwrap();
        for shell in out.chunks(18) {
            let (lo, hi) = shell.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            assert!(hi - lo < 1e-6, "spread {} for d = {d}", hi - lo);
        }
    }
}

#[test]
fn rician_noise_on_zero_signal_is_rayleigh() {
    let (sigma, s0) = (0.05, 100.0);
    let n = 1_000_000;
    let noisy = add_rician_noise(&vec![0.0; n], sigma, s0, 9).unwrap();
    let mean = noisy.iter().sum::<f64>() / n as f64;
    let expected = sigma * s0 * (std::f64::consts::PI / 2.0).sqrt();
    assert!((mean / expected - 1.0).abs() < 0.02, "mean {mean}, expected {expected}");
}

#[test]
fn t_cdf_matches_statrs() {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    for dof in [1.0, 2.0, 5.0, 10.0, 30.0] {
        let dist = StudentsT::new(0.0, 1.0, dof).unwrap();
        for t in [-6.0, -2.5, -1.0, -0.1, 0.0, 0.3, 1.7, 3.2, 8.0] {
            let ours = qxfer_core::eval::student_t_cdf(t, dof);
            assert!((ours - dist.cdf(t)).abs() < 1e-10, "dof {dof}, t {t}: {ours} vs {}", dist.cdf(t));
        }
    }
}

#[test]
fn mean_abs_error_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let dims = [5, 4, 3];
    let n = 60;
    let est = volume_from(dims, &(0..n).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<_>>());
    let gold = volume_from(dims, &(0..n).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<_>>());
    let mask = volume_from(dims, &(0..n).map(|_| f64::from(u8::from(rng.random_bool(0.6)))).collect::<Vec<_>>());
    let (mut sum, mut count) = (0.0, 0.0);
    for i in 0..n {
        if mask.data[i] == 1.0 {
            sum += (est.data[i] - gold.data[i]).abs();
            count += 1.0;
        }
    }
    let got = qxfer_core::eval::mean_abs_error(&est, &gold, &mask).unwrap();
    assert!((got - sum / count).abs() < 1e-12);
}

#[test]
fn b0_entries_map_to_origin() {
    let scheme = GradientScheme::new(vec![
        GradientEntry { bval: 0.0, bvec: [0.0; 3] },
        GradientEntry { bval: 5.0, bvec: [1.0, 0.0, 0.0] },
        GradientEntry { bval: 1000.0, bvec: [0.0, 1.0, 0.0] },
    ])
    .unwrap();
    let q = scheme.q_coordinates();
    assert_eq!(q[0].magnitude, 0.0);
    assert_eq!(q[1].magnitude, 0.0);
    assert!(q[2].magnitude > 0.0);
}
