//! Per-voxel comparison estimator: non-negative least squares on a fixed
//! dictionary of Gaussian compartment signals, fitted directly to the
//! (undersampled) target measurements.
//!
//! Atoms are axially symmetric tensors over a set of orientations and
//! perpendicular diffusivities plus isotropic tensors. The weights give the
//! same three measures as [`crate::synth::ground_truth_measures`].

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::resample::map_masked_voxels;
use crate::scheme::{hemisphere_directions, GradientScheme};
use crate::synth::{axial, fractional_anisotropy, isotropic, Tensor, FA_THRESHOLD};
use crate::volume::{DwiVolume, ScalarVolume};

#[derive(Debug, Clone, PartialEq)]
pub struct DictionarySpec {
    pub d_par: f64,
    pub d_perp: Vec<f64>,
    pub d_iso: Vec<f64>,
    pub directions: usize,
}

impl Default for DictionarySpec {
    fn default() -> Self {
        Self {
            d_par: 1.7e-3,
            d_perp: vec![0.1e-3, 0.3e-3, 0.5e-3, 0.7e-3],
            d_iso: vec![0.5e-3, 1.0e-3, 1.5e-3, 2.0e-3, 2.5e-3, 3.0e-3],
            directions: 100,
        }
    }
}

/// Lawson–Hanson active-set solver for `min ‖Ax − b‖` subject to `x ≥ 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if b.len() != a.nrows() {
        return Err(Error::Dimension(format!("{} rows but {} observations", a.nrows(), b.len())));
    }
    nnls_gram(&a.tr_mul(a), &a.tr_mul(b))
}

/// [`nnls`] from the normal equations: `gram = AᵀA`, `atb = Aᵀb`.
pub fn nnls_gram(gram: &DMatrix<f64>, atb: &DVector<f64>) -> Result<DVector<f64>> {
    let n = gram.ncols();
    if gram.nrows() != n || atb.len() != n {
        return Err(Error::Dimension(format!("gram {:?} with {} right-hand sides", gram.shape(), atb.len())));
    }
    let tol = 1e-12 * gram.amax().max(1.0) * atb.amax().max(1.0) * n as f64;
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let mut w = atb.clone();
    for _ in 0..3 * n + 10 {
        let next = (0..n).filter(|&j| !passive[j]).max_by(|&i, &j| w[i].total_cmp(&w[j]));
        match next {
            Some(j) if w[j] > tol => passive[j] = true,
            _ => return Ok(x),
        }
        loop {
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let sub = gram.select_rows(&idx).select_columns(&idx);
            let rhs = DVector::from_iterator(idx.len(), idx.iter().map(|&j| atb[j]));
            let sol = match sub.clone().cholesky() {
                Some(c) => c.solve(&rhs),
                None => sub
                    .svd(true, true)
                    .solve(&rhs, 1e-14)
                    .map_err(|e| Error::Numerical(format!("nnls subproblem: {e}")))?,
            };
            if sol.iter().all(|&v| v > 0.0) {
                for (k, &j) in idx.iter().enumerate() {
                    x[j] = sol[k];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (k, &j) in idx.iter().enumerate() {
                if sol[k] <= 0.0 {
                    alpha = alpha.min(x[j] / (x[j] - sol[k]));
                }
            }
            for (k, &j) in idx.iter().enumerate() {
                x[j] += alpha * (sol[k] - x[j]);
                if x[j] <= tol {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
        w.copy_from(atb);
        for j in (0..n).filter(|&j| x[j] != 0.0) {
            w.axpy(-x[j], &gram.column(j), 1.0);
        }
    }
    Ok(x)
}

#[derive(Debug, Clone)]
pub struct DictionaryBaseline {
    /// Atom signals on the diffusion-weighted entries, plus a final row of
    /// ones tying the weights to the b0-normalized scale.
    atoms: DMatrix<f64>,
    gram: DMatrix<f64>,
    tensors: Vec<Tensor>,
    anisotropic: Vec<bool>,
    n_signals: usize,
}

impl DictionaryBaseline {
    /// `scheme` lists the diffusion-weighted entries the signals will hold
    /// (b0 entries are ignored).
    pub fn new(scheme: &GradientScheme, spec: &DictionarySpec) -> Result<Self> {
        let dw = scheme.without_b0();
        if dw.is_empty() {
            return Err(Error::Invalid("baseline needs diffusion-weighted entries".into()));
        }
        if spec.directions == 0 || (spec.d_perp.is_empty() && spec.d_iso.is_empty()) {
            return Err(Error::Invalid("empty dictionary".into()));
        }
        let mut tensors = Vec::new();
        for u in hemisphere_directions(spec.directions, 0.0) {
            for &dp in &spec.d_perp {
                tensors.push(axial(spec.d_par, dp, u));
            }
        }
        tensors.extend(spec.d_iso.iter().map(|&d| isotropic(d)));
        let m = dw.len();
        let atoms = DMatrix::from_fn(m + 1, tensors.len(), |i, k| {
            if i == m {
                return 1.0;
            }
            let e = &dw.entries()[i];
            let t = &tensors[k];
            let g = e.bvec;
            let mut q = 0.0;
            for r in 0..3 {
                for c in 0..3 {
                    q += g[r] * t[r][c] * g[c];
                }
            }
            (-e.bval * q).exp()
        });
        let anisotropic = tensors.iter().map(|t| fractional_anisotropy(t) > FA_THRESHOLD).collect();
        let gram = atoms.tr_mul(&atoms);
        Ok(Self { atoms, gram, tensors, anisotropic, n_signals: m })
    }

    pub fn n_atoms(&self) -> usize {
        self.tensors.len()
    }

    /// Non-negative atom weights for one b0-normalized signal.
    pub fn weights(&self, signal: &[f64]) -> Result<Vec<f64>> {
        if signal.len() != self.n_signals {
            return Err(Error::Dimension(format!(
                "signal has {} entries, dictionary expects {}",
                signal.len(),
                self.n_signals
            )));
        }
        let mut b = DVector::from_element(self.n_signals + 1, 1.0);
        b.rows_mut(0, self.n_signals).copy_from_slice(signal);
        Ok(nnls_gram(&self.gram, &self.atoms.tr_mul(&b))?.as_slice().to_vec())
    }

    /// `[f_aniso, f_iso, fa_aniso]` from the fitted weights.
    pub fn estimate(&self, signal: &[f64]) -> Result<[f64; 3]> {
        let w = self.weights(signal)?;
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return Ok([0.0, 0.0, 0.0]);
        }
        let mut aniso = 0.0;
        let mut t = [[0.0; 3]; 3];
        for (k, &wk) in w.iter().enumerate() {
            if self.anisotropic[k] && wk > 0.0 {
                aniso += wk;
                for r in 0..3 {
                    for c in 0..3 {
                        t[r][c] += wk * self.tensors[k][r][c];
                    }
                }
            }
        }
        let f = aniso / total;
        let fa = if aniso > 0.0 { fractional_anisotropy(&t) } else { 0.0 };
        Ok([f, 1.0 - f, fa])
    }

    /// Measure maps for a b0-normalized series (no b0 entries).
    pub fn estimate_volume(&self, dwi: &DwiVolume, mask: &ScalarVolume) -> Result<Vec<ScalarVolume>> {
        let rows = map_masked_voxels(dwi, mask, 3, |s, out| {
            out.copy_from_slice(&self.estimate(s)?);
            Ok(())
        })?;
        let dims = dwi.dims();
        let nvox = dwi.n_voxels();
        let mut maps: Vec<ScalarVolume> = (0..3).map(|_| ScalarVolume::zeros(dims, dwi.header.voxel_size)).collect();
        for v in 0..nvox {
            for (k, map) in maps.iter_mut().enumerate() {
                map.data[v] = rows[v * 3 + k];
            }
        }
        Ok(maps)
    }
}
