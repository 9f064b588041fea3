//! SHORE dictionary: basis evaluation, regularized least-squares fitting and
//! q-space interpolation.
//!
//! A signal sampled at q-points is modelled as `y = Φ c`, where column
//! `(n, l, m)` of `Φ` is
//!
//! ```text
//! κ(ζ,n,l) · (q²/ζ)^{l/2} · exp(−q²/2ζ) · L_{n−l}^{(l+1/2)}(q²/ζ) · Y_l^m(u)
//! κ(ζ,n,l) = sqrt(2 (n−l)! / (ζ^{3/2} Γ(n+3/2)))
//! ```
//!
//! Coefficients minimize `‖y − Φc‖² + λ_l‖Lc‖² + λ_n‖Nc‖²` with diagonal
//! `L = l(l+1)`, `N = n(n+1)`, giving
//! `ĉ = (ΦᵀΦ + λ_l LᵀL + λ_n NᵀN)⁻¹ Φᵀ y`. The system matrix is factored once
//! per `(design, λ)` and shared read-only by every voxel.
//!
//! The index set couples the angular and radial bounds (`L = N`): even
//! `l ≤ N`, `l ≤ n ≤ (N + l)/2`, `−l ≤ m ≤ l`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::scheme::{GradientScheme, DEFAULT_TAU};

/// One basis function `(n, l, m)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ShoreIndex {
    pub n: u32,
    pub l: u32,
    pub m: i32,
}

/// Number of basis functions for an even radial order `N`:
/// `(F+1)(F+2)(4F+3)/6` with `F = N/2`.
pub fn basis_size(radial_order: u32) -> usize {
    let f = (radial_order / 2) as usize;
    (f + 1) * (f + 2) * (4 * f + 3) / 6
}

/// Enumerates the basis in column order: `l` ascending over even values,
/// then `n` from `l` to `(N+l)/2`, then `m` from `−l` to `l`.
pub fn index_set(radial_order: u32) -> Result<Vec<ShoreIndex>> {
    if radial_order % 2 != 0 {
        return Err(Error::Invalid(format!("radial order {radial_order} must be even")));
    }
    let mut out = Vec::with_capacity(basis_size(radial_order));
    for l in (0..=radial_order).step_by(2) {
        for n in l..=(radial_order + l) / 2 {
            for m in -(l as i32)..=(l as i32) {
                out.push(ShoreIndex { n, l, m });
            }
        }
    }
    Ok(out)
}

/// Generalized Laguerre polynomial `L_k^{(α)}(x)` by the three-term
/// recurrence.
pub fn laguerre(k: u32, alpha: f64, x: f64) -> f64 {
    let mut prev = 1.0;
    if k == 0 {
        return prev;
    }
    let mut cur = 1.0 + alpha - x;
    for j in 2..=k {
        let j = f64::from(j);
        let next = ((2.0 * j - 1.0 + alpha - x) * cur - (j - 1.0 + alpha) * prev) / j;
        prev = cur;
        cur = next;
    }
    cur
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection: Γ(x)Γ(1−x) = π / sin(πx)
        return (PI / (PI * x).sin()).abs().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Associated Legendre function `P_l^m(x)` for `m ≥ 0`, without the
/// Condon–Shortley phase.
fn assoc_legendre(l: u32, m: u32, x: f64) -> f64 {
    let somx2 = ((1.0 - x) * (1.0 + x)).max(0.0).sqrt();
    let mut pmm = 1.0;
    let mut fact = 1.0;
    for _ in 0..m {
        pmm *= fact * somx2;
        fact += 2.0;
    }
    if l == m {
        return pmm;
    }
    let mut pmmp1 = x * f64::from(2 * m + 1) * pmm;
    if l == m + 1 {
        return pmmp1;
    }
    let mut pll = 0.0;
    for ll in (m + 2)..=l {
        pll = (x * f64::from(2 * ll - 1) * pmmp1 - f64::from(ll + m - 1) * pmm) / f64::from(ll - m);
        pmm = pmmp1;
        pmmp1 = pll;
    }
    pll
}

/// Real orthonormal spherical harmonic `Y_l^m` at a unit direction.
///
/// `m = 0` gives `Y_l^0`; `m > 0` gives `√2 (−1)^m Re Y_l^m`; `m < 0` gives
/// `√2 (−1)^m Im Y_l^{|m|}` (complex harmonics with the Condon–Shortley
/// phase). The sign factors cancel that phase, so e.g. `Y_1^1 ∝ x` and
/// `Y_1^{−1} ∝ y`.
pub fn real_sph_harm(l: u32, m: i32, direction: [f64; 3]) -> Result<f64> {
    let am = m.unsigned_abs();
    if am > l {
        return Err(Error::Invalid(format!("|m| = {am} exceeds l = {l}")));
    }
    let [x, y, z] = direction;
    let cos_theta = z.clamp(-1.0, 1.0);
    let phi = y.atan2(x);
    let norm = (f64::from(2 * l + 1) / (4.0 * PI)
        * (ln_gamma(f64::from(l - am) + 1.0) - ln_gamma(f64::from(l + am) + 1.0)).exp())
    .sqrt();
    let p = norm * assoc_legendre(l, am, cos_theta);
    Ok(match m {
        0 => p,
        m if m > 0 => 2f64.sqrt() * p * (f64::from(am) * phi).cos(),
        _ => 2f64.sqrt() * p * (f64::from(am) * phi).sin(),
    })
}

/// Basis configuration. Defaults: `N = 6`, `ζ = 700`, `λ_l = λ_n = 1e-8`,
/// `τ = 1/(4π²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShoreBasisSpec {
    pub radial_order: u32,
    pub zeta: f64,
    pub lambda_l: f64,
    pub lambda_n: f64,
    pub tau: f64,
}

impl Default for ShoreBasisSpec {
    fn default() -> Self {
        Self {
            radial_order: 6,
            zeta: 700.0,
            lambda_l: 1e-8,
            lambda_n: 1e-8,
            tau: DEFAULT_TAU,
        }
    }
}

impl ShoreBasisSpec {
    pub fn validate(&self) -> Result<()> {
        if self.radial_order % 2 != 0 {
            return Err(Error::Invalid(format!("radial order {} must be even", self.radial_order)));
        }
        if !(self.zeta > 0.0 && self.zeta.is_finite()) {
            return Err(Error::Invalid(format!("zeta {} must be > 0", self.zeta)));
        }
        if !(self.lambda_l >= 0.0 && self.lambda_n >= 0.0) {
            return Err(Error::Invalid("regularization weights must be >= 0".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Invalid(format!("tau {} must be > 0", self.tau)));
        }
        Ok(())
    }

    pub fn lambdas(&self) -> Lambdas {
        Lambdas { l: self.lambda_l, n: self.lambda_n }
    }
}

/// Regularization weights `(λ_l, λ_n)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lambdas {
    pub l: f64,
    pub n: f64,
}

/// Normalization constant `κ(ζ, n, l)`.
fn kappa(zeta: f64, n: u32, l: u32) -> f64 {
    let ln = 2f64.ln() + ln_gamma(f64::from(n - l) + 1.0) - 1.5 * zeta.ln() - ln_gamma(f64::from(n) + 1.5);
    (0.5 * ln).exp()
}

/// Evaluated dictionary for one scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub values: DMatrix<f64>,
    pub index_set: Vec<ShoreIndex>,
    pub scheme_fingerprint: u64,
}

impl DesignMatrix {
    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }
}

/// Evaluates `Φ` for `scheme` (rows) and the basis of `spec` (columns).
/// q-magnitudes use the basis τ.
pub fn design_matrix(scheme: &GradientScheme, spec: &ShoreBasisSpec) -> Result<DesignMatrix> {
    spec.validate()?;
    let index = index_set(spec.radial_order)?;
    let q = scheme.q_coordinates_with_tau(spec.tau);
    let kappas: Vec<f64> = index.iter().map(|ix| kappa(spec.zeta, ix.n, ix.l)).collect();
    let mut values = DMatrix::zeros(q.len(), index.len());
    for (i, qp) in q.iter().enumerate() {
        let x = qp.magnitude * qp.magnitude / spec.zeta;
        let gauss = (-x / 2.0).exp();
        for (j, ix) in index.iter().enumerate() {
            let radial_power = if ix.l == 0 { 1.0 } else { x.powf(f64::from(ix.l) / 2.0) };
            let radial = kappas[j] * radial_power * gauss * laguerre(ix.n - ix.l, f64::from(ix.l) + 0.5, x);
            values[(i, j)] = radial * real_sph_harm(ix.l, ix.m, qp.direction)?;
        }
    }
    Ok(DesignMatrix { values, index_set: index, scheme_fingerprint: scheme.fingerprint() })
}

/// Diagonals of the angular (`l(l+1)`) and radial (`n(n+1)`) penalties.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerSpec {
    pub l_diag: Vec<f64>,
    pub n_diag: Vec<f64>,
}

impl RegularizerSpec {
    pub fn from_index_set(index: &[ShoreIndex]) -> Self {
        Self {
            l_diag: index.iter().map(|ix| f64::from(ix.l * (ix.l + 1))).collect(),
            n_diag: index.iter().map(|ix| f64::from(ix.n * (ix.n + 1))).collect(),
        }
    }
}

/// SHORE coefficients, one per design column.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientVector(pub Vec<f64>);

impl CoefficientVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Factored normal equations for one `(design, λ)` pair.
#[derive(Debug, Clone)]
pub struct ShoreFitter {
    design: DesignMatrix,
    factor: Cholesky<f64, Dyn>,
}

impl ShoreFitter {
    /// Forms `A = ΦᵀΦ + λ_l LᵀL + λ_n NᵀN` and factors it. Fails when `A` is
    /// not numerically positive definite.
    pub fn new(design: DesignMatrix, reg: &RegularizerSpec, lambdas: Lambdas) -> Result<Self> {
        let k = design.cols();
        if reg.l_diag.len() != k || reg.n_diag.len() != k {
            return Err(Error::Dimension(format!(
                "regularizer length {} does not match {k} design columns",
                reg.l_diag.len()
            )));
        }
        let mut a = design.values.tr_mul(&design.values);
        for j in 0..k {
            a[(j, j)] += lambdas.l * reg.l_diag[j].powi(2) + lambdas.n * reg.n_diag[j].powi(2);
        }
        let max_diag = (0..k).map(|j| a[(j, j)]).fold(0.0_f64, f64::max);
        let factor = Cholesky::new(a)
            .ok_or_else(|| Error::Singular("normal equations are not positive definite".into()))?;
        // Pivots below this scale mean the system is rank deficient to
        // working precision.
        let floor = max_diag * 1e-14 * k as f64;
        let l = factor.l_dirty();
        if max_diag <= 0.0 || (0..k).any(|j| l[(j, j)].powi(2) <= floor) {
            return Err(Error::Singular(
                "normal equations are singular to working precision (rank-deficient dictionary with zero regularization)"
                    .into(),
            ));
        }
        Ok(Self { design, factor })
    }

    /// Factors the default regularizer for a design built from `spec`.
    pub fn from_spec(design: DesignMatrix, spec: &ShoreBasisSpec) -> Result<Self> {
        let reg = RegularizerSpec::from_index_set(&design.index_set);
        Self::new(design, &reg, spec.lambdas())
    }

    pub fn design(&self) -> &DesignMatrix {
        &self.design
    }

    /// `ĉ = A⁻¹ Φᵀ y`.
    pub fn fit(&self, signal: &[f64]) -> Result<CoefficientVector> {
        if signal.len() != self.design.rows() {
            return Err(Error::Dimension(format!(
                "signal has {} samples, design has {} rows",
                signal.len(),
                self.design.rows()
            )));
        }
        let y = DVector::from_column_slice(signal);
        let rhs = self.design.values.tr_mul(&y);
        let c = self.factor.solve(&rhs);
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite SHORE coefficients".into()));
        }
        Ok(CoefficientVector(c.as_slice().to_vec()))
    }

    /// The linear map `A⁻¹ Φᵀ` as a `K × M` matrix.
    pub fn pseudo_inverse(&self) -> DMatrix<f64> {
        self.factor.solve(&self.design.values.transpose())
    }
}

/// One-shot fit; factors the system for a single signal.
pub fn fit_coefficients(
    design: &DesignMatrix,
    reg: &RegularizerSpec,
    lambdas: Lambdas,
    signal: &[f64],
) -> Result<CoefficientVector> {
    ShoreFitter::new(design.clone(), reg, lambdas)?.fit(signal)
}

/// Evaluates `Φ_t ĉ`.
pub fn interpolate(coeffs: &CoefficientVector, target: &DesignMatrix) -> Result<Vec<f64>> {
    if coeffs.0.len() != target.cols() {
        return Err(Error::Dimension(format!(
            "{} coefficients for a {}-column dictionary",
            coeffs.0.len(),
            target.cols()
        )));
    }
    let c = DVector::from_column_slice(&coeffs.0);
    Ok((&target.values * c).as_slice().to_vec())
}

/// Precomputed end-to-end map `Φ_t (ΦᵀΦ + Λ)⁻¹ Φᵀ` from a source scheme to a
/// target scheme, applied per voxel as one matrix-vector product.
#[derive(Debug, Clone)]
pub struct QSpaceInterpolator {
    operator: DMatrix<f64>,
    // Row-major copy for the per-voxel product.
    rows: Vec<f64>,
}

impl QSpaceInterpolator {
    pub fn new(fitter: &ShoreFitter, target: &DesignMatrix) -> Result<Self> {
        if target.index_set != fitter.design().index_set {
            return Err(Error::Dimension("source and target dictionaries use different bases".into()));
        }
        let operator = &target.values * fitter.pseudo_inverse();
        let rows = operator.transpose().as_slice().to_vec();
        Ok(Self { operator, rows })
    }

    /// Builds both dictionaries from `spec` and factors the source system.
    pub fn between(source: &GradientScheme, target: &GradientScheme, spec: &ShoreBasisSpec) -> Result<Self> {
        let fitter = ShoreFitter::from_spec(design_matrix(source, spec)?, spec)?;
        Self::new(&fitter, &design_matrix(target, spec)?)
    }

    pub fn source_len(&self) -> usize {
        self.operator.ncols()
    }

    pub fn target_len(&self) -> usize {
        self.operator.nrows()
    }

    pub fn operator(&self) -> &DMatrix<f64> {
        &self.operator
    }

    /// Writes the interpolated signal for `signal` into `out`.
    pub fn apply_into(&self, signal: &[f64], out: &mut [f64]) -> Result<()> {
        if signal.len() != self.source_len() || out.len() != self.target_len() {
            return Err(Error::Dimension(format!(
                "interpolator maps {} -> {} samples, got {} -> {}",
                self.source_len(),
                self.target_len(),
                signal.len(),
                out.len()
            )));
        }
        for (o, row) in out.iter_mut().zip(self.rows.chunks_exact(signal.len())) {
            *o = row.iter().zip(signal).map(|(a, b)| a * b).sum();
        }
        Ok(())
    }

    pub fn apply(&self, signal: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.target_len()];
        self.apply_into(signal, &mut out)?;
        Ok(out)
    }
}

/// Sidecar text listing the basis in column order, with the basis settings
/// (including the coupled angular order) as `#` header lines.
pub fn index_sidecar(spec: &ShoreBasisSpec, index: &[ShoreIndex]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# radial_order = {}", spec.radial_order);
    let _ = writeln!(s, "# angular_order = {}", spec.radial_order);
    let _ = writeln!(s, "# zeta = {}", spec.zeta);
    let _ = writeln!(s, "# lambda_l = {}", spec.lambda_l);
    let _ = writeln!(s, "# lambda_n = {}", spec.lambda_n);
    let _ = writeln!(s, "# tau = {}", spec.tau);
    let _ = writeln!(s, "# columns: n l m");
    for ix in index {
        let _ = writeln!(s, "{} {} {}", ix.n, ix.l, ix.m);
    }
    s
}
