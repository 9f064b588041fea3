//! Masked error maps, paired Student's t-tests and summary tables.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::shore::ln_gamma;
use crate::volume::ScalarVolume;

/// Mean of `|estimate − gold|` over non-zero mask voxels.
pub fn mean_abs_error(estimate: &ScalarVolume, gold: &ScalarVolume, mask: &ScalarVolume) -> Result<f64> {
    if estimate.dims() != gold.dims() || estimate.dims() != mask.dims() {
        return Err(Error::Dimension(format!(
            "extents differ: estimate {:?}, gold {:?}, mask {:?}",
            estimate.dims(),
            gold.dims(),
            mask.dims()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((e, g), m) in estimate.data.iter().zip(&gold.data).zip(&mask.data) {
        if *m != 0.0 {
            sum += (e - g).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Invalid("evaluation mask is empty".into()));
    }
    Ok(sum / n as f64)
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    // The continued fraction converges fast below the mean; use symmetry above it.
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_fraction(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_fraction(b, a, 1.0 - x) / b
    }
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        for coef in [num, -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0))] {
            d = 1.0 + coef * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + coef / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            h *= d * c;
        }
        if (d * c - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// CDF of Student's t distribution with `dof` degrees of freedom.
pub fn student_t_cdf(t: f64, dof: f64) -> f64 {
    let tail = 0.5 * incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t));
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p_two_sided: f64,
    pub dof: usize,
    pub mean_difference: f64,
}

/// Paired two-sided t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("paired samples of lengths {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Invalid(format!("a paired t-test needs at least 2 pairs, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return Err(Error::Numerical("differences have zero variance".into()));
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dof = n - 1;
    let p = incomplete_beta(dof as f64 / 2.0, 0.5, dof as f64 / (dof as f64 + t * t)).min(1.0);
    Ok(TTest { t, p_two_sided: p, dof, mean_difference: mean })
}

/// Per-subject errors: one row per subject, one named column per
/// measure/method pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl ErrorTable {
    pub fn new(columns: Vec<String>) -> Self {
        Self { columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::Dimension(format!("row of {} values for {} columns", row.len(), self.columns.len())));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    /// Tab-separated, header line first, one subject per line.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("subject\t{}\n", self.columns.join("\t"));
        for (i, r) in self.rows.iter().enumerate() {
            let cells: Vec<String> = r.iter().map(|v| format!("{v:.8e}")).collect();
            let _ = writeln!(s, "{i}\t{}", cells.join("\t"));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub columns: Vec<String>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub subjects: usize,
}

/// Column means and sample standard deviations. A single subject gives
/// standard deviation 0.
pub fn summarize(table: &ErrorTable) -> Result<Summary> {
    let n = table.rows.len();
    if n == 0 || table.columns.is_empty() {
        return Err(Error::Invalid("cannot summarize an empty table".into()));
    }
    if n == 1 {
        log::warn!("single subject: standard deviations reported as 0");
    }
    let mut means = Vec::with_capacity(table.columns.len());
    let mut sds = Vec::with_capacity(table.columns.len());
    for c in 0..table.columns.len() {
        let col: Vec<f64> = table.rows.iter().map(|r| r[c]).collect();
        let m = col.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        means.push(m);
        sds.push(sd);
    }
    Ok(Summary { columns: table.columns.clone(), means, sds, subjects: n })
}

impl Summary {
    /// `key = value` lines: `<column>.mean` and `<column>.sd`.
    pub fn to_key_value(&self) -> String {
        let mut s = format!("subjects = {}\n", self.subjects);
        for ((c, m), sd) in self.columns.iter().zip(&self.means).zip(&self.sds) {
            let _ = writeln!(s, "{c}.mean = {m:.8e}");
            let _ = writeln!(s, "{c}.sd = {sd:.8e}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(data: Vec<f64>) -> ScalarVolume {
        let mut v = ScalarVolume::zeros([data.len(), 1, 1], [1.0; 3]);
        v.data = data;
        v
    }

    #[test]
    fn mae_examples() {
        let gold = vol(vec![0.1, 0.5, 0.9, 0.3]);
        let mask = vol(vec![1.0, 1.0, 0.0, 1.0]);
        assert_eq!(mean_abs_error(&gold, &gold, &mask).unwrap(), 0.0);
        let shifted = vol(gold.data.iter().map(|v| v + 0.1).collect());
        assert!((mean_abs_error(&shifted, &gold, &mask).unwrap() - 0.1).abs() < 1e-15);
        assert!(mean_abs_error(&gold, &gold, &vol(vec![0.0; 4])).is_err());
        assert!(mean_abs_error(&gold, &vol(vec![0.0; 3]), &mask).is_err());
    }

    #[test]
    fn t_test_reference() {
        let r = paired_t_test(&[1.0, 2.0, 3.0], &[0.0; 3]).unwrap();
        assert!((r.t - 3.464101615137754).abs() < 1e-12);
        assert!((r.p_two_sided - 0.07417990022744855).abs() < 1e-10);
        assert_eq!(r.dof, 2);
        let a = [0.3, 0.5, 0.2, 0.9, 0.4, 0.6];
        let b = [0.25, 0.41, 0.22, 0.7, 0.3, 0.52];
        let r = paired_t_test(&a, &b).unwrap();
        assert!((r.t - 2.8453215850374076).abs() < 1e-10);
        assert!((r.p_two_sided - 0.03602080934101742).abs() < 1e-10);
        let s = paired_t_test(&b, &a).unwrap();
        assert_eq!(s.t, -r.t);
        assert_eq!(s.p_two_sided, r.p_two_sided);
    }

    #[test]
    fn t_test_errors() {
        assert!(paired_t_test(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(paired_t_test(&[1.0], &[0.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn incomplete_beta_reference() {
        assert!((incomplete_beta(2.5, 0.5, 0.3) - 0.018927124071945658).abs() < 1e-13);
        assert!((incomplete_beta(10.0, 3.0, 0.8) - 0.5583457484800002).abs() < 1e-13);
        assert!((incomplete_beta(0.5, 0.5, 0.1) - 0.20483276469913345).abs() < 1e-13);
    }

    #[test]
    fn summary_examples() {
        let mut t = ErrorTable::new(vec!["a".into(), "b".into()]);
        t.push(vec![1.0, 2.0]).unwrap();
        let s = summarize(&t).unwrap();
        assert_eq!(s.sds, vec![0.0, 0.0]);
        t.push(vec![3.0, 2.0]).unwrap();
        t.push(vec![5.0, 2.0]).unwrap();
        let s = summarize(&t).unwrap();
        assert_eq!(s.means, vec![3.0, 2.0]);
        assert_eq!(s.sds, vec![2.0, 0.0]);
        assert!(s.to_key_value().contains("a.sd = 2.00000000e0"));
        assert!(t.to_tsv().starts_with("subject\ta\tb\n0\t"));
        assert!(summarize(&ErrorTable::new(vec!["a".into()])).is_err());
        assert!(t.push(vec![1.0]).is_err());
    }
}
