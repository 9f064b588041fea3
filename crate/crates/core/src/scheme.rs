//! Diffusion gradient schemes and their q-space coordinates.
//!
//! A scheme is an ordered list of `(b-value, direction)` entries. The mapping
//! to q-space follows `|q| = sqrt(b / (4π²·τ))`; with the default
//! `τ = 1/(4π²)` this reduces to `|q| = sqrt(b)`. Entries at or below the b0
//! threshold are treated as `q = 0` regardless of their nominal b-value.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Default b0 threshold in s/mm².
pub const DEFAULT_B0_THRESHOLD: f64 = 10.0;

/// Default diffusion time, chosen so that `|q| = sqrt(b)`.
pub const DEFAULT_TAU: f64 = 1.0 / (4.0 * PI * PI);

const UNIT_TOLERANCE: f64 = 1e-4;

/// One acquisition: b-value in s/mm² and unit gradient direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientEntry {
    pub bval: f64,
    pub bvec: [f64; 3],
}

/// An ordered q-space sampling scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientScheme {
    entries: Vec<GradientEntry>,
    b0_threshold: f64,
    tau: f64,
}

/// A point in q-space, in spherical form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QPoint {
    pub magnitude: f64,
    pub direction: [f64; 3],
}

impl QPoint {
    /// Unit direction used for the origin.
    pub const ORIGIN_DIRECTION: [f64; 3] = [0.0, 0.0, 1.0];
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

impl GradientScheme {
    /// Builds a scheme with the default b0 threshold and τ.
    pub fn new(entries: Vec<GradientEntry>) -> Result<Self> {
        Self::with_params(entries, DEFAULT_B0_THRESHOLD, DEFAULT_TAU)
    }

    pub fn with_params(entries: Vec<GradientEntry>, b0_threshold: f64, tau: f64) -> Result<Self> {
        if !(b0_threshold >= 0.0) || !b0_threshold.is_finite() {
            return Err(Error::Scheme(format!("b0 threshold {b0_threshold} must be >= 0")));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Scheme(format!("tau {tau} must be > 0")));
        }
        for (i, e) in entries.iter().enumerate() {
            if !e.bval.is_finite() || e.bval < 0.0 {
                return Err(Error::Scheme(format!("entry {i}: b-value {} must be >= 0", e.bval)));
            }
            if e.bvec.iter().any(|c| !c.is_finite()) {
                return Err(Error::Scheme(format!("entry {i}: non-finite gradient direction")));
            }
            if e.bval > b0_threshold {
                let n = norm3(e.bvec);
                if (n - 1.0).abs() > UNIT_TOLERANCE {
                    return Err(Error::Scheme(format!(
                        "entry {i}: direction norm {n} is not unit for b = {}",
                        e.bval
                    )));
                }
            }
        }
        Ok(Self { entries, b0_threshold, tau })
    }

    /// Multi-shell scheme with `n_b0` leading b0 entries and, per shell,
    /// `count` directions spread quasi-uniformly over a hemisphere. Each
    /// shell's point set is rotated by a shell-dependent angle so that shells
    /// do not share directions.
    pub fn multi_shell(n_b0: usize, shells: &[(f64, usize)]) -> Result<Self> {
        Self::multi_shell_rotated(n_b0, shells, 0.0)
    }

    /// As [`GradientScheme::multi_shell`] with an extra azimuthal offset
    /// (radians) applied to every shell; different offsets give disjoint
    /// direction sets.
    pub fn multi_shell_rotated(n_b0: usize, shells: &[(f64, usize)], offset: f64) -> Result<Self> {
        let mut entries = Vec::with_capacity(n_b0 + shells.iter().map(|s| s.1).sum::<usize>());
        entries.extend((0..n_b0).map(|_| GradientEntry { bval: 0.0, bvec: [0.0; 3] }));
        for (k, &(bval, count)) in shells.iter().enumerate() {
            let phase = offset + k as f64 * 0.7;
            entries.extend(
                hemisphere_directions(count, phase)
                    .into_iter()
                    .map(|bvec| GradientEntry { bval, bvec }),
            );
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[GradientEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn b0_threshold(&self) -> f64 {
        self.b0_threshold
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn bvals(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.bval)
    }

    pub fn is_b0(&self, index: usize) -> bool {
        self.entries[index].bval <= self.b0_threshold
    }

    /// Per-entry b0 flags.
    pub fn b0_mask(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.is_b0(i)).collect()
    }

    pub fn b0_count(&self) -> usize {
        (0..self.len()).filter(|&i| self.is_b0(i)).count()
    }

    /// The scheme restricted to its diffusion-weighted entries.
    pub fn without_b0(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .copied()
            .filter(|e| e.bval > self.b0_threshold)
            .collect();
        Self { entries, b0_threshold: self.b0_threshold, tau: self.tau }
    }

    /// Distinct diffusion-weighted b-values, ascending, after rounding to
    /// the nearest multiple of `tolerance`.
    pub fn shells(&self, tolerance: f64) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for e in self.entries.iter().filter(|e| e.bval > self.b0_threshold) {
            if !out.iter().any(|&b| (b - e.bval).abs() <= tolerance) {
                out.push(e.bval);
            }
        }
        out.sort_by(|a, b| a.total_cmp(b));
        out
    }

    /// q-space coordinates using this scheme's τ.
    pub fn q_coordinates(&self) -> Vec<QPoint> {
        self.q_coordinates_with_tau(self.tau)
    }

    /// q-space coordinates for an explicit diffusion time.
    pub fn q_coordinates_with_tau(&self, tau: f64) -> Vec<QPoint> {
        let scale = 4.0 * PI * PI * tau;
        self.entries
            .iter()
            .map(|e| {
                if e.bval <= self.b0_threshold {
                    return QPoint { magnitude: 0.0, direction: QPoint::ORIGIN_DIRECTION };
                }
                let n = norm3(e.bvec);
                QPoint {
                    magnitude: (e.bval / scale).sqrt(),
                    direction: [e.bvec[0] / n, e.bvec[1] / n, e.bvec[2] / n],
                }
            })
            .collect()
    }

    /// Stable 64-bit FNV-1a digest of the entries, threshold and τ.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for e in &self.entries {
            eat(e.bval);
            e.bvec.iter().for_each(|&c| eat(c));
        }
        eat(self.b0_threshold);
        eat(self.tau);
        h
    }

    /// FSL-style bvals text: one row, 6 significant digits.
    pub fn to_fsl_bvals(&self) -> String {
        let mut s = join_row(self.entries.iter().map(|e| e.bval));
        s.push('\n');
        s
    }

    /// FSL-style bvecs text: three rows (x, y, z), 6 significant digits.
    pub fn to_fsl_bvecs(&self) -> String {
        let mut s = String::new();
        for axis in 0..3 {
            s.push_str(&join_row(self.entries.iter().map(|e| e.bvec[axis])));
            s.push('\n');
        }
        s
    }
}

/// Parses FSL `bval`/`bvec` text into a scheme (default threshold and τ).
///
/// Non-unit directions on diffusion-weighted entries are renormalized; a zero
/// direction is accepted only on b0 entries.
pub fn parse_fsl_gradients(bval_text: &str, bvec_text: &str) -> Result<GradientScheme> {
    parse_fsl_gradients_with(bval_text, bvec_text, DEFAULT_B0_THRESHOLD, DEFAULT_TAU)
}

pub fn parse_fsl_gradients_with(
    bval_text: &str,
    bvec_text: &str,
    b0_threshold: f64,
    tau: f64,
) -> Result<GradientScheme> {
    let bvals: Vec<f64> = parse_rows(bval_text, "bvals")?.into_iter().flatten().collect();
    let rows = parse_rows(bvec_text, "bvecs")?;
    if rows.len() != 3 {
        return Err(Error::Parse(format!("bvecs must have 3 rows, found {}", rows.len())));
    }
    for (axis, row) in rows.iter().enumerate() {
        if row.len() != bvals.len() {
            return Err(Error::Parse(format!(
                "bvecs row {axis} has {} values but bvals has {}",
                row.len(),
                bvals.len()
            )));
        }
    }
    let mut entries = Vec::with_capacity(bvals.len());
    for (i, &bval) in bvals.iter().enumerate() {
        let mut bvec = [rows[0][i], rows[1][i], rows[2][i]];
        if bval > b0_threshold {
            let n = norm3(bvec);
            if n == 0.0 {
                return Err(Error::Parse(format!("entry {i}: b = {bval} with zero gradient direction")));
            }
            bvec.iter_mut().for_each(|c| *c /= n);
        }
        entries.push(GradientEntry { bval, bvec });
    }
    GradientScheme::with_params(entries, b0_threshold, tau)
}

fn parse_rows(text: &str, what: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(r, line)| {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::Parse(format!("{what} row {r}: bad number {tok:?}")))
                })
                .collect()
        })
        .collect()
}

fn join_row(values: impl Iterator<Item = f64>) -> String {
    let mut s = String::new();
    for (i, v) in values.enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&format_significant(v, 6));
    }
    s
}

/// Formats like C's `%.{digits}g`.
pub fn format_significant(v: f64, digits: usize) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let exp = v.abs().log10().floor() as i32;
    let digits = digits.max(1) as i32;
    let mut s = String::new();
    if (-5..digits).contains(&exp) {
        let decimals = (digits - 1 - exp).max(0) as usize;
        let _ = write!(s, "{v:.decimals$}");
        // Rounding can carry into a new digit (9.999995 -> 10.00000); the
        // extra trailing zero is trimmed below.
        if s.contains('.') {
            let trimmed = s.trim_end_matches('0').trim_end_matches('.').len();
            s.truncate(trimmed);
        }
        if s == "-0" {
            s = "0".to_string();
        }
    } else {
        let _ = write!(s, "{:.*e}", (digits - 1) as usize, v);
        if let Some(epos) = s.find('e') {
            let (mant, exp) = s.split_at(epos);
            let mant = if mant.contains('.') {
                mant.trim_end_matches('0').trim_end_matches('.')
            } else {
                mant
            };
            s = format!("{mant}{exp}");
        }
    }
    s
}

/// `count` quasi-uniform unit vectors on the upper hemisphere, taken from a
/// Fibonacci lattice of `2·count` points over the sphere; `phase` rotates the
/// lattice about z.
pub fn hemisphere_directions(count: usize, phase: f64) -> Vec<[f64; 3]> {
    let total = 2 * count;
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / total as f64 * 2.0;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64 + phase;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}
