//! Transfer Matrix Method in extended precision.
//!
//! Each uniform segment maps the state vector at its left face to the state
//! at its right face. Axial and torsional motion use the 2x2 field matrix on
//! `(u, N)` / `(theta, T)`. Lateral motion uses the 4x4 Euler-Bernoulli field
//! matrix on `(v, slope, M, V)` built from Krylov functions. The chain matrix is
//! the ordered product `T_n ... T_1`.
//!
//! Long segments at high lateral frequencies produce `cosh` terms near `1e40`
//! whose differences carry the answer, which is why every entry is an MPFR
//! float at a configurable number of decimal digits.
//!
//! Transmission uses a unit harmonic force (or torque) at end 1 with both
//! ends otherwise free. The response at end 2 is scaled by the rigid-body
//! response of the whole chain (`F / (M omega^2)`), so the ratio is
//! dimensionless, tends to 1 below the first elastic mode, and is singular
//! exactly at the free-free natural frequencies.

use std::f64::consts::{LOG2_10, PI};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use rug::ops::Pow;
use rug::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Segment, SegmentChain};
use crate::response::{FrequencyGrid, ResponseCurve};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TmmError {
    #[error("frequency must be positive, got {0} Hz")]
    NonPositiveFrequency(f64),
    #[error("non-finite wavenumber at {0} Hz")]
    NonFinite(f64),
    #[error("empty segment chain")]
    EmptyChain,
    #[error("matrix dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("decimal_digits must be >= 16, got {0}")]
    Precision(u32),
}

/// Working precision in decimal digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrecisionConfig {
    pub decimal_digits: u32,
}

impl Default for PrecisionConfig {
    fn default() -> Self {
        Self { decimal_digits: 100 }
    }
}

impl PrecisionConfig {
    pub fn new(decimal_digits: u32) -> Result<Self, TmmError> {
        if decimal_digits < 16 {
            return Err(TmmError::Precision(decimal_digits));
        }
        Ok(Self { decimal_digits })
    }

    /// Binary mantissa width; one extra decimal digit, as mpmath does.
    pub fn bits(&self) -> u32 {
        ((self.decimal_digits as f64 + 1.0) * LOG2_10).round() as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeKind {
    Axial,
    Torsional,
    Lateral,
}

impl ModeKind {
    pub const ALL: [ModeKind; 3] = [ModeKind::Axial, ModeKind::Torsional, ModeKind::Lateral];

    pub fn dim(self) -> usize {
        match self {
            ModeKind::Lateral => 4,
            _ => 2,
        }
    }

    /// Names of the transmission channels this mode reports.
    pub fn dofs(self) -> &'static [&'static str] {
        match self {
            ModeKind::Axial => &["u"],
            ModeKind::Torsional => &["theta"],
            ModeKind::Lateral => &["deflection_1", "slope_1", "deflection_2", "slope_2"],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModeKind::Axial => "axial",
            ModeKind::Torsional => "torsional",
            ModeKind::Lateral => "lateral",
        }
    }
}

impl fmt::Display for ModeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModeKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "axial" => Ok(ModeKind::Axial),
            "torsional" => Ok(ModeKind::Torsional),
            "lateral" => Ok(ModeKind::Lateral),
            other => Err(format!("unknown mode '{other}' (expected axial, torsional or lateral)")),
        }
    }
}

/// Square field or chain matrix in MPFR floats, row-major.
///
/// The undamped field matrices are real, so entries are real floats.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    pub mode: ModeKind,
    pub frequency: f64,
    dim: usize,
    entries: Vec<Float>,
}

impl TransferMatrix {
    pub fn identity(mode: ModeKind, frequency: f64, bits: u32) -> Self {
        let dim = mode.dim();
        let entries = (0..dim * dim)
            .map(|k| Float::with_val(bits, if k % (dim + 1) == 0 { 1 } else { 0 }))
            .collect();
        Self { mode, frequency, dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, r: usize, c: usize) -> &Float {
        &self.entries[r * self.dim + c]
    }

    pub fn precision(&self) -> u32 {
        self.entries[0].prec()
    }

    pub fn to_f64(&self) -> Vec<Vec<f64>> {
        (0..self.dim).map(|r| (0..self.dim).map(|c| self.get(r, c).to_f64()).collect()).collect()
    }

    /// `self * rhs`.
    pub fn mul(&self, rhs: &TransferMatrix) -> Result<TransferMatrix, TmmError> {
        if self.dim != rhs.dim {
            return Err(TmmError::Dimension(self.dim, rhs.dim));
        }
        let n = self.dim;
        let bits = self.precision().max(rhs.precision());
        let mut entries = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                let terms = (0..n).map(|k| (self.get(r, k), rhs.get(k, c)));
                entries.push(Float::with_val(bits, Float::dot(terms)));
            }
        }
        Ok(TransferMatrix { mode: self.mode, frequency: self.frequency, dim: n, entries })
    }

    /// Determinant by Gaussian elimination with partial pivoting.
    pub fn determinant(&self) -> Float {
        let n = self.dim;
        let bits = self.precision();
        let mut a = self.entries.clone();
        let mut det = Float::with_val(bits, 1);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| {
                    let x = Float::with_val(bits, a[i * n + col].abs_ref());
                    let y = Float::with_val(bits, a[j * n + col].abs_ref());
                    x.partial_cmp(&y).unwrap_or(std::cmp::Ordering::Equal)
                })
                .unwrap_or(col);
            if a[pivot * n + col].is_zero() {
                return Float::with_val(bits, 0);
            }
            if pivot != col {
                for c in 0..n {
                    a.swap(pivot * n + c, col * n + c);
                }
                det = -det;
            }
            let p = a[col * n + col].clone();
            det *= &p;
            for r in col + 1..n {
                let factor = Float::with_val(bits, &a[r * n + col] / &p);
                for c in col..n {
                    let delta = Float::with_val(bits, &factor * &a[col * n + c]);
                    a[r * n + c] -= delta;
                }
            }
        }
        det
    }

    /// Largest absolute entry difference relative to the largest entry of `self`.
    pub fn relative_difference(&self, other: &TransferMatrix) -> f64 {
        let bits = self.precision();
        let mut scale = Float::with_val(bits, 0);
        let mut diff = Float::with_val(bits, 0);
        for (a, b) in self.entries.iter().zip(&other.entries) {
            let d = Float::with_val(bits, a - b).abs();
            let m = Float::with_val(bits, a.abs_ref());
            if d > diff {
                diff = d;
            }
            if m > scale {
                scale = m;
            }
        }
        (diff / scale).to_f64()
    }
}

fn flt(bits: u32, v: f64) -> Float {
    Float::with_val(bits, v)
}

fn angular(bits: u32, f: f64) -> Float {
    Float::with_val(bits, rug::float::Constant::Pi) * 2u32 * flt(bits, f)
}

/// `[[cos W, sin W / (K W)], [-K W sin W, cos W]]` with `W = omega w / c`.
fn wave_matrix(mode: ModeKind, f: f64, bits: u32, modulus: f64, section: f64, density: f64, width: f64) -> TransferMatrix {
    let speed = (flt(bits, modulus) / flt(bits, density)).sqrt();
    let phase = angular(bits, f) * flt(bits, width) / &speed;
    let stiffness = flt(bits, modulus) * flt(bits, section) / flt(bits, width);
    phase_matrix(mode, f, phase, stiffness)
}

fn phase_matrix(mode: ModeKind, f: f64, phase: Float, stiffness: Float) -> TransferMatrix {
    let bits = phase.prec();
    let (sin, cos) = phase.clone().sin_cos(Float::new(bits));
    let kw = stiffness * &phase;
    let upper = Float::with_val(bits, &sin / &kw);
    let lower = -(kw * &sin);
    TransferMatrix { mode, frequency: f, dim: 2, entries: vec![cos.clone(), upper, lower, cos] }
}

fn check_frequency(f: f64) -> Result<(), TmmError> {
    if f > 0.0 && f.is_finite() {
        Ok(())
    } else {
        Err(TmmError::NonPositiveFrequency(f))
    }
}

pub fn axial_segment_matrix(seg: &Segment, f: f64, prec: PrecisionConfig) -> Result<TransferMatrix, TmmError> {
    check_frequency(f)?;
    Ok(wave_matrix(ModeKind::Axial, f, prec.bits(), seg.youngs, seg.area, seg.density, seg.width))
}

pub fn torsional_segment_matrix(seg: &Segment, f: f64, prec: PrecisionConfig) -> Result<TransferMatrix, TmmError> {
    check_frequency(f)?;
    Ok(wave_matrix(ModeKind::Torsional, f, prec.bits(), seg.shear, seg.polar_inertia, seg.density, seg.width))
}

/// Euler-Bernoulli field matrix on `(v, slope, M, V)`, with `slope = v'`,
/// `M = EI v''` and `V = EI v'''`.
pub fn lateral_segment_matrix(seg: &Segment, f: f64, prec: PrecisionConfig) -> Result<TransferMatrix, TmmError> {
    lateral_piece_matrix(seg, f, prec, 1)
}

/// Field matrix over `seg.width / pieces`.
fn lateral_piece_matrix(seg: &Segment, f: f64, prec: PrecisionConfig, pieces: u32) -> Result<TransferMatrix, TmmError> {
    check_frequency(f)?;
    let bits = prec.bits();
    let omega = angular(bits, f);
    let ei = flt(bits, seg.youngs) * flt(bits, seg.bending_inertia);
    let k4 = flt(bits, seg.density) * flt(bits, seg.area) * omega.square() / &ei;
    let beta = k4.pow(0.25f64);
    let lambda = Float::with_val(bits, &beta * flt(bits, seg.width)) / pieces;
    if !lambda.is_finite() || !beta.is_finite() {
        return Err(TmmError::NonFinite(f));
    }
    let e = lambda.clone().exp();
    let e_inv = Float::with_val(bits, e.recip_ref());
    let ch = Float::with_val(bits, &e + &e_inv) / 2u32;
    let sh = Float::with_val(bits, &e - &e_inv) / 2u32;
    let (sin, cos) = lambda.sin_cos(Float::new(bits));
    let s = Float::with_val(bits, &ch + &cos) / 2u32;
    let t = Float::with_val(bits, &sh + &sin) / 2u32;
    let u = Float::with_val(bits, &ch - &cos) / 2u32;
    let v = Float::with_val(bits, &sh - &sin) / 2u32;

    let b2 = Float::with_val(bits, beta.square_ref());
    let b3 = Float::with_val(bits, &b2 * &beta);
    let ei_b2 = Float::with_val(bits, &ei * &b2);
    let ei_b3 = Float::with_val(bits, &ei * &b3);
    let q = |a: &Float, b: &Float| Float::with_val(bits, a / b);
    let p = |a: &Float, b: &Float| Float::with_val(bits, a * b);

    let entries = vec![
        s.clone(),
        q(&t, &beta),
        q(&u, &ei_b2),
        q(&v, &ei_b3),
        p(&beta, &v),
        s.clone(),
        q(&t, &Float::with_val(bits, &ei * &beta)),
        q(&u, &ei_b2),
        p(&ei_b2, &u),
        p(&Float::with_val(bits, &ei * &beta), &v),
        s.clone(),
        q(&t, &beta),
        p(&ei_b3, &t),
        p(&ei_b2, &u),
        p(&beta, &v),
        s,
    ];
    Ok(TransferMatrix { mode: ModeKind::Lateral, frequency: f, dim: 4, entries })
}

pub fn segment_matrix(seg: &Segment, f: f64, mode: ModeKind, prec: PrecisionConfig) -> Result<TransferMatrix, TmmError> {
    match mode {
        ModeKind::Axial => axial_segment_matrix(seg, f, prec),
        ModeKind::Torsional => torsional_segment_matrix(seg, f, prec),
        ModeKind::Lateral => lateral_segment_matrix(seg, f, prec),
    }
}

/// Chain matrix mapping the state at the excited end to the far end.
pub fn chain_transfer(chain: &SegmentChain, f: f64, mode: ModeKind, prec: PrecisionConfig) -> Result<TransferMatrix, TmmError> {
    let mut segments = chain.segments.iter();
    let first = segments.next().ok_or(TmmError::EmptyChain)?;
    let mut total = segment_matrix(first, f, mode, prec)?;
    for seg in segments {
        total = segment_matrix(seg, f, mode, prec)?.mul(&total)?;
    }
    Ok(total)
}

const MINOR_PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

/// Entries of the lateral chain matrix needed by the free-free solve.
#[derive(Debug, Clone, PartialEq)]
pub struct LateralReduction {
    /// `T[2][1]` and `T[3][1]`.
    pub t21: Float,
    pub t31: Float,
    /// Minor of `T` on rows (M, V) and columns (v, slope).
    pub minor: Float,
}

/// Carries the slope column of `T` and the (v, slope) column of its second
/// compound matrix through the chain, with segments cut into pieces of
/// `beta * width <= PIECE_PHASE`.
pub fn lateral_reduction(chain: &SegmentChain, f: f64, prec: PrecisionConfig) -> Result<LateralReduction, TmmError> {
    check_frequency(f)?;
    if chain.segments.is_empty() {
        return Err(TmmError::EmptyChain);
    }
    let bits = prec.bits();
    let unit = |k: usize, n: usize| -> Vec<Float> { (0..n).map(|i| Float::with_val(bits, u32::from(i == k))).collect() };
    let mut col = unit(1, 4);
    let mut x = unit(0, 6);
    let omega = 2.0 * std::f64::consts::PI * f;
    for seg in &chain.segments {
        let beta = (seg.density * seg.area * omega * omega / (seg.youngs * seg.bending_inertia)).powf(0.25);
        let lambda = beta * seg.width;
        if !lambda.is_finite() {
            return Err(TmmError::NonFinite(f));
        }
        let pieces = (lambda / PIECE_PHASE).ceil().max(1.0) as u32;
        let m = lateral_piece_matrix(seg, f, prec, pieces)?;
        let mut compound = Vec::with_capacity(36);
        for &(r1, r2) in &MINOR_PAIRS {
            for &(c1, c2) in &MINOR_PAIRS {
                let lead = Float::with_val(bits, m.get(r1, c1) * m.get(r2, c2));
                compound.push(lead - Float::with_val(bits, m.get(r1, c2) * m.get(r2, c1)));
            }
        }
        for _ in 0..pieces {
            col = apply(&m.entries, &col, 4, bits);
            x = apply(&compound, &x, 6, bits);
        }
    }
    let minor = x.swap_remove(5);
    let t31 = col.swap_remove(3);
    let t21 = col.swap_remove(2);
    Ok(LateralReduction { t21, t31, minor })
}

const PIECE_PHASE: f64 = 1.0;

fn apply(matrix: &[Float], v: &[Float], n: usize, bits: u32) -> Vec<Float> {
    matrix.chunks(n).map(|row| Float::with_val(bits, Float::dot(row.iter().zip(v)))).collect()
}

/// Per-channel transmission magnitudes at one frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transmission {
    pub magnitudes: Vec<f64>,
    pub resonant: bool,
}

pub const DEFAULT_RESONANCE_CAP: f64 = 1e12;

/// Precision plus the cap reported at singular frequencies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TmmSolver {
    pub precision: PrecisionConfig,
    pub resonance_cap: f64,
}

impl Default for TmmSolver {
    fn default() -> Self {
        Self { precision: PrecisionConfig::default(), resonance_cap: DEFAULT_RESONANCE_CAP }
    }
}

impl TmmSolver {
    pub fn new(precision: PrecisionConfig) -> Self {
        Self { precision, ..Self::default() }
    }

    pub fn chain_transfer(&self, chain: &SegmentChain, f: f64, mode: ModeKind) -> Result<TransferMatrix, TmmError> {
        chain_transfer(chain, f, mode, self.precision)
    }

    /// Free-free transmission with force excitation at end 1.
    pub fn transmission_ratio(&self, chain: &SegmentChain, f: f64, mode: ModeKind) -> Result<Transmission, TmmError> {
        check_frequency(f)?;
        let bits = self.precision.bits();
        let omega2 = angular(bits, f).square();
        let raw = match mode {
            ModeKind::Axial | ModeKind::Torsional => {
                let t = self.chain_transfer(chain, f, mode)?;
                let inertia = if mode == ModeKind::Axial { chain.total_mass() } else { chain.total_polar_inertia() };
                // N1 = 1, N2 = 0: u1 = -t11 / t10 and, with det T = 1, u2 = -1 / t10.
                let t10 = t.get(1, 0);
                if t10.is_zero() {
                    None
                } else {
                    let scale = Float::with_val(bits, &omega2 * flt(bits, inertia));
                    Some(vec![(scale / Float::with_val(bits, t10.abs_ref())).to_f64()])
                }
            }
            ModeKind::Lateral => {
                // M1 = 0, V1 = 1, M2 = V2 = 0. The field matrix preserves
                // v V - slope M, so T^-1[i][j] = s_i s_j T[3-j][3-i] with
                // s = (-, +, -, +); reading the end-2 state through T^-1 gives
                // v2 = t21 / det B and slope2 = t31 / det B, B = T[2..4][0..2].
                let r = lateral_reduction(chain, f, self.precision)?;
                if r.minor.is_zero() {
                    None
                } else {
                    let mass_scale = Float::with_val(bits, &omega2 * flt(bits, chain.total_mass()));
                    let det = r.minor.abs();
                    let deflection = (r.t21.abs() * &mass_scale / &det).to_f64();
                    let slope = (r.t31.abs() * mass_scale * flt(bits, chain.total_length()) / det).to_f64();
                    Some(vec![deflection, slope, deflection, slope])
                }
            }
        };
        Ok(self.capped(mode, raw))
    }

    fn capped(&self, mode: ModeKind, raw: Option<Vec<f64>>) -> Transmission {
        let channels = mode.dofs().len();
        match raw {
            Some(m) if m.iter().all(|v| v.is_finite() && *v <= self.resonance_cap) => {
                Transmission { magnitudes: m, resonant: false }
            }
            Some(m) => Transmission {
                magnitudes: m.into_iter().map(|v| if v.is_finite() { v.min(self.resonance_cap) } else { self.resonance_cap }).collect(),
                resonant: true,
            },
            None => Transmission { magnitudes: vec![self.resonance_cap; channels], resonant: true },
        }
    }

    /// Evaluate every grid point. Failed points are capped and flagged.
    pub fn frequency_sweep(&self, chain: &SegmentChain, grid: &FrequencyGrid, mode: ModeKind) -> ResponseCurve {
        let points: Vec<Transmission> = grid
            .points()
            .par_iter()
            .map(|&f| self.transmission_ratio(chain, f, mode).unwrap_or_else(|_| self.capped(mode, None)))
            .collect();
        ResponseCurve {
            mode,
            grid: grid.points().to_vec(),
            resonant: points.iter().map(|p| p.resonant).collect(),
            magnitudes: points.into_iter().map(|p| p.magnitudes).collect(),
        }
    }
}

/// Closed-form `n`-th free-free frequency of a uniform rod: `n c / (2 L)`.
pub fn uniform_rod_frequency(modulus: f64, density: f64, length: f64, n: u32) -> f64 {
    n as f64 * (modulus / density).sqrt() / (2.0 * length)
}

/// Closed-form first free-free bending frequency of a uniform beam.
pub fn uniform_beam_first_frequency(seg: &Segment, length: f64) -> f64 {
    const BETA_L: f64 = 4.730_040_744_862_704;
    BETA_L * BETA_L / (2.0 * PI * length * length)
        * (seg.youngs * seg.bending_inertia / (seg.density * seg.area)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PipeSpec;

    const P100: PrecisionConfig = PrecisionConfig { decimal_digits: 100 };

    fn pipe_seg(width: f64) -> Segment {
        PipeSpec::default().bare_segment(width)
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn precision_floor() {
        assert!(PrecisionConfig::new(8).is_err());
        assert!(PrecisionConfig::new(16).is_ok());
        assert_eq!(P100.bits(), 336);
    }

    #[test]
    fn axial_static_limit() {
        let seg = pipe_seg(1.0);
        let t = axial_segment_matrix(&seg, 1e-6, P100).unwrap().to_f64();
        let flex = seg.width / (seg.youngs * seg.area);
        assert!(close(t[0][0], 1.0, 1e-12));
        assert!(close(t[0][1], flex, 1e-9));
        assert!(t[1][0].abs() < 1e-3);
        assert!(close(t[1][1], 1.0, 1e-12));
    }

    #[test]
    fn axial_half_wave_is_minus_identity() {
        let seg = pipe_seg(1.0);
        let c = (seg.youngs / seg.density).sqrt();
        let t = axial_segment_matrix(&seg, c / 2.0, P100).unwrap().to_f64();
        assert!(close(t[0][0], -1.0, 1e-14));
        assert!(close(t[1][1], -1.0, 1e-14));
        assert!(t[0][1].abs() < 1e-20);
        assert!(t[1][0].abs() < 1e-5 * seg.youngs * seg.area);
    }

    #[test]
    fn axial_pipe_segment_at_1khz() {
        // Independent f64 evaluation of the closed-form entries.
        let seg = pipe_seg(1.0);
        let c = (193e9f64 / 1800.0).sqrt();
        assert!(close(c, 10_354.8, 1e-5));
        let phase = 2.0 * PI * 1000.0 / c;
        assert!(close(phase, 0.6068, 1e-4));
        let t = axial_segment_matrix(&seg, 1000.0, P100).unwrap().to_f64();
        assert!(close(t[0][0], phase.cos(), 1e-13));
        assert!(close(t[0][0], 0.8215, 1e-4));
        let k = seg.youngs * seg.area;
        assert!(close(t[0][1], phase.sin() / (k * phase), 1e-13));
        assert!(close(t[1][0], -k * phase * phase.sin(), 1e-13));
    }

    #[test]
    fn torsional_limits() {
        let seg = pipe_seg(1.0);
        let t = torsional_segment_matrix(&seg, 1e-6, P100).unwrap().to_f64();
        assert!(close(t[0][1], seg.width / (seg.shear * seg.polar_inertia), 1e-9));
        let c = (seg.shear / seg.density).sqrt();
        assert!(close(c, 6548.9, 1e-4));
        let t = torsional_segment_matrix(&seg, c / 2.0, P100).unwrap().to_f64();
        assert!(close(t[0][0], -1.0, 1e-14));
        assert!(close(t[1][1], -1.0, 1e-14));
    }

    #[test]
    fn lateral_static_limit() {
        let seg = pipe_seg(0.7);
        let w = seg.width;
        let ei = seg.youngs * seg.bending_inertia;
        let t = lateral_segment_matrix(&seg, 1e-7, P100).unwrap().to_f64();
        let expect = [
            [1.0, w, w * w / (2.0 * ei), w.powi(3) / (6.0 * ei)],
            [0.0, 1.0, w / ei, w * w / (2.0 * ei)],
            [0.0, 0.0, 1.0, w],
            [0.0, 0.0, 0.0, 1.0],
        ];
        for r in 0..4 {
            for c in 0..4 {
                if expect[r][c] == 0.0 {
                    assert!(t[r][c].abs() < 1e-6, "({r},{c}) = {}", t[r][c]);
                } else {
                    assert!(close(t[r][c], expect[r][c], 1e-9), "({r},{c})");
                }
            }
        }
    }

    #[test]
    fn rejects_non_positive_frequency() {
        let seg = pipe_seg(1.0);
        for mode in ModeKind::ALL {
            assert_eq!(segment_matrix(&seg, 0.0, mode, P100), Err(TmmError::NonPositiveFrequency(0.0)));
            assert!(segment_matrix(&seg, -3.0, mode, P100).is_err());
        }
    }

    #[test]
    fn unit_determinant() {
        let tol = 1e-90;
        for &(w, f) in &[(0.1, 3.0), (1.0, 250.0), (5.0, 800.0), (0.375, 10_000.0)] {
            let seg = pipe_seg(w);
            for mode in [ModeKind::Axial, ModeKind::Torsional] {
                let det = segment_matrix(&seg, f, mode, P100).unwrap().determinant();
                assert!((det - 1u32).abs().to_f64() < tol, "{mode} w={w} f={f}");
            }
        }
        // Lateral: |det - 1| grows like eps * exp(2 lambda); small lambda here.
        for &(w, f) in &[(0.1, 3.0), (0.5, 100.0), (0.375, 10_000.0)] {
            let det = lateral_segment_matrix(&pipe_seg(w), f, P100).unwrap().determinant();
            assert!((det - 1u32).abs().to_f64() < tol, "lateral w={w} f={f}");
        }
    }

    #[test]
    fn lateral_determinant_at_large_lambda() {
        // lambda ~ 52: conditioning costs about 2 lambda / ln 10 = 45 digits.
        let det = lateral_segment_matrix(&pipe_seg(5.0), 10_000.0, P100).unwrap().determinant();
        assert!((det - 1u32).abs().to_f64() < 1e-45);
    }

    #[test]
    fn single_segment_chain_is_segment_matrix() {
        let seg = pipe_seg(2.5);
        let chain = SegmentChain::new(vec![seg]);
        for mode in ModeKind::ALL {
            assert_eq!(chain_transfer(&chain, 123.0, mode, P100).unwrap(), segment_matrix(&seg, 123.0, mode, P100).unwrap());
        }
        assert_eq!(chain_transfer(&SegmentChain::new(vec![]), 1.0, ModeKind::Axial, P100), Err(TmmError::EmptyChain));
    }

    #[test]
    fn negative_length_inverts_axial_matrix() {
        let bits = P100.bits();
        let phase = flt(bits, 0.83);
        let k = flt(bits, 4.2e8);
        let fwd = phase_matrix(ModeKind::Axial, 1.0, phase.clone(), k.clone());
        let back = phase_matrix(ModeKind::Axial, 1.0, -phase, -k);
        let prod = fwd.mul(&back).unwrap();
        let id = TransferMatrix::identity(ModeKind::Axial, 1.0, bits);
        assert!(prod.relative_difference(&id) < 1e-95);
    }

    #[test]
    fn uniform_rod_low_frequency_ratio_is_one() {
        let pipe = PipeSpec::default();
        let chain = SegmentChain::uniform(&pipe);
        let solver = TmmSolver::default();
        let t = solver.transmission_ratio(&chain, 1.0, ModeKind::Axial).unwrap();
        // Closed form for a uniform rod: W / sin W.
        let w = 2.0 * PI * 1.0 * pipe.length / (pipe.youngs / pipe.density).sqrt();
        assert!(close(t.magnitudes[0], w / w.sin(), 1e-12));
        assert!(close(t.magnitudes[0], 1.0, 1e-5));
        assert!(!t.resonant);
    }

    #[test]
    fn uniform_rod_resonance_spike() {
        let pipe = PipeSpec::default();
        let chain = SegmentChain::uniform(&pipe);
        let f1 = uniform_rod_frequency(pipe.youngs, pipe.density, pipe.length, 1);
        assert!(close(f1, 575.27, 1e-4));
        let t = TmmSolver::default().transmission_ratio(&chain, f1 * (1.0 + 1e-4), ModeKind::Axial).unwrap();
        assert!(t.magnitudes[0] > 1e2);
    }

    #[test]
    fn lateral_channels_are_symmetric() {
        let pipe = PipeSpec::default();
        let chain = SegmentChain::new(vec![
            pipe.bare_segment(1.0),
            crate::geometry::Segment::annulus(0.3, 0.25, pipe.inner_diameter, &pipe),
            pipe.bare_segment(7.7),
        ]);
        for f in [0.1, 33.0, 4000.0, 9999.0] {
            let t = TmmSolver::default().transmission_ratio(&chain, f, ModeKind::Lateral).unwrap();
            assert_eq!(t.magnitudes.len(), 4);
            assert_eq!(t.magnitudes[0], t.magnitudes[2]);
            assert_eq!(t.magnitudes[1], t.magnitudes[3]);
        }
    }

    #[test]
    fn beam_oracle_value() {
        let pipe = PipeSpec::default();
        let f = uniform_beam_first_frequency(&pipe.bare_segment(pipe.length), pipe.length);
        assert!(close(f, 24.96, 2e-3), "{f}");
    }

    #[test]
    fn singular_point_is_capped() {
        let solver = TmmSolver::default();
        let t = solver.capped(ModeKind::Lateral, None);
        assert!(t.resonant);
        assert_eq!(t.magnitudes, vec![DEFAULT_RESONANCE_CAP; 4]);
        let t = solver.capped(ModeKind::Axial, Some(vec![f64::INFINITY]));
        assert!(t.resonant);
        assert_eq!(t.magnitudes, vec![DEFAULT_RESONANCE_CAP]);
    }

    #[test]
    fn sweep_is_deterministic() {
        let pipe = PipeSpec::default();
        let chain = SegmentChain::uniform(&pipe);
        let grid = FrequencyGrid::linear(0.1, 800.0, 20).unwrap();
        let solver = TmmSolver::default();
        let a = solver.frequency_sweep(&chain, &grid, ModeKind::Torsional);
        let b = solver.frequency_sweep(&chain, &grid, ModeKind::Torsional);
        assert_eq!(a, b);
    }

    #[test]
    fn end_minor_matches_direct_determinant() {
        let pipe = PipeSpec::default();
        let chain = SegmentChain::new(vec![
            pipe.bare_segment(1.3),
            Segment::annulus(0.2, 0.25, pipe.inner_diameter, &pipe),
            pipe.bare_segment(2.7),
        ]);
        let wide = PrecisionConfig::new(300).unwrap();
        for f in [3.0, 240.0, 1800.0] {
            let t = chain_transfer(&chain, f, ModeKind::Lateral, wide).unwrap();
            let direct = Float::with_val(wide.bits(), t.get(2, 0) * t.get(3, 1)) - Float::with_val(wide.bits(), t.get(2, 1) * t.get(3, 0));
            let r = lateral_reduction(&chain, f, P100).unwrap();
            for (got, want) in [(&r.minor, &direct), (&r.t21, t.get(2, 1)), (&r.t31, t.get(3, 1))] {
                let rel = Float::with_val(wide.bits(), got - want) / want;
                assert!(rel.to_f64().abs() < 1e-80, "{f}: {}", rel.to_f64());
            }
        }
    }

    #[test]
    fn lateral_ratio_is_stable_under_precision() {
        let pipe = PipeSpec::default();
        let chain = SegmentChain::uniform(&pipe);
        let lo = TmmSolver::new(PrecisionConfig::new(40).unwrap());
        for f in [500.0, 5000.0, 9999.0] {
            let a = lo.transmission_ratio(&chain, f, ModeKind::Lateral).unwrap();
            let b = TmmSolver::default().transmission_ratio(&chain, f, ModeKind::Lateral).unwrap();
            for (x, y) in a.magnitudes.iter().zip(&b.magnitudes) {
                assert!(close(*x, *y, 1e-12), "{f}: {x} vs {y}");
            }
        }
    }
}
