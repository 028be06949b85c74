//! Global-best particle swarm optimisation and the two design problems
//! built on it: widening the peak-free ranges, and minimising insert mass
//! while a requested band stays free of peaks.
//!
//! Surrogate predictions only steer the swarm. Every returned result is
//! re-solved with the transfer matrix solver and its feasibility flag comes
//! from that check alone.

use std::fs;
use std::path::Path;

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{insert_mass, DesignSpace, DesignVector, GeometryError, Range, DESIGN_DIM};
use crate::response::{band_from_peaks, channel_peaks, count_peaks_in_band, largest_nonresonant_range, Band, ResponseError};
use crate::surrogate::{channels_of, SurrogateSuite};
use crate::tmm::{ModeKind, TmmSolver};

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("invalid PSO config: {0}")]
    Config(String),
    #[error("band ({lo}, {hi}) Hz is not inside any mode family's analysis range")]
    OutsideRange { lo: f64, hi: f64 },
    #[error("mode {0} does not fully contain the band")]
    NotApplicable(ModeKind),
    #[error(transparent)]
    Response(#[from] ResponseError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsoConfig {
    pub population: usize,
    pub max_iterations: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    /// Largest step per iteration as a fraction of each coordinate's range.
    pub velocity_clamp: f64,
    pub seed: u64,
    /// Weight of the squared constraint violation.
    pub penalty: f64,
}

impl Default for PsoConfig {
    fn default() -> Self {
        Self {
            population: 300,
            max_iterations: 50,
            inertia: 0.729,
            cognitive: 1.49445,
            social: 1.49445,
            velocity_clamp: 0.05,
            seed: 0,
            penalty: 1000.0,
        }
    }
}

impl PsoConfig {
    pub fn check(&self) -> Result<(), OptimizeError> {
        let bad = |m: &str| Err(OptimizeError::Config(m.into()));
        if self.population < 2 {
            return bad("population must be at least 2");
        }
        for (name, v) in [
            ("inertia", self.inertia),
            ("cognitive", self.cognitive),
            ("social", self.social),
            ("velocity_clamp", self.velocity_clamp),
            ("penalty", self.penalty),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(OptimizeError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsoOutcome {
    pub best_x: Vec<f64>,
    pub best_f: f64,
    /// Best value after initialisation and after each iteration.
    pub trace: Vec<f64>,
    pub evaluations: usize,
    /// Particles redrawn because their objective was not finite.
    pub reinitialized: usize,
}

const REDRAW_LIMIT: usize = 20;

fn clamp_into(x: &mut [f64], v: &mut [f64], bounds: &[Range]) {
    for ((x, v), r) in x.iter_mut().zip(v.iter_mut()).zip(bounds) {
        if *x < r.min {
            *x = r.min;
            *v = 0.0;
        } else if *x > r.max {
            *x = r.max;
            *v = 0.0;
        }
    }
}

fn draw<R: Rng>(bounds: &[Range], rng: &mut R) -> Vec<f64> {
    bounds.iter().map(|r| if r.width() > 0.0 { rng.random_range(r.min..=r.max) } else { r.min }).collect()
}

/// Minimise `objective` over the box. Evaluations within an iteration run
/// in parallel; all randomness is drawn serially so the result depends only
/// on the seed.
pub fn pso_minimize<F>(objective: F, bounds: &[Range], cfg: &PsoConfig) -> Result<PsoOutcome, OptimizeError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    cfg.check()?;
    if bounds.is_empty() || bounds.iter().any(|r| !(r.min.is_finite() && r.max.is_finite() && r.min <= r.max)) {
        return Err(OptimizeError::Config("bounds must be finite with min <= max".into()));
    }
    let dim = bounds.len();
    let vmax: Vec<f64> = bounds.iter().map(|r| cfg.velocity_clamp * r.width()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut evaluations = 0;
    let mut reinitialized = 0;

    let mut xs: Vec<Vec<f64>> = (0..cfg.population).map(|_| draw(bounds, &mut rng)).collect();
    let mut vs: Vec<Vec<f64>> = (0..cfg.population)
        .map(|_| vmax.iter().map(|&m| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 }).collect())
        .collect();

    let mut evaluate = |xs: &mut Vec<Vec<f64>>, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut fs: Vec<f64> = xs.par_iter().map(|x| objective(x)).collect();
        evaluations += xs.len();
        for (x, f) in xs.iter_mut().zip(fs.iter_mut()) {
            let mut tries = 0;
            while !f.is_finite() && tries < REDRAW_LIMIT {
                *x = draw(bounds, rng);
                *f = objective(x);
                evaluations += 1;
                reinitialized += 1;
                tries += 1;
            }
            if !f.is_finite() {
                *f = f64::INFINITY;
            }
        }
        fs
    };

    let fs = evaluate(&mut xs, &mut rng);
    let mut pbest = xs.clone();
    let mut pbest_f = fs;
    let mut g = argmin(&pbest_f);
    let mut gbest = pbest[g].clone();
    let mut gbest_f = pbest_f[g];
    let mut trace = vec![gbest_f];

    for iter in 0..cfg.max_iterations {
        for i in 0..cfg.population {
            for j in 0..dim {
                let (r1, r2): (f64, f64) = (rng.random(), rng.random());
                let v = cfg.inertia * vs[i][j]
                    + cfg.cognitive * r1 * (pbest[i][j] - xs[i][j])
                    + cfg.social * r2 * (gbest[j] - xs[i][j]);
                vs[i][j] = v.clamp(-vmax[j], vmax[j]);
                xs[i][j] += vs[i][j];
            }
            clamp_into(&mut xs[i], &mut vs[i], bounds);
        }
        let fs = evaluate(&mut xs, &mut rng);
        for i in 0..cfg.population {
            if fs[i] < pbest_f[i] {
                pbest_f[i] = fs[i];
                pbest[i].clone_from(&xs[i]);
            }
        }
        g = argmin(&pbest_f);
        if pbest_f[g] < gbest_f {
            gbest_f = pbest_f[g];
            gbest.clone_from(&pbest[g]);
        }
        trace.push(gbest_f);
        debug!("pso iteration {}: best {gbest_f}", iter + 1);
    }
    if reinitialized > 0 {
        warn!("pso redrew {reinitialized} particles with non-finite objective");
    }
    Ok(PsoOutcome { best_x: gbest, best_f: gbest_f, trace, evaluations, reinitialized })
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Minimum peak-free width required per mode family for band maximisation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RangeTargets {
    pub axial_hz: f64,
    pub torsional_hz: f64,
    pub lateral_hz: f64,
}

impl Default for RangeTargets {
    fn default() -> Self {
        Self { axial_hz: 200.0, torsional_hz: 200.0, lateral_hz: 1000.0 }
    }
}

impl RangeTargets {
    pub fn for_mode(&self, mode: ModeKind) -> f64 {
        match mode {
            ModeKind::Axial => self.axial_hz,
            ModeKind::Torsional => self.torsional_hz,
            ModeKind::Lateral => self.lateral_hz,
        }
    }
}

/// TMM re-check of one mode family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifiedMode {
    pub mode: ModeKind,
    pub peaks_hz: Vec<f64>,
    /// Widest peak-free range.
    pub range: Band,
    /// Peaks inside the requested band, when there is one.
    pub peaks_in_band: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub mode: ModeKind,
    /// Zero when the constraint holds.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignResult {
    pub design: DesignVector,
    /// Surrogate objective at the returned design.
    pub objective: f64,
    /// TMM constraint residuals.
    pub residuals: Vec<Residual>,
    pub mass_kg: f64,
    pub verified: Vec<VerifiedMode>,
    /// True only when every TMM residual is zero.
    pub feasible: bool,
    pub evaluations: usize,
    pub trace: Vec<f64>,
    pub attempts: usize,
}

fn to_design(x: &[f64], space: &DesignSpace) -> DesignVector {
    space.bounds.clamp(&DesignVector::from_flat(x).expect("flat design of length 3n"))
}

/// Penalty for layouts whose rings and gaps overrun the pipe.
fn overrun(design: &DesignVector, space: &DesignSpace) -> f64 {
    ((design.occupied_length() - space.pipe.length) / space.pipe.length).max(0.0)
}

/// Solve every mode family for `design` and summarise the peaks.
pub fn verify_design(solver: &TmmSolver, space: &DesignSpace, grids: &crate::response::AnalysisGrids, design: &DesignVector, band: Option<&Band>, modes: &[ModeKind]) -> Result<Vec<VerifiedMode>, OptimizeError> {
    let chain = space.build_segments(design)?;
    modes
        .iter()
        .map(|&mode| {
            let curve = solver.frequency_sweep(&chain, grids.for_mode(mode), mode);
            let peaks = crate::response::detect_peaks(&curve);
            let peaks_in_band = band.map(|b| count_peaks_in_band(&curve, b)).transpose()?;
            Ok(VerifiedMode {
                mode,
                peaks_hz: peaks.iter().map(|&i| curve.grid[i]).collect(),
                range: largest_nonresonant_range(&curve),
                peaks_in_band,
            })
        })
        .collect()
}

/// Surrogate peak indices of one mode family.
fn surrogate_peaks(values: &[[f64; crate::surrogate::CHANNELS]], mode: ModeKind) -> Vec<usize> {
    let mut mark = vec![false; values.len()];
    for c in channels_of(mode) {
        let series: Vec<f64> = values.iter().map(|row| row[c]).collect();
        for i in channel_peaks(&series) {
            mark[i] = true;
        }
    }
    (0..values.len()).filter(|&i| mark[i]).collect()
}

/// Widen the peak-free ranges of all three mode families.
pub fn maximize_band(suite: &SurrogateSuite, solver: &TmmSolver, targets: &RangeTargets, cfg: &PsoConfig) -> Result<DesignResult, OptimizeError> {
    let space = suite.space;
    let grids = &suite.grids;
    let all: Vec<usize> = (0..suite.points()).collect();
    let objective = |x: &[f64]| -> f64 {
        let design = to_design(x, &space);
        let values = suite.predict_indices(&suite.encode(&design), &all);
        let mut score = 0.0;
        for mode in ModeKind::ALL {
            let grid = grids.for_mode(mode).points();
            let full = grid[grid.len() - 1] - grid[0];
            let range = band_from_peaks(grid, &surrogate_peaks(&values, mode)).width();
            let short = (targets.for_mode(mode) - range).max(0.0) / full;
            score += -range / full + cfg.penalty * short * short;
        }
        score + cfg.penalty * overrun(&design, &space).powi(2)
    };
    let outcome = pso_minimize(objective, &space.bounds.flat_ranges(DESIGN_DIM / 3), cfg)?;
    let design = to_design(&outcome.best_x, &space);
    let verified = verify_design(solver, &space, grids, &design, None, &ModeKind::ALL)?;
    let residuals: Vec<Residual> = verified
        .iter()
        .map(|v| Residual { mode: v.mode, value: (targets.for_mode(v.mode) - v.range.width()).max(0.0) })
        .collect();
    let feasible = residuals.iter().all(|r| r.value == 0.0);
    if !feasible {
        info!("band maximisation: TMM check misses the range targets");
    }
    Ok(DesignResult {
        mass_kg: insert_mass(&design, &space.pipe)?,
        design,
        objective: outcome.best_f,
        residuals,
        verified,
        feasible,
        evaluations: outcome.evaluations,
        trace: outcome.trace,
        attempts: 1,
    })
}

/// Mode families whose analysis range contains `band`.
pub fn applicable_modes(grids: &crate::response::AnalysisGrids, band: &Band) -> Vec<ModeKind> {
    ModeKind::ALL.into_iter().filter(|&m| grids.for_mode(m).contains_band(band)).collect()
}

/// Grid indices whose peak status decides `h` on `[lo, hi]`: the in-band
/// points plus one neighbour on each side.
fn band_window(grid: &[f64], band: &Band) -> (usize, usize, Vec<usize>) {
    let inside: Vec<usize> = (0..grid.len()).filter(|&i| band.contains(grid[i])).collect();
    match (inside.first(), inside.last()) {
        (Some(&a), Some(&b)) => {
            let lo = a.saturating_sub(1);
            let hi = (b + 1).min(grid.len() - 1);
            (a, b, (lo..=hi).collect())
        }
        _ => (1, 0, Vec::new()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MassSearch {
    /// Extra PSO runs allowed when the TMM check fails.
    pub retries: usize,
    /// Grid cells added on both sides of the surrogate constraint band per
    /// retry.
    pub margin_cells_per_retry: usize,
}

impl Default for MassSearch {
    fn default() -> Self {
        Self { retries: 2, margin_cells_per_retry: 1 }
    }
}

/// Lightest insert layout whose `band` is peak-free in every applicable
/// mode family (or in `modes`, when given).
pub fn min_mass_for_band(
    suite: &SurrogateSuite,
    solver: &TmmSolver,
    band: &Band,
    modes: Option<&[ModeKind]>,
    cfg: &PsoConfig,
    search: &MassSearch,
) -> Result<DesignResult, OptimizeError> {
    let space = suite.space;
    let grids = &suite.grids;
    let applicable = applicable_modes(grids, band);
    if applicable.is_empty() {
        return Err(OptimizeError::OutsideRange { lo: band.lo, hi: band.hi });
    }
    let modes: Vec<ModeKind> = match modes {
        Some(ms) => {
            if let Some(&m) = ms.iter().find(|m| !applicable.contains(m)) {
                return Err(OptimizeError::NotApplicable(m));
            }
            ms.to_vec()
        }
        None => applicable,
    };

    let mut last = None;
    let mut evaluations = 0;
    for attempt in 0..=search.retries {
        let margin = attempt * search.margin_cells_per_retry;
        let windows: Vec<(ModeKind, usize, usize, Vec<usize>)> = modes
            .iter()
            .map(|&m| {
                let grid = grids.for_mode(m).points();
                let step = (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64;
                let lo = (band.lo - margin as f64 * step).max(grid[0]);
                let hi = (band.hi + margin as f64 * step).min(grid[grid.len() - 1]);
                let (a, b, idx) = band_window(grid, &Band { lo, hi });
                (m, a, b, idx)
            })
            .collect();
        let objective = |x: &[f64]| -> f64 {
            let design = to_design(x, &space);
            let input = suite.encode(&design);
            let mut violations = 0usize;
            for (mode, a, b, idx) in &windows {
                if idx.is_empty() {
                    continue;
                }
                let values = suite.predict_indices(&input, idx);
                let offset = idx[0];
                violations += surrogate_peaks(&values, *mode)
                    .into_iter()
                    .map(|k| k + offset)
                    .filter(|i| i >= a && i <= b)
                    .count();
            }
            let mass = insert_mass(&design, &space.pipe).unwrap_or(f64::NAN);
            let h = violations as f64;
            mass + cfg.penalty * (h * h + overrun(&design, &space).powi(2))
        };
        let run_cfg = PsoConfig { seed: cfg.seed.wrapping_add(attempt as u64), ..*cfg };
        let outcome = pso_minimize(objective, &space.bounds.flat_ranges(DESIGN_DIM / 3), &run_cfg)?;
        evaluations += outcome.evaluations;
        let design = to_design(&outcome.best_x, &space);
        let verified = verify_design(solver, &space, grids, &design, Some(band), &modes)?;
        let residuals: Vec<Residual> =
            verified.iter().map(|v| Residual { mode: v.mode, value: v.peaks_in_band.unwrap_or(0) as f64 }).collect();
        let feasible = residuals.iter().all(|r| r.value == 0.0);
        let result = DesignResult {
            mass_kg: insert_mass(&design, &space.pipe)?,
            design,
            objective: outcome.best_f,
            residuals,
            verified,
            feasible,
            evaluations,
            trace: outcome.trace,
            attempts: attempt + 1,
        };
        if feasible {
            return Ok(result);
        }
        debug!("band ({}, {}): attempt {} failed the TMM check", band.lo, band.hi, attempt + 1);
        last = Some(result);
    }
    Ok(last.expect("at least one attempt"))
}

/// Bands of each width with centres spread evenly over `range`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BandPlan {
    pub widths_hz: Vec<f64>,
    pub centers_per_width: usize,
    /// Interval the bands must stay inside; the lateral range by default.
    pub range: (f64, f64),
}

impl Default for BandPlan {
    fn default() -> Self {
        Self { widths_hz: vec![250.0, 500.0, 750.0, 1000.0], centers_per_width: 25, range: (0.1, 10_000.0) }
    }
}

impl BandPlan {
    pub fn bands(&self) -> Result<Vec<Band>, OptimizeError> {
        let (lo, hi) = self.range;
        let mut out = Vec::new();
        for &w in &self.widths_hz {
            let span = hi - lo - w;
            if !(span >= 0.0) {
                return Err(OptimizeError::Config(format!("band width {w} exceeds the plan range")));
            }
            for k in 0..self.centers_per_width {
                let t = if self.centers_per_width == 1 { 0.5 } else { k as f64 / (self.centers_per_width - 1) as f64 };
                let start = lo + t * span;
                out.push(Band::new(start, (start + w).min(hi))?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseRow {
    pub design: DesignVector,
    pub band: Band,
    pub mass_kg: f64,
    pub verified: bool,
}

/// Optimised (design, band) pairs; every row passed the TMM check.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InverseDataset {
    pub rows: Vec<InverseRow>,
}

impl InverseDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut header: Vec<String> = (1..=DESIGN_DIM).map(|i| format!("x_{i}")).collect();
        header.extend(["omega_lo", "omega_hi", "mass_kg", "verified"].map(String::from));
        let mut text = header.join(",");
        text.push('\n');
        for r in &self.rows {
            let mut fields: Vec<String> = r.design.to_flat().iter().map(|v| v.to_string()).collect();
            fields.extend([r.band.lo.to_string(), r.band.hi.to_string(), r.mass_kg.to_string(), r.verified.to_string()]);
            text.push_str(&fields.join(","));
            text.push('\n');
        }
        text
    }

    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != DESIGN_DIM + 4 {
                return Err(format!("line {}: expected {} fields, got {}", n + 1, DESIGN_DIM + 4, fields.len()));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("line {}: {e}", n + 1));
            let flat = fields[..DESIGN_DIM].iter().map(|s| num(s)).collect::<Result<Vec<_>, _>>()?;
            let design = DesignVector::from_flat(&flat).map_err(|e| e.to_string())?;
            let band = Band::new(num(fields[DESIGN_DIM])?, num(fields[DESIGN_DIM + 1])?).map_err(|e| format!("line {}: {e}", n + 1))?;
            let mass_kg = num(fields[DESIGN_DIM + 2])?;
            let verified = fields[DESIGN_DIM + 3].parse::<bool>().map_err(|e| format!("line {}: {e}", n + 1))?;
            rows.push(InverseRow { design, band, mass_kg, verified });
        }
        Ok(Self { rows })
    }

    pub fn save(&self, path: &Path) -> Result<(), OptimizeError> {
        fs::write(path, self.to_csv()).map_err(|e| OptimizeError::Io { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, OptimizeError> {
        let text = fs::read_to_string(path).map_err(|e| OptimizeError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_csv(&text).map_err(|message| OptimizeError::Io { path: path.display().to_string(), message })
    }
}

/// One mass minimisation per planned band; the PSO seed of entry `k` is
/// `cfg.seed + 1000 k`. Entries that fail the TMM check are dropped.
pub fn generate_inverse_dataset(
    suite: &SurrogateSuite,
    solver: &TmmSolver,
    plan: &BandPlan,
    cfg: &PsoConfig,
    search: &MassSearch,
) -> Result<InverseDataset, OptimizeError> {
    let mut rows = Vec::new();
    for (k, band) in plan.bands()?.iter().enumerate() {
        let run = PsoConfig { seed: cfg.seed.wrapping_add(1000 * k as u64), ..*cfg };
        match min_mass_for_band(suite, solver, band, None, &run, search) {
            Ok(r) if r.feasible => rows.push(InverseRow { design: r.design, band: *band, mass_kg: r.mass_kg, verified: true }),
            Ok(r) => info!("band ({}, {}): dropped, TMM residuals {:?}", band.lo, band.hi, r.residuals),
            Err(e) => info!("band ({}, {}): dropped, {e}", band.lo, band.hi),
        }
    }
    Ok(InverseDataset { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Range;

    fn sphere(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    #[test]
    fn sphere_reaches_near_zero() {
        let bounds = vec![Range::new(-5.0, 5.0); 30];
        for seed in 0..5 {
            let out = pso_minimize(sphere, &bounds, &PsoConfig { seed, ..PsoConfig::default() }).unwrap();
            assert!(out.best_f < 0.1, "seed {seed}: {}", out.best_f);
        }
    }

    #[test]
    fn one_dimensional_quadratic() {
        let out = pso_minimize(|x: &[f64]| (x[0] - 2.0).powi(2), &[Range::new(0.0, 5.0)], &PsoConfig::default()).unwrap();
        assert!((out.best_x[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn trace_is_monotone_and_seeded() {
        let bounds = vec![Range::new(-3.0, 3.0); 4];
        let cfg = PsoConfig { population: 20, max_iterations: 15, seed: 42, ..PsoConfig::default() };
        let rastrigin = |x: &[f64]| x.iter().map(|v| v * v - 10.0 * (2.0 * std::f64::consts::PI * v).cos() + 10.0).sum::<f64>();
        let a = pso_minimize(rastrigin, &bounds, &cfg).unwrap();
        let b = pso_minimize(rastrigin, &bounds, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace.len(), 16);
        assert!(a.trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(a.evaluations, 20 * 16);
    }

    #[test]
    fn evaluated_points_stay_in_the_box() {
        let bounds = vec![Range::new(1.0, 2.0), Range::new(-1.0, 0.0)];
        let cfg = PsoConfig { population: 10, max_iterations: 30, velocity_clamp: 1.0, ..PsoConfig::default() };
        let out = pso_minimize(
            |x: &[f64]| {
                assert!(x[0] >= 1.0 && x[0] <= 2.0 && x[1] >= -1.0 && x[1] <= 0.0, "{x:?}");
                -x[0] + x[1]
            },
            &bounds,
            &cfg,
        )
        .unwrap();
        assert_eq!(out.best_x, vec![2.0, -1.0]);
    }

    #[test]
    fn non_finite_values_redraw_particles() {
        let bounds = vec![Range::new(-1.0, 1.0)];
        let cfg = PsoConfig { population: 10, max_iterations: 5, ..PsoConfig::default() };
        let out = pso_minimize(|x: &[f64]| if x[0] < 0.0 { f64::NAN } else { x[0] }, &bounds, &cfg).unwrap();
        assert!(out.reinitialized > 0);
        assert!(out.best_f.is_finite() && out.best_x[0] >= 0.0);
    }

    #[test]
    fn rejects_bad_config() {
        let bounds = vec![Range::new(0.0, 1.0)];
        assert!(pso_minimize(sphere, &bounds, &PsoConfig { population: 1, ..PsoConfig::default() }).is_err());
        assert!(pso_minimize(sphere, &bounds, &PsoConfig { inertia: 0.0, ..PsoConfig::default() }).is_err());
        assert!(pso_minimize(sphere, &[], &PsoConfig::default()).is_err());
    }

    #[test]
    fn plan_layout() {
        let plan = BandPlan::default();
        let bands = plan.bands().unwrap();
        assert_eq!(bands.len(), 100);
        for b in &bands {
            assert!(b.lo >= 0.1 && b.hi <= 10_000.0);
        }
        assert!((bands[0].width() - 250.0).abs() < 1e-9);
        assert!((bands[99].hi - 10_000.0).abs() < 1e-9);
        let one = BandPlan { widths_hz: vec![500.0], centers_per_width: 1, range: (0.1, 10_000.0) };
        assert_eq!(one.bands().unwrap().len(), 1);
    }

    #[test]
    fn window_covers_band_and_neighbours() {
        let grid: Vec<f64> = (0..10).map(|i| i as f64 * 10.0 + 1.0).collect();
        let (a, b, idx) = band_window(&grid, &Band::new(15.0, 45.0).unwrap());
        assert_eq!((a, b), (2, 4));
        assert_eq!(idx, vec![1, 2, 3, 4, 5]);
        let (_, _, idx) = band_window(&grid, &Band::new(1.0, 5.0).unwrap());
        assert_eq!(idx, vec![0, 1]);
        let (_, _, idx) = band_window(&grid, &Band::new(2.0, 5.0).unwrap());
        assert!(idx.is_empty());
    }

    #[test]
    fn inverse_csv_round_trip() {
        let design = DesignVector::uniform(10, 0.2, 0.1, 0.01);
        let ds = InverseDataset {
            rows: vec![InverseRow { design, band: Band::new(6500.0, 7000.0).unwrap(), mass_kg: 123.456, verified: true }],
        };
        let text = ds.to_csv();
        assert!(text.starts_with("x_1,"));
        assert!(text.lines().next().unwrap().ends_with("x_30,omega_lo,omega_hi,mass_kg,verified"));
        assert_eq!(InverseDataset::from_csv(&text).unwrap(), ds);
    }
}
