//! TMM training data and the suite of per-frequency networks that stands
//! in for the solver inside optimisation loops.
//!
//! Model `j` serves grid index `j` of every mode family at once, so it
//! reads as the `j`-th axial/torsional point and the `j`-th lateral point.
//! Its six outputs are `[axial u, torsional theta, lateral deflection,
//! lateral slope, lateral deflection, lateral slope]` in log10 magnitude.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{DesignSpace, DesignVector, GeometryError, DESIGN_DIM};
use crate::response::{AnalysisGrids, ResponseCurve};
use crate::tmm::{ModeKind, TmmError, TmmSolver};

pub const CHANNELS: usize = 6;
pub const HIDDEN: usize = 100;

/// Smallest magnitude taken before the log transform.
const MAGNITUDE_FLOOR: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("dataset needs at least one row")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("normalized input {value} at row {row}, column {col} is outside [-1, 1]")]
    OutOfRange { row: usize, col: usize, value: f64 },
    #[error("could not draw a feasible design after {0} attempts")]
    Sampling(usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tmm(#[from] TmmError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SurrogateError + '_ {
    move |source| SurrogateError::Io { path: path.display().to_string(), source }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> SurrogateError + '_ {
    move |source| SurrogateError::Json { path: path.display().to_string(), source }
}

/// `n` points of a Latin hypercube on `[0, 1)^dim`, one row per point.
pub fn latin_hypercube<R: Rng>(n: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut rows = vec![vec![0.0; dim]; n];
    let mut strata: Vec<usize> = (0..n).collect();
    for j in 0..dim {
        strata.shuffle(rng);
        for (row, &s) in rows.iter_mut().zip(&strata) {
            row[j] = (s as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    rows
}

/// 80 × 6 table of magnitudes for one design, in the suite's channel order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSurface {
    pub magnitudes: Vec<[f64; CHANNELS]>,
    /// Set when the design lies outside the training box.
    pub extrapolation: bool,
}

impl ResponseSurface {
    /// Solve all three mode families on their grids.
    pub fn from_tmm(solver: &TmmSolver, space: &DesignSpace, grids: &AnalysisGrids, design: &DesignVector) -> Result<Self, SurrogateError> {
        let chain = space.build_segments(design)?;
        let curves: Vec<ResponseCurve> =
            ModeKind::ALL.iter().map(|&m| solver.frequency_sweep(&chain, grids.for_mode(m), m)).collect();
        Ok(Self::from_curves(&curves[0], &curves[1], &curves[2]))
    }

    pub fn from_curves(axial: &ResponseCurve, torsional: &ResponseCurve, lateral: &ResponseCurve) -> Self {
        let magnitudes = (0..axial.len())
            .map(|j| {
                let l = &lateral.magnitudes[j];
                [axial.magnitudes[j][0], torsional.magnitudes[j][0], l[0], l[1], l[2], l[3]]
            })
            .collect();
        Self { magnitudes, extrapolation: false }
    }

    pub fn log10(&self) -> Vec<[f64; CHANNELS]> {
        self.magnitudes.iter().map(|row| row.map(|m| m.max(MAGNITUDE_FLOOR).log10())).collect()
    }

    /// The mode-family view used by the response functions.
    pub fn curve(&self, mode: ModeKind, grids: &AnalysisGrids) -> ResponseCurve {
        let channels = channels_of(mode);
        ResponseCurve {
            mode,
            grid: grids.for_mode(mode).points().to_vec(),
            magnitudes: self.magnitudes.iter().map(|row| channels.clone().map(|c| row[c]).collect()).collect(),
            resonant: vec![false; self.magnitudes.len()],
        }
    }
}

/// Suite output channels belonging to a mode family.
pub fn channels_of(mode: ModeKind) -> std::ops::Range<usize> {
    match mode {
        ModeKind::Axial => 0..1,
        ModeKind::Torsional => 1..2,
        ModeKind::Lateral => 2..6,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub space: DesignSpace,
    pub grids: AnalysisGrids,
    pub seed: u64,
    pub decimal_digits: u32,
    /// Sampled designs that failed validation and were redrawn.
    pub resampled: usize,
    /// Physical range per input column; inputs map it onto [-1, 1].
    pub input_min: Vec<f64>,
    pub input_max: Vec<f64>,
    pub target_transform: String,
}

/// Normalized designs and log10 targets, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rows: usize,
    pub dim: usize,
    pub points: usize,
    /// `rows × dim`.
    pub inputs: Vec<f64>,
    /// `rows × points × CHANNELS`.
    pub targets: Vec<f64>,
    pub meta: DatasetMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    rows: usize,
    dim: usize,
    points: usize,
    channels: usize,
    byte_order: String,
    meta: DatasetMeta,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, targets: Vec<f64>, dim: usize, points: usize, meta: DatasetMeta) -> Result<Self, SurrogateError> {
        if dim == 0 || inputs.is_empty() {
            return Err(SurrogateError::Empty);
        }
        if inputs.len() % dim != 0 {
            return Err(SurrogateError::Shape(format!("{} inputs do not split into rows of {dim}", inputs.len())));
        }
        let rows = inputs.len() / dim;
        if targets.len() != rows * points * CHANNELS {
            return Err(SurrogateError::Shape(format!(
                "expected {rows}×{points}×{CHANNELS} targets, got {}",
                targets.len()
            )));
        }
        for (k, &v) in inputs.iter().enumerate() {
            if !v.is_finite() || v.abs() > 1.0 {
                if !v.is_finite() {
                    return Err(SurrogateError::NonFinite("inputs".into()));
                }
                return Err(SurrogateError::OutOfRange { row: k / dim, col: k % dim, value: v });
            }
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(SurrogateError::NonFinite("targets".into()));
        }
        Ok(Self { rows, dim, points, inputs, targets, meta })
    }

    pub fn input(&self, row: usize) -> &[f64] {
        &self.inputs[row * self.dim..(row + 1) * self.dim]
    }

    pub fn target(&self, row: usize, point: usize, channel: usize) -> f64 {
        self.targets[(row * self.points + point) * CHANNELS + channel]
    }

    /// Physical design of a row.
    pub fn design(&self, row: usize) -> Result<DesignVector, SurrogateError> {
        Ok(DesignVector::from_flat(&self.meta.space.bounds.denormalize(self.input(row)))?)
    }

    pub fn save(&self, dir: &Path) -> Result<(), SurrogateError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;

        let path = dir.join("inputs.csv");
        let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        let header: Vec<String> = (1..=self.dim).map(|i| format!("x_{i}")).collect();
        let mut text = header.join(",");
        text.push('\n');
        for r in 0..self.rows {
            let row: Vec<String> = self.input(r).iter().map(|v| v.to_string()).collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(io_err(&path))?;

        let path = dir.join("targets.bin");
        let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        for t in &self.targets {
            w.write_all(&t.to_le_bytes()).map_err(io_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;

        let path = dir.join("targets.json");
        let sidecar = Sidecar {
            rows: self.rows,
            dim: self.dim,
            points: self.points,
            channels: CHANNELS,
            byte_order: "little".into(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_string_pretty(&sidecar).map_err(json_err(&path))?;
        fs::write(&path, json + "\n").map_err(io_err(&path))
    }

    pub fn load(dir: &Path) -> Result<Self, SurrogateError> {
        let path = dir.join("targets.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(json_err(&path))?;
        if sidecar.channels != CHANNELS || sidecar.byte_order != "little" {
            return Err(SurrogateError::Parse {
                path: path.display().to_string(),
                message: format!("unsupported layout: {} channels, {} endian", sidecar.channels, sidecar.byte_order),
            });
        }

        let path = dir.join("inputs.csv");
        let reader = BufReader::new(File::open(&path).map_err(io_err(&path))?);
        let mut inputs = Vec::with_capacity(sidecar.rows * sidecar.dim);
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err(&path))?;
            if n == 0 || line.trim().is_empty() {
                continue;
            }
            let before = inputs.len();
            for field in line.split(',') {
                let v: f64 = field.trim().parse().map_err(|e| SurrogateError::Parse {
                    path: path.display().to_string(),
                    message: format!("line {}: {e}", n + 1),
                })?;
                inputs.push(v);
            }
            if inputs.len() - before != sidecar.dim {
                return Err(SurrogateError::Parse {
                    path: path.display().to_string(),
                    message: format!("line {}: expected {} fields", n + 1, sidecar.dim),
                });
            }
        }

        let path = dir.join("targets.bin");
        let mut bytes = Vec::new();
        File::open(&path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(&path))?;
        if bytes.len() % 8 != 0 {
            return Err(SurrogateError::Parse { path: path.display().to_string(), message: "truncated f64 stream".into() });
        }
        let targets = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();

        let data = Self::new(inputs, targets, sidecar.dim, sidecar.points, sidecar.meta)?;
        if data.rows != sidecar.rows {
            return Err(SurrogateError::Shape(format!("sidecar says {} rows, files hold {}", sidecar.rows, data.rows)));
        }
        Ok(data)
    }
}

/// Draw `n` feasible designs by Latin-hypercube sampling of the design box.
/// Returns the designs and how many draws were rejected.
pub fn sample_designs(n: usize, space: &DesignSpace, seed: u64) -> Result<(Vec<DesignVector>, usize), SurrogateError> {
    const MAX_REDRAWS: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ranges = space.bounds.flat_ranges(DESIGN_DIM / 3);
    let to_design = |u: &[f64]| -> Result<DesignVector, GeometryError> {
        let flat: Vec<f64> = ranges.iter().zip(u).map(|(r, &u)| r.min + u * r.width()).collect();
        DesignVector::from_flat(&flat)
    };
    let mut resampled = 0;
    let mut out = Vec::with_capacity(n);
    for u in latin_hypercube(n, DESIGN_DIM, &mut rng) {
        let mut design = to_design(&u)?;
        let mut tries = 0;
        while !space.validate(&design).is_feasible() {
            tries += 1;
            if tries > MAX_REDRAWS {
                return Err(SurrogateError::Sampling(MAX_REDRAWS));
            }
            let u: Vec<f64> = (0..DESIGN_DIM).map(|_| rng.random::<f64>()).collect();
            design = to_design(&u)?;
        }
        resampled += tries;
        out.push(design);
    }
    if resampled > 0 {
        info!("redrew {resampled} infeasible samples");
    }
    Ok((out, resampled))
}

/// Sample `n` designs and solve the full three-mode sweep for each.
pub fn generate_dataset(n: usize, space: &DesignSpace, grids: &AnalysisGrids, seed: u64, solver: &TmmSolver) -> Result<Dataset, SurrogateError> {
    if n == 0 {
        return Err(SurrogateError::Empty);
    }
    let (designs, resampled) = sample_designs(n, space, seed)?;
    dataset_from_designs(&designs, space, grids, seed, solver, resampled)
}

/// Dataset for a fixed list of designs; `seed` and `resampled` are stored as
/// given.
pub fn dataset_from_designs(
    designs: &[DesignVector],
    space: &DesignSpace,
    grids: &AnalysisGrids,
    seed: u64,
    solver: &TmmSolver,
    resampled: usize,
) -> Result<Dataset, SurrogateError> {
    let surfaces: Vec<ResponseSurface> = designs
        .par_iter()
        .map(|d| ResponseSurface::from_tmm(solver, space, grids, d))
        .collect::<Result<_, _>>()?;
    let mut inputs = Vec::with_capacity(designs.len() * DESIGN_DIM);
    let mut targets = Vec::with_capacity(designs.len() * grids.points() * CHANNELS);
    for (d, s) in designs.iter().zip(&surfaces) {
        inputs.extend(space.bounds.normalize(&d.to_flat()).into_iter().map(|v| v.clamp(-1.0, 1.0)));
        targets.extend(s.log10().into_iter().flatten());
    }
    let ranges = space.bounds.flat_ranges(DESIGN_DIM / 3);
    let meta = DatasetMeta {
        space: *space,
        grids: grids.clone(),
        seed,
        decimal_digits: solver.precision.decimal_digits,
        resampled,
        input_min: ranges.iter().map(|r| r.min).collect(),
        input_max: ranges.iter().map(|r| r.max).collect(),
        target_transform: "log10".into(),
    };
    Dataset::new(inputs, targets, DESIGN_DIM, grids.points(), meta)
}

/// One hidden tanh layer, linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
    /// `hidden × inputs`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `outputs × hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng>(inputs: usize, hidden: usize, outputs: usize, rng: &mut R) -> Self {
        let mut glorot = |fan_in: usize, fan_out: usize| -> Vec<f64> {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect()
        };
        let w1 = glorot(inputs, hidden);
        let w2 = glorot(hidden, outputs);
        Self { inputs, hidden, outputs, w1, b1: vec![0.0; hidden], w2, b2: vec![0.0; outputs] }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn hidden_layer(&self, x: &[f64], h: &mut [f64]) {
        for (k, hk) in h.iter_mut().enumerate() {
            let row = &self.w1[k * self.inputs..(k + 1) * self.inputs];
            *hk = (self.b1[k] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()).tanh();
        }
    }

    fn output_layer(&self, h: &[f64], y: &mut [f64]) {
        for (c, yc) in y.iter_mut().enumerate() {
            let row = &self.w2[c * self.hidden..(c + 1) * self.hidden];
            *yc = self.b2[c] + row.iter().zip(h).map(|(w, h)| w * h).sum::<f64>();
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.hidden];
        let mut y = vec![0.0; self.outputs];
        self.hidden_layer(x, &mut h);
        self.output_layer(&h, &mut y);
        y
    }

    fn params_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn is_finite(&self) -> bool {
        [&self.w1, &self.b1, &self.w2, &self.b2].iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Passes over the training split.
    pub max_iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub train_fraction: f64,
    /// L2 coefficient on the weight matrices.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            train_fraction: 0.8,
            weight_decay: 0.3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), SurrogateError> {
        let bad = |m: &str| Err(SurrogateError::Config(m.into()));
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return bad("momentum must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    /// The loss went non-finite; the best weights seen before are kept.
    Diverged { epoch: usize, message: String },
}

/// Network for one grid index, with the per-channel target scaling it was
/// trained under. Errors are mean squared log10 residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub index: usize,
    pub axial_hz: f64,
    pub lateral_hz: f64,
    pub net: Mlp,
    pub target_mean: [f64; CHANNELS],
    pub target_scale: [f64; CHANNELS],
    pub initial_mse: f64,
    pub train_mse: f64,
    pub test_mse: f64,
    pub status: FitStatus,
}

impl SurrogateModel {
    /// log10 magnitudes for a normalized input row.
    pub fn predict_log10(&self, x: &[f64]) -> [f64; CHANNELS] {
        let y = self.net.forward(x);
        std::array::from_fn(|c| self.target_mean[c] + self.target_scale[c] * y[c])
    }
}

/// Row indices of the train and test splits.
pub fn split_rows(rows: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((rows as f64 * train_fraction).round() as usize).clamp(1, rows);
    let test = order.split_off(n_train);
    (order, test)
}

struct Scratch {
    h: Vec<f64>,
    y: Vec<f64>,
    dh: Vec<f64>,
}

fn mse(net: &Mlp, data: &Dataset, rows: &[usize], targets: &dyn Fn(usize) -> [f64; CHANNELS], scale: &[f64; CHANNELS]) -> f64 {
    if rows.is_empty() {
        return f64::NAN;
    }
    let mut s = Scratch { h: vec![0.0; net.hidden], y: vec![0.0; net.outputs], dh: Vec::new() };
    let mut total = 0.0;
    for &r in rows {
        net.hidden_layer(data.input(r), &mut s.h);
        net.output_layer(&s.h, &mut s.y);
        let t = targets(r);
        total += (0..CHANNELS).map(|c| (scale[c] * (s.y[c] - t[c])).powi(2)).sum::<f64>();
    }
    total / (rows.len() * CHANNELS) as f64
}

fn train_model(data: &Dataset, index: usize, train: &[usize], test: &[usize], cfg: &TrainConfig) -> SurrogateModel {
    let raw = |r: usize| -> [f64; CHANNELS] { std::array::from_fn(|c| data.target(r, index, c)) };
    let mut mean = [0.0; CHANNELS];
    let mut scale = [1.0; CHANNELS];
    let mut constant = [false; CHANNELS];
    for c in 0..CHANNELS {
        let m = train.iter().map(|&r| raw(r)[c]).sum::<f64>() / train.len() as f64;
        let var = train.iter().map(|&r| (raw(r)[c] - m).powi(2)).sum::<f64>() / train.len() as f64;
        mean[c] = m;
        if var.sqrt() > 1e-12 * m.abs().max(1.0) {
            scale[c] = var.sqrt();
        } else {
            constant[c] = true;
        }
    }
    let standard = |r: usize| -> [f64; CHANNELS] {
        let t = raw(r);
        std::array::from_fn(|c| (t[c] - mean[c]) / scale[c])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Mlp::new(data.dim, HIDDEN, CHANNELS, &mut rng);
    for (c, &fixed) in constant.iter().enumerate() {
        if fixed {
            net.w2[c * HIDDEN..(c + 1) * HIDDEN].fill(0.0);
        }
    }

    let initial_mse = mse(&net, data, train, &standard, &scale);
    let mut best = (initial_mse, net.clone());
    let mut velocity: Vec<Vec<f64>> = net.params_mut().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut grads: Vec<Vec<f64>> = velocity.clone();
    let mut order = train.to_vec();
    let mut s = Scratch { h: vec![0.0; HIDDEN], y: vec![0.0; CHANNELS], dh: vec![0.0; HIDDEN] };
    let mut status = FitStatus::Converged;
    let d_in = data.dim;

    'epochs: for epoch in 1..=cfg.max_iterations {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grads.iter_mut().for_each(|g| g.fill(0.0));
            let inv = 1.0 / batch.len() as f64;
            for &r in batch {
                let x = data.input(r);
                net.hidden_layer(x, &mut s.h);
                net.output_layer(&s.h, &mut s.y);
                let t = standard(r);
                let (gw1, rest) = grads.split_at_mut(1);
                let (gb1, rest) = rest.split_at_mut(1);
                let (gw2, gb2) = rest.split_at_mut(1);
                let (gw1, gb1, gw2, gb2) = (&mut gw1[0], &mut gb1[0], &mut gw2[0], &mut gb2[0]);
                s.dh.fill(0.0);
                for c in 0..CHANNELS {
                    if constant[c] {
                        continue;
                    }
                    let e = (s.y[c] - t[c]) * inv;
                    gb2[c] += e;
                    let row = &net.w2[c * HIDDEN..(c + 1) * HIDDEN];
                    let grow = &mut gw2[c * HIDDEN..(c + 1) * HIDDEN];
                    for k in 0..HIDDEN {
                        grow[k] += e * s.h[k];
                        s.dh[k] += e * row[k];
                    }
                }
                for k in 0..HIDDEN {
                    let d = s.dh[k] * (1.0 - s.h[k] * s.h[k]);
                    gb1[k] += d;
                    let grow = &mut gw1[k * d_in..(k + 1) * d_in];
                    for (g, &xi) in grow.iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
            }
            for (k, ((p, v), g)) in net.params_mut().into_iter().zip(&mut velocity).zip(&grads).enumerate() {
                let decay = if k % 2 == 0 { cfg.weight_decay } else { 0.0 };
                for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *v = cfg.momentum * *v - cfg.learning_rate * (g + decay * *p);
                    *p += *v;
                }
            }
        }
        let train_mse = mse(&net, data, train, &standard, &scale);
        if !train_mse.is_finite() || !net.is_finite() {
            warn!("model {index}: loss became non-finite at epoch {epoch}");
            status = FitStatus::Diverged { epoch, message: format!("train loss {train_mse} at epoch {epoch}") };
            break 'epochs;
        }
        if train_mse < best.0 {
            best = (train_mse, net.clone());
        }
    }

    let (train_mse, net) = best;
    let test_mse = mse(&net, data, test, &standard, &scale);
    let grids = &data.meta.grids;
    SurrogateModel {
        index,
        axial_hz: grids.axial.points()[index],
        lateral_hz: grids.lateral.points()[index],
        net,
        target_mean: mean,
        target_scale: scale,
        initial_mse,
        train_mse,
        test_mse,
        status,
    }
}

/// One network per grid index, trained independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSuite {
    pub models: Vec<SurrogateModel>,
    pub space: DesignSpace,
    pub grids: AnalysisGrids,
    pub config: TrainConfig,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SuiteManifest {
    format_version: u32,
    space: DesignSpace,
    grids: AnalysisGrids,
    config: TrainConfig,
    train_rows: Vec<usize>,
    test_rows: Vec<usize>,
    models: Vec<String>,
}

const SUITE_FORMAT: u32 = 1;

pub fn train_suite(data: &Dataset, cfg: &TrainConfig) -> Result<SurrogateSuite, SurrogateError> {
    cfg.check()?;
    if data.rows < 2 {
        return Err(SurrogateError::Shape(format!("need at least 2 rows to split, got {}", data.rows)));
    }
    if data.points != data.meta.grids.points() {
        return Err(SurrogateError::Shape(format!("{} target points for {}-point grids", data.points, data.meta.grids.points())));
    }
    let (train, test) = split_rows(data.rows, cfg.train_fraction, cfg.seed);
    let models: Vec<SurrogateModel> =
        (0..data.points).into_par_iter().map(|j| train_model(data, j, &train, &test, cfg)).collect();
    Ok(SurrogateSuite {
        models,
        space: data.meta.space,
        grids: data.meta.grids.clone(),
        config: *cfg,
        train_rows: train,
        test_rows: test,
    })
}

impl SurrogateSuite {
    pub fn points(&self) -> usize {
        self.models.len()
    }

    /// Normalized network input for a design.
    pub fn encode(&self, design: &DesignVector) -> Vec<f64> {
        self.space.bounds.normalize(&design.to_flat())
    }

    pub fn out_of_bounds(&self, design: &DesignVector) -> bool {
        !self.space.validate(design).is_feasible()
    }

    pub fn predict(&self, design: &DesignVector) -> ResponseSurface {
        let x = self.encode(design);
        let magnitudes = self.models.iter().map(|m| m.predict_log10(&x).map(|v| 10f64.powf(v))).collect();
        ResponseSurface { magnitudes, extrapolation: self.out_of_bounds(design) }
    }

    pub fn predict_batch(&self, designs: &[DesignVector]) -> Vec<ResponseSurface> {
        designs.par_iter().map(|d| self.predict(d)).collect()
    }

    /// log10 outputs of the models at `indices` for a normalized input.
    pub fn predict_indices(&self, x: &[f64], indices: &[usize]) -> Vec<[f64; CHANNELS]> {
        indices.iter().map(|&j| self.models[j].predict_log10(x)).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<(), SurrogateError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut names = Vec::with_capacity(self.models.len());
        for m in &self.models {
            let name = format!("model_{:03}.json", m.index);
            let path = dir.join(&name);
            let json = serde_json::to_string(m).map_err(json_err(&path))?;
            fs::write(&path, json + "\n").map_err(io_err(&path))?;
            names.push(name);
        }
        let manifest = SuiteManifest {
            format_version: SUITE_FORMAT,
            space: self.space,
            grids: self.grids.clone(),
            config: self.config,
            train_rows: self.train_rows.clone(),
            test_rows: self.test_rows.clone(),
            models: names,
        };
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).map_err(json_err(&path))?;
        fs::write(&path, json + "\n").map_err(io_err(&path))
    }

    pub fn load(dir: &Path) -> Result<Self, SurrogateError> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: SuiteManifest = serde_json::from_str(&text).map_err(json_err(&path))?;
        if manifest.format_version != SUITE_FORMAT {
            return Err(SurrogateError::Parse {
                path: path.display().to_string(),
                message: format!("unsupported format version {}", manifest.format_version),
            });
        }
        let mut models = Vec::with_capacity(manifest.models.len());
        for name in &manifest.models {
            let path = dir.join(name);
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let model: SurrogateModel = serde_json::from_str(&text).map_err(json_err(&path))?;
            models.push(model);
        }
        if models.len() != manifest.grids.points() || models.iter().enumerate().any(|(j, m)| m.index != j) {
            return Err(SurrogateError::Shape(format!("manifest lists {} models for {} grid points", models.len(), manifest.grids.points())));
        }
        Ok(Self {
            models,
            space: manifest.space,
            grids: manifest.grids,
            config: manifest.config,
            train_rows: manifest.train_rows,
            test_rows: manifest.test_rows,
        })
    }
}
