use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use metaforge::geometry::{insert_mass, DesignSpace, DesignVector, SegmentChain};
use metaforge::inn::{retrieve_design, train_inn, InnModel, ZPolicy};
use metaforge::optimize::{applicable_modes, generate_inverse_dataset, maximize_band, verify_design, InverseDataset, PsoConfig};
use metaforge::response::{detect_peaks, Band, ResponseCurve};
use metaforge::surrogate::{generate_dataset, train_suite, Dataset, FitStatus, SurrogateSuite, TrainConfig};
use metaforge::tmm::{ModeKind, PrecisionConfig, TmmSolver};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::workspace::{key_hash, write_json, Clock, FileRecord, Kind, RunManifest, Workspace};
use crate::{Cli, CliError, Command};

fn rt(e: impl Display) -> CliError {
    CliError::Runtime(e.to_string())
}

struct Ctx {
    cfg: RunConfig,
    ws: Workspace,
    clock: Clock,
}

impl Ctx {
    fn solver(&self) -> TmmSolver {
        TmmSolver::new(PrecisionConfig::new(self.cfg.tmm.decimal_digits).expect("validated precision"))
    }

    fn config_value(&self) -> Value {
        serde_json::to_value(&self.cfg).expect("config serializes")
    }

    #[allow(clippy::too_many_arguments)]
    fn manifest(&self, command: &str, key: &str, seeds: Value, inputs: Vec<FileRecord>, outputs: Vec<FileRecord>, oracles: Value, reused: bool) -> Result<(), CliError> {
        let dir = self.ws.artifact(Kind::Runs, &format!("{command}-{key}"));
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let m = RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            config: self.config_value(),
            seeds,
            inputs,
            outputs,
            oracles,
            reused,
            started_unix: self.clock.unix(),
            wall_time_s: self.clock.elapsed(),
        };
        write_json(&dir.join("manifest.json"), &m)
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(rt)?;
    }
    let cfg = RunConfig::load(cli.global.config.as_deref())?;
    let ws = Workspace::resolve(cli.global.workspace.as_deref(), &cfg.workspace);
    let mut ctx = Ctx { cfg, ws, clock: Clock::start() };
    match cli.command {
        Command::Sweep { design, mode, out } => sweep(&ctx, design.as_deref(), mode, out.as_deref()),
        Command::GenSamples { samples, seed } => {
            if let Some(n) = samples {
                ctx.cfg.sampler.samples = n;
            }
            if let Some(s) = seed {
                ctx.cfg.sampler.seed = s;
            }
            ctx.cfg.validate()?;
            gen_samples(&ctx)
        }
        Command::TrainSurrogates { dataset, seed } => {
            if let Some(s) = seed {
                ctx.cfg.surrogate.seed = s;
            }
            train_surrogates(&ctx, &dataset)
        }
        Command::OptimizeBand { surrogates, seed } => {
            if let Some(s) = seed {
                ctx.cfg.pso.seed = s;
            }
            optimize_band(&ctx, &surrogates)
        }
        Command::GenInverseSamples { surrogates, seed } => {
            if let Some(s) = seed {
                ctx.cfg.pso.seed = s;
            }
            gen_inverse(&ctx, &surrogates)
        }
        Command::TrainInn { inverse, seed } => {
            if let Some(s) = seed {
                ctx.cfg.inn.seed = s;
            }
            train(&ctx, &inverse)
        }
        Command::Retrieve { band, model, z } => retrieve(&ctx, &parse_band(&band)?, &model, parse_policy(&z)?),
        Command::Verify { design, band, modes } => verify(&ctx, &design, &parse_band(&band)?, &modes),
    }
}

pub fn parse_band(text: &str) -> Result<Band, CliError> {
    let bad = || CliError::Config(format!("--band expects lo:hi in Hz, got '{text}'"));
    let (lo, hi) = text.split_once(':').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    Band::new(lo, hi).map_err(|e| CliError::Config(format!("--band: {e}")))
}

pub fn parse_policy(text: &str) -> Result<ZPolicy, CliError> {
    let bad = || CliError::Config(format!("--z expects 'zero' or 'samples:N[:seed]', got '{text}'"));
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        ["zero"] => Ok(ZPolicy::Zero),
        ["samples", n] | ["samples", n, _] => {
            let count: usize = n.parse().map_err(|_| bad())?;
            let seed = if parts.len() == 3 { parts[2].parse().map_err(|_| bad())? } else { 0 };
            if count == 0 {
                return Err(bad());
            }
            Ok(ZPolicy::Samples { count, seed })
        }
        _ => Err(bad()),
    }
}

fn read_design(path: &Path, space: &DesignSpace) -> Result<DesignVector, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let design: DesignVector = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let report = space.validate(&design);
    if !report.is_feasible() {
        return Err(CliError::Infeasible(format!("{}: {}", path.display(), serde_json::to_string(&report).map_err(rt)?)));
    }
    Ok(design)
}

fn curve_csv(curve: &ResponseCurve) -> String {
    let peaks = detect_peaks(curve);
    let mut text = String::from("frequency_hz");
    for dof in curve.mode.dofs() {
        text.push(',');
        text.push_str(dof);
    }
    text.push_str(",resonant,peak\n");
    for (i, f) in curve.grid.iter().enumerate() {
        text.push_str(&f.to_string());
        for v in &curve.magnitudes[i] {
            text.push(',');
            text.push_str(&format!("{v:e}"));
        }
        text.push_str(&format!(",{},{}\n", curve.resonant[i], peaks.contains(&i)));
    }
    text
}

fn stdout_line(text: &str) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(rt)
}

fn sweep(ctx: &Ctx, design: Option<&Path>, mode: ModeKind, out: Option<&Path>) -> Result<(), CliError> {
    let space = ctx.cfg.space();
    let (chain, inputs, design_value) = match design {
        Some(p) => {
            let d = read_design(p, &space)?;
            (space.build_segments(&d).map_err(rt)?, vec![FileRecord::of(p)?], serde_json::to_value(&d).map_err(rt)?)
        }
        None => (SegmentChain::uniform(&ctx.cfg.pipe), vec![], Value::Null),
    };
    let grids = ctx.cfg.analysis_grids();
    let key = key_hash(&("sweep", mode, &design_value, &space, &grids, ctx.cfg.tmm));
    let (dir, reused) = ctx.ws.produce(Kind::Runs, &format!("sweep-{key}"), |stage| {
        let curve = ctx.solver().frequency_sweep(&chain, grids.for_mode(mode), mode);
        fs::write(stage.join("curve.csv"), curve_csv(&curve)).map_err(|e| CliError::io(stage, e))
    })?;
    let csv_path = dir.join("curve.csv");
    let csv = fs::read_to_string(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    if let Some(p) = out {
        fs::write(p, &csv).map_err(|e| CliError::io(p, e))?;
    }
    print!("{csv}");
    ctx.manifest("sweep", &key, Value::Null, inputs, vec![FileRecord::of(&csv_path)?], json!({ "curve": "tmm" }), reused)
}

fn gen_samples(ctx: &Ctx) -> Result<(), CliError> {
    let space = ctx.cfg.space();
    let grids = ctx.cfg.analysis_grids();
    let s = ctx.cfg.sampler;
    let key = key_hash(&("dataset", &space, &grids, ctx.cfg.tmm, s));
    let (dir, reused) = ctx.ws.produce(Kind::Datasets, &key, |stage| {
        info!("solving {} sampled designs", s.samples);
        let data = generate_dataset(s.samples, &space, &grids, s.seed, &ctx.solver()).map_err(rt)?;
        data.save(stage).map_err(rt)
    })?;
    stdout_line(&dir.display().to_string())?;
    ctx.manifest("gen-samples", &key, json!({ "sampler": s.seed }), vec![], vec![FileRecord::of(&dir)?], json!({ "targets": "tmm" }), reused)
}

fn suite_summary(suite: &SurrogateSuite) -> Value {
    let below = suite.models.iter().filter(|m| m.test_mse < 0.05).count();
    let diverged = suite.models.iter().filter(|m| !matches!(m.status, FitStatus::Converged)).count();
    let mut tests: Vec<f64> = suite.models.iter().map(|m| m.test_mse).collect();
    tests.sort_by(f64::total_cmp);
    json!({
        "models": suite.models.len(),
        "test_mse_below_0.05": below,
        "median_test_mse": tests.get(tests.len() / 2),
        "diverged": diverged,
    })
}

fn train_surrogates(ctx: &Ctx, dataset: &Path) -> Result<(), CliError> {
    let input = FileRecord::of(dataset)?;
    let tcfg: TrainConfig = ctx.cfg.surrogate;
    let key = key_hash(&("surrogates", &input.sha256, tcfg));
    let (dir, reused) = ctx.ws.produce(Kind::Models, &key, |stage| {
        let data = Dataset::load(dataset).map_err(rt)?;
        info!("training {} surrogate models on {} rows", data.points, data.rows);
        let suite = train_suite(&data, &tcfg).map_err(rt)?;
        suite.save(stage).map_err(rt)
    })?;
    let suite = SurrogateSuite::load(&dir).map_err(rt)?;
    let summary = suite_summary(&suite);
    info!("surrogate fit: {summary}");
    stdout_line(&dir.display().to_string())?;
    ctx.manifest(
        "train-surrogates",
        &key,
        json!({ "train": tcfg.seed }),
        vec![input],
        vec![FileRecord::of(&dir)?],
        json!({ "mse": "surrogate vs tmm targets", "summary": summary }),
        reused,
    )
}

fn load_suite(path: &Path) -> Result<(SurrogateSuite, FileRecord), CliError> {
    let record = FileRecord::of(path)?;
    Ok((SurrogateSuite::load(path).map_err(rt)?, record))
}

fn optimize_band(ctx: &Ctx, surrogates: &Path) -> Result<(), CliError> {
    let (suite, input) = load_suite(surrogates)?;
    let pso: PsoConfig = ctx.cfg.pso;
    let key = key_hash(&("optimize-band", &input.sha256, pso, ctx.cfg.targets, ctx.cfg.tmm));
    let solver = ctx.solver();
    let (dir, reused) = ctx.ws.produce(Kind::Runs, &format!("optimize-band-{key}"), |stage| {
        let result = maximize_band(&suite, &solver, &ctx.cfg.targets, &pso).map_err(rt)?;
        if !result.feasible {
            warn!("no design met every range target; returning the best effort");
        }
        write_json(&stage.join("design.json"), &result.design)?;
        write_json(&stage.join("result.json"), &result)
    })?;
    stdout_line(&dir.join("design.json").display().to_string())?;
    ctx.manifest(
        "optimize-band",
        &key,
        json!({ "pso": pso.seed }),
        vec![input],
        vec![FileRecord::of(&dir.join("design.json"))?, FileRecord::of(&dir.join("result.json"))?],
        json!({ "objective": "surrogate", "verified": "tmm", "feasible": "tmm" }),
        reused,
    )
}

fn gen_inverse(ctx: &Ctx, surrogates: &Path) -> Result<(), CliError> {
    let (suite, input) = load_suite(surrogates)?;
    let c = &ctx.cfg;
    let key = key_hash(&("inverse", &input.sha256, c.pso, &c.band_plan, c.mass_search, c.tmm));
    let solver = ctx.solver();
    let (dir, reused) = ctx.ws.produce(Kind::Datasets, &key, |stage| {
        let data = generate_inverse_dataset(&suite, &solver, &c.band_plan, &c.pso, &c.mass_search).map_err(rt)?;
        info!("{} verified inverse rows", data.len());
        data.save(&stage.join("inverse.csv")).map_err(rt)
    })?;
    let csv = dir.join("inverse.csv");
    stdout_line(&csv.display().to_string())?;
    ctx.manifest(
        "gen-inverse-samples",
        &key,
        json!({ "pso": c.pso.seed, "per_band": "seed + 1000 k" }),
        vec![input],
        vec![FileRecord::of(&csv)?],
        json!({ "constraint": "surrogate", "rows_verified": "tmm", "mass": "geometry" }),
        reused,
    )
}

fn train(ctx: &Ctx, inverse: &Path) -> Result<(), CliError> {
    let csv: PathBuf = if inverse.is_dir() { inverse.join("inverse.csv") } else { inverse.to_path_buf() };
    let input = FileRecord::of(&csv)?;
    let icfg = ctx.cfg.inn;
    let key = key_hash(&("inn", &input.sha256, icfg, ctx.cfg.bounds));
    let (dir, reused) = ctx.ws.produce(Kind::Models, &key, |stage| {
        let data = InverseDataset::load(&csv).map_err(rt)?;
        let model = train_inn(&data, &ctx.cfg.bounds, &icfg).map_err(|e| match e {
            metaforge::inn::InnError::TooFewRows { .. } => CliError::Infeasible(e.to_string()),
            other => rt(other),
        })?;
        model.save(stage).map_err(rt)
    })?;
    let model = InnModel::load(&dir).map_err(rt)?;
    if let Some(s) = &model.summary {
        info!("INN y-fit mse: train {:.4} test {:.4} (normalized)", s.train_mse, s.test_mse);
    }
    stdout_line(&dir.display().to_string())?;
    ctx.manifest("train-inn", &key, json!({ "inn": icfg.seed }), vec![input], vec![FileRecord::of(&dir)?], json!({ "mse": "inn vs dataset" }), reused)
}

fn model_dir(path: &Path) -> PathBuf {
    if path.is_file() {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        path.to_path_buf()
    }
}

#[derive(Serialize)]
struct RetrieveSummary {
    design: PathBuf,
    report: PathBuf,
    feasible: bool,
    mass_kg: Option<f64>,
    extrapolation: bool,
    oracle: &'static str,
}

fn retrieve(ctx: &Ctx, band: &Band, model: &Path, policy: ZPolicy) -> Result<(), CliError> {
    let dir = model_dir(model);
    let input = FileRecord::of(&dir)?;
    let model = InnModel::load(&dir).map_err(rt)?;
    let grids = ctx.cfg.analysis_grids();
    if applicable_modes(&grids, band).is_empty() {
        return Err(CliError::Infeasible(format!("band ({}, {}) Hz is outside every analysis range", band.lo, band.hi)));
    }
    let space = DesignSpace::new(ctx.cfg.pipe, model.x_bounds);
    let key = key_hash(&("retrieve", &input.sha256, band, policy, &grids, ctx.cfg.pipe, ctx.cfg.tmm));
    let (out, reused) = ctx.ws.produce(Kind::Runs, &format!("retrieve-{key}"), |stage| {
        let report = retrieve_design(&model, band, policy, &space, &grids, &ctx.solver()).map_err(rt)?;
        let chosen = report.best().or(report.candidates.first()).expect("at least one candidate");
        if report.best().is_none() {
            warn!("no candidate was TMM-feasible; writing the one with fewest in-band peaks");
        }
        write_json(&stage.join("design.json"), &chosen.design)?;
        write_json(&stage.join("report.json"), &report)
    })?;
    let text = fs::read_to_string(out.join("report.json")).map_err(|e| CliError::io(&out, e))?;
    let report: metaforge::inn::RetrievalReport = serde_json::from_str(&text).map_err(rt)?;
    let summary = RetrieveSummary {
        design: out.join("design.json"),
        report: out.join("report.json"),
        feasible: report.best().is_some(),
        mass_kg: report.candidates.first().map(|c| c.mass_kg),
        extrapolation: report.extrapolation,
        oracle: "tmm",
    };
    stdout_line(&serde_json::to_string_pretty(&summary).map_err(rt)?)?;
    ctx.manifest(
        "retrieve",
        &key,
        serde_json::to_value(policy).map_err(rt)?,
        vec![input],
        vec![FileRecord::of(&out.join("design.json"))?, FileRecord::of(&out.join("report.json"))?],
        json!({ "design": "inn", "feasible": "tmm", "mass": "geometry" }),
        reused,
    )
}

fn verify(ctx: &Ctx, design_path: &Path, band: &Band, modes: &[ModeKind]) -> Result<(), CliError> {
    let space = ctx.cfg.space();
    let design = read_design(design_path, &space)?;
    let grids = ctx.cfg.analysis_grids();
    let applicable = applicable_modes(&grids, band);
    if applicable.is_empty() {
        return Err(CliError::Infeasible(format!("band ({}, {}) Hz is outside every analysis range", band.lo, band.hi)));
    }
    let chosen: Vec<ModeKind> = if modes.is_empty() { applicable } else { modes.to_vec() };
    if let Some(m) = chosen.iter().find(|m| !grids.for_mode(**m).contains_band(band)) {
        return Err(CliError::Infeasible(format!("band ({}, {}) Hz is outside the {m} analysis range", band.lo, band.hi)));
    }
    let input = FileRecord::of(design_path)?;
    let key = key_hash(&("verify", &input.sha256, band, &chosen, &grids, &space, ctx.cfg.tmm));
    let (out, reused) = ctx.ws.produce(Kind::Runs, &format!("verify-{key}"), |stage| {
        let verified = verify_design(&ctx.solver(), &space, &grids, &design, Some(band), &chosen).map_err(rt)?;
        let feasible = verified.iter().all(|v| v.peaks_in_band == Some(0));
        let report = json!({
            "band": band,
            "feasible": feasible,
            "mass_kg": insert_mass(&design, &space.pipe).map_err(rt)?,
            "modes": verified,
            "oracle": "tmm",
        });
        write_json(&stage.join("report.json"), &report)
    })?;
    let path = out.join("report.json");
    print!("{}", fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?);
    ctx.manifest("verify", &key, Value::Null, vec![input], vec![FileRecord::of(&path)?], json!({ "feasible": "tmm" }), reused)
}
