//! Run configuration, read from a TOML file.

use std::path::{Path, PathBuf};

use metaforge::geometry::{DesignBounds, DesignSpace, PipeSpec};
use metaforge::inn::InnTrainConfig;
use metaforge::optimize::{BandPlan, MassSearch, PsoConfig, RangeTargets};
use metaforge::response::AnalysisGrids;
use metaforge::surrogate::TrainConfig;
use metaforge::tmm::PrecisionConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub points: usize,
    pub axial_torsional_hz: (f64, f64),
    pub lateral_hz: (f64, f64),
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { points: 80, axial_torsional_hz: (0.1, 800.0), lateral_hz: (0.1, 10_000.0) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub samples: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { samples: 2000, seed: 0 }
    }
}

/// Every setting of the pipeline. Missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub workspace: PathBuf,
    pub pipe: PipeSpec,
    pub bounds: DesignBounds,
    pub grids: GridConfig,
    pub tmm: PrecisionConfig,
    pub sampler: SamplerConfig,
    pub surrogate: TrainConfig,
    pub pso: PsoConfig,
    pub targets: RangeTargets,
    pub mass_search: MassSearch,
    pub band_plan: BandPlan,
    pub inn: InnTrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            workspace: PathBuf::from("workspace"),
            pipe: PipeSpec::default(),
            bounds: DesignBounds::default(),
            grids: GridConfig::default(),
            tmm: PrecisionConfig::default(),
            sampler: SamplerConfig::default(),
            surrogate: TrainConfig::default(),
            pso: PsoConfig::default(),
            targets: RangeTargets::default(),
            mass_search: MassSearch::default(),
            band_plan: BandPlan::default(),
            inn: InnTrainConfig::default(),
        }
    }
}

fn key_err(key: &str, message: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {message}"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::parse(&text).map_err(|e| match e {
                    CliError::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }

    #[cfg(test)]
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.pipe.check().map_err(|e| key_err("pipe", e))?;
        self.bounds.check().map_err(|e| key_err("bounds", e))?;
        PrecisionConfig::new(self.tmm.decimal_digits).map_err(|e| key_err("tmm.decimal_digits", e))?;
        let g = &self.grids;
        if g.points < 3 {
            return Err(key_err("grids.points", "need at least 3 points"));
        }
        for (key, (lo, hi)) in [("grids.axial_torsional_hz", g.axial_torsional_hz), ("grids.lateral_hz", g.lateral_hz)] {
            if !(lo > 0.0 && hi > lo && hi.is_finite()) {
                return Err(key_err(key, format!("need 0 < lo < hi, got ({lo}, {hi})")));
            }
        }
        if self.sampler.samples == 0 {
            return Err(key_err("sampler.samples", "must be positive"));
        }
        self.surrogate.check().map_err(|e| key_err("surrogate", e))?;
        self.pso.check().map_err(|e| key_err("pso", e))?;
        let t = self.targets;
        if ![t.axial_hz, t.torsional_hz, t.lateral_hz].iter().all(|v| *v > 0.0 && v.is_finite()) {
            return Err(key_err("targets", "range targets must be positive"));
        }
        self.band_plan.bands().map_err(|e| key_err("band_plan", e))?;
        self.inn.check().map_err(|e| key_err("inn", e))?;
        Ok(())
    }

    pub fn space(&self) -> DesignSpace {
        DesignSpace::new(self.pipe, self.bounds)
    }

    pub fn analysis_grids(&self) -> AnalysisGrids {
        AnalysisGrids::linear(self.grids.points, self.grids.axial_torsional_hz, self.grids.lateral_hz).expect("validated grids")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.tmm.decimal_digits, 100);
        assert_eq!(cfg.pso.population, 300);
        assert_eq!(cfg.surrogate.max_iterations, 200);
        assert_eq!(cfg.pipe.length, 9.0);
    }

    #[test]
    fn low_precision_is_rejected() {
        let err = RunConfig::parse("[tmm]\ndecimal_digits = 8\n").unwrap_err();
        assert!(matches!(&err, CliError::Config(m) if m.contains("tmm.decimal_digits")), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[pso]\npopulaton = 3\n").is_err());
        assert!(RunConfig::parse("colour = 1\n").is_err());
    }

    #[test]
    fn out_of_range_values_name_the_key() {
        let err = RunConfig::parse("[grids]\nlateral_hz = [10.0, 1.0]\n").unwrap_err();
        assert!(err.to_string().contains("grids.lateral_hz"), "{err}");
        let err = RunConfig::parse("[pso]\npopulation = 1\n").unwrap_err();
        assert!(err.to_string().contains("pso"), "{err}");
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig::parse("[sampler]\nsamples = 17\nseed = 4\n[pso]\npopulation = 20\n[tmm]\ndecimal_digits = 50\n").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_toml()).unwrap(), RunConfig::default());
    }
}
