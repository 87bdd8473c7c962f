//! Analysis configuration, read from TOML. Relative paths resolve against
//! the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use fairboard_core::league::{default_scenarios, Scenario};
use fairboard_core::metrics::{Metric, Outcome};
use fairboard_core::representational::{EmbedMethod, EmbedParams, Metric as Distance};
use fairboard_core::representational::{PCA_MAX_COMPONENTS, RASTER_SIZE, SPIKE_FWHM};
use fairboard_core::volume::{Compartment, LabelMap};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "FAIRBOARD_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub cohort: PathBuf,
    /// Predictions as `<masks>/<model_id>/<patient_id>.nii[.gz]`.
    pub masks: PathBuf,
    /// Reference labels as `<ground_truth>/<patient_id>.nii[.gz]`.
    pub ground_truth: PathBuf,
    pub output: PathBuf,
    /// `label=COMPARTMENT` lines; the 1/2/4 convention when absent.
    #[serde(default)]
    pub label_map: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LeagueConfig {
    /// `[w_perf, w_equity]` pairs.
    pub scenarios: Vec<[f64; 2]>,
}

impl Default for LeagueConfig {
    fn default() -> Self {
        LeagueConfig {
            scenarios: default_scenarios().iter().map(|s| [s.w_perf, s.w_equity]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialConfig {
    pub outcomes: Vec<String>,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        let outcomes = Compartment::ALL
            .iter()
            .flat_map(|&c| [Metric::Dice, Metric::Hd95].map(|m| Outcome::new(c, m).column()))
            .collect();
        SpatialConfig { outcomes }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepresentationalConfig {
    pub outcomes: Vec<String>,
    pub method: EmbedMethod,
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub metric: Distance,
    pub n_epochs: usize,
    pub pca_max_components: usize,
    pub raster_size: usize,
    pub spike_fwhm: f64,
}

impl Default for RepresentationalConfig {
    fn default() -> Self {
        let e = EmbedParams::default();
        RepresentationalConfig {
            outcomes: Compartment::ALL.iter().map(|&c| Outcome::new(c, Metric::Dice).column()).collect(),
            method: e.method,
            n_neighbors: e.n_neighbors,
            min_dist: e.min_dist,
            metric: e.metric,
            n_epochs: e.n_epochs,
            pca_max_components: PCA_MAX_COMPONENTS,
            raster_size: RASTER_SIZE,
            spike_fwhm: SPIKE_FWHM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub paths: Paths,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::fwhm_mm")]
    pub fwhm_mm: f64,
    #[serde(default = "defaults::n_perm")]
    pub n_perm: usize,
    #[serde(default = "defaults::bootstrap_iters")]
    pub bootstrap_iters: usize,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    #[serde(default = "defaults::yes")]
    pub exclude_oedema_only: bool,
    /// Models that never predict the NET label; their NET metrics stay missing.
    #[serde(default)]
    pub two_class_models: Vec<String>,
    /// Use `1/x` for hd95 and asd before computing inequality indices.
    #[serde(default)]
    pub invert_distances: bool,
    #[serde(default)]
    pub league: LeagueConfig,
    #[serde(default)]
    pub spatial: SpatialConfig,
    #[serde(default)]
    pub representational: RepresentationalConfig,
}

mod defaults {
    pub fn alpha() -> f64 {
        0.05
    }
    pub fn fwhm_mm() -> f64 {
        8.0
    }
    pub fn n_perm() -> usize {
        1000
    }
    pub fn bootstrap_iters() -> usize {
        1000
    }
    pub fn seed() -> u64 {
        fairboard_core::stats::rng::DEFAULT_SEED
    }
    pub fn yes() -> bool {
        true
    }
}

impl AnalysisConfig {
    /// Defaults everywhere except the paths.
    pub fn new(paths: Paths) -> Self {
        AnalysisConfig {
            paths,
            alpha: defaults::alpha(),
            fwhm_mm: defaults::fwhm_mm(),
            n_perm: defaults::n_perm(),
            bootstrap_iters: defaults::bootstrap_iters(),
            seed: defaults::seed(),
            exclude_oedema_only: true,
            two_class_models: vec![],
            invert_distances: false,
            league: LeagueConfig::default(),
            spatial: SpatialConfig::default(),
            representational: RepresentationalConfig::default(),
        }
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: AnalysisConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    /// Read, resolve relative paths, apply the seed environment override and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::parse(&text, base)?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for path in [&mut p.cohort, &mut p.masks, &mut p.ground_truth, &mut p.output] {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        if let Some(l) = p.label_map.as_mut().filter(|l| l.is_relative()) {
            *l = base.join(&*l);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} must lie in (0, 1)", self.alpha));
        }
        if !(0.0..=16.0).contains(&self.fwhm_mm) {
            return bad(format!("fwhm_mm {} must lie in [0, 16]", self.fwhm_mm));
        }
        if self.n_perm < 100 {
            return bad(format!("n_perm {} must be at least 100", self.n_perm));
        }
        if self.bootstrap_iters == 0 {
            return bad("bootstrap_iters must be positive".into());
        }
        self.scenarios()?;
        self.spatial_outcomes()?;
        self.representational_outcomes()?;
        self.embed_params().validate()?;
        let r = &self.representational;
        if r.pca_max_components == 0 || r.raster_size < 2 || !(r.spike_fwhm > 0.0) {
            return bad("pca_max_components, raster_size and spike_fwhm must be positive".into());
        }
        Ok(())
    }

    pub fn label_map(&self) -> Result<LabelMap> {
        Ok(match &self.paths.label_map {
            Some(p) => LabelMap::load(p)?,
            None => LabelMap::default(),
        })
    }

    pub fn scenarios(&self) -> Result<Vec<Scenario>> {
        Ok(self
            .league
            .scenarios
            .iter()
            .map(|&[p, e]| Scenario::new(p, e))
            .collect::<fairboard_core::Result<_>>()?)
    }

    pub fn spatial_outcomes(&self) -> Result<Vec<Outcome>> {
        parse_outcomes(&self.spatial.outcomes)
    }

    pub fn representational_outcomes(&self) -> Result<Vec<Outcome>> {
        parse_outcomes(&self.representational.outcomes)
    }

    /// The embedding shares the analysis seed.
    pub fn embed_params(&self) -> EmbedParams {
        let r = &self.representational;
        EmbedParams {
            method: r.method,
            n_neighbors: r.n_neighbors,
            min_dist: r.min_dist,
            metric: r.metric,
            seed: self.seed,
            n_epochs: r.n_epochs,
        }
    }
}

fn parse_outcomes(names: &[String]) -> Result<Vec<Outcome>> {
    let out: Vec<Outcome> = names
        .iter()
        .map(|s| s.parse::<Outcome>())
        .collect::<fairboard_core::Result<_>>()?;
    let mut seen = out.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != out.len() {
        return Err(CliError::Config("duplicate outcome".into()));
    }
    Ok(out)
}
