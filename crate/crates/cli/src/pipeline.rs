//! One function per analysis stage. Each reads its inputs from disk, writes
//! its artifacts under the output directory and records a manifest. A stage
//! whose manifest shows identical inputs, configuration and outputs is
//! skipped unless forced.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use fairboard_core::cohort::{read_cohort_csv, CohortRow};
use fairboard_core::inequality::{inequality_table, read_inequality_csv, write_inequality_csv, IndexParams};
use fairboard_core::league::{build_league, write_league_csv};
use fairboard_core::lme::{run_cohort_suite, write_coefficients_csv, write_variance_csv};
use fairboard_core::metrics::{evaluate_case, read_metrics_csv, write_metrics_csv, MetricRecord, Outcome};
use fairboard_core::representational::{
    build_feature_matrix, embed_2d, latent_analysis, lesion_channels, significant_overlap_map, BitRows, EffectProfile,
    LatentConfig, MASK_SIDE,
};
use fairboard_core::spatial::{
    dersimonian_laird, heterogeneity_summary, per_model_spatial_glm, prevalence_map, sign_flip_permutation,
    spatial_design_spec, HeterogeneitySummary, PermSummary,
};
use fairboard_core::stats::rng::derive_seed;
use fairboard_core::stats::smooth::smooth_grid;
use fairboard_core::univariate::{age_bin_table, gap_table, write_age_bin_csv, write_gap_csv};
use fairboard_core::volume::{extract_compartments, read_volume, write_volume, Compartment, CompartmentMask, Grid, LabelMap, Volume};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::AnalysisConfig;
use crate::error::{CliError, Result};
use crate::manifest::Manifest;

pub mod artifacts {
    pub const METRICS: &str = "metrics.csv";
    pub const EXCLUSIONS: &str = "exclusions.csv";
    pub const GAPS: &str = "univariate_gaps.csv";
    pub const AGE_BINS: &str = "univariate_age_bins.csv";
    pub const INEQUALITY: &str = "inequality.csv";
    pub const LEAGUE: &str = "league.csv";
    pub const COEFFICIENTS: &str = "cohort_coefficients.csv";
    pub const VARIANCE: &str = "cohort_variance.csv";
    pub const SPATIAL: &str = "spatial";
    pub const REPRESENTATIONAL: &str = "representational";
    pub const SUMMARY: &str = "summary.json";
    pub const COORDS: &str = "coords.csv";
    pub const RUN_CONFIG: &str = "run_config.json";
    pub const LATENT: &str = "latent.json";
    pub const PROFILE: &str = "effect_profile.csv";
}

/// Volume file extensions tried, in order, when locating a case.
pub const VOLUME_EXTENSIONS: [&str; 2] = ["nii.gz", "nii"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Evaluate,
    Univariate,
    Inequality,
    League,
    Cohort,
    Spatial,
    Representational,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Evaluate,
        Stage::Univariate,
        Stage::Inequality,
        Stage::League,
        Stage::Cohort,
        Stage::Spatial,
        Stage::Representational,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Evaluate => "evaluate",
            Stage::Univariate => "univariate",
            Stage::Inequality => "inequality",
            Stage::League => "league",
            Stage::Cohort => "cohort",
            Stage::Spatial => "spatial",
            Stage::Representational => "representational",
        }
    }
}

pub fn run_stage(cfg: &AnalysisConfig, stage: Stage, force: bool) -> Result<Manifest> {
    let out = &cfg.paths.output;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut m = Manifest::new(stage.name(), cfg);
    add_inputs(cfg, stage, &mut m)?;
    if !force && m.is_fresh(out) {
        log::info!("{}: inputs and outputs unchanged, skipping", stage.name());
        return Ok(Manifest::read(out, stage.name())?.expect("fresh manifest exists"));
    }
    log::info!("{}: running", stage.name());
    match stage {
        Stage::Evaluate => evaluate(cfg, &mut m)?,
        Stage::Univariate => univariate(cfg, &mut m)?,
        Stage::Inequality => inequality(cfg, &mut m)?,
        Stage::League => league(cfg, &mut m)?,
        Stage::Cohort => cohort(cfg, &mut m)?,
        Stage::Spatial => spatial(cfg, &mut m)?,
        Stage::Representational => representational(cfg, &mut m)?,
    }
    m.write(out)?;
    Ok(m)
}

pub fn run_all(cfg: &AnalysisConfig, force: bool) -> Result<Vec<Manifest>> {
    Stage::ALL.iter().map(|&s| run_stage(cfg, s, force)).collect()
}

fn upstream(cfg: &AnalysisConfig, rel: &str, stage: &'static str) -> Result<PathBuf> {
    let path = cfg.paths.output.join(rel);
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingUpstream { stage, path })
    }
}

fn add_inputs(cfg: &AnalysisConfig, stage: Stage, m: &mut Manifest) -> Result<()> {
    let p = &cfg.paths;
    let needs_cohort = !matches!(stage, Stage::Inequality | Stage::League);
    if needs_cohort {
        m.add_input("cohort", &p.cohort)?;
    }
    if matches!(stage, Stage::Evaluate | Stage::Spatial | Stage::Representational) {
        m.add_input("ground_truth", &p.ground_truth)?;
        if let Some(l) = &p.label_map {
            m.add_input("label_map", l)?;
        }
    }
    match stage {
        Stage::Evaluate => m.add_input("masks", &p.masks)?,
        Stage::League => {
            m.add_input(artifacts::METRICS, &upstream(cfg, artifacts::METRICS, "evaluate")?)?;
            m.add_input(artifacts::INEQUALITY, &upstream(cfg, artifacts::INEQUALITY, "inequality")?)?;
        }
        _ => m.add_input(artifacts::METRICS, &upstream(cfg, artifacts::METRICS, "evaluate")?)?,
    }
    Ok(())
}

pub fn read_cohort(path: &Path) -> Result<Vec<CohortRow>> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(read_cohort_csv(BufReader::new(f))?)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(read_metrics_csv(BufReader::new(f))?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

/// Write an artifact through `f` and record it in the manifest.
fn emit<F>(cfg: &AnalysisConfig, m: &mut Manifest, rel: &str, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let path = cfg.paths.output.join(rel);
    let mut w = create(&path)?;
    f(&mut w)?;
    w.flush().map_err(|e| CliError::io(&path, e))?;
    drop(w);
    m.add_output(&cfg.paths.output, rel)
}

fn emit_json<T: Serialize>(cfg: &AnalysisConfig, m: &mut Manifest, rel: &str, value: &T) -> Result<()> {
    emit(cfg, m, rel, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w).map_err(|e| CliError::io(rel, e))
    })
}

fn emit_volume(cfg: &AnalysisConfig, m: &mut Manifest, rel: &str, v: &Volume) -> Result<()> {
    let path = cfg.paths.output.join(rel);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_volume(v, &path)?;
    m.add_output(&cfg.paths.output, rel)
}

/// `<dir>/<id>.nii.gz` or `<dir>/<id>.nii`.
pub fn find_volume(dir: &Path, id: &str) -> Option<PathBuf> {
    VOLUME_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

/// Model directories under the masks root, sorted, excluding the ground-truth
/// directory when it is nested there.
pub fn list_models(cfg: &AnalysisConfig) -> Result<Vec<String>> {
    let root = &cfg.paths.masks;
    let gt = fs::canonicalize(&cfg.paths.ground_truth).ok();
    let mut models = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| CliError::io(root, e))? {
        let path = entry.map_err(|e| CliError::io(root, e))?.path();
        if !path.is_dir() || fs::canonicalize(&path).ok() == gt {
            continue;
        }
        models.push(path.file_name().expect("directory entry has a name").to_string_lossy().into_owned());
    }
    models.sort();
    Ok(models)
}

fn ground_truth_paths(cfg: &AnalysisConfig, cohort: &[CohortRow]) -> Result<Vec<PathBuf>> {
    let mut found = Vec::with_capacity(cohort.len());
    let mut missing = Vec::new();
    for row in cohort {
        match find_volume(&cfg.paths.ground_truth, &row.patient_id) {
            Some(p) => found.push(p),
            None => missing.push(row.patient_id.as_str()),
        }
    }
    if missing.is_empty() {
        Ok(found)
    } else {
        let shown = missing.iter().take(5).copied().collect::<Vec<_>>().join(", ");
        let more = if missing.len() > 5 { format!(" and {} more", missing.len() - 5) } else { String::new() };
        Err(CliError::MissingGroundTruth(format!("{shown}{more}")))
    }
}

fn read_compartments(path: &Path, labels: &LabelMap) -> Result<[CompartmentMask; 4]> {
    Ok(extract_compartments(&read_volume(path)?, labels)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub patient_id: String,
    pub model_id: String,
    pub reason: String,
}

pub const OEDEMA_ONLY: &str = "ground truth contains only an oedema label";
pub const MISSING_PREDICTION: &str = "missing prediction";

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
struct Accounting {
    included: usize,
    excluded: usize,
}

fn evaluate(cfg: &AnalysisConfig, m: &mut Manifest) -> Result<()> {
    let cohort = read_cohort(&cfg.paths.cohort)?;
    let labels = cfg.label_map()?;
    let models = list_models(cfg)?;
    if models.is_empty() {
        return Err(CliError::Config(format!("no model directories under {}", cfg.paths.masks.display())));
    }
    let gt_paths = ground_truth_paths(cfg, &cohort)?;
    type Case = std::result::Result<MetricRecord, Exclusion>;
    let per_patient: Vec<Vec<Case>> = cohort
        .par_iter()
        .zip(&gt_paths)
        .map(|(row, gt_path)| -> Result<Vec<Case>> {
            let gt = read_volume(gt_path)?;
            let pid = &row.patient_id;
            let exclude = |model: &str, reason: String| Exclusion {
                patient_id: pid.clone(),
                model_id: model.to_string(),
                reason,
            };
            Ok(models
                .iter()
                .map(|model| {
                    let Some(p) = find_volume(&cfg.paths.masks.join(model), pid) else {
                        return Err(exclude(model, MISSING_PREDICTION.into()));
                    };
                    let two_class = cfg.two_class_models.contains(model);
                    match read_volume(&p).map(|pred| evaluate_case(&pred, &gt, pid, model, &labels, two_class)) {
                        Ok(Ok(ev)) if ev.oedema_only_gt && cfg.exclude_oedema_only => Err(exclude(model, OEDEMA_ONLY.into())),
                        Ok(Ok(ev)) => Ok(ev.record),
                        Ok(Err(e)) | Err(e) => {
                            log::warn!("{model}/{pid}: {e}");
                            Err(exclude(model, e.to_string()))
                        }
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut exclusions = Vec::new();
    let mut accounting: BTreeMap<String, Accounting> = models.iter().map(|k| (k.clone(), Accounting::default())).collect();
    for (j, model) in models.iter().enumerate() {
        for cases in &per_patient {
            let a = accounting.get_mut(model).expect("model listed");
            match &cases[j] {
                Ok(r) => {
                    records.push(r.clone());
                    a.included += 1;
                }
                Err(x) => {
                    exclusions.push(x.clone());
                    a.excluded += 1;
                }
            }
        }
    }
    for x in exclusions.iter().filter(|x| x.reason == OEDEMA_ONLY) {
        log::info!("excluded {}/{}: {}", x.model_id, x.patient_id, x.reason);
    }
    emit(cfg, m, artifacts::METRICS, |w| Ok(write_metrics_csv(w, &records)?))?;
    emit(cfg, m, artifacts::EXCLUSIONS, |w| {
        // explicit header so an empty file still names its columns
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        wtr.write_record(["patient_id", "model_id", "reason"])?;
        for x in &exclusions {
            wtr.serialize(x)?;
        }
        wtr.flush().map_err(|e| CliError::io(artifacts::EXCLUSIONS, e))
    })?;
    m.note("n_patients", cohort.len());
    m.note("models", &models);
    m.note("accounting", &accounting);
    Ok(())
}

fn univariate(cfg: &AnalysisConfig, m: &mut Manifest) -> Result<()> {
    let cohort = read_cohort(&cfg.paths.cohort)?;
    let records = read_metrics(&upstream(cfg, artifacts::METRICS, "evaluate")?)?;
    let outcomes = Outcome::all();
    let gaps = gap_table(&records, &cohort, &outcomes, cfg.bootstrap_iters, derive_seed(cfg.seed, 1))?;
    let bins = age_bin_table(&records, &cohort, &outcomes);
    emit(cfg, m, artifacts::GAPS, |w| Ok(write_gap_csv(w, &gaps)?))?;
    emit(cfg, m, artifacts::AGE_BINS, |w| Ok(write_age_bin_csv(w, &bins)?))?;
    m.note("empty_strata", gaps.iter().filter(|g| g.gap.is_none()).count());
    Ok(())
}

fn index_params(cfg: &AnalysisConfig) -> IndexParams {
    IndexParams {
        invert_distances: cfg.invert_distances,
        ..IndexParams::default()
    }
}

fn inequality(cfg: &AnalysisConfig, m: &mut Manifest) -> Result<()> {
    let records = read_metrics(&upstream(cfg, artifacts::METRICS, "evaluate")?)?;
    let rows = inequality_table(&records, &index_params(cfg))?;
    emit(cfg, m, artifacts::INEQUALITY, |w| Ok(write_inequality_csv(w, &rows)?))?;
    m.note("index_params", index_params(cfg));
    Ok(())
}

fn league(cfg: &AnalysisConfig, m: &mut Manifest) -> Result<()> {
    let records = read_metrics(&upstream(cfg, artifacts::METRICS, "evaluate")?)?;
    let path = upstream(cfg, artifacts::INEQUALITY, "inequality")?;
    let ineq = read_inequality_csv(BufReader::new(File::open(&path).map_err(|e| CliError::io(&path, e))?))?;
    let table = build_league(&records, &ineq, &cfg.scenarios()?)?;
    emit(cfg, m, artifacts::LEAGUE, |w| Ok(write_league_csv(w, &table)?))?;
    Ok(())
}

fn cohort(cfg: &AnalysisConfig, m: &mut Manifest) -> Result<()> {
    let cohort = read_cohort(&cfg.paths.cohort)?;
    let records = read_metrics(&upstream(cfg, artifacts::METRICS, "evaluate")?)?;
    let suite = run_cohort_suite(&records, &cohort, cfg.alpha);
    emit(cfg, m, artifacts::COEFFICIENTS, |w| Ok(write_coefficients_csv(w, &suite.coefficients)?))?;
    emit(cfg, m, artifacts::VARIANCE, |w| Ok(write_variance_csv(w, &suite.fits)?))?;
    let pruned: BTreeMap<&str, &Vec<String>> = suite
        .fits
        .iter()
        .filter(|f| !f.pruned.is_empty())
        .map(|f| (f.dv.as_str(), &f.pruned))
        .collect();
    m.note("pruned_terms", pruned);
    m.note("failed_fits", suite.fits.iter().filter(|f| f.fit.is_none()).count());
    Ok(())
}

/// Per-model performance for `o`, aligned with `cohort`.
fn perf_by_model(records: &[MetricRecord], cohort: &[CohortRow], o: Outcome) -> BTreeMap<String, Vec<Option<f64>>> {
    let pos: BTreeMap<&str, usize> = cohort.iter().enumerate().map(|(i, r)| (r.patient_id.as_str(), i)).collect();
    let mut out: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
    for r in records {
        let col = out.entry(r.model_id.clone()).or_insert_with(|| vec![None; cohort.len()]);
        if let Some(&i) = pos.get(r.patient_id.as_str()) {
            col[i] = r.get(o);
        }
    }
    out
}

/// One compartment of every ground truth, smoothed, plus the shared grid.
fn smoothed_compartment(
    paths: &[PathBuf],
    labels: &LabelMap,
    comp: Compartment,
    fwhm_mm: f64,
) -> Result<(Grid, Vec<Vec<f32>>)> {
    let loaded: Vec<(Grid, Vec<f32>)> = paths
        .par_iter()
        .map(|p| -> Result<(Grid, Vec<f32>)> {
            let masks = read_compartments(p, labels)?;
            let mask = &masks[comp.position()];
            let grid = mask.volume.grid();
            let data: Vec<f64> = mask.bits().iter().map(|&b| f64::from(b)).collect();
            let img = smooth_grid(grid.dims, grid.spacing.map(f64::from), &data, fwhm_mm);
            Ok((grid, img.into_iter().map(|v| v as f32).collect()))
        })
        .collect::<Result<_>>()?;
    let grid = loaded.first().map(|l| l.0.clone()).ok_or(fairboard_core::Error::EmptyInput)?;
    if let Some(i) = loaded.iter().position(|l| l.0 != grid) {
        return Err(fairboard_core::Error::GridMismatch(format!("{} is not on the common grid", paths[i].display())).into());
    }
    Ok((grid, loaded.into_iter().map(|l| l.1).collect()))
}

/// Everything the service needs about one compartment-metric meta-analysis
/// apart from the maps themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialSummary {
    pub outcome: String,
    pub models: Vec<String>,
    pub skipped_models: BTreeMap<String, String>,
    pub alpha: f64,
    pub fwhm_mm: f64,
    pub n_voxels: usize,
    pub n_significant: usize,
    pub fdr_threshold: Option<f64>,
    pub permutation: PermSummary,
    pub heterogeneity: HeterogeneitySummary,
}

pub const SPATIAL_MAPS: [&str; 6] = ["pooled_z", "tau2", "i2", "prevalence", "mask", "fdr_mask"];

pub fn spatial_map_path(outcome: &str, map: &str) -> String {
    format!("{}/{outcome}/{map}.nii.gz", artifacts::SPATIAL)
}

pub fn spatial_summary_path(outcome: &str) -> String {
    format!("{}/{outcome}/{}", artifacts::SPATIAL, artifacts::SUMMARY)
}

fn spatial(cfg: &AnalysisConfig, m: &mut Manifest) -> Result<()> {
    let cohort = read_cohort(&cfg.paths.cohort)?;
    let records = read_metrics(&upstream(cfg, artifacts::METRICS, "evaluate")?)?;
    let labels = cfg.label_map()?;
    let gt_paths = ground_truth_paths(cfg, &cohort)?;
    let outcomes = cfg.spatial_outcomes()?;
    let spec = spatial_design_spec();
    let perm_seed = derive_seed(cfg.seed, 2);
    let mut done = Vec::new();
    let mut failed = BTreeMap::new();
    for comp in Compartment::ALL {
        let mine: Vec<(usize, Outcome)> = outcomes
            .iter()
            .enumerate()
            .filter(|(_, o)| o.compartment == comp)
            .map(|(i, &o)| (i, o))
            .collect();
        if mine.is_empty() {
            continue;
        }
        let (grid, images) = smoothed_compartment(&gt_paths, &labels, comp, cfg.fwhm_mm)?;
        for (idx, o) in mine {
            let name = o.column();
            let mut zmaps = Vec::new();
            let mut models = Vec::new();
            let mut skipped = BTreeMap::new();
            for (model, perf) in perf_by_model(&records, &cohort, o) {
                match per_model_spatial_glm(&images, &grid, &perf, &cohort, &spec, None) {
                    Ok(z) => {
                        zmaps.push(z);
                        models.push(model);
                    }
                    Err(e) => {
                        log::warn!("spatial {name} {model}: {e}");
                        skipped.insert(model, e.to_string());
                    }
                }
            }
            let result = (|| -> fairboard_core::Result<_> {
                let mut meta = dersimonian_laird(&zmaps, cfg.alpha)?;
                let perm = sign_flip_permutation(&zmaps, cfg.n_perm, derive_seed(perm_seed, idx as u64))?;
                meta.perm = Some(perm);
                let prev = prevalence_map(&zmaps, cfg.alpha)?;
                Ok((meta, perm, prev))
            })();
            let (meta, perm, prev) = match result {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("spatial {name}: {e}");
                    failed.insert(name, e.to_string());
                    continue;
                }
            };
            let bits = |b: &[bool]| meta.pooled.grid.volume_u8(b.iter().map(|&v| u8::from(v)).collect());
            let vols = [
                meta.pooled.to_volume()?,
                meta.volume(&meta.tau2)?,
                meta.volume(&meta.i2)?,
                meta.volume(&prev)?,
                bits(&meta.pooled.mask)?,
                bits(&meta.fdr_mask)?,
            ];
            for (map, v) in SPATIAL_MAPS.iter().zip(&vols) {
                emit_volume(cfg, m, &spatial_map_path(&name, map), v)?;
            }
            let summary = SpatialSummary {
                outcome: name.clone(),
                models,
                skipped_models: skipped,
                alpha: cfg.alpha,
                fwhm_mm: cfg.fwhm_mm,
                n_voxels: meta.pooled.n_mask(),
                n_significant: meta.n_significant(),
                fdr_threshold: meta.fdr_threshold,
                permutation: perm,
                heterogeneity: heterogeneity_summary(&meta),
            };
            emit_json(cfg, m, &spatial_summary_path(&name), &summary)?;
            done.push(name);
        }
    }
    m.note("outcomes", done);
    m.note("failed", failed);
    Ok(())
}

/// Embedding settings and feature-space facts recorded next to the coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationalRun {
    pub embedding: fairboard_core::representational::EmbedParams,
    pub pca_k: usize,
    pub pca_explained_variance: Vec<f64>,
    pub pca_cumulative: f64,
    pub pca_max_components: usize,
    pub feature_names: Vec<String>,
    pub dropped_features: Vec<String>,
    pub excluded_patients: Vec<String>,
    pub raster_size: usize,
    pub spike_fwhm: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentClusterOut {
    pub id: u32,
    pub sign: i8,
    pub n_cells: usize,
    pub peak_z: f64,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSummary {
    pub outcome: String,
    pub n_analysed: usize,
    pub error: Option<String>,
    pub fdr_threshold: Option<f64>,
    pub n_significant: usize,
    pub clusters: Vec<LatentClusterOut>,
    pub profile: Option<EffectProfile>,
}

pub fn latent_path(outcome: &str, file: &str) -> String {
    format!("{}/{outcome}/{file}", artifacts::REPRESENTATIONAL)
}

fn representational(cfg: &AnalysisConfig, m: &mut Manifest) -> Result<()> {
    let cohort = read_cohort(&cfg.paths.cohort)?;
    let records = read_metrics(&upstream(cfg, artifacts::METRICS, "evaluate")?)?;
    let labels = cfg.label_map()?;
    let gt_paths = ground_truth_paths(cfg, &cohort)?;
    let rows: Vec<Vec<u8>> = gt_paths
        .par_iter()
        .map(|p| Ok(lesion_channels(&read_compartments(p, &labels)?, MASK_SIDE)?))
        .collect::<Result<_>>()?;
    let mut lesions = BitRows::new(3 * MASK_SIDE.pow(3));
    for r in &rows {
        lesions.push(r)?;
    }
    drop(rows);
    let rc = &cfg.representational;
    let space = build_feature_matrix(&lesions, &cohort, &[], rc.pca_max_components)?;
    log::info!(
        "feature space: {} patients, K = {} lesion components ({:.1}% variance)",
        space.n(),
        space.pca.k,
        100.0 * space.pca.cumulative()
    );
    let params = cfg.embed_params();
    let coords = embed_2d(&space.standardized, &params)?;
    let run = RepresentationalRun {
        embedding: params,
        pca_k: space.pca.k,
        pca_explained_variance: space.pca.explained_variance_ratio.clone(),
        pca_cumulative: space.pca.cumulative(),
        pca_max_components: rc.pca_max_components,
        feature_names: space.names.clone(),
        dropped_features: space.dropped.clone(),
        excluded_patients: space.excluded.clone(),
        raster_size: rc.raster_size,
        spike_fwhm: rc.spike_fwhm,
        alpha: cfg.alpha,
    };
    let coords_rel = format!("{}/{}", artifacts::REPRESENTATIONAL, artifacts::COORDS);
    emit(cfg, m, &coords_rel, |w| {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["patient_id", "x", "y"])?;
        for (id, c) in space.patient_ids.iter().zip(&coords) {
            wtr.write_record([id.clone(), c[0].to_string(), c[1].to_string()])?;
        }
        wtr.flush().map_err(|e| CliError::io(&coords_rel, e))
    })?;
    emit_json(cfg, m, &format!("{}/{}", artifacts::REPRESENTATIONAL, artifacts::RUN_CONFIG), &run)?;

    let latent_cfg = LatentConfig {
        raster_size: rc.raster_size,
        spike_fwhm: rc.spike_fwhm,
        alpha: cfg.alpha,
    };
    let sub: Vec<CohortRow> = space.rows.iter().map(|&i| cohort[i].clone()).collect();
    for o in cfg.representational_outcomes()? {
        let name = o.column();
        // mean over models per patient
        let by_model = perf_by_model(&records, &sub, o);
        let perf: Vec<Option<f64>> = (0..sub.len())
            .map(|i| {
                let v: Vec<f64> = by_model.values().filter_map(|col| col[i]).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect();
        let mut summary = LatentSummary {
            outcome: name.clone(),
            n_analysed: perf.iter().filter(|p| p.is_some()).count(),
            error: None,
            fdr_threshold: None,
            n_significant: 0,
            clusters: vec![],
            profile: None,
        };
        match latent_analysis(&space, &coords, &perf, &latent_cfg) {
            Ok(a) => {
                summary.fdr_threshold = a.glm.fdr_threshold;
                summary.n_significant = a.glm.n_significant();
                summary.clusters = a
                    .glm
                    .clusters
                    .iter()
                    .map(|c| LatentClusterOut {
                        id: c.id,
                        sign: c.sign,
                        n_cells: c.n_cells,
                        peak_z: c.peak_z,
                        members: c.members.iter().map(|&i| space.patient_ids[i].clone()).collect(),
                    })
                    .collect();
                emit_volume(cfg, m, &latent_path(&name, "zmap.nii.gz"), &a.glm.zmap.to_volume()?)?;
                let sig = a.raster.grid().volume_u8(a.glm.fdr_mask.iter().map(|&b| u8::from(b)).collect())?;
                emit_volume(cfg, m, &latent_path(&name, "fdr_mask.nii.gz"), &sig)?;
                let member_ids: Vec<usize> = (0..space.n()).filter(|&i| a.members[i]).collect();
                if let Some(v) = overlap_volume(&member_ids, &space.rows, &gt_paths, &labels)? {
                    emit_volume(cfg, m, &latent_path(&name, "overlap.nii.gz"), &v)?;
                }
                emit(cfg, m, &latent_path(&name, artifacts::PROFILE), |w| write_profile(w, &a.profile))?;
                summary.profile = Some(a.profile);
            }
            Err(e) => {
                log::warn!("representational {name}: {e}");
                summary.error = Some(e.to_string());
            }
        }
        emit_json(cfg, m, &latent_path(&name, artifacts::LATENT), &summary)?;
    }
    m.note("pca_k", space.pca.k);
    m.note("n_patients", space.n());
    Ok(())
}

/// Whole-tumour overlap of cluster members, re-read from disk so that only
/// members' masks are ever held. `None` without members.
fn overlap_volume(members: &[usize], rows: &[usize], gt_paths: &[PathBuf], labels: &LabelMap) -> Result<Option<Volume>> {
    if members.is_empty() {
        return Ok(None);
    }
    let wt: Vec<CompartmentMask> = members
        .par_iter()
        .map(|&i| {
            let [wt, ..] = read_compartments(&gt_paths[rows[i]], labels)?;
            Ok(wt)
        })
        .collect::<Result<_>>()?;
    Ok(Some(significant_overlap_map(&vec![true; wt.len()], &wt)?))
}

fn write_profile<W: Write>(w: W, p: &EffectProfile) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["feature", "lesion_pc", "d", "n_in", "n_out", "note"])?;
    for r in &p.rows {
        wtr.write_record([
            r.feature.clone(),
            r.lesion_pc.to_string(),
            fairboard_core::metrics::fmt_opt(r.d),
            p.n_in.to_string(),
            p.n_out.to_string(),
            p.note.clone().unwrap_or_default(),
        ])?;
    }
    wtr.flush().map_err(|e| CliError::io(artifacts::PROFILE, e))
}
