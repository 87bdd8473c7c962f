//! Writes the bundled synthetic corpus as an ordinary on-disk study.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use fairboard_core::cohort::write_cohort_csv;
use fairboard_core::synthetic::synthetic_corpus;
use fairboard_core::volume::write_volume;

use crate::config::{AnalysisConfig, Paths};
use crate::error::{CliError, Result};

pub const CONFIG_FILE: &str = "fairboard.toml";

/// Lay out `n` patients under `dir` and return the path of a config file
/// pointing at them, with outputs going to `dir/out`.
pub fn write_synthetic_study(dir: &Path, n: usize, seed: u64) -> Result<PathBuf> {
    let corpus = synthetic_corpus(n, seed);
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| CliError::io(p, e));
    mkdir(&dir.join("ground_truth"))?;
    let cohort_path = dir.join("cohort.csv");
    let f = File::create(&cohort_path).map_err(|e| CliError::io(&cohort_path, e))?;
    write_cohort_csv(BufWriter::new(f), &corpus.cohort)?;
    for (row, v) in corpus.cohort.iter().zip(&corpus.ground_truth) {
        write_volume(v, dir.join("ground_truth").join(format!("{}.nii.gz", row.patient_id)))?;
    }
    for (model, preds) in &corpus.predictions {
        let mdir = dir.join("masks").join(model);
        mkdir(&mdir)?;
        for (row, v) in corpus.cohort.iter().zip(preds) {
            write_volume(v, mdir.join(format!("{}.nii.gz", row.patient_id)))?;
        }
    }
    let labels = dir.join("labels.txt");
    fs::write(&labels, "# label=COMPARTMENT\n1=NET\n2=OED\n4=ET\n").map_err(|e| CliError::io(&labels, e))?;

    let mut cfg = AnalysisConfig::new(Paths {
        cohort: "cohort.csv".into(),
        masks: "masks".into(),
        ground_truth: "ground_truth".into(),
        output: "out".into(),
        label_map: Some("labels.txt".into()),
    });
    cfg.seed = seed;
    cfg.two_class_models = corpus
        .models
        .iter()
        .filter(|m| m.two_class)
        .map(|m| m.model_id.clone())
        .collect();
    // a neighbour count must stay below the patient count
    cfg.representational.n_neighbors = cfg.representational.n_neighbors.min(n.saturating_sub(1).max(2));
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, cfg.to_toml()).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}
