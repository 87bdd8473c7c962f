#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use fairboard::synth::write_synthetic_study;
use fairboard::{run_all, AnalysisConfig};

/// A synthetic study written under `dir` (replacing anything there), with
/// the permutation and bootstrap counts cut down for test speed.
pub fn study(dir: &Path, patients: usize, seed: u64) -> AnalysisConfig {
    if dir.exists() {
        std::fs::remove_dir_all(dir).unwrap();
    }
    let path = write_synthetic_study(dir, patients, seed).unwrap();
    let mut cfg = AnalysisConfig::load(&path).unwrap();
    cfg.n_perm = 100;
    cfg.bootstrap_iters = 100;
    cfg
}

pub fn tmp(name: &str) -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join(name)
}

/// One complete run shared by every test in the binary.
pub fn finished_run() -> &'static AnalysisConfig {
    static RUN: OnceLock<AnalysisConfig> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = study(&tmp("service_run"), 30, 42);
        run_all(&cfg, true).unwrap();
        cfg
    })
}
