//! Statistical kernels shared by every analysis stage.

pub mod bootstrap;
pub mod descriptive;
pub mod design;
pub mod effect;
pub mod fdr;
pub mod glm;
pub mod rng;
pub mod smooth;
pub mod standardize;

pub use bootstrap::{bootstrap_gap_ci, GapCi};
pub use design::{build_design, Covariate, Covariates, DesignMatrix, PredictorSpec, Term};
pub use effect::cohens_d;
pub use fdr::{bh_fdr, bonferroni, Correction, FdrResult};
pub use glm::{mass_univariate_glm, t_to_z, two_sided_p, ZMap, Z_CLAMP};
pub use smooth::{fwhm_to_sigma, gaussian_smooth};
pub use standardize::{zscore, zscore_opt};
