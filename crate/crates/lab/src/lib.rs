//! Config-driven experiments over the `distill-core` estimators: named
//! studies, denoiser training, chain sampling and SVG reports.

pub mod config;
pub mod experiment;
pub mod report;

use std::path::{Path, PathBuf};

pub use config::{parse_config, parse_config_str, ExperimentName, ExperimentSpec};
pub use experiment::{prepare_output, run_experiment, train_model};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "DISTILL_LAB_OUT";

/// Output directory: `--out`, else the config's `out`, else
/// `$DISTILL_LAB_OUT/<label>`, else `distill-lab-out/<label>`.
pub fn resolve_output(flag: Option<&Path>, spec: &ExperimentSpec, label: &str, env: Option<&str>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = &spec.out {
        return p.clone();
    }
    match env {
        Some(root) if !root.is_empty() => Path::new(root).join(label),
        _ => Path::new("distill-lab-out").join(label),
    }
}
