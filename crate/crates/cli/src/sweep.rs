//! `kde-sweep` configuration and artifact writing.
//!
//! ```toml
//! seed = 0
//! n_samples = 100000
//! distributions = [{ name = "gaussian", mean = 0.0, std = 1.0 }]
//!
//! [[specs]]
//! kind = "layer_norm"
//!
//! [[specs]]
//! kind = "ib_norm"
//! compression = { kind = "L", lambda = 4.0 }
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ibnorm_core::analysis::{pipeline_density_sweep, InputDistribution, MomentReport, SweepOptions};
use ibnorm_core::{NormOrder, NormSpec};
use serde::{Deserialize, Serialize};

use crate::manifest::write_atomic;
use crate::UsageError;

pub const SUMMARY_FILE: &str = "moments.json";

fn default_samples() -> usize {
    ibnorm_core::analysis::DEFAULT_SWEEP_SAMPLES
}

fn default_grid() -> usize {
    ibnorm_core::analysis::DEFAULT_GRID_POINTS
}

fn default_tail() -> f64 {
    ibnorm_core::analysis::DEFAULT_TAIL_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_grid")]
    pub grid_points: usize,
    /// Fixed KDE bandwidth; Silverman's rule when absent.
    #[serde(default)]
    pub bandwidth: Option<f64>,
    #[serde(default = "default_tail")]
    pub tail_threshold: f64,
    /// Normalization group width; the whole sample when absent.
    #[serde(default)]
    pub group_size: Option<usize>,
    pub distributions: Vec<InputDistribution>,
    pub specs: Vec<NormSpec>,
}

impl SweepConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let (line, column) = e
                .span()
                .map(|s| ibnorm_harness::config::line_column(text, s.start))
                .unwrap_or((0, 0));
            UsageError(format!("sweep config {line}:{column}: {}", e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml_str(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| anyhow::Error::new(UsageError(m));
        if self.distributions.is_empty() || self.specs.is_empty() {
            return Err(usage("sweep needs at least one distribution and one spec".into()));
        }
        for d in &self.distributions {
            d.validate().map_err(|e| usage(e.to_string()))?;
        }
        for s in &self.specs {
            s.validate().map_err(|e| usage(e.to_string()))?;
        }
        let mut seen = BTreeSet::new();
        for d in &self.distributions {
            for s in &self.specs {
                if !seen.insert(curve_file_name(d, s)) {
                    return Err(usage(format!("duplicate curve {}", curve_file_name(d, s))));
                }
            }
        }
        Ok(())
    }

    pub fn options(&self) -> SweepOptions {
        SweepOptions {
            n_samples: self.n_samples,
            seed: self.seed,
            group_size: self.group_size,
            grid_points: self.grid_points,
            bandwidth: self.bandwidth,
            tail_threshold: self.tail_threshold,
        }
    }
}

/// File-system friendly label: `*` (swapped order) becomes `-sc`, `**`
/// (no affine) becomes `-noaffine`.
pub fn file_label(spec: &NormSpec) -> String {
    let mut s = spec.with_affine(true).with_order(NormOrder::default()).label();
    if spec.order == NormOrder::StandardizeThenCompress {
        s.push_str("-sc");
    }
    if !spec.affine {
        s.push_str("-noaffine");
    }
    s
}

pub fn curve_file_name(dist: &InputDistribution, spec: &NormSpec) -> String {
    format!("{}_{}.csv", dist.name(), file_label(spec))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub distribution: InputDistribution,
    pub spec: NormSpec,
    pub file: String,
    pub bandwidth: f64,
    pub moments: MomentReport,
    pub tail_mass: f64,
}

/// Runs every (distribution, spec) pair, writing one curve CSV each and a
/// `moments.json` summary. Returns the written paths.
pub fn run_sweep(cfg: &SweepConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let opts = cfg.options();
    let mut written = Vec::new();
    let mut summary = Vec::new();
    for dist in &cfg.distributions {
        let results = pipeline_density_sweep(dist, &cfg.specs, &opts)?;
        for r in results {
            let file = curve_file_name(dist, &r.spec);
            let path = out.join(&file);
            write_atomic(&path, r.curve.to_csv().as_bytes())?;
            written.push(path);
            summary.push(CurveSummary {
                distribution: *dist,
                spec: r.spec,
                file,
                bandwidth: r.curve.bandwidth,
                moments: r.moments,
                tail_mass: r.tail_mass,
            });
        }
    }
    let path = out.join(SUMMARY_FILE);
    write_atomic(&path, &serde_json::to_vec_pretty(&summary)?)?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_distribution_reports_position() {
        let text = "seed = 1\ndistributions = [{ name = \"cauchy\" }]\n[[specs]]\nkind = \"layer_norm\"\n";
        let err = SweepConfig::from_toml_str(text).unwrap_err();
        assert!(err.is::<UsageError>());
        assert!(err.to_string().contains("2:"), "{err}");
    }

    #[test]
    fn labels_are_path_safe() {
        use ibnorm_core::CompressionKind;
        let s = NormSpec::ib_norm(CompressionKind::T, 4.0)
            .with_order(NormOrder::StandardizeThenCompress)
            .with_affine(false);
        assert_eq!(file_label(&s), "ibnorm-t4-sc-noaffine");
    }
}
