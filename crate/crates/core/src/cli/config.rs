//! Analysis configuration (UTF-8 JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnalysisError, Result};

/// How the network is cut into blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PartitionSpec {
    /// `"per_layer"` (one block per layer) or `"grouped"` (one block per
    /// weight or pooling layer with its trailing activations).
    Rule(PartitionRule),
    /// Inclusive `[first, last]` layer ranges tiling the network.
    Ranges(Vec<[usize; 2]>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionRule {
    PerLayer,
    Grouped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Images and labels in IDX format (`.gz` accepted). Samples are drawn
    /// from the first `limit` images.
    MnistIdx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
        /// Crop to 27×27 and 3×3 max-pool to 9×9 before use.
        #[serde(default)]
        pool_9x9: bool,
    },
    /// Independent normal inputs.
    SyntheticGaussian {
        #[serde(default)]
        mean: f64,
        #[serde(default = "one")]
        std: f64,
    },
}

fn one() -> f64 {
    1.0
}

/// How repeats are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Average the operators, then score the averages.
    #[default]
    MeanOperator,
    /// Score every repeat, then average the log10 credits.
    MeanCredit,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Singular-value cutoff of the snapshot pseudo-inverse.
    #[serde(default)]
    pub pinv: Option<f64>,
    /// Singular-value cutoff of generalized determinants.
    #[serde(default)]
    pub determinant: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub model_path: PathBuf,
    pub partition: PartitionSpec,
    pub dataset: DatasetSpec,
    #[serde(default = "default_samples")]
    pub sample_count: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_d_cap")]
    pub d_cap: usize,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub aggregation: Aggregation,
    pub output_dir: PathBuf,
    /// Also write the first repeat's snapshots, one CSV per block.
    #[serde(default)]
    pub dump_snapshots: bool,
}

fn default_samples() -> usize {
    64
}

fn default_repeats() -> usize {
    10
}

fn default_d_cap() -> usize {
    256
}

impl AnalysisConfig {
    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| AnalysisError::Io { path: path.display().to_string(), source })?;
        let mut config: AnalysisConfig =
            serde_json::from_str(&text).map_err(|e| AnalysisError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.model_path);
        join(&mut self.output_dir);
        if let DatasetSpec::MnistIdx { images, labels, .. } = &mut self.dataset {
            join(images);
            join(labels);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(AnalysisError::Config(m.to_string()));
        if self.sample_count == 0 {
            return fail("sample_count must be at least 1");
        }
        if self.repeats == 0 {
            return fail("repeats must be at least 1");
        }
        if self.d_cap == 0 {
            return fail("d_cap must be at least 1");
        }
        for (name, tol) in [("pinv", self.tolerances.pinv), ("determinant", self.tolerances.determinant)] {
            if tol.is_some_and(|t| !(t.is_finite() && t >= 0.0)) {
                return fail(&format!("tolerance {name} must be a finite non-negative number"));
            }
        }
        match &self.dataset {
            DatasetSpec::SyntheticGaussian { mean, std } if !(mean.is_finite() && std.is_finite() && *std > 0.0) => {
                fail("synthetic_gaussian needs a finite mean and a positive std")
            }
            DatasetSpec::MnistIdx { limit: Some(0), .. } => fail("dataset limit must be at least 1"),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_path_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"model_path": "m.json", "partition": "per_layer",
                "dataset": {"kind": "synthetic_gaussian"}, "output_dir": "out"}"#,
        )
        .unwrap();
        let c = AnalysisConfig::load(&path).unwrap();
        assert_eq!((c.sample_count, c.repeats, c.d_cap, c.master_seed), (64, 10, 256, 0));
        assert_eq!(c.model_path, dir.path().join("m.json"));
        assert_eq!(c.dataset, DatasetSpec::SyntheticGaussian { mean: 0.0, std: 1.0 });
        assert_eq!(c.aggregation, Aggregation::MeanOperator);
        assert_eq!(c.partition, PartitionSpec::Rule(PartitionRule::PerLayer));
    }

    #[test]
    fn explicit_ranges_and_mnist() {
        let c: AnalysisConfig = serde_json::from_str(
            r#"{"model_path": "/m.json", "partition": [[0, 1], [2, 3]],
                "dataset": {"kind": "mnist_idx", "images": "i.gz", "labels": "l.gz", "pool_9x9": true},
                "output_dir": "/o", "sample_count": 8, "tolerances": {"pinv": 1e-9}}"#,
        )
        .unwrap();
        assert_eq!(c.partition, PartitionSpec::Ranges(vec![[0, 1], [2, 3]]));
        assert!(matches!(c.dataset, DatasetSpec::MnistIdx { pool_9x9: true, limit: None, .. }));
        assert_eq!(c.tolerances.pinv, Some(1e-9));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = r#"{"model_path": "m", "partition": "grouped", "dataset": {"kind": "synthetic_gaussian"}, "output_dir": "o""#;
        for extra in [r#", "repeats": 0"#, r#", "sample_count": 0"#, r#", "d_cap": 0"#] {
            let c: AnalysisConfig = serde_json::from_str(&format!("{base}{extra}}}")).unwrap();
            assert!(matches!(c.validate(), Err(AnalysisError::Config(_))), "{extra}");
        }
        assert!(serde_json::from_str::<AnalysisConfig>(&format!("{base}, \"sample_cuont\": 3}}")).is_err());
        assert!(serde_json::from_str::<AnalysisConfig>(&base.replace("grouped", "by_magic")).is_err());
    }
}
