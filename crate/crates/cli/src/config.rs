use std::path::{Path, PathBuf};

use distgp::data::{gen_banana, gen_toy_regression, load_csv, load_idx, Dataset, Targets};
use distgp::net::NetworkSpec;
use distgp::training::{Task, TrainConfig};
use distgp::Error;
use serde::{Deserialize, Serialize};

use crate::exit::Failure;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    ToyRegression,
    Banana,
    Idx,
    Csv,
}

/// Where examples come from. Generators use `seed`, `n` and `gap`; files
/// are read from `paths` (`[images, labels]` for IDX, `[file]` for CSV).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    #[serde(default)]
    pub paths: Vec<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap: Option<(f64, f64)>,
    /// CSV target column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    /// Keep only this class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    /// Keep only the first `limit` examples (after class filtering).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub dataset: DatasetConfig,
    pub network: NetworkSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub outputs: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read run config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| format!("schema error: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.network.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        self.dataset.validate()
    }
}

impl DatasetConfig {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Failure::config(format!("dataset schema error: {e}")))?;
        cfg.validate().map_err(Failure::config)?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), String> {
        let want = match self.kind {
            DatasetKind::ToyRegression | DatasetKind::Banana => 0,
            DatasetKind::Idx => 2,
            DatasetKind::Csv => 1,
        };
        if self.paths.len() != want {
            return Err(format!("dataset kind {:?} takes {want} paths, got {}", self.kind, self.paths.len()));
        }
        if self.target.is_some() && self.kind != DatasetKind::Csv {
            return Err("`target` only applies to csv datasets".into());
        }
        if self.gap.is_some() && self.kind != DatasetKind::ToyRegression {
            return Err("`gap` only applies to toy_regression datasets".into());
        }
        Ok(())
    }

    /// Loads the examples and shapes the targets for `task`.
    pub fn load(&self, task: Task) -> Result<Dataset, Failure> {
        let data = match self.kind {
            DatasetKind::ToyRegression => gen_toy_regression(self.n.unwrap_or(200), self.gap, self.seed),
            DatasetKind::Banana => gen_banana(self.n.unwrap_or(1000), self.seed),
            DatasetKind::Idx => load_idx(&self.paths[0], &self.paths[1]),
            DatasetKind::Csv => load_csv(&self.paths[0], self.target.as_deref().unwrap_or("y")),
        }
        .map_err(Failure::data)?;
        let mut data = match (task, &data.targets) {
            (Task::Regression, Targets::Real(_)) | (Task::Classification, Targets::Classes { .. }) => data,
            (Task::Classification, Targets::Real(y)) => {
                let labels = y
                    .data()
                    .iter()
                    .map(|&v| {
                        (v >= 0.0 && v.fract() == 0.0)
                            .then_some(v as usize)
                            .ok_or_else(|| Failure::config(format!("class label {v} is not a non-negative integer")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let num_classes = labels.iter().max().map_or(1, |m| m + 1);
                Dataset::new(data.inputs.clone(), data.shape, Targets::Classes { labels, num_classes }, data.split.clone())
                    .map_err(Failure::data)?
            }
            (Task::Regression, Targets::Classes { .. }) => {
                return Err(Failure::config(format!("dataset kind {:?} has class labels, task is regression", self.kind)))
            }
        };
        if let Some(c) = self.class {
            data = data.filter_class(c);
        }
        if let Some(n) = self.limit {
            data = data.take(n.min(data.len()));
        }
        if data.is_empty() {
            return Err(Failure::config(Error::EmptyData.to_string()));
        }
        Ok(data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"{
        "task": "regression",
        "dataset": {"kind": "toy_regression", "seed": 1, "n": 40},
        "network": {"input": {"height": 1, "width": 1, "channels": 1},
                    "layers": [{"type": "dense_svgp", "inducing": 5, "outputs": 1}]},
        "outputs": "out"
    }"#;

    #[test]
    fn parses_minimal_config_with_default_training() {
        let cfg = RunConfig::parse(TOY).unwrap();
        assert_eq!(cfg.task, Task::Regression);
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.dataset.n, Some(40));
    }

    #[test]
    fn rejects_unknown_keys_at_every_level() {
        let top = TOY.replacen("\"outputs\"", "\"extra\": 1, \"outputs\"", 1);
        assert!(RunConfig::parse(&top).unwrap_err().contains("unknown field"));
        let nested = TOY.replacen("\"seed\": 1", "\"seed\": 1, \"bogus\": 2", 1);
        assert!(RunConfig::parse(&nested).unwrap_err().contains("unknown field"));
    }

    #[test]
    fn path_count_is_checked() {
        let bad = TOY.replacen("\"toy_regression\"", "\"idx\"", 1);
        assert!(RunConfig::parse(&bad).unwrap_err().contains("takes 2 paths"));
    }

    #[test]
    fn class_filter_and_limit() {
        let d = DatasetConfig::parse(r#"{"kind": "banana", "n": 100, "class": 1, "limit": 7}"#).unwrap();
        let data = d.load(Task::Classification).unwrap();
        assert_eq!(data.len(), 7);
        assert!(data.labels().unwrap().iter().all(|&l| l == 1));
    }

    #[test]
    fn regression_on_labels_is_a_config_error() {
        let d = DatasetConfig::parse(r#"{"kind": "banana", "n": 10}"#).unwrap();
        assert_eq!(d.load(Task::Regression).unwrap_err().code, crate::exit::CONFIG);
    }
}
