//! Experiment configuration, read from a sectioned TOML file.
//!
//! Every key has a default, so an empty file is a valid configuration. The
//! grammar and the defaults are listed in `docs/FORMATS.md`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_pipeline::{generate_blobs, load_csv, Dataset, LabelColumn};
use crate::error::{Error, Result};
use crate::kd_losses::LossWeights;
use crate::logit_core::KlNorm;
use crate::nn_harness::{Activation, DistillSettings, MlpSpec, OptimizerSpec};
use crate::temperature::TemperaturePolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Blobs,
    Csv,
}

/// Label column as written in the file: a 0-based index or a header name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumnSpec {
    Index(usize),
    Name(String),
}

impl Default for LabelColumnSpec {
    fn default() -> Self {
        LabelColumnSpec::Name("label".into())
    }
}

impl From<&LabelColumnSpec> for LabelColumn {
    fn from(spec: &LabelColumnSpec) -> Self {
        match spec {
            LabelColumnSpec::Index(i) => LabelColumn::Index(*i),
            LabelColumnSpec::Name(n) => LabelColumn::Name(n.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub classes: usize,
    pub per_class: usize,
    pub dims: usize,
    pub spread: f64,
    pub seed: u64,
    /// CSV file, relative to the config file's directory.
    pub path: Option<PathBuf>,
    pub label_column: LabelColumnSpec,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Blobs,
            classes: 10,
            per_class: 625,
            dims: 16,
            spread: 1.4,
            seed: 7,
            path: None,
            label_column: LabelColumnSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    /// Hidden widths; input and output widths come from the dataset.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl NetworkSection {
    pub fn mlp_spec(&self, dims: usize, classes: usize) -> MlpSpec {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(dims);
        widths.extend_from_slice(&self.hidden);
        widths.push(classes);
        MlpSpec::new(widths, self.activation, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    pub epochs: usize,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            activation: Activation::Relu,
            seed: 1,
            epochs: 10,
        }
    }
}

impl TeacherSection {
    pub fn network(&self) -> NetworkSection {
        NetworkSection {
            hidden: self.hidden.clone(),
            activation: self.activation,
            seed: self.seed,
        }
    }
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            activation: Activation::Relu,
            seed: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda_ce: f64,
    pub lambda_kd: f64,
    /// Divide the KL sum by the class count.
    pub class_mean_kl: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda_ce: w.lambda_ce,
            lambda_kd: w.lambda_kd,
            class_mean_kl: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub epochs: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub precompute_teacher: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            epochs: 60,
            seed: 0,
            out_dir: PathBuf::from("runs"),
            precompute_teacher: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub teacher: TeacherSection,
    pub student: NetworkSection,
    pub optimizer: OptimizerSpec,
    pub loss: LossSection,
    pub temperature: TemperaturePolicy,
    pub run: RunSection,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.temperature.validate()?;
        self.weights()?;
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Blobs => {
                if d.classes < 2 || d.per_class < 2 || d.dims < 1 {
                    return Err(Error::Config(format!(
                        "blobs need classes >= 2, per_class >= 2, dims >= 1 (got {}, {}, {})",
                        d.classes, d.per_class, d.dims
                    )));
                }
            }
            DatasetKind::Csv => {
                if d.path.is_none() {
                    return Err(Error::Config("dataset.kind = \"csv\" requires dataset.path".into()));
                }
            }
        }
        if self.teacher.hidden.contains(&0) || self.student.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.loss.lambda_ce, self.loss.lambda_kd)
    }

    pub fn kl_norm(&self) -> KlNorm {
        KlNorm::from_class_mean_flag(self.loss.class_mean_kl)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn build_dataset(&self) -> Result<Dataset> {
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Blobs => generate_blobs(d.classes, d.per_class, d.dims, d.spread, d.seed),
            DatasetKind::Csv => {
                let path = d.path.as_ref().expect("validated");
                load_csv(&self.resolve(path), &LabelColumn::from(&d.label_column))
            }
        }
    }

    pub fn teacher_spec(&self, dataset: &Dataset) -> MlpSpec {
        self.teacher.network().mlp_spec(dataset.dims(), dataset.n_classes())
    }

    pub fn student_spec(&self, dataset: &Dataset) -> MlpSpec {
        self.student.mlp_spec(dataset.dims(), dataset.n_classes())
    }

    pub fn distill_settings(&self) -> Result<DistillSettings> {
        Ok(DistillSettings {
            weights: self.weights()?,
            policy: self.temperature.clone(),
            kl_norm: self.kl_norm(),
            epochs: self.run.epochs,
            precompute_teacher: self.run.precompute_teacher,
            seed: self.run.seed,
        })
    }
}
