//! Training runs described entirely by a [`RunManifest`].

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::data::{channel_stats, load_cifar10, load_mnist, xor_dataset, Augment, LabeledDataset};
use crate::error::{Error, Result};
use crate::experiments::xor_spec;
use crate::train::{
    self, metrics_csv, Batches, MetricsRecord, TrainConfig, TrainHooks,
};
use crate::zoo::{build_model, fnv1a, ModelSpec, Network, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Xor,
    Mnist,
    #[value(name = "cifar10")]
    #[serde(rename = "cifar10")]
    Cifar10,
}

/// Random crop padding and flip probability applied to training batches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    pub pad: usize,
    pub flip_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDigest {
    pub path: PathBuf,
    pub bytes: u64,
    /// 64-bit FNV-1a of the contents, hex
    pub fnv1a: String,
}

/// Everything needed to repeat a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub icnet_version: String,
    /// where the spec was read from, informational
    pub model_path: Option<PathBuf>,
    /// the spec before the variant rewrite
    pub model: ModelSpec,
    pub variant: Variant,
    pub data: DataKind,
    pub data_dir: Option<PathBuf>,
    /// first `subset` training and `subset / 5` test samples; 0 keeps all
    pub subset: usize,
    pub augment: Option<AugmentSpec>,
    pub train: TrainConfig,
    /// digests of the dataset files read, filled in when the run starts
    #[serde(default)]
    pub data_files: Vec<FileDigest>,
}

impl RunManifest {
    /// The spec actually trained.
    pub fn resolved_model(&self) -> Result<ModelSpec> {
        match self.data {
            // the built-in XOR networks are already a matched pair
            DataKind::Xor if self.model_path.is_none() => {
                Ok(xor_spec(self.variant != Variant::Baseline))
            }
            _ => self.model.variant(self.variant),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub model: String,
    pub variant: Variant,
    pub params: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub epochs: usize,
    pub last: Option<MetricsRecord>,
    pub best_eval_acc: f64,
    pub elapsed_seconds: f64,
    /// FNV-1a of manifest.json, tying these artifacts to it
    pub manifest_fnv1a: String,
}

pub struct RunOutput {
    pub network: Network,
    pub metrics: Vec<MetricsRecord>,
    pub summary: RunSummary,
}

fn digest(path: &Path) -> Result<FileDigest> {
    let bytes = fs::read(path)?;
    Ok(FileDigest {
        path: path.to_path_buf(),
        bytes: bytes.len() as u64,
        fnv1a: format!("{:016x}", fnv1a(&bytes)),
    })
}

fn missing_dir(kind: DataKind) -> Error {
    Error::contract(format!(
        "--data {} needs --data-dir or the DATA_DIR environment variable",
        kind.to_possible_value().map_or("?".into(), |v| v.get_name().to_string())
    ))
}

fn dataset_files(kind: DataKind, root: &Path) -> Vec<PathBuf> {
    let dirs = |names: &[&str]| -> Vec<PathBuf> {
        names.iter().map(|n| root.join(n)).chain([root.to_path_buf()]).collect()
    };
    let (dirs, names): (Vec<PathBuf>, Vec<String>) = match kind {
        DataKind::Xor => return Vec::new(),
        DataKind::Mnist => (
            dirs(&["mnist", "MNIST"]),
            ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
                .map(String::from)
                .to_vec(),
        ),
        DataKind::Cifar10 => (
            dirs(&["cifar-10-batches-bin", "cifar10"]),
            (1..=5)
                .map(|i| format!("data_batch_{i}.bin"))
                .chain(["test_batch.bin".to_string()])
                .collect(),
        ),
    };
    let Some(dir) = dirs.into_iter().find(|d| d.join(&names[0]).is_file() || d.join(names.last().unwrap()).is_file()) else {
        return Vec::new();
    };
    names.iter().map(|n| dir.join(n)).filter(|p| p.is_file()).collect()
}

/// Train and eval splits with the manifest's subset applied.
pub fn load_data(m: &RunManifest) -> Result<(LabeledDataset, LabeledDataset)> {
    let splits = match m.data {
        DataKind::Xor => {
            let ds = xor_dataset();
            return Ok((ds.clone(), ds));
        }
        DataKind::Mnist => load_mnist(m.data_dir.as_deref().ok_or_else(|| missing_dir(m.data))?)?,
        DataKind::Cifar10 => load_cifar10(m.data_dir.as_deref().ok_or_else(|| missing_dir(m.data))?)?,
    };
    if m.subset == 0 {
        return Ok((splits.train, splits.test));
    }
    Ok((
        splits.train.first(m.subset)?,
        splits.test.first((m.subset / 5).max(1))?,
    ))
}

/// Execute the run and return the trained network with its metrics. Nothing
/// is written to disk.
pub fn execute(m: &RunManifest, hooks: &mut dyn TrainHooks) -> Result<RunOutput> {
    m.train.validate()?;
    let spec = m.resolved_model()?;
    let (train_set, eval_set) = load_data(m)?;
    if spec.input != train_set.sample_shape() {
        return Err(Error::spec(
            None::<usize>,
            format!(
                "model input {:?} does not match {:?} samples of shape {:?}",
                spec.input,
                m.data,
                train_set.sample_shape()
            ),
        ));
    }
    let mut net = build_model(&spec, m.train.seed)?;
    let classes = net.output_shape().iter().product::<usize>();
    if classes != train_set.num_classes {
        return Err(Error::spec(
            None::<usize>,
            format!("model has {classes} outputs for {} classes", train_set.num_classes),
        ));
    }
    let stats = match m.data {
        DataKind::Xor => None,
        _ => Some(channel_stats(&train_set.images)?),
    };
    let augment = match m.augment {
        Some(a) => Some(Augment::new(m.train.seed, a.pad, a.flip_prob)?),
        None => None,
    };
    let train_batches = Batches {
        data: &train_set,
        stats: stats.as_ref(),
        augment,
    };
    let eval_batches = Batches {
        data: &eval_set,
        stats: stats.as_ref(),
        augment: None,
    };
    let start = Instant::now();
    let metrics = train::train_epochs(&mut net, &train_batches, Some(&eval_batches), &m.train, hooks)?;
    let summary = RunSummary {
        model: spec.name.clone(),
        variant: m.variant,
        params: net.num_params(),
        train_samples: train_set.len(),
        eval_samples: eval_set.len(),
        epochs: metrics.len(),
        last: metrics.last().cloned(),
        best_eval_acc: metrics.iter().map(|r| r.eval_acc).fold(0.0, f64::max),
        elapsed_seconds: start.elapsed().as_secs_f64(),
        manifest_fnv1a: format!("{:016x}", fnv1a(m.to_json().as_bytes())),
    };
    Ok(RunOutput {
        network: net,
        metrics,
        summary,
    })
}

/// Run `m` and write manifest.json, metrics.csv, summary.json and params.bin
/// into `out`. The manifest is written before training starts.
pub fn train_to_dir(m: &RunManifest, out: &Path, hooks: &mut dyn TrainHooks) -> Result<RunOutput> {
    let mut m = m.clone();
    m.data_files = match &m.data_dir {
        Some(dir) => dataset_files(m.data, dir)
            .iter()
            .map(|p| digest(p))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("manifest.json"), m.to_json())?;
    let run = execute(&m, hooks)?;
    fs::write(out.join("metrics.csv"), metrics_csv(&run.metrics))?;
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&run.summary)?,
    )?;
    train::write_params(&out.join("params.bin"), &run.network.state())?;
    Ok(run)
}
