//! TOML experiment configuration: strict parsing (unknown keys rejected),
//! seed resolution (flag > FEDREVIEW_SEED > file), and conversion into the
//! library's run structures.

use std::path::{Path, PathBuf};

use fedreview::data::TaskId;
use fedreview::error::Error;
use fedreview::federation::{AggregationPolicy, TrainingConfig};
use fedreview::lora::{LoraConfig, TargetModule};
use fedreview::model::ModelGeometry;
use fedreview::numerics::AdamWConfig;
use fedreview::pipeline::SyntheticExperiment;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub geometry: Option<String>,
    pub strategy: Option<String>,
    pub tasks: Option<Vec<String>>,
    pub rounds: Option<u32>,
    pub aggregation: Option<String>,
    pub output_dir: Option<PathBuf>,
    pub with_central: Option<bool>,
    pub jobs: Option<usize>,
    pub expected_clients: Option<usize>,
    pub timeout_secs: Option<u64>,
    /// Directory of partitioned shards (from `fedreview partition`);
    /// mutually exclusive with [synthetic].
    pub data_dir: Option<PathBuf>,
    pub synthetic: Option<SyntheticSection>,
    pub lora: Option<LoraSection>,
    pub train: Option<TrainSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub n_train_per_task: Option<usize>,
    pub n_test_per_task: Option<usize>,
    pub sample_total: Option<usize>,
    pub ratio: Option<[u64; 2]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSection {
    pub targets: Vec<String>,
    pub rank: usize,
    pub alpha: Option<f64>,
    pub dropout: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: Option<usize>,
    pub grad_accum: Option<usize>,
    pub max_grad_norm: Option<f64>,
    pub base_lr: Option<f64>,
    pub warmup_ratio: Option<f64>,
    pub weight_decay: Option<f64>,
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone)]
pub struct Settings {
    pub seed: u64,
    pub geometry: ModelGeometry,
    pub strategy: String,
    pub tasks: Vec<TaskId>,
    pub rounds: u32,
    pub policy: AggregationPolicy,
    pub output_dir: PathBuf,
    pub with_central: bool,
    pub jobs: usize,
    pub expected_clients: usize,
    pub timeout_secs: u64,
    pub data_dir: Option<PathBuf>,
    pub synthetic: SyntheticExperiment,
    pub lora_override: Option<LoraConfig>,
    pub train: TrainingConfig,
}

pub fn load(path: Option<&Path>, seed_flag: Option<u64>, jobs_flag: Option<usize>) -> Result<Settings, Error> {
    let file: FileConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("bad config {}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    resolve(file, seed_flag, jobs_flag)
}

fn resolve(file: FileConfig, seed_flag: Option<u64>, jobs_flag: Option<usize>) -> Result<Settings, Error> {
    let env_seed = match std::env::var("FEDREVIEW_SEED") {
        Ok(v) => Some(
            v.parse::<u64>()
                .map_err(|_| Error::Config(format!("FEDREVIEW_SEED is not an integer: '{v}'")))?,
        ),
        Err(_) => None,
    };
    let seed = seed_flag.or(env_seed).or(file.seed).unwrap_or(42);
    let geometry = ModelGeometry::preset(file.geometry.as_deref().unwrap_or("toy"))?;
    let tasks = match &file.tasks {
        Some(list) => list.iter().map(|s| TaskId::parse(s)).collect::<Result<Vec<_>, _>>()?,
        None => TaskId::ALL.to_vec(),
    };
    if tasks.is_empty() {
        return Err(Error::Config("tasks must not be empty".into()));
    }
    let policy = AggregationPolicy::parse(file.aggregation.as_deref().unwrap_or("sample_weighted"))?;
    let mut synthetic = SyntheticExperiment {
        seed,
        geometry: geometry.clone(),
        ..SyntheticExperiment::default()
    };
    if let Some(s) = &file.synthetic {
        if let Some(v) = s.n_train_per_task {
            synthetic.n_train_per_task = v;
        }
        if let Some(v) = s.n_test_per_task {
            synthetic.n_test_per_task = v;
        }
        if let Some(v) = s.sample_total {
            synthetic.sample_total = v;
        }
        if let Some(r) = s.ratio {
            synthetic.ratio = (r[0], r[1]);
        }
    }
    if file.synthetic.is_some() && file.data_dir.is_some() {
        return Err(Error::Config("choose either [synthetic] or data_dir, not both".into()));
    }
    let lora_override = match &file.lora {
        Some(l) => {
            let targets = l
                .targets
                .iter()
                .map(|t| TargetModule::parse(t))
                .collect::<Result<Vec<_>, _>>()?;
            Some(LoraConfig::with_options(
                &targets,
                l.rank,
                l.alpha.unwrap_or(16.0),
                l.dropout.unwrap_or(0.1),
            )?)
        }
        None => None,
    };
    let mut train = TrainingConfig::default();
    if let Some(t) = &file.train {
        if let Some(v) = t.batch_size {
            train.batch_size = v;
        }
        if let Some(v) = t.grad_accum {
            train.grad_accum = v;
        }
        if let Some(v) = t.max_grad_norm {
            train.max_grad_norm = v;
        }
        if let Some(v) = t.base_lr {
            train.base_lr = v;
        }
        if let Some(v) = t.warmup_ratio {
            train.warmup_ratio = v;
        }
        if let Some(v) = t.weight_decay {
            train.adamw = AdamWConfig {
                weight_decay: v,
                ..AdamWConfig::default()
            };
        }
    }
    Ok(Settings {
        seed,
        geometry,
        strategy: file.strategy.unwrap_or_else(|| "individual".into()),
        tasks,
        rounds: file.rounds.unwrap_or(5),
        policy,
        output_dir: file.output_dir.unwrap_or_else(|| PathBuf::from("out")),
        with_central: file.with_central.unwrap_or(false),
        jobs: jobs_flag.or(file.jobs).unwrap_or(1),
        expected_clients: file.expected_clients.unwrap_or(2),
        timeout_secs: file.timeout_secs.unwrap_or(300),
        data_dir: file.data_dir,
        synthetic,
        lora_override,
        train,
    })
}
