//! Flat `key = value` configuration files with `[section]` headers.
//!
//! Sections: `[model]`, `[training]`, `[losses]`, `[data]`, `[run]`.
//! Parsing is total: every accepted file yields a fully specified run
//! configuration with documented defaults filled in. Unknown sections or
//! keys are rejected with their line number, as is a missing key that has
//! no default (the data source and its dependents).

use crate::data::{load_task_dir, SyntheticSpec, TaskDataset};
use crate::error::{Error, Result};
use crate::harness::{AblationFlags, BaselineMode, EvalMode, RunConfig};
use crate::losses::Reduction;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub enum DataSpec {
    Synthetic(SyntheticSpec),
    Jsonl { root: PathBuf, tasks: Vec<String> },
}

#[derive(Debug, Clone)]
pub struct FileConfig {
    pub run: RunConfig,
    pub data: DataSpec,
}

struct Raw {
    entries: BTreeMap<(String, String), (String, usize)>,
    consumed: std::cell::RefCell<std::collections::BTreeSet<(String, String)>>,
    origin: String,
}

impl Raw {
    fn get(&self, section: &str, key: &str) -> Option<&(String, usize)> {
        let k = (section.to_string(), key.to_string());
        let v = self.entries.get(&k);
        if v.is_some() {
            self.consumed.borrow_mut().insert(k);
        }
        v
    }

    fn parse<T: std::str::FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        match self.get(section, key) {
            None => Ok(default),
            Some((value, line)) => value.parse().map_err(|_| Error::Parse {
                path: self.origin.clone(),
                line: *line,
                msg: format!("invalid value {value:?} for {section}.{key}"),
            }),
        }
    }

    fn parse_bool(&self, section: &str, key: &str, default: bool) -> Result<bool> {
        match self.get(section, key) {
            None => Ok(default),
            Some((value, line)) => match value.as_str() {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                other => Err(Error::Parse {
                    path: self.origin.clone(),
                    line: *line,
                    msg: format!("invalid boolean {other:?} for {section}.{key}"),
                }),
            },
        }
    }

    fn required(&self, section: &str, key: &str) -> Result<(String, usize)> {
        self.get(section, key).cloned().ok_or_else(|| {
            Error::Config(format!("missing required key {section}.{key} in {}", self.origin))
        })
    }

    fn unconsumed(&self) -> Vec<((String, String), usize)> {
        let consumed = self.consumed.borrow();
        self.entries
            .iter()
            .filter(|(k, _)| !consumed.contains(*k))
            .map(|(k, (_, line))| (k.clone(), *line))
            .collect()
    }
}

const SECTIONS: [&str; 5] = ["model", "training", "losses", "data", "run"];

fn tokenize(text: &str, origin: &str) -> Result<Raw> {
    let mut entries = BTreeMap::new();
    let mut section = String::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !SECTIONS.contains(&name) {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: line_no,
                    msg: format!("unknown section [{name}]"),
                });
            }
            section = name.to_string();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: line_no,
                msg: format!("expected key = value, got {line:?}"),
            });
        };
        if section.is_empty() {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: line_no,
                msg: "key outside any [section]".into(),
            });
        }
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        let slot = (section.clone(), key.clone());
        if entries.contains_key(&slot) {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: line_no,
                msg: format!("duplicate key {section}.{key}"),
            });
        }
        entries.insert(slot, (value, line_no));
    }
    Ok(Raw { entries, consumed: Default::default(), origin: origin.to_string() })
}

pub fn parse_config_str(text: &str, origin: &str) -> Result<FileConfig> {
    let raw = tokenize(text, origin)?;
    let mut run = RunConfig::default();

    run.model.vocab_buckets = raw.parse("model", "vocab_buckets", run.model.vocab_buckets)?;
    run.model.d_model = raw.parse("model", "d_model", run.model.d_model)?;
    run.model.n_layers = raw.parse("model", "n_layers", run.model.n_layers)?;
    run.model.n_heads = raw.parse("model", "n_heads", run.model.n_heads)?;
    run.model.ffn_dim = raw.parse("model", "ffn_dim", run.model.ffn_dim)?;
    run.model.adapter_dim = raw.parse("model", "adapter_dim", run.model.adapter_dim)?;
    run.model.max_len = raw.parse("model", "max_len", run.model.max_len)?;
    run.model.dropout_p = raw.parse("model", "dropout_p", run.model.dropout_p)?;
    run.model.train_layer_norm = raw.parse_bool("model", "train_layer_norm", run.model.train_layer_norm)?;
    run.model.seed = raw.parse("model", "seed", run.model.seed)?;
    run.model.backbone_file = raw.get("model", "backbone_file").map(|(v, _)| v.clone());

    run.epochs = raw.parse("training", "epochs", run.epochs)?;
    run.batch_size = raw.parse("training", "batch_size", run.batch_size)?;
    run.adam.learning_rate = raw.parse("training", "learning_rate", run.adam.learning_rate)?;
    run.adam.beta1 = raw.parse("training", "beta1", run.adam.beta1)?;
    run.adam.beta2 = raw.parse("training", "beta2", run.adam.beta2)?;
    run.adam.epsilon = raw.parse("training", "epsilon", run.adam.epsilon)?;
    run.s_max = raw.parse("training", "s_max", run.s_max)?;
    run.early_stop_patience = raw.parse("training", "early_stop_patience", run.early_stop_patience)?;
    run.clip_embedding_grad = raw.parse_bool("training", "clip_embedding_grad", run.clip_embedding_grad)?;
    run.teacher_grad = raw.parse_bool("training", "teacher_grad", run.teacher_grad)?;

    run.weights.lambda_csc = raw.parse("losses", "lambda_csc", run.weights.lambda_csc)?;
    run.weights.lambda_ced = raw.parse("losses", "lambda_ced", run.weights.lambda_ced)?;
    run.weights.lambda_cks = raw.parse("losses", "lambda_cks", run.weights.lambda_cks)?;
    run.weights.tau = raw.parse("losses", "tau", run.weights.tau)?;
    run.ablation = AblationFlags {
        no_csc: raw.parse_bool("losses", "no_csc", false)?,
        no_ced: raw.parse_bool("losses", "no_ced", false)?,
        no_cks: raw.parse_bool("losses", "no_cks", false)?,
    };
    if let Some((value, line)) = raw.get("losses", "reduction") {
        run.loss_reduction = match value.as_str() {
            "sum" => Reduction::Sum,
            "mean" => Reduction::Mean,
            other => {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: *line,
                    msg: format!("reduction must be sum or mean, got {other:?}"),
                })
            }
        };
    }

    if let Some((value, line)) = raw.get("run", "sequence_seeds") {
        let seeds: std::result::Result<Vec<u64>, _> =
            value.split(',').map(|s| s.trim().parse::<u64>()).collect();
        run.sequence_seeds = seeds.map_err(|_| Error::Parse {
            path: origin.to_string(),
            line: *line,
            msg: format!("sequence_seeds must be comma-separated integers, got {value:?}"),
        })?;
    }
    if let Some((value, line)) = raw.get("run", "baseline") {
        run.baseline = match value.as_str() {
            "classic" => BaselineMode::Classic,
            "ncl" => BaselineMode::Ncl,
            "one" => BaselineMode::One,
            other => {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: *line,
                    msg: format!("baseline must be classic, ncl, or one, got {other:?}"),
                })
            }
        };
    }
    if let Some((value, line)) = raw.get("run", "mode") {
        run.eval_mode = match value.as_str() {
            "dil" => EvalMode::Dil,
            "til" => EvalMode::Til,
            other => {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: *line,
                    msg: format!("mode must be dil or til, got {other:?}"),
                })
            }
        };
    }

    let (source, source_line) = raw.required("data", "source")?;
    let data = match source.as_str() {
        "synthetic" => DataSpec::Synthetic(SyntheticSpec {
            seed: raw.parse("data", "seed", 0u64)?,
            n_tasks: raw.parse("data", "tasks", 6usize)?,
            examples_per_task: raw.parse("data", "per_task", 120usize)?,
            flip_fraction: raw.parse("data", "flip", 0.3f64)?,
        }),
        "jsonl" => {
            let (root, _) = raw.required("data", "root")?;
            let (tasks, line) = raw.required("data", "tasks")?;
            let tasks: Vec<String> =
                tasks.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect();
            if tasks.is_empty() {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line,
                    msg: "data.tasks must list at least one task".into(),
                });
            }
            DataSpec::Jsonl { root: PathBuf::from(root), tasks }
        }
        other => {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: source_line,
                msg: format!("data.source must be synthetic or jsonl, got {other:?}"),
            })
        }
    };

    let leftover = raw.unconsumed();
    if let Some(((section, key), line)) = leftover.first() {
        return Err(Error::Parse {
            path: origin.to_string(),
            line: *line,
            msg: format!("unknown key {section}.{key}"),
        });
    }

    run.validate()?;
    Ok(FileConfig { run, data })
}

pub fn parse_config(path: &Path) -> Result<FileConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_config_str(&text, &path.display().to_string())
}

/// Materialize the task suite a config names.
pub fn load_tasks(data: &DataSpec) -> Result<Vec<TaskDataset>> {
    match data {
        DataSpec::Synthetic(spec) => crate::data::generate_synthetic_suite(spec),
        DataSpec::Jsonl { root, tasks } => tasks
            .iter()
            .map(|name| load_task_dir(&root.join(name), name))
            .collect(),
    }
}
