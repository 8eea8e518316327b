//! Command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error. All randomness flows from config seeds; outputs carry no
//! timestamps, so re-running a command with identical inputs reproduces
//! identical bytes.

use crate::checkpoint::{self, Checkpoint};
use crate::config::{load_tasks, parse_config, FileConfig};
use crate::data::{dump_suite, generate_synthetic_suite, SyntheticSpec};
use crate::error::{Error, Result};
use crate::harness::{self, ablate, dump_attention, run, BaselineMode, EvalMode, SequenceState};
use crate::masks::BINARY_THRESHOLD;
use std::io::Write;
use std::path::{Path, PathBuf};

const USAGE: &str = "\
usage: classic <command> [options]

commands:
  gen-data     --seed N --tasks N --per-task N --flip F --out DIR
               write a synthetic task suite as JSONL plus a manifest
  run          --config FILE --out DIR [--ablate] [--baseline classic|ncl|one]
               [--mode dil|til] [--checkpoint FILE] [--dump-attention FILE]
               train a task sequence (or evaluate a checkpoint) and write
               metrics, training logs, and a checkpoint
  mask-report  --checkpoint FILE --out FILE
               per-layer capacity, task overlap, and free units
  grad-check   [--trials N]
               finite-difference verification of every op and loss
";

/// Errors a user can fix by changing flags or files.
fn is_usage_error(err: &Error) -> bool {
    matches!(
        err,
        Error::Config(_) | Error::Parse { .. } | Error::InvalidArg(_) | Error::Checkpoint(_)
    )
}

pub fn main_with_args(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if is_usage_error(&e) {
                2
            } else {
                1
            }
        }
    }
}

struct Flags {
    named: std::collections::BTreeMap<String, String>,
    bare: Vec<String>,
}

fn parse_flags(args: &[String]) -> Result<Flags> {
    let mut named = std::collections::BTreeMap::new();
    let mut bare = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        if let Some(name) = a.strip_prefix("--") {
            if name == "ablate" {
                named.insert(name.to_string(), "true".to_string());
                i += 1;
                continue;
            }
            let value = args.get(i + 1).ok_or_else(|| {
                Error::InvalidArg(format!("flag --{name} needs a value"))
            })?;
            if named.insert(name.to_string(), value.clone()).is_some() {
                return Err(Error::InvalidArg(format!("flag --{name} given twice")));
            }
            i += 2;
        } else {
            bare.push(a.clone());
            i += 1;
        }
    }
    Ok(Flags { named, bare })
}

impl Flags {
    fn take(&mut self, name: &str) -> Option<String> {
        self.named.remove(name)
    }

    fn require(&mut self, name: &str) -> Result<String> {
        self.take(name).ok_or_else(|| Error::InvalidArg(format!("missing required flag --{name}")))
    }

    fn finish(self) -> Result<()> {
        if let Some(k) = self.named.keys().next() {
            return Err(Error::InvalidArg(format!("unknown flag --{k}")));
        }
        if let Some(b) = self.bare.first() {
            return Err(Error::InvalidArg(format!("unexpected argument {b:?}")));
        }
        Ok(())
    }
}

fn parse_value<T: std::str::FromStr>(name: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArg(format!("invalid value {value:?} for --{name}")))
}

fn dispatch(args: &[String]) -> Result<i32> {
    let Some(command) = args.first() else {
        eprint!("{USAGE}");
        return Ok(2);
    };
    let rest = &args[1..];
    match command.as_str() {
        "gen-data" => cmd_gen_data(rest),
        "run" => cmd_run(rest),
        "mask-report" => cmd_mask_report(rest),
        "grad-check" => cmd_grad_check(rest),
        "--help" | "-h" | "help" => {
            print!("{USAGE}");
            Ok(0)
        }
        other => {
            eprintln!("unknown command {other:?}");
            eprint!("{USAGE}");
            Ok(2)
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidArg(format!("serialize: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn cmd_gen_data(args: &[String]) -> Result<i32> {
    let mut flags = parse_flags(args)?;
    let spec = SyntheticSpec {
        seed: parse_value("seed", &flags.take("seed").unwrap_or_else(|| "0".into()))?,
        n_tasks: parse_value("tasks", &flags.take("tasks").unwrap_or_else(|| "6".into()))?,
        examples_per_task: parse_value(
            "per-task",
            &flags.take("per-task").unwrap_or_else(|| "120".into()),
        )?,
        flip_fraction: parse_value("flip", &flags.take("flip").unwrap_or_else(|| "0.3".into()))?,
    };
    let out = PathBuf::from(flags.require("out")?);
    flags.finish()?;

    if !(0.0..=1.0).contains(&spec.flip_fraction) {
        return Err(Error::InvalidArg("flip_fraction out of range".into()));
    }
    let suite = generate_synthetic_suite(&spec)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
    dump_suite(&out, &suite)?;
    let manifest = serde_json::json!({
        "generator": "classic gen-data",
        "seed": spec.seed,
        "tasks": spec.n_tasks,
        "per_task": spec.examples_per_task,
        "flip": spec.flip_fraction,
        "task_names": suite.iter().map(|t| t.name.clone()).collect::<Vec<_>>(),
        "splits": ["train", "valid", "test"],
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    println!("wrote {} tasks under {}", suite.len(), out.display());
    Ok(0)
}

fn cmd_run(args: &[String]) -> Result<i32> {
    let mut flags = parse_flags(args)?;
    let config_path = PathBuf::from(flags.require("config")?);
    let out = PathBuf::from(flags.require("out")?);
    let baseline = flags.take("baseline");
    let mode = flags.take("mode");
    let do_ablate = flags.take("ablate").is_some();
    let ckpt_path = flags.take("checkpoint").map(PathBuf::from);
    let attn_path = flags.take("dump-attention").map(PathBuf::from);
    flags.finish()?;

    let FileConfig { run: mut config, data } = parse_config(&config_path)?;
    if let Some(b) = baseline {
        config.baseline = match b.as_str() {
            "classic" => BaselineMode::Classic,
            "ncl" => BaselineMode::Ncl,
            "one" => BaselineMode::One,
            other => return Err(Error::InvalidArg(format!("unknown baseline {other:?}"))),
        };
    }
    if let Some(m) = mode {
        config.eval_mode = match m.as_str() {
            "dil" => EvalMode::Dil,
            "til" => EvalMode::Til,
            other => return Err(Error::InvalidArg(format!("unknown mode {other:?}"))),
        };
    }
    let suite = load_tasks(&data)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;

    // evaluate an existing checkpoint instead of training
    if let Some(ckpt_path) = ckpt_path {
        let ckpt = checkpoint::load(&ckpt_path)?;
        let state = SequenceState::from_checkpoint_parts(
            ckpt.run_config,
            ckpt.sequence_seed,
            ckpt.model,
            ckpt.mask_store,
            ckpt.attention,
        )?;
        // tasks in the checkpoint's training order
        let by_name: std::collections::BTreeMap<&str, &crate::data::TaskDataset> =
            suite.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut tasks = Vec::with_capacity(ckpt.task_names.len());
        for name in &ckpt.task_names {
            let t = by_name.get(name.as_str()).ok_or_else(|| {
                Error::Config(format!("checkpoint task {name:?} not present in config data"))
            })?;
            tasks.push(harness::TaskData::from_dataset(t));
        }
        let metrics = state.evaluate(&tasks, config.eval_mode)?;
        let doc = serde_json::json!({
            "mode": match config.eval_mode { EvalMode::Dil => "dil", EvalMode::Til => "til" },
            "per_task": metrics.per_task,
            "mean_accuracy": metrics.mean_accuracy,
            "mean_macro_f1": metrics.mean_macro_f1,
        });
        let path = out.join("eval_metrics.json");
        write_json(&path, &doc)?;
        println!(
            "evaluated checkpoint: mean accuracy {:.4}, mean macro-F1 {:.4} -> {}",
            metrics.mean_accuracy,
            metrics.mean_macro_f1,
            path.display()
        );
        return Ok(0);
    }

    if do_ablate {
        let table = ablate(&config, &suite)?;
        let doc: Vec<serde_json::Value> = table
            .iter()
            .map(|(name, report)| {
                serde_json::json!({
                    "ablation": name,
                    "forward": report.forward,
                    "final": report.final_,
                })
            })
            .collect();
        write_json(&out.join("ablation.json"), &doc)?;
        // the full row also serves as the run's headline metrics
        let full = &table[0].1;
        write_json(&out.join("metrics.json"), full)?;
        for (name, report) in &table {
            println!(
                "{name:>16}  forward MF1 {:.4}  final MF1 {}",
                report.forward.macro_f1,
                report
                    .final_
                    .as_ref()
                    .map(|f| format!("{:.4}", f.macro_f1))
                    .unwrap_or_else(|| "-".into()),
            );
        }
        return Ok(0);
    }

    let output = run(&config, &suite)?;
    write_json(&out.join("metrics.json"), &output.report)?;
    for seq in &output.sequences {
        let path = out.join(format!("train_log_seed{}.jsonl", seq.report.seed));
        let mut file =
            std::fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        for row in &seq.state.logs {
            let line = serde_json::to_string(row)
                .map_err(|e| Error::InvalidArg(format!("serialize log: {e}")))?;
            writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    // checkpoint the lowest-seed sequence
    let first = &output.sequences[0];
    let ckpt = Checkpoint::new(
        config.clone(),
        first.report.seed,
        first.report.order.clone(),
        first.state.model.clone(),
        first.state.mask_store.clone(),
        first.state.attention.clone(),
    );
    checkpoint::save(&out.join("checkpoint.json"), &ckpt)?;

    if let Some(attn_path) = attn_path {
        let doc = dump_attention(&first.state, &first.tasks)?;
        write_json(&attn_path, &doc)?;
    }

    println!(
        "forward: acc {:.4} mf1 {:.4}",
        output.report.forward.accuracy, output.report.forward.macro_f1
    );
    if let Some(f) = &output.report.final_ {
        println!("final:   acc {:.4} mf1 {:.4}", f.accuracy, f.macro_f1);
    }
    println!("outputs in {}", out.display());
    Ok(0)
}

fn cmd_mask_report(args: &[String]) -> Result<i32> {
    let mut flags = parse_flags(args)?;
    let ckpt_path = PathBuf::from(flags.require("checkpoint")?);
    let out = PathBuf::from(flags.require("out")?);
    flags.finish()?;

    let ckpt = checkpoint::load(&ckpt_path)?;
    let store = &ckpt.mask_store;
    let ids = store.task_ids();
    let overlap: Vec<Vec<f64>> = ids
        .iter()
        .map(|&a| ids.iter().map(|&b| store.jaccard(a, b).unwrap_or(0.0)).collect())
        .collect();
    let per_task_usage: Vec<serde_json::Value> = ids
        .iter()
        .map(|&id| {
            let m = store.get(id).unwrap();
            let used: usize = m
                .hard
                .iter()
                .map(|l| l.iter().filter(|&&v| v > BINARY_THRESHOLD).count())
                .sum();
            let total: usize = m.hard.iter().map(|l| l.len()).sum();
            serde_json::json!({
                "task": id,
                "name": ckpt.task_names.get(id),
                "used_units": used,
                "total_units": total,
            })
        })
        .collect();
    let doc = serde_json::json!({
        "tasks": ids,
        "task_names": ckpt.task_names,
        "used_capacity_per_layer": store.used_capacity(),
        "free_units_per_layer": store.free_units(),
        "free_units_total": store.free_units().iter().sum::<usize>(),
        "per_task": per_task_usage,
        "overlap": overlap,
    });
    write_json(&out, &doc)?;
    println!("mask report for {} tasks -> {}", ids.len(), out.display());
    Ok(0)
}

fn cmd_grad_check(args: &[String]) -> Result<i32> {
    let mut flags = parse_flags(args)?;
    let trials: usize =
        parse_value("trials", &flags.take("trials").unwrap_or_else(|| "20".into()))?;
    flags.finish()?;
    if trials < 1 {
        return Err(Error::InvalidArg("trials must be >= 1".into()));
    }
    let items = crate::gradcheck::run_suite(trials)?;
    let mut all_pass = true;
    for item in &items {
        println!(
            "{} {:<28} max err {:.3e} (tol {:.0e}, {} trials)",
            if item.pass { "PASS" } else { "FAIL" },
            item.name,
            item.max_error,
            item.tolerance,
            item.trials
        );
        all_pass &= item.pass;
    }
    Ok(if all_pass { 0 } else { 1 })
}
