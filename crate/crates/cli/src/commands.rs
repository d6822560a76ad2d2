use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use oicsr::data::checkpoint::CheckpointMeta;
use oicsr::importance::{score_all, write_energy_csv};
use oicsr::pruner::{count_flops, prune_loop, write_plan_csv};
use oicsr::trainer::{accuracy, train, write_metrics_csv, FineTuneHooks, METRICS_HEADER};
use oicsr::{Checkpoint, Criterion, LayerSpec, Model};
use serde::{Deserialize, Serialize};

use crate::config::{Config, ConfigError};

pub const CHECKPOINT: &str = "checkpoint.oicsr";
pub const METRICS: &str = "metrics.csv";
pub const ENERGY: &str = "energy.csv";
pub const RESOLVED_CONFIG: &str = "config.toml";
pub const PLANS: &str = "plans.csv";
pub const PRUNE_SUMMARY: &str = "prune_summary.csv";
pub const FINE_TUNE_METRICS: &str = "fine_tune_metrics.csv";

/// One row of `prune_summary.csv`. Iteration 0 describes the input model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub iteration: usize,
    pub target_ratio: f64,
    pub achieved_ratio: f64,
    pub flops: u64,
    pub params: u64,
    pub removed_groups: usize,
    /// Pair ids joined with `;`.
    pub capped_pairs: String,
    pub accuracy_before_fine_tune: f64,
    pub accuracy_after_fine_tune: f64,
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))
}

fn write_energy(model: &Model, out: &Path) -> Result<()> {
    let scores = score_all(model, Criterion::OutInChannel)?;
    let mut w = create(out, ENERGY)?;
    write_energy_csv(model, &scores, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn cmd_train(config: &Config, out: &Path) -> Result<()> {
    let (train_data, eval_data) = config.data.load()?;
    let arch = config.architecture(&train_data);
    let run = config.run_config();
    let mut model = Model::from_architecture(&arch, run.seed)
        .map_err(|e| ConfigError(format!("model.layers: {e}")))?;
    prepare_out(out)?;
    log::info!(
        "training {} groups with {} for {} epochs",
        model.group_count(),
        run.regularizer.name(),
        run.epochs
    );
    let history = train(&mut model, &train_data, &eval_data, &run, &mut ())?;
    if let Some(last) = history.last() {
        log::info!("final eval accuracy {:.4}", last.eval_acc);
    }

    let mut w = create(out, METRICS)?;
    write_metrics_csv(&history, &mut w)?;
    w.flush()?;
    write_energy(&model, out)?;
    fs::write(out.join(RESOLVED_CONFIG), config.to_toml())?;
    let meta = CheckpointMeta {
        config: Some(run),
        history: Vec::new(),
    };
    Checkpoint::new(model, meta).save(&out.join(CHECKPOINT))?;
    Ok(())
}

/// Layer list with every channel count blanked, for comparing a pruned
/// checkpoint against the configuration it was trained from.
fn skeleton(layers: &[LayerSpec]) -> Vec<LayerSpec> {
    layers
        .iter()
        .cloned()
        .map(|mut l| {
            match &mut l {
                LayerSpec::Dense { channels, .. } | LayerSpec::Conv2d { channels, .. } => {
                    *channels = 0
                }
                _ => {}
            }
            l
        })
        .collect()
}

fn check_matches(
    config: &Config,
    ckpt: &Checkpoint,
    sample_shape: &[usize],
) -> Result<(), ConfigError> {
    let have = ckpt.model.architecture();
    let input = config.model.input.as_deref().unwrap_or(sample_shape);
    if have.input != input {
        return Err(ConfigError(format!(
            "checkpoint input shape {:?} does not match model.input {:?}",
            have.input, input
        )));
    }
    let same = if ckpt.meta.history.is_empty() {
        have.layers == config.model.layers
    } else {
        skeleton(&have.layers) == skeleton(&config.model.layers)
    };
    if !same {
        return Err(ConfigError(
            "checkpoint architecture does not match model.layers".into(),
        ));
    }
    Ok(())
}

pub fn cmd_prune(config: &Config, checkpoint: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (train_data, eval_data) = config.data.load()?;
    check_matches(config, &ckpt, train_data.sample_shape())?;
    let run = config.run_config();
    let criterion = run.pruning_criterion();
    prepare_out(out)?;

    let before = count_flops(&ckpt.model);
    let base_acc = accuracy(&ckpt.model, &eval_data)?;
    write_energy(&ckpt.model, out)?;
    let mut w = create(out, "flops_iter0.csv")?;
    before.write_csv(&mut w)?;
    w.flush()?;

    let mut hooks = FineTuneHooks::new(&train_data, &eval_data, run.clone());
    let (model, reports) =
        prune_loop(ckpt.model.clone(), &run.prune_ratios, criterion, &mut hooks)?;

    let mut rows = vec![SummaryRow {
        iteration: 0,
        target_ratio: 0.0,
        achieved_ratio: 0.0,
        flops: before.total_flops,
        params: before.total_params,
        removed_groups: 0,
        capped_pairs: String::new(),
        accuracy_before_fine_tune: base_acc,
        accuracy_after_fine_tune: base_acc,
    }];
    for r in &reports {
        log::info!(
            "iteration {}: pruned {:.4} of FLOPs, accuracy {:.4} -> {:.4}",
            r.iteration,
            r.plan.achieved_flops_ratio,
            r.accuracy_before_fine_tune,
            r.accuracy_after_fine_tune
        );
        let mut w = create(out, &format!("flops_iter{}.csv", r.iteration))?;
        r.flops.write_csv(&mut w)?;
        w.flush()?;
        rows.push(SummaryRow {
            iteration: r.iteration,
            target_ratio: r.plan.target_ratio,
            achieved_ratio: r.plan.achieved_flops_ratio,
            flops: r.flops.total_flops,
            params: r.flops.total_params,
            removed_groups: r.plan.removals.len(),
            capped_pairs: r
                .plan
                .capped_pairs
                .iter()
                .map(|p| p.to_string())
                .collect::<Vec<_>>()
                .join(";"),
            accuracy_before_fine_tune: r.accuracy_before_fine_tune,
            accuracy_after_fine_tune: r.accuracy_after_fine_tune,
        });
    }

    let mut w = csv::Writer::from_writer(create(out, PRUNE_SUMMARY)?);
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;

    let mut w = create(out, PLANS)?;
    write_plan_csv(reports.iter().map(|r| &r.plan), &mut w)?;
    w.flush()?;

    let mut w = create(out, FINE_TUNE_METRICS)?;
    writeln!(w, "iteration,{METRICS_HEADER}")?;
    for (iteration, metrics) in &hooks.history {
        let mut buf = Vec::new();
        write_metrics_csv(metrics, &mut buf)?;
        for line in String::from_utf8(buf)?.lines().skip(1) {
            writeln!(w, "{iteration},{line}")?;
        }
    }
    w.flush()?;

    fs::write(out.join(RESOLVED_CONFIG), config.to_toml())?;
    let mut meta = ckpt.meta.clone();
    meta.history.extend(reports.into_iter().map(|r| r.plan));
    Checkpoint::new(model, meta).save(&out.join(CHECKPOINT))?;
    Ok(())
}

/// Evaluates without touching the checkpoint file; prints one CSV row and
/// also writes it to `out/eval.csv` when an output directory is given.
pub fn cmd_eval(config: &Config, checkpoint: &Path, out: Option<&PathBuf>) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (_, eval_data) = config.data.load()?;
    let acc = accuracy(&ckpt.model, &eval_data)?;
    let flops = count_flops(&ckpt.model);
    let text = format!(
        "accuracy,flops,params,groups\n{},{},{},{}\n",
        acc,
        flops.total_flops,
        flops.total_params,
        ckpt.model.group_count()
    );
    print!("{text}");
    if let Some(out) = out {
        prepare_out(out)?;
        fs::write(out.join("eval.csv"), text)?;
    }
    Ok(())
}
