use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use lossearch::losses::{target_gradient_rows, write_gradient_csv, LogitsBatch, LossSpec};
use lossearch::nnet::{HeadKind, ModelState};
use lossearch::piecewise::LossParams;
use lossearch::search::{run_search_with, train_baseline, write_mu_trajectory};
use lossearch::{Error, Result};
use serde_json::json;

use crate::args::{BaselineArgs, DataArgs, EvalArgs, ExportArgs, SearchArgs, Split};
use crate::config::{
    search_config, train_config, BaselineConfig, DataConfig, LossChoice, Manifest, RunConfig,
    SearchRunConfig,
};

pub fn baseline(a: &BaselineArgs) -> Result<()> {
    let cfg = BaselineConfig::new(
        DataConfig::from_args(&a.data, a.train.seed),
        train_config(&a.train),
        a.train.hidden.iter().map(|&h| h as usize).collect(),
        a.train.feature_dim as usize,
        LossChoice::resolve(a.loss, a.margin, a.alpha),
        a.head,
    )?;
    run(&RunConfig::Baseline(cfg), &a.out)
}

pub fn search(a: &SearchArgs, workers: usize) -> Result<()> {
    let cfg = SearchRunConfig {
        data: DataConfig::from_args(&a.data, a.train.seed),
        search: search_config(
            &a.train,
            a.population,
            a.intervals,
            a.sigma,
            a.eta,
            a.optimizer,
            workers,
        ),
    };
    run(&RunConfig::Search(cfg), &a.out)
}

/// Runs a resolved configuration into `out`.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let data = cfg.data().load()?;
    match cfg {
        RunConfig::Baseline(c) => run_baseline(c, &data, out),
        RunConfig::Search(c) => run_search_into(c, &data, out),
    }
}

fn run_baseline(
    c: &BaselineConfig,
    data: &lossearch::data::DatasetSplit,
    out: &Path,
) -> Result<()> {
    let spec = c.loss.spec()?;
    if c.head_forced {
        eprintln!(
            "{} needs the cosine head; using it instead of the linear head",
            spec.name()
        );
    }
    let mut manifest = Manifest::new(
        RunConfig::Baseline(c.clone()),
        data.provenance.clone(),
        &[("epochs", "epochs.jsonl"), ("checkpoint", "model.ckpt")],
    );
    manifest.write(out)?;

    let (model, history) =
        train_baseline(&spec, &c.train, &c.hidden_dims, c.feature_dim, c.head, data)?;
    let mut log = BufWriter::new(File::create(out.join("epochs.jsonl"))?);
    for epoch in &history {
        eprintln!(
            "epoch {:>3}  loss {:.4}  val {:.4}",
            epoch.epoch, epoch.train_loss, epoch.val_accuracy
        );
        serde_json::to_writer(&mut log, epoch)?;
        log.write_all(b"\n")?;
    }
    log.flush()?;
    model.save(out.join("model.ckpt"))?;
    manifest.finish(out)?;

    let accuracy = history.last().map_or(0.0, |h| h.val_accuracy);
    println!(
        "{}",
        json!({ "val_accuracy": accuracy, "loss": spec.name() })
    );
    Ok(())
}

fn run_search_into(
    c: &SearchRunConfig,
    data: &lossearch::data::DatasetSplit,
    out: &Path,
) -> Result<()> {
    let mut manifest = Manifest::new(
        RunConfig::Search(c.clone()),
        data.provenance.clone(),
        &[
            ("records", "records.jsonl"),
            ("mu_trajectory", "mu_trajectory.csv"),
            ("loss_params", "loss_params.json"),
            ("checkpoint", "model.ckpt"),
        ],
    );
    manifest.write(out)?;

    let mut log = BufWriter::new(File::create(out.join("records.jsonl"))?);
    let mut write_err = None;
    let outcome = run_search_with(&c.search, data, |record| {
        let best = record.raw_rewards[record.winner];
        let failed = record.failures.iter().filter(|f| f.is_some()).count();
        eprintln!(
            "epoch {:>3}  best val {best:.4}  failed {failed}  ({} ms)",
            record.epoch, record.duration_ms
        );
        let written = serde_json::to_writer(&mut log, record)
            .map_err(Error::from)
            .and_then(|_| Ok(log.write_all(b"\n").and_then(|_| log.flush())?));
        if let Err(e) = written {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }

    write_mu_trajectory(
        BufWriter::new(File::create(out.join("mu_trajectory.csv"))?),
        &outcome.records,
    )?;
    LossParams::from_theta(outcome.distribution.mu(), c.search.intervals)?
        .save(out.join("loss_params.json"))?;
    outcome.model.save(out.join("model.ckpt"))?;
    manifest.finish(out)?;

    let accuracy = outcome.model.evaluate(&data.val)?;
    println!("{}", json!({ "val_accuracy": accuracy }));
    Ok(())
}

fn data_for(
    manifest: &Option<std::path::PathBuf>,
    data: &DataArgs,
    seed: u64,
) -> Result<DataConfig> {
    match manifest {
        Some(path) => Ok(Manifest::read(path)?.run.data().clone()),
        None => Ok(DataConfig::from_args(data, seed)),
    }
}

fn split_of(data: &lossearch::data::DatasetSplit, split: Split) -> &lossearch::data::Samples {
    match split {
        Split::Train => &data.train,
        Split::Val => &data.val,
    }
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let model = ModelState::load(&a.checkpoint)?;
    let data = data_for(&a.manifest, &a.data, a.seed)?.load()?;
    let samples = split_of(&data, a.split);
    let accuracy = model.evaluate(samples)?;
    println!(
        "{}",
        json!({ "accuracy": accuracy, "n": samples.len(), "checkpoint": a.checkpoint.display().to_string() })
    );
    Ok(())
}

pub fn export_grads(a: &ExportArgs) -> Result<()> {
    let model = ModelState::load(&a.checkpoint)?;
    if model.config().head != HeadKind::Cosine {
        return Err(Error::Precondition(
            "gradient export needs a cosine-head checkpoint".into(),
        ));
    }
    let params = LossParams::load(&a.loss_params)?;
    let reference = LossChoice::resolve(a.reference, a.margin, a.alpha).spec()?;
    let data = data_for(&a.manifest, &a.data, a.seed)?.load()?;
    let samples = split_of(&data, a.split);

    let logits = model.forward(samples.features(), a.scale)?;
    let batch = LogitsBatch::new(
        logits,
        samples.labels().to_vec(),
        model.config().num_classes,
    )?;
    let mut rows = target_gradient_rows(&batch, &LossSpec::Unified(params), a.scale, "searched")?;
    rows.extend(target_gradient_rows(
        &batch,
        &reference,
        a.scale,
        &reference.name(),
    )?);
    write_gradient_csv(BufWriter::new(File::create(&a.out)?), &rows)?;
    eprintln!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}

pub fn replay(manifest: &Path, out: &Path) -> Result<()> {
    let m = Manifest::read(manifest)?;
    if m.version != env!("CARGO_PKG_VERSION") {
        eprintln!(
            "manifest was written by version {}; replaying with {}",
            m.version,
            env!("CARGO_PKG_VERSION")
        );
    }
    run(&m.run, out)
}
