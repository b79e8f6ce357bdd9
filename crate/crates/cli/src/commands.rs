use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use mti_core::affinity::{curve_csv, dataset_curve};
use mti_core::config::RunConfig;
use mti_core::eval::{delta_csv, delta_m, evaluate, MetricsReport};
use mti_core::gradcheck::suite::run_suite;
use mti_core::gradcheck::GradCheckOptions;
use mti_core::model::MtiNet;
use mti_core::synth::{generate_sample, sample_path, write_meta, Dataset};
use mti_core::{Error, Result};

/// Tolerance on the maximum relative gradient error.
pub const GRADCHECK_TOL: f64 = 1e-4;

const PROGRESS_EVERY: usize = 1000;

/// Sizes the global worker pool from `MTI_THREADS` (default 1).
pub fn init_threads() -> Result<()> {
    let threads = match std::env::var("MTI_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => n,
            _ => return Err(Error::Config(format!("MTI_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))
}

fn with_path(path: &Path, e: io::Error) -> Error {
    Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| with_path(path, e))
}

/// Opens a dataset and checks it against the run configuration.
pub fn load_data(dir: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let ds = Dataset::open(dir)?;
    if ds.config.num_classes != cfg.data.num_classes {
        return Err(Error::Config(format!(
            "dataset {} has {} classes, config expects {}",
            dir.display(),
            ds.config.num_classes,
            cfg.data.num_classes
        )));
    }
    cfg.model
        .check_input(ds.config.height, ds.config.width)
        .map_err(|e| Error::Config(e.to_string()))?;
    if ds.is_empty() {
        return Err(Error::Config(format!("dataset {} holds no samples", dir.display())));
    }
    Ok(ds)
}

fn remove_stale_samples(dir: &Path, count: usize) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| with_path(dir, e))? {
        let path = entry?.path();
        let index = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("sample_"))
            .and_then(|n| n.strip_suffix(".mtis"))
            .and_then(|n| n.parse::<usize>().ok());
        if index.is_some_and(|i| i >= count) {
            fs::remove_file(&path).map_err(|e| with_path(&path, e))?;
        }
    }
    Ok(())
}

pub fn synth(config: &Path, out_dir: &Path, count: usize) -> Result<()> {
    let cfg = RunConfig::load(config)?.data;
    cfg.validate()?;
    write_meta(out_dir, &cfg).map_err(|e| match e {
        Error::Io(io) => with_path(out_dir, io),
        other => other,
    })?;
    remove_stale_samples(out_dir, count)?;
    let mut start = 0;
    while start < count {
        let end = (start + PROGRESS_EVERY).min(count);
        let samples = (start..end)
            .into_par_iter()
            .map(|i| generate_sample(&cfg, i as u64))
            .collect::<Result<Vec<_>>>()?;
        for (i, s) in (start..end).zip(&samples) {
            let path = sample_path(out_dir, i);
            s.write(&path).map_err(|e| match e {
                Error::Io(io) => with_path(&path, io),
                other => other,
            })?;
        }
        println!("synth: {end}/{count} samples");
        start = end;
    }
    println!("synth: wrote {count} samples to {}", out_dir.display());
    Ok(())
}

pub fn train(config: &Path, data_dir: &Path, out: &Path, log: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let ds = load_data(data_dir, &cfg)?;
    let (net, mut store) = MtiNet::build(cfg.model.clone(), cfg.model_seed)?;
    let file = fs::File::create(log).map_err(|e| with_path(log, e))?;
    let mut writer = BufWriter::new(file);
    let rows = mti_core::training::train(&net, &mut store, &ds.samples, &cfg.optim, &mut writer);
    writer.flush().map_err(|e| with_path(log, e))?;
    let rows = rows?;
    store.save_checkpoint(out).map_err(|e| match e {
        Error::Io(io) => with_path(out, io),
        other => other,
    })?;
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        println!(
            "train: {} steps, loss {:.4} -> {:.4}, checkpoint {}",
            cfg.optim.total_steps,
            first.total,
            last.total,
            out.display()
        );
    }
    Ok(())
}

pub fn eval(checkpoint: &Path, data_dir: &Path, config: &Path, out: &Path, model_id: Option<String>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let ds = load_data(data_dir, &cfg)?;
    let (net, mut store) = MtiNet::build(cfg.model.clone(), cfg.model_seed)?;
    let bytes = fs::read(checkpoint).map_err(|e| with_path(checkpoint, e))?;
    store
        .load_checkpoint_bytes(&bytes)
        .map_err(|e| Error::Config(format!("{}: {e}", checkpoint.display())))?;
    let id = model_id.unwrap_or_else(|| {
        checkpoint
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("model")
            .to_string()
    });
    let report = evaluate(&net, &store, &ds.samples, &id)?;
    write_text(out, &report.to_csv())?;
    for e in &report.entries {
        println!("eval: {} {} = {:.4}", e.task, e.metric, e.value);
    }
    Ok(())
}

fn read_metrics(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| with_path(path, e))?;
    MetricsReport::from_csv(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn delta(model: &Path, baseline: &Path, out: &Path) -> Result<()> {
    let m = read_metrics(model)?;
    let b = read_metrics(baseline)?;
    let d = delta_m(&m, &b).map_err(|e| Error::Config(e.to_string()))?;
    write_text(out, &delta_csv(&m.model_id, &b.model_id, d))?;
    println!("delta: {} vs {}: {d:+.2}%", m.model_id, b.model_id);
    Ok(())
}

pub fn affinity(data_dir: &Path, config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let ds = Dataset::open(data_dir)?;
    if ds.is_empty() {
        return Err(Error::Config(format!("dataset {} holds no samples", data_dir.display())));
    }
    let rows = dataset_curve(&ds.samples, &cfg.affinity_tasks, &cfg.affinity)?;
    write_text(out, &curve_csv(&rows))?;
    println!("affinity: {} rows over {} samples", rows.len(), ds.len());
    Ok(())
}

pub fn gradcheck(config: &Path, eps: f64, coords_per_param: usize, fault: Option<f64>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let opts = GradCheckOptions {
        eps,
        coords_per_param: Some(coords_per_param),
        seed: cfg.model_seed,
        weight_grad_fault: fault,
        prefixes: None,
    };
    let results = run_suite(&cfg.model, &opts)?;
    println!("{:<20} {:>13} {:>8} {:>8}  status", "block", "max_rel_error", "coords", "reduced");
    let mut failed = Vec::new();
    for r in &results {
        let ok = r.report.max_rel_error <= GRADCHECK_TOL;
        if !ok {
            failed.push(r.name);
        }
        println!(
            "{:<20} {:>13.3e} {:>8} {:>8}  {}",
            r.name,
            r.report.max_rel_error,
            r.report.coords_checked,
            r.report.coords_reduced,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed.is_empty() {
        println!("gradcheck: all {} checks within {GRADCHECK_TOL:e}", results.len());
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check above {GRADCHECK_TOL:e} for: {}",
            failed.join(", ")
        )))
    }
}
