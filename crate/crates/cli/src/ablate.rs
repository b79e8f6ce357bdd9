//! Scale and feature-propagation ablation.
//!
//! Every configuration is trained from the same seed with the same budget and
//! evaluated on the training set. The first row holds the single-task
//! baselines, one model per target task, against which every other row's
//! multi-task score is computed.

use std::path::Path;

use rayon::prelude::*;

use mti_core::config::RunConfig;
use mti_core::eval::{delta_m, evaluate, MetricsReport};
use mti_core::model::{ModelConfig, MtiNet, Scale};
use mti_core::synth::SceneSample;
use mti_core::training::{train, OptimConfig};
use mti_core::{Error, Result};

use crate::commands::{load_data, write_text};

#[derive(Clone, Debug)]
struct Run {
    /// `scales` column.
    scales: String,
    /// `fpm` column.
    fpm: &'static str,
    model: ModelConfig,
}

fn scale_list(scales: &[Scale]) -> String {
    scales.iter().map(Scale::to_string).collect::<Vec<_>>().join(";")
}

/// Multi-task rows: 1/4 alone, then 1/4 through 1/8, 1/16 and 1/32, each
/// with propagation on and off.
fn grid(base: &ModelConfig) -> Vec<Run> {
    let mut runs = Vec::new();
    for n in 1..=Scale::ALL.len() {
        let scales = Scale::ALL[..n].to_vec();
        let variants: &[(bool, &'static str)] = if n == 1 {
            &[(false, "n/a")]
        } else {
            &[(true, "on"), (false, "off")]
        };
        for &(fpm, label) in variants {
            let mut model = base.clone();
            model.scales = scales.clone();
            model.fpm_enabled = fpm;
            runs.push(Run {
                scales: scale_list(&scales),
                fpm: label,
                model,
            });
        }
    }
    runs
}

/// One single-task model per target task, on the full pyramid.
fn baselines(base: &ModelConfig) -> Vec<ModelConfig> {
    base.target_tasks()
        .map(|(_, t)| {
            let mut model = base.clone();
            model.tasks = vec![t.clone()];
            model.scales = Scale::ALL.to_vec();
            model.fpm_enabled = true;
            model
        })
        .collect()
}

fn train_and_eval(
    model: &ModelConfig,
    seed: u64,
    optim: &OptimConfig,
    samples: &[SceneSample],
    id: &str,
) -> Result<MetricsReport> {
    let (net, mut store) = MtiNet::build(model.clone(), seed)?;
    train(&net, &mut store, samples, optim, &mut std::io::sink())?;
    let report = evaluate(&net, &store, samples, id)?;
    eprintln!("ablate: finished {id}");
    Ok(report)
}

pub fn run(config: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let ds = load_data(data_dir, &cfg)?;
    let full = ModelConfig {
        scales: Scale::ALL.to_vec(),
        ..cfg.model.clone()
    };
    full.check_input(ds.config.height, ds.config.width)
        .map_err(|e| Error::Config(e.to_string()))?;

    let single = baselines(&full);
    let runs = grid(&full);
    let mut jobs: Vec<(ModelConfig, String)> = single
        .iter()
        .map(|m| (m.clone(), format!("st-{}", m.tasks[0].name)))
        .collect();
    jobs.extend(runs.iter().map(|r| (r.model.clone(), format!("mtl-{}-fpm-{}", r.scales, r.fpm))));
    let reports = jobs
        .par_iter()
        .map(|(m, id)| train_and_eval(m, cfg.model_seed, &cfg.optim, &ds.samples, id))
        .collect::<Result<Vec<_>>>()?;
    let (st_reports, mtl_reports) = reports.split_at(single.len());

    let mut st = MetricsReport::new("st");
    for r in st_reports {
        st.entries.extend(r.entries.iter().cloned());
    }
    let targets: Vec<_> = full.target_tasks().map(|(_, t)| t.clone()).collect();
    let mut csv = String::from("scales,fpm");
    for t in &targets {
        csv.push_str(&format!(",{}_{}", t.name, t.kind.metric_name()));
    }
    csv.push_str(",delta_m\n");
    let mut row = |scales: &str, fpm: &str, report: &MetricsReport, delta: f64| -> Result<()> {
        csv.push_str(&format!("{scales},{fpm}"));
        for t in &targets {
            let e = report
                .get(&t.name)
                .ok_or_else(|| Error::Config(format!("no metric for task {}", t.name)))?;
            csv.push_str(&format!(",{:.4}", e.value));
        }
        csv.push_str(&format!(",{delta:.2}\n"));
        Ok(())
    };
    row("ST", "n/a", &st, 0.0)?;
    for (r, report) in runs.iter().zip(mtl_reports) {
        row(&r.scales, r.fpm, report, delta_m(report, &st)?)?;
    }
    write_text(out, &csv)?;
    println!("ablate: {} rows written to {}", runs.len() + 1, out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use mti_core::task::default_tasks;

    #[test]
    fn grid_covers_every_scale_count() {
        let base = ModelConfig::new(default_tasks(5), 4);
        let runs = grid(&base);
        let labels: Vec<(String, &str)> = runs.iter().map(|r| (r.scales.clone(), r.fpm)).collect();
        assert_eq!(labels[0], ("1/4".to_string(), "n/a"));
        assert_eq!(labels.len(), 7);
        assert_eq!(labels[5], ("1/4;1/8;1/16;1/32".to_string(), "on"));
        assert!(runs.iter().all(|r| r.model.validate().is_ok()));
        let st = baselines(&base);
        assert_eq!(st.len(), 2);
        assert!(st.iter().all(|m| m.tasks.len() == 1 && m.validate().is_ok()));
    }
}
