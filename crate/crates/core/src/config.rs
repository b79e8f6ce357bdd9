//! Run configuration files.
//!
//! The format is line based. Blank lines and anything after `#` are
//! ignored. A line `[section]` opens one of the sections `model`, `optim`,
//! `data` or `affinity`; every other line is `key = value` inside the
//! current section. Lists are comma separated. Unknown sections, unknown
//! keys and repeated keys are errors, and keys left out keep their
//! defaults.
//!
//! ```text
//! [model]
//! scales = 4, 8, 16, 32
//! targets = seg, depth
//! auxiliary = edge, normals
//! loss_weights = seg:1, depth:1
//!
//! [optim]
//! base_lr = 0.001
//! total_steps = 200
//! ```

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use crate::affinity::AffinityConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Scale, DEFAULT_CHANNELS};
use crate::synth::GenConfig;
use crate::task::{synthetic_task, Role, TaskKind, TaskSpec};
use crate::training::OptimConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Seed of the parameter initialization.
    pub model_seed: u64,
    pub optim: OptimConfig,
    pub data: GenConfig,
    pub affinity: AffinityConfig,
    pub affinity_tasks: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = GenConfig::default();
        Self {
            model: ModelConfig::new(crate::task::default_tasks(data.num_classes), 4),
            model_seed: 0,
            optim: OptimConfig::default(),
            data,
            affinity: AffinityConfig::default(),
            affinity_tasks: vec!["seg".into(), "depth".into(), "edge".into()],
        }
    }
}

/// Model keys are collected first because task kinds depend on the class
/// count from the data section.
#[derive(Default)]
struct ModelKeys {
    scales: Option<Vec<usize>>,
    channels: Option<Vec<usize>>,
    targets: Option<Vec<String>>,
    auxiliary: Option<Vec<String>>,
    loss_weights: Vec<(String, f64)>,
    fpm: Option<bool>,
    distill: Option<bool>,
    input_channels: Option<usize>,
    attention_kernel: Option<usize>,
    se_reduction: Option<usize>,
}

fn parse<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("line {line}: {key} = {v:?}: {e}")))
}

fn parse_list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(line, key, s.trim())).collect()
}

fn parse_names(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut mk = ModelKeys::default();
        let mut section: Option<String> = None;
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                if !["model", "optim", "data", "affinity"].contains(&name) {
                    return Err(Error::Config(format!("line {line}: unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {line}: expected key = value, got {content:?}")))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| Error::Config(format!("line {line}: key {key} appears before any section")))?;
            if !seen.insert(format!("{sec}.{key}")) {
                return Err(Error::Config(format!("line {line}: [{sec}] {key} is set twice")));
            }
            let unknown = || Error::Config(format!("line {line}: unknown key {key} in [{sec}]"));
            match sec {
                "model" => match key {
                    "scales" => mk.scales = Some(parse_list(line, key, value)?),
                    "channels" => mk.channels = Some(parse_list(line, key, value)?),
                    "targets" => mk.targets = Some(parse_names(value)),
                    "auxiliary" => mk.auxiliary = Some(parse_names(value)),
                    "loss_weights" => {
                        for item in parse_names(value) {
                            let (t, w) = item.split_once(':').ok_or_else(|| {
                                Error::Config(format!("line {line}: loss weight {item:?} is not task:weight"))
                            })?;
                            mk.loss_weights.push((t.trim().to_string(), parse(line, key, w.trim())?));
                        }
                    }
                    "fpm" => mk.fpm = Some(parse(line, key, value)?),
                    "distill" => mk.distill = Some(parse(line, key, value)?),
                    "input_channels" => mk.input_channels = Some(parse(line, key, value)?),
                    "attention_kernel" => mk.attention_kernel = Some(parse(line, key, value)?),
                    "se_reduction" => mk.se_reduction = Some(parse(line, key, value)?),
                    "seed" => cfg.model_seed = parse(line, key, value)?,
                    _ => return Err(unknown()),
                },
                "optim" => {
                    let o = &mut cfg.optim;
                    match key {
                        "base_lr" => o.base_lr = parse(line, key, value)?,
                        "total_steps" => o.total_steps = parse(line, key, value)?,
                        "poly_power" => o.poly_power = parse(line, key, value)?,
                        "beta1" => o.beta1 = parse(line, key, value)?,
                        "beta2" => o.beta2 = parse(line, key, value)?,
                        "eps" => o.eps = parse(line, key, value)?,
                        "batch_size" => o.batch_size = parse(line, key, value)?,
                        "seed" => o.seed = parse(line, key, value)?,
                        "log_every" => o.log_every = parse(line, key, value)?,
                        "w_pos" => o.w_pos = parse(line, key, value)?,
                        _ => return Err(unknown()),
                    }
                }
                "data" => {
                    let d = &mut cfg.data;
                    match key {
                        "height" => d.height = parse(line, key, value)?,
                        "width" => d.width = parse(line, key, value)?,
                        "num_shapes" => d.num_shapes = parse(line, key, value)?,
                        "num_classes" => d.num_classes = parse(line, key, value)?,
                        "seed" => d.seed = parse(line, key, value)?,
                        "noise_std" => d.noise_std = parse(line, key, value)?,
                        _ => return Err(unknown()),
                    }
                }
                _ => {
                    let a = &mut cfg.affinity;
                    match key {
                        "kernel_radius" => a.kernel_radius = parse(line, key, value)?,
                        "dilations" => a.dilations = parse_list(line, key, value)?,
                        "depth_threshold" => a.depth_threshold = parse(line, key, value)?,
                        "stride" => a.stride = parse(line, key, value)?,
                        "tasks" => cfg.affinity_tasks = parse_names(value),
                        _ => return Err(unknown()),
                    }
                }
            }
        }
        cfg.model = build_model(&mk, cfg.data.num_classes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every section and that the data resolution suits the model.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.data.validate()?;
        self.affinity.validate()?;
        self.model
            .check_input(self.data.height, self.data.width)
            .map_err(|e| Error::Config(e.to_string()))?;
        for t in &self.affinity_tasks {
            if synthetic_task(t, self.data.num_classes, Role::Target)?.kind == TaskKind::VectorField {
                return Err(Error::Config(format!(
                    "affinity task {t}: affinities are not defined for vector fields"
                )));
            }
        }
        Ok(())
    }
}

fn build_model(mk: &ModelKeys, num_classes: usize) -> Result<ModelConfig> {
    let targets = mk.targets.clone().unwrap_or_else(|| vec!["seg".into(), "depth".into()]);
    let auxiliary = mk.auxiliary.clone().unwrap_or_else(|| vec!["edge".into(), "normals".into()]);
    let mut tasks: Vec<TaskSpec> = Vec::new();
    for (names, role) in [(&targets, Role::Target), (&auxiliary, Role::Auxiliary)] {
        for n in names {
            tasks.push(synthetic_task(n, num_classes, role)?);
        }
    }
    for (name, w) in &mk.loss_weights {
        let t = tasks
            .iter_mut()
            .find(|t| &t.name == name)
            .ok_or_else(|| Error::Config(format!("loss weight for unknown task {name}")))?;
        t.loss_weight = *w;
    }
    let mut cfg = ModelConfig::new(tasks, 4);
    if let Some(factors) = &mk.scales {
        cfg.scales = factors.iter().map(|&f| Scale::from_factor(f)).collect::<Result<_>>()?;
    }
    if let Some(ch) = &mk.channels {
        if ch.len() != DEFAULT_CHANNELS.len() {
            return Err(Error::Config(format!(
                "channels needs {} widths (one per scale 1/4 .. 1/32), got {}",
                DEFAULT_CHANNELS.len(),
                ch.len()
            )));
        }
        cfg.channels.copy_from_slice(ch);
    }
    cfg.fpm_enabled = mk.fpm.unwrap_or(cfg.fpm_enabled);
    cfg.distill_enabled = mk.distill.unwrap_or(cfg.distill_enabled);
    cfg.input_channels = mk.input_channels.unwrap_or(cfg.input_channels);
    cfg.attention_kernel = mk.attention_kernel.unwrap_or(cfg.attention_kernel);
    cfg.se_reduction = mk.se_reduction.unwrap_or(cfg.se_reduction);
    Ok(cfg)
}
