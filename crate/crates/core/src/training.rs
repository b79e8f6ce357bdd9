//! Deeply supervised multi-task losses and the optimization loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{normalize_guarded, Graph, Var};
use crate::model::{ModelConfig, ModelOutputs, MtiNet, Scale};
use crate::params::ParamStore;
use crate::synth::SceneSample;
use crate::task::TaskKind;
use crate::tensor::{Shape, Tensor};

pub const IGNORE_INDEX: i64 = -1;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub total_steps: usize,
    pub poly_power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub log_every: usize,
    /// Weight of the positive class in the binary cross-entropy.
    pub w_pos: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            total_steps: 200,
            poly_power: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            seed: 0,
            log_every: 10,
            w_pos: 0.95,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr {} must be positive", self.base_lr));
        }
        if self.total_steps == 0 {
            return fail("total_steps must be at least 1".into());
        }
        if !(self.poly_power >= 0.0 && self.poly_power.is_finite()) {
            return fail(format!("poly_power {} must be non-negative", self.poly_power));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} {b} must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return fail(format!("eps {} must be positive", self.eps));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return fail("batch_size and log_every must be at least 1".into());
        }
        if !(self.w_pos > 0.0 && self.w_pos < 1.0) {
            return fail(format!("w_pos {} must lie in (0, 1)", self.w_pos));
        }
        Ok(())
    }
}

/// `base_lr * (1 - step / total_steps)^poly_power`.
pub fn poly_lr(step: usize, cfg: &OptimConfig) -> f64 {
    let frac = step.min(cfg.total_steps) as f64 / cfg.total_steps as f64;
    cfg.base_lr * (1.0 - frac).powf(cfg.poly_power)
}

/// Ground truth for one task over a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// Class indices laid out `[n, h, w]`.
    Labels { shape: Shape, labels: Vec<i64> },
    Dense(Tensor),
}

impl Target {
    pub fn shape(&self) -> Shape {
        match self {
            Target::Labels { shape, .. } => *shape,
            Target::Dense(t) => t.shape(),
        }
    }
}

/// The synthetic label channel matching `kind`, as a single-image target.
pub fn sample_target(sample: &SceneSample, kind: TaskKind) -> Result<Target> {
    Ok(match kind {
        TaskKind::Categorical(k) => {
            if k != sample.num_classes {
                return Err(Error::Config(format!(
                    "model expects {k} classes, data has {}",
                    sample.num_classes
                )));
            }
            Target::Labels {
                shape: Shape::new(1, 1, sample.height, sample.width),
                labels: sample.seg_labels(),
            }
        }
        TaskKind::Regression => Target::Dense(sample.depth_tensor()),
        TaskKind::Binary => Target::Dense(sample.edge_tensor()),
        TaskKind::VectorField => Target::Dense(sample.normals_tensor()),
    })
}

/// Input images and per-task targets of a batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub image: Tensor,
    pub targets: Vec<Target>,
}

pub fn make_batch(cfg: &ModelConfig, samples: &[&SceneSample]) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let images: Vec<Tensor> = samples.iter().map(|s| s.image_tensor()).collect();
    let image = Tensor::stack_batch(&images)?;
    let mut targets = Vec::with_capacity(cfg.tasks.len());
    for task in &cfg.tasks {
        let per: Vec<Target> = samples
            .iter()
            .map(|s| sample_target(s, task.kind))
            .collect::<Result<_>>()?;
        targets.push(match &per[0] {
            Target::Labels { shape, .. } => Target::Labels {
                shape: Shape::new(per.len(), 1, shape.h, shape.w),
                labels: per
                    .iter()
                    .flat_map(|t| match t {
                        Target::Labels { labels, .. } => labels.clone(),
                        Target::Dense(_) => unreachable!("same kind for every sample"),
                    })
                    .collect(),
            },
            Target::Dense(_) => {
                let ts: Vec<Tensor> = per
                    .into_iter()
                    .map(|t| match t {
                        Target::Dense(t) => t,
                        Target::Labels { .. } => unreachable!("same kind for every sample"),
                    })
                    .collect();
                Target::Dense(Tensor::stack_batch(&ts)?)
            }
        });
    }
    Ok(Batch { image, targets })
}

/// Ground truth at `1/factor` resolution. Labels and binary maps take the
/// pixel at offset `factor / 2` inside each block, regression targets take
/// the block mean, and vector fields take the block mean rescaled to unit
/// length.
pub fn downsample_target(t: &Target, kind: TaskKind, factor: usize) -> Result<Target> {
    let s = t.shape();
    if factor == 0 || !s.h.is_multiple_of(factor) || !s.w.is_multiple_of(factor) {
        return Err(Error::contract(format!("cannot downsample {s} by {factor}")));
    }
    if factor == 1 {
        return Ok(t.clone());
    }
    let (oh, ow) = (s.h / factor, s.w / factor);
    let out_shape = s.with_spatial(oh, ow);
    let pick = |y: usize, x: usize| (y * factor + factor / 2) * s.w + x * factor + factor / 2;
    match (t, kind) {
        (Target::Labels { labels, .. }, _) => {
            let mut out = Vec::with_capacity(s.n * oh * ow);
            for n in 0..s.n {
                for y in 0..oh {
                    for x in 0..ow {
                        out.push(labels[n * s.plane() + pick(y, x)]);
                    }
                }
            }
            Ok(Target::Labels {
                shape: out_shape,
                labels: out,
            })
        }
        (Target::Dense(src), TaskKind::Binary) => {
            let mut out = Tensor::zeros(out_shape);
            for n in 0..s.n {
                for c in 0..s.c {
                    let plane = src.plane(n, c);
                    let dst = out.plane_mut(n, c);
                    for y in 0..oh {
                        for x in 0..ow {
                            dst[y * ow + x] = plane[pick(y, x)];
                        }
                    }
                }
            }
            Ok(Target::Dense(out))
        }
        (Target::Dense(src), _) => {
            let mut out = Tensor::zeros(out_shape);
            let area = (factor * factor) as f64;
            for n in 0..s.n {
                for c in 0..s.c {
                    let plane = src.plane(n, c);
                    let dst = out.plane_mut(n, c);
                    for y in 0..s.h {
                        for x in 0..s.w {
                            dst[(y / factor) * ow + x / factor] += plane[y * s.w + x];
                        }
                    }
                    dst.iter_mut().for_each(|v| *v /= area);
                }
            }
            if kind == TaskKind::VectorField {
                let p = oh * ow;
                let data = out.data_mut();
                for n in 0..s.n {
                    for i in 0..p {
                        let idx = [0, 1, 2].map(|c| (n * 3 + c) * p + i);
                        let (u, _) = normalize_guarded(idx.map(|j| data[j]));
                        for (j, v) in idx.into_iter().zip(u) {
                            data[j] = v;
                        }
                    }
                }
            }
            Ok(Target::Dense(out))
        }
    }
}

/// The loss matching `kind`: cross-entropy, L1, weighted BCE or normal L1.
pub fn task_loss(g: &mut Graph, pred: Var, target: &Target, kind: TaskKind, w_pos: f64) -> Result<Var> {
    let ps = g.shape(pred);
    let ts = target.shape();
    if (ps.n, ps.h, ps.w) != (ts.n, ts.h, ts.w) {
        return Err(Error::contract(format!("prediction {ps} does not match target {ts}")));
    }
    match (kind, target) {
        (TaskKind::Categorical(_), Target::Labels { labels, .. }) => g.cross_entropy(pred, labels, IGNORE_INDEX),
        (TaskKind::Regression, Target::Dense(t)) => g.l1(pred, t, None),
        (TaskKind::Binary, Target::Dense(t)) => g.weighted_bce(pred, t, w_pos),
        (TaskKind::VectorField, Target::Dense(t)) => g.normal_l1(pred, t),
        _ => Err(Error::contract(format!("target type does not match task kind {kind:?}"))),
    }
}

/// The scalar objective and its unweighted parts.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub final_terms: BTreeMap<usize, Var>,
    pub initial_terms: BTreeMap<(usize, Scale), Var>,
}

/// Weighted sum of the final-prediction losses of target tasks and the
/// initial-prediction losses of every task at every scale. Tasks with zero
/// weight are evaluated but left out of the total.
pub fn total_loss(
    g: &mut Graph,
    cfg: &ModelConfig,
    outputs: &ModelOutputs,
    targets: &[Target],
    w_pos: f64,
) -> Result<LossTerms> {
    if targets.len() != cfg.tasks.len() {
        return Err(Error::contract(format!(
            "{} targets for {} tasks",
            targets.len(),
            cfg.tasks.len()
        )));
    }
    let mut weighted = Vec::new();
    let mut final_terms = BTreeMap::new();
    for (k, task) in cfg.target_tasks() {
        let pred = *outputs
            .final_predictions
            .get(&k)
            .ok_or_else(|| Error::contract(format!("missing final prediction for {}", task.name)))?;
        let l = task_loss(g, pred, &targets[k], task.kind, w_pos)?;
        final_terms.insert(k, l);
        if task.loss_weight > 0.0 {
            weighted.push(g.scale(l, task.loss_weight));
        }
    }
    let mut initial_terms = BTreeMap::new();
    for &s in &cfg.scales {
        for (k, task) in cfg.tasks.iter().enumerate() {
            let pred = *outputs
                .initial_predictions
                .get(&(k, s))
                .ok_or_else(|| Error::contract(format!("missing initial prediction for {} at {s}", task.name)))?;
            let t = downsample_target(&targets[k], task.kind, s.factor())?;
            let l = task_loss(g, pred, &t, task.kind, w_pos)?;
            initial_terms.insert((k, s), l);
            if task.loss_weight > 0.0 {
                weighted.push(g.scale(l, task.loss_weight));
            }
        }
    }
    let total = if weighted.is_empty() {
        let zero = g.input(Tensor::scalar(0.0));
        g.scale(zero, 1.0)
    } else {
        g.add_n(&weighted)?
    };
    Ok(LossTerms {
        total,
        final_terms,
        initial_terms,
    })
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &OptimConfig) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.numel()]).collect::<Vec<_>>();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gi = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    /// One per target task, in task order.
    pub final_losses: Vec<f64>,
    /// Task-major, then scale finest first.
    pub initial_losses: Vec<f64>,
}

pub fn log_header(cfg: &ModelConfig) -> String {
    let mut cols = vec!["step".to_string(), "lr".into(), "total_loss".into()];
    for t in &cfg.tasks {
        if t.is_target() {
            cols.push(format!("{}_final", t.name));
        }
        for s in &cfg.scales {
            cols.push(format!("{}_{}", t.name, s.label()));
        }
    }
    cols.join(",")
}

impl LogRow {
    /// Columns in the order of [`log_header`].
    pub fn to_csv(&self, cfg: &ModelConfig) -> String {
        let mut out = format!("{},{},{}", self.step, self.lr, self.total);
        let mut finals = self.final_losses.iter();
        let mut initials = self.initial_losses.chunks(cfg.scales.len());
        for t in &cfg.tasks {
            if t.is_target() {
                let _ = write!(out, ",{}", finals.next().expect("one per target"));
            }
            for v in initials.next().expect("one chunk per task") {
                let _ = write!(out, ",{v}");
            }
        }
        out
    }
}

/// Loss values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub final_losses: Vec<f64>,
    pub initial_losses: Vec<f64>,
}

fn read_losses(g: &Graph, cfg: &ModelConfig, terms: &LossTerms) -> LossValues {
    let mut initial = Vec::new();
    for k in 0..cfg.tasks.len() {
        for &s in &cfg.scales {
            initial.push(g.value(terms.initial_terms[&(k, s)]).item());
        }
    }
    LossValues {
        total: g.value(terms.total).item(),
        final_losses: terms.final_terms.values().map(|v| g.value(*v).item()).collect(),
        initial_losses: initial,
    }
}

/// Forward pass and loss for a batch, leaving the graph ready for backward.
pub fn forward_loss(
    g: &mut Graph,
    net: &MtiNet,
    store: &ParamStore,
    batch: &Batch,
    w_pos: f64,
) -> Result<LossTerms> {
    let img = g.input(batch.image.clone());
    let outputs = net.forward(g, store, img)?;
    total_loss(g, net.config(), &outputs, &batch.targets, w_pos)
}

/// Mean total loss over `samples`, evaluated in batches of `batch_size`.
pub fn dataset_loss(net: &MtiNet, store: &ParamStore, samples: &[SceneSample], optim: &OptimConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Invalid("dataset is empty".into()));
    }
    let mut sum = 0.0;
    for chunk in samples.chunks(optim.batch_size) {
        let refs: Vec<&SceneSample> = chunk.iter().collect();
        let batch = make_batch(net.config(), &refs)?;
        let mut g = Graph::new();
        let terms = forward_loss(&mut g, net, store, &batch, optim.w_pos)?;
        sum += g.value(terms.total).item() * chunk.len() as f64;
    }
    Ok(sum / samples.len() as f64)
}

/// Visits sample indices in a fresh seeded permutation each epoch.
struct BatchOrder {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchOrder {
    fn new(len: usize, seed: u64) -> Self {
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..len).collect(),
            cursor: len,
        };
        s.refill();
        s
    }

    fn refill(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.refill();
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Runs `optim.total_steps` Adam steps over `samples`, writing the CSV log
/// to `log` as it goes. Rows are written every `log_every` steps and at the
/// last step. A non-finite loss stops training with a numeric error after
/// the offending row is flushed.
pub fn train(
    net: &MtiNet,
    store: &mut ParamStore,
    samples: &[SceneSample],
    optim: &OptimConfig,
    log: &mut dyn Write,
) -> Result<Vec<LogRow>> {
    optim.validate()?;
    if samples.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let cfg = net.config();
    writeln!(log, "{}", log_header(cfg))?;
    let mut adam = Adam::new(store, optim);
    let mut order = BatchOrder::new(samples.len(), optim.seed);
    let mut rows = Vec::new();
    for step in 0..optim.total_steps {
        let idx = order.next_batch(optim.batch_size);
        let refs: Vec<&SceneSample> = idx.iter().map(|&i| &samples[i]).collect();
        let batch = make_batch(cfg, &refs)?;
        let lr = poly_lr(step, optim);

        let mut g = Graph::new();
        let terms = forward_loss(&mut g, net, store, &batch, optim.w_pos)?;
        let values = read_losses(&g, cfg, &terms);
        let row = LogRow {
            step,
            lr,
            total: values.total,
            final_losses: values.final_losses,
            initial_losses: values.initial_losses,
        };
        let finite = row.total.is_finite();
        if step % optim.log_every == 0 || step + 1 == optim.total_steps || !finite {
            writeln!(log, "{}", row.to_csv(cfg))?;
            rows.push(row);
        }
        if !finite {
            log.flush()?;
            return Err(Error::Numeric(format!("loss became {} at step {step}", values.total)));
        }
        store.zero_grad();
        g.backward_into(terms.total, store)?;
        adam.step(store, lr);
    }
    log.flush()?;
    Ok(rows)
}
