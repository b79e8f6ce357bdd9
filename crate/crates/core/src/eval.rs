//! Task metrics, the multi-task score and their CSV reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::{normalize_guarded, Graph};
use crate::model::MtiNet;
use crate::params::ParamStore;
use crate::synth::SceneSample;
use crate::task::{Direction, TaskKind, TaskSpec};
use crate::tensor::Tensor;

/// Per-class intersection and union counts accumulated over many images.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    classes: usize,
    ignore_index: i64,
    intersection: Vec<u64>,
    union: Vec<u64>,
    counted: u64,
}

impl Confusion {
    pub fn new(classes: usize, ignore_index: i64) -> Self {
        Self {
            classes,
            ignore_index,
            intersection: vec![0; classes],
            union: vec![0; classes],
            counted: 0,
        }
    }

    pub fn add(&mut self, pred: &[i64], gt: &[i64]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::contract(format!("miou: {} predictions for {} labels", pred.len(), gt.len())));
        }
        let k = self.classes as i64;
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if g == self.ignore_index {
                continue;
            }
            if !(0..k).contains(&g) || !(0..k).contains(&p) {
                return Err(Error::Invalid(format!("label pair ({p}, {g}) at pixel {i} outside [0, {k})")));
            }
            let (p, g) = (p as usize, g as usize);
            if p == g {
                self.intersection[g] += 1;
                self.union[g] += 1;
            } else {
                self.union[g] += 1;
                self.union[p] += 1;
            }
            self.counted += 1;
        }
        Ok(())
    }

    /// Mean IoU over classes with a non-empty union.
    pub fn miou(&self) -> Result<f64> {
        if self.counted == 0 {
            return Err(Error::Invalid("miou is undefined when every pixel is ignored".into()));
        }
        let (sum, n) = self
            .intersection
            .iter()
            .zip(&self.union)
            .filter(|(_, &u)| u > 0)
            .fold((0.0, 0usize), |(s, n), (&i, &u)| (s + i as f64 / u as f64, n + 1));
        Ok(sum / n as f64)
    }
}

pub fn miou(pred: &[i64], gt: &[i64], classes: usize, ignore_index: i64) -> Result<f64> {
    let mut c = Confusion::new(classes, ignore_index);
    c.add(pred, gt)?;
    c.miou()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SquaredError {
    sum: f64,
    count: u64,
}

impl SquaredError {
    pub fn add(&mut self, pred: &[f64], gt: &[f64], mask: Option<&[bool]>) -> Result<()> {
        if pred.len() != gt.len() || mask.is_some_and(|m| m.len() != gt.len()) {
            return Err(Error::contract("rmse: prediction, target and mask lengths differ"));
        }
        for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
            if mask.is_none_or(|m| m[i]) {
                self.sum += (p - g).powi(2);
                self.count += 1;
            }
        }
        Ok(())
    }

    pub fn rmse(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::Invalid("rmse over an empty mask".into()));
        }
        Ok((self.sum / self.count as f64).sqrt())
    }
}

pub fn rmse(pred: &[f64], gt: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    let mut acc = SquaredError::default();
    acc.add(pred, gt, mask)?;
    acc.rmse()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AngleError {
    sum_deg: f64,
    count: u64,
}

impl AngleError {
    /// `pred` and `gt` are `[n, 3, h, w]`.
    pub fn add(&mut self, pred: &Tensor, gt: &Tensor) -> Result<()> {
        let s = pred.shape();
        if s != gt.shape() || s.c != 3 {
            return Err(Error::contract(format!(
                "mean angle error needs matching [n, 3, h, w] tensors, got {s} and {}",
                gt.shape()
            )));
        }
        let p = s.plane();
        for n in 0..s.n {
            for i in 0..p {
                let at = |t: &Tensor| [0, 1, 2].map(|c| t.data()[(n * 3 + c) * p + i]);
                let u = normalize_guarded(at(pred)).0;
                let g = at(gt);
                let cos = (u[0] * g[0] + u[1] * g[1] + u[2] * g[2]).clamp(-1.0, 1.0);
                self.sum_deg += cos.acos().to_degrees();
                self.count += 1;
            }
        }
        Ok(())
    }

    pub fn mean_degrees(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::Invalid("mean angle error over zero pixels".into()));
        }
        Ok(self.sum_deg / self.count as f64)
    }
}

pub fn mean_angle_error(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let mut acc = AngleError::default();
    acc.add(pred, gt)?;
    acc.mean_degrees()
}

/// `i / 100` for `i` in `1..=99`.
pub fn default_thresholds() -> Vec<f64> {
    (1..100).map(|i| f64::from(i) / 100.0).collect()
}

/// Dataset-level true/false positive counts at each threshold. A pixel is
/// predicted positive when its probability is at least the threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeCounts {
    thresholds: Vec<f64>,
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
}

impl EdgeCounts {
    pub fn new(thresholds: Vec<f64>) -> Self {
        let n = thresholds.len();
        Self {
            thresholds,
            tp: vec![0; n],
            fp: vec![0; n],
            fn_: vec![0; n],
        }
    }

    pub fn add_probs(&mut self, probs: &[f64], gt: &[f64]) -> Result<()> {
        if probs.len() != gt.len() {
            return Err(Error::contract("f_best: probability and label lengths differ"));
        }
        if let Some(v) = gt.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Invalid(format!("edge label {v} is not binary")));
        }
        for (&p, &g) in probs.iter().zip(gt) {
            for (t, &th) in self.thresholds.iter().enumerate() {
                match (p >= th, g == 1.0) {
                    (true, true) => self.tp[t] += 1,
                    (true, false) => self.fp[t] += 1,
                    (false, true) => self.fn_[t] += 1,
                    (false, false) => {}
                }
            }
        }
        Ok(())
    }

    pub fn add_logits(&mut self, logits: &[f64], gt: &[f64]) -> Result<()> {
        let probs: Vec<f64> = logits.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
        self.add_probs(&probs, gt)
    }

    /// F1 at each threshold; undefined precision or recall counts as 0.
    pub fn f1_per_threshold(&self) -> Vec<f64> {
        (0..self.thresholds.len())
            .map(|t| {
                let (tp, fp, fn_) = (self.tp[t] as f64, self.fp[t] as f64, self.fn_[t] as f64);
                let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
                let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
                if p + r > 0.0 {
                    2.0 * p * r / (p + r)
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn f_best(&self) -> f64 {
        self.f1_per_threshold().into_iter().fold(0.0, f64::max)
    }
}

pub fn f_best(probs: &[f64], gt: &[f64], thresholds: &[f64]) -> Result<f64> {
    let mut c = EdgeCounts::new(thresholds.to_vec());
    c.add_probs(probs, gt)?;
    Ok(c.f_best())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricEntry {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub direction: Direction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub model_id: String,
    pub entries: Vec<MetricEntry>,
}

pub const METRICS_HEADER: &str = "model_id,task,metric,value,direction";
pub const DELTA_HEADER: &str = "model_id,baseline_id,delta_m_percent";

impl MetricsReport {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, task: &TaskSpec, value: f64) {
        self.entries.push(MetricEntry {
            task: task.name.clone(),
            metric: task.kind.metric_name().to_string(),
            value,
            direction: task.direction(),
        });
    }

    pub fn get(&self, task: &str) -> Option<&MetricEntry> {
        self.entries.iter().find(|e| e.task == task)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                self.model_id,
                e.task,
                e.metric,
                e.value,
                e.direction.flag()
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(METRICS_HEADER) {
            return Err(Error::Invalid(format!("metrics CSV must start with the header {METRICS_HEADER}")));
        }
        let mut report: Option<MetricsReport> = None;
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: String| Error::Invalid(format!("metrics CSV line {}: {m}", i + 2));
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("expected 5 fields, got {}", f.len())));
            }
            let value: f64 = f[3].parse().map_err(|e| bad(format!("value {:?}: {e}", f[3])))?;
            if !value.is_finite() {
                return Err(bad(format!("value {value} is not finite")));
            }
            let flag: u8 = f[4].parse().map_err(|e| bad(format!("direction {:?}: {e}", f[4])))?;
            let r = report.get_or_insert_with(|| MetricsReport::new(f[0]));
            if r.model_id != f[0] {
                return Err(bad(format!("model id {} differs from {}", f[0], r.model_id)));
            }
            if r.get(f[1]).is_some() {
                return Err(bad(format!("task {} listed twice", f[1])));
            }
            r.entries.push(MetricEntry {
                task: f[1].to_string(),
                metric: f[2].to_string(),
                value,
                direction: Direction::from_flag(flag)?,
            });
        }
        report.ok_or_else(|| Error::Invalid("metrics CSV has no rows".into()))
    }
}

/// Average signed relative change of each task metric against the baseline,
/// in percent. Positive means the model beats the baseline.
pub fn delta_m(model: &MetricsReport, baseline: &MetricsReport) -> Result<f64> {
    if model.entries.len() != baseline.entries.len() || model.entries.is_empty() {
        return Err(Error::contract(format!(
            "task sets differ: {} tasks in {}, {} in {}",
            model.entries.len(),
            model.model_id,
            baseline.entries.len(),
            baseline.model_id
        )));
    }
    let mut sum = 0.0;
    for m in &model.entries {
        let b = baseline
            .get(&m.task)
            .ok_or_else(|| Error::contract(format!("task {} missing from baseline {}", m.task, baseline.model_id)))?;
        if b.direction != m.direction || b.metric != m.metric {
            return Err(Error::contract(format!("task {} uses different metrics or directions", m.task)));
        }
        if b.value == 0.0 {
            return Err(Error::contract(format!("baseline value for {} is zero", m.task)));
        }
        let sign = match m.direction {
            Direction::HigherBetter => 1.0,
            Direction::LowerBetter => -1.0,
        };
        sum += sign * (m.value - b.value) / b.value;
    }
    // Adding 0.0 turns a negative zero into a positive one.
    Ok(100.0 * sum / model.entries.len() as f64 + 0.0)
}

pub fn delta_csv(model_id: &str, baseline_id: &str, delta: f64) -> String {
    format!("{DELTA_HEADER}\n{model_id},{baseline_id},{delta:.2}\n")
}

enum Accumulator {
    Seg(Confusion),
    Depth(SquaredError),
    Edge(EdgeCounts),
    Normals(AngleError),
}

impl Accumulator {
    fn new(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Categorical(k) => Accumulator::Seg(Confusion::new(k, -1)),
            TaskKind::Regression => Accumulator::Depth(SquaredError::default()),
            TaskKind::Binary => Accumulator::Edge(EdgeCounts::new(default_thresholds())),
            TaskKind::VectorField => Accumulator::Normals(AngleError::default()),
        }
    }

    fn add(&mut self, pred: &Tensor, sample: &SceneSample) -> Result<()> {
        match self {
            Accumulator::Seg(c) => c.add(&argmax_channels(pred), &sample.seg_labels()),
            Accumulator::Depth(a) => a.add(pred.data(), sample.depth_tensor().data(), None),
            Accumulator::Edge(e) => e.add_logits(pred.data(), sample.edge_tensor().data()),
            Accumulator::Normals(a) => a.add(pred, &sample.normals_tensor()),
        }
    }

    fn finish(&self) -> Result<f64> {
        match self {
            Accumulator::Seg(c) => c.miou(),
            Accumulator::Depth(a) => a.rmse(),
            Accumulator::Edge(e) => Ok(e.f_best()),
            Accumulator::Normals(a) => a.mean_degrees(),
        }
    }
}

/// Per-pixel argmax over channels of an `[n, k, h, w]` tensor, laid out `[n, h, w]`.
pub fn argmax_channels(t: &Tensor) -> Vec<i64> {
    let s = t.shape();
    let p = s.plane();
    let mut out = Vec::with_capacity(s.n * p);
    for n in 0..s.n {
        for i in 0..p {
            let mut best = 0;
            for c in 1..s.c {
                if t.data()[(n * s.c + c) * p + i] > t.data()[(n * s.c + best) * p + i] {
                    best = c;
                }
            }
            out.push(best as i64);
        }
    }
    out
}

/// Metrics of every target task's final prediction over `samples`.
pub fn evaluate(net: &MtiNet, store: &ParamStore, samples: &[SceneSample], model_id: &str) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty dataset".into()));
    }
    let cfg = net.config();
    let mut accs: BTreeMap<usize, Accumulator> =
        cfg.target_tasks().map(|(k, t)| (k, Accumulator::new(t.kind))).collect();
    for sample in samples {
        let mut g = Graph::new();
        let img = g.input(sample.image_tensor());
        let out = net.forward(&mut g, store, img)?;
        for (k, acc) in accs.iter_mut() {
            let pred = g.value(out.final_predictions[k]);
            if !pred.is_finite() {
                return Err(Error::Numeric(format!("non-finite prediction for {}", cfg.tasks[*k].name)));
            }
            acc.add(pred, sample)?;
        }
    }
    let mut report = MetricsReport::new(model_id);
    for (k, acc) in &accs {
        report.push(&cfg.tasks[*k], acc.finish()?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::Role;
    use crate::tensor::Shape;

    fn report(id: &str, seg: f64, depth: f64) -> MetricsReport {
        let mut r = MetricsReport::new(id);
        r.push(&TaskSpec::new("seg", TaskKind::Categorical(5), Role::Target), seg);
        r.push(&TaskSpec::new("depth", TaskKind::Regression, Role::Target), depth);
        r
    }

    #[test]
    fn miou_examples() {
        assert_eq!(miou(&[0, 1, 2], &[0, 1, 2], 3, -1).unwrap(), 1.0);
        assert_eq!(miou(&[0, 0, 0, 0], &[0, 0, 1, 1], 2, -1).unwrap(), 0.25);
        assert!(miou(&[0, 1], &[-1, -1], 2, -1).is_err());
        assert!(miou(&[0, 3], &[0, 1], 2, -1).is_err());
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0], None).unwrap(), 0.0);
        assert_eq!(rmse(&[2.0, 3.0], &[1.0, 2.0], None).unwrap(), 1.0);
        assert_eq!(rmse(&[1.0, 3.0], &[1.0, 1.0], None).unwrap(), 2f64.sqrt());
        assert!(rmse(&[1.0], &[1.0], Some(&[false])).is_err());
    }

    #[test]
    fn angle_examples() {
        let s = Shape::new(1, 3, 1, 1);
        let gt = Tensor::from_vec(s, vec![0.0, 0.0, 1.0]).unwrap();
        let ang = |v: Vec<f64>| mean_angle_error(&Tensor::from_vec(s, v).unwrap(), &gt).unwrap();
        assert_eq!(ang(vec![0.0, 0.0, 5.0]), 0.0);
        assert!((ang(vec![1.0, 0.0, 0.0]) - 90.0).abs() < 1e-12);
        assert!((ang(vec![0.0, 0.0, -1.0]) - 180.0).abs() < 1e-12);
    }

    #[test]
    fn f_best_examples() {
        let t = default_thresholds();
        assert_eq!(t.len(), 99);
        assert_eq!(f_best(&[0.9, 0.8, 0.2, 0.1], &[1.0, 1.0, 0.0, 0.0], &t).unwrap(), 1.0);
        assert_eq!(f_best(&[0.5; 4], &[0.0; 4], &t).unwrap(), 0.0);
        assert!(f_best(&[0.5], &[0.5], &t).is_err());
    }

    #[test]
    fn delta_m_fixtures() {
        let st = report("st", 33.18, 0.667);
        let mtl = report("mtl", 32.09, 0.668);
        assert!((delta_m(&mtl, &st).unwrap() - (-1.7175)).abs() < 1e-3);
        let ours = report("ours", 35.12, 0.620);
        assert!((delta_m(&ours, &st).unwrap() - 6.4467).abs() < 1e-3);
        assert_eq!(delta_m(&st, &st).unwrap(), 0.0);
        let mut depth_only = st.clone();
        depth_only.entries.remove(0);
        let d = delta_m(&depth_only, &depth_only).unwrap();
        assert_eq!(delta_csv("a", "b", d), format!("{DELTA_HEADER}\na,b,0.00\n"));
    }

    #[test]
    fn delta_m_contract() {
        let st = report("st", 33.18, 0.667);
        let mut fewer = st.clone();
        fewer.entries.pop();
        assert!(delta_m(&fewer, &st).is_err());
        let zero = report("z", 0.0, 1.0);
        assert!(delta_m(&st, &zero).is_err());
    }

    #[test]
    fn report_csv_round_trip() {
        let r = report("m1", 0.123456789, 1.5);
        assert_eq!(MetricsReport::from_csv(&r.to_csv()).unwrap(), r);
        assert!(MetricsReport::from_csv("bad\n").is_err());
        assert!(MetricsReport::from_csv(&format!("{METRICS_HEADER}\nm,seg,miou,x,0\n")).is_err());
        assert!(MetricsReport::from_csv(&format!("{METRICS_HEADER}\n")).is_err());
    }
}
