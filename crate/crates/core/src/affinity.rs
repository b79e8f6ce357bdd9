//! Pixel affinities on task label maps and how well they agree across tasks.
//!
//! For a centre pixel `p` and an offset `o` from a dilated `(2r+1)²` patch,
//! the affinity bit says whether `p` and `p + d·o` are similar in a task's
//! label space. Two tasks correspond at a pixel pair when their bits agree.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::synth::SceneSample;
use crate::task::{synthetic_task, Role, TaskKind};

#[derive(Clone, Debug, PartialEq)]
pub struct AffinityConfig {
    pub kernel_radius: usize,
    pub dilations: Vec<usize>,
    /// Relative difference below which two depth values count as similar.
    pub depth_threshold: f64,
    /// Only centres whose row and column are multiples of `stride` are used.
    pub stride: usize,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        Self {
            kernel_radius: 1,
            dilations: vec![1, 2, 4, 8],
            depth_threshold: 0.10,
            stride: 1,
        }
    }
}

impl AffinityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_radius == 0 {
            return Err(Error::Config("kernel_radius must be at least 1".into()));
        }
        if self.dilations.is_empty()
            || self.dilations[0] == 0
            || self.dilations.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(format!(
                "dilations {:?} must be positive and strictly increasing",
                self.dilations
            )));
        }
        if !(self.depth_threshold > 0.0 && self.depth_threshold.is_finite()) {
            return Err(Error::Config(format!(
                "depth_threshold {} must be positive",
                self.depth_threshold
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        Ok(())
    }

    /// Patch offsets `(dy, dx)` in row-major order with the centre removed.
    pub fn offsets(&self) -> Vec<(isize, isize)> {
        let r = self.kernel_radius as isize;
        (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
            .filter(|&o| o != (0, 0))
            .collect()
    }
}

/// A single-channel label map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub enum Raster {
    Labels { h: usize, w: usize, data: Vec<i64> },
    Real { h: usize, w: usize, data: Vec<f64> },
}

impl Raster {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Raster::Labels { h, w, .. } | Raster::Real { h, w, .. } => (*h, *w),
        }
    }
}

/// Similarity and validity bits laid out `[h, w, offsets]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityBits {
    pub h: usize,
    pub w: usize,
    pub offsets: usize,
    pub similar: Vec<bool>,
    pub valid: Vec<bool>,
}

impl AffinityBits {
    pub fn index(&self, y: usize, x: usize, o: usize) -> usize {
        (y * self.w + x) * self.offsets + o
    }
}

fn relative_close(a: f64, b: f64, tau: f64) -> bool {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8) < tau
}

/// Affinity bits of `raster` interpreted as a label map of `kind` at dilation `d`.
pub fn affinity_bits(raster: &Raster, kind: TaskKind, cfg: &AffinityConfig, d: usize) -> Result<AffinityBits> {
    cfg.validate()?;
    if d == 0 {
        return Err(Error::Config("dilation must be at least 1".into()));
    }
    let (h, w) = raster.dims();
    match (kind, raster) {
        (TaskKind::Categorical(_), Raster::Labels { data, .. }) => {
            check_len(data.len(), h, w)?;
            Ok(compute(h, w, cfg, d, |p, q| data[p] == data[q]))
        }
        (TaskKind::Binary, Raster::Labels { data, .. }) => {
            check_len(data.len(), h, w)?;
            if let Some(v) = data.iter().find(|&&v| v != 0 && v != 1) {
                return Err(Error::Invalid(format!("binary raster holds {v}")));
            }
            Ok(compute(h, w, cfg, d, |p, q| data[p] == data[q]))
        }
        (TaskKind::Regression, Raster::Real { data, .. }) => {
            check_len(data.len(), h, w)?;
            if let Some(v) = data.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::Invalid(format!("depth raster holds non-positive value {v}")));
            }
            let tau = cfg.depth_threshold;
            Ok(compute(h, w, cfg, d, |p, q| relative_close(data[p], data[q], tau)))
        }
        (TaskKind::VectorField, _) => Err(Error::Config("affinities are not defined for vector fields".into())),
        _ => Err(Error::contract(format!("raster type does not match task kind {kind:?}"))),
    }
}

fn check_len(len: usize, h: usize, w: usize) -> Result<()> {
    if len != h * w || len == 0 {
        return Err(Error::contract(format!("raster of {len} values for {h}x{w}")));
    }
    Ok(())
}

fn compute(h: usize, w: usize, cfg: &AffinityConfig, d: usize, same: impl Fn(usize, usize) -> bool) -> AffinityBits {
    let offsets = cfg.offsets();
    let np = offsets.len();
    let mut bits = AffinityBits {
        h,
        w,
        offsets: np,
        similar: vec![false; h * w * np],
        valid: vec![false; h * w * np],
    };
    for (o, &(dy, dx)) in offsets.iter().enumerate() {
        let (dy, dx) = (dy * d as isize, dx * d as isize);
        // Centres whose neighbour stays inside the raster.
        let y_lo = (-dy).max(0) as usize;
        let y_hi = (h as isize - dy.max(0)).max(0) as usize;
        let x_lo = (-dx).max(0) as usize;
        let x_hi = (w as isize - dx.max(0)).max(0) as usize;
        let first = |lo: usize| lo.div_ceil(cfg.stride) * cfg.stride;
        for y in (first(y_lo)..y_hi).step_by(cfg.stride) {
            let qy = (y as isize + dy) as usize;
            for x in (first(x_lo)..x_hi).step_by(cfg.stride) {
                let qx = (x as isize + dx) as usize;
                let i = (y * w + x) * np + o;
                bits.valid[i] = true;
                bits.similar[i] = same(y * w + x, qy * w + qx);
            }
        }
    }
    bits
}

/// Agreement rate of two affinity maps over jointly valid pairs, with the
/// number of such pairs.
pub fn correspondence(a: &AffinityBits, b: &AffinityBits) -> Result<(f64, usize)> {
    if (a.h, a.w, a.offsets) != (b.h, b.w, b.offsets) {
        return Err(Error::contract(format!(
            "affinity maps {}x{}x{} and {}x{}x{} differ in shape",
            a.h, a.w, a.offsets, b.h, b.w, b.offsets
        )));
    }
    let mut valid = 0usize;
    let mut agree = 0usize;
    for i in 0..a.similar.len() {
        if a.valid[i] && b.valid[i] {
            valid += 1;
            agree += usize::from(a.similar[i] == b.similar[i]);
        }
    }
    if valid == 0 {
        return Err(Error::Invalid("no jointly valid pixel pairs".into()));
    }
    Ok((agree as f64 / valid as f64, valid))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub task_a: String,
    pub task_b: String,
    pub dilation: usize,
    pub correspondence: f64,
    pub valid_pairs: usize,
}

/// One row per unordered task pair and dilation, pairs in lexicographic
/// order and dilations ascending.
pub fn affinity_curve(rasters: &BTreeMap<String, (TaskKind, Raster)>, cfg: &AffinityConfig) -> Result<Vec<CurveRow>> {
    cfg.validate()?;
    if rasters.len() < 2 {
        return Err(Error::Config(format!(
            "the affinity curve needs at least two tasks, got {}",
            rasters.len()
        )));
    }
    let names: Vec<&String> = rasters.keys().collect();
    let mut rows = Vec::new();
    for &d in &cfg.dilations {
        let bits = rasters
            .values()
            .map(|(kind, r)| affinity_bits(r, *kind, cfg, d))
            .collect::<Result<Vec<_>>>()?;
        for i in 0..names.len() {
            for j in i + 1..names.len() {
                let (c, n) = correspondence(&bits[i], &bits[j])?;
                rows.push(CurveRow {
                    task_a: names[i].clone(),
                    task_b: names[j].clone(),
                    dilation: d,
                    correspondence: c,
                    valid_pairs: n,
                });
            }
        }
    }
    rows.sort_by(|a, b| (&a.task_a, &a.task_b, a.dilation).cmp(&(&b.task_a, &b.task_b, b.dilation)));
    Ok(rows)
}

/// The label maps of the named tasks of a synthetic sample.
pub fn sample_rasters(sample: &SceneSample, tasks: &[String]) -> Result<BTreeMap<String, (TaskKind, Raster)>> {
    let (h, w) = (sample.height, sample.width);
    let mut out = BTreeMap::new();
    for name in tasks {
        let kind = synthetic_task(name, sample.num_classes, Role::Target)?.kind;
        let raster = match kind {
            TaskKind::Categorical(_) => Raster::Labels { h, w, data: sample.seg_labels() },
            TaskKind::Binary => Raster::Labels {
                h,
                w,
                data: sample.edge.iter().map(|&e| i64::from(e)).collect(),
            },
            TaskKind::Regression => Raster::Real {
                h,
                w,
                data: sample.depth.iter().map(|&v| f64::from(v)).collect(),
            },
            TaskKind::VectorField => {
                return Err(Error::Config(format!("task {name}: affinities are not defined for vector fields")))
            }
        };
        if out.insert(name.clone(), (kind, raster)).is_some() {
            return Err(Error::Config(format!("task {name} listed twice")));
        }
    }
    Ok(out)
}

/// Per-sample curves averaged over a dataset. Correspondence is the mean of
/// the per-sample rates; `valid_pairs` is the total count.
pub fn dataset_curve(samples: &[SceneSample], tasks: &[String], cfg: &AffinityConfig) -> Result<Vec<CurveRow>> {
    if samples.is_empty() {
        return Err(Error::Invalid("dataset is empty".into()));
    }
    let mut acc: Option<Vec<CurveRow>> = None;
    for s in samples {
        let rows = affinity_curve(&sample_rasters(s, tasks)?, cfg)?;
        match &mut acc {
            None => acc = Some(rows),
            Some(total) => {
                for (t, r) in total.iter_mut().zip(rows) {
                    t.correspondence += r.correspondence;
                    t.valid_pairs += r.valid_pairs;
                }
            }
        }
    }
    let mut rows = acc.expect("non-empty");
    for r in &mut rows {
        r.correspondence /= samples.len() as f64;
    }
    Ok(rows)
}

pub const CURVE_HEADER: &str = "task_a,task_b,dilation,correspondence,valid_pairs";

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.task_a, r.task_b, r.dilation, r.correspondence, r.valid_pairs
        );
    }
    out
}
