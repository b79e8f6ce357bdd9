//! Gradient checks for every differentiable building block and for the
//! end-to-end training objective.
//!
//! Each check registers its inputs as parameters so input gradients are
//! verified along with weight gradients. Scalar outputs are formed with a
//! random weighting rather than a plain sum, which would make some true
//! gradients vanish (a normalized map sums to a constant, for example).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Conv, GroupNorm, ResidualBlock, SeGate, SpatialAttention, TaskHead};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::model::{Distillation, FeaturePropagation, Harmonization, ModelConfig, MtiNet, Scale};
use crate::params::{fnv1a, ParamStore};
use crate::synth::{generate_sample, GenConfig};
use crate::task::TaskKind;
use crate::tensor::{Shape, Tensor};
use crate::training::{make_batch, total_loss, Target};

use super::{grad_check, GradCheckOptions, GradCheckReport};

/// Names of the checks run by [`run_suite`], in order.
pub const BLOCKS: [&str; 20] = [
    "conv2d",
    "bilinear_upsample",
    "concat_slice",
    "elementwise",
    "softmax_groups",
    "global_avg_pool",
    "group_norm",
    "residual_block",
    "se_gate",
    "attention_transform",
    "task_head",
    "harmonization",
    "fpm",
    "distillation",
    "aggregation",
    "ce_loss",
    "l1_loss",
    "weighted_bce",
    "normal_loss",
    "end_to_end",
];

#[derive(Clone, Debug, PartialEq)]
pub struct BlockResult {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn random(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Random weights for turning a tensor into a scalar.
fn readout(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let w = random(g.shape(x), seed ^ 0x5eed, -1.0, 1.0);
    g.weighted_sum(x, w)
}

/// Overwrites zero-initialized biases so every parameter carries a generic value.
fn jitter_biases(store: &mut ParamStore, seed: u64) {
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for name in names {
        if name.ends_with(".bias") || name.ends_with(".beta") {
            let id = store.id(&name).expect("listed");
            let s = store.value(id).shape();
            *store.value_mut(id) = random(s, seed ^ fnv1a(&name), -0.1, 0.1);
        }
    }
}

fn input(store: &mut ParamStore, name: &str, shape: Shape, seed: u64) -> crate::params::ParamId {
    store.insert(name, random(shape, seed ^ fnv1a(name), -1.0, 1.0))
}

/// Runs the named check. `model` configures the end-to-end check and the
/// class count of the losses.
pub fn run_block(name: &str, model: &ModelConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let seed = opts.seed ^ fnv1a(name);
    let mut store = ParamStore::new(seed);
    let s8 = Shape::new(2, 8, 6, 5);
    match name {
        "conv2d" => {
            let x = input(&mut store, "x", Shape::new(2, 3, 7, 6), seed);
            let c1 = Conv::new(&mut store, "c1", 3, 4, 3, 1)?;
            let c2 = Conv::new(&mut store, "c2", 4, 4, 3, 2)?;
            let c3 = Conv::new(&mut store, "c3", 4, 2, 1, 1)?;
            jitter_biases(&mut store, seed);
            grad_check(
                &mut store,
                |g, s| {
                    let x = g.param(s, x);
                    let h = c1.forward(g, s, x)?;
                    let h = c2.forward(g, s, h)?;
                    let h = c3.forward(g, s, h)?;
                    readout(g, h, seed)
                },
                opts,
            )
        }
        "bilinear_upsample" => {
            let x = input(&mut store, "x", Shape::new(1, 2, 3, 4), seed);
            grad_check(
                &mut store,
                |g, s| {
                    let x = g.param(s, x);
                    let a = g.upsample(x, 2)?;
                    let b = g.upsample(a, 4)?;
                    readout(g, b, seed)
                },
                opts,
            )
        }
        "concat_slice" => {
            let a = input(&mut store, "a", Shape::new(2, 3, 4, 4), seed);
            let b = input(&mut store, "b", Shape::new(2, 2, 4, 4), seed);
            grad_check(
                &mut store,
                |g, s| {
                    let (a, b) = (g.param(s, a), g.param(s, b));
                    let cat = g.concat(&[a, b, a])?;
                    let mid = g.slice_channels(cat, 2, 5)?;
                    readout(g, mid, seed)
                },
                opts,
            )
        }
        "elementwise" => {
            let a = input(&mut store, "a", s8, seed);
            let b = input(&mut store, "b", s8, seed);
            let gate = input(&mut store, "gate", Shape::new(2, 8, 1, 1), seed);
            grad_check(
                &mut store,
                |g, s| {
                    let (a, b, gate) = (g.param(s, a), g.param(s, b), g.param(s, gate));
                    let sa = g.sigmoid(a);
                    let rb = g.relu(b);
                    let m = g.mul(sa, rb)?;
                    let sum = g.add(m, a)?;
                    let scaled = g.scale(sum, 0.7);
                    let sc = g.scale_channels(scaled, gate)?;
                    let n = g.add_n(&[sc, a, b])?;
                    readout(g, n, seed)
                },
                opts,
            )
        }
        "softmax_groups" => {
            let x = input(&mut store, "x", Shape::new(2, 6, 3, 3), seed);
            grad_check(
                &mut store,
                |g, s| {
                    let x = g.param(s, x);
                    let y = g.softmax_groups(x, 3)?;
                    readout(g, y, seed)
                },
                opts,
            )
        }
        "global_avg_pool" => {
            let x = input(&mut store, "x", s8, seed);
            grad_check(
                &mut store,
                |g, s| {
                    let x = g.param(s, x);
                    let y = g.global_avg_pool(x);
                    readout(g, y, seed)
                },
                opts,
            )
        }
        "group_norm" => {
            let x = input(&mut store, "x", s8, seed);
            let gn = GroupNorm::new(&mut store, "gn", 8)?;
            jitter_biases(&mut store, seed);
            let gamma = store.id("gn.gamma").expect("registered");
            *store.value_mut(gamma) = random(Shape::new(1, 8, 1, 1), seed, 0.5, 1.5);
            grad_check(
                &mut store,
                |g, s| {
                    let x = g.param(s, x);
                    let y = gn.forward(g, s, x)?;
                    readout(g, y, seed)
                },
                opts,
            )
        }
        "residual_block" => {
            let x = input(&mut store, "x", s8, seed);
            let same = ResidualBlock::new(&mut store, "same", 8, 8)?;
            let proj = ResidualBlock::new(&mut store, "proj", 8, 12)?;
            jitter_biases(&mut store, seed);
            grad_check(
                &mut store,
                |g, s| {
                    let x = g.param(s, x);
                    let h = same.forward(g, s, x)?;
                    let h = proj.forward(g, s, h)?;
                    readout(g, h, seed)
                },
                opts,
            )
        }
        "se_gate" => {
            let x = input(&mut store, "x", s8, seed);
            let se = SeGate::new(&mut store, "se", 8, 4)?;
            jitter_biases(&mut store, seed);
            grad_check(
                &mut store,
                |g, s| {
                    let x = g.param(s, x);
                    let y = se.forward(g, s, x)?;
                    readout(g, y, seed)
                },
                opts,
            )
        }
        "attention_transform" => {
            let x = input(&mut store, "x", s8, seed);
            let att = SpatialAttention::new(&mut store, "att", 8, 3)?;
            jitter_biases(&mut store, seed);
            grad_check(
                &mut store,
                |g, s| {
                    let x = g.param(s, x);
                    let y = att.forward(g, s, x)?;
                    readout(g, y, seed)
                },
                opts,
            )
        }
        "task_head" => {
            let x = input(&mut store, "x", Shape::new(1, 12, 5, 4), seed);
            let head = TaskHead::new(&mut store, "head", 12, 8, 3)?;
            jitter_biases(&mut store, seed);
            grad_check(
                &mut store,
                |g, s| {
                    let x = g.param(s, x);
                    let (f, p) = head.forward(g, s, x)?;
                    let a = readout(g, f, seed)?;
                    let b = readout(g, p, seed ^ 1)?;
                    g.add(a, b)
                },
                opts,
            )
        }
        "harmonization" => {
            let xs: Vec<_> = (0..3)
                .map(|k| input(&mut store, &format!("f{k}"), Shape::new(1, 8, 4, 4), seed))
                .collect();
            let h = Harmonization::new(&mut store, "harm", 3, 8)?;
            jitter_biases(&mut store, seed);
            grad_check(
                &mut store,
                |g, s| {
                    let fs: Vec<Var> = xs.iter().map(|&id| g.param(s, id)).collect();
                    let out = h.forward(g, s, &fs)?;
                    readout(g, out.shared, seed)
                },
                opts,
            )
        }
        "fpm" => {
            let xs: Vec<_> = (0..2)
                .map(|k| input(&mut store, &format!("f{k}"), Shape::new(1, 16, 3, 3), seed))
                .collect();
            let fpm = FeaturePropagation::new(&mut store, "fpm", &["a", "b"], 16, 4)?;
            jitter_biases(&mut store, seed);
            grad_check(
                &mut store,
                |g, s| {
                    let fs: Vec<Var> = xs.iter().map(|&id| g.param(s, id)).collect();
                    let out = fpm.forward(g, s, &fs)?;
                    let cat = g.concat(&out)?;
                    readout(g, cat, seed)
                },
                opts,
            )
        }
        "distillation" => {
            let xs: Vec<_> = (0..3)
                .map(|k| input(&mut store, &format!("f{k}"), Shape::new(1, 8, 4, 3), seed))
                .collect();
            let d = Distillation::new(&mut store, "distill", &["a", "b", "c"], 8, 3)?;
            jitter_biases(&mut store, seed);
            grad_check(
                &mut store,
                |g, s| {
                    let fs: Vec<Var> = xs.iter().map(|&id| g.param(s, id)).collect();
                    let out = d.forward(g, s, &fs)?;
                    let cat = g.concat(&out)?;
                    readout(g, cat, seed)
                },
                opts,
            )
        }
        "aggregation" => {
            let mut cfg = ModelConfig::new(crate::task::default_tasks(3), 2);
            cfg.channels = [8, 8, 8, 8];
            let net = MtiNet::new(cfg, &mut store)?;
            let feats: Vec<_> = [(0, Scale::S4, 4), (0, Scale::S8, 2), (1, Scale::S4, 4), (1, Scale::S8, 2)]
                .into_iter()
                .map(|(k, sc, hw)| {
                    let id = input(&mut store, &format!("distilled.{k}.{}", sc.label()), Shape::new(1, 8, hw, hw), seed);
                    ((k, sc), id)
                })
                .collect();
            jitter_biases(&mut store, seed);
            // The rest of the network does not take part in aggregation.
            let opts = GradCheckOptions {
                prefixes: Some(vec!["aggregate.".into(), "distilled.".into()]),
                ..opts.clone()
            };
            grad_check(
                &mut store,
                |g, s| {
                    let distilled = feats.iter().map(|&(key, id)| (key, g.param(s, id))).collect();
                    let preds = net.aggregate(g, s, &distilled)?;
                    let a = readout(g, preds[&0], seed)?;
                    let b = readout(g, preds[&1], seed ^ 1)?;
                    g.add(a, b)
                },
                &opts,
            )
        }
        "ce_loss" => {
            let x = input(&mut store, "logits", Shape::new(2, 4, 3, 3), seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<i64> = (0..18).map(|i| if i == 5 { -1 } else { rng.random_range(0..4) }).collect();
            grad_check(
                &mut store,
                |g, s| {
                    let x = g.param(s, x);
                    g.cross_entropy(x, &labels, -1)
                },
                opts,
            )
        }
        "l1_loss" => {
            let x = input(&mut store, "pred", Shape::new(1, 1, 4, 4), seed);
            let t = random(Shape::new(1, 1, 4, 4), seed ^ 3, -1.0, 1.0);
            let mask: Vec<bool> = (0..16).map(|i| i % 3 != 0).collect();
            grad_check(
                &mut store,
                |g, s| {
                    let x = g.param(s, x);
                    g.l1(x, &t, Some(&mask))
                },
                opts,
            )
        }
        "weighted_bce" => {
            let x = input(&mut store, "logits", Shape::new(1, 1, 4, 4), seed);
            let t = random(Shape::new(1, 1, 4, 4), seed ^ 3, 0.0, 1.0).map(f64::round);
            grad_check(
                &mut store,
                |g, s| {
                    let x = g.param(s, x);
                    g.weighted_bce(x, &t, 0.95)
                },
                opts,
            )
        }
        "normal_loss" => {
            let x = input(&mut store, "pred", Shape::new(1, 3, 3, 3), seed);
            let mut t = random(Shape::new(1, 3, 3, 3), seed ^ 3, -1.0, 1.0);
            for i in 0..9 {
                let len = (0..3).map(|c| t.data()[c * 9 + i].powi(2)).sum::<f64>().sqrt();
                for c in 0..3 {
                    t.data_mut()[c * 9 + i] /= len;
                }
            }
            grad_check(
                &mut store,
                |g, s| {
                    let x = g.param(s, x);
                    g.normal_l1(x, &t)
                },
                opts,
            )
        }
        "end_to_end" => end_to_end(model, seed, opts),
        other => Err(crate::Error::contract(format!("unknown gradient check {other:?}"))),
    }
}

fn end_to_end(model: &ModelConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let side = (2 * model.coarsest().factor()).max(32);
    let classes = model
        .tasks
        .iter()
        .find_map(|t| match t.kind {
            TaskKind::Categorical(k) => Some(k),
            _ => None,
        })
        .unwrap_or(2);
    let gen = GenConfig {
        height: side,
        width: side,
        num_classes: classes,
        seed,
        ..GenConfig::default()
    };
    let sample = generate_sample(&gen, 0)?;
    let batch = make_batch(model, &[&sample])?;
    let (net, mut store) = MtiNet::build(model.clone(), seed)?;
    jitter_biases(&mut store, seed);
    let image = random(batch.image.shape(), seed ^ 0x1ae6, 0.0, 1.0);
    let targets: Vec<Target> = batch.targets;
    grad_check(
        &mut store,
        |g, s| {
            let img = g.input(image.clone());
            let out = net.forward(g, s, img)?;
            Ok(total_loss(g, net.config(), &out, &targets, 0.95)?.total)
        },
        opts,
    )
}

/// Runs every check in [`BLOCKS`]. Block checks visit every coordinate; the
/// end-to-end check samples `opts.coords_per_param` coordinates per tensor.
pub fn run_suite(model: &ModelConfig, opts: &GradCheckOptions) -> Result<Vec<BlockResult>> {
    let mut out = Vec::with_capacity(BLOCKS.len());
    for name in BLOCKS {
        let o = if name == "end_to_end" {
            opts.clone()
        } else {
            GradCheckOptions {
                coords_per_param: None,
                ..opts.clone()
            }
        };
        out.push(BlockResult {
            name,
            report: run_block(name, model, &o)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::default_tasks;

    #[test]
    fn blocks_pass_and_fault_is_caught() {
        let model = ModelConfig::new(default_tasks(3), 1);
        let opts = GradCheckOptions::default();
        for name in ["conv2d", "softmax_groups", "group_norm", "ce_loss"] {
            let r = run_block(name, &model, &opts).unwrap();
            assert!(r.max_rel_error <= 1e-4, "{name}: {r:?}");
            assert!(r.coords_checked > 0);
        }
        let faulty = GradCheckOptions {
            weight_grad_fault: Some(1.5),
            ..opts
        };
        assert!(run_block("conv2d", &model, &faulty).unwrap().max_rel_error > 0.1);
        assert!(run_block("nonsense", &model, &GradCheckOptions::default()).is_err());
    }
}
