//! Full multi-scale multi-task network.
//!
//! Data flow for one forward pass:
//!
//! 1. [`Backbone`] turns the image into one feature map per configured scale.
//! 2. The front-end runs coarse to fine. At each scale a [`TaskHead`] per task
//!    produces task features and an initial prediction. When propagation is
//!    enabled, the task features of a scale pass through a
//!    [`FeaturePropagation`] module and are concatenated with the backbone
//!    features of the next finer scale before its heads run.
//! 3. A [`Distillation`] unit per scale refines every task's features with
//!    attention-gated features of the other tasks.
//! 4. For each target task, distilled features from all scales are upsampled
//!    to 1/4, concatenated and decoded by a second head, whose prediction is
//!    upsampled ×4 to the input resolution.

mod backbone;
mod config;
mod distill;
mod propagation;

use std::collections::BTreeMap;

pub use backbone::Backbone;
pub use config::{ModelConfig, Scale, DEFAULT_CHANNELS};
pub use distill::Distillation;
pub use propagation::{harmonization_width, FeaturePropagation, Harmonization, HarmonizationOutput};

use crate::blocks::TaskHead;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

/// Graph handles for everything a forward pass produces. Keys are
/// `(task index, scale)`.
#[derive(Clone, Debug, Default)]
pub struct ModelOutputs {
    pub pyramid: Vec<(Scale, Var)>,
    pub task_features: BTreeMap<(usize, Scale), Var>,
    pub initial_predictions: BTreeMap<(usize, Scale), Var>,
    pub distilled_features: BTreeMap<(usize, Scale), Var>,
    /// Target tasks only, at full input resolution.
    pub final_predictions: BTreeMap<usize, Var>,
}

pub struct FrontEndOutput {
    pub task_features: BTreeMap<(usize, Scale), Var>,
    pub initial_predictions: BTreeMap<(usize, Scale), Var>,
}

#[derive(Clone, Debug)]
pub struct MtiNet {
    cfg: ModelConfig,
    backbone: Backbone,
    /// `heads[scale index][task]`.
    heads: Vec<Vec<TaskHead>>,
    /// Indexed by the source scale; `None` where no propagation runs.
    propagation: Vec<Option<FeaturePropagation>>,
    distillation: Vec<Option<Distillation>>,
    /// Indexed by task; `None` for auxiliary tasks.
    aggregation: Vec<Option<TaskHead>>,
}

impl MtiNet {
    /// Registers every parameter of the configured network in `store`.
    pub fn new(cfg: ModelConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let names: Vec<&str> = cfg.tasks.iter().map(|t| t.name.as_str()).collect();
        let backbone = Backbone::new(store, &cfg)?;

        let mut heads = Vec::new();
        let mut propagation = Vec::new();
        let mut distillation = Vec::new();
        for &s in &cfg.scales {
            let c = cfg.width(s);
            let row = cfg
                .tasks
                .iter()
                .map(|t| {
                    TaskHead::new(
                        store,
                        &format!("frontend.{}.{}", s.label(), t.name),
                        cfg.head_in_channels(s),
                        c,
                        t.channels(),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            heads.push(row);
            propagation.push(if cfg.has_fpm(s) {
                Some(FeaturePropagation::new(store, &format!("fpm.{}", s.label()), &names, c, cfg.se_reduction)?)
            } else {
                None
            });
            distillation.push(if cfg.distill_enabled && names.len() > 1 {
                Some(Distillation::new(
                    store,
                    &format!("distill.{}", s.label()),
                    &names,
                    c,
                    cfg.attention_kernel,
                )?)
            } else {
                None
            });
        }

        let agg_in: usize = cfg.scales.iter().map(|&s| cfg.width(s)).sum();
        let aggregation = cfg
            .tasks
            .iter()
            .map(|t| {
                t.is_target()
                    .then(|| {
                        TaskHead::new(
                            store,
                            &format!("aggregate.{}", t.name),
                            agg_in,
                            cfg.width(Scale::S4),
                            t.channels(),
                        )
                    })
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            cfg,
            backbone,
            heads,
            propagation,
            distillation,
            aggregation,
        })
    }

    pub fn build(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new(seed);
        let net = Self::new(cfg, &mut store)?;
        Ok((net, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn head(&self, task: usize, s: Scale) -> &TaskHead {
        &self.heads[s.index()][task]
    }

    pub fn propagation(&self, s: Scale) -> Option<&FeaturePropagation> {
        self.propagation.get(s.index())?.as_ref()
    }

    pub fn distillation(&self, s: Scale) -> Option<&Distillation> {
        self.distillation.get(s.index())?.as_ref()
    }

    pub fn aggregation_head(&self, task: usize) -> Option<&TaskHead> {
        self.aggregation.get(task)?.as_ref()
    }

    pub fn backbone_forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Vec<(Scale, Var)>> {
        let s = g.shape(image);
        if s.c != self.cfg.input_channels {
            return Err(Error::contract(format!(
                "image {s} has {} channels, model expects {}",
                s.c, self.cfg.input_channels
            )));
        }
        self.cfg.check_input(s.h, s.w)?;
        self.backbone.forward(g, store, image)
    }

    pub fn front_end(&self, g: &mut Graph, store: &ParamStore, pyramid: &[(Scale, Var)]) -> Result<FrontEndOutput> {
        if pyramid.iter().map(|p| p.0).ne(self.cfg.scales.iter().copied()) {
            return Err(Error::contract("front_end: pyramid scales do not match the config"));
        }
        let mut out = FrontEndOutput {
            task_features: BTreeMap::new(),
            initial_predictions: BTreeMap::new(),
        };
        let mut carried: Option<Vec<Var>> = None;
        for &(s, feat) in pyramid.iter().rev() {
            let mut feats = Vec::with_capacity(self.cfg.tasks.len());
            for (k, head) in self.heads[s.index()].iter().enumerate() {
                let input = match &carried {
                    Some(prev) => g.concat(&[feat, prev[k]])?,
                    None => feat,
                };
                let (f, pred) = head.forward(g, store, input)?;
                out.task_features.insert((k, s), f);
                out.initial_predictions.insert((k, s), pred);
                feats.push(f);
            }
            carried = match self.propagation(s) {
                Some(fpm) => Some(fpm.forward(g, store, &feats)?),
                None => None,
            };
        }
        Ok(out)
    }

    /// Distils the task features of every scale; the identity when disabled.
    pub fn distill(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        task_features: &BTreeMap<(usize, Scale), Var>,
    ) -> Result<BTreeMap<(usize, Scale), Var>> {
        let mut out = BTreeMap::new();
        for &s in &self.cfg.scales {
            let feats = (0..self.cfg.tasks.len())
                .map(|k| {
                    task_features
                        .get(&(k, s))
                        .copied()
                        .ok_or_else(|| Error::contract(format!("missing task features ({k}, {s})")))
                })
                .collect::<Result<Vec<_>>>()?;
            let distilled = match self.distillation(s) {
                Some(d) => d.forward(g, store, &feats)?,
                None => feats,
            };
            for (k, v) in distilled.into_iter().enumerate() {
                out.insert((k, s), v);
            }
        }
        Ok(out)
    }

    /// Final predictions for target tasks at `4 ×` the 1/4-scale resolution.
    pub fn aggregate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        distilled: &BTreeMap<(usize, Scale), Var>,
    ) -> Result<BTreeMap<usize, Var>> {
        let mut out = BTreeMap::new();
        for (k, head) in self.aggregation.iter().enumerate() {
            let Some(head) = head else { continue };
            let mut ups = Vec::with_capacity(self.cfg.scales.len());
            for &s in &self.cfg.scales {
                let f = *distilled.get(&(k, s)).ok_or_else(|| {
                    Error::contract(format!("aggregation: missing distilled features for task {k} at {s}"))
                })?;
                ups.push(g.upsample(f, s.factor() / Scale::S4.factor())?);
            }
            let cat = g.concat(&ups)?;
            let (_, pred) = head.forward(g, store, cat)?;
            out.insert(k, g.upsample(pred, Scale::S4.factor())?);
        }
        Ok(out)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<ModelOutputs> {
        let pyramid = self.backbone_forward(g, store, image)?;
        let fe = self.front_end(g, store, &pyramid)?;
        let distilled = self.distill(g, store, &fe.task_features)?;
        let final_predictions = self.aggregate(g, store, &distilled)?;
        Ok(ModelOutputs {
            pyramid,
            task_features: fe.task_features,
            initial_predictions: fe.initial_predictions,
            distilled_features: distilled,
            final_predictions,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{default_tasks, Role, TaskKind, TaskSpec};
    use crate::tensor::{Shape, Tensor};
    use rand::{Rng, SeedableRng};

    fn random(shape: Shape, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn scale_helpers() {
        assert_eq!(Scale::S16.factor(), 16);
        assert_eq!(Scale::from_factor(32).unwrap(), Scale::S32);
        assert!(Scale::from_factor(2).is_err());
        assert_eq!(Scale::S8.label(), "s8");
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::new(default_tasks(5), 4);
        cfg.validate().unwrap();
        cfg.scales = vec![Scale::S8];
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::new(default_tasks(5), 2);
        cfg.channels[1] = 6;
        assert!(cfg.validate().is_err());
        let aux_only = vec![TaskSpec::new("edge", TaskKind::Binary, Role::Auxiliary)];
        assert!(ModelConfig::new(aux_only, 1).validate().is_err());
    }

    #[test]
    fn backbone_pyramid_shapes() {
        let (net, store) = MtiNet::build(ModelConfig::new(default_tasks(5), 4), 1).unwrap();
        let mut g = Graph::new();
        let img = g.input(random(Shape::new(1, 3, 64, 64), 2));
        let pyr = net.backbone_forward(&mut g, &store, img).unwrap();
        let dims: Vec<_> = pyr.iter().map(|(_, v)| (g.shape(*v).h, g.shape(*v).c)).collect();
        assert_eq!(dims, vec![(16, 16), (8, 24), (4, 32), (2, 48)]);

        let (single, store1) = MtiNet::build(ModelConfig::new(default_tasks(5), 1), 1).unwrap();
        let pyr = single.backbone_forward(&mut g, &store1, img).unwrap();
        assert_eq!(pyr.len(), 1);
        assert_eq!(g.shape(pyr[0].1), Shape::new(1, 16, 16, 16));

        let bad = g.input(random(Shape::new(1, 3, 48, 48), 2));
        assert!(net.backbone_forward(&mut g, &store, bad).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_complete() {
        let (net, store) = MtiNet::build(ModelConfig::new(default_tasks(5), 4), 3).unwrap();
        let x = random(Shape::new(1, 3, 64, 64), 4);
        let run = || {
            let mut g = Graph::new();
            let img = g.input(x.clone());
            let out = net.forward(&mut g, &store, img).unwrap();
            assert_eq!(out.initial_predictions.len(), 16);
            assert_eq!(out.final_predictions.len(), 2);
            out.final_predictions
                .values()
                .map(|v| g.value(*v).clone())
                .collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.iter().all(Tensor::is_finite));
        assert_eq!(a[0].shape(), Shape::new(1, 5, 64, 64));
        assert_eq!(a[1].shape(), Shape::new(1, 1, 64, 64));
    }

    #[test]
    fn single_scale_ignores_fpm_flag() {
        let x = random(Shape::new(1, 3, 32, 32), 5);
        let outputs = |fpm: bool| {
            let mut cfg = ModelConfig::new(default_tasks(4), 1);
            cfg.fpm_enabled = fpm;
            let (net, store) = MtiNet::build(cfg, 8).unwrap();
            let mut g = Graph::new();
            let img = g.input(x.clone());
            let out = net.forward(&mut g, &store, img).unwrap();
            out.final_predictions.values().map(|v| g.value(*v).clone()).collect::<Vec<_>>()
        };
        assert_eq!(outputs(true), outputs(false));
    }

    #[test]
    fn distillation_disabled_is_identity() {
        let mut cfg = ModelConfig::new(default_tasks(5), 2);
        cfg.distill_enabled = false;
        let (net, store) = MtiNet::build(cfg, 2).unwrap();
        let mut g = Graph::new();
        let img = g.input(random(Shape::new(1, 3, 32, 32), 1));
        let out = net.forward(&mut g, &store, img).unwrap();
        assert_eq!(out.task_features, out.distilled_features);
    }
}
