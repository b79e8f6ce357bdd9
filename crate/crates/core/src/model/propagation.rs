//! Feature propagation from a coarser scale into the heads of the next finer one.

use crate::blocks::{Conv, ResidualBlock, SeGate, NORM_GROUPS};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

/// Width of the bottleneck inside the harmonization network for `n` tasks of
/// `c` channels: a quarter of `n * c`, rounded up to a whole number of norm groups.
pub fn harmonization_width(n: usize, c: usize) -> usize {
    (n * c / 4).div_ceil(NORM_GROUPS).max(1) * NORM_GROUPS
}

/// Fuses `n` task features of `c` channels into one shared `c`-channel map.
///
/// The concatenated features go through two residual blocks that shrink the
/// width and a 1x1 conv back to `n * c` channels. A softmax across the `n`
/// channel chunks gives one attention mask per task; the masks gate the
/// original task features, which are concatenated again and reduced to `c`
/// channels by a 1x1 conv.
#[derive(Clone, Debug)]
pub struct Harmonization {
    pub tasks: usize,
    pub channels: usize,
    block1: ResidualBlock,
    block2: ResidualBlock,
    expand: Conv,
    reduce: Conv,
}

pub struct HarmonizationOutput {
    pub shared: Var,
    /// `[n, tasks * channels, h, w]`, chunk `k` is task `k`'s mask.
    pub masks: Var,
}

impl Harmonization {
    pub fn new(store: &mut ParamStore, name: &str, tasks: usize, channels: usize) -> Result<Self> {
        if tasks == 0 {
            return Err(Error::contract(format!("{name}: harmonization needs at least one task")));
        }
        let total = tasks * channels;
        let hidden = harmonization_width(tasks, channels);
        Ok(Self {
            tasks,
            channels,
            block1: ResidualBlock::new(store, &format!("{name}.block1"), total, hidden)?,
            block2: ResidualBlock::new(store, &format!("{name}.block2"), hidden, hidden)?,
            expand: Conv::new(store, &format!("{name}.expand"), hidden, total, 1, 1)?,
            reduce: Conv::new(store, &format!("{name}.reduce"), total, channels, 1, 1)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, feats: &[Var]) -> Result<HarmonizationOutput> {
        if feats.len() != self.tasks {
            return Err(Error::contract(format!(
                "harmonization built for {} tasks, got {}",
                self.tasks,
                feats.len()
            )));
        }
        let first = g.shape(feats[0]);
        for &f in feats {
            let s = g.shape(f);
            if s != first || s.c != self.channels {
                return Err(Error::contract(format!(
                    "harmonization: task feature {s} differs from {first} or from {} channels",
                    self.channels
                )));
            }
        }
        let cat = g.concat(feats)?;
        let h = self.block1.forward(g, store, cat)?;
        let h = self.block2.forward(g, store, h)?;
        let logits = self.expand.forward(g, store, h)?;
        let masks = g.softmax_groups(logits, self.tasks)?;
        let mut attended = Vec::with_capacity(self.tasks);
        for (k, &f) in feats.iter().enumerate() {
            let m = g.slice_channels(masks, k * self.channels, self.channels)?;
            attended.push(g.mul(m, f)?);
        }
        let cat = g.concat(&attended)?;
        let shared = self.reduce.forward(g, store, cat)?;
        Ok(HarmonizationOutput { shared, masks })
    }
}

/// Harmonizes the task features of one scale, refines each task with its own
/// SE-gated view of the shared map (added as a residual) and upsamples ×2.
#[derive(Clone, Debug)]
pub struct FeaturePropagation {
    pub harmonization: Harmonization,
    pub gates: Vec<SeGate>,
}

impl FeaturePropagation {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        task_names: &[&str],
        channels: usize,
        se_reduction: usize,
    ) -> Result<Self> {
        let harmonization =
            Harmonization::new(store, &format!("{name}.harmonize"), task_names.len(), channels)?;
        let gates = task_names
            .iter()
            .map(|t| SeGate::new(store, &format!("{name}.se.{t}"), channels, se_reduction))
            .collect::<Result<_>>()?;
        Ok(Self { harmonization, gates })
    }

    /// Refined task features before upsampling, one per task.
    pub fn refine(&self, g: &mut Graph, store: &ParamStore, feats: &[Var]) -> Result<Vec<Var>> {
        let shared = self.harmonization.forward(g, store, feats)?.shared;
        feats
            .iter()
            .zip(&self.gates)
            .map(|(&f, se)| {
                let gated = se.forward(g, store, shared)?;
                g.add(f, gated)
            })
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, feats: &[Var]) -> Result<Vec<Var>> {
        self.refine(g, store, feats)?
            .into_iter()
            .map(|r| g.upsample(r, 2))
            .collect()
    }
}
