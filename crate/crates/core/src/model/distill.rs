use crate::blocks::SpatialAttention;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

/// Per-scale multi-modal distillation. For every receiving task `k`:
///
/// `F_out[k] = F_in[k] + Σ_{l ≠ k} sigmoid(W[k][l] F_in[l]) ⊙ (W'[k][l] F_in[l])`
///
/// with independent mask and value convolutions for each ordered pair.
#[derive(Clone, Debug)]
pub struct Distillation {
    tasks: usize,
    /// `pairs[k]` holds `(l, attention)` for every source `l != k`, ascending in `l`.
    pairs: Vec<Vec<(usize, SpatialAttention)>>,
}

impl Distillation {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        task_names: &[&str],
        channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        let mut pairs = Vec::with_capacity(task_names.len());
        for (k, recv) in task_names.iter().enumerate() {
            let mut row = Vec::new();
            for (l, src) in task_names.iter().enumerate() {
                if l != k {
                    let att = SpatialAttention::new(store, &format!("{name}.{recv}_from_{src}"), channels, kernel)?;
                    row.push((l, att));
                }
            }
            pairs.push(row);
        }
        Ok(Self {
            tasks: task_names.len(),
            pairs,
        })
    }

    /// The attention term from `source` into `receiver`, if any.
    pub fn pair(&self, receiver: usize, source: usize) -> Option<&SpatialAttention> {
        self.pairs.get(receiver)?.iter().find(|(l, _)| *l == source).map(|(_, a)| a)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, feats: &[Var]) -> Result<Vec<Var>> {
        if feats.len() != self.tasks {
            return Err(Error::contract(format!(
                "distillation built for {} tasks, got {}",
                self.tasks,
                feats.len()
            )));
        }
        let mut out = Vec::with_capacity(self.tasks);
        for (k, row) in self.pairs.iter().enumerate() {
            if row.is_empty() {
                out.push(feats[k]);
                continue;
            }
            let mut terms = vec![feats[k]];
            for (l, att) in row {
                terms.push(att.forward(g, store, feats[*l])?);
            }
            out.push(g.add_n(&terms)?);
        }
        Ok(out)
    }
}
