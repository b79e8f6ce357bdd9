use crate::blocks::{Conv, ResidualBlock};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

use super::config::{ModelConfig, Scale};

/// Desk-scale pyramid backbone: a stride-4 stem followed by one stride-2
/// stage per additional scale, each stage ending in a residual block.
#[derive(Clone, Debug)]
pub struct Backbone {
    stem1: Conv,
    stem2: Conv,
    stages: Vec<(Scale, Option<Conv>, ResidualBlock)>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let c4 = cfg.width(Scale::S4);
        let stem_c = c4 / 2;
        let stem1 = Conv::new(store, "backbone.stem1", cfg.input_channels, stem_c, 3, 2)?;
        let stem2 = Conv::new(store, "backbone.stem2", stem_c, c4, 3, 2)?;
        let mut stages = Vec::new();
        let mut prev = c4;
        for &s in &cfg.scales {
            let c = cfg.width(s);
            let down = if s == Scale::S4 {
                None
            } else {
                Some(Conv::new(store, &format!("backbone.{}.down", s.label()), prev, c, 3, 2)?)
            };
            let block = ResidualBlock::new(store, &format!("backbone.{}.block", s.label()), c, c)?;
            stages.push((s, down, block));
            prev = c;
        }
        Ok(Self { stem1, stem2, stages })
    }

    /// Features per configured scale, finest first.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Vec<(Scale, Var)>> {
        let h = self.stem1.forward(g, store, image)?;
        let h = g.relu(h);
        let h = self.stem2.forward(g, store, h)?;
        let mut h = g.relu(h);
        let mut out = Vec::with_capacity(self.stages.len());
        for (s, down, block) in &self.stages {
            if let Some(d) = down {
                let t = d.forward(g, store, h)?;
                h = g.relu(t);
            }
            h = block.forward(g, store, h)?;
            out.push((*s, h));
        }
        Ok(out)
    }
}
