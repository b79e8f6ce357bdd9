use std::fmt;

use crate::error::{Error, Result};
use crate::task::TaskSpec;

/// A pyramid level, identified by its downsampling factor relative to the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scale {
    S4,
    S8,
    S16,
    S32,
}

impl Scale {
    /// Finest first.
    pub const ALL: [Scale; 4] = [Scale::S4, Scale::S8, Scale::S16, Scale::S32];

    pub fn factor(self) -> usize {
        4 << self.index()
    }

    /// 0 for 1/4 up to 3 for 1/32.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_factor(f: usize) -> Result<Self> {
        Scale::ALL
            .into_iter()
            .find(|s| s.factor() == f)
            .ok_or_else(|| Error::Config(format!("scale 1/{f} is not one of 1/4, 1/8, 1/16, 1/32")))
    }

    /// Short label used in parameter names and log columns, e.g. `s16`.
    pub fn label(self) -> String {
        format!("s{}", self.factor())
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "1/{}", self.factor())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Configured scales, finest first; always a prefix of [`Scale::ALL`].
    pub scales: Vec<Scale>,
    /// Feature width per scale, indexed by [`Scale::index`].
    pub channels: [usize; 4],
    pub tasks: Vec<TaskSpec>,
    pub fpm_enabled: bool,
    pub distill_enabled: bool,
    pub input_channels: usize,
    /// Kernel size of the distillation mask and value convolutions.
    pub attention_kernel: usize,
    pub se_reduction: usize,
}

pub const DEFAULT_CHANNELS: [usize; 4] = [16, 24, 32, 48];

impl ModelConfig {
    /// The default model over `tasks` using the `n` finest scales.
    pub fn new(tasks: Vec<TaskSpec>, num_scales: usize) -> Self {
        Self {
            scales: Scale::ALL[..num_scales.clamp(1, 4)].to_vec(),
            channels: DEFAULT_CHANNELS,
            tasks,
            fpm_enabled: true,
            distill_enabled: true,
            input_channels: 3,
            attention_kernel: 3,
            se_reduction: 4,
        }
    }

    pub fn width(&self, s: Scale) -> usize {
        self.channels[s.index()]
    }

    pub fn finest(&self) -> Scale {
        self.scales[0]
    }

    pub fn coarsest(&self) -> Scale {
        *self.scales.last().expect("validated non-empty")
    }

    /// Scales from coarsest to finest, the order the front-end runs in.
    pub fn coarse_to_fine(&self) -> impl Iterator<Item = Scale> + '_ {
        self.scales.iter().rev().copied()
    }

    /// The next coarser configured scale, if any.
    pub fn coarser(&self, s: Scale) -> Option<Scale> {
        self.scales.get(s.index() + 1).copied()
    }

    pub fn target_tasks(&self) -> impl Iterator<Item = (usize, &TaskSpec)> {
        self.tasks.iter().enumerate().filter(|(_, t)| t.is_target())
    }

    /// Input channels of the front-end head at scale `s`.
    pub fn head_in_channels(&self, s: Scale) -> usize {
        match self.coarser(s) {
            Some(c) if self.fpm_enabled => self.width(s) + self.width(c),
            _ => self.width(s),
        }
    }

    /// Whether an FPM runs on the task features of scale `s`.
    pub fn has_fpm(&self, s: Scale) -> bool {
        self.fpm_enabled && s != self.finest()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.len() > 4 || self.scales[..] != Scale::ALL[..self.scales.len()] {
            return Err(Error::Config(format!(
                "scales {:?} must be a contiguous run starting at 1/4",
                self.scales.iter().map(|s| s.factor()).collect::<Vec<_>>()
            )));
        }
        for s in &self.scales {
            let c = self.width(*s);
            if c < 8 || !c.is_multiple_of(4) {
                return Err(Error::Config(format!(
                    "channel width {c} at scale {s} must be at least 8 and a multiple of 4"
                )));
            }
            if self.se_reduction == 0 || !c.is_multiple_of(self.se_reduction) {
                return Err(Error::Config(format!(
                    "SE reduction {} does not divide width {c} at scale {s}",
                    self.se_reduction
                )));
            }
        }
        if self.tasks.is_empty() || !self.tasks.iter().any(TaskSpec::is_target) {
            return Err(Error::Config("at least one target task is required".into()));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            t.validate()?;
            if self.tasks[..i].iter().any(|o| o.name == t.name) {
                return Err(Error::Config(format!("duplicate task {}", t.name)));
            }
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be positive".into()));
        }
        if self.attention_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "attention kernel {} must be odd",
                self.attention_kernel
            )));
        }
        Ok(())
    }

    /// Input height and width must be divisible by the coarsest factor.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = self.coarsest().factor();
        if !h.is_multiple_of(f) || !w.is_multiple_of(f) || h == 0 || w == 0 {
            return Err(Error::contract(format!(
                "input {h}x{w} is not divisible by the coarsest scale factor {f}"
            )));
        }
        Ok(())
    }
}
