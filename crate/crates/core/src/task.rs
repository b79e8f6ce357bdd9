//! Task descriptions shared by the model, losses and metrics.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    /// Per-pixel classification into `K` classes.
    Categorical(usize),
    /// One positive real per pixel.
    Regression,
    /// One binary label per pixel.
    Binary,
    /// A unit 3-vector per pixel.
    VectorField,
}

impl TaskKind {
    pub fn channels(self) -> usize {
        match self {
            TaskKind::Categorical(k) => k,
            TaskKind::Regression | TaskKind::Binary => 1,
            TaskKind::VectorField => 3,
        }
    }

    /// Whether a lower value of this kind's metric is better.
    pub fn direction(self) -> Direction {
        match self {
            TaskKind::Categorical(_) | TaskKind::Binary => Direction::HigherBetter,
            TaskKind::Regression | TaskKind::VectorField => Direction::LowerBetter,
        }
    }

    pub fn metric_name(self) -> &'static str {
        match self {
            TaskKind::Categorical(_) => "miou",
            TaskKind::Regression => "rmse",
            TaskKind::Binary => "f_best",
            TaskKind::VectorField => "mean_angle_deg",
        }
    }
}

/// `l_i` in the multi-task score: 1 when lower is better, 0 otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    HigherBetter = 0,
    LowerBetter = 1,
}

impl Direction {
    pub fn flag(self) -> u8 {
        self as u8
    }

    pub fn from_flag(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Direction::HigherBetter),
            1 => Ok(Direction::LowerBetter),
            _ => Err(Error::Invalid(format!("direction flag {v} is neither 0 nor 1"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Target,
    Auxiliary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub loss_weight: f64,
    pub role: Role,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, kind: TaskKind, role: Role) -> Self {
        Self {
            name: name.into(),
            kind,
            loss_weight: 1.0,
            role,
        }
    }

    pub fn with_weight(mut self, w: f64) -> Self {
        self.loss_weight = w;
        self
    }

    pub fn channels(&self) -> usize {
        self.kind.channels()
    }

    pub fn direction(&self) -> Direction {
        self.kind.direction()
    }

    pub fn is_target(&self) -> bool {
        self.role == Role::Target
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::Config(format!("invalid task name {:?}", self.name)));
        }
        if let TaskKind::Categorical(k) = self.kind {
            if k < 2 {
                return Err(Error::Config(format!("task {}: need at least 2 classes", self.name)));
            }
        }
        // Zero is allowed so a task can be switched off without changing the architecture.
        if !(self.loss_weight >= 0.0 && self.loss_weight.is_finite()) {
            return Err(Error::Config(format!(
                "task {}: loss weight {} must be finite and non-negative",
                self.name, self.loss_weight
            )));
        }
        Ok(())
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name)
    }
}

/// The four label channels produced by the synthetic generator, by name.
pub fn synthetic_task(name: &str, num_classes: usize, role: Role) -> Result<TaskSpec> {
    let kind = match name {
        "seg" => TaskKind::Categorical(num_classes),
        "depth" => TaskKind::Regression,
        "edge" => TaskKind::Binary,
        "normals" => TaskKind::VectorField,
        other => {
            return Err(Error::Config(format!(
                "unknown task {other:?}; expected seg, depth, edge or normals"
            )))
        }
    };
    Ok(TaskSpec::new(name, kind, role))
}

/// Segmentation and depth as targets, edges and normals as auxiliaries.
pub fn default_tasks(num_classes: usize) -> Vec<TaskSpec> {
    vec![
        TaskSpec::new("seg", TaskKind::Categorical(num_classes), Role::Target),
        TaskSpec::new("depth", TaskKind::Regression, Role::Target),
        TaskSpec::new("edge", TaskKind::Binary, Role::Auxiliary),
        TaskSpec::new("normals", TaskKind::VectorField, Role::Auxiliary),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channels_follow_kind() {
        assert_eq!(TaskKind::Categorical(7).channels(), 7);
        assert_eq!(TaskKind::Regression.channels(), 1);
        assert_eq!(TaskKind::Binary.channels(), 1);
        assert_eq!(TaskKind::VectorField.channels(), 3);
        assert_eq!(TaskKind::Regression.direction().flag(), 1);
        assert_eq!(TaskKind::Categorical(3).direction().flag(), 0);
    }

    #[test]
    fn validation() {
        assert!(TaskSpec::new("seg", TaskKind::Categorical(1), Role::Target).validate().is_err());
        assert!(TaskSpec::new("a b", TaskKind::Binary, Role::Target).validate().is_err());
        assert!(TaskSpec::new("d", TaskKind::Regression, Role::Target)
            .with_weight(-1.0)
            .validate()
            .is_err());
        assert!(synthetic_task("albedo", 5, Role::Target).is_err());
    }
}
