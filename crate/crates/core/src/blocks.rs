//! Reusable network blocks. Each block owns the [`ParamId`]s it registered and
//! records its forward pass onto a [`Graph`].

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Shape;

/// Group count for every normalization layer.
pub const NORM_GROUPS: usize = 4;

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::contract(format!("{name}: kernel size {kernel} must be odd")));
        }
        let fan_in = in_c * kernel * kernel;
        let weight = store.register(
            format!("{name}.weight"),
            Shape::new(out_c, in_c, kernel, kernel),
            Init::FanInUniform { fan_in },
        )?;
        let bias = store.register(format!("{name}.bias"), Shape::new(1, out_c, 1, 1), Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            in_c,
            out_c,
            kernel,
            stride,
            pad: kernel / 2,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        if !channels.is_multiple_of(NORM_GROUPS) {
            return Err(Error::contract(format!(
                "{name}: {channels} channels not divisible by {NORM_GROUPS} norm groups"
            )));
        }
        let shape = Shape::new(1, channels, 1, 1);
        Ok(Self {
            gamma: store.register(format!("{name}.gamma"), shape, Init::Ones)?,
            beta: store.register(format!("{name}.beta"), shape, Init::Zeros)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.group_norm(x, gamma, beta, NORM_GROUPS)
    }
}

/// Pre-activation basic residual block:
/// `y = skip(x) + conv2(relu(norm2(conv1(relu(norm1(x))))))`, where `skip` is a
/// 1x1 projection when the channel count changes and the identity otherwise.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv,
    pub norm2: GroupNorm,
    pub conv2: Conv,
    pub proj: Option<Conv>,
}

impl ResidualBlock {
    pub fn new(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), in_c)?,
            conv1: Conv::new(store, &format!("{name}.conv1"), in_c, out_c, 3, 1)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), out_c)?,
            conv2: Conv::new(store, &format!("{name}.conv2"), out_c, out_c, 3, 1)?,
            proj: if in_c != out_c {
                Some(Conv::new(store, &format!("{name}.proj"), in_c, out_c, 1, 1)?)
            } else {
                None
            },
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_c
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_c
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let c = g.shape(x).c;
        if c != self.in_channels() {
            return Err(Error::contract(format!(
                "residual block expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        let h = self.norm1.forward(g, store, x)?;
        let h = g.relu(h);
        let h = self.conv1.forward(g, store, h)?;
        let h = self.norm2.forward(g, store, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, store, h)?;
        let skip = match &self.proj {
            Some(p) => p.forward(g, store, x)?,
            None => x,
        };
        g.add(skip, h)
    }
}

/// Squeeze-and-excitation channel gate: `x * sigmoid(fc2(relu(fc1(mean_hw(x)))))`.
#[derive(Clone, Debug)]
pub struct SeGate {
    pub fc1: Conv,
    pub fc2: Conv,
}

impl SeGate {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::contract(format!(
                "{name}: SE reduction {reduction} does not divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Conv::new(store, &format!("{name}.fc1"), channels, hidden, 1, 1)?,
            fc2: Conv::new(store, &format!("{name}.fc2"), hidden, channels, 1, 1)?,
        })
    }

    /// The per-channel gate values, shape `[n, c, 1, 1]`.
    pub fn gate(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(x);
        let h = self.fc1.forward(g, store, pooled)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, store, h)?;
        Ok(g.sigmoid(h))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gate = self.gate(g, store, x)?;
        g.scale_channels(x, gate)
    }
}

/// One source-to-receiver term of the per-scale distillation:
/// `sigmoid(W_logits * F) ⊙ (W_value * F)`.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub logits: Conv,
    pub value: Conv,
}

impl SpatialAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            logits: Conv::new(store, &format!("{name}.mask"), channels, channels, kernel, 1)?,
            value: Conv::new(store, &format!("{name}.value"), channels, channels, kernel, 1)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, source: Var) -> Result<Var> {
        let logits = self.logits.forward(g, store, source)?;
        let mask = g.sigmoid(logits);
        let value = self.value.forward(g, store, source)?;
        g.mul(mask, value)
    }
}

/// Two residual blocks producing task features, then a 1x1 prediction conv.
#[derive(Clone, Debug)]
pub struct TaskHead {
    pub block1: ResidualBlock,
    pub block2: ResidualBlock,
    pub predict: Conv,
}

impl TaskHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        feat_c: usize,
        out_c: usize,
    ) -> Result<Self> {
        Ok(Self {
            block1: ResidualBlock::new(store, &format!("{name}.block1"), in_c, feat_c)?,
            block2: ResidualBlock::new(store, &format!("{name}.block2"), feat_c, feat_c)?,
            predict: Conv::new(store, &format!("{name}.predict"), feat_c, out_c, 1, 1)?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.block1.in_channels()
    }

    /// Returns `(features, prediction)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let h = self.block1.forward(g, store, x)?;
        let features = self.block2.forward(g, store, h)?;
        let prediction = self.predict.forward(g, store, features)?;
        Ok((features, prediction))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn random(shape: Shape, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn zero_conv(store: &mut ParamStore, c: &Conv) {
        store.value_mut(c.weight).data_mut().fill(0.0);
        store.value_mut(c.bias).data_mut().fill(0.0);
    }

    #[test]
    fn residual_with_zero_convs_is_identity() {
        let mut store = ParamStore::new(1);
        let rb = ResidualBlock::new(&mut store, "rb", 8, 8).unwrap();
        zero_conv(&mut store, &rb.conv1);
        zero_conv(&mut store, &rb.conv2);
        let x = random(Shape::new(2, 8, 5, 5), 3);
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let y = rb.forward(&mut g, &store, xi).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn residual_shapes_and_channel_errors() {
        let mut store = ParamStore::new(1);
        let rb = ResidualBlock::new(&mut store, "rb", 8, 12).unwrap();
        assert!(rb.proj.is_some());
        let mut g = Graph::new();
        let x = g.input(random(Shape::new(1, 8, 4, 6), 2));
        let y = rb.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 12, 4, 6));
        let bad = g.input(random(Shape::new(1, 12, 4, 6), 2));
        assert!(rb.forward(&mut g, &store, bad).is_err());
        assert!(ResidualBlock::new(&mut store, "odd", 6, 6).is_err());
    }

    #[test]
    fn se_gate_examples() {
        let mut store = ParamStore::new(2);
        let se = SeGate::new(&mut store, "se", 8, 4).unwrap();
        let x = random(Shape::new(2, 8, 3, 3), 7);

        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let gate = se.gate(&mut g, &store, xi).unwrap();
        assert!(g.value(gate).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let zero = g.input(Tensor::zeros(x.shape()));
        let y0 = se.forward(&mut g, &store, zero).unwrap();
        assert!(g.value(y0).data().iter().all(|&v| v == 0.0));

        zero_conv(&mut store, &se.fc1);
        zero_conv(&mut store, &se.fc2);
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let y = se.forward(&mut g, &store, xi).unwrap();
        for (a, b) in g.value(y).data().iter().zip(x.data()) {
            assert_eq!(*a, 0.5 * b);
        }
        assert!(SeGate::new(&mut store, "se2", 6, 4).is_err());
    }

    #[test]
    fn attention_scalar_case() {
        for kernel in [1, 3] {
            let mut store = ParamStore::new(3);
            let att = SpatialAttention::new(&mut store, "att", 1, kernel).unwrap();
            zero_conv(&mut store, &att.logits);
            zero_conv(&mut store, &att.value);
            let centre = kernel * kernel / 2;
            store.value_mut(att.value.weight).data_mut()[centre] = 1.0;
            let mut g = Graph::new();
            let f = g.input(Tensor::scalar(2.0));
            let y = att.forward(&mut g, &store, f).unwrap();
            assert_eq!(g.value(y).data(), &[1.0]);
        }
    }

    #[test]
    fn attention_saturated_and_zero_input() {
        let mut store = ParamStore::new(4);
        let att = SpatialAttention::new(&mut store, "att", 4, 3).unwrap();
        let x = random(Shape::new(1, 4, 5, 5), 9);

        let mut g = Graph::new();
        let zero = g.input(Tensor::zeros(x.shape()));
        // Biases start at zero, so a zero input yields a zero value path.
        let y = att.forward(&mut g, &store, zero).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        store.value_mut(att.logits.weight).data_mut().fill(0.0);
        store.value_mut(att.logits.bias).data_mut().fill(-100.0);
        let xi = g.input(x);
        let y = att.forward(&mut g, &store, xi).unwrap();
        assert!(g.value(y).max_abs() < 1e-8);
    }

    #[test]
    fn head_shapes() {
        let mut store = ParamStore::new(5);
        let head = TaskHead::new(&mut store, "head", 12, 8, 5).unwrap();
        let mut g = Graph::new();
        let x = g.input(random(Shape::new(2, 12, 4, 4), 1));
        let (f, p) = head.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(f), Shape::new(2, 8, 4, 4));
        assert_eq!(g.shape(p), Shape::new(2, 5, 4, 4));
        let bad = g.input(random(Shape::new(2, 8, 4, 4), 1));
        assert!(head.forward(&mut g, &store, bad).is_err());
    }
}
