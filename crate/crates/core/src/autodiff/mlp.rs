use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BlockId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Sinusoidal encoding: for each octave `k < freqs` and each component,
/// `sin(2ᵏπ·v)` followed by `cos(2ᵏπ·v)`. Output width is `2·freqs·len`.
pub fn positional_encode(v: &[f64], freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * freqs * v.len());
    for k in 0..freqs {
        let w = (1u64 << k) as f64 * std::f64::consts::PI;
        for &x in v {
            let (s, c) = crate::math::sin_cos(w * x);
            out.push(s);
            out.push(c);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
    Sigmoid,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    /// One tag per affine layer (`hidden.len() + 1` entries).
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    /// Uniform hidden activation plus a separate output activation.
    pub fn new(
        input: usize,
        hidden: Vec<usize>,
        output: usize,
        hidden_act: Activation,
        output_act: Activation,
    ) -> Self {
        let mut activations = vec![hidden_act; hidden.len()];
        activations.push(output_act);
        Self {
            input,
            hidden,
            output,
            activations,
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.output);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.activations.len() != self.hidden.len() + 1 {
            return Err(Error::invalid("one activation per layer required"));
        }
        if self.widths().contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(())
    }
}

/// A feed-forward network whose weights live in a [`ParamStore`].
/// Layer `i` computes `act(x·W_i + b_i)` with `W_i` shaped in×out.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<(BlockId, BlockId)>,
}

impl Mlp {
    /// Allocates `<prefix>.<i>.w` / `<prefix>.<i>.b` blocks, uniform in
    /// ±1/√fan_in. With `zero_last` the final layer starts at zero.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        spec: MlpSpec,
        zero_last: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        let n_layers = widths.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let (fan_in, fan_out) = (widths[i], widths[i + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let zero = zero_last && i + 1 == n_layers;
            let mut draw = |shape: (usize, usize)| {
                Array2::from_shape_fn(shape, |_| {
                    if zero {
                        0.0
                    } else {
                        rng.random_range(-bound..bound)
                    }
                })
            };
            let w = draw((fan_in, fan_out));
            let b = draw((1, fan_out));
            let w = store.add(format!("{prefix}.{i}.w"), w)?;
            let b = store.add(format!("{prefix}.{i}.b"), b)?;
            layers.push((w, b));
        }
        Ok(Self { spec, layers })
    }

    /// Re-binds to existing blocks (e.g. after loading a checkpoint).
    pub fn bind(store: &ParamStore, prefix: &str, spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let n_layers = spec.hidden.len() + 1;
        let widths = spec.widths();
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let find = |suffix: &str, shape: (usize, usize)| -> Result<BlockId> {
                let name = format!("{prefix}.{i}.{suffix}");
                let id = store
                    .id(&name)
                    .ok_or_else(|| Error::Incompatible(format!("missing parameter block {name}")))?;
                if store.value(id).dim() != shape {
                    return Err(Error::Incompatible(format!("block {name} has the wrong shape")));
                }
                Ok(id)
            };
            layers.push((
                find("w", (widths[i], widths[i + 1]))?,
                find("b", (1, widths[i + 1]))?,
            ));
        }
        Ok(Self { spec, layers })
    }

    /// Batched forward pass; rows of `x` are independent samples.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, width) = tape.shape(x);
        if width != self.spec.input {
            return Err(Error::invalid(format!(
                "MLP expects input width {}, got {width}",
                self.spec.input
            )));
        }
        let mut h = x;
        for (&(w, b), act) in self.layers.iter().zip(&self.spec.activations) {
            let w = tape.param(store, w);
            let b = tape.param(store, b);
            let z = tape.matmul(h, w);
            let z = tape.add_row(z, b);
            h = match act {
                Activation::Relu => tape.relu(z),
                Activation::None => z,
                Activation::Sigmoid => tape.sigmoid(z),
                Activation::Tanh => tape.tanh(z),
            };
        }
        Ok(h)
    }

    pub fn block_ids(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}
