use rand::Rng;

use crate::error::{Error, Result};

use super::params::{ParamId, ParameterStore};
use super::tape::{Activation, BufId, Tape};

/// A small fully-connected network whose weights live in a
/// [`ParameterStore`]. Hidden layers use ReLU; the output activation is
/// chosen per head (sigmoid for colors, softplus for density).
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Layer>,
}

#[derive(Debug, Clone)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
    in_width: usize,
    out_width: usize,
    act: Activation,
}

impl Mlp {
    /// Register a new network under `prefix`. Weights are seeded
    /// uniform in `[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]`,
    /// biases zero.
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        in_width: usize,
        hidden: &[usize],
        out_width: usize,
        out_act: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if in_width == 0 || out_width == 0 {
            return Err(Error::Contract("mlp widths must be >= 1".into()));
        }
        let mut layers = Vec::new();
        let mut prev = in_width;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Layer::register(store, &format!("{prefix}.h{i}"), prev, h, Activation::Relu, rng)?);
            prev = h;
        }
        layers.push(Layer::register(store, &format!("{prefix}.out"), prev, out_width, out_act, rng)?);
        Ok(Mlp { layers })
    }

    /// Re-bind to parameters previously registered by [`Mlp::new`] under the
    /// same prefix and sizes (checkpoint loading).
    pub fn attach(
        store: &ParameterStore,
        prefix: &str,
        in_width: usize,
        hidden: &[usize],
        out_width: usize,
        out_act: Activation,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = in_width;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Layer::attach(store, &format!("{prefix}.h{i}"), prev, h, Activation::Relu)?);
            prev = h;
        }
        layers.push(Layer::attach(store, &format!("{prefix}.out"), prev, out_width, out_act)?);
        Ok(Mlp { layers })
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].in_width
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().unwrap().out_width
    }

    /// Forward a batch of `N` rows through the network, recording on `tape`.
    /// Returns the `[N x out_width]` output buffer.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, input: BufId) -> Result<BufId> {
        if tape.cols(input) != self.in_width() {
            return Err(Error::Contract(format!(
                "mlp forward: input has {} columns, network expects {}",
                tape.cols(input),
                self.in_width()
            )));
        }
        if let Some(i) = tape.value(input).iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("mlp input at flat index {i}")));
        }
        let mut x = input;
        for layer in &self.layers {
            x = tape.linear(store, x, layer.weight, layer.bias, layer.act)?;
        }
        Ok(x)
    }

    /// Convenience wrapper: run a forward pass on a throwaway tape and return
    /// plain values.
    pub fn evaluate(&self, store: &ParameterStore, input: &[f64], rows: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.input(input.to_vec(), rows, self.in_width())?;
        let y = self.forward(&mut tape, store, x)?;
        Ok(tape.value(y).to_vec())
    }
}

impl Layer {
    fn register(
        store: &mut ParameterStore,
        prefix: &str,
        in_width: usize,
        out_width: usize,
        act: Activation,
        rng: &mut impl Rng,
    ) -> Result<Layer> {
        let bound = (6.0 / (in_width + out_width) as f64).sqrt();
        let weights: Vec<f64> =
            (0..in_width * out_width).map(|_| rng.gen_range(-bound..bound)).collect();
        let weight = store.register(&format!("{prefix}.w"), &[in_width, out_width], weights)?;
        let bias = store.register(&format!("{prefix}.b"), &[out_width], vec![0.0; out_width])?;
        Ok(Layer { weight, bias, in_width, out_width, act })
    }

    fn attach(
        store: &ParameterStore,
        prefix: &str,
        in_width: usize,
        out_width: usize,
        act: Activation,
    ) -> Result<Layer> {
        let weight = store.require(&format!("{prefix}.w"))?;
        let bias = store.require(&format!("{prefix}.b"))?;
        if store.shape(weight) != [in_width, out_width] {
            return Err(Error::Contract(format!(
                "layer '{prefix}': stored shape {:?} does not match [{in_width}, {out_width}]",
                store.shape(weight)
            )));
        }
        Ok(Layer { weight, bias, in_width, out_width, act })
    }
}
