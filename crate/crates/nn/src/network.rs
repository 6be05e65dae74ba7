//! Declarative layer stacks bound to a [`ParamStore`].

use rand::Rng;

use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{self, ConvGeom, Tensor};
use crate::{NnError, Result};

/// Negative slope of [`Activation::LeakyRelu`].
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    fn record(self, tape: &Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu => tape.leaky_relu(x, LEAKY_SLOPE),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Fully connected; any per-sample input whose size equals `inputs` is flattened.
    Dense { inputs: usize, outputs: usize },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
    },
    /// Reinterprets the per-sample shape.
    Reshape { shape: Vec<usize> },
}

impl LayerKind {
    fn label(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::ConvTranspose2d { .. } => "conv_transpose2d",
            LayerKind::Reshape { .. } => "reshape",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Dense { inputs, outputs },
            activation,
        }
    }

    pub fn conv(in_channels: usize, out_channels: usize, geom: ConvGeom, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Conv2d {
                in_channels,
                out_channels,
                geom,
            },
            activation,
        }
    }

    pub fn conv_transpose(
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
        activation: Activation,
    ) -> Self {
        Self {
            kind: LayerKind::ConvTranspose2d {
                in_channels,
                out_channels,
                geom,
            },
            activation,
        }
    }

    pub fn reshape(shape: &[usize]) -> Self {
        Self {
            kind: LayerKind::Reshape {
                shape: shape.to_vec(),
            },
            activation: Activation::Identity,
        }
    }

    /// Per-sample output shape, or a description of why `input` is incompatible.
    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        let numel: usize = input.iter().product();
        match &self.kind {
            LayerKind::Dense { inputs, outputs } => {
                if numel != *inputs {
                    return Err(format!("expects {inputs} features"));
                }
                Ok(vec![*outputs])
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                geom,
            } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return Err(format!("expects [{in_channels}, h, w]"));
                }
                let h = geom.conv_out(input[1]).ok_or("image smaller than kernel")?;
                let w = geom.conv_out(input[2]).ok_or("image smaller than kernel")?;
                Ok(vec![*out_channels, h, w])
            }
            LayerKind::ConvTranspose2d {
                in_channels,
                out_channels,
                geom,
            } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return Err(format!("expects [{in_channels}, h, w]"));
                }
                let h = geom.transpose_out(input[1]).ok_or("empty output")?;
                let w = geom.transpose_out(input[2]).ok_or("empty output")?;
                Ok(vec![*out_channels, h, w])
            }
            LayerKind::Reshape { shape } => {
                if shape.iter().product::<usize>() != numel {
                    return Err(format!("cannot reshape to {shape:?}"));
                }
                Ok(shape.clone())
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Bound {
    spec: LayerSpec,
    weight: Option<ParamId>,
    bias: Option<ParamId>,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

/// A layer stack with a declared per-sample input shape.
///
/// Batched inputs carry one extra leading extent.
#[derive(Clone, Debug)]
pub struct Network {
    name: String,
    input_shape: Vec<usize>,
    layers: Vec<Bound>,
}

impl Network {
    /// Validates the stack, then allocates and initializes its parameters in `store`.
    ///
    /// ReLU-family layers get He-uniform weights, tanh/identity layers
    /// Xavier-uniform; biases start at zero.
    pub fn build<R: Rng + ?Sized>(
        name: &str,
        input_shape: &[usize],
        specs: &[LayerSpec],
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let out = spec.output_shape(&shape).map_err(|why| {
                NnError::InvalidNetwork(format!(
                    "{name} layer {i} ({}): input {shape:?}: {why}",
                    spec.kind.label()
                ))
            })?;
            let (wshape, fan_in, fan_out, bias_len) = match &spec.kind {
                LayerKind::Dense { inputs, outputs } => {
                    (Some(vec![*inputs, *outputs]), *inputs, *outputs, *outputs)
                }
                LayerKind::Conv2d {
                    in_channels: c,
                    out_channels: o,
                    geom,
                } => {
                    let kk = geom.kernel * geom.kernel;
                    (Some(vec![*o, *c, geom.kernel, geom.kernel]), c * kk, o * kk, *o)
                }
                LayerKind::ConvTranspose2d {
                    in_channels: c,
                    out_channels: o,
                    geom,
                } => {
                    // Each output pixel sees roughly (k/s)^2 taps per input channel.
                    let taps = (geom.kernel * geom.kernel) / (geom.stride * geom.stride).max(1);
                    (
                        Some(vec![*c, *o, geom.kernel, geom.kernel]),
                        c * taps.max(1),
                        o * taps.max(1),
                        *o,
                    )
                }
                LayerKind::Reshape { .. } => (None, 0, 0, 0),
            };
            let (weight, bias) = if let Some(ws) = wshape {
                let limit = match spec.activation {
                    Activation::Relu | Activation::LeakyRelu => (6.0 / fan_in as f64).sqrt(),
                    Activation::Tanh | Activation::Identity => {
                        (6.0 / (fan_in + fan_out) as f64).sqrt()
                    }
                };
                let n: usize = ws.iter().product();
                let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
                let w = store.add(format!("{name}.{i}.weight"), Tensor::new(ws, data));
                let b = store.add(format!("{name}.{i}.bias"), Tensor::zeros(&[bias_len]));
                (Some(w), Some(b))
            } else {
                (None, None)
            };
            layers.push(Bound {
                spec: spec.clone(),
                weight,
                bias,
                in_shape: shape.clone(),
                out_shape: out.clone(),
            });
            shape = out;
        }
        Ok(Self {
            name: name.to_string(),
            input_shape: input_shape.to_vec(),
            layers,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers
            .last()
            .map(|l| l.out_shape.as_slice())
            .unwrap_or(&self.input_shape)
    }

    pub fn specs(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().map(|l| &l.spec)
    }

    /// Parameter ids in layer order (weight then bias).
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.into_iter().chain(l.bias))
            .collect()
    }

    /// Index of the last layer, for overriding activations in callers.
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Checks that `shape` is `[n] ++ input_shape` and returns `n`.
    fn batch_of(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            let first = self.layers.first().map(|l| l.spec.kind.label()).unwrap_or("input");
            return Err(NnError::ShapeMismatch {
                network: self.name.clone(),
                layer: 0,
                kind: first,
                expected: self.input_shape.clone(),
                got: shape.to_vec(),
            });
        }
        Ok(shape[0])
    }

    /// Records the forward pass on `tape`.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, input: Var) -> Result<Var> {
        let params: Vec<Var> = self.param_ids().into_iter().map(|id| tape.param(store, id)).collect();
        self.forward_with(tape, &params, input)
    }

    /// Like [`Network::forward`] with caller-provided parameter variables,
    /// ordered as [`Network::param_ids`].
    pub fn forward_with(&self, tape: &Tape, params: &[Var], input: Var) -> Result<Var> {
        let n = self.batch_of(&tape.shape(input))?;
        let expected = self.layers.iter().filter(|l| l.weight.is_some()).count() * 2;
        if params.len() != expected {
            return Err(NnError::InvalidNetwork(format!(
                "{}: {} parameter variables given, {expected} expected",
                self.name,
                params.len()
            )));
        }
        let mut next = params.iter().copied();
        let mut x = input;
        for layer in &self.layers {
            x = match &layer.spec.kind {
                LayerKind::Dense { inputs, .. } => {
                    if tape.shape(x).len() != 2 {
                        x = tape.reshape(x, &[n, *inputs]);
                    }
                    let (w, b) = (next.next().unwrap(), next.next().unwrap());
                    tape.add_row_bias(tape.matmul(x, w), b)
                }
                LayerKind::Conv2d { geom, .. } => {
                    let (w, b) = (next.next().unwrap(), next.next().unwrap());
                    tape.add_channel_bias(tape.conv2d(x, w, *geom), b)
                }
                LayerKind::ConvTranspose2d { geom, .. } => {
                    let (w, b) = (next.next().unwrap(), next.next().unwrap());
                    tape.add_channel_bias(tape.conv_transpose2d(x, w, *geom), b)
                }
                LayerKind::Reshape { shape } => {
                    let mut full = vec![n];
                    full.extend_from_slice(shape);
                    tape.reshape(x, &full)
                }
            };
            x = layer.spec.activation.record(tape, x);
        }
        Ok(x)
    }

    /// Tape-free forward pass; bitwise identical to [`Network::forward`].
    pub fn infer(&self, store: &ParamStore, input: &Tensor) -> Result<Tensor> {
        let n = self.batch_of(input.shape())?;
        let mut x = input.clone();
        for layer in &self.layers {
            x = match &layer.spec.kind {
                LayerKind::Dense { inputs, .. } => {
                    if x.shape().len() != 2 {
                        x = x.reshape(&[n, *inputs]);
                    }
                    let mut y = tensor::matmul(&x, store.value(layer.weight.unwrap()));
                    tensor::add_row_bias(&mut y, store.value(layer.bias.unwrap()).data());
                    y
                }
                LayerKind::Conv2d { geom, .. } => {
                    let mut y = tensor::conv2d(&x, store.value(layer.weight.unwrap()), *geom);
                    tensor::add_channel_bias(&mut y, store.value(layer.bias.unwrap()).data());
                    y
                }
                LayerKind::ConvTranspose2d { geom, .. } => {
                    let mut y =
                        tensor::conv_transpose2d(&x, store.value(layer.weight.unwrap()), *geom);
                    tensor::add_channel_bias(&mut y, store.value(layer.bias.unwrap()).data());
                    y
                }
                LayerKind::Reshape { shape } => {
                    let mut full = vec![n];
                    full.extend_from_slice(shape);
                    x.reshape(&full)
                }
            };
            let act = layer.spec.activation;
            if act != Activation::Identity {
                x.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            }
        }
        Ok(x)
    }

    /// Per-layer input shapes, for diagnostics.
    pub fn layer_input_shape(&self, i: usize) -> &[usize] {
        &self.layers[i].in_shape
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> rand::rngs::StdRng {
        rand::rngs::StdRng::seed_from_u64(7)
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let mut store = ParamStore::new();
        let net = Network::build(
            "id",
            &[3],
            &[LayerSpec::dense(3, 3, Activation::Identity)],
            &mut store,
            &mut rng(),
        )
        .unwrap();
        let w = net.param_ids()[0];
        let eye = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        );
        *store.value_mut(w) = eye;
        let x = Tensor::new(vec![1, 3], vec![0.5, -1.5, 2.0]);
        assert_eq!(net.infer(&store, &x).unwrap().data(), x.data());
    }

    #[test]
    fn zero_tanh_layer_outputs_zero() {
        let mut store = ParamStore::new();
        let net = Network::build(
            "z",
            &[4],
            &[LayerSpec::dense(4, 2, Activation::Tanh)],
            &mut store,
            &mut rng(),
        )
        .unwrap();
        for id in net.param_ids() {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let x = Tensor::new(vec![2, 4], vec![1.0, -3.0, 7.0, 0.2, 5.0, 5.0, -5.0, 1.0]);
        assert!(net.infer(&store, &x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let mut store = ParamStore::new();
        let net = Network::build(
            "enc",
            &[1, 8, 8],
            &[LayerSpec::conv(
                1,
                2,
                ConvGeom { kernel: 2, stride: 2, padding: 0 },
                Activation::Relu,
            )],
            &mut store,
            &mut rng(),
        )
        .unwrap();
        let err = net
            .infer(&store, &Tensor::zeros(&[1, 1, 8, 7]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("enc") && err.contains("conv2d"), "{err}");
    }

    #[test]
    fn inconsistent_declaration_rejected() {
        let mut store = ParamStore::new();
        let err = Network::build(
            "bad",
            &[5],
            &[
                LayerSpec::dense(5, 4, Activation::Relu),
                LayerSpec::dense(3, 1, Activation::Identity),
            ],
            &mut store,
            &mut rng(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("layer 1 (dense)"), "{err}");
    }

    #[test]
    fn infer_matches_tape_forward_bitwise() {
        let mut store = ParamStore::new();
        let g = ConvGeom { kernel: 4, stride: 2, padding: 1 };
        let net = Network::build(
            "n",
            &[1, 16, 16],
            &[
                LayerSpec::conv(1, 3, g, Activation::LeakyRelu),
                LayerSpec::dense(3 * 8 * 8, 5, Activation::Tanh),
                LayerSpec::dense(5, 3 * 8 * 8, Activation::Relu),
                LayerSpec::reshape(&[3, 8, 8]),
                LayerSpec::conv_transpose(3, 1, g, Activation::Identity),
            ],
            &mut store,
            &mut rng(),
        )
        .unwrap();
        let x = Tensor::new(
            vec![2, 1, 16, 16],
            (0..512).map(|i| ((i * 37) % 17) as f64 / 17.0).collect(),
        );
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = net.forward(&tape, &store, xv).unwrap();
        let fast = net.infer(&store, &x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 1, 16, 16]);
        assert_eq!(tape.value(y).data(), fast.data());
    }
}
