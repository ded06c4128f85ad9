//! Network definitions on top of the tape: dense MLPs (with sine, ReLU or
//! identity activations) and a compact convolutional denoiser with a
//! sinusoidal timestep embedding.

use crate::error::{Error, Result};
use crate::nnkit::params::ParamSet;
use crate::nnkit::tape::{Node, Tape};
use crate::nnkit::tensor::Tensor;
use crate::rng::Rng;

/// Hidden-layer activation for [`forward_mlp`]; the final layer is always
/// linear.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Sine(f64),
    Relu,
    Identity,
}

/// Fully-connected layer widths, `[input, hidden..., output]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid("MLP needs at least [in, out] nonzero widths"));
        }
        Ok(MlpSpec { widths })
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn build_params(&self) -> ParamSet {
        let mut decls: Vec<(String, Vec<usize>)> = Vec::new();
        for i in 0..self.n_layers() {
            decls.push((format!("layer{i}.w"), vec![self.widths[i], self.widths[i + 1]]));
            decls.push((format!("layer{i}.b"), vec![self.widths[i + 1]]));
        }
        let borrowed: Vec<(&str, Vec<usize>)> =
            decls.iter().map(|(n, s)| (n.as_str(), s.clone())).collect();
        ParamSet::build(&borrowed).expect("generated layout is valid")
    }

    /// Standard SIREN initialization: first layer uniform in [-1/n, 1/n],
    /// later layers uniform in [-sqrt(6/n)/w0, sqrt(6/n)/w0]; biases uniform
    /// in [-1/sqrt(n), 1/sqrt(n)].
    pub fn init_siren(&self, params: &mut ParamSet, w0: f64, rng: &mut Rng) -> Result<()> {
        for i in 0..self.n_layers() {
            let fan_in = self.widths[i] as f64;
            let bound = if i == 0 { 1.0 / fan_in } else { (6.0 / fan_in).sqrt() / w0 };
            for v in params.slice_mut(&format!("layer{i}.w"))? {
                *v = rng.uniform_in(-bound, bound);
            }
            let bbound = 1.0 / fan_in.sqrt();
            for v in params.slice_mut(&format!("layer{i}.b"))? {
                *v = rng.uniform_in(-bbound, bbound);
            }
        }
        Ok(())
    }

    fn check_params(&self, params: &ParamSet) -> Result<()> {
        for i in 0..self.n_layers() {
            let w = params.entry(&format!("layer{i}.w"))?;
            if w.shape != [self.widths[i], self.widths[i + 1]] {
                return Err(Error::ShapeMismatch {
                    context: "mlp params vs arch",
                    expected: vec![self.widths[i], self.widths[i + 1]],
                    got: w.shape.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Build the MLP forward pass on an existing tape. `input` must be a
/// `(rows, widths[0])` node.
pub fn mlp_on(
    tape: &mut Tape,
    params: &ParamSet,
    input: Node,
    spec: &MlpSpec,
    act: Activation,
) -> Result<Node> {
    spec.check_params(params)?;
    let in_shape = tape.value(input).shape().to_vec();
    if in_shape.len() != 2 || in_shape[1] != spec.input_width() {
        return Err(Error::ShapeMismatch {
            context: "mlp input",
            expected: vec![in_shape[0], spec.input_width()],
            got: in_shape,
        });
    }
    let mut x = input;
    for i in 0..spec.n_layers() {
        let w = tape.param(params, &format!("layer{i}.w"))?;
        let b = tape.param(params, &format!("layer{i}.b"))?;
        let lin = tape.matmul(x, w)?;
        x = tape.add_row_vec(lin, b)?;
        if i + 1 < spec.n_layers() {
            x = match act {
                Activation::Sine(w0) => tape.sin_scale(x, w0),
                Activation::Relu => tape.relu(x),
                Activation::Identity => x,
            };
        }
        tape.value(x).assert_finite("mlp layer output")?;
    }
    Ok(x)
}

/// Run the MLP on a fresh tape, returning the retained graph and output node.
pub fn forward_mlp(
    params: &ParamSet,
    input: &Tensor,
    spec: &MlpSpec,
    act: Activation,
) -> Result<(Tape, Node)> {
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let out = mlp_on(&mut tape, params, x, spec, act)?;
    Ok((tape, out))
}

/// One convolution layer: `in_ch -> out_ch` with a square odd kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

/// Convolutional denoiser architecture. Hidden layers use ReLU; the final
/// layer is linear. A timestep embedding of width `layers[0].out_ch` is added
/// per-channel after the first layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub layers: Vec<ConvLayerSpec>,
}

impl ConvSpec {
    pub fn new(layers: Vec<ConvLayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("conv net needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].out_ch != w[1].in_ch {
                return Err(Error::invalid(format!(
                    "conv channel mismatch: {} -> {}",
                    w[0].out_ch, w[1].in_ch
                )));
            }
        }
        Ok(ConvSpec { layers })
    }

    /// Desk-scale denoiser: feature channels 16-32-32-16 with 3x3 kernels and
    /// a linear 1-channel head.
    pub fn denoiser_default() -> Self {
        let chans = [16usize, 32, 32, 16];
        let mut layers = Vec::new();
        let mut prev = 1;
        for &c in &chans {
            layers.push(ConvLayerSpec { in_ch: prev, out_ch: c, kernel: 3 });
            prev = c;
        }
        layers.push(ConvLayerSpec { in_ch: prev, out_ch: 1, kernel: 3 });
        ConvSpec { layers }
    }

    pub fn embed_dim(&self) -> usize {
        self.layers[0].out_ch
    }

    pub fn build_params(&self) -> ParamSet {
        let mut decls: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            decls.push((format!("conv{i}.w"), vec![l.out_ch, l.in_ch, l.kernel, l.kernel]));
            decls.push((format!("conv{i}.b"), vec![l.out_ch]));
        }
        let borrowed: Vec<(&str, Vec<usize>)> =
            decls.iter().map(|(n, s)| (n.as_str(), s.clone())).collect();
        ParamSet::build(&borrowed).expect("generated layout is valid")
    }

    /// He-uniform weights, zero biases, zero-initialized final layer (the net
    /// starts out predicting zero noise).
    pub fn init_he(&self, params: &mut ParamSet, rng: &mut Rng) -> Result<()> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let fan_in = (l.in_ch * l.kernel * l.kernel) as f64;
            let bound = (6.0 / fan_in).sqrt();
            for v in params.slice_mut(&format!("conv{i}.w"))? {
                *v = if i == last { 0.0 } else { rng.uniform_in(-bound, bound) };
            }
        }
        Ok(())
    }
}

/// Sinusoidal embedding of a timestep index; `dim` must be even.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    assert!(dim >= 2 && dim.is_multiple_of(2), "embedding dim must be even");
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        data[i] = (t as f64 * freq).sin();
        data[half + i] = (t as f64 * freq).cos();
    }
    Tensor::new(vec![dim], data).expect("shape is consistent")
}

/// Build the conv net forward pass on an existing tape. `input` must be a
/// `(in_ch, H, W)` node; `t_embed` a `(layers[0].out_ch,)` tensor added
/// per-channel after the first layer.
pub fn convnet_on(
    tape: &mut Tape,
    params: &ParamSet,
    input: Node,
    spec: &ConvSpec,
    t_embed: &Tensor,
) -> Result<Node> {
    if t_embed.shape() != [spec.embed_dim()] {
        return Err(Error::ShapeMismatch {
            context: "timestep embedding",
            expected: vec![spec.embed_dim()],
            got: t_embed.shape().to_vec(),
        });
    }
    let n_layers = spec.layers.len();
    let mut x = input;
    for i in 0..n_layers {
        let w = tape.param(params, &format!("conv{i}.w"))?;
        let b = tape.param(params, &format!("conv{i}.b"))?;
        x = tape.conv2d(x, w)?;
        x = tape.add_chan_bias(x, b)?;
        if i == 0 {
            let e = tape.leaf(t_embed.clone());
            x = tape.add_chan_bias(x, e)?;
        }
        if i + 1 < n_layers {
            x = tape.relu(x);
        }
    }
    tape.value(x).assert_finite("convnet output")?;
    Ok(x)
}

/// Run the conv net on a fresh tape.
pub fn forward_convnet(
    params: &ParamSet,
    input: &Tensor,
    spec: &ConvSpec,
    t_embed: &Tensor,
) -> Result<(Tape, Node)> {
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let out = convnet_on(&mut tape, params, x, spec, t_embed)?;
    Ok((tape, out))
}
