use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NnError;
use crate::autodiff::{Matrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softplus,
    Tanh,
    Relu,
}

impl Activation {
    pub(crate) fn code(self) -> u32 {
        match self {
            Activation::Softplus => 0,
            Activation::Tanh => 1,
            Activation::Relu => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Softplus),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Relu),
            _ => None,
        }
    }

    fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Softplus => x.softplus(),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.relu(),
        }
    }

    fn apply_scalar(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => crate::autodiff::softplus(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Softplus => "softplus",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, NnError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "softplus" => Ok(Activation::Softplus),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(NnError::UnknownActivation(other.to_owned())),
        }
    }
}

/// Architecture of a scalar-valued MLP `R^in_dim -> R`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(in_dim: usize, widths: Vec<usize>, activation: Activation) -> Self {
        Self {
            in_dim,
            widths,
            activation,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.widths.is_empty() {
            return Err(NnError::NoHiddenLayers);
        }
        if self.in_dim == 0 {
            return Err(NnError::ZeroWidth(0));
        }
        if let Some(i) = self.widths.iter().position(|&w| w == 0) {
            return Err(NnError::ZeroWidth(i + 1));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.widths.len() + 1);
        let mut fan_in = self.in_dim;
        for &w in self.widths.iter().chain(std::iter::once(&1)) {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Flat parameter vector of an [`MlpSpec`].
///
/// Per layer: the `fan_in x fan_out` weight matrix row-major, then the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    spec: MlpSpec,
    flat: Vec<f64>,
    seed: u64,
}

impl MlpParams {
    /// Uniform weights in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self, NnError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flat = Vec::with_capacity(spec.param_count());
        for (fan_in, fan_out) in spec.layer_dims() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            flat.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)));
            flat.extend(std::iter::repeat(0.0).take(fan_out));
        }
        Ok(Self { spec, flat, seed })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self, NnError> {
        spec.validate()?;
        let flat = vec![0.0; spec.param_count()];
        Ok(Self { spec, flat, seed: 0 })
    }

    pub fn from_flat(spec: MlpSpec, flat: Vec<f64>, seed: u64) -> Result<Self, NnError> {
        spec.validate()?;
        let expected = spec.param_count();
        if flat.len() != expected {
            return Err(NnError::LengthMismatch {
                expected,
                got: flat.len(),
            });
        }
        Ok(Self { spec, flat, seed })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    fn offsets(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        let mut at = 0;
        for (i, o) in self.spec.layer_dims() {
            out.push((at, i, o));
            at += i * o + o;
        }
        out
    }

    /// Weight matrix and bias of layer `k` (the output layer is last).
    pub fn layer(&self, k: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (at, i, o) = self.offsets()[k];
        let w = ArrayView2::from_shape((i, o), &self.flat[at..at + i * o]).expect("layer shape");
        let b = ArrayView1::from(&self.flat[at + i * o..at + i * o + o]);
        (w, b)
    }

    pub fn num_layers(&self) -> usize {
        self.spec.widths.len() + 1
    }

    pub fn set_output_bias(&mut self, value: f64) {
        let n = self.flat.len();
        self.flat[n - 1] = value;
    }

    /// Multiplies the output layer weights by `factor`.
    pub fn scale_output_weights(&mut self, factor: f64) {
        let (at, i, o) = *self.offsets().last().expect("output layer");
        for w in &mut self.flat[at..at + i * o] {
            *w *= factor;
        }
    }

    /// Places the parameters on `tape`, as leaves when `trainable`, else as
    /// constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundMlp<'t> {
        let layers = self
            .offsets()
            .into_iter()
            .map(|(at, i, o)| {
                let w = Array2::from_shape_vec((i, o), self.flat[at..at + i * o].to_vec()).expect("weight shape");
                let b = Array2::from_shape_vec((1, o), self.flat[at + i * o..at + i * o + o].to_vec()).expect("bias shape");
                if trainable {
                    (tape.variable(w), tape.variable(b))
                } else {
                    (tape.constant(w), tape.constant(b))
                }
            })
            .collect();
        BoundMlp {
            layers,
            activation: self.spec.activation,
            in_dim: self.spec.in_dim,
        }
    }

    /// Output for a single input vector, as a scalar tape node.
    pub fn forward_point<'t>(&self, tape: &'t Tape, x: &[f64]) -> Result<Var<'t>, NnError> {
        if x.len() != self.spec.in_dim {
            return Err(NnError::DimensionMismatch {
                expected: self.spec.in_dim,
                got: x.len(),
            });
        }
        let input = tape.constant(Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row"));
        Ok(self.bind(tape, true).forward(input))
    }

    /// Plain numeric forward pass over the rows of `x`.
    pub fn evaluate(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>, NnError> {
        if x.ncols() != self.spec.in_dim {
            return Err(NnError::DimensionMismatch {
                expected: self.spec.in_dim,
                got: x.ncols(),
            });
        }
        let act = self.spec.activation;
        let mut h: Matrix = x.to_owned();
        let layers = self.num_layers();
        for k in 0..layers {
            let (w, b) = self.layer(k);
            h = h.dot(&w) + &b;
            if k + 1 < layers {
                h.mapv_inplace(|v| act.apply_scalar(v));
            }
        }
        Ok(h.column(0).to_owned())
    }
}

/// An [`MlpParams`] placed on a tape.
pub struct BoundMlp<'t> {
    layers: Vec<(Var<'t>, Var<'t>)>,
    activation: Activation,
    in_dim: usize,
}

impl<'t> BoundMlp<'t> {
    /// Row-batched forward pass: `n x in_dim -> n x 1`.
    pub fn forward(&self, x: Var<'t>) -> Var<'t> {
        assert_eq!(x.shape().1, self.in_dim, "network input width");
        let last = self.layers.len() - 1;
        let mut h = x;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w).add_row(b);
            if k < last {
                h = self.activation.apply(h);
            }
        }
        h
    }

    /// Parameter nodes in flat-vector order.
    pub fn params(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Concatenates per-layer gradient nodes (as returned for
    /// [`BoundMlp::params`]) into one flat vector.
    pub fn flatten(grads: &[Var<'t>]) -> Vec<f64> {
        let mut out = Vec::new();
        for g in grads {
            out.extend(g.value_rc().iter().copied());
        }
        out
    }
}
