//! Multilayer perceptrons for `v(x, t)` and `g(x, t)`, reverse-mode
//! gradients and Adam.
//!
//! A network maps `d + 1` inputs (state with time appended as the last
//! coordinate) through `depth` affine layers with LeakyReLU between them.
//! Weights are stored `in x out` so a batch forward is `X W + b`.

mod adam;
mod tape;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::{adam_step, AdamState};
pub use tape::{Gradients, Tape, Var};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const DEFAULT_WIDTH: usize = 256;

/// Depth used for state dimension `d`: 3 affine layers, 5 above 50 dimensions.
pub fn default_depth(d: usize) -> usize {
    if d > 50 {
        5
    } else {
        3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Input width, `d + 1`.
    pub input: usize,
    pub output: usize,
    pub width: usize,
    /// Number of affine layers.
    pub depth: usize,
}

impl Architecture {
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|l| {
                let i = if l == 0 { self.input } else { self.width };
                let o = if l + 1 == self.depth { self.output } else { self.width };
                (i, o)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    arch: Architecture,
    pub layers: Vec<Layer>,
}

/// Uniform fan-in initialization: `W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
/// zero biases.
pub fn init_network(d: usize, out_dim: usize, depth: usize, width: usize, seed: u64) -> Result<NetworkParams> {
    if depth < 2 {
        return Err(Error::InvalidArgument(format!("depth must be at least 2, got {depth}")));
    }
    if d == 0 || out_dim == 0 || width == 0 {
        return Err(Error::InvalidArgument("dimensions must be positive".into()));
    }
    let arch = Architecture {
        input: d + 1,
        output: out_dim,
        width,
        depth,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = arch
        .layer_dims()
        .into_iter()
        .map(|(i, o)| {
            let bound = 1.0 / (i as f64).sqrt();
            Layer {
                weight: Array2::from_shape_fn((i, o), |_| rng.random_range(-bound..bound)),
                bias: Array1::zeros(o),
            }
        })
        .collect();
    Ok(NetworkParams { arch, layers })
}

impl NetworkParams {
    pub fn zeros(arch: Architecture) -> Self {
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Layer {
                weight: Array2::zeros((i, o)),
                bias: Array1::zeros(o),
            })
            .collect();
        NetworkParams { arch, layers }
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    /// State dimension `d`.
    pub fn state_dim(&self) -> usize {
        self.arch.input - 1
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    /// Layer by layer: weight (row-major) then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            v.extend(l.weight.iter());
            v.extend(l.bias.iter());
        }
        v
    }

    pub fn unflatten(arch: Architecture, flat: &[f64]) -> Result<Self> {
        if flat.len() != arch.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                arch.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        let mut layers = Vec::with_capacity(arch.depth);
        for (i, o) in arch.layer_dims() {
            let weight = Array2::from_shape_vec((i, o), flat[off..off + i * o].to_vec()).expect("sized slice");
            off += i * o;
            let bias = Array1::from(flat[off..off + o].to_vec());
            off += o;
            layers.push(Layer { weight, bias });
        }
        Ok(NetworkParams { arch, layers })
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Batched evaluation on inputs that already include the time column.
    pub fn forward_inputs(&self, inputs: ArrayView2<f64>) -> Array2<f64> {
        let mut h = inputs.dot(&self.layers[0].weight) + &self.layers[0].bias;
        for l in &self.layers[1..] {
            h.mapv_inplace(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
            h = h.dot(&l.weight) + &l.bias;
        }
        h
    }

    /// Batched evaluation at a common time `t`.
    pub fn forward_batch(&self, x: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        if x.ncols() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim(),
                got: x.ncols(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) || !t.is_finite() {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(self.forward_inputs(with_time(x, t).view()))
    }

    /// Single-point evaluation.
    pub fn forward(&self, x: ArrayView1<f64>, t: f64) -> Result<Array1<f64>> {
        let out = self.forward_batch(x.insert_axis(Axis(0)), t)?;
        Ok(out.row(0).to_owned())
    }

    /// Places the parameters on a tape as leaves.
    pub fn to_tape(&self, tape: &mut Tape) -> NetVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = tape.leaf(l.weight.clone());
                let b = tape.leaf(l.bias.clone().insert_axis(Axis(0)));
                (w, b)
            })
            .collect();
        NetVars { arch: self.arch, layers }
    }
}

/// Appends a constant time column.
pub fn with_time(x: ArrayView2<f64>, t: f64) -> Array2<f64> {
    let mut out = Array2::from_elem((x.nrows(), x.ncols() + 1), t);
    out.slice_mut(ndarray::s![.., ..x.ncols()]).assign(&x);
    out
}

/// Parameters of one network as tape variables.
#[derive(Debug, Clone)]
pub struct NetVars {
    arch: Architecture,
    layers: Vec<(Var, Var)>,
}

impl NetVars {
    /// Tape forward on `inputs` (`B x (d+1)`, time column included).
    pub fn forward(&self, tape: &mut Tape, inputs: Var) -> Result<Var> {
        let mut h = inputs;
        for (k, (w, b)) in self.layers.iter().enumerate() {
            if k > 0 {
                h = tape.leaky_relu(h, LEAKY_SLOPE)?;
            }
            h = tape.linear(h, *w, *b)?;
        }
        Ok(h)
    }

    /// Tape forward on a state variable `x` (`B x d`) at time `t`.
    pub fn forward_at(&self, tape: &mut Tape, x: Var, t: f64) -> Result<Var> {
        let b = tape.shape(x).0;
        let tcol = tape.leaf(Array2::from_elem((b, 1), t));
        let inp = tape.concat_cols(x, tcol)?;
        self.forward(tape, inp)
    }

    /// Reads this network's gradient out of a backward pass.
    pub fn gradient(&self, grads: &Gradients) -> Result<NetworkParams> {
        let layers = self
            .layers
            .iter()
            .map(|(w, b)| {
                Ok(Layer {
                    weight: grads.wrt(*w)?,
                    bias: grads.wrt(*b)?.index_axis_move(Axis(0), 0),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NetworkParams { arch: self.arch, layers })
    }
}

/// Value and gradient of a scalar built on a fresh tape from the given
/// networks. The closure receives the networks as tape variables and must
/// return a `1 x 1` node of the same tape.
pub fn grad_scalar<F>(params: &[&NetworkParams], loss: F) -> Result<(f64, Vec<NetworkParams>)>
where
    F: FnOnce(&mut Tape, &[NetVars]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<NetVars> = params.iter().map(|p| p.to_tape(&mut tape)).collect();
    let out = loss(&mut tape, &vars)?;
    let value = tape.value(out).first().copied().unwrap_or(f64::NAN);
    let grads = tape.backward(out)?;
    let g = vars.iter().map(|v| v.gradient(&grads)).collect::<Result<Vec<_>>>()?;
    Ok((value, g))
}
