use rand::Rng;
use serde::{Deserialize, Serialize};

use super::store::ParamStore;
use super::{NnError, Result};

/// Topology of a residual LeakyReLU MLP.
///
/// With `block_count == 0` the network is a single affine map from input to
/// output. Otherwise it is an activated input projection, `block_count`
/// residual blocks of `depth_per_block` activated layers each, and a linear
/// head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_dim: usize,
    pub block_count: usize,
    pub depth_per_block: usize,
    pub slope: f64,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dim == 0 {
            return Err(NnError::BadSpec(format!("all dims must be positive: {self:?}")));
        }
        if self.block_count > 0 && self.depth_per_block == 0 {
            return Err(NnError::BadSpec("residual blocks need depth > 0".into()));
        }
        Ok(())
    }

    /// Number of linear layers.
    pub fn layer_count(&self) -> usize {
        if self.block_count == 0 {
            1
        } else {
            2 + self.block_count * self.depth_per_block
        }
    }
}

#[inline]
pub fn leaky_relu(z: f64, slope: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        slope * z
    }
}

#[inline]
fn leaky_grad(z: f64, slope: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        slope
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Linear {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

impl Linear {
    fn forward(&self, params: &[f64], x: &[f64], out: &mut Vec<f64>) {
        let w = &params[self.w..self.w + self.rows * self.cols];
        let b = &params[self.b..self.b + self.rows];
        out.clear();
        out.extend(w.chunks_exact(self.cols).zip(b).map(|(row, bias)| {
            bias + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
        }));
    }

    /// Accumulates weight/bias gradients and writes the input gradient.
    fn backward(&self, params: &[f64], x: &[f64], gy: &[f64], grads: &mut [f64], gx: &mut Vec<f64>) {
        let w = &params[self.w..self.w + self.rows * self.cols];
        gx.clear();
        gx.resize(self.cols, 0.0);
        {
            let gw = &mut grads[self.w..self.w + self.rows * self.cols];
            for ((grow, row), &g) in gw.chunks_exact_mut(self.cols).zip(w.chunks_exact(self.cols)).zip(gy) {
                if g == 0.0 {
                    continue;
                }
                for ((gwij, xi), (gxi, wij)) in grow.iter_mut().zip(x).zip(gx.iter_mut().zip(row)) {
                    *gwij += g * xi;
                    *gxi += g * wij;
                }
            }
        }
        let gb = &mut grads[self.b..self.b + self.rows];
        gb.iter_mut().zip(gy).for_each(|(a, g)| *a += g);
    }
}

/// Intermediates recorded by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    /// Input to each linear layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each activated layer (all but the head).
    pre: Vec<Vec<f64>>,
    layers: usize,
}

/// A residual MLP whose parameters live in an external [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: NetworkSpec,
    layers: Vec<Linear>,
    range: std::ops::Range<usize>,
}

impl Mlp {
    /// Allocates this network's slices in `store`, names prefixed by `prefix`.
    pub fn build(spec: NetworkSpec, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        spec.validate()?;
        let start = store.len();
        let dims: Vec<(usize, usize)> = if spec.block_count == 0 {
            vec![(spec.output_dim, spec.input_dim)]
        } else {
            let mut d = vec![(spec.hidden_dim, spec.input_dim)];
            d.extend(std::iter::repeat_n(
                (spec.hidden_dim, spec.hidden_dim),
                spec.block_count * spec.depth_per_block,
            ));
            d.push((spec.output_dim, spec.hidden_dim));
            d
        };
        let layers = dims
            .into_iter()
            .enumerate()
            .map(|(i, (rows, cols))| Linear {
                w: store.alloc(format!("{prefix}l{i}.w"), rows, cols),
                b: store.alloc(format!("{prefix}l{i}.b"), rows, 1),
                rows,
                cols,
            })
            .collect();
        Ok(Self { spec, layers, range: start..store.len() })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Index range of this network inside its store.
    pub fn param_range(&self) -> std::ops::Range<usize> {
        self.range.clone()
    }

    /// Kaiming-uniform weights, zero biases. With `zero_head` the final layer
    /// is all zeros so the network initially outputs exactly zero.
    pub fn init_kaiming<R: Rng + ?Sized>(&self, values: &mut [f64], rng: &mut R, zero_head: bool) {
        let gain = (2.0 / (1.0 + self.spec.slope * self.spec.slope)).sqrt();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let bound = if zero_head && i == last { 0.0 } else { gain * (3.0 / l.cols as f64).sqrt() };
            for v in &mut values[l.w..l.w + l.rows * l.cols] {
                *v = if bound == 0.0 { 0.0 } else { rng.random_range(-bound..bound) };
            }
            values[l.b..l.b + l.rows].iter_mut().for_each(|b| *b = 0.0);
        }
    }

    /// Zeroes the final layer.
    pub fn zero_head(&self, values: &mut [f64]) {
        let l = self.layers.last().unwrap();
        values[l.w..l.w + l.rows * l.cols].iter_mut().for_each(|v| *v = 0.0);
        values[l.b..l.b + l.rows].iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn forward(&self, params: &[f64], input: &[f64], tape: &mut Tape) -> Result<Vec<f64>> {
        if input.len() != self.spec.input_dim {
            return Err(NnError::DimMismatch { expected: self.spec.input_dim, got: input.len() });
        }
        let slope = self.spec.slope;
        tape.inputs.clear();
        tape.pre.clear();
        tape.layers = self.layers.len();
        let mut out = Vec::new();
        if self.spec.block_count == 0 {
            tape.inputs.push(input.to_vec());
            self.layers[0].forward(params, input, &mut out);
            return Ok(out);
        }
        let mut z = Vec::new();
        self.layers[0].forward(params, input, &mut z);
        tape.inputs.push(input.to_vec());
        let mut h: Vec<f64> = z.iter().map(|&v| leaky_relu(v, slope)).collect();
        tape.pre.push(z);
        let mut li = 1;
        for _ in 0..self.spec.block_count {
            let skip = h.clone();
            for _ in 0..self.spec.depth_per_block {
                let mut z = Vec::new();
                self.layers[li].forward(params, &h, &mut z);
                let next: Vec<f64> = z.iter().map(|&v| leaky_relu(v, slope)).collect();
                tape.inputs.push(std::mem::replace(&mut h, next));
                tape.pre.push(z);
                li += 1;
            }
            h.iter_mut().zip(&skip).for_each(|(a, s)| *a += s);
        }
        self.layers[li].forward(params, &h, &mut out);
        tape.inputs.push(h);
        Ok(out)
    }

    /// Forward pass without recording.
    pub fn infer(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        self.forward(params, input, &mut Tape::default())
    }

    /// Accumulates parameter gradients into `grads` (a buffer shaped like the
    /// whole store) and returns the gradient with respect to the input.
    pub fn backward(&self, params: &[f64], tape: &Tape, output_grad: &[f64], grads: &mut [f64]) -> Result<Vec<f64>> {
        if tape.layers != self.layers.len() || tape.inputs.len() != self.layers.len() {
            return Err(NnError::TapeMismatch);
        }
        if output_grad.len() != self.spec.output_dim {
            return Err(NnError::DimMismatch { expected: self.spec.output_dim, got: output_grad.len() });
        }
        let slope = self.spec.slope;
        let mut gx = Vec::new();
        let last = self.layers.len() - 1;
        self.layers[last].backward(params, &tape.inputs[last], output_grad, grads, &mut gx);
        if self.spec.block_count == 0 {
            return Ok(gx);
        }
        let mut gh = gx;
        let mut li = last;
        for _ in 0..self.spec.block_count {
            let skip = gh.clone();
            for _ in 0..self.spec.depth_per_block {
                li -= 1;
                let gz: Vec<f64> =
                    gh.iter().zip(&tape.pre[li]).map(|(g, &z)| g * leaky_grad(z, slope)).collect();
                self.layers[li].backward(params, &tape.inputs[li], &gz, grads, &mut gh);
            }
            gh.iter_mut().zip(&skip).for_each(|(a, s)| *a += s);
        }
        debug_assert_eq!(li, 1);
        let gz: Vec<f64> = gh.iter().zip(&tape.pre[0]).map(|(g, &z)| g * leaky_grad(z, slope)).collect();
        let mut gin = Vec::new();
        self.layers[0].backward(params, &tape.inputs[0], &gz, grads, &mut gin);
        Ok(gin)
    }
}
