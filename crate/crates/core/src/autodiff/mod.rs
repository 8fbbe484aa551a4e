//! Reverse-mode differentiation over a per-step computation graph.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are never
//! modified after they are pushed; [`Tape::backward`] returns a separate
//! [`Gradients`] table, so stored forward values stay intact.
//!
//! Only the handful of operations the feature extractors need are provided.
//! The contrastive losses compute their own analytic gradients with respect
//! to the feature maps (see [`accumulate_feature_gradients`]); those gradients
//! are then pushed through the network with a single backward pass.

mod conv;
mod gradcheck;

pub use conv::{conv2d_backward, conv2d_forward, conv2d_output_size, Padding};
pub use gradcheck::{grad_check, grad_check_with_floor, GradCheckReport};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance regularizer used by [`Tape::normalize_per_channel`].
pub const NORMALIZE_EPS: f64 = 1e-8;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        stride: (usize, usize),
        padding: Padding,
    },
    Relu(Var),
    Normalize {
        input: Var,
        inv_std: Vec<f64>,
    },
    Scale {
        input: Var,
        factor: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient is tracked for it).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        let value = conv2d_forward(self.value(input), self.value(kernel), stride, padding)?;
        let rg = self.requires_grad(input) || self.requires_grad(kernel);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.requires_grad(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// Standardizes every channel of a `[C, H, W]` map to spatial mean 0 and
    /// variance 1, dividing by `sqrt(var + eps)` (population variance).
    pub fn normalize_per_channel(&mut self, x: Var, eps: f64) -> Result<Var> {
        let input = self.value(x);
        let (c, h, w) = input.dims3()?;
        let n = h * w;
        if n < 2 {
            return Err(Error::Shape(format!(
                "normalization needs at least 2 positions per channel, got {h}x{w}"
            )));
        }
        let mut out = input.clone();
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let plane = out.channel_mut(ch);
            let rough = plane.iter().sum::<f64>() / n as f64;
            // second pass removes the rounding error of the first, so constant channels map to exact zeros
            let mean = rough + plane.iter().map(|v| v - rough).sum::<f64>() / n as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            plane.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Normalize { input: x, inv_std }, rg))
    }

    /// Returns `sqrt(1 - alpha^2) * x + alpha * eps` with `eps` standard normal.
    /// The noise is a constant for differentiation purposes.
    pub fn inject_noise<R: Rng + ?Sized>(&mut self, x: Var, alpha: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!(
                "noise level alpha must lie in [0, 1], got {alpha}"
            )));
        }
        if alpha == 0.0 {
            return Ok(x);
        }
        let keep = (1.0 - alpha * alpha).sqrt();
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v = keep * *v + alpha * e;
        }
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Scale { input: x, factor: keep }, rg))
    }

    /// Propagates the given output gradients back to every node that
    /// requires one. Several seeds may be supplied (one per model head).
    pub fn backward(&self, seeds: &[(Var, &Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for &(v, g) in seeds {
            if !self.value(v).same_shape(g) {
                return Err(Error::Shape(format!(
                    "seed gradient {:?} does not match node value {:?}",
                    g.shape(),
                    self.value(v).shape()
                )));
            }
            accumulate(&mut grads[v.0], g.clone())?;
            start = start.max(v.0 + 1);
        }

        for idx in (0..start).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (gi, gk) = conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        &g,
                        *stride,
                        *padding,
                        self.requires_grad(*input),
                        self.requires_grad(*kernel),
                    )?;
                    if let Some(gi) = gi {
                        accumulate(&mut grads[input.0], gi)?;
                    }
                    if let Some(gk) = gk {
                        accumulate(&mut grads[kernel.0], gk)?;
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g.clone();
                    for (gv, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads[x.0], gx)?;
                }
                Op::Normalize { input, inv_std } => {
                    let y = &node.value;
                    let (c, h, w) = y.dims3()?;
                    let n = (h * w) as f64;
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    for ch in 0..c {
                        let gy = g.channel(ch);
                        let yy = y.channel(ch);
                        let mean_g = gy.iter().sum::<f64>() / n;
                        let mean_gy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((d, &a), &b) in gx.channel_mut(ch).iter_mut().zip(gy).zip(yy) {
                            *d = inv_std[ch] * (a - mean_g - b * mean_gy);
                        }
                    }
                    accumulate(&mut grads[input.0], gx)?;
                }
                Op::Scale { input, factor } => {
                    let mut gx = g.clone();
                    gx.scale(*factor);
                    accumulate(&mut grads[input.0], gx)?;
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Gradient table produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, with zeros standing in for "no gradient".
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Result of [`accumulate_feature_gradients`].
#[derive(Clone, Debug)]
pub struct Accumulated {
    /// Sum of the per-evaluation loss values.
    pub loss: f64,
    /// Sum of the per-evaluation feature gradients, one tensor per feature map.
    pub grads: Vec<Tensor>,
}

/// Evaluates `eval` `reps` times on the detached feature values and sums the
/// returned feature-map gradients.
///
/// Each evaluation may use fresh random negatives; only the summed gradient
/// needs to be kept, and it is then propagated through the network with one
/// backward pass. `eval` receives the repetition index.
pub fn accumulate_feature_gradients<F>(
    features: &[Tensor],
    reps: usize,
    mut eval: F,
) -> Result<Accumulated>
where
    F: FnMut(usize, &[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    if reps == 0 {
        return Err(Error::InvalidArgument("repetition count must be at least 1".into()));
    }
    let mut total = Accumulated {
        loss: 0.0,
        grads: features.iter().map(|f| Tensor::zeros(f.shape())).collect(),
    };
    for rep in 0..reps {
        let (loss, grads) = eval(rep, features)?;
        if grads.len() != features.len() {
            return Err(Error::Shape(format!(
                "evaluation returned {} gradients for {} feature maps",
                grads.len(),
                features.len()
            )));
        }
        for (acc, g) in total.grads.iter_mut().zip(&grads) {
            acc.add_assign(g)?;
        }
        total.loss += loss;
    }
    Ok(total)
}
