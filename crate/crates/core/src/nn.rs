//! Layer helpers shared by the networks: initialisers and named-parameter blocks.

use rand::Rng;

use crate::diffcore::{Bound, Padding, Params, Real, Tape, Tensor, Var};
use crate::error::Result;

/// He-uniform bound for layers followed by a rectifier.
fn he_bound(fan_in: usize) -> f32 {
    (6.0 / fan_in as f32).sqrt()
}

pub(crate) fn uniform(r: &mut impl Rng, dims: &[usize], bound: f32) -> Tensor {
    if bound == 0.0 {
        return Tensor::zeros(dims);
    }
    Tensor::from_fn(dims, |_| r.random_range(-bound..bound))
}

/// Adds `{name}.w` `[co, ci, k, k]` and `{name}.b` `[co]`.
pub(crate) fn add_conv(p: &mut Params, r: &mut impl Rng, name: &str, co: usize, ci: usize, k: usize, gain: f32) {
    let bound = gain * he_bound(ci * k * k);
    p.insert(format!("{name}.w"), uniform(r, &[co, ci, k, k], bound));
    p.insert(format!("{name}.b"), Tensor::zeros(&[co]));
}

/// Adds `{name}.w` `[m, n]` and `{name}.b` `[m]`.
pub(crate) fn add_dense(p: &mut Params, r: &mut impl Rng, name: &str, m: usize, n: usize, gain: f32) {
    let bound = gain * he_bound(n);
    p.insert(format!("{name}.w"), uniform(r, &[m, n], bound));
    p.insert(format!("{name}.b"), Tensor::zeros(&[m]));
}

pub(crate) fn conv<T: Real>(t: &mut Tape<T>, b: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let y = t.conv2d(x, b.get(&format!("{name}.w")), stride, Padding::Zero)?;
    t.bias_add(y, b.get(&format!("{name}.b")))
}

pub(crate) fn dense<T: Real>(t: &mut Tape<T>, b: &Bound, name: &str, x: Var) -> Result<Var> {
    t.dense(x, b.get(&format!("{name}.w")), b.get(&format!("{name}.b")))
}

/// Sums per-sample gradient lists in order.
pub(crate) fn accumulate(acc: &mut Option<Vec<Tensor>>, g: Vec<Tensor>) {
    match acc {
        None => *acc = Some(g),
        Some(a) => {
            for (x, y) in a.iter_mut().zip(&g) {
                for (u, v) in x.data_mut().iter_mut().zip(y.data()) {
                    *u += v;
                }
            }
        }
    }
}

pub(crate) fn scale_all(g: &mut [Tensor], c: f32) {
    for t in g {
        for v in t.data_mut() {
            *v *= c;
        }
    }
}
