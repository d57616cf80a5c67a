//! Finite-difference verification of the reverse sweep.
//!
//! The analytic gradient comes from the f32 tape; the central differences are
//! evaluated on an f64 tape so round-off does not swamp the comparison.

use super::real::Real;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{LadaError, Result};

/// A scalar function of one tensor, evaluable at any precision.
pub trait Objective {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// max over checked coordinates of |a - n| / max(1, |a|, |n|)
    pub max_rel_error: f64,
    pub worst_coord: usize,
    /// smallest |pre-activation| at any rectifier for the base point
    pub kink_margin: f64,
}

fn eval_f64<F: Objective>(f: &F, x: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(x.clone(), false);
    let out = f.eval(&mut tape, xv)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(LadaError::InvalidInput(format!(
            "grad_check objective must be scalar, got {:?}",
            v.dims()
        )));
    }
    Ok(v.item())
}

/// Checks every coordinate of `x`.
pub fn grad_check<F: Objective>(f: &F, x: &Tensor<f32>, eps: f64) -> Result<f64> {
    let coords: Vec<usize> = (0..x.len()).collect();
    Ok(grad_check_coords(f, x, eps, &coords)?.max_rel_error)
}

/// Checks the listed coordinates only (for inputs too large to sweep fully).
pub fn grad_check_coords<F: Objective>(f: &F, x: &Tensor<f32>, eps: f64, coords: &[usize]) -> Result<GradCheck> {
    if eps <= 0.0 {
        return Err(LadaError::InvalidInput("grad_check eps must be positive".into()));
    }
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f.eval(&mut tape, xv)?;
    let analytic = tape.backward(out)?.wrt(xv);
    let kink_margin = tape.kink_margin();

    let base = x.cast::<f64>();
    let mut worst = (0.0f64, 0usize);
    for &c in coords {
        let mut plus = base.clone();
        plus.data_mut()[c] += eps;
        let mut minus = base.clone();
        minus.data_mut()[c] -= eps;
        let numeric = (eval_f64(f, &plus)? - eval_f64(f, &minus)?) / (2.0 * eps);
        let a = analytic.data()[c] as f64;
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if err > worst.0 {
            worst = (err, c);
        }
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_coord: worst.1,
        kink_margin,
    })
}
