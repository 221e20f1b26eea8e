//! Dense linear algebra, loss kernels, optimizer and gradient oracle.
//!
//! Everything is `f64` and single-threaded; gradients are written out in
//! closed form by each model rather than taped.

mod adam;
mod gradcheck;
mod ops;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
pub use ops::{
    argmax, cross_entropy, log_sum_exp, mse, relu, relu_backward_inplace, relu_mask, softmax,
};
pub use params::{Param, ParamSet};
pub use tensor::{dot, norm, Tensor2};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

/// Tensor with entries drawn from `U(-bound, bound)`.
pub fn uniform_init<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Tensor2 {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor2::from_vec(rows, cols, data).expect("shape")
}

/// Affine layer `x·W + b` over a batch of rows.
pub fn affine(x: &Tensor2, w: &Tensor2, b: &Tensor2) -> crate::Result<Tensor2> {
    let mut out = x.matmul(w)?;
    out.add_row_broadcast(b)?;
    Ok(out)
}
