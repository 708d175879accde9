//! Dense array math and the reverse-mode tape.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var, NORM_EPS};
pub use tensor::Tensor;

/// Central differences `(f(x+h) − f(x−h)) / 2h`, one coordinate at a time.
pub fn finite_difference_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let v = x.data()[i];
        let up = f(&x.with_value(i, v + h));
        let down = f(&x.with_value(i, v - h));
        out.push((up - down) / (2.0 * h));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
///
/// The floor keeps gradients that are zero up to rounding from registering as
/// large relative errors.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / a.norm().max(b.norm()).max(floor)
}
