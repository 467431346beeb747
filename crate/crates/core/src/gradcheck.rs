//! Central finite-difference checks for graph gradients.

use std::sync::Arc;

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central differences of a scalar function, one coordinate at a time.
pub fn numerical_gradient(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, step: f64) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.raw_dim());
    for i in 0..x.len() {
        let orig = probe.as_slice().expect("contiguous")[i];
        probe.as_slice_mut().unwrap()[i] = orig + step;
        let up = f(&probe)?;
        probe.as_slice_mut().unwrap()[i] = orig - step;
        let down = f(&probe)?;
        probe.as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let norm = |t: &Tensor| t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub relative_error: f64,
}

/// Compares the reverse-mode gradient of `loss(x)` w.r.t. `x` against
/// central differences. `loss` must build the same function on both passes.
pub fn check_input_gradient(
    x: &Tensor,
    step: f64,
    loss: impl Fn(&mut Graph, &Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let xv = g.leaf("input", Arc::new(x.clone()));
    let l = loss(&mut g, &xv)?;
    let grads = g.backward(&l)?;
    let analytic = grads
        .get("input")
        .cloned()
        .ok_or_else(|| Error::Validation("loss does not depend on its input".into()))?;
    let numeric = numerical_gradient(
        |probe| {
            let mut g = Graph::inference();
            let xv = g.constant(probe.clone());
            Ok(loss(&mut g, &xv)?.item())
        },
        x,
        step,
    )?;
    let relative_error = relative_error(&analytic, &numeric);
    Ok(GradCheckReport {
        analytic,
        numeric,
        relative_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn sum_squares_gradient_checks() {
        let x = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.5, -1.0, 2.0]).unwrap();
        let r = check_input_gradient(&x, DEFAULT_STEP, |g, v| Ok(g.sum_squares(v))).unwrap();
        assert!(r.relative_error < 1e-8);
        assert_eq!(r.analytic.as_slice().unwrap(), &[1.0, -2.0, 4.0]);
    }
}
