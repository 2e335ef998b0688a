//! Central finite-difference gradient checking.

use super::{Graph, Mat, Tensor, TensorError};

/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` at coordinate `i`.
pub fn central_difference<F>(mut value: F, point: &[f64], coord: usize, step: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    x[coord] = point[coord] + step;
    let plus = value(&x);
    x[coord] = point[coord] - step;
    let minus = value(&x);
    (plus - minus) / (2.0 * step)
}

/// Compares `analytic[i]` against central differences of `value` for each
/// listed coordinate and returns the largest relative error.
pub fn check_coords<F>(mut value: F, analytic: &[f64], point: &[f64], coords: &[usize], step: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    coords
        .iter()
        .map(|&i| relative_error(analytic[i], central_difference(&mut value, point, i, step)))
        .fold(0.0, f64::max)
}

/// Checks the reverse-mode gradient of a scalar tensor function against
/// central differences over every entry of `x`. Returns the max relative
/// error.
pub fn grad_check<F>(f: F, x: &Mat, step: f64) -> Result<f64, TensorError>
where
    F: for<'g> Fn(&'g Graph, Tensor<'g>) -> Result<Tensor<'g>, TensorError>,
{
    let analytic = {
        let graph = Graph::new();
        let leaf = graph.param(x.clone());
        let out = f(&graph, leaf)?;
        out.backward()?;
        leaf.grad()
            .unwrap_or_else(|| Mat::zeros(x.rows(), x.cols()))
            .into_data()
    };
    let mut failure = None;
    let value = |p: &[f64]| {
        let graph = Graph::new();
        let m = Mat::from_vec(x.rows(), x.cols(), p.to_vec()).expect("same shape");
        match f(&graph, graph.constant(m)) {
            Ok(t) => t.item(),
            Err(e) => {
                failure = Some(e);
                f64::NAN
            }
        }
    };
    let coords: Vec<usize> = (0..x.len()).collect();
    let err = check_coords(value, &analytic, x.data(), &coords, step);
    match failure {
        Some(e) => Err(e),
        None => Ok(err),
    }
}
