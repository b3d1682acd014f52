use super::{GradError, Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate where the maximum occurred.
    pub worst_index: usize,
}

/// Compares the tape gradient of `f` at `point` against central differences
/// with per-coordinate step `h·(1 + |x_i|)`.
///
/// The error at each coordinate is `|a − fd| / (|a| + |fd| + 1e-12)`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, h: f64) -> Result<GradCheckReport, GradError>
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>, GradError>,
{
    let eval = |x: &Tensor<f64>| -> Result<f64, GradError> {
        let g = Graph::new();
        let v = g.constant(x.clone());
        Ok(f(&g, v)?.item())
    };

    let graph = Graph::new();
    let x = graph.param(point.clone());
    let loss = f(&graph, x)?;
    let analytic = graph.backward(loss)?.get_or_zeros(x);

    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: 0 };
    let mut probe = point.clone();
    for i in 0..point.len() {
        let x0 = point.data()[i];
        let step = h * (1.0 + x0.abs());
        probe.data_mut()[i] = x0 + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = x0 - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = x0;
        let fd = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - fd).abs() / (a.abs() + fd.abs() + 1e-12);
        if !err.is_finite() {
            return Err(GradError::NonFinite(format!("grad_check coordinate {i}")));
        }
        if err > report.max_rel_error {
            report = GradCheckReport { max_rel_error: err, worst_index: i };
        }
    }
    Ok(report)
}
