use super::graph::{Graph, NodeId, ParamMap};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst: Option<WorstCoordinate>,
    pub coordinates: usize,
}

/// Coordinate with the largest relative error.
#[derive(Clone, Debug, PartialEq)]
pub struct WorstCoordinate {
    pub param: String,
    /// Flat row-major index.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<T, F>(build: &F, params: &ParamMap<T>) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamMap<T>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss {v} while probing")));
    }
    Ok(v)
}

/// Checks every coordinate of every parameter. `build` must register the
/// parameters it uses through [`Graph::param`] under their map names.
pub fn grad_check<T, F>(build: F, params: &ParamMap<T>, eps: T) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamMap<T>) -> Result<NodeId>,
{
    if !(eps > T::zero()) {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    if params.values().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("parameters".into()));
    }
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut probe = params.clone();
    for (name, tensor) in params {
        let zero = crate::autodiff::Tensor::zeros(tensor.shape());
        let analytic = grads.get(name).unwrap_or(&zero);
        for k in 0..tensor.len() {
            let orig = tensor.data()[k];
            probe.get_mut(name).unwrap().data_mut()[k] = orig + eps;
            let up = evaluate(&build, &probe)?;
            probe.get_mut(name).unwrap().data_mut()[k] = orig - eps;
            let down = evaluate(&build, &probe)?;
            probe.get_mut(name).unwrap().data_mut()[k] = orig;

            let numeric = ((up - down) / (eps + eps)).as_f64();
            let a = analytic.data()[k].as_f64();
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some(WorstCoordinate {
                    param: name.clone(),
                    index: k,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
