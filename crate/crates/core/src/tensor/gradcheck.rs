//! Central finite-difference checks of analytic gradients.

use super::{Graph, ParamStore, Result, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

impl GradCheckReport {
    fn merge(&mut self, err: f64, name: &str, i: usize) {
        self.coordinates += 1;
        if self.worst.is_none() || err > self.max_relative_error {
            self.max_relative_error = err;
            self.worst = Some((name.to_string(), i));
        }
    }
}

/// Max relative error between backprop and central differences for a
/// scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + DEFAULT_STEP;
        let up = eval(probe.clone())?;
        probe.data_mut()[i] = orig - DEFAULT_STEP;
        let down = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * DEFAULT_STEP);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Checks the gradient of a scalar loss with respect to the named
/// parameters of `store` (every coordinate of each).
pub fn grad_check_params<F>(store: &ParamStore, names: &[String], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, &work)?;
    g.backward(loss)?;
    work.absorb_grads(&g);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for name in names {
        let analytic = work
            .get(name)
            .ok_or_else(|| super::TensorError::UnknownParam(name.clone()))?
            .grad
            .clone();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = work.value(name).unwrap().data()[i];
            let mut eval = |x: f64| -> Result<f64> {
                work.get_mut(name).unwrap().value.data_mut()[i] = x;
                let mut g = Graph::new();
                let out = f(&mut g, &work)?;
                Ok(g.value(out).item())
            };
            let up = eval(orig + DEFAULT_STEP)?;
            let down = eval(orig - DEFAULT_STEP)?;
            work.get_mut(name).unwrap().value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * DEFAULT_STEP);
            report.merge(relative_error(a, numeric), name, i);
        }
    }
    Ok(report)
}
