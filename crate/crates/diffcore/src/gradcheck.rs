use crate::error::DiffError;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Settings for [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Central-difference half step, within `[1e-7, 1e-3]`.
    pub eps: f64,
    /// Check at most this many coordinates per parameter (evenly strided).
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-5,
            max_coords_per_param: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// `(param index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub per_param: Vec<f64>,
    pub checked: usize,
}

/// Compare reverse-mode gradients against central differences.
///
/// `build` receives a fresh graph plus one leaf per entry of `params` and
/// returns the scalar loss node.
pub fn finite_diff_check<E, F>(build: F, params: &[Tensor], cfg: &GradCheck) -> std::result::Result<GradCheckReport, E>
where
    E: From<DiffError>,
    F: Fn(&mut Graph, &[Var]) -> std::result::Result<Var, E>,
{
    if !(1e-7..=1e-3).contains(&cfg.eps) {
        return Err(DiffError::InvalidArgument(format!(
            "finite-difference step {} outside [1e-7, 1e-3]",
            cfg.eps
        ))
        .into());
    }
    let eval = |ps: &[Tensor]| -> std::result::Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let v = g.value(loss);
        if !v.is_scalar() {
            return Err(DiffError::NotScalar {
                shape: v.shape().to_vec(),
            }
            .into());
        }
        let value = v.item();
        if !value.is_finite() {
            return Err(DiffError::NonFinite {
                op: "finite_diff_check",
                node: loss.index(),
            }
            .into());
        }
        Ok(value)
    };

    let analytic: Vec<Tensor> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let grads = g.backward(loss)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        per_param: vec![0.0; params.len()],
        checked: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let stride = match cfg.max_coords_per_param {
            Some(m) if m > 0 && m < n => n.div_ceil(m),
            _ => 1,
        };
        for ci in (0..n).step_by(stride) {
            let base = work[pi].data()[ci];
            work[pi].data_mut()[ci] = base + cfg.eps;
            let up = eval(&work)?;
            work[pi].data_mut()[ci] = base - cfg.eps;
            let down = eval(&work)?;
            work[pi].data_mut()[ci] = base;
            let numeric = (up - down) / (2.0 * cfg.eps);
            let a = grad.data()[ci];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.checked += 1;
            if err > report.per_param[pi] {
                report.per_param[pi] = err;
            }
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((pi, ci));
            }
        }
    }
    Ok(report)
}

/// Gradient-free helper: evaluate `build` once and return the loss value.
pub fn evaluate<E, F>(build: F, params: &[Tensor]) -> std::result::Result<f64, E>
where
    E: From<DiffError>,
    F: Fn(&mut Graph, &[Var]) -> std::result::Result<Var, E>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    Ok(g.value(loss).item())
}
