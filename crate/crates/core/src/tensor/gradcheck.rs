use super::{Graph, Tensor, TensorError, Var};

/// Gradients below this magnitude are at central-difference roundoff for
/// O(1) losses, so differences there are not meaningful.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over scalars of |g_ad − g_fd| / max(|g_ad|, |g_fd|, GRAD_FLOOR)
    pub max_rel_error: f64,
    pub worst_leaf: usize,
    pub worst_element: usize,
    pub checked: usize,
}

/// Compares reverse-mode gradients of `f` against central differences over
/// every scalar of every leaf.
pub fn finite_diff_check<F, E>(leaves: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    finite_diff_check_with(leaves, eps, f, |_| {})
}

/// Like [`finite_diff_check`], with a hook that may alter the autodiff
/// gradients before comparison (used to prove the harness catches faults).
pub fn finite_diff_check_with<F, E, H>(leaves: &[Tensor], eps: f64, mut f: F, tamper: H) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
    H: FnOnce(&mut [Tensor]),
{
    if !(eps > 0.0) {
        return Err(TensorError::BadEpsilon(eps).into());
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
    tamper(&mut analytic);

    let mut eval = |point: &[Tensor], leaf: usize, element: usize| -> Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = point.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).data()[0];
        if !v.is_finite() {
            return Err(TensorError::NonFinite { leaf, element }.into());
        }
        Ok(v)
    };

    let mut point: Vec<Tensor> = leaves.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_leaf: 0,
        worst_element: 0,
        checked: 0,
    };
    for leaf in 0..leaves.len() {
        for element in 0..leaves[leaf].numel() {
            let orig = point[leaf].data()[element];
            point[leaf].data_mut()[element] = orig + eps;
            let plus = eval(&point, leaf, element)?;
            point[leaf].data_mut()[element] = orig - eps;
            let minus = eval(&point, leaf, element)?;
            point[leaf].data_mut()[element] = orig;

            let fd = (plus - minus) / (2.0 * eps);
            let ad = analytic[leaf].data()[element];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(GRAD_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst_leaf = leaf;
                report.worst_element = element;
            }
        }
    }
    Ok(report)
}
