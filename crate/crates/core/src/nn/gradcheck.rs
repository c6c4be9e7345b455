#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `f` at the given coordinates.
///
/// Relative error per coordinate is `|g - fd| / max(|g|, |fd|, 1e-6)`.
pub fn central_difference_check(
    f: impl Fn(&[f64]) -> f64,
    theta: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
) -> GradCheckReport {
    let mut work = theta.to_vec();
    let mut max_rel_err = 0.0;
    let mut worst_index = None;
    for &i in coords {
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work);
        work[i] = orig - h;
        let fm = f(&work);
        work[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let g = analytic[i];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
        if rel > max_rel_err || worst_index.is_none() {
            max_rel_err = rel;
            worst_index = Some(i);
        }
    }
    GradCheckReport {
        max_rel_err,
        worst_index,
        checked: coords.len(),
    }
}
