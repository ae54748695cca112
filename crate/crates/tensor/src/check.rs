use crate::{Graph, Result, Tensor, TensorError, Var};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    /// Distance of the base point to the nearest relu / max kink.
    pub kink_margin: f64,
    pub tol: f64,
    /// Coordinates whose finite-difference stencil crosses a relu or
    /// argmax branch; central differences are no oracle there, so they are
    /// excluded from the error statistics.
    pub straddling: Vec<usize>,
    pub passed: bool,
}

/// Elementwise relative error. The denominator is floored at a thousandth
/// of the largest gradient magnitude so that near-zero entries are judged
/// on the scale of the whole gradient rather than on their own.
pub fn relative_errors(analytic: &[f64], numeric: &[f64]) -> Vec<f64> {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-10);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .collect()
}

fn eval<F>(f: &F, point: Tensor<f64>) -> Result<(Graph<f64>, Var, Var)>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(point);
    let y = f(&mut g, x)?;
    if g.value(y).len() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: g.shape(y).to_vec(),
        });
    }
    Ok((g, x, y))
}

/// Checks the gradient of the scalar function built by `f` at `point`
/// against central differences with step `h`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if let Some(i) = point.data().iter().position(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { index: i });
    }
    let (g, x, y) = eval(&f, point.clone())?;
    if !g.value(y).is_finite() {
        return Err(TensorError::NonFinite { index: 0 });
    }
    let analytic = g.backward(y)?.get_or_zeros(&g, x).into_data();
    if let Some(i) = analytic.iter().position(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { index: i });
    }
    let kink_margin = g.kink_margin();
    let base_sig = g.branch_signature();
    let mut straddling = Vec::new();

    let mut numeric = Vec::with_capacity(point.len());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let (gp, _, yp) = eval(&f, probe.clone())?;
        probe.data_mut()[i] = orig - h;
        let (gm, _, ym) = eval(&f, probe.clone())?;
        probe.data_mut()[i] = orig;
        if gp.branch_signature() != base_sig || gm.branch_signature() != base_sig {
            straddling.push(i);
        }
        let (fp, fm) = (gp.value(yp).data()[0], gm.value(ym).data()[0]);
        let d = (fp - fm) / (2.0 * h);
        if !d.is_finite() {
            return Err(TensorError::NonFinite { index: i });
        }
        numeric.push(d);
    }

    let rel = relative_errors(&analytic, &numeric);
    let smooth = |i: &usize| straddling.binary_search(i).is_err();
    let (worst_index, max_rel_error) = (0..rel.len())
        .filter(smooth)
        .fold((0, 0.0), |best, i| if rel[i] > best.1 { (i, rel[i]) } else { best });
    let max_abs_error = (0..rel.len())
        .filter(smooth)
        .map(|i| (analytic[i] - numeric[i]).abs())
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error <= tol,
        analytic,
        numeric,
        max_rel_error,
        max_abs_error,
        worst_index,
        kink_margin,
        tol,
        straddling,
    })
}
