//! Central-difference gradient oracle.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::AutodiffError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// Coordinate where the maximum was attained.
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Compares the reverse-mode gradient of a scalar function against central
/// differences at every coordinate of `point`.
///
/// `f` receives a fresh graph and the leaf holding the (possibly perturbed)
/// point, and must return a single-valued node.
pub fn grad_check<F, E>(f: F, point: &Tensor<f64>, step: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, step, &coords)
}

/// Like [`grad_check`] but probes only the listed coordinates.
pub fn grad_check_coords<F, E>(
    f: F,
    point: &Tensor<f64>,
    step: f64,
    coords: &[usize],
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(AutodiffError::InvalidStep(step).into());
    }
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let out = f(&mut g, x)?;
    let value = g.value(out).item().ok_or_else(|| AutodiffError::NonScalarLoss(g.shape(out).to_vec()))?;
    if !value.is_finite() {
        return Err(AutodiffError::NonFiniteProbe { index: 0, value }.into());
    }
    g.backward(out)?;
    let analytic = g
        .grad(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |probe: &Tensor<f64>, index: usize| -> Result<f64, E> {
        let mut g = Graph::new();
        let x = g.leaf(probe.clone(), false);
        let out = f(&mut g, x)?;
        let v = g.value(out).item().ok_or_else(|| AutodiffError::NonScalarLoss(g.shape(out).to_vec()))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(AutodiffError::NonFiniteProbe { index, value: v }.into())
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        coords_checked: 0,
    };
    let mut probe = point.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe, i)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe, i)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        if err > report.max_rel_error || report.coords_checked == 0 {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst_index = i;
        }
        report.coords_checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let p = Tensor::from_f64_slice(&[4], &[0.1, -2.0, 3.5, 7.0]).unwrap();
        let r = grad_check(|g: &mut Graph<f64>, x| g.sum_all(x), &p, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.coords_checked, 4);
    }

    #[test]
    fn non_finite_probe_reports_coordinate() {
        // log of a value that becomes negative after the step is clamped, so
        // use division by a coordinate pushed through zero instead
        let p = Tensor::from_f64_slice(&[2], &[1.0, 0.0]).unwrap();
        let err = grad_check(
            |g: &mut Graph<f64>, x| {
                let y = g.mul(x, x)?;
                let s = g.sum_all(y)?;
                let v = g.value(s).item().unwrap();
                let c = g.constant(Tensor::scalar(if v < 1.0 { f64::NAN } else { 1.0 }));
                g.mul(s, c)
            },
            &p,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, AutodiffError::NonFiniteProbe { index: 0, .. }), "{err:?}");
    }

    #[test]
    fn bad_step_rejected() {
        let p = Tensor::<f64>::ones(&[1]);
        assert!(grad_check(|g: &mut Graph<f64>, x| g.sum_all(x), &p, 0.0).is_err());
    }
}
