//! Central finite-difference oracle for analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Denominator floor for relative errors; below this magnitude both routes
/// are dominated by rounding and the comparison becomes absolute.
pub const REL_ERROR_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat coordinate with the largest error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

fn eval<F>(f: &F, input: Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(input, false);
    let out = f(&mut g, x)?;
    Ok(g.value(out).data()[0])
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences at every coordinate of `input`.
pub fn finite_difference_check<F>(f: F, input: &Tensor, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..input.numel()).collect();
    check_coordinates(f, input, &coords, step, tolerance)
}

/// As [`finite_difference_check`], restricted to the listed coordinates.
pub fn check_coordinates<F>(
    f: F,
    input: &Tensor,
    coords: &[usize],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(input.clone(), true);
    let out = f(&mut g, x)?;
    let analytic = g.backward(out)?.wrt(x);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        tolerance,
    };
    for &i in coords {
        let mut plus = input.clone();
        plus.data_mut()[i] += step;
        let mut minus = input.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(&f, plus)? - eval(&f, minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_zero_error() {
        let x = Tensor::new(vec![4], vec![0.3, -0.7, 1.0, 0.0]).unwrap();
        let r = finite_difference_check(|g, v| Ok(g.sum(v)), &x, 1e-5, 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu'(0) is taken as 0 while the centred difference sees 1/2
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let r = finite_difference_check(
            |g, v| {
                let r = g.relu(v);
                Ok(g.sum(r))
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed());
    }
}
