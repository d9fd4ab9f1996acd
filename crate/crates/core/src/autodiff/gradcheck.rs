//! Central finite-difference oracle for tape gradients.

use super::{AutodiffError, ParamSet, Tape, Var};

/// Gradients smaller than this are compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Coordinates far below the largest gradient are compared on the scale of
/// `GRADIENT_SCALE_FLOOR * max|grad|`: central differences cannot resolve them
/// more finely than the roundoff in `f`, which is shared by every coordinate.
pub const GRADIENT_SCALE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    scaled_relative_error(analytic, numeric, 0.0)
}

/// Like [`relative_error`] with `floor` added to the denominator's candidates.
pub fn scaled_relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor).max(RELATIVE_ERROR_FLOOR)
}

fn eval<F, E>(f: &F, params: &ParamSet) -> Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let mut tape = Tape::new();
    let vars = params.bind_frozen(&mut tape)?;
    let out = f(&mut tape, &vars)?;
    let value = tape.scalar(out);
    if !value.is_finite() {
        return Err(AutodiffError::NonFinite { op: "check_gradients", index: 0 }.into());
    }
    Ok(value)
}

/// Compares tape gradients of the scalar `f(params)` against central differences on every coordinate.
/// Each coordinate's error is relative to the larger of the two estimates, floored at
/// [`GRADIENT_SCALE_FLOOR`] times the largest tape gradient.
pub fn check_gradients<F, E>(f: F, params: &ParamSet, h: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let coords: Vec<(usize, usize)> = params
        .tensors()
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |i| (p, i)))
        .collect();
    check_gradients_at(f, params, h, &coords)
}

/// Same as [`check_gradients`] restricted to `(tensor index, flat index)` coordinates.
pub fn check_gradients_at<F, E>(f: F, params: &ParamSet, h: f64, coords: &[(usize, usize)]) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    if !(h > 0.0) {
        return Err(AutodiffError::InvalidStep(h).into());
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape)?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let scale = vars
        .iter()
        .filter_map(|&v| grads.get(v))
        .flat_map(|g| g.iter())
        .fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = GRADIENT_SCALE_FLOOR * scale;

    let mut probe = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, worst: None, checked: 0 };
    for &(p, i) in coords {
        let analytic = grads.get(vars[p]).map_or(0.0, |g| g[i]);
        let orig = params.tensors()[p].data()[i];
        probe.tensors_mut()[p].data_mut()[i] = orig + h;
        let plus = eval(&f, &probe)?;
        probe.tensors_mut()[p].data_mut()[i] = orig - h;
        let minus = eval(&f, &probe)?;
        probe.tensors_mut()[p].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);

        let rel = scaled_relative_error(analytic, numeric, floor);
        report.max_abs_error = report.max_abs_error.max((analytic - numeric).abs());
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((params.names()[p].clone(), i));
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn square_at_three() {
        let mut p = ParamSet::new();
        p.push("x", Tensor::vector(vec![3.0]).unwrap());
        let r = check_gradients(
            |t: &mut Tape, v: &[Var]| -> Result<Var, AutodiffError> {
                let sq = t.mul(v[0], v[0])?;
                t.reduce_sum(sq)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.checked, 1);
    }

    #[test]
    fn quadratic_form_matches_direct_formula() {
        // Oracle: grad of x^T A x with symmetric A is 2 A x, written out directly.
        let a = [[2.0, -1.0, 0.5], [-1.0, 3.0, 0.25], [0.5, 0.25, 1.0]];
        let x = [0.7, -1.3, 2.1];
        let expected: Vec<f64> = (0..3).map(|i| 2.0 * (0..3).map(|j| a[i][j] * x[j]).sum::<f64>()).collect();

        let mut p = ParamSet::new();
        p.push("x", Tensor::new(vec![3, 1], x.to_vec()).unwrap());
        let amat = Tensor::new(vec![3, 3], a.concat()).unwrap();
        let f = |t: &mut Tape, v: &[Var]| -> Result<Var, AutodiffError> {
            let am = t.leaf(&amat, false)?;
            let ax = t.matmul(am, v[0])?;
            let prod = t.mul(v[0], ax)?;
            t.reduce_sum(prod)
        };
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape).unwrap();
        let out = f(&mut tape, &vars).unwrap();
        let g = tape.backward(out).unwrap();
        for (got, want) in g.get(vars[0]).unwrap().iter().zip(&expected) {
            assert!(relative_error(*got, *want) < 1e-12);
        }
        let r = check_gradients(f, &p, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn scale_floor_absorbs_roundoff_but_not_mistakes() {
        // A 1e-9 wobble on a 2e-6 coordinate, next to an O(1) gradient, is roundoff.
        assert!(relative_error(2e-6, 2.001e-6) > 1e-4);
        assert!(scaled_relative_error(2e-6, 2.001e-6, GRADIENT_SCALE_FLOOR) < 1e-4);
        // A wrong small coordinate still shows.
        assert!(scaled_relative_error(2e-6, 4e-6, GRADIENT_SCALE_FLOOR) > 1e-4);
        assert_eq!(scaled_relative_error(0.5, 0.25, GRADIENT_SCALE_FLOOR), 0.5);
    }

    #[test]
    fn rejects_bad_step() {
        let mut p = ParamSet::new();
        p.push("x", Tensor::scalar(1.0));
        let r = check_gradients(|t: &mut Tape, v: &[Var]| t.reduce_sum(v[0]), &p, 0.0);
        assert!(matches!(r, Err(AutodiffError::InvalidStep(_))));
    }
}
