use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative error between an analytic and a numeric derivative, floored so
/// that two vanishing values compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central-difference derivative of a scalar function along one coordinate.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, x: f64, eps: f64) -> Result<f64> {
    let plus = f(x + eps)?;
    let minus = f(x - eps)?;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::NonFinite {
            op: "finite_difference",
        });
    }
    Ok((plus - minus) / (2.0 * eps))
}

/// Compares reverse-mode gradients of `f` at `point` against central
/// differences and returns the largest elementwise relative error.
///
/// `f` receives a fresh tape and the leaf holding the (possibly perturbed)
/// point and must return a one-element output.
pub fn finite_diff_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::argument("finite_diff_check", "eps must be positive"));
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone())?;
    let y = f(&mut tape, x)?;
    let analytic = tape.backward(y)?.get_or_zeros(&tape, x);

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.param(p)?;
        let y = f(&mut t, x)?;
        t.value(y).item()
    };

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let numeric = central_difference(
            |xi| {
                let mut p = point.clone();
                p.data_mut()[i] = xi;
                eval(p)
            },
            point.data()[i],
            eps,
        )?;
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Central difference refined by one Richardson step: combines the estimates
/// at `eps` and `eps / 2` so the leading truncation term cancels, leaving an
/// `O(eps⁴)` error. Useful when a tight tolerance must hold with a step large
/// enough to keep rounding noise small.
pub fn richardson_difference(mut f: impl FnMut(f64) -> Result<f64>, x: f64, eps: f64) -> Result<f64> {
    let coarse = central_difference(&mut f, x, eps)?;
    let fine = central_difference(&mut f, x, eps / 2.0)?;
    Ok((4.0 * fine - coarse) / 3.0)
}

/// Ridders' extrapolated central difference. Starting from step `h`, the
/// step shrinks geometrically while a Neville tableau extrapolates toward
/// zero step; the estimate with the smallest error bound is returned together
/// with that bound. The bound is the larger of the tableau disagreement and
/// the rounding error of the finest difference involved.
pub fn ridders_difference(mut f: impl FnMut(f64) -> Result<f64>, x: f64, h: f64) -> Result<(f64, f64)> {
    const SHRINK: f64 = 1.4;
    const SHRINK2: f64 = SHRINK * SHRINK;
    const ROWS: usize = 10;
    const SAFE: f64 = 2.0;
    if !(h > 0.0) {
        return Err(Error::argument("ridders_difference", "initial step must be positive"));
    }
    let mut scale = 0.0f64;
    let mut diff = |step: f64, scale: &mut f64| -> Result<f64> {
        let plus = f(x + step)?;
        let minus = f(x - step)?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { op: "finite_difference" });
        }
        *scale = scale.max(plus.abs()).max(minus.abs());
        Ok((plus - minus) / (2.0 * step))
    };
    let mut table = [[0.0f64; ROWS]; ROWS];
    let mut step = h;
    table[0][0] = diff(step, &mut scale)?;
    let mut best = table[0][0];
    let mut err = f64::INFINITY;
    for i in 1..ROWS {
        step /= SHRINK;
        table[0][i] = diff(step, &mut scale)?;
        let rounding = f64::EPSILON * scale / step;
        let mut fac = SHRINK2;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= SHRINK2;
            let e = (table[j][i] - table[j - 1][i])
                .abs()
                .max((table[j][i] - table[j - 1][i - 1]).abs())
                .max(rounding);
            if e <= err {
                err = e;
                best = table[j][i];
            }
        }
        if (table[i][i] - table[i - 1][i - 1]).abs() >= SAFE * err {
            break;
        }
    }
    Ok((best, err))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ridders_recovers_smooth_derivatives() {
        let (d, err) = ridders_difference(|x| Ok((2.0 * x).exp() * x.sin()), 0.7, 0.1).unwrap();
        let exact = (1.4f64).exp() * (2.0 * 0.7f64.sin() + 0.7f64.cos());
        assert!((d - exact).abs() < 1e-10 * exact.abs(), "{d} vs {exact}");
        assert!(err < 1e-8);
        assert!(ridders_difference(Ok, 0.0, 0.0).is_err());
    }

    #[test]
    fn richardson_is_exact_on_quartics() {
        let f = |x: f64| Ok(x.powi(4) - 3.0 * x.powi(3) + x);
        let d = richardson_difference(f, 1.3, 0.1).unwrap();
        let exact = 4.0 * 1.3f64.powi(3) - 9.0 * 1.3f64.powi(2) + 1.0;
        assert!((d - exact).abs() < 1e-12);
    }

    #[test]
    fn richardson_beats_plain_central_difference() {
        let exact = 2.0f64.cos();
        let plain = central_difference(|x| Ok(x.sin()), 2.0, 1e-2).unwrap();
        let refined = richardson_difference(|x| Ok(x.sin()), 2.0, 1e-2).unwrap();
        assert!((refined - exact).abs() < (plain - exact).abs() / 100.0);
    }
}
