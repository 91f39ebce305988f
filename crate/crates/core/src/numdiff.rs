//! Central finite differences for checking hand-written backward passes.

/// Relative error between an analytic and a numeric derivative. The
/// denominator has a floor so that two derivatives that are both ~0 compare
/// as equal instead of dividing noise by noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `(f(x+ε) − f(x−ε)) / 2ε` where `f` evaluates the objective with the
/// probed coordinate set to the given value.
pub fn central_difference(x: f64, eps: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let plus = f(x + eps);
    let minus = f(x - eps);
    (plus - minus) / (2.0 * eps)
}

/// Numerical gradient of `f` over every coordinate of `params`.
pub fn numeric_gradient(
    params: &mut [f64],
    eps: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Vec<f64> {
    (0..params.len())
        .map(|k| {
            let orig = params[k];
            params[k] = orig + eps;
            let plus = f(params);
            params[k] = orig - eps;
            let minus = f(params);
            params[k] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Fourth-order central difference,
/// `(−f(x+2ε) + 8f(x+ε) − 8f(x−ε) + f(x−2ε)) / 12ε`. Truncation error is
/// O(ε⁴), so a larger step keeps round-off small on smooth functions.
pub fn numeric_gradient_4th(
    params: &mut [f64],
    eps: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Vec<f64> {
    (0..params.len())
        .map(|k| {
            let orig = params[k];
            let mut at = |d: f64| {
                params[k] = orig + d;
                f(params)
            };
            let g =
                (-at(2.0 * eps) + 8.0 * at(eps) - 8.0 * at(-eps) + at(-2.0 * eps)) / (12.0 * eps);
            params[k] = orig;
            g
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivative_of_cubic() {
        let d = central_difference(2.0, 1e-5, |x| x * x * x);
        assert!((d - 12.0).abs() < 1e-8);
        let mut p = vec![1.0, 3.0];
        let g = numeric_gradient(&mut p, 1e-6, |v| v[0] * v[1] + v[1] * v[1]);
        assert!(relative_error(3.0, g[0]) < 1e-8);
        assert!(relative_error(7.0, g[1]) < 1e-8);
        assert_eq!(p, vec![1.0, 3.0]);
    }

    #[test]
    fn floor_applies_near_zero() {
        assert!(relative_error(1e-12, -1e-12) < 1e-5);
        assert!(relative_error(1.0, 1.1) > 0.09);
    }

    #[test]
    fn fourth_order_is_exact_on_quartics() {
        let mut p = [0.7];
        let g = numeric_gradient_4th(&mut p, 0.1, |v| v[0].powi(4) - 3.0 * v[0].powi(3));
        let exact = 4.0 * 0.7f64.powi(3) - 9.0 * 0.7f64.powi(2);
        assert!((g[0] - exact).abs() < 1e-12);
        assert_eq!(p, [0.7]);
    }
}
