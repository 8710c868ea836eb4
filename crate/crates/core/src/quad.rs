//! Adaptive Gauss–Kronrod (7, 15) quadrature.

#![allow(clippy::excessive_precision)]

use crate::error::{LabError, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_5,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_48,
    0.000000000000000000000000000000000,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224,
    0.063_092_092_629_978_56,
    0.104_790_010_322_250_19,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_42,
    0.204_432_940_075_298_89,
    0.209_482_141_084_727_82,
];
const WG: [f64; 4] = [0.129_484_966_168_869_7, 0.279_705_391_489_276_64, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kron += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

/// `∫_a^b f` to absolute tolerance `tol` by interval bisection.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let mut stack = vec![(a, b, tol, 0u32)];
    let mut total = 0.0;
    while let Some((lo, hi, eps, depth)) = stack.pop() {
        let (val, err) = gk15(&f, lo, hi);
        if !val.is_finite() {
            return Err(LabError::Quadrature(format!("non-finite integrand on [{lo}, {hi}]")));
        }
        if err <= eps.max(1e-15 * val.abs()) || depth >= 50 {
            if err > tol {
                return Err(LabError::Quadrature(format!("no convergence on [{lo}, {hi}], error estimate {err:e}")));
            }
            total += val;
        } else {
            let mid = 0.5 * (lo + hi);
            stack.push((mid, hi, 0.5 * eps, depth + 1));
            stack.push((lo, mid, 0.5 * eps, depth + 1));
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_integrals() {
        assert!((integrate(|x| x.exp(), 0.0, 1.0, 1e-12).unwrap() - (1f64.exp() - 1.0)).abs() < 1e-12);
        assert!((integrate(|x| (x * x).exp(), 0.0, 1.0, 1e-12).unwrap() - 1.462651745907182).abs() < 1e-11);
        assert!((integrate(|x| x.sin(), 1.0, 0.0, 1e-12).unwrap() + (1.0 - 1f64.cos())).abs() < 1e-12);
        assert!((integrate(|x| x.abs().sqrt(), -1.0, 1.0, 1e-10).unwrap() - 4.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_integrand_errors() {
        assert!(integrate(|x| 1.0 / x, -1.0, 1.0, 1e-8).is_err());
    }
}
