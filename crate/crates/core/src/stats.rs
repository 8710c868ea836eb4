//! Small regression helpers for log–log rate fits.

/// Ordinary least-squares slope of `y` on `x`. `None` with fewer than two
/// points or zero spread in `x`.
pub fn ols_slope(points: &[(f64, f64)]) -> Option<f64> {
    ols_fit(points).map(|(slope, _)| slope)
}

/// `(slope, intercept)` of the OLS line.
pub fn ols_fit(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Leave-one-out jackknife standard error of the OLS slope. Needs at least
/// three points.
pub fn jackknife_slope_se(points: &[(f64, f64)]) -> Option<f64> {
    let n = points.len();
    if n < 3 {
        return None;
    }
    let mut loo = Vec::with_capacity(n);
    for k in 0..n {
        let rest: Vec<(f64, f64)> = points.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, p)| *p).collect();
        loo.push(ols_slope(&rest)?);
    }
    let mean = loo.iter().sum::<f64>() / n as f64;
    let ss: f64 = loo.iter().map(|s| (s - mean).powi(2)).sum();
    Some(((n as f64 - 1.0) / n as f64 * ss).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let pts: Vec<_> = (0..5).map(|i| (i as f64, 2.0 * i as f64 - 1.0)).collect();
        let (s, c) = ols_fit(&pts).unwrap();
        assert!((s - 2.0).abs() < 1e-12 && (c + 1.0).abs() < 1e-12);
        assert!(jackknife_slope_se(&pts).unwrap() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(ols_slope(&[(1.0, 2.0)]).is_none());
        assert!(ols_slope(&[(1.0, 2.0), (1.0, 3.0)]).is_none());
        assert!(jackknife_slope_se(&[(0.0, 0.0), (1.0, 1.0)]).is_none());
    }

    #[test]
    fn noisy_line_has_positive_se() {
        let pts = [(0.0, 0.1), (1.0, 0.9), (2.0, 2.2), (3.0, 2.8)];
        let se = jackknife_slope_se(&pts).unwrap();
        assert!(se > 0.0 && se < 0.5);
    }
}
