//! Least-squares fits of the two fusion-cost hypotheses:
//! decoder `t = a + b·L` and encoder `t = a + b·(N+L)²`.
//!
//! Both reduce to a one-variable linear regression after transforming
//! the abscissa, so a closed-form fit suffices.

use eevg_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// What was fitted, e.g. `decoder/linear`.
    pub kind: String,
    /// Intercept.
    pub a: f64,
    /// Slope against the transformed abscissa.
    pub b: f64,
    /// Coefficient of determination of the fit.
    pub r2: f64,
    /// True when the targets had zero variance; `r2` is then reported
    /// as 0 by convention and the fit is meaningless.
    pub zero_variance: bool,
}

impl FitReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.6},{}",
            self.kind, self.a, self.b, self.r2, self.zero_variance as u8
        )
    }
}

/// Ordinary least squares of `y = a + b·z`.
fn ols(kind: &str, zs: &[f64], ys: &[f64]) -> Result<FitReport> {
    if zs.len() != ys.len() {
        return Err(Error::Dim(format!(
            "{} abscissae vs {} targets",
            zs.len(),
            ys.len()
        )));
    }
    if zs.len() < 4 {
        return Err(Error::Precondition(format!(
            "need at least 4 points to fit, got {}",
            zs.len()
        )));
    }
    let n = zs.len() as f64;
    let mean_z = zs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let var_z: f64 = zs.iter().map(|z| (z - mean_z).powi(2)).sum();
    if var_z == 0.0 {
        return Err(Error::Precondition(
            "abscissa values are all identical; nothing to fit".into(),
        ));
    }
    let cov: f64 = zs
        .iter()
        .zip(ys)
        .map(|(z, y)| (z - mean_z) * (y - mean_y))
        .sum();
    let b = cov / var_z;
    let a = mean_y - b * mean_z;

    let ss_tot: f64 = ys.iter().map(|y| (y - mean_y).powi(2)).sum();
    let ss_res: f64 = zs
        .iter()
        .zip(ys)
        .map(|(z, y)| (y - (a + b * z)).powi(2))
        .sum();
    let zero_variance = ss_tot == 0.0;
    let r2 = if zero_variance { 0.0 } else { 1.0 - ss_res / ss_tot };
    Ok(FitReport {
        kind: kind.to_string(),
        a,
        b,
        r2,
        zero_variance,
    })
}

/// Decoder hypothesis: runtime affine in the expression length L.
pub fn fit_linear(kind: &str, ls: &[usize], times: &[f64]) -> Result<FitReport> {
    let zs: Vec<f64> = ls.iter().map(|&l| l as f64).collect();
    ols(&format!("{kind}/linear"), &zs, times)
}

/// Encoder hypothesis: runtime affine in the squared joint sequence
/// length (N+L)².
pub fn fit_quadratic(kind: &str, n: usize, ls: &[usize], times: &[f64]) -> Result<FitReport> {
    let zs: Vec<f64> = ls.iter().map(|&l| ((n + l) as f64).powi(2)).collect();
    ols(&format!("{kind}/quadratic"), &zs, times)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_has_unit_r_squared() {
        let ls = [64usize, 128, 256, 512, 1024];
        let ts: Vec<f64> = ls.iter().map(|&l| 2.0 + 3.0 * l as f64).collect();
        let fit = fit_linear("decoder", &ls, &ts).unwrap();
        assert!((fit.a - 2.0).abs() < 1e-9);
        assert!((fit.b - 3.0).abs() < 1e-9);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
        assert!(!fit.zero_variance);
    }

    #[test]
    fn exact_quadratic_has_unit_r_squared() {
        let n = 196;
        let ls = [64usize, 128, 256, 512, 1024];
        let ts: Vec<f64> = ls
            .iter()
            .map(|&l| 1.0 + 0.5 * ((n + l) as f64).powi(2))
            .collect();
        let fit = fit_quadratic("encoder", n, &ls, &ts).unwrap();
        assert!((fit.a - 1.0).abs() < 1e-6);
        assert!((fit.b - 0.5).abs() < 1e-12);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_targets_trigger_the_zero_variance_rule() {
        let ls = [64usize, 128, 256, 512];
        let fit = fit_linear("decoder", &ls, &[5.0; 4]).unwrap();
        assert!(fit.zero_variance);
        assert_eq!(fit.r2, 0.0);
        assert!(fit.b.abs() < 1e-12);
    }

    #[test]
    fn quadratic_data_fits_linear_model_poorly() {
        let n = 196;
        let ls = [64usize, 128, 256, 512, 1024];
        let ts: Vec<f64> = ls
            .iter()
            .map(|&l| 1.0 + 0.5 * ((n + l) as f64).powi(2))
            .collect();
        let lin = fit_linear("encoder", &ls, &ts).unwrap();
        let quad = fit_quadratic("encoder", n, &ls, &ts).unwrap();
        assert!(quad.r2 > lin.r2);
        assert!(lin.r2 < 0.999);
    }

    #[test]
    fn too_few_points_is_a_precondition_error() {
        assert!(matches!(
            fit_linear("decoder", &[1, 2, 3], &[1.0, 2.0, 3.0]),
            Err(Error::Precondition(_))
        ));
    }
}
