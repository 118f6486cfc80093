//! Input/output identification of the plant's behavior matrices from
//! mirrored traffic.
//!
//! The fit regresses `y[k+1]` on `(y[k], u[k])` by least squares. Two
//! closed-loop effects bias the raw solve: the regressor `y[k]` carries the
//! measurement noise, and the controller folds that same noise into `u[k]`
//! through feedback. Both corrections have closed forms given the nominal
//! measurement-noise covariance: the feedback sensitivity `J = du/dy` is
//! estimated from the data (the dependence of `u[k]` on `y[k]` given the
//! recent past), and the normal equations are then solved with the noise
//! terms subtracted by a short fixed-point iteration. On noise-free data
//! both corrections vanish and the result equals the exact least-squares
//! solution.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SysIdError {
    #[error("insufficient samples: have {have}, need {need}")]
    InsufficientSamples { have: usize, need: usize },
    #[error("insufficient excitation: regressor condition {condition:.3e} exceeds {threshold:.1e}")]
    InsufficientExcitation { condition: f64, threshold: f64 },
    #[error("sample dimensions inconsistent at index {index}")]
    Dimension { index: usize },
    #[error("regressor Gram matrix singular after noise compensation")]
    SingularGram,
}

/// One step of mirrored traffic: measurement before the step, the actuation
/// applied, and the measurement after it.
#[derive(Debug, Clone)]
pub struct IdSample {
    pub y_prev: DVector<f64>,
    pub u: DVector<f64>,
    pub y_next: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct BehaviorEstimate {
    /// p x p output-transition estimate
    pub a_hat: DMatrix<f64>,
    /// p x m input estimate
    pub b_hat: DMatrix<f64>,
    pub sample_count: usize,
    pub residual_norm: f64,
}

impl BehaviorEstimate {
    /// Max-norm deviation against nominal `(A, B)`, the quantity compared
    /// against the configured tolerance when corroborating an alert.
    pub fn deviation(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        if a.shape() != self.a_hat.shape() || b.shape() != self.b_hat.shape() {
            return f64::INFINITY;
        }
        (&self.a_hat - a).amax().max((&self.b_hat - b).amax())
    }
}

pub const DEFAULT_MIN_SAMPLES: usize = 50;
pub const DEFAULT_CONDITION_THRESHOLD: f64 = 1e8;

/// Instantaneous feedback sensitivity `J = du/dy`: coefficient of `y[k]`
/// when regressing `u[k]` on `(y[k], y[k-1], u[k-1], y[k-2], u[k-2])`. The
/// lagged terms absorb the controller's memory; what binds `u[k]` to the
/// fresh part of `y[k]` is exactly the feedthrough of the measurement
/// noise into the actuation.
fn estimate_feedthrough(samples: &[IdSample], p: usize, m: usize) -> DMatrix<f64> {
    const LAGS: usize = 2;
    let cols = p + LAGS * (p + m);
    let rows = samples.len().saturating_sub(LAGS);
    if rows <= cols {
        return DMatrix::zeros(m, p);
    }
    let mut x = DMatrix::zeros(rows, cols);
    let mut y = DMatrix::zeros(rows, m);
    for r in 0..rows {
        let k = r + LAGS;
        for j in 0..p {
            x[(r, j)] = samples[k].y_prev[j];
        }
        for lag in 1..=LAGS {
            let base = p + (lag - 1) * (p + m);
            for j in 0..p {
                x[(r, base + j)] = samples[k - lag].y_prev[j];
            }
            for j in 0..m {
                x[(r, base + p + j)] = samples[k - lag].u[j];
            }
        }
        for j in 0..m {
            y[(r, j)] = samples[k].u[j];
        }
    }
    let svd = x.svd(true, true);
    match svd.solve(&y, 1e-10) {
        Ok(beta) => {
            let mut j_hat = DMatrix::zeros(m, p);
            for out in 0..m {
                for j in 0..p {
                    j_hat[(out, j)] = beta[(j, out)];
                }
            }
            j_hat
        }
        Err(_) => DMatrix::zeros(m, p),
    }
}

/// Fits `y[k+1] = A_hat y[k] + B_hat u[k]` over the sample window.
///
/// `measurement_noise` is the covariance of the noise riding on `y`; pass
/// the nominal V (or `None` when the data is exact) and the solver undoes
/// the resulting regression attenuation. Rank deficiency of the regressors
/// past `condition_threshold` is reported as insufficient excitation.
pub fn identify_behavior(
    samples: &[IdSample],
    min_samples: usize,
    condition_threshold: f64,
    measurement_noise: Option<&DMatrix<f64>>,
) -> Result<BehaviorEstimate, SysIdError> {
    let first = samples.first().ok_or(SysIdError::InsufficientSamples {
        have: 0,
        need: min_samples.max(1),
    })?;
    let p = first.y_prev.len();
    let m = first.u.len();
    for (i, s) in samples.iter().enumerate() {
        if s.y_prev.len() != p || s.u.len() != m || s.y_next.len() != p {
            return Err(SysIdError::Dimension { index: i });
        }
    }
    let cols = p + m;
    if samples.len() < min_samples || samples.len() < cols + 1 {
        return Err(SysIdError::InsufficientSamples {
            have: samples.len(),
            need: min_samples.max(cols + 1),
        });
    }

    let rows = samples.len();
    let mut x = DMatrix::zeros(rows, cols);
    let mut y = DMatrix::zeros(rows, p);
    for (r, s) in samples.iter().enumerate() {
        for j in 0..p {
            x[(r, j)] = s.y_prev[j];
            y[(r, j)] = s.y_next[j];
        }
        for j in 0..m {
            x[(r, p + j)] = s.u[j];
        }
    }

    let svd = x.clone().svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let smin = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !condition.is_finite() || condition > condition_threshold {
        return Err(SysIdError::InsufficientExcitation {
            condition,
            threshold: condition_threshold,
        });
    }

    let n = rows as f64;
    let sxx = x.transpose() * &x / n;
    let sxy = x.transpose() * &y / n;
    let sxx_inv = sxx.clone().try_inverse().ok_or(SysIdError::SingularGram)?;

    // theta holds [A_hat'; B_hat'] (cols x p). The measurement noise v in
    // the y-regressor correlates with the equation error through -A v, and
    // u carries J v through feedback, so the normal equations need the
    // correction [V A_hat'; J V A_hat'] on the right-hand side; iterate
    // since A_hat appears on both sides.
    let mut theta = &sxx_inv * &sxy;
    if let Some(v) = measurement_noise.filter(|v| v.amax() > 0.0) {
        if v.nrows() != p || v.ncols() != p {
            return Err(SysIdError::Dimension { index: 0 });
        }
        let feedthrough = estimate_feedthrough(samples, p, m);
        let ols = theta.clone();
        for _ in 0..64 {
            let a_hat_t = theta.rows(0, p).into_owned(); // A_hat', p x p
            let mut rhs = sxy.clone();
            let y_correction = v * &a_hat_t;
            let u_correction = &feedthrough * v * &a_hat_t;
            for j in 0..p {
                for i in 0..p {
                    rhs[(i, j)] += y_correction[(i, j)];
                }
                for i in 0..m {
                    rhs[(p + i, j)] += u_correction[(i, j)];
                }
            }
            let next = &sxx_inv * rhs;
            let delta = (&next - &theta).amax();
            if !delta.is_finite() || delta > 1e6 {
                // compensation diverged (heavily non-nominal data); fall
                // back to the raw fit, which will deviate loudly anyway
                theta = ols;
                break;
            }
            theta = next;
            if delta < 1e-12 {
                break;
            }
        }
    }

    let mut a_hat = DMatrix::zeros(p, p);
    let mut b_hat = DMatrix::zeros(p, m);
    for out in 0..p {
        for j in 0..p {
            a_hat[(out, j)] = theta[(j, out)];
        }
        for j in 0..m {
            b_hat[(out, j)] = theta[(p + j, out)];
        }
    }
    let residual = &y - &x * &theta;
    let residual_norm = (residual.norm_squared() / n).sqrt();
    Ok(BehaviorEstimate {
        a_hat,
        b_hat,
        sample_count: samples.len(),
        residual_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::derive_rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[allow(clippy::too_many_arguments)]
    fn scalar_run(
        a: f64,
        b: f64,
        w_std: f64,
        v_std: f64,
        feedback: f64,
        excitation_std: f64,
        n: usize,
        seed: u64,
    ) -> Vec<IdSample> {
        let mut rng = derive_rng(seed, "sysid.test");
        let mut x = 1.0;
        let mut y = x;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let noise: f64 = rng.sample(StandardNormal);
            let excite: f64 = rng.sample(StandardNormal);
            let u = -feedback * y + excitation_std * excite;
            let x_next = a * x + b * u + w_std * noise;
            let vn: f64 = rng.sample(StandardNormal);
            let y_next = x_next + v_std * vn;
            out.push(IdSample {
                y_prev: DVector::from_element(1, y),
                u: DVector::from_element(1, u),
                y_next: DVector::from_element(1, y_next),
            });
            x = x_next;
            y = y_next;
        }
        out
    }

    #[test]
    fn noise_free_recovers_exactly() {
        let samples = scalar_run(0.9, 1.0, 0.0, 0.0, 0.5, 0.3, 200, 1);
        let est = identify_behavior(&samples, 50, 1e8, None).unwrap();
        assert!((est.a_hat[(0, 0)] - 0.9).abs() < 1e-6, "a = {}", est.a_hat[(0, 0)]);
        assert!((est.b_hat[(0, 0)] - 1.0).abs() < 1e-6, "b = {}", est.b_hat[(0, 0)]);
        assert!(est.residual_norm < 1e-9);
    }

    #[test]
    fn noise_free_matches_ols_oracle() {
        let samples = scalar_run(0.7, 0.8, 0.0, 0.0, 0.4, 0.5, 120, 2);
        let est = identify_behavior(&samples, 50, 1e8, None).unwrap();

        let mut xt_x = DMatrix::zeros(2, 2);
        let mut xt_y = DVector::zeros(2);
        for s in &samples {
            let row = DVector::from_vec(vec![s.y_prev[0], s.u[0]]);
            xt_x += &row * row.transpose();
            xt_y += &row * s.y_next[0];
        }
        let theta = xt_x.try_inverse().unwrap() * xt_y;
        assert!((est.a_hat[(0, 0)] - theta[0]).abs() < 1e-9);
        assert!((est.b_hat[(0, 0)] - theta[1]).abs() < 1e-9);
    }

    #[test]
    fn noisy_closed_loop_stays_within_tolerance() {
        let v = DMatrix::from_element(1, 1, 0.01);
        for seed in [3, 13, 23] {
            let samples = scalar_run(0.9, 1.0, 0.1, 0.1, 0.5, 0.3, 1000, seed);
            let est = identify_behavior(&samples, 50, 1e8, Some(&v)).unwrap();
            assert!(
                (est.a_hat[(0, 0)] - 0.9).abs() < 0.05,
                "seed {seed}: a = {}",
                est.a_hat[(0, 0)]
            );
            assert!(
                (est.b_hat[(0, 0)] - 1.0).abs() < 0.05,
                "seed {seed}: b = {}",
                est.b_hat[(0, 0)]
            );
        }
    }

    #[test]
    fn compensation_removes_attenuation_bias() {
        // long run so sampling scatter is negligible next to the bias
        let samples = scalar_run(0.9, 1.0, 0.1, 0.1, 0.5, 0.2, 50_000, 4);
        let v = DMatrix::from_element(1, 1, 0.01);
        let plain = identify_behavior(&samples, 50, 1e8, None).unwrap();
        let comp = identify_behavior(&samples, 50, 1e8, Some(&v)).unwrap();
        let plain_err = (plain.a_hat[(0, 0)] - 0.9).abs();
        let comp_err = (comp.a_hat[(0, 0)] - 0.9).abs();
        assert!(plain_err > 0.05, "attenuation should be visible: {plain_err}");
        assert!(comp_err < 0.02, "compensated error: {comp_err}");
    }

    #[test]
    fn constant_input_is_insufficient_excitation() {
        // constant u holds the plant at its fixed point: every regressor
        // row repeats, so the data cannot separate a from b
        let mut samples = Vec::new();
        let u = 0.5;
        let x = u / (1.0 - 0.9); // fixed point of x' = 0.9 x + u
        for _ in 0..200 {
            samples.push(IdSample {
                y_prev: DVector::from_element(1, x),
                u: DVector::from_element(1, u),
                y_next: DVector::from_element(1, x),
            });
        }
        assert!(matches!(
            identify_behavior(&samples, 50, 1e8, None),
            Err(SysIdError::InsufficientExcitation { .. })
        ));
    }

    #[test]
    fn too_few_samples_rejected() {
        let samples = scalar_run(0.9, 1.0, 0.0, 0.0, 0.5, 0.3, 10, 5);
        assert!(matches!(
            identify_behavior(&samples, 50, 1e8, None),
            Err(SysIdError::InsufficientSamples { have: 10, .. })
        ));
    }

    #[test]
    fn two_state_noise_free_recovers_matrices() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.5, 1.0]);
        let gain = DMatrix::from_row_slice(1, 2, &[0.62, 1.07]); // stabilizing
        let mut rng = derive_rng(6, "sysid.twostate");
        let mut x = DVector::from_vec(vec![1.0, 0.0]);
        let mut samples = Vec::new();
        for _ in 0..300 {
            let excite: f64 = rng.sample(StandardNormal);
            let u = -(&gain * &x) + DVector::from_element(1, 0.3 * excite);
            let x_next = &a * &x + &b * &u;
            samples.push(IdSample {
                y_prev: x.clone(),
                u: u.clone(),
                y_next: x_next.clone(),
            });
            x = x_next;
        }
        let est = identify_behavior(&samples, 50, 1e8, None).unwrap();
        assert!(est.deviation(&a, &b) < 1e-6, "deviation {}", est.deviation(&a, &b));
    }
}
