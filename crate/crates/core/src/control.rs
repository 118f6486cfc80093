//! Feedback controller: LQR regulation, Kalman estimation, physical
//! watermarking, the windowed chi-square residual detector, and the
//! supervisor that raises alerts toward the network controller.
//!
//! The watermark is the countermeasure against replayed or fabricated
//! sensor streams: a private Gaussian perturbation rides on every
//! actuation, and the Kalman predictor compensates for it, so residuals
//! stay nominal until an adversary feeds back measurements that no longer
//! carry the current perturbation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plant::{GaussianSampler, PlantError, StateSpaceModel};
use crate::sim::RngStream;
use crate::stats;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("Riccati iteration did not converge; (A, B) is likely not stabilizable")]
    RiccatiDiverged,
    #[error("closed loop unstable: spectral radius {rho:.6} >= 1")]
    UnstableClosedLoop { rho: f64 },
    #[error("innovation covariance singular; V must be positive definite")]
    SingularInnovation,
    #[error("weight matrix invalid: {0}")]
    Weight(#[from] PlantError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Solves the discrete algebraic Riccati equation by fixed-point iteration
/// and returns the state-feedback gain `L = (R + B'PB)^-1 B'PA`.
pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, ControlError> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || q.ncols() != n {
        return Err(ControlError::Dimension("A, B, Q dimensions inconsistent".into()));
    }
    if r.nrows() != m || r.ncols() != m {
        return Err(ControlError::Dimension("R must be m x m".into()));
    }
    let mut p = q.clone();
    let mut converged = false;
    for _ in 0..200_000 {
        let btp = b.transpose() * &p;
        let gram = r + &btp * b;
        let inv = gram
            .clone()
            .try_inverse()
            .ok_or(ControlError::RiccatiDiverged)?;
        let next = q + a.transpose() * &p * a
            - a.transpose() * &p * b * &inv * &btp * a;
        let delta = (&next - &p).amax();
        p = next;
        if delta < 1e-13 * p.amax().max(1.0) {
            converged = true;
            break;
        }
        if !p.iter().all(|v| v.is_finite()) {
            return Err(ControlError::RiccatiDiverged);
        }
    }
    if !converged {
        return Err(ControlError::RiccatiDiverged);
    }
    let gram = r + b.transpose() * &p * b;
    let inv = gram.try_inverse().ok_or(ControlError::RiccatiDiverged)?;
    let gain = inv * b.transpose() * &p * a;
    let rho = spectral_radius(&(a - b * &gain));
    if rho >= 1.0 {
        return Err(ControlError::UnstableClosedLoop { rho });
    }
    Ok(gain)
}

/// State estimate with covariance. `P` stays symmetric PSD; it is
/// re-symmetrized after every update to stop floating-point drift over
/// long runs.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub xhat: DVector<f64>,
    pub p: DMatrix<f64>,
    pub k: u64,
}

impl Estimate {
    pub fn new(xhat: DVector<f64>, p: DMatrix<f64>) -> Self {
        Estimate { xhat, p, k: 0 }
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Prediction-only step for ticks where no measurement arrived.
pub fn kalman_predict(model: &StateSpaceModel, est: &Estimate, u_prev: &DVector<f64>) -> Estimate {
    let xpred = &model.a * &est.xhat + &model.b * u_prev;
    let mut ppred = &model.a * &est.p * model.a.transpose() + &model.w;
    symmetrize(&mut ppred);
    Estimate {
        xhat: xpred,
        p: ppred,
        k: est.k + 1,
    }
}

/// Standard predict/update. Returns the posterior estimate, the innovation
/// `r = y - C (A xhat + B u_prev)` and its covariance `S = C P_pred C' + V`.
pub fn kalman_step(
    model: &StateSpaceModel,
    est: &Estimate,
    u_prev: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<(Estimate, DVector<f64>, DMatrix<f64>), ControlError> {
    if y.len() != model.output_dim() {
        return Err(ControlError::Dimension(format!(
            "measurement has {} entries, expected {}",
            y.len(),
            model.output_dim()
        )));
    }
    let pred = kalman_predict(model, est, u_prev);
    let residual = y - &model.c * &pred.xhat;
    let s = &model.c * &pred.p * model.c.transpose() + &model.v;
    let s_inv = s.clone().try_inverse().ok_or(ControlError::SingularInnovation)?;
    let gain = &pred.p * model.c.transpose() * &s_inv;
    let xhat = &pred.xhat + &gain * &residual;
    let identity = DMatrix::identity(model.state_dim(), model.state_dim());
    let mut p = (&identity - &gain * &model.c) * &pred.p;
    symmetrize(&mut p);
    Ok((
        Estimate {
            xhat,
            p,
            k: pred.k,
        },
        residual,
        s,
    ))
}

/// Additive Gaussian watermark: `u = u* + delta`, `delta ~ N(0, Qw)`.
/// A zero Qw disables the watermark exactly (no draw is consumed).
pub fn watermark_input(
    u_star: &DVector<f64>,
    watermark: &GaussianSampler,
    rng: &mut RngStream,
) -> (DVector<f64>, DVector<f64>) {
    let delta = watermark.sample(rng);
    (u_star + &delta, delta)
}

/// Regulation law `u* = -L (xhat - reference)`.
pub fn controller_tick(
    est: &Estimate,
    gain: &DMatrix<f64>,
    reference: &DVector<f64>,
) -> DVector<f64> {
    -(gain * (&est.xhat - reference))
}

/// Windowed normalized-innovation statistic over one window of residuals:
/// `g = sum r' S^-1 r`, alarm when `g > tau`.
pub fn chi2_detect(
    window: &[(DVector<f64>, DMatrix<f64>)],
    tau: f64,
) -> Result<(bool, f64), ControlError> {
    let mut g = 0.0;
    for (residual, s) in window {
        let s_inv = s
            .clone()
            .try_inverse()
            .ok_or(ControlError::SingularInnovation)?;
        g += (residual.transpose() * s_inv * residual)[(0, 0)];
    }
    Ok((g > tau, g))
}

/// Detector threshold at the given chi-square percentile for `p * w`
/// degrees of freedom.
pub fn detector_threshold(output_dim: usize, window: usize, percentile: f64) -> f64 {
    stats::chi2_quantile((output_dim * window) as f64, percentile)
        .expect("valid chi-square parameters")
}

/// Accumulates per-step normalized innovations and evaluates the statistic
/// on consecutive non-overlapping windows of `w` residuals. Evaluating on
/// disjoint windows keeps nominal alarms independent across evaluations,
/// so a short hysteresis is enough to suppress false alerts.
#[derive(Debug)]
pub struct Chi2Detector {
    window: usize,
    tau: f64,
    buffer: Vec<(DVector<f64>, DMatrix<f64>)>,
    evaluations: u64,
    alarms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorEval {
    pub g: f64,
    pub alarm: bool,
}

impl Chi2Detector {
    pub fn new(window: usize, tau: f64) -> Self {
        assert!(window >= 1, "detector window must be at least 1");
        assert!(tau > 0.0, "detector threshold must be positive");
        Chi2Detector {
            window,
            tau,
            buffer: Vec::with_capacity(window),
            evaluations: 0,
            alarms: 0,
        }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Pushes one residual; returns an evaluation when the window fills.
    pub fn push(
        &mut self,
        residual: DVector<f64>,
        s: DMatrix<f64>,
    ) -> Result<Option<DetectorEval>, ControlError> {
        self.buffer.push((residual, s));
        if self.buffer.len() < self.window {
            return Ok(None);
        }
        let (alarm, g) = chi2_detect(&self.buffer, self.tau)?;
        self.buffer.clear();
        self.evaluations += 1;
        if alarm {
            self.alarms += 1;
        }
        Ok(Some(DetectorEval { g, alarm }))
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations
    }

    pub fn alarms(&self) -> u64 {
        self.alarms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlertKind {
    PhysicalAnomaly,
    Cleared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlertReason {
    ResidualThreshold,
    MissingMeasurements,
}

/// Cross-layer message from the feedback supervisor to the network
/// controller. Emitted only on sustained rising and falling edges of the
/// anomaly condition, never level-triggered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertSignal {
    pub kind: AlertKind,
    pub reason: AlertReason,
    pub statistic: f64,
    pub step: u64,
    pub flow_hint: String,
}

/// Edge-triggered alert state machine with hysteresis. Residual alarms are
/// counted per detector evaluation; missing measurements are counted per
/// control tick. Either source sustained for `hysteresis` consecutive
/// observations raises the alert; a sustained quiet spell clears it.
#[derive(Debug)]
pub struct Supervisor {
    hysteresis: u32,
    flow_hint: String,
    raised: bool,
    consecutive_alarms: u32,
    consecutive_clean: u32,
    consecutive_missed: u32,
    last_statistic: f64,
}

impl Supervisor {
    pub fn new(hysteresis: u32, flow_hint: String) -> Self {
        Supervisor {
            hysteresis: hysteresis.max(1),
            flow_hint,
            raised: false,
            consecutive_alarms: 0,
            consecutive_clean: 0,
            consecutive_missed: 0,
            last_statistic: 0.0,
        }
    }

    pub fn raised(&self) -> bool {
        self.raised
    }

    fn raise(&mut self, reason: AlertReason, statistic: f64, step: u64) -> Option<AlertSignal> {
        if self.raised {
            return None;
        }
        self.raised = true;
        Some(AlertSignal {
            kind: AlertKind::PhysicalAnomaly,
            reason,
            statistic,
            step,
            flow_hint: self.flow_hint.clone(),
        })
    }

    fn clear(&mut self, step: u64) -> Option<AlertSignal> {
        if !self.raised {
            return None;
        }
        self.raised = false;
        Some(AlertSignal {
            kind: AlertKind::Cleared,
            reason: AlertReason::ResidualThreshold,
            statistic: self.last_statistic,
            step,
            flow_hint: self.flow_hint.clone(),
        })
    }

    /// Feeds one detector evaluation.
    pub fn on_detector_eval(&mut self, eval: DetectorEval, step: u64) -> Option<AlertSignal> {
        self.last_statistic = eval.g;
        if eval.alarm {
            self.consecutive_alarms += 1;
            self.consecutive_clean = 0;
            if self.consecutive_alarms >= self.hysteresis {
                return self.raise(AlertReason::ResidualThreshold, eval.g, step);
            }
        } else {
            self.consecutive_clean += 1;
            self.consecutive_alarms = 0;
            if self.consecutive_clean >= self.hysteresis && self.consecutive_missed == 0 {
                return self.clear(step);
            }
        }
        None
    }

    /// Feeds one watchdog observation: whether the expected measurement
    /// arrived during the past control period.
    pub fn on_watchdog(&mut self, measurement_arrived: bool, step: u64) -> Option<AlertSignal> {
        if measurement_arrived {
            self.consecutive_missed = 0;
            None
        } else {
            self.consecutive_missed += 1;
            self.consecutive_alarms = 0;
            self.consecutive_clean = 0;
            if self.consecutive_missed >= self.hysteresis {
                return self.raise(
                    AlertReason::MissingMeasurements,
                    self.consecutive_missed as f64,
                    step,
                );
            }
            None
        }
    }
}
