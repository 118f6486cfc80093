//! Discrete-time linear plant with process and measurement noise.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::sim::RngStream;

#[derive(Debug, Error, PartialEq)]
pub enum PlantError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix {name} is not symmetric positive semidefinite (eigenvalue {eigenvalue:.3e})")]
    NotPsd { name: &'static str, eigenvalue: f64 },
    #[error("matrix {name} is not positive definite (eigenvalue {eigenvalue:.3e})")]
    NotPd { name: &'static str, eigenvalue: f64 },
    #[error("state diverged at step {step}: |x| = {norm:.3e}")]
    Diverged { step: u64, norm: f64 },
    #[error("non-finite state at step {step}")]
    NonFinite { step: u64 },
}

fn check_symmetric(name: &'static str, m: &DMatrix<f64>) -> Result<(), PlantError> {
    if !m.is_square() {
        return Err(PlantError::Dimension(format!("{name} must be square")));
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-9 * scale {
                return Err(PlantError::Dimension(format!("{name} must be symmetric")));
            }
        }
    }
    Ok(())
}

/// Factor of a PSD covariance such that `factor * z` with standard-normal z
/// has the requested covariance. Built from the symmetric eigendecomposition
/// so that semidefinite matrices (including zero) are accepted.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    factor: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(cov: &DMatrix<f64>, name: &'static str) -> Result<Self, PlantError> {
        check_symmetric(name, cov)?;
        let sym = nalgebra::SymmetricEigen::new(cov.clone());
        let scale = cov.amax().max(1.0);
        let mut eigvals = sym.eigenvalues.clone();
        for v in eigvals.iter_mut() {
            if *v < -1e-9 * scale {
                return Err(PlantError::NotPsd {
                    name,
                    eigenvalue: *v,
                });
            }
            *v = v.max(0.0).sqrt();
        }
        let factor = &sym.eigenvectors * DMatrix::from_diagonal(&eigvals);
        Ok(GaussianSampler { factor })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn is_zero(&self) -> bool {
        self.factor.amax() == 0.0
    }

    pub fn sample(&self, rng: &mut RngStream) -> DVector<f64> {
        // Zero covariance must not consume draws, so that disabling noise
        // (or the watermark) leaves every other stream untouched.
        if self.is_zero() {
            return DVector::zeros(self.dim());
        }
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample(StandardNormal));
        &self.factor * z
    }
}

/// One-shot draw from N(0, cov).
pub fn sample_gaussian(cov: &DMatrix<f64>, rng: &mut RngStream) -> Result<DVector<f64>, PlantError> {
    Ok(GaussianSampler::new(cov, "cov")?.sample(rng))
}

/// The nominal behavior matrices of the physical process.
#[derive(Debug, Clone)]
pub struct StateSpaceModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub v: DMatrix<f64>,
    process_noise: GaussianSampler,
    measurement_noise: GaussianSampler,
}

impl StateSpaceModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        w: DMatrix<f64>,
        v: DMatrix<f64>,
    ) -> Result<Self, PlantError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(PlantError::Dimension("A must be n x n".into()));
        }
        if b.nrows() != n {
            return Err(PlantError::Dimension(format!(
                "B has {} rows, expected {n}",
                b.nrows()
            )));
        }
        if c.ncols() != n {
            return Err(PlantError::Dimension(format!(
                "C has {} columns, expected {n}",
                c.ncols()
            )));
        }
        let p = c.nrows();
        if w.nrows() != n || w.ncols() != n {
            return Err(PlantError::Dimension("W must be n x n".into()));
        }
        if v.nrows() != p || v.ncols() != p {
            return Err(PlantError::Dimension("V must be p x p".into()));
        }
        let process_noise = GaussianSampler::new(&w, "W")?;
        let measurement_noise = GaussianSampler::new(&v, "V")?;
        Ok(StateSpaceModel {
            a,
            b,
            c,
            w,
            v,
            process_noise,
            measurement_noise,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    /// Requires V positive definite, which the Kalman update needs for an
    /// invertible innovation covariance.
    pub fn require_pd_measurement_noise(&self) -> Result<(), PlantError> {
        let sym = nalgebra::SymmetricEigen::new(self.v.clone());
        if let Some(min) = sym
            .eigenvalues
            .iter()
            .cloned()
            .min_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"))
        {
            if min <= 0.0 {
                return Err(PlantError::NotPd {
                    name: "V",
                    eigenvalue: min,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub x: DVector<f64>,
    pub k: u64,
}

impl PlantState {
    pub fn new(x: DVector<f64>) -> Self {
        PlantState { x, k: 0 }
    }
}

/// Advances the plant one step: `x+ = A x + B u + w`, `y = C x+ + v`.
/// The measurement reports the post-step state, which keeps the loop
/// strictly causal: sense, transmit, control, transmit, actuate.
pub fn plant_step(
    model: &StateSpaceModel,
    state: &PlantState,
    u: &DVector<f64>,
    rng: &mut RngStream,
) -> Result<(PlantState, DVector<f64>), PlantError> {
    if u.len() != model.input_dim() {
        return Err(PlantError::Dimension(format!(
            "input has {} entries, expected {}",
            u.len(),
            model.input_dim()
        )));
    }
    if state.x.len() != model.state_dim() {
        return Err(PlantError::Dimension(format!(
            "state has {} entries, expected {}",
            state.x.len(),
            model.state_dim()
        )));
    }
    let w = model.process_noise.sample(rng);
    let x_next = &model.a * &state.x + &model.b * u + w;
    if x_next.iter().any(|v| !v.is_finite()) {
        return Err(PlantError::NonFinite { step: state.k + 1 });
    }
    let v = model.measurement_noise.sample(rng);
    let y = &model.c * &x_next + v;
    Ok((
        PlantState {
            x: x_next,
            k: state.k + 1,
        },
        y,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::derive_rng;

    fn scalar_model(a: f64, w: f64, v: f64) -> StateSpaceModel {
        StateSpaceModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, w),
            DMatrix::from_element(1, 1, v),
        )
        .unwrap()
    }

    #[test]
    fn noise_free_fixed_point_and_recursion() {
        let model = scalar_model(0.9, 0.0, 0.0);
        let mut rng = derive_rng(1, "plant");
        let zero = DVector::from_element(1, 0.0);

        let (s, y) = plant_step(&model, &PlantState::new(zero.clone()), &zero, &mut rng).unwrap();
        assert_eq!(s.x[0], 0.0);
        assert_eq!(y[0], 0.0);
        assert_eq!(s.k, 1);

        let one = DVector::from_element(1, 1.0);
        let (s, y) = plant_step(&model, &PlantState::new(one.clone()), &zero, &mut rng).unwrap();
        assert!((s.x[0] - 0.9).abs() < 1e-15);
        assert!((y[0] - 0.9).abs() < 1e-15);

        let cancel = DVector::from_element(1, -0.9);
        let (s, y) = plant_step(&model, &PlantState::new(one), &cancel, &mut rng).unwrap();
        assert!(s.x[0].abs() < 1e-15);
        assert!(y[0].abs() < 1e-15);
    }

    #[test]
    fn noise_free_superposition() {
        let model = StateSpaceModel::new(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]),
            DMatrix::from_row_slice(2, 1, &[0.5, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let mut rng = derive_rng(2, "plant");
        let x1 = DVector::from_vec(vec![1.0, -2.0]);
        let x2 = DVector::from_vec(vec![0.3, 0.7]);
        let u1 = DVector::from_vec(vec![2.0]);
        let u2 = DVector::from_vec(vec![-0.5]);

        let (sa, ya) = plant_step(&model, &PlantState::new(x1.clone()), &u1, &mut rng).unwrap();
        let (sb, yb) = plant_step(&model, &PlantState::new(x2.clone()), &u2, &mut rng).unwrap();
        let (sum, ysum) =
            plant_step(&model, &PlantState::new(x1 + x2), &(u1 + u2), &mut rng).unwrap();
        assert!((&sa.x + &sb.x - sum.x).amax() < 1e-12);
        assert!((ya + yb - ysum).amax() < 1e-12);
    }

    #[test]
    fn stabilizing_feedback_contracts_geometrically() {
        let model = scalar_model(0.9, 0.0, 0.0);
        let gain = 0.5325; // stabilizing for a = 0.9, b = 1
        let mut rng = derive_rng(3, "plant");
        let mut state = PlantState::new(DVector::from_element(1, 1.0));
        for _ in 0..200 {
            let u = DVector::from_element(1, -gain * state.x[0]);
            let (next, _) = plant_step(&model, &state, &u, &mut rng).unwrap();
            state = next;
        }
        assert!(state.x.norm() < 1e-6, "|x_200| = {}", state.x.norm());
    }

    #[test]
    fn zero_covariance_always_yields_zero() {
        let mut rng = derive_rng(4, "noise");
        let cov = DMatrix::zeros(3, 3);
        for _ in 0..100 {
            assert_eq!(sample_gaussian(&cov, &mut rng).unwrap(), DVector::zeros(3));
        }
    }

    #[test]
    fn sample_covariance_converges_identity() {
        let mut rng = derive_rng(5, "noise");
        let sampler = GaussianSampler::new(&DMatrix::identity(2, 2), "cov").unwrap();
        let n = 100_000;
        let mut acc = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let z = sampler.sample(&mut rng);
            acc += &z * z.transpose();
        }
        acc /= n as f64;
        for i in 0..2 {
            for j in 0..2 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (acc[(i, j)] - expected).abs() < 0.05,
                    "cov[{i}{j}] = {}",
                    acc[(i, j)]
                );
            }
        }
    }

    #[test]
    fn sample_variance_matches_scalar_covariance() {
        let mut rng = derive_rng(6, "noise");
        let sampler = GaussianSampler::new(&DMatrix::from_element(1, 1, 4.0), "cov").unwrap();
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let z = sampler.sample(&mut rng)[0];
            acc += z * z;
        }
        let var = acc / n as f64;
        assert!((var - 4.0).abs() < 0.1, "var = {var}");
    }

    #[test]
    fn non_psd_covariance_rejected() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]); // eigenvalues 3, -1
        let mut rng = derive_rng(7, "noise");
        assert!(matches!(
            sample_gaussian(&cov, &mut rng),
            Err(PlantError::NotPsd { .. })
        ));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let model = scalar_model(0.9, 0.0, 0.0);
        let mut rng = derive_rng(8, "plant");
        let bad_u = DVector::from_vec(vec![0.0, 0.0]);
        assert!(matches!(
            plant_step(&model, &PlantState::new(DVector::zeros(1)), &bad_u, &mut rng),
            Err(PlantError::Dimension(_))
        ));
    }
}
