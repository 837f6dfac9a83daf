//! Differentiable squared-error models over a feature basis, and ordinary least-squares fitting.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{AifError, Result};
use crate::linalg::SpdSolver;

/// Per-sample loss and the derivatives the influence formulas consume.
///
/// Shapes: θ has `dim_theta()` entries, x has `dim_x()` entries, and `mixed_grad` is the
/// `dim_theta × dim_x` matrix ∂/∂x ∇_θ l.
pub trait LossModel: Send + Sync {
    fn dim_theta(&self) -> usize;
    fn dim_x(&self) -> usize;
    fn loss(&self, theta: &DVector<f64>, x: &DVector<f64>, y: f64) -> f64;
    fn grad_theta(&self, theta: &DVector<f64>, x: &DVector<f64>, y: f64) -> DVector<f64>;
    fn grad_x(&self, theta: &DVector<f64>, x: &DVector<f64>, y: f64) -> DVector<f64>;
    fn hessian_theta(&self, theta: &DVector<f64>, x: &DVector<f64>, y: f64) -> DMatrix<f64>;
    fn mixed_grad(&self, theta: &DVector<f64>, x: &DVector<f64>, y: f64) -> DMatrix<f64>;

    /// ∂/∂x of the Hessian-vector product ∇²_θ l(θ, x, y)·w, a `dim_theta × dim_x` matrix.
    fn hessian_vector_x_jacobian(
        &self,
        theta: &DVector<f64>,
        x: &DVector<f64>,
        y: f64,
        w: &DVector<f64>,
    ) -> DMatrix<f64>;

    fn hessian_vector(
        &self,
        theta: &DVector<f64>,
        x: &DVector<f64>,
        y: f64,
        w: &DVector<f64>,
    ) -> DVector<f64> {
        self.hessian_theta(theta, x, y) * w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    Identity,
    QuadraticDiag,
    FullQuadratic,
}

impl std::str::FromStr for BasisKind {
    type Err = AifError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "linear" => Ok(BasisKind::Identity),
            "quadratic-diag" => Ok(BasisKind::QuadraticDiag),
            "full-quadratic" | "quadratic" => Ok(BasisKind::FullQuadratic),
            other => Err(AifError::Config(format!("unknown basis '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub m: usize,
    pub d: usize,
}

impl BasisSpec {
    pub fn new(kind: BasisKind, m: usize) -> Self {
        let d = match kind {
            BasisKind::Identity => m,
            BasisKind::QuadraticDiag => 2 * m,
            BasisKind::FullQuadratic => m * (m + 3) / 2,
        };
        BasisSpec { kind, m, d }
    }

    /// Feature vector v(x). The full-quadratic layout is (x, x²/2, x_j x_k for j < k).
    pub fn features(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = self.m;
        let mut v = DVector::zeros(self.d);
        v.rows_mut(0, m).copy_from(x);
        match self.kind {
            BasisKind::Identity => {}
            BasisKind::QuadraticDiag => {
                for j in 0..m {
                    let h = x[j] / 2.0;
                    v[m + j] = h * h;
                }
            }
            BasisKind::FullQuadratic => {
                for j in 0..m {
                    v[m + j] = x[j] * x[j] / 2.0;
                }
                let mut idx = 2 * m;
                for j in 0..m {
                    for k in j + 1..m {
                        v[idx] = x[j] * x[k];
                        idx += 1;
                    }
                }
            }
        }
        v
    }

    /// Jacobian ∂v/∂x, a d × m matrix.
    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let m = self.m;
        let mut jac = DMatrix::zeros(self.d, m);
        for j in 0..m {
            jac[(j, j)] = 1.0;
        }
        match self.kind {
            BasisKind::Identity => {}
            BasisKind::QuadraticDiag => {
                for j in 0..m {
                    jac[(m + j, j)] = x[j] / 2.0;
                }
            }
            BasisKind::FullQuadratic => {
                for j in 0..m {
                    jac[(m + j, j)] = x[j];
                }
                let mut idx = 2 * m;
                for j in 0..m {
                    for k in j + 1..m {
                        jac[(idx, j)] = x[k];
                        jac[(idx, k)] = x[j];
                        idx += 1;
                    }
                }
            }
        }
        jac
    }
}

/// l(θ, x, y) = ½(y − θᵀv(x))².
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionModel {
    pub basis: BasisSpec,
}

impl RegressionModel {
    pub fn new(basis: BasisSpec) -> Self {
        RegressionModel { basis }
    }

    pub fn identity(m: usize) -> Self {
        RegressionModel::new(BasisSpec::new(BasisKind::Identity, m))
    }

    pub fn residual(&self, theta: &DVector<f64>, x: &DVector<f64>, y: f64) -> f64 {
        theta.dot(&self.basis.features(x)) - y
    }
}

impl LossModel for RegressionModel {
    fn dim_theta(&self) -> usize {
        self.basis.d
    }

    fn dim_x(&self) -> usize {
        self.basis.m
    }

    fn loss(&self, theta: &DVector<f64>, x: &DVector<f64>, y: f64) -> f64 {
        let r = self.residual(theta, x, y);
        0.5 * r * r
    }

    fn grad_theta(&self, theta: &DVector<f64>, x: &DVector<f64>, y: f64) -> DVector<f64> {
        let v = self.basis.features(x);
        let r = theta.dot(&v) - y;
        v * r
    }

    fn grad_x(&self, theta: &DVector<f64>, x: &DVector<f64>, y: f64) -> DVector<f64> {
        let r = self.residual(theta, x, y);
        self.basis.jacobian(x).tr_mul(theta) * r
    }

    fn hessian_theta(&self, _theta: &DVector<f64>, x: &DVector<f64>, _y: f64) -> DMatrix<f64> {
        let v = self.basis.features(x);
        &v * v.transpose()
    }

    fn mixed_grad(&self, theta: &DVector<f64>, x: &DVector<f64>, y: f64) -> DMatrix<f64> {
        let v = self.basis.features(x);
        let jac = self.basis.jacobian(x);
        let r = theta.dot(&v) - y;
        let theta_j = jac.tr_mul(theta);
        &v * theta_j.transpose() + jac * r
    }

    fn hessian_vector_x_jacobian(
        &self,
        _theta: &DVector<f64>,
        x: &DVector<f64>,
        _y: f64,
        w: &DVector<f64>,
    ) -> DMatrix<f64> {
        let v = self.basis.features(x);
        let jac = self.basis.jacobian(x);
        let w_j = jac.tr_mul(w);
        &jac * v.dot(w) + &v * w_j.transpose()
    }

    fn hessian_vector(
        &self,
        _theta: &DVector<f64>,
        x: &DVector<f64>,
        _y: f64,
        w: &DVector<f64>,
    ) -> DVector<f64> {
        let v = self.basis.features(x);
        let s = v.dot(w);
        v * s
    }
}

/// (1/n) Σ l(θ, x_i, y_i).
pub fn mean_loss(model: &dyn LossModel, theta: &DVector<f64>, d: &Dataset) -> f64 {
    (0..d.n())
        .map(|i| model.loss(theta, &d.x(i), d.y(i)))
        .sum::<f64>()
        / d.n() as f64
}

/// (1/n) Σ ∇_θ l(θ, x_i, y_i).
pub fn mean_grad_theta(model: &dyn LossModel, theta: &DVector<f64>, d: &Dataset) -> DVector<f64> {
    let mut g = DVector::zeros(model.dim_theta());
    for i in 0..d.n() {
        g += model.grad_theta(theta, &d.x(i), d.y(i));
    }
    g / d.n() as f64
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub theta: DVector<f64>,
    /// Condition estimate of the Gram matrix (1/n) Σ v vᵀ.
    pub condition: f64,
    pub gradient_norm: f64,
}

/// Ordinary least squares over the basis via the normal equations.
pub fn fit(model: &RegressionModel, d: &Dataset) -> Result<FitResult> {
    check_dims(model, d)?;
    let dim = model.basis.d;
    let n = d.n() as f64;
    let mut gram = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    for i in 0..d.n() {
        let v = model.basis.features(&d.x(i));
        gram.ger(1.0 / n, &v, &v, 1.0);
        rhs.axpy(d.y(i) / n, &v, 1.0);
    }
    let solver = SpdSolver::new(&gram)?;
    let theta = solver.solve(&rhs)?;
    let gradient_norm = mean_grad_theta(model, &theta, d).norm();
    if gradient_norm >= 1e-10 * (1.0 + theta.norm()) {
        log::warn!("least-squares stationarity residual {gradient_norm:.3e}");
    }
    Ok(FitResult {
        theta,
        condition: solver.condition(),
        gradient_norm,
    })
}

pub fn check_dims(model: &dyn LossModel, d: &Dataset) -> Result<()> {
    if model.dim_x() != d.m() {
        return Err(AifError::Dimension(format!(
            "model expects {} input columns, dataset has {}",
            model.dim_x(),
            d.m()
        )));
    }
    Ok(())
}

/// Serialized fitted parameters with the basis they belong to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaRecord {
    pub basis: BasisKind,
    pub m: usize,
    pub d: usize,
    pub theta: Vec<f64>,
}

impl ThetaRecord {
    pub fn new(basis: &BasisSpec, theta: &DVector<f64>) -> Self {
        ThetaRecord {
            basis: basis.kind,
            m: basis.m,
            d: basis.d,
            theta: theta.iter().copied().collect(),
        }
    }

    pub fn into_parts(self) -> Result<(BasisSpec, DVector<f64>)> {
        let spec = BasisSpec::new(self.basis, self.m);
        if spec.d != self.d || self.theta.len() != self.d {
            return Err(AifError::Dimension(
                "theta record is inconsistent with its basis".into(),
            ));
        }
        Ok((spec, DVector::from_vec(self.theta)))
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn perturbed(v: &DVector<f64>, k: usize, h: f64) -> DVector<f64> {
    let mut out = v.clone();
    out[k] += h;
    out
}

/// Worst relative error of the analytic derivatives against central differences with step h.
pub fn finite_difference_check(
    model: &dyn LossModel,
    theta: &DVector<f64>,
    x: &DVector<f64>,
    y: f64,
    h: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let gt = model.grad_theta(theta, x, y);
    let gx = model.grad_x(theta, x, y);
    let ht = model.hessian_theta(theta, x, y);
    let mx = model.mixed_grad(theta, x, y);
    for k in 0..theta.len() {
        let tp = perturbed(theta, k, h);
        let tm = perturbed(theta, k, -h);
        let fd = (model.loss(&tp, x, y) - model.loss(&tm, x, y)) / (2.0 * h);
        worst = worst.max(relative_error(gt[k], fd));
        let col = (model.grad_theta(&tp, x, y) - model.grad_theta(&tm, x, y)) / (2.0 * h);
        for r in 0..theta.len() {
            worst = worst.max(relative_error(ht[(r, k)], col[r]));
        }
    }
    for k in 0..x.len() {
        let xp = perturbed(x, k, h);
        let xm = perturbed(x, k, -h);
        let fd = (model.loss(theta, &xp, y) - model.loss(theta, &xm, y)) / (2.0 * h);
        worst = worst.max(relative_error(gx[k], fd));
        let col = (model.grad_theta(theta, &xp, y) - model.grad_theta(theta, &xm, y)) / (2.0 * h);
        for r in 0..theta.len() {
            worst = worst.max(relative_error(mx[(r, k)], col[r]));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, Coefficients, Family, GeneratorConfig, Role};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn s(x: f64) -> DVector<f64> {
        DVector::from_vec(vec![x])
    }

    fn two_point() -> Dataset {
        Dataset::from_rows(&[(vec![1.0], 2.0), (vec![-1.0], -1.0)], Role::Train).unwrap()
    }

    #[test]
    fn identity_hand_values() {
        let model = RegressionModel::identity(1);
        let (t, x) = (s(1.5), s(1.0));
        assert!((model.loss(&t, &x, 2.0) - 0.125).abs() < 1e-15);
        assert!((model.grad_theta(&t, &x, 2.0)[0] + 0.5).abs() < 1e-15);
        assert!((model.grad_x(&t, &x, 2.0)[0] + 0.75).abs() < 1e-15);
        // ∂/∂x[(θx − y)x] = 2θx − y
        assert!((model.mixed_grad(&t, &x, 2.0)[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_parameter_zero_output() {
        for kind in [
            BasisKind::Identity,
            BasisKind::QuadraticDiag,
            BasisKind::FullQuadratic,
        ] {
            let model = RegressionModel::new(BasisSpec::new(kind, 3));
            let theta = DVector::zeros(model.dim_theta());
            let x = DVector::from_vec(vec![0.3, -1.2, 2.0]);
            assert_eq!(model.loss(&theta, &x, 0.0), 0.0);
            assert!(model.grad_theta(&theta, &x, 0.0).iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn basis_dimensions_and_order() {
        assert_eq!(BasisSpec::new(BasisKind::Identity, 4).d, 4);
        assert_eq!(BasisSpec::new(BasisKind::QuadraticDiag, 4).d, 8);
        assert_eq!(BasisSpec::new(BasisKind::FullQuadratic, 4).d, 14);
        let spec = BasisSpec::new(BasisKind::FullQuadratic, 3);
        let v = spec.features(&DVector::from_vec(vec![1.0, 2.0, 3.0]));
        assert_eq!(v.as_slice(), &[1.0, 2.0, 3.0, 0.5, 2.0, 4.5, 2.0, 3.0, 6.0]);
        let spec = BasisSpec::new(BasisKind::QuadraticDiag, 2);
        let v = spec.features(&DVector::from_vec(vec![1.0, -4.0]));
        assert_eq!(v.as_slice(), &[1.0, -4.0, 0.25, 4.0]);
    }

    #[test]
    fn fit_two_point() {
        let res = fit(&RegressionModel::identity(1), &two_point()).unwrap();
        assert!((res.theta[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn fit_zero_outputs() {
        let d = Dataset::from_rows(
            &[
                (vec![1.0, 2.0], 0.0),
                (vec![-1.0, 0.5], 0.0),
                (vec![0.3, 0.3], 0.0),
            ],
            Role::Train,
        )
        .unwrap();
        let res = fit(&RegressionModel::identity(2), &d).unwrap();
        assert!(res.theta.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn fit_interpolates_noiseless_linear_data() {
        let mut cfg = GeneratorConfig::new(Family::GaussianLinear, 200, 2);
        cfg.beta1 = Some(Coefficients::Values(vec![2.0, -3.4]));
        let d = generate(&cfg).unwrap();
        let model = RegressionModel::identity(2);
        let res = fit(&model, &d).unwrap();
        assert!((res.theta[0] - 2.0).abs() < 1e-8 && (res.theta[1] + 3.4).abs() < 1e-8);
        assert!(res.gradient_norm < 1e-10 * (1.0 + res.theta.norm()));
    }

    #[test]
    fn fit_is_permutation_invariant() {
        let mut cfg = GeneratorConfig::new(Family::GaussianLinearQuadratic, 300, 3);
        cfg.sigma_xi = 0.5;
        cfg.beta2 = Some(Coefficients::Values(vec![0.5, -0.2, 0.1]));
        let d = generate(&cfg).unwrap();
        let model = RegressionModel::new(BasisSpec::new(BasisKind::FullQuadratic, 3));
        let a = fit(&model, &d).unwrap().theta;
        let perm: Vec<usize> = (0..d.n()).rev().collect();
        let b = fit(&model, &d.permuted(&perm).unwrap()).unwrap().theta;
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn fit_rejects_singular_gram() {
        let d = Dataset::from_rows(&[(vec![1.0, 1.0], 1.0), (vec![2.0, 2.0], 2.0)], Role::Train).unwrap();
        assert!(matches!(
            fit(&RegressionModel::identity(2), &d),
            Err(AifError::RankDeficient { .. })
        ));
    }

    #[test]
    fn theta_record_round_trip() {
        let spec = BasisSpec::new(BasisKind::QuadraticDiag, 2);
        let theta = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let json = serde_json::to_string(&ThetaRecord::new(&spec, &theta)).unwrap();
        assert!(json.contains("quadratic-diag"));
        let back: ThetaRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.into_parts().unwrap(), (spec, theta));
    }

    #[test]
    fn finite_differences_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for (kind, tol) in [
            (BasisKind::Identity, 1e-6),
            (BasisKind::QuadraticDiag, 1e-5),
            (BasisKind::FullQuadratic, 1e-5),
        ] {
            let model = RegressionModel::new(BasisSpec::new(kind, 3));
            for _ in 0..25 {
                let theta = DVector::from_fn(model.dim_theta(), |_, _| rng.random_range(-2.0..2.0));
                let x = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
                let y = rng.random_range(-2.0..2.0);
                let err = finite_difference_check(&model, &theta, &x, y, 1e-5);
                assert!(err < tol, "{kind:?}: {err}");
            }
        }
    }

    #[test]
    fn zero_data_has_exact_gradient_check() {
        let model = RegressionModel::new(BasisSpec::new(BasisKind::QuadraticDiag, 2));
        let theta = DVector::from_vec(vec![0.3, -0.7, 1.1, 0.2]);
        let x = DVector::zeros(2);
        let gt = model.grad_theta(&theta, &x, 0.0);
        assert!(gt.iter().all(|&g| g == 0.0));
        let h = 1e-5;
        for k in 0..4 {
            let fd = (model.loss(&perturbed(&theta, k, h), &x, 0.0)
                - model.loss(&perturbed(&theta, k, -h), &x, 0.0))
                / (2.0 * h);
            assert_eq!(fd, 0.0);
        }
    }

    #[test]
    fn hessian_vector_jacobian_matches_differences() {
        let model = RegressionModel::new(BasisSpec::new(BasisKind::FullQuadratic, 2));
        let theta = DVector::from_vec(vec![0.1, 0.2, -0.3, 0.4, 0.5]);
        let w = DVector::from_vec(vec![1.0, -1.0, 0.5, 0.25, 2.0]);
        let x = DVector::from_vec(vec![0.7, -1.3]);
        let jac = model.hessian_vector_x_jacobian(&theta, &x, 0.2, &w);
        let h = 1e-6;
        for k in 0..2 {
            let fd = (model.hessian_vector(&theta, &perturbed(&x, k, h), 0.2, &w)
                - model.hessian_vector(&theta, &perturbed(&x, k, -h), 0.2, &w))
                / (2.0 * h);
            assert!((jac.column(k) - fd).amax() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn basis_hessian_is_psd(xs in prop::collection::vec(-3.0f64..3.0, 3), y in -3.0f64..3.0) {
            let model = RegressionModel::new(BasisSpec::new(BasisKind::FullQuadratic, 3));
            let x = DVector::from_vec(xs);
            let theta = DVector::zeros(model.dim_theta());
            let h = model.hessian_theta(&theta, &x, y);
            prop_assert!((&h - h.transpose()).amax() == 0.0);
            prop_assert!(crate::linalg::min_eigenvalue(&h) > -1e-10 * (1.0 + h.amax()));
        }
    }
}
