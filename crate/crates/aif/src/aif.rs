//! Closed-form adversarial influence: Î = −Ĥ⁻¹Φ, its per-sample decomposition, coordinate-wise
//! confidence intervals and the distributional (Wasserstein) variant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::attack::{steepest_direction, NormOrder};
use crate::dataset::{mean_norm, Dataset};
use crate::error::{AifError, Result};
use crate::linalg::SpdSolver;
use crate::model::{check_dims, LossModel};

/// What to do with samples whose input gradient vanishes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegeneratePolicy {
    #[default]
    Error,
    /// Drop the sample and average over the remaining ones.
    Skip,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct AifOptions {
    pub policy: DegeneratePolicy,
    /// Overrides Ê‖x‖_p, for instance when the budget is defined on another dataset.
    pub norm_scale: Option<f64>,
}

/// Ĥ = (1/n) Σ ∇²_θ l(θ̂, x_i, y_i).
pub fn empirical_hessian(model: &dyn LossModel, theta: &DVector<f64>, d: &Dataset) -> DMatrix<f64> {
    let dim = model.dim_theta();
    let mut h = DMatrix::zeros(dim, dim);
    for i in 0..d.n() {
        h += model.hessian_theta(theta, &d.x(i), d.y(i));
    }
    h /= d.n() as f64;
    crate::linalg::symmetrize(&h)
}

/// Φ together with the per-sample terms c_i = ∇_{x,θ}l·Ê‖x‖_p·φ_i that average to it.
#[derive(Clone, Debug)]
pub struct PhiTerms {
    pub phi: DVector<f64>,
    /// Columns are c_i for the samples in `used`.
    pub contributions: DMatrix<f64>,
    pub used: Vec<usize>,
    pub skipped: Vec<usize>,
    pub norm_scale: f64,
}

pub fn compute_phi(
    model: &dyn LossModel,
    theta: &DVector<f64>,
    d: &Dataset,
    p: NormOrder,
) -> Result<DVector<f64>> {
    Ok(phi_terms(model, theta, d, p, &AifOptions::default())?.phi)
}

pub fn phi_terms(
    model: &dyn LossModel,
    theta: &DVector<f64>,
    d: &Dataset,
    p: NormOrder,
    opts: &AifOptions,
) -> Result<PhiTerms> {
    check_dims(model, d)?;
    let norm_scale = match opts.norm_scale {
        Some(s) => s,
        None => mean_norm(d, p)?,
    };
    let mut columns = Vec::with_capacity(d.n());
    let mut used = Vec::with_capacity(d.n());
    let mut skipped = Vec::new();
    for i in 0..d.n() {
        let (x, y) = (d.x(i), d.y(i));
        let gx = model.grad_x(theta, &x, y);
        let phi = match steepest_direction(&gx, p) {
            Ok(phi) => phi,
            Err(AifError::DegenerateGradient { .. }) => match opts.policy {
                DegeneratePolicy::Error => return Err(AifError::DegenerateGradient { sample: Some(i) }),
                DegeneratePolicy::Skip => {
                    log::info!("skipping sample {i}: zero input gradient");
                    skipped.push(i);
                    continue;
                }
            },
            Err(e) => return Err(e),
        };
        columns.push(model.mixed_grad(theta, &x, y) * (phi * norm_scale));
        used.push(i);
    }
    if columns.is_empty() {
        return Err(AifError::EmptySum);
    }
    let contributions = DMatrix::from_columns(&columns);
    let phi = contributions.column_mean();
    Ok(PhiTerms {
        phi,
        contributions,
        used,
        skipped,
        norm_scale,
    })
}

#[derive(Clone, Debug)]
pub struct AifResult {
    pub influence: DVector<f64>,
    pub hessian: DMatrix<f64>,
    pub phi: DVector<f64>,
    /// Row i is ζ_i for the i-th used sample.
    pub per_sample: DMatrix<f64>,
    pub mu_hat: DVector<f64>,
    pub sigma_hat: DMatrix<f64>,
    pub condition_estimate: f64,
    pub skipped: Vec<usize>,
    pub norm_scale: f64,
}

impl AifResult {
    /// Number of samples that entered the average.
    pub fn n(&self) -> usize {
        self.per_sample.nrows()
    }

    pub fn summary(&self) -> AifSummary {
        AifSummary {
            influence: self.influence.iter().copied().collect(),
            mu_hat: self.mu_hat.iter().copied().collect(),
            sigma_diag: self.sigma_hat.diagonal().iter().copied().collect(),
            condition_estimate: self.condition_estimate,
            skipped: self.skipped.clone(),
            n: self.n(),
            norm_scale: self.norm_scale,
        }
    }
}

/// JSON view of an [`AifResult`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AifSummary {
    pub influence: Vec<f64>,
    pub mu_hat: Vec<f64>,
    pub sigma_diag: Vec<f64>,
    pub condition_estimate: f64,
    pub skipped: Vec<usize>,
    pub n: usize,
    pub norm_scale: f64,
}

pub fn compute_aif(
    model: &dyn LossModel,
    theta: &DVector<f64>,
    d: &Dataset,
    p: NormOrder,
) -> Result<AifResult> {
    compute_aif_with(model, theta, d, p, &AifOptions::default())
}

pub fn compute_aif_with(
    model: &dyn LossModel,
    theta: &DVector<f64>,
    d: &Dataset,
    p: NormOrder,
    opts: &AifOptions,
) -> Result<AifResult> {
    let terms = phi_terms(model, theta, d, p, opts)?;
    let hessian = empirical_hessian(model, theta, d);
    let solver = SpdSolver::new(&hessian)?;
    let influence = -solver.solve(&terms.phi)?;
    let zeta = -solver.solve_columns(&terms.contributions)?;
    let mu_hat = zeta.column_mean();
    let n = zeta.ncols() as f64;
    let centered = DMatrix::from_fn(zeta.nrows(), zeta.ncols(), |r, c| zeta[(r, c)] - mu_hat[r]);
    let sigma_hat = crate::linalg::symmetrize(&(&centered * centered.transpose() / n));
    Ok(AifResult {
        influence,
        hessian,
        phi: terms.phi,
        per_sample: zeta.transpose(),
        mu_hat,
        sigma_hat,
        condition_estimate: solver.condition(),
        skipped: terms.skipped,
        norm_scale: terms.norm_scale,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub center: f64,
    pub upper: f64,
}

/// Coordinate-wise intervals μ̂_k ± z·√(Σ̂_kk / n) at the given two-sided level.
pub fn confidence_region(r: &AifResult, level: f64) -> Result<Vec<Interval>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(AifError::Config(format!("level must be in (0, 1), got {level}")));
    }
    let n = r.n();
    let d = r.mu_hat.len();
    if n <= d {
        return Err(AifError::DegenerateCovariance(format!(
            "need more samples ({n}) than parameters ({d})"
        )));
    }
    let all_zero = r.sigma_hat.iter().all(|&v| v == 0.0);
    if !all_zero {
        let eig = r.sigma_hat.symmetric_eigenvalues();
        if !(eig.min() > 1e-12 * eig.max()) {
            return Err(AifError::DegenerateCovariance(format!(
                "covariance eigenvalues span [{:.3e}, {:.3e}]",
                eig.min(),
                eig.max()
            )));
        }
    }
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    Ok((0..d)
        .map(|k| {
            let center = r.mu_hat[k];
            let half = z * (r.sigma_hat[(k, k)].max(0.0) / n as f64).sqrt();
            Interval {
                lower: center - half,
                center,
                upper: center + half,
            }
        })
        .collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DroResult {
    pub influence: Vec<f64>,
    /// Index of the sample carrying the whole budget.
    pub index: usize,
    /// Every sample whose q-norm input gradient ties with the maximum, including `index`.
    pub ties: Vec<usize>,
    /// The sample-size factor n^{(1−u)/u}.
    pub factor: f64,
    pub norm_scale: f64,
}

const TIE_TOLERANCE: f64 = 1e-12;

/// Influence under a u-Wasserstein budget: all mass goes to the sample with the largest
/// q-norm input gradient, lowest index on ties.
pub fn dro_aif(
    model: &dyn LossModel,
    theta: &DVector<f64>,
    d: &Dataset,
    p: NormOrder,
    u: f64,
) -> Result<DroResult> {
    if !(u >= 1.0 && u.is_finite()) {
        return Err(AifError::Config(format!("u must be >= 1, got {u}")));
    }
    check_dims(model, d)?;
    let q = p.conjugate();
    let grads: Vec<DVector<f64>> = (0..d.n()).map(|i| model.grad_x(theta, &d.x(i), d.y(i))).collect();
    let norms: Vec<f64> = grads.iter().map(|g| q.norm(g.as_slice())).collect();
    let mut index = 0;
    for (i, &v) in norms.iter().enumerate().skip(1) {
        if v > norms[index] * (1.0 + TIE_TOLERANCE) {
            index = i;
        }
    }
    let best = norms[index];
    if best == 0.0 {
        return Err(AifError::DegenerateGradient { sample: Some(index) });
    }
    let ties: Vec<usize> = norms
        .iter()
        .enumerate()
        .filter(|(_, &v)| (v - best).abs() <= TIE_TOLERANCE * best)
        .map(|(i, _)| i)
        .collect();
    if ties.len() > 1 {
        log::info!(
            "{} samples tie for the largest input gradient; using {index}",
            ties.len()
        );
    }
    let norm_scale = mean_norm(d, p)?;
    let phi = steepest_direction(&grads[index], p)?;
    let c = model.mixed_grad(theta, &d.x(index), d.y(index)) * (phi * norm_scale);
    let hessian = empirical_hessian(model, theta, d);
    let base = -SpdSolver::new(&hessian)?.solve(&c)?;
    let factor = (d.n() as f64).powf((1.0 - u) / u);
    Ok(DroResult {
        influence: (base * factor).iter().copied().collect(),
        index,
        ties,
        factor,
        norm_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, Coefficients, Family, GeneratorConfig, Role};
    use crate::model::{fit, RegressionModel};

    fn two_point() -> Dataset {
        Dataset::from_rows(&[(vec![1.0], 2.0), (vec![-1.0], -1.0)], Role::Train).unwrap()
    }

    fn theta(x: f64) -> DVector<f64> {
        DVector::from_vec(vec![x])
    }

    #[test]
    fn hessian_examples() {
        let model = RegressionModel::identity(1);
        assert_eq!(empirical_hessian(&model, &theta(1.5), &two_point())[(0, 0)], 1.0);
        let single = Dataset::from_rows(&[(vec![0.0, 0.0], 1.0)], Role::Train).unwrap();
        let h = empirical_hessian(&RegressionModel::identity(2), &DVector::zeros(2), &single);
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hessian_concentrates_for_gaussian_inputs() {
        let mut cfg = GeneratorConfig::new(Family::GaussianLinear, 20_000, 3);
        cfg.sigma_x = 2.0;
        let d = generate(&cfg).unwrap();
        let h = empirical_hessian(&RegressionModel::identity(3), &DVector::zeros(3), &d);
        let tol = 5.0 * 4.0 * (3.0f64 / 20_000.0).sqrt();
        assert!((h - DMatrix::identity(3, 3) * 4.0).amax() < tol);
    }

    #[test]
    fn two_point_phi_and_influence() {
        let model = RegressionModel::identity(1);
        let d = two_point();
        // mixed grads are 2θx − y: 1 and −2. Both input gradients are −0.75, so φ = −1.
        let phi = compute_phi(&model, &theta(1.5), &d, NormOrder::Two).unwrap();
        assert!((phi[0] - 0.5).abs() < 1e-15);
        let r = compute_aif(&model, &theta(1.5), &d, NormOrder::Two).unwrap();
        assert!((r.influence[0] + 0.5).abs() < 1e-15);
        assert!((r.per_sample[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((r.per_sample[(1, 0)] + 2.0).abs() < 1e-15);
        assert!((r.mu_hat[0] + 0.5).abs() < 1e-15);
        assert!((r.sigma_hat[(0, 0)] - 2.25).abs() < 1e-14);
    }

    #[test]
    fn two_point_interval() {
        let model = RegressionModel::identity(1);
        let r = compute_aif(&model, &theta(1.5), &two_point(), NormOrder::Two).unwrap();
        let ci = confidence_region(&r, 0.95).unwrap();
        let half = 1.959963984540054 * (2.25f64 / 2.0).sqrt();
        assert!((ci[0].lower - (-0.5 - half)).abs() < 1e-9);
        assert!((ci[0].upper - (-0.5 + half)).abs() < 1e-9);
        assert!((half - 2.079).abs() < 1e-3);
    }

    #[test]
    fn zero_covariance_gives_zero_width() {
        // Identical samples produce identical ζ_i.
        let d = Dataset::from_rows(
            &[(vec![1.0], 2.0), (vec![1.0], 2.0), (vec![1.0], 2.0)],
            Role::Train,
        )
        .unwrap();
        let model = RegressionModel::identity(1);
        let r = compute_aif(&model, &theta(1.5), &d, NormOrder::Two).unwrap();
        let ci = confidence_region(&r, 0.9).unwrap();
        assert_eq!(ci[0].lower, ci[0].upper);
    }

    #[test]
    fn rank_deficient_covariance_is_rejected() {
        let r = AifResult {
            influence: DVector::zeros(2),
            hessian: DMatrix::identity(2, 2),
            phi: DVector::zeros(2),
            per_sample: DMatrix::zeros(5, 2),
            mu_hat: DVector::zeros(2),
            sigma_hat: DMatrix::from_element(2, 2, 1.0),
            condition_estimate: 1.0,
            skipped: Vec::new(),
            norm_scale: 1.0,
        };
        assert!(matches!(
            confidence_region(&r, 0.95),
            Err(AifError::DegenerateCovariance(_))
        ));
        let short = AifResult {
            per_sample: DMatrix::zeros(2, 2),
            sigma_hat: DMatrix::identity(2, 2),
            ..r
        };
        assert!(matches!(
            confidence_region(&short, 0.95),
            Err(AifError::DegenerateCovariance(_))
        ));
    }

    #[test]
    fn zero_phi_gives_zero_influence() {
        // Residuals vanish at the interpolating fit, so mixed gradients are v θᵀ, and with
        // symmetric inputs the contributions cancel.
        let d = Dataset::from_rows(&[(vec![1.0], 1.0), (vec![-1.0], -1.0)], Role::Train).unwrap();
        let model = RegressionModel::identity(1);
        let opts = AifOptions {
            policy: DegeneratePolicy::Skip,
            norm_scale: None,
        };
        match compute_aif_with(&model, &theta(1.0), &d, NormOrder::Two, &opts) {
            Err(AifError::EmptySum) => {}
            other => panic!("unexpected {:?}", other.map(|r| r.influence)),
        }
        // Residuals −0.5 and 1.5 give contributions −0.5 and 0.5.
        let phi_zero = Dataset::from_rows(&[(vec![1.0], 1.5), (vec![-1.0], -2.5)], Role::Train).unwrap();
        let r = compute_aif(&model, &theta(1.0), &phi_zero, NormOrder::Two).unwrap();
        assert_eq!(r.phi[0], 0.0);
        assert_eq!(r.influence[0], 0.0);
    }

    #[test]
    fn degenerate_policy() {
        let d = Dataset::from_rows(
            &[(vec![1.0], 1.5), (vec![1.0], 2.0), (vec![-1.0], -1.0)],
            Role::Train,
        )
        .unwrap();
        let model = RegressionModel::identity(1);
        assert!(matches!(
            compute_aif(&model, &theta(1.5), &d, NormOrder::Two),
            Err(AifError::DegenerateGradient { sample: Some(0) })
        ));
        let opts = AifOptions {
            policy: DegeneratePolicy::Skip,
            norm_scale: None,
        };
        let r = compute_aif_with(&model, &theta(1.5), &d, NormOrder::Two, &opts).unwrap();
        assert_eq!(r.skipped, vec![0]);
        assert_eq!(r.n(), 2);
    }

    #[test]
    fn influence_is_mean_of_contributions_and_solves_system() {
        let mut cfg = GeneratorConfig::new(Family::GaussianLinear, 400, 3);
        cfg.sigma_xi = 0.3;
        cfg.seed = 9;
        let d = generate(&cfg).unwrap();
        let model = RegressionModel::identity(3);
        let t = fit(&model, &d).unwrap().theta;
        for p in [NormOrder::One, NormOrder::Two, NormOrder::Inf] {
            let r = compute_aif(&model, &t, &d, p).unwrap();
            assert!((r.per_sample.row_mean().transpose() - &r.influence).amax() < 1e-10);
            let residual = (&r.hessian * &r.influence + &r.phi).norm();
            assert!(residual < 1e-10 * (1.0 + r.phi.norm()));
            let eig = r.sigma_hat.symmetric_eigenvalues();
            assert!(eig.min() >= -1e-12);
        }
    }

    #[test]
    fn permutation_invariance() {
        let mut cfg = GeneratorConfig::new(Family::GaussianLinear, 100, 2);
        cfg.sigma_xi = 0.3;
        let d = generate(&cfg).unwrap();
        let model = RegressionModel::identity(2);
        let t = fit(&model, &d).unwrap().theta;
        let a = compute_aif(&model, &t, &d, NormOrder::Two).unwrap().influence;
        let perm: Vec<usize> = (0..100).map(|i| (i * 37) % 100).collect();
        let b = compute_aif(&model, &t, &d.permuted(&perm).unwrap(), NormOrder::Two)
            .unwrap()
            .influence;
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn linear_phi_matches_population_direction() {
        let mut cfg = GeneratorConfig::new(Family::GaussianLinear, 50_000, 2);
        cfg.beta1 = Some(Coefficients::Values(vec![2.0, -3.4]));
        cfg.sigma_xi = 0.1;
        let d = generate(&cfg).unwrap();
        let model = RegressionModel::identity(2);
        let t = fit(&model, &d).unwrap().theta;
        let r = compute_aif(&model, &t, &d, NormOrder::Two).unwrap();
        let residuals: Vec<f64> = (0..d.n()).map(|i| d.y(i) - t.dot(&d.x(i))).collect();
        let mean_abs = residuals.iter().map(|v| v.abs()).sum::<f64>() / d.n() as f64;
        // Each term is sgn(r_i)(x_i‖θ‖ + r_i θ/‖θ‖) with r_i = θᵀx_i − y_i, and sgn(r_i) is
        // nearly independent of x_i, so Φ/Ê‖x‖₂ → (θ/‖θ‖)·E|η|. The sign agrees with the
        // two-point example where Φ = +0.5 for θ = 1.5.
        let predicted = (&t / t.norm()) * mean_abs;
        let got = &r.phi / r.norm_scale;
        assert!((got - predicted).norm() < 0.05 * mean_abs);
    }

    #[test]
    fn dro_two_point_tie() {
        let model = RegressionModel::identity(1);
        let r = dro_aif(&model, &theta(1.5), &two_point(), NormOrder::Two, 1.0).unwrap();
        assert_eq!(r.index, 0);
        assert_eq!(r.ties, vec![0, 1]);
        assert_eq!(r.factor, 1.0);
        assert!((r.influence[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dro_factor_is_exact() {
        let mut cfg = GeneratorConfig::new(Family::GaussianLinear, 50, 2);
        cfg.sigma_xi = 0.5;
        let d = generate(&cfg).unwrap();
        let model = RegressionModel::identity(2);
        let t = fit(&model, &d).unwrap().theta;
        let base = dro_aif(&model, &t, &d, NormOrder::Two, 1.0).unwrap();
        for u in [1.5, 2.0, 4.0] {
            let r = dro_aif(&model, &t, &d, NormOrder::Two, u).unwrap();
            assert_eq!(r.index, base.index);
            let f = 50f64.powf((1.0 - u) / u);
            for (a, b) in r.influence.iter().zip(&base.influence) {
                assert_eq!(*a, b * f);
            }
        }
    }
}
