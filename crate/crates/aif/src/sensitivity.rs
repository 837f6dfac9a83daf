//! Model sensitivity: the increase in clean loss caused by robust training, estimated from the
//! influence vector, from an actual robust fit, or from analytic formulas for linear models.
//!
//! Two scales coexist. The quadratic-form estimates carry the ½ of a second-order Taylor
//! expansion, ½ε²ÎᵀHÎ, while the analytic formulas are stated for ε²ÎᵀHÎ. Every estimate
//! records its [`Scale`] and [`SensitivityEstimate::unhalved`] puts any of them on the
//! formula scale.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::aif::{empirical_hessian, AifResult};
use crate::attack::NormOrder;
use crate::dataset::{mean_norm, Dataset};
use crate::error::{AifError, Result};
use crate::model::{check_dims, mean_loss, LossModel, RegressionModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    AifPlugin,
    EmpiricalPgd,
    ClosedFormLinear,
    ClosedFormRandomEffect,
    UpperBoundGeneral,
    SmoothingRatio,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    /// ½·ε²·ÎᵀHÎ or ½·ΔθᵀHΔθ.
    Halved,
    /// ε²·ÎᵀHÎ.
    Unhalved,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEstimate {
    pub value: f64,
    pub epsilon: f64,
    pub method: Method,
    pub scale: Scale,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_hessian: Option<Vec<Vec<f64>>>,
    /// Direct mean loss difference on the evaluation split, for robust-fit estimates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_difference: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl SensitivityEstimate {
    fn new(value: f64, epsilon: f64, method: Method, scale: Scale) -> Self {
        SensitivityEstimate {
            value,
            epsilon,
            method,
            scale,
            eval_hessian: None,
            loss_difference: None,
            warnings: Vec::new(),
        }
    }

    /// Value on the ε²·ÎᵀHÎ scale of the analytic formulas.
    pub fn unhalved(&self) -> f64 {
        match self.scale {
            Scale::Halved => 2.0 * self.value,
            Scale::Unhalved => self.value,
        }
    }

    /// Value on the ½·ε²·ÎᵀHÎ scale.
    pub fn halved(&self) -> f64 {
        match self.scale {
            Scale::Halved => self.value,
            Scale::Unhalved => 0.5 * self.value,
        }
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| m.row(r).iter().copied().collect())
        .collect()
}

fn check_square(h: &DMatrix<f64>, len: usize) -> Result<()> {
    if h.nrows() != len || h.ncols() != len {
        return Err(AifError::Dimension(format!(
            "evaluation Hessian is {}x{}, influence has length {len}",
            h.nrows(),
            h.ncols()
        )));
    }
    Ok(())
}

/// ½ε²·ÎᵀH_eval·Î.
pub fn sensitivity_from_aif(
    aif: &AifResult,
    eval_hessian: &DMatrix<f64>,
    epsilon: f64,
) -> Result<SensitivityEstimate> {
    sensitivity_from_influence(&aif.influence, eval_hessian, epsilon)
}

pub fn sensitivity_from_influence(
    influence: &DVector<f64>,
    eval_hessian: &DMatrix<f64>,
    epsilon: f64,
) -> Result<SensitivityEstimate> {
    if !(epsilon >= 0.0) {
        return Err(AifError::Config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    check_square(eval_hessian, influence.len())?;
    let quad = influence.dot(&(eval_hessian * influence));
    let mut est = SensitivityEstimate::new(
        0.5 * epsilon * epsilon * quad,
        epsilon,
        Method::AifPlugin,
        Scale::Halved,
    );
    est.eval_hessian = Some(matrix_rows(eval_hessian));
    Ok(est)
}

/// ½Δθᵀ·H_eval·Δθ with Δθ = θ̂_ε − θ̂, plus the direct evaluation loss difference.
/// H_eval is taken at θ̂ on the evaluation split.
pub fn empirical_sensitivity(
    model: &dyn LossModel,
    theta_hat: &DVector<f64>,
    theta_eps: &DVector<f64>,
    epsilon: f64,
    eval: &Dataset,
) -> Result<SensitivityEstimate> {
    check_dims(model, eval)?;
    if theta_hat.len() != theta_eps.len() {
        return Err(AifError::Dimension("parameter vectors differ in length".into()));
    }
    let h = empirical_hessian(model, theta_hat, eval);
    let delta = theta_eps - theta_hat;
    let mut est = SensitivityEstimate::new(
        0.5 * delta.dot(&(&h * &delta)),
        epsilon,
        Method::EmpiricalPgd,
        Scale::Halved,
    );
    est.loss_difference = Some(mean_loss(model, theta_eps, eval) - mean_loss(model, theta_hat, eval));
    est.eval_hessian = Some(matrix_rows(&h));
    Ok(est)
}

/// Mean of per-coordinate sample variances, and a warning if any coordinate deviates from
/// that mean by more than 20%.
pub fn isotropic_variance(d: &Dataset) -> (f64, Option<String>) {
    let n = d.n() as f64;
    let x = d.inputs();
    let vars: Vec<f64> = (0..d.m())
        .map(|j| {
            let col = x.column(j);
            let mean = col.mean();
            let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
            if d.n() > 1 {
                ss / (n - 1.0)
            } else {
                0.0
            }
        })
        .collect();
    let avg = vars.iter().sum::<f64>() / vars.len() as f64;
    let worst = vars.iter().map(|v| ((v - avg) / avg).abs()).fold(0.0, f64::max);
    let warning = (worst > 0.2).then(|| {
        format!(
            "coordinate variances deviate up to {:.0}% from their mean; the isotropic formula may not apply",
            100.0 * worst
        )
    });
    (avg, warning)
}

fn mean_abs_residual(model: &RegressionModel, theta: &DVector<f64>, d: &Dataset) -> f64 {
    (0..d.n())
        .map(|i| model.residual(theta, &d.x(i), d.y(i)).abs())
        .sum::<f64>()
        / d.n() as f64
}

/// ε²(Ê‖x‖₂)²(Ê|η|)²/σ̂_x² for a linear model under an l2 attack. Ê‖x‖₂ and the residuals
/// come from the training split, σ̂_x² from the evaluation split.
pub fn linear_closed_form(
    train: &Dataset,
    eval: &Dataset,
    theta_hat: &DVector<f64>,
    epsilon: f64,
) -> Result<SensitivityEstimate> {
    if theta_hat.len() != train.m() || eval.m() != train.m() {
        return Err(AifError::Dimension(
            "linear closed form needs an identity-basis parameter vector".into(),
        ));
    }
    let model = RegressionModel::identity(train.m());
    let scale = mean_norm(train, NormOrder::Two)?;
    let eta = mean_abs_residual(&model, theta_hat, train);
    let (sigma2, warning) = isotropic_variance(eval);
    if !(sigma2 > 0.0) {
        return Err(AifError::Division("evaluation inputs have zero variance".into()));
    }
    let mut est = SensitivityEstimate::new(
        epsilon * epsilon * scale * scale * eta * eta / sigma2,
        epsilon,
        Method::ClosedFormLinear,
        Scale::Unhalved,
    );
    est.warnings.extend(warning);
    if eta == 0.0 {
        est.warnings.push("all residuals are zero".into());
    }
    Ok(est)
}

/// (4ε²/(πσ_x²))·Γ²((m+1)/2)/Γ²(m/2)·((M−m)σ_x² + σ_ξ²) for the random-effect model with
/// m of M features observed.
pub fn random_effect_closed_form(
    m: usize,
    total: usize,
    sigma_x: f64,
    sigma_xi: f64,
    epsilon: f64,
) -> Result<SensitivityEstimate> {
    if m == 0 || m > total {
        return Err(AifError::Config(format!(
            "need 1 <= m <= M, got m = {m}, M = {total}"
        )));
    }
    if !(sigma_x > 0.0) {
        return Err(AifError::Division("sigma_x must be > 0".into()));
    }
    let log_ratio = ln_gamma((m as f64 + 1.0) / 2.0) - ln_gamma(m as f64 / 2.0);
    let ratio = (2.0 * log_ratio).exp();
    let unexplained = (total - m) as f64 * sigma_x * sigma_x + sigma_xi * sigma_xi;
    let value = 4.0 * epsilon * epsilon / (std::f64::consts::PI * sigma_x * sigma_x) * ratio * unexplained;
    Ok(SensitivityEstimate::new(
        value,
        epsilon,
        Method::ClosedFormRandomEffect,
        Scale::Unhalved,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralBound {
    pub estimate: SensitivityEstimate,
    /// Smallest eigenvalue of the sample Gram matrix (1/n)Σ v vᵀ.
    pub lambda_min: f64,
    /// Sample mean of ‖(∂v/∂x)ᵀ(∂v/∂x)‖₂.
    pub mean_jacobian_norm: f64,
    pub mean_abs_residual: f64,
    pub mean_norm: f64,
}

/// ε²(Ê‖x‖₂)²·λ_min(Gram)⁻¹·Ê‖(∂v/∂x)ᵀ(∂v/∂x)‖₂·(Ê|η|)², an upper bound for basis models.
pub fn general_upper_bound(
    model: &RegressionModel,
    d: &Dataset,
    theta_hat: &DVector<f64>,
    epsilon: f64,
) -> Result<GeneralBound> {
    check_dims(model, d)?;
    let dim = model.basis.d;
    let n = d.n() as f64;
    let mut gram = DMatrix::zeros(dim, dim);
    let mut jac_norm = 0.0;
    for i in 0..d.n() {
        let x = d.x(i);
        let v = model.basis.features(&x);
        gram.ger(1.0 / n, &v, &v, 1.0);
        let jac = model.basis.jacobian(&x);
        jac_norm += (jac.transpose() * &jac).symmetric_eigenvalues().max() / n;
    }
    let lambda_min = crate::linalg::min_eigenvalue(&gram);
    if !(lambda_min > 0.0)
        || lambda_min < crate::linalg::max_eigenvalue(&gram) / crate::linalg::CONDITION_LIMIT
    {
        return Err(AifError::RankDeficient {
            condition: crate::linalg::max_eigenvalue(&gram) / lambda_min.max(0.0),
        });
    }
    let eta = mean_abs_residual(model, theta_hat, d);
    let scale = mean_norm(d, NormOrder::Two)?;
    let value = epsilon * epsilon * scale * scale / lambda_min * jac_norm * eta * eta;
    let estimate = SensitivityEstimate::new(value, epsilon, Method::UpperBoundGeneral, Scale::Unhalved);
    Ok(GeneralBound {
        estimate,
        lambda_min,
        mean_jacobian_norm: jac_norm,
        mean_abs_residual: eta,
        mean_norm: scale,
    })
}

/// Ratio of sensitivities with and without Gaussian input smoothing of scale σ_r:
/// (σ_x²/σ_ξ²)/(σ_x²+σ_r²)·(2σ_r²σ_x²/(σ_x²+σ_r²)·‖β‖² + σ_ξ²).
pub fn smoothing_ratio(sigma_x: f64, sigma_r: f64, sigma_xi: f64, beta_norm: f64) -> Result<f64> {
    if !(sigma_xi > 0.0) {
        return Err(AifError::Division("sigma_xi must be > 0".into()));
    }
    if !(sigma_x > 0.0) {
        return Err(AifError::Division("sigma_x must be > 0".into()));
    }
    if !(sigma_r >= 0.0) {
        return Err(AifError::Config("sigma_r must be >= 0".into()));
    }
    let (sx2, sr2, sxi2) = (sigma_x * sigma_x, sigma_r * sigma_r, sigma_xi * sigma_xi);
    let total = sx2 + sr2;
    Ok((sx2 / sxi2) / total * (2.0 * sr2 * sx2 / total * beta_norm * beta_norm + sxi2))
}
