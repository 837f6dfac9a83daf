//! Ground truth for the influence formulas: PGD robust training, a damped quadratic surrogate
//! loss, and a brute-force oracle for one-dimensional problems.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::aif::empirical_hessian;
use crate::attack::{project_ball, radius, steepest_direction, AttackConfig, NormOrder};
use crate::dataset::{mean_norm, Dataset};
use crate::error::{AifError, Result};
use crate::kernel::{KernelProblem, KernelSpec};
use crate::model::{check_dims, LossModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgdConfig {
    pub inner_steps: usize,
    /// Ascent step as a fraction of the radius r.
    pub inner_step_size: f64,
    /// Random starts in addition to the deterministic start at δ = 0.
    pub restarts: usize,
    pub outer_steps: usize,
    /// Outer gradient step. When absent, 1/(L̂ + damping) with L̂ the largest eigenvalue of the
    /// clean Hessian at the starting point.
    pub outer_step_size: Option<f64>,
    pub tolerance: f64,
    pub damping: f64,
    pub seed: u64,
    pub outer_method: OuterMethod,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OuterMethod {
    /// Fixed steps of size `outer_step_size`.
    GradientDescent,
    /// Quasi-Newton steps seeded with `outer_step_size`.
    Bfgs,
}

impl Default for PgdConfig {
    fn default() -> Self {
        PgdConfig {
            inner_steps: 20,
            inner_step_size: 0.2,
            restarts: 2,
            outer_steps: 5000,
            outer_step_size: None,
            tolerance: 1e-9,
            damping: 0.0,
            seed: 0,
            outer_method: OuterMethod::Bfgs,
        }
    }
}

impl PgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 || self.outer_steps == 0 {
            return Err(AifError::Config("PGD step counts must be >= 1".into()));
        }
        if !(self.inner_step_size > 0.0) {
            return Err(AifError::Config("inner_step_size must be > 0".into()));
        }
        if let Some(s) = self.outer_step_size {
            if !(s > 0.0) {
                return Err(AifError::Config("outer_step_size must be > 0".into()));
            }
        }
        if !(self.tolerance > 0.0) || !(self.damping >= 0.0) {
            return Err(AifError::Config("tolerance must be > 0 and damping >= 0".into()));
        }
        Ok(())
    }
}

fn random_start(rng: &mut ChaCha8Rng, m: usize, r: f64, p: NormOrder) -> DVector<f64> {
    let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = p.norm(z.as_slice());
    if norm == 0.0 {
        return DVector::zeros(m);
    }
    z * (r * rng.random::<f64>() / norm)
}

/// Best perturbation found for one sample by projected steepest ascent from several starts.
#[allow(clippy::too_many_arguments)]
fn maximize_sample(
    model: &dyn LossModel,
    theta: &DVector<f64>,
    x: &DVector<f64>,
    y: f64,
    r: f64,
    p: NormOrder,
    cfg: &PgdConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DVector<f64>> {
    let m = x.len();
    let mut best = DVector::zeros(m);
    if r == 0.0 {
        return Ok(best);
    }
    let mut best_loss = model.loss(theta, x, y);
    for start in 0..=cfg.restarts {
        let mut delta = if start == 0 {
            DVector::zeros(m)
        } else {
            random_start(rng, m, r, p)
        };
        for _ in 0..cfg.inner_steps {
            let point = x + &delta;
            let g = model.grad_x(theta, &point, y);
            let dir = match steepest_direction(&g, p) {
                Ok(dir) => dir,
                Err(AifError::DegenerateGradient { .. }) => break,
                Err(e) => return Err(e),
            };
            delta.axpy(cfg.inner_step_size * r, &dir, 1.0);
            project_ball(&mut delta, r, p)?;
            let l = model.loss(theta, &(x + &delta), y);
            if l > best_loss {
                best_loss = l;
                best.copy_from(&delta);
            }
        }
    }
    Ok(best)
}

/// Per-sample worst-case perturbations Δ (n × m) inside l_p balls of radius r.
pub fn inner_max(
    model: &dyn LossModel,
    theta: &DVector<f64>,
    d: &Dataset,
    r: f64,
    p: NormOrder,
    cfg: &PgdConfig,
) -> Result<DMatrix<f64>> {
    if !(r >= 0.0) {
        return Err(AifError::Config(format!("radius must be >= 0, got {r}")));
    }
    check_dims(model, d)?;
    let mut out = DMatrix::zeros(d.n(), d.m());
    if r == 0.0 {
        return Ok(out);
    }
    for i in 0..d.n() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let delta = maximize_sample(model, theta, &d.x(i), d.y(i), r, p, cfg, &mut rng)?;
        out.set_row(i, &delta.transpose());
    }
    Ok(out)
}

fn perturbed_mean_grad(
    model: &dyn LossModel,
    theta: &DVector<f64>,
    d: &Dataset,
    delta: &DMatrix<f64>,
) -> (DVector<f64>, f64) {
    let mut g = DVector::zeros(model.dim_theta());
    let mut obj = 0.0;
    for i in 0..d.n() {
        let x = d.x(i) + delta.row(i).transpose();
        g += model.grad_theta(theta, &x, d.y(i));
        obj += model.loss(theta, &x, d.y(i));
    }
    let n = d.n() as f64;
    (g / n, obj / n)
}

/// Value of the inner-maximized objective (1/n) Σ max_δ l(θ, x_i + δ, y_i) as found by PGD.
pub fn robust_objective(
    model: &dyn LossModel,
    theta: &DVector<f64>,
    d: &Dataset,
    r: f64,
    p: NormOrder,
    cfg: &PgdConfig,
) -> Result<f64> {
    let delta = inner_max(model, theta, d, r, p, cfg)?;
    Ok(perturbed_mean_grad(model, theta, d, &delta).1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// Envelope gradient norm fell below the tolerance.
    Gradient,
    /// No step along the search direction decreases the objective. This happens at kinks of
    /// the inner-maximized loss, where a sample's maximizer switches and the gradient jumps.
    Stalled,
    MaxSteps,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobustFit {
    pub theta: Vec<f64>,
    pub converged: bool,
    pub stop: StopReason,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub objective: f64,
    pub radius: f64,
}

impl RobustFit {
    pub fn theta_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta)
    }

    fn new(
        theta: &DVector<f64>,
        stop: StopReason,
        gradient_norm: f64,
        iterations: usize,
        objective: f64,
        radius: f64,
    ) -> Self {
        RobustFit {
            theta: theta.iter().copied().collect(),
            converged: stop != StopReason::MaxSteps,
            stop,
            gradient_norm,
            iterations,
            objective,
            radius,
        }
    }
}

const WOLFE_ARMIJO: f64 = 1e-4;
const WOLFE_CURVATURE: f64 = 0.9;
const LINE_SEARCH_TRIALS: usize = 60;

/// Full-batch robust training started from `theta0`, normally the clean optimum. Every
/// objective evaluation recomputes the inner maximizers, and the envelope gradient at them is
/// the outer gradient. The inner random starts depend only on the sample, so the objective is a
/// deterministic function of θ.
pub fn robust_fit(
    model: &dyn LossModel,
    d: &Dataset,
    attack: &AttackConfig,
    cfg: &PgdConfig,
    theta0: &DVector<f64>,
) -> Result<RobustFit> {
    attack.validate()?;
    cfg.validate()?;
    check_dims(model, d)?;
    if theta0.len() != model.dim_theta() {
        return Err(AifError::Dimension(
            "initial parameters have the wrong length".into(),
        ));
    }
    let r = radius(attack, d)?;
    let step = match cfg.outer_step_size {
        Some(s) => s,
        None => {
            let l_hat = crate::linalg::max_eigenvalue(&empirical_hessian(model, theta0, d));
            if !(l_hat + cfg.damping > 0.0) {
                return Err(AifError::Division(
                    "clean Hessian has no positive curvature".into(),
                ));
            }
            1.0 / (l_hat + cfg.damping)
        }
    };
    let eval = |theta: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let delta = inner_max(model, theta, d, r, attack.p, cfg)?;
        let (g, obj) = perturbed_mean_grad(model, theta, d, &delta);
        Ok((obj, g))
    };
    match cfg.outer_method {
        OuterMethod::GradientDescent => descend(eval, theta0, step, cfg, r),
        OuterMethod::Bfgs => bfgs(eval, theta0, step, cfg, r),
    }
}

fn descend<F>(eval: F, theta0: &DVector<f64>, step: f64, cfg: &PgdConfig, r: f64) -> Result<RobustFit>
where
    F: Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let mut theta = theta0.clone();
    let (mut f, mut g) = eval(&theta)?;
    for t in 0..cfg.outer_steps {
        if g.norm() < cfg.tolerance {
            return Ok(RobustFit::new(&theta, StopReason::Gradient, g.norm(), t, f, r));
        }
        theta.axpy(-step, &g, 1.0);
        (f, g) = eval(&theta)?;
    }
    log::warn!(
        "robust fit stopped after {} steps at gradient norm {:.3e}",
        cfg.outer_steps,
        g.norm()
    );
    Ok(RobustFit::new(
        &theta,
        StopReason::MaxSteps,
        g.norm(),
        cfg.outer_steps,
        f,
        r,
    ))
}

/// BFGS with a weak Wolfe bisection line search. The inverse-Hessian estimate starts at
/// step·I, so the first move is the plain gradient step. Unlike fixed-step descent it keeps
/// making progress when the optimum sits on a kink.
fn bfgs<F>(eval: F, theta0: &DVector<f64>, step: f64, cfg: &PgdConfig, r: f64) -> Result<RobustFit>
where
    F: Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let dim = theta0.len();
    let initial = DMatrix::identity(dim, dim) * step;
    let mut hinv = initial.clone();
    let mut theta = theta0.clone();
    let (mut f, mut g) = eval(&theta)?;
    for t in 0..cfg.outer_steps {
        if g.norm() < cfg.tolerance {
            return Ok(RobustFit::new(&theta, StopReason::Gradient, g.norm(), t, f, r));
        }
        let mut dir = -(&hinv * &g);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            hinv.copy_from(&initial);
            dir = &g * -step;
            slope = g.dot(&dir);
        }
        let (mut lo, mut hi, mut alpha) = (0.0, f64::INFINITY, 1.0);
        let mut accepted: Option<(f64, f64, DVector<f64>)> = None;
        let mut best_armijo: Option<(f64, f64, DVector<f64>)> = None;
        for _ in 0..LINE_SEARCH_TRIALS {
            let (fa, ga) = eval(&(&theta + &dir * alpha))?;
            if !(fa <= f + WOLFE_ARMIJO * alpha * slope) {
                hi = alpha;
            } else {
                if best_armijo.as_ref().is_none_or(|b| fa < b.1) {
                    best_armijo = Some((alpha, fa, ga.clone()));
                }
                if ga.dot(&dir) < WOLFE_CURVATURE * slope {
                    lo = alpha;
                } else {
                    accepted = Some((alpha, fa, ga));
                    break;
                }
            }
            alpha = if hi.is_finite() {
                0.5 * (lo + hi)
            } else {
                2.0 * alpha
            };
        }
        let Some((alpha, fa, ga)) = accepted.or(best_armijo).filter(|b| b.1 < f) else {
            return Ok(RobustFit::new(&theta, StopReason::Stalled, g.norm(), t, f, r));
        };
        let s = &dir * alpha;
        let y = &ga - &g;
        let sy = s.dot(&y);
        if sy > 1e-16 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            hinv += (&s * s.transpose()) * (rho * (1.0 + rho * yhy))
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        theta += s;
        f = fa;
        g = ga;
    }
    log::warn!(
        "robust fit stopped after {} steps at gradient norm {:.3e}",
        cfg.outer_steps,
        g.norm()
    );
    Ok(RobustFit::new(
        &theta,
        StopReason::MaxSteps,
        g.norm(),
        cfg.outer_steps,
        f,
        r,
    ))
}

/// Damped second-order expansion of a loss around θ̃:
/// l̃(θ) = l(θ̃) + ∇_θl(θ̃)ᵀw + ½wᵀ(∇²_θl(θ̃) + λI)w with w = θ − θ̃.
#[derive(Clone, Debug)]
pub struct SurrogateModel<M: LossModel> {
    pub base: M,
    pub theta_tilde: DVector<f64>,
    pub damping: f64,
}

pub fn surrogate_model<M: LossModel>(
    base: M,
    theta_tilde: DVector<f64>,
    damping: f64,
) -> Result<SurrogateModel<M>> {
    if !(damping >= 0.0) {
        return Err(AifError::Config(format!("damping must be >= 0, got {damping}")));
    }
    if theta_tilde.len() != base.dim_theta() {
        return Err(AifError::Dimension("expansion point has the wrong length".into()));
    }
    Ok(SurrogateModel {
        base,
        theta_tilde,
        damping,
    })
}

impl<M: LossModel> LossModel for SurrogateModel<M> {
    fn dim_theta(&self) -> usize {
        self.base.dim_theta()
    }

    fn dim_x(&self) -> usize {
        self.base.dim_x()
    }

    fn loss(&self, theta: &DVector<f64>, x: &DVector<f64>, y: f64) -> f64 {
        let t = &self.theta_tilde;
        let w = theta - t;
        let hw = self.base.hessian_vector(t, x, y, &w) + &w * self.damping;
        self.base.loss(t, x, y) + self.base.grad_theta(t, x, y).dot(&w) + 0.5 * w.dot(&hw)
    }

    fn grad_theta(&self, theta: &DVector<f64>, x: &DVector<f64>, y: f64) -> DVector<f64> {
        let t = &self.theta_tilde;
        let w = theta - t;
        self.base.grad_theta(t, x, y) + self.base.hessian_vector(t, x, y, &w) + &w * self.damping
    }

    fn grad_x(&self, theta: &DVector<f64>, x: &DVector<f64>, y: f64) -> DVector<f64> {
        let t = &self.theta_tilde;
        let w = theta - t;
        let quad = self.base.hessian_vector_x_jacobian(t, x, y, &w).tr_mul(&w) * 0.5;
        self.base.grad_x(t, x, y) + self.base.mixed_grad(t, x, y).tr_mul(&w) + quad
    }

    fn hessian_theta(&self, _theta: &DVector<f64>, x: &DVector<f64>, y: f64) -> DMatrix<f64> {
        let d = self.dim_theta();
        self.base.hessian_theta(&self.theta_tilde, x, y) + DMatrix::identity(d, d) * self.damping
    }

    fn mixed_grad(&self, theta: &DVector<f64>, x: &DVector<f64>, y: f64) -> DMatrix<f64> {
        let t = &self.theta_tilde;
        let w = theta - t;
        self.base.mixed_grad(t, x, y) + self.base.hessian_vector_x_jacobian(t, x, y, &w)
    }

    fn hessian_vector_x_jacobian(
        &self,
        _theta: &DVector<f64>,
        x: &DVector<f64>,
        y: f64,
        w: &DVector<f64>,
    ) -> DMatrix<f64> {
        self.base.hessian_vector_x_jacobian(&self.theta_tilde, x, y, w)
    }

    fn hessian_vector(
        &self,
        _theta: &DVector<f64>,
        x: &DVector<f64>,
        y: f64,
        w: &DVector<f64>,
    ) -> DVector<f64> {
        self.base.hessian_vector(&self.theta_tilde, x, y, w) + w * self.damping
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Oracle1d {
    pub theta_min: f64,
    pub theta_eps: f64,
    /// Finite-difference estimate of dθ_ε/dε.
    pub slope: f64,
    /// Samples whose input gradient vanishes at the clean optimum.
    pub degenerate: Vec<usize>,
}

const ORACLE_STEP: f64 = 1e-4;
const GOLDEN_ITERATIONS: usize = 200;

/// (1/n) Σ max(l(θ, x_i − r, y_i), l(θ, x_i + r, y_i)), exact for losses convex in x.
pub fn robust_objective_1d(model: &dyn LossModel, theta: f64, d: &Dataset, r: f64) -> f64 {
    let t = DVector::from_element(1, theta);
    (0..d.n())
        .map(|i| {
            let x = d.x(i)[0];
            let lo = model.loss(&t, &DVector::from_element(1, x - r), d.y(i));
            let hi = model.loss(&t, &DVector::from_element(1, x + r), d.y(i));
            lo.max(hi)
        })
        .sum::<f64>()
        / d.n() as f64
}

fn golden_section<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut e = a + inv_phi * (b - a);
    let (mut fc, mut fe) = (f(c), f(e));
    for _ in 0..GOLDEN_ITERATIONS {
        if (b - a).abs() <= 1e-15 * (1.0 + a.abs().max(b.abs())) {
            break;
        }
        if fc <= fe {
            b = e;
            e = c;
            fe = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = e;
            fc = fe;
            e = a + inv_phi * (b - a);
            fe = f(e);
        }
    }
    if fc <= fe {
        c
    } else {
        e
    }
}

/// Minimizes a convex scalar function: expands a bracket around `center`, then golden-section.
fn minimize_scalar<F: Fn(f64) -> f64>(f: F, center: f64, width: f64) -> Result<f64> {
    let mut c = center;
    let mut w = width;
    for _ in 0..80 {
        let (fl, fc, fr) = (f(c - w), f(c), f(c + w));
        if fc <= fl && fc <= fr {
            let x = golden_section(&f, c - w, c + w);
            if (x - (c - w)).abs() < 1e-12 * w || ((c + w) - x).abs() < 1e-12 * w {
                return Err(AifError::Bracket(format!("minimum at the bracket edge near {x}")));
            }
            return Ok(x);
        }
        c = if fl < fr { c - w } else { c + w };
        w *= 2.0;
    }
    Err(AifError::Bracket(format!("no bracket found around {center}")))
}

/// Brute-force robust optimum of a one-parameter, one-input model.
pub fn oracle_1d(model: &dyn LossModel, d: &Dataset, epsilon: f64, p: NormOrder) -> Result<Oracle1d> {
    if d.m() != 1 || model.dim_theta() != 1 || model.dim_x() != 1 {
        return Err(AifError::Config(
            "the 1-D oracle needs m = 1 and a scalar parameter".into(),
        ));
    }
    if d.n() > 10 {
        return Err(AifError::Config("the 1-D oracle is limited to n <= 10".into()));
    }
    if !(epsilon >= 0.0) {
        return Err(AifError::Config("epsilon must be >= 0".into()));
    }
    let scale = mean_norm(d, p)?;
    let theta_min = minimize_scalar(|t| robust_objective_1d(model, t, d, 0.0), 0.0, 1.0)?;
    let width = 1.0 + theta_min.abs();
    let solve = |eps: f64| {
        minimize_scalar(
            |t| robust_objective_1d(model, t, d, eps * scale),
            theta_min,
            width,
        )
    };
    let theta_eps = if epsilon == 0.0 {
        theta_min
    } else {
        solve(epsilon)?
    };
    let slope = if epsilon >= ORACLE_STEP {
        (solve(epsilon + ORACLE_STEP)? - solve(epsilon - ORACLE_STEP)?) / (2.0 * ORACLE_STEP)
    } else {
        (solve(epsilon + ORACLE_STEP)? - theta_eps) / ORACLE_STEP
    };
    let t = DVector::from_element(1, theta_min);
    let degenerate = (0..d.n())
        .filter(|&i| model.grad_x(&t, &d.x(i), d.y(i))[0].abs() < 1e-9)
        .collect();
    Ok(Oracle1d {
        theta_min,
        theta_eps,
        slope,
        degenerate,
    })
}

/// Joint PGD over all inputs of a kernel problem, each δ_k kept in its own ball.
pub fn kernel_inner_max(
    spec: &KernelSpec,
    d: &Dataset,
    theta: &DVector<f64>,
    r: f64,
    p: NormOrder,
    cfg: &PgdConfig,
) -> Result<DMatrix<f64>> {
    Ok(kernel_ascent(spec, d, theta, r, p, cfg, DMatrix::zeros(d.n(), d.m()))?.0)
}

/// Joint projected ascent from `start`, returning the best iterate and its loss.
fn kernel_ascent(
    spec: &KernelSpec,
    d: &Dataset,
    theta: &DVector<f64>,
    r: f64,
    p: NormOrder,
    cfg: &PgdConfig,
    start: DMatrix<f64>,
) -> Result<(DMatrix<f64>, f64)> {
    if d.inputs().shape() != start.shape() {
        return Err(AifError::Dimension(
            "perturbation shape differs from the inputs".into(),
        ));
    }
    let mut delta = start;
    let mut best = delta.clone();
    let mut best_obj = f64::NEG_INFINITY;
    for step in 0..=cfg.inner_steps {
        let problem = KernelProblem::new(*spec, &(d.inputs() + &delta), d.outputs())?;
        let obj = problem.objective(theta);
        if obj > best_obj {
            best_obj = obj;
            best.copy_from(&delta);
        }
        if r == 0.0 || step == cfg.inner_steps {
            break;
        }
        let grads = problem.input_gradients(theta);
        for k in 0..d.n() {
            let g = grads.row(k).transpose();
            if let Ok(dir) = steepest_direction(&g, p) {
                let mut row = delta.row(k).transpose();
                row.axpy(cfg.inner_step_size * r, &dir, 1.0);
                project_ball(&mut row, r, p)?;
                delta.set_row(k, &row.transpose());
            }
        }
    }
    Ok((best, best_obj))
}

/// Robust kernel ridge regression by damped Newton steps on F(θ) = max_Δ L(θ, X + Δ).
/// For fixed inputs the loss is quadratic in θ, so the exact re-solve at the current worst
/// case is the Newton direction for F with the inner maximizer held fixed; an Armijo search
/// on F keeps the iteration descending. The ascent is warm-started from the previous worst
/// case.
pub fn robust_fit_kernel(
    spec: &KernelSpec,
    d: &Dataset,
    attack: &AttackConfig,
    cfg: &PgdConfig,
    theta0: &DVector<f64>,
) -> Result<RobustFit> {
    attack.validate()?;
    cfg.validate()?;
    if theta0.len() != d.n() {
        return Err(AifError::Dimension("kernel parameters must have length n".into()));
    }
    let r = radius(attack, d)?;
    let mut theta = theta0.clone();
    let (mut delta, mut objective) =
        kernel_ascent(spec, d, &theta, r, attack.p, cfg, DMatrix::zeros(d.n(), d.m()))?;
    let mut gradient_norm = f64::INFINITY;
    for t in 0..cfg.outer_steps {
        let problem = KernelProblem::new(*spec, &(d.inputs() + &delta), d.outputs())?;
        let grad = problem.grad_theta(&theta);
        gradient_norm = grad.norm();
        if gradient_norm < cfg.tolerance * (1.0 + theta.norm()) {
            return Ok(RobustFit::new(
                &theta,
                StopReason::Gradient,
                gradient_norm,
                t,
                objective,
                r,
            ));
        }
        let direction = problem.solve()?.0 - &theta;
        let slope = grad.dot(&direction);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..ARMIJO_TRIALS {
            let candidate = &theta + &direction * alpha;
            let (dc, fc) = kernel_ascent(spec, d, &candidate, r, attack.p, cfg, delta.clone())?;
            if fc <= objective + WOLFE_ARMIJO * alpha * slope {
                accepted = Some((candidate, dc, fc));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((c, dc, fc)) if fc < objective => {
                theta = c;
                delta = dc;
                objective = fc;
            }
            _ => {
                return Ok(RobustFit::new(
                    &theta,
                    StopReason::Stalled,
                    gradient_norm,
                    t,
                    objective,
                    r,
                ))
            }
        }
    }
    Ok(RobustFit::new(
        &theta,
        StopReason::MaxSteps,
        gradient_norm,
        cfg.outer_steps,
        objective,
        r,
    ))
}

const ARMIJO_TRIALS: usize = 30;
