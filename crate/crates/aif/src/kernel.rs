//! Kernel ridge regression with the un-halved objective
//! L(θ) = (1/n) Σ_i (y_i − K_iᵀθ)² + λ‖θ‖², the two-layer ReLU NTK, and the kernel influence.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::aif::{AifOptions, DegeneratePolicy};
use crate::attack::{steepest_direction, NormOrder};
use crate::dataset::{mean_norm, Dataset};
use crate::error::{AifError, Result};
use crate::linalg::SpdSolver;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Linear,
    Rbf,
    Ntk,
}

impl std::str::FromStr for KernelKind {
    type Err = AifError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(KernelKind::Linear),
            "rbf" => Ok(KernelKind::Rbf),
            "ntk" => Ok(KernelKind::Ntk),
            other => Err(AifError::Config(format!("unknown kernel '{other}'"))),
        }
    }
}

fn default_gamma() -> f64 {
    1.0
}

fn default_lambda() -> f64 {
    1e-3
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// RBF bandwidth.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Ridge penalty.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

const NTK_CLAMP: f64 = 1e-12;
const UNIT_TOLERANCE: f64 = 1e-8;

impl KernelSpec {
    pub fn new(kind: KernelKind, lambda: f64) -> Self {
        KernelSpec {
            kind,
            gamma: 1.0,
            lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(AifError::Config(format!(
                "lambda must be > 0, got {}",
                self.lambda
            )));
        }
        if self.kind == KernelKind::Rbf && !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(AifError::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        Ok(())
    }

    /// K(a, b). The NTK uses its degree-one homogeneous extension
    /// s·(π − arccos(s/(‖a‖‖b‖)))/(2π), which equals the unit-sphere formula on unit inputs
    /// and stays defined at perturbed inputs.
    pub fn eval(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        match self.kind {
            KernelKind::Linear => a.dot(b),
            KernelKind::Rbf => (-(a - b).norm_squared() / (2.0 * self.gamma * self.gamma)).exp(),
            KernelKind::Ntk => {
                let s = a.dot(b);
                let (u, _) = ntk_cosine(s, a.norm(), b.norm());
                s * (PI - u.acos()) / (2.0 * PI)
            }
        }
    }

    /// ∂K(a, b)/∂a.
    pub fn grad_first(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        let (ca, cb) = self.slot_coefficients(a.dot(b), a.norm_squared(), b.norm_squared());
        b * ca + a * cb
    }

    /// K(a, b) from s = aᵀb and the squared norms.
    fn entry(&self, s: f64, aa: f64, bb: f64) -> f64 {
        match self.kind {
            KernelKind::Linear => s,
            KernelKind::Rbf => (-(aa + bb - 2.0 * s).max(0.0) / (2.0 * self.gamma * self.gamma)).exp(),
            KernelKind::Ntk => {
                let (u, _) = ntk_cosine(s, aa.sqrt(), bb.sqrt());
                s * (PI - u.acos()) / (2.0 * PI)
            }
        }
    }

    /// (c_b, c_a) with ∂K(a, b)/∂a = c_b·b + c_a·a.
    fn slot_coefficients(&self, s: f64, aa: f64, bb: f64) -> (f64, f64) {
        match self.kind {
            KernelKind::Linear => (1.0, 0.0),
            KernelKind::Rbf => {
                let g2 = self.gamma * self.gamma;
                let k = self.entry(s, aa, bb);
                (k / g2, -k / g2)
            }
            KernelKind::Ntk => {
                let (na, nb) = (aa.sqrt(), bb.sqrt());
                let (u, clamped) = ntk_cosine(s, na, nb);
                let mut cb = (PI - u.acos()) / (2.0 * PI);
                let mut ca = 0.0;
                if !clamped && na > 0.0 && nb > 0.0 {
                    let c = s / (2.0 * PI * (1.0 - u * u).sqrt());
                    cb += c / (na * nb);
                    ca -= c * u / aa;
                }
                (cb, ca)
            }
        }
    }

    /// c with d/da K(a, a) = c·a.
    fn diag_coefficient(&self) -> f64 {
        match self.kind {
            KernelKind::Linear => 2.0,
            KernelKind::Rbf => 0.0,
            KernelKind::Ntk => 1.0,
        }
    }

    /// K(a, a) with its exact value on the diagonal.
    pub fn diag(&self, a: &DVector<f64>) -> f64 {
        match self.kind {
            KernelKind::Linear => a.norm_squared(),
            KernelKind::Rbf => 1.0,
            KernelKind::Ntk => 0.5 * a.norm_squared(),
        }
    }

    /// d/da K(a, a), the sum of both slot derivatives.
    pub fn diag_grad(&self, a: &DVector<f64>) -> DVector<f64> {
        a * self.diag_coefficient()
    }
}

/// Cosine between the arguments clamped to [−1 + 1e−12, 1 − 1e−12], and whether the clamp
/// was active.
fn ntk_cosine(s: f64, na: f64, nb: f64) -> (f64, bool) {
    if na == 0.0 || nb == 0.0 {
        return (0.0, true);
    }
    let raw = s / (na * nb);
    let lo = -1.0 + NTK_CLAMP;
    let hi = 1.0 - NTK_CLAMP;
    if raw < lo {
        (lo, true)
    } else if raw > hi {
        (hi, true)
    } else {
        (raw, false)
    }
}

/// One NTK entry for unit inputs with inner product s.
pub fn ntk_entry(s: f64) -> f64 {
    let u = s.clamp(-1.0, 1.0);
    s * (PI - u.acos()) / (2.0 * PI)
}

fn check_unit_rows(x: &DMatrix<f64>) -> Result<()> {
    for i in 0..x.nrows() {
        let norm = x.row(i).norm();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(AifError::Normalization { row: i, norm });
        }
    }
    Ok(())
}

/// NTK matrix of unit-normalized rows.
pub fn ntk_matrix(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_unit_rows(x)?;
    let n = x.nrows();
    let g = x * x.transpose();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.5
        } else {
            ntk_entry(g[(i, j)])
        }
    }))
}

/// Gram matrix with exact diagonal entries.
pub fn gram(spec: &KernelSpec, x: &DMatrix<f64>) -> DMatrix<f64> {
    let inner = x * x.transpose();
    gram_from_inner(spec, &inner)
}

fn gram_from_inner(spec: &KernelSpec, inner: &DMatrix<f64>) -> DMatrix<f64> {
    let n = inner.nrows();
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        let bb = inner[(j, j)];
        for i in 0..n {
            k[(i, j)] = if i == j {
                match spec.kind {
                    KernelKind::Linear => bb,
                    KernelKind::Rbf => 1.0,
                    KernelKind::Ntk => 0.5 * bb,
                }
            } else {
                spec.entry(inner[(i, j)], inner[(i, i)], bb)
            };
        }
    }
    k
}

/// The regression objective at a fixed input matrix, possibly perturbed.
pub struct KernelProblem {
    pub spec: KernelSpec,
    inputs: DMatrix<f64>,
    inner: DMatrix<f64>,
    pub outputs: DVector<f64>,
    pub gram: DMatrix<f64>,
}

impl KernelProblem {
    pub fn new(spec: KernelSpec, inputs: &DMatrix<f64>, outputs: &DVector<f64>) -> Result<Self> {
        spec.validate()?;
        if inputs.nrows() != outputs.len() {
            return Err(AifError::Dimension("inputs and outputs differ in length".into()));
        }
        let inner = inputs * inputs.transpose();
        let gram = gram_from_inner(&spec, &inner);
        Ok(KernelProblem {
            spec,
            inputs: inputs.clone(),
            inner,
            outputs: outputs.clone(),
            gram,
        })
    }

    pub fn n(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn residuals(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.gram * theta - &self.outputs
    }

    pub fn objective(&self, theta: &DVector<f64>) -> f64 {
        self.residuals(theta).norm_squared() / self.n() as f64 + self.spec.lambda * theta.norm_squared()
    }

    /// ∇_θ L = (2/n) K (Kθ − y) + 2λθ.
    pub fn grad_theta(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.gram * self.residuals(theta) * (2.0 / self.n() as f64) + theta * (2.0 * self.spec.lambda)
    }

    /// ∇²_θ L = (2/n) K² + 2λI.
    pub fn hessian(&self) -> DMatrix<f64> {
        let n = self.n();
        &self.gram * &self.gram * (2.0 / n as f64) + DMatrix::identity(n, n) * (2.0 * self.spec.lambda)
    }

    /// Exact minimizer (K² + nλI)⁻¹ K y at the current inputs.
    pub fn solve(&self) -> Result<(DVector<f64>, f64)> {
        let n = self.n();
        let system = &self.gram * &self.gram + DMatrix::identity(n, n) * (n as f64 * self.spec.lambda);
        let solver = SpdSolver::new(&system)?;
        Ok((solver.solve(&(&self.gram * &self.outputs))?, solver.condition()))
    }

    /// Slot-derivative coefficients: ∂K(x_k, x_j)/∂x_k = C_b[k, j]·x_j + C_a[k, j]·x_k, with the
    /// diagonal entry carrying the derivative of K(x_k, x_k) through both slots.
    fn coefficients(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.n();
        let mut cb = DMatrix::zeros(n, n);
        let mut ca = DMatrix::zeros(n, n);
        for j in 0..n {
            for k in 0..n {
                if k == j {
                    ca[(k, k)] = self.spec.diag_coefficient();
                } else {
                    let (b, a) = self.spec.slot_coefficients(
                        self.inner[(k, j)],
                        self.inner[(k, k)],
                        self.inner[(j, j)],
                    );
                    cb[(k, j)] = b;
                    ca[(k, j)] = a;
                }
            }
        }
        (cb, ca)
    }

    /// Row k is ∇_{x_k} L, including the diagonal entry's two-slot derivative.
    pub fn input_gradients(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n();
        let r = self.residuals(theta);
        let (cb, ca) = self.coefficients();
        // Weight of ∂K(x_k, x_j)/∂x_k in ∂L/∂x_k: K_kj and K_jk both depend on x_k.
        let w = DMatrix::from_fn(n, n, |k, j| {
            if j == k {
                r[k] * theta[k]
            } else {
                r[k] * theta[j] + r[j] * theta[k]
            }
        });
        let wb = w.component_mul(&cb);
        let wa = w.component_mul(&ca).column_sum();
        let mut out = wb * &self.inputs;
        for z in 0..out.ncols() {
            for k in 0..n {
                out[(k, z)] += wa[k] * self.inputs[(k, z)];
            }
        }
        out * (2.0 / n as f64)
    }

    /// Σ_k (∂/∂x_k ∇_θ L)·β_k for directions β_k given as rows.
    pub fn mixed_apply(&self, theta: &DVector<f64>, betas: &DMatrix<f64>) -> DVector<f64> {
        let n = self.n();
        let r = self.residuals(theta);
        let (cb, ca) = self.coefficients();
        // proj[(j, k)] = x_jᵀβ_k, so a_kj = ∂K(x_k, x_j)/∂x_k · β_k = C_b·x_jᵀβ_k + C_a·x_kᵀβ_k.
        let proj = &self.inputs * betas.transpose();
        let mut out = DVector::zeros(n);
        let mut off_diag: DVector<f64> = DVector::zeros(n);
        for k in 0..n {
            if betas.row(k).iter().all(|&b| b == 0.0) {
                continue;
            }
            let a = DVector::from_fn(n, |j, _| cb[(k, j)] * proj[(j, k)] + ca[(k, j)] * proj[(k, k)]);
            out.axpy(theta.dot(&a), &self.gram.column(k), 1.0);
            out.axpy(r[k], &a, 1.0);
            let mut cross = 0.0;
            for i in 0..n {
                if i != k {
                    off_diag[i] += theta[k] * a[i];
                    cross += r[i] * a[i];
                }
            }
            out[k] += cross;
        }
        out += &self.gram * off_diag;
        out * (2.0 / n as f64)
    }
}

#[derive(Clone, Debug)]
pub struct KernelFit {
    pub theta: DVector<f64>,
    pub condition: f64,
    pub stationarity: f64,
}

fn problem_for(spec: &KernelSpec, d: &Dataset) -> Result<KernelProblem> {
    if spec.kind == KernelKind::Ntk {
        check_unit_rows(d.inputs())?;
    }
    KernelProblem::new(*spec, d.inputs(), d.outputs())
}

pub fn fit_kernel_ridge(spec: &KernelSpec, d: &Dataset) -> Result<KernelFit> {
    let problem = problem_for(spec, d)?;
    let (theta, condition) = problem.solve()?;
    let stationarity = problem.grad_theta(&theta).norm();
    if stationarity >= 1e-8 {
        log::warn!("kernel ridge stationarity residual {stationarity:.3e}");
    }
    Ok(KernelFit {
        theta,
        condition,
        stationarity,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelAifResult {
    pub influence: Vec<f64>,
    pub skipped: Vec<usize>,
    pub norm_scale: f64,
    pub condition_estimate: f64,
}

impl KernelAifResult {
    pub fn influence_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.influence)
    }
}

/// Î(K) = −(∇²_θ L)⁻¹ Σ_k (∂/∂x_k ∇_θ L)·β_k with β_k = Ê‖x‖_p·φ(∇_{x_k} L).
pub fn kernel_aif(
    spec: &KernelSpec,
    theta: &DVector<f64>,
    d: &Dataset,
    p: NormOrder,
    opts: &AifOptions,
) -> Result<KernelAifResult> {
    let problem = problem_for(spec, d)?;
    if theta.len() != d.n() {
        return Err(AifError::Dimension("kernel parameters must have length n".into()));
    }
    let norm_scale = match opts.norm_scale {
        Some(s) => s,
        None => mean_norm(d, p)?,
    };
    let grads = problem.input_gradients(theta);
    let mut betas = DMatrix::zeros(d.n(), d.m());
    let mut skipped = Vec::new();
    for k in 0..d.n() {
        match steepest_direction(&grads.row(k).transpose(), p) {
            Ok(phi) => betas.set_row(k, &(phi * norm_scale).transpose()),
            Err(AifError::DegenerateGradient { .. }) => match opts.policy {
                DegeneratePolicy::Error => return Err(AifError::DegenerateGradient { sample: Some(k) }),
                DegeneratePolicy::Skip => skipped.push(k),
            },
            Err(e) => return Err(e),
        }
    }
    if skipped.len() == d.n() {
        return Err(AifError::EmptySum);
    }
    let phi = problem.mixed_apply(theta, &betas);
    let solver = SpdSolver::new(&problem.hessian())?;
    let influence = -solver.solve(&phi)?;
    Ok(KernelAifResult {
        influence: influence.iter().copied().collect(),
        skipped,
        norm_scale,
        condition_estimate: solver.condition(),
    })
}

/// Worst relative error of the analytic kernel derivatives against central differences.
pub fn kernel_finite_difference_check(spec: &KernelSpec, a: &DVector<f64>, b: &DVector<f64>, h: f64) -> f64 {
    let rel = |x: f64, y: f64| (x - y).abs() / 1f64.max(x.abs()).max(y.abs());
    let g = spec.grad_first(a, b);
    let dg = spec.diag_grad(a);
    let mut worst: f64 = 0.0;
    for k in 0..a.len() {
        let mut ap = a.clone();
        ap[k] += h;
        let mut am = a.clone();
        am[k] -= h;
        let fd = (spec.eval(&ap, b) - spec.eval(&am, b)) / (2.0 * h);
        worst = worst.max(rel(g[k], fd));
        let fd = (spec.diag(&ap) - spec.diag(&am)) / (2.0 * h);
        worst = worst.max(rel(dg[k], fd));
    }
    worst
}
