use std::path::PathBuf;
use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{ExperimentName, ExperimentSpec, Row};
use crate::aif::{compute_aif, compute_aif_with, dro_aif, empirical_hessian, AifOptions, DegeneratePolicy};
use crate::attack::AttackConfig;
use crate::dataset::{
    generate, load_mnist_idx, mean_norm, Coefficients, Dataset, GeneratorConfig, MnistSplit,
};
use crate::error::{AifError, Result};
use crate::kernel::{fit_kernel_ridge, kernel_aif};
use crate::model::{fit, BasisKind, BasisSpec, RegressionModel};
use crate::robustopt::{robust_fit, robust_fit_kernel, PgdConfig};
use crate::sensitivity::{
    empirical_sensitivity, general_upper_bound, random_effect_closed_form, sensitivity_from_aif,
    smoothing_ratio,
};

pub const MNIST_ENV: &str = "AIF_MNIST_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    I,
    II,
    Neither,
}

/// Which inequality of the linear-vs-quadratic comparison holds for
/// y = xᵀβ₁ + (β₂ᵀx)² + ξ with x ~ N(0, σ_x²I_m) and ‖β₂‖² = `beta2_sq`.
pub fn capacity_regime(sigma_x: f64, sigma_xi: f64, m: usize, beta2_sq: f64) -> Regime {
    let sx2 = sigma_x * sigma_x;
    let c = (2.0 / std::f64::consts::PI).sqrt() * sigma_xi;
    let mf = m as f64;
    let lhs1 = (beta2_sq * sx2 - c).powi(2);
    let rhs1 = (1.0 + 2.0 * mf * sx2) / sx2.max(1.0) * c * c;
    if lhs1 > rhs1 {
        return Regime::I;
    }
    let lhs2 = (beta2_sq * sx2 + c).powi(2);
    let rhs2 = (1.0 + mf * sx2 - 2.0 * sx2 * mf.ln()) / (0.75 * sx2).min(1.0) * 3.0
        / (2.0 * std::f64::consts::PI)
        * sigma_xi
        * sigma_xi;
    if lhs2 < rhs2 {
        Regime::II
    } else {
        Regime::Neither
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation, ties given their average rank.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[derive(Clone, Debug)]
enum DataSource {
    Generated,
    Mnist(PathBuf),
}

impl DataSource {
    fn label(&self) -> String {
        match self {
            DataSource::Generated => "generated".into(),
            DataSource::Mnist(dir) => format!("mnist ({})", dir.display()),
        }
    }
}

fn mnist_source(split: MnistSplit) -> Option<PathBuf> {
    let dir = PathBuf::from(std::env::var_os(MNIST_ENV)?);
    let (images, labels) = split.paths(&dir);
    (images.is_file() && labels.is_file()).then_some(dir)
}

struct Cell {
    param: String,
    value: f64,
    epsilon: f64,
    seed: u64,
}

fn grid_cells(spec: &ExperimentSpec, params: Vec<(String, f64)>) -> Vec<Cell> {
    let mut cells = Vec::new();
    for (param, value) in params {
        for &epsilon in &spec.eps_grid {
            for &seed in &spec.seeds {
                cells.push(Cell {
                    param: param.clone(),
                    value,
                    epsilon,
                    seed,
                });
            }
        }
    }
    cells
}

fn labelled(spec: &ExperimentSpec, prefix: &str) -> Vec<(String, f64)> {
    spec.grid.iter().map(|&v| (format!("{prefix}={v}"), v)).collect()
}

fn require_grid(spec: &ExperimentSpec) -> Result<()> {
    if spec.grid.is_empty() {
        return Err(AifError::Config(format!("{} needs a non-empty grid", spec.name)));
    }
    Ok(())
}

fn grid_count(v: f64, what: &str) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(AifError::Config(format!(
            "{what} must be a positive integer, got {v}"
        )))
    }
}

pub(crate) fn run_cells(spec: &ExperimentSpec) -> Result<(Vec<Row>, String)> {
    let mut source = DataSource::Generated;
    let cells = match spec.name {
        ExperimentName::Fig1Effectiveness => grid_cells(spec, vec![(String::new(), f64::NAN)]),
        ExperimentName::NtkEffectiveness => {
            let label = match mnist_source(spec.mnist_split) {
                Some(dir) => {
                    source = DataSource::Mnist(dir);
                    "mnist".to_string()
                }
                None => {
                    log::info!("{MNIST_ENV} files not found; using the synthetic unit-sphere fallback");
                    "synthetic-unit-sphere".to_string()
                }
            };
            grid_cells(spec, vec![(label, f64::NAN)])
        }
        ExperimentName::CapacityRegimes => {
            require_grid(spec)?;
            let g = &spec.generator;
            let mut params = Vec::new();
            for &b in &spec.grid {
                if !(b >= 0.0) {
                    return Err(AifError::Config(format!(
                        "beta2 squared norm must be >= 0, got {b}"
                    )));
                }
                let regime = capacity_regime(g.sigma_x, g.sigma_xi, g.m, b);
                for model in ["linear", "quadratic"] {
                    params.push((format!("beta2_sq={b}/regime-{regime:?}/{model}"), b));
                }
            }
            grid_cells(spec, params)
        }
        ExperimentName::FeatureCount | ExperimentName::RandomEffectCurve => {
            require_grid(spec)?;
            for &v in &spec.grid {
                grid_count(v, "feature count")?;
            }
            grid_cells(spec, labelled(spec, "m"))
        }
        ExperimentName::SmoothingSweep => {
            require_grid(spec)?;
            if spec.grid.iter().any(|&s| s < 0.0) {
                return Err(AifError::Config("sigma_r values must be >= 0".into()));
            }
            grid_cells(spec, labelled(spec, "sigma_r"))
        }
        ExperimentName::DroScaling => {
            require_grid(spec)?;
            for &v in &spec.grid {
                grid_count(v, "duplication factor")?;
            }
            grid_cells(spec, labelled(spec, "k"))
        }
    };

    let rows: Vec<Row> = cells
        .par_iter()
        .map(|cell| {
            let start = Instant::now();
            let mut row = Row::new(spec.name, cell.param.clone(), cell.epsilon, cell.seed);
            if let Err(e) = run_cell(spec, cell, &source, &mut row) {
                let kind = if e.exit_code() == 2 { "config" } else { "numerical" };
                row.status = format!("{kind}: {e}");
                log::warn!(
                    "{} {} eps={} seed={}: {e}",
                    spec.name,
                    cell.param,
                    cell.epsilon,
                    cell.seed
                );
            }
            row.runtime_ms = start.elapsed().as_secs_f64() * 1e3;
            row
        })
        .collect();
    Ok((rows, source.label()))
}

fn seeded(spec: &ExperimentSpec, seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        seed,
        ..spec.generator.clone()
    }
}

fn splits(spec: &ExperimentSpec, g: &GeneratorConfig) -> Result<(Dataset, Dataset)> {
    Ok((generate(g)?, generate(&g.eval_split(spec.eval_rows()))?))
}

fn attack_at(spec: &ExperimentSpec, epsilon: f64) -> AttackConfig {
    AttackConfig {
        epsilon,
        ..spec.attack.clone()
    }
}

fn pgd_for(spec: &ExperimentSpec, seed: u64) -> PgdConfig {
    PgdConfig {
        seed: spec.pgd.seed ^ seed,
        ..spec.pgd.clone()
    }
}

fn run_cell(spec: &ExperimentSpec, cell: &Cell, source: &DataSource, row: &mut Row) -> Result<()> {
    match spec.name {
        ExperimentName::Fig1Effectiveness => fig1(spec, cell, row),
        ExperimentName::CapacityRegimes => capacity(spec, cell, row),
        ExperimentName::FeatureCount => feature_count(spec, cell, row),
        ExperimentName::RandomEffectCurve => random_effect(spec, cell, row),
        ExperimentName::SmoothingSweep => smoothing(spec, cell, row),
        ExperimentName::NtkEffectiveness => ntk(spec, cell, source, row),
        ExperimentName::DroScaling => dro(spec, cell, row),
    }
}

/// PGD robust fit against the closed-form influence.
fn fig1(spec: &ExperimentSpec, cell: &Cell, row: &mut Row) -> Result<()> {
    let g = seeded(spec, cell.seed);
    let (train, eval) = splits(spec, &g)?;
    let model = RegressionModel::new(BasisSpec::new(spec.model.basis, g.m));
    let clean = fit(&model, &train)?;
    let aif = compute_aif(&model, &clean.theta, &train, spec.attack.p)?;
    let eps = cell.epsilon;
    let robust = robust_fit(
        &model,
        &train,
        &attack_at(spec, eps),
        &pgd_for(spec, cell.seed),
        &clean.theta,
    )?;
    let theta_eps = robust.theta_vector();
    let slope = (&theta_eps - &clean.theta) / eps;
    let s_emp = empirical_sensitivity(&model, &clean.theta, &theta_eps, eps, &eval)?.value;
    let h_eval = empirical_hessian(&model, &clean.theta, &eval);
    let s_aif = sensitivity_from_aif(&aif, &h_eval, eps)?.value;
    row.delta_i = (&slope - &aif.influence).norm();
    row.delta_s = (s_emp - s_aif).abs() / (eps * eps);
    row.s_aif = s_aif;
    row.s_emp = s_emp;
    row.value = slope.norm();
    row.reference = aif.influence.norm();
    if !robust.converged {
        row.status = format!("unconverged: gradient norm {:e}", robust.gradient_norm);
    }
    Ok(())
}

fn aif_sensitivity(
    model: &RegressionModel,
    train: &Dataset,
    eval: &Dataset,
    spec: &ExperimentSpec,
    epsilon: f64,
    opts: &AifOptions,
) -> Result<(DVector<f64>, f64)> {
    let clean = fit(model, train)?;
    let aif = compute_aif_with(model, &clean.theta, train, spec.attack.p, opts)?;
    let h_eval = empirical_hessian(model, &clean.theta, eval);
    let s = sensitivity_from_aif(&aif, &h_eval, epsilon)?.value;
    Ok((clean.theta, s))
}

/// Linear against full-quadratic fit on data with a quadratic component of size ‖β₂‖².
fn capacity(spec: &ExperimentSpec, cell: &Cell, row: &mut Row) -> Result<()> {
    let mut g = seeded(spec, cell.seed);
    let b = (cell.value / g.m as f64).sqrt();
    g.beta2 = Some(Coefficients::Values(vec![b; g.m]));
    let (train, eval) = splits(spec, &g)?;
    let kind = if cell.param.ends_with("/linear") {
        BasisKind::Identity
    } else {
        BasisKind::FullQuadratic
    };
    let model = RegressionModel::new(BasisSpec::new(kind, g.m));
    let (_, s) = aif_sensitivity(&model, &train, &eval, spec, cell.epsilon, &AifOptions::default())?;
    row.s_aif = s;
    row.value = cell.value;
    Ok(())
}

/// Basis-model sensitivity against the general upper bound as m grows.
fn feature_count(spec: &ExperimentSpec, cell: &Cell, row: &mut Row) -> Result<()> {
    let mut g = seeded(spec, cell.seed);
    g.m = cell.value as usize;
    let (train, eval) = splits(spec, &g)?;
    let model = RegressionModel::new(BasisSpec::new(spec.model.basis, g.m));
    let (theta, s) = aif_sensitivity(&model, &train, &eval, spec, cell.epsilon, &AifOptions::default())?;
    let bound = general_upper_bound(&model, &train, &theta, cell.epsilon)?;
    row.s_aif = s;
    row.value = bound.estimate.halved();
    row.reference = bound.lambda_min;
    Ok(())
}

/// Linear sensitivity with m of M random-effect features observed, against the closed form.
fn random_effect(spec: &ExperimentSpec, cell: &Cell, row: &mut Row) -> Result<()> {
    let mut g = seeded(spec, cell.seed);
    g.m = cell.value as usize;
    let total = g
        .total_features
        .ok_or_else(|| AifError::Config("random-effect-curve needs M".into()))?;
    let (train, eval) = splits(spec, &g)?;
    let model = RegressionModel::identity(g.m);
    let (_, s) = aif_sensitivity(&model, &train, &eval, spec, cell.epsilon, &AifOptions::default())?;
    row.s_aif = s;
    row.reference = random_effect_closed_form(g.m, total, g.sigma_x, g.sigma_xi, cell.epsilon)?.halved();
    Ok(())
}

const NOISE_TAG_TRAIN: u64 = 3;
const NOISE_TAG_EVAL: u64 = 4;

/// Adds N(0, σ_r²I) to every input row, one random stream per row.
pub(crate) fn add_input_noise(d: &Dataset, sigma_r: f64, seed: u64, tag: u64) -> Result<Dataset> {
    if sigma_r == 0.0 {
        return Ok(d.clone());
    }
    let mut x = d.inputs().clone();
    for i in 0..d.n() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((tag << 48) | i as u64);
        for j in 0..d.m() {
            let z: f64 = StandardNormal.sample(&mut rng);
            x[(i, j)] += sigma_r * z;
        }
    }
    d.with_inputs(x)
}

/// Sensitivity of a linear fit on smoothed inputs relative to the plain fit. The attack
/// budget stays tied to the clean inputs in both fits.
fn smoothing(spec: &ExperimentSpec, cell: &Cell, row: &mut Row) -> Result<()> {
    let g = seeded(spec, cell.seed);
    let beta_norm = match &g.beta1 {
        Some(Coefficients::Values(v)) => v.iter().map(|b| b * b).sum::<f64>().sqrt(),
        _ => {
            return Err(AifError::Config(
                "smoothing-sweep needs explicit beta1 values".into(),
            ))
        }
    };
    let (train, eval) = splits(spec, &g)?;
    let model = RegressionModel::identity(g.m);
    let opts = AifOptions {
        policy: DegeneratePolicy::Error,
        norm_scale: Some(mean_norm(&train, spec.attack.p)?),
    };
    let (_, clean) = aif_sensitivity(&model, &train, &eval, spec, cell.epsilon, &opts)?;
    let sigma_r = cell.value;
    let noisy_train = add_input_noise(&train, sigma_r, cell.seed, NOISE_TAG_TRAIN)?;
    let noisy_eval = add_input_noise(&eval, sigma_r, cell.seed, NOISE_TAG_EVAL)?;
    let (_, noisy) = aif_sensitivity(&model, &noisy_train, &noisy_eval, spec, cell.epsilon, &opts)?;
    row.s_aif = noisy;
    row.s_emp = clean;
    row.value = noisy / clean;
    row.reference = smoothing_ratio(g.sigma_x, sigma_r, g.sigma_xi, beta_norm)?;
    Ok(())
}

fn ntk_data(spec: &ExperimentSpec, seed: u64, source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Mnist(dir) => {
            let (images, labels) = spec.mnist_split.paths(dir);
            load_mnist_idx(&images, &labels, spec.generator.n, seed)?.normalize_rows()
        }
        DataSource::Generated => generate(&seeded(spec, seed))?.normalize_rows(),
    }
}

/// Robust kernel ridge regression against the kernel influence.
fn ntk(spec: &ExperimentSpec, cell: &Cell, source: &DataSource, row: &mut Row) -> Result<()> {
    let d = ntk_data(spec, cell.seed, source)?;
    let kernel = spec.model.kernel;
    let clean = fit_kernel_ridge(&kernel, &d)?;
    let opts = AifOptions {
        policy: DegeneratePolicy::Skip,
        norm_scale: None,
    };
    let aif = kernel_aif(&kernel, &clean.theta, &d, spec.attack.p, &opts)?;
    let robust = robust_fit_kernel(
        &kernel,
        &d,
        &attack_at(spec, cell.epsilon),
        &pgd_for(spec, cell.seed),
        &clean.theta,
    )?;
    let slope = (robust.theta_vector() - &clean.theta) / cell.epsilon;
    let influence = aif.influence_vector();
    row.delta_i = (&slope - &influence).norm();
    row.value = slope.norm();
    row.reference = influence.norm();
    if !robust.converged {
        row.status = format!("unconverged: gradient norm {:e}", robust.gradient_norm);
    }
    Ok(())
}

/// Norm of the distributional influence after duplicating every sample k times.
fn dro(spec: &ExperimentSpec, cell: &Cell, row: &mut Row) -> Result<()> {
    let g = seeded(spec, cell.seed);
    let base = generate(&g)?;
    let model = RegressionModel::new(BasisSpec::new(spec.model.basis, g.m));
    let theta = fit(&model, &base)?.theta;
    let k = cell.value as usize;
    let u = spec.attack.u;
    let single = dro_aif(&model, &theta, &base, spec.attack.p, u)?;
    let repeated = dro_aif(&model, &theta, &base.repeat(k)?, spec.attack.p, u)?;
    let norm = |v: &[f64]| DVector::from_column_slice(v).norm();
    row.s_aif = norm(&repeated.influence);
    row.value = row.s_aif / norm(&single.influence);
    row.reference = (k as f64).powf((1.0 - u) / u);
    row.delta_i = (row.value - row.reference).abs();
    if repeated.index != single.index {
        row.status = format!(
            "selected sample moved from {} to {}",
            single.index, repeated.index
        );
    }
    Ok(())
}
