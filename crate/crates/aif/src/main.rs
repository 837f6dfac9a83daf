use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::Serialize;
use serde_json::{json, Value};

use aif::aif::{
    compute_aif_with, confidence_region, dro_aif, empirical_hessian, AifOptions, DegeneratePolicy,
};
use aif::attack::{AttackConfig, NormOrder};
use aif::dataset::{
    generate, load_csv, write_csv, Coefficients, Dataset, Family, GeneratorConfig, MnistSplit,
};
use aif::harness::config::{load_config, resolve, section};
use aif::harness::emit::{emit, Format};
use aif::harness::{run, ExperimentName};
use aif::kernel::{fit_kernel_ridge, kernel_aif, KernelKind, KernelSpec};
use aif::model::{fit, BasisKind, BasisSpec, RegressionModel, ThetaRecord};
use aif::robustopt::{robust_fit, robust_fit_kernel, PgdConfig};
use aif::sensitivity::{empirical_sensitivity, linear_closed_form, sensitivity_from_aif};
use aif::{AifError, Result};

#[derive(Parser)]
#[command(
    name = "aif",
    version,
    about = "Adversarial influence functions for regression models"
)]
struct Cli {
    /// JSON config with sections dataset/model/attack/pgd/experiment. Flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic dataset and write it as CSV.
    Generate(GenerateArgs),
    /// Least-squares fit of a basis model.
    Fit(FitArgs),
    /// Closed-form adversarial influence at the clean optimum.
    Compute(ComputeArgs),
    /// Sensitivity estimates at a budget ε.
    Sensitivity(SensitivityArgs),
    /// PGD robust training and its finite-difference influence.
    Robust(RobustArgs),
    /// Kernel ridge regression and its influence.
    Kernel(KernelArgs),
    /// Influence under a u-Wasserstein distributional budget.
    Dro(DroArgs),
    /// Run a named experiment and write a CSV or JSON table.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Training CSV with header x1..xm,y. Without it the config's dataset section is generated.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    p: Option<NormOrder>,
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    family: Option<Family>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    /// Total feature count for the latent-feature families.
    #[arg(long = "total-features")]
    total_features: Option<usize>,
    #[arg(long)]
    sigma_x: Option<f64>,
    #[arg(long)]
    sigma_xi: Option<f64>,
    /// Comma-separated coefficients or "random".
    #[arg(long)]
    beta1: Option<String>,
    #[arg(long)]
    beta2: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    basis: Option<BasisKind>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ComputeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    attack: AttackArgs,
    #[arg(long)]
    basis: Option<BasisKind>,
    /// Parameters from `aif fit`. Refitted when absent.
    #[arg(long)]
    theta: Option<PathBuf>,
    /// Skip samples with a vanishing input gradient instead of failing.
    #[arg(long)]
    skip_degenerate: bool,
    /// Also report coordinate-wise confidence intervals at this level.
    #[arg(long)]
    ci: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SensitivityArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    attack: AttackArgs,
    #[arg(long)]
    basis: Option<BasisKind>,
    /// Evaluation CSV. Without it an evaluation split of the configured generator is drawn,
    /// or the training data is reused.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PgdArgs {
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    outer_steps: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    pgd_seed: Option<u64>,
}

#[derive(Args)]
struct RobustArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    attack: AttackArgs,
    #[command(flatten)]
    pgd: PgdArgs,
    #[arg(long)]
    basis: Option<BasisKind>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct KernelArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    attack: AttackArgs,
    #[command(flatten)]
    pgd: PgdArgs,
    #[arg(long)]
    kernel: Option<KernelKind>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Normalize input rows to unit length first (required by the NTK).
    #[arg(long)]
    normalize: bool,
    /// Also run robust kernel training at the given --eps.
    #[arg(long)]
    robust: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DroArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    p: Option<NormOrder>,
    #[arg(long)]
    u: Option<f64>,
    #[arg(long)]
    basis: Option<BasisKind>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// fig1-effectiveness, capacity-regimes, feature-count, random-effect-curve,
    /// smoothing-sweep, ntk-effectiveness or dro-scaling. May come from the config instead.
    name: Option<ExperimentName>,
    /// Output table; a .json extension selects JSON, anything else CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Published repetition counts instead of the desk-scale defaults.
    #[arg(long)]
    full: bool,
    #[arg(long)]
    repetitions: Option<usize>,
    /// Comma-separated, strictly decreasing.
    #[arg(long, value_delimiter = ',')]
    eps_grid: Option<Vec<f64>>,
    #[arg(long)]
    n: Option<usize>,
    /// MNIST split for ntk-effectiveness: train or test.
    #[arg(long)]
    mnist_split: Option<MnistSplit>,
}

struct Context {
    doc: Value,
}

impl Context {
    fn section<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        section(&self.doc, key)
    }

    fn attack(&self, args: &AttackArgs) -> Result<AttackConfig> {
        let mut a = self.section::<AttackConfig>("attack")?.unwrap_or_default();
        if let Some(p) = args.p {
            a.p = p;
        }
        if let Some(e) = args.eps {
            a.epsilon = e;
        }
        a.validate()?;
        Ok(a)
    }

    fn generator(&self, seed: Option<u64>) -> Result<Option<GeneratorConfig>> {
        Ok(self.section::<GeneratorConfig>("dataset")?.map(|mut g| {
            if let Some(s) = seed {
                g.seed = s;
            }
            g
        }))
    }

    fn data(&self, args: &DataArgs) -> Result<Dataset> {
        if let Some(path) = &args.data {
            return load_csv(path);
        }
        match self.generator(args.seed)? {
            Some(g) => generate(&g),
            None => Err(AifError::Config(
                "no input: pass --data or a config with a dataset section".into(),
            )),
        }
    }

    fn basis(&self, flag: Option<BasisKind>) -> Result<BasisKind> {
        if let Some(b) = flag {
            return Ok(b);
        }
        Ok(self
            .doc
            .get("model")
            .and_then(|m| m.get("basis"))
            .map(|v| serde_json::from_value(v.clone()))
            .transpose()?
            .unwrap_or(BasisKind::Identity))
    }

    fn kernel(&self, args: &KernelArgs) -> Result<KernelSpec> {
        let mut spec = match self.doc.get("model").and_then(|m| m.get("kernel")) {
            Some(v) => serde_json::from_value(v.clone())?,
            None => KernelSpec::new(KernelKind::Ntk, 1e-3),
        };
        if let Some(k) = args.kernel {
            spec.kind = k;
        }
        if let Some(g) = args.gamma {
            spec.gamma = g;
        }
        if let Some(l) = args.lambda {
            spec.lambda = l;
        }
        spec.validate()?;
        Ok(spec)
    }

    fn pgd(&self, args: &PgdArgs) -> Result<PgdConfig> {
        let mut c = self.section::<PgdConfig>("pgd")?.unwrap_or_default();
        if let Some(v) = args.inner_steps {
            c.inner_steps = v;
        }
        if let Some(v) = args.outer_steps {
            c.outer_steps = v;
        }
        if let Some(v) = args.tolerance {
            c.tolerance = v;
        }
        if let Some(v) = args.pgd_seed {
            c.seed = v;
        }
        c.validate()?;
        Ok(c)
    }
}

fn model_for(basis: BasisKind, d: &Dataset) -> RegressionModel {
    RegressionModel::new(BasisSpec::new(basis, d.m()))
}

fn output<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => std::fs::write(path, text + "\n")?,
        None => print_stdout(&text)?,
    }
    Ok(())
}

/// Writes to stdout, treating a closed pipe as success.
fn print_stdout(text: &str) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn coefficients(s: &str) -> Result<Coefficients> {
    serde_json::from_value(Value::String(s.into())).or_else(|_| {
        s.split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| AifError::Config(format!("bad coefficient '{v}'")))
            })
            .collect::<Result<Vec<f64>>>()
            .map(Coefficients::Values)
    })
}

fn cmd_generate(ctx: &Context, a: &GenerateArgs) -> Result<()> {
    let mut g = match ctx.generator(None)? {
        Some(g) => g,
        None => GeneratorConfig::new(
            a.family.unwrap_or(Family::GaussianLinear),
            a.n.unwrap_or(100),
            a.m.unwrap_or(2),
        ),
    };
    if let Some(f) = a.family {
        g.family = f;
    }
    if let Some(n) = a.n {
        g.n = n;
    }
    if let Some(m) = a.m {
        g.m = m;
    }
    if a.total_features.is_some() {
        g.total_features = a.total_features;
    }
    if let Some(v) = a.sigma_x {
        g.sigma_x = v;
    }
    if let Some(v) = a.sigma_xi {
        g.sigma_xi = v;
    }
    if let Some(b) = &a.beta1 {
        g.beta1 = Some(coefficients(b)?);
    }
    if let Some(b) = &a.beta2 {
        g.beta2 = Some(coefficients(b)?);
    }
    if let Some(s) = a.seed {
        g.seed = s;
    }
    write_csv(&generate(&g)?, &a.out)
}

fn cmd_fit(ctx: &Context, a: &FitArgs) -> Result<()> {
    let d = ctx.data(&a.data)?;
    let model = model_for(ctx.basis(a.basis)?, &d);
    let res = fit(&model, &d)?;
    output(&ThetaRecord::new(&model.basis, &res.theta), a.out.as_deref())
}

fn clean_theta(model: &RegressionModel, d: &Dataset, path: Option<&Path>) -> Result<DVector<f64>> {
    let Some(path) = path else {
        return Ok(fit(model, d)?.theta);
    };
    let record: ThetaRecord = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let (basis, theta) = record.into_parts()?;
    if basis != model.basis {
        return Err(AifError::Config(format!(
            "{} was fitted with a different basis or input dimension",
            path.display()
        )));
    }
    Ok(theta)
}

fn cmd_compute(ctx: &Context, a: &ComputeArgs) -> Result<()> {
    let d = ctx.data(&a.data)?;
    let attack = ctx.attack(&a.attack)?;
    let model = model_for(ctx.basis(a.basis)?, &d);
    let theta = clean_theta(&model, &d, a.theta.as_deref())?;
    let opts = AifOptions {
        policy: if a.skip_degenerate {
            DegeneratePolicy::Skip
        } else {
            DegeneratePolicy::Error
        },
        norm_scale: None,
    };
    let res = compute_aif_with(&model, &theta, &d, attack.p, &opts)?;
    let mut out = serde_json::to_value(res.summary())?;
    if let Some(level) = a.ci {
        out["confidence_intervals"] = serde_json::to_value(confidence_region(&res, level)?)?;
        out["level"] = json!(level);
    }
    output(&out, a.out.as_deref())
}

fn eval_split(ctx: &Context, a: &SensitivityArgs, train: &Dataset) -> Result<Dataset> {
    if let Some(path) = &a.eval {
        return load_csv(path);
    }
    if a.data.data.is_none() {
        if let Some(g) = ctx.generator(a.data.seed)? {
            return generate(&g.eval_split(g.n));
        }
    }
    Ok(train.clone())
}

fn cmd_sensitivity(ctx: &Context, a: &SensitivityArgs) -> Result<()> {
    let d = ctx.data(&a.data)?;
    let eval = eval_split(ctx, a, &d)?;
    let attack = ctx.attack(&a.attack)?;
    let basis = ctx.basis(a.basis)?;
    let model = model_for(basis, &d);
    let theta = fit(&model, &d)?.theta;
    let res = compute_aif_with(&model, &theta, &d, attack.p, &AifOptions::default())?;
    let h_eval = empirical_hessian(&model, &theta, &eval);
    let mut out = json!({ "aif_plugin": sensitivity_from_aif(&res, &h_eval, attack.epsilon)? });
    if basis == BasisKind::Identity && attack.p == NormOrder::Two {
        out["closed_form_linear"] =
            serde_json::to_value(linear_closed_form(&d, &eval, &theta, attack.epsilon)?)?;
    }
    output(&out, a.out.as_deref())
}

fn cmd_robust(ctx: &Context, a: &RobustArgs) -> Result<()> {
    let d = ctx.data(&a.data)?;
    let attack = ctx.attack(&a.attack)?;
    let model = model_for(ctx.basis(a.basis)?, &d);
    let clean = fit(&model, &d)?.theta;
    let robust = robust_fit(&model, &d, &attack, &ctx.pgd(&a.pgd)?, &clean)?;
    let theta_eps = robust.theta_vector();
    let mut out = json!({ "robust": robust, "clean_theta": clean.as_slice() });
    if attack.epsilon > 0.0 {
        let slope = (&theta_eps - &clean) / attack.epsilon;
        out["finite_difference_influence"] = json!(slope.as_slice());
        let emp = empirical_sensitivity(&model, &clean, &theta_eps, attack.epsilon, &d)?;
        out["empirical_sensitivity"] = serde_json::to_value(emp)?;
    }
    output(&out, a.out.as_deref())
}

fn cmd_kernel(ctx: &Context, a: &KernelArgs) -> Result<()> {
    let mut d = ctx.data(&a.data)?;
    if a.normalize {
        d = d.normalize_rows()?;
    }
    let spec = ctx.kernel(a)?;
    let attack = ctx.attack(&a.attack)?;
    let clean = fit_kernel_ridge(&spec, &d)?;
    let opts = AifOptions {
        policy: DegeneratePolicy::Skip,
        norm_scale: None,
    };
    let res = kernel_aif(&spec, &clean.theta, &d, attack.p, &opts)?;
    let mut out = json!({
        "kernel": spec,
        "theta": clean.theta.as_slice(),
        "condition": clean.condition,
        "aif": res,
    });
    if a.robust {
        if attack.epsilon.is_nan() || attack.epsilon <= 0.0 {
            return Err(AifError::Config("--robust needs --eps > 0".into()));
        }
        let robust = robust_fit_kernel(&spec, &d, &attack, &ctx.pgd(&a.pgd)?, &clean.theta)?;
        let slope = (robust.theta_vector() - &clean.theta) / attack.epsilon;
        out["delta_I"] = json!((&slope - res.influence_vector()).norm());
        out["robust"] = serde_json::to_value(robust)?;
    }
    output(&out, a.out.as_deref())
}

fn cmd_dro(ctx: &Context, a: &DroArgs) -> Result<()> {
    let d = ctx.data(&a.data)?;
    let mut attack = ctx.section::<AttackConfig>("attack")?.unwrap_or_default();
    if let Some(p) = a.p {
        attack.p = p;
    }
    if let Some(u) = a.u {
        attack.u = u;
    }
    attack.validate()?;
    let model = model_for(ctx.basis(a.basis)?, &d);
    let theta = fit(&model, &d)?.theta;
    output(
        &dro_aif(&model, &theta, &d, attack.p, attack.u)?,
        a.out.as_deref(),
    )
}

fn cmd_experiment(ctx: &Context, a: &ExperimentArgs) -> Result<()> {
    let mut flags = json!({});
    if let Some(r) = a.repetitions {
        flags["experiment"]["repetitions"] = json!(r);
    }
    if let Some(grid) = &a.eps_grid {
        flags["experiment"]["eps_grid"] = json!(grid);
    }
    if let Some(n) = a.n {
        flags["dataset"]["n"] = json!(n);
    }
    if let Some(split) = a.mnist_split {
        flags["experiment"]["mnist_split"] = json!(split);
    }
    if let Some(out) = &a.out {
        flags["experiment"]["out"] = json!(out);
    }
    let file = (!ctx.doc.as_object().is_some_and(|o| o.is_empty())).then_some(&ctx.doc);
    let spec = resolve(a.name, file, &flags, a.full)?;
    let table = run(&spec)?;
    let failed = table.rows.iter().filter(|r| !r.is_ok()).count();
    if failed > 0 {
        log::warn!("{failed} of {} cells did not finish cleanly", table.rows.len());
    }
    match &spec.output_path {
        Some(path) => emit(&table, path, Format::from_path(path)),
        None => print_stdout(aif::harness::emit::to_string(&table, Format::Csv)?.trim_end_matches('\n')),
    }
}

fn run_cli(cli: Cli) -> Result<()> {
    let doc = match &cli.config {
        Some(path) => load_config(path)?,
        None => json!({}),
    };
    let ctx = Context { doc };
    match &cli.command {
        Command::Generate(a) => cmd_generate(&ctx, a),
        Command::Fit(a) => cmd_fit(&ctx, a),
        Command::Compute(a) => cmd_compute(&ctx, a),
        Command::Sensitivity(a) => cmd_sensitivity(&ctx, a),
        Command::Robust(a) => cmd_robust(&ctx, a),
        Command::Kernel(a) => cmd_kernel(&ctx, a),
        Command::Dro(a) => cmd_dro(&ctx, a),
        Command::Experiment(a) => cmd_experiment(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run_cli(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
