//! Datasets, synthetic generators, CSV and MNIST IDX ingestion.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::NormOrder;
use crate::error::{AifError, Result};
use crate::format_float;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: DMatrix<f64>,
    outputs: DVector<f64>,
    role: Role,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, outputs: DVector<f64>, role: Role) -> Result<Self> {
        if inputs.nrows() == 0 || inputs.ncols() == 0 {
            return Err(AifError::Domain("dataset needs n >= 1 and m >= 1".into()));
        }
        if outputs.len() != inputs.nrows() {
            return Err(AifError::Dimension(format!(
                "{} outputs for {} input rows",
                outputs.len(),
                inputs.nrows()
            )));
        }
        if inputs.iter().chain(outputs.iter()).any(|v| !v.is_finite()) {
            return Err(AifError::Domain("dataset contains non-finite values".into()));
        }
        Ok(Dataset {
            inputs,
            outputs,
            role,
        })
    }

    /// Builds a dataset from row slices, mostly for small hand-written examples.
    pub fn from_rows(rows: &[(Vec<f64>, f64)], role: Role) -> Result<Self> {
        let m = rows.first().map(|r| r.0.len()).unwrap_or(0);
        if rows.iter().any(|r| r.0.len() != m) {
            return Err(AifError::Dimension("ragged rows".into()));
        }
        let inputs = DMatrix::from_fn(rows.len(), m, |i, j| rows[i].0[j]);
        let outputs = DVector::from_fn(rows.len(), |i, _| rows[i].1);
        Dataset::new(inputs, outputs, role)
    }

    pub fn n(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn m(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn outputs(&self) -> &DVector<f64> {
        &self.outputs
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn x(&self, i: usize) -> DVector<f64> {
        self.inputs.row(i).transpose()
    }

    pub fn y(&self, i: usize) -> f64 {
        self.outputs[i]
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// Same outputs with replaced inputs, as used for perturbed copies.
    pub fn with_inputs(&self, inputs: DMatrix<f64>) -> Result<Self> {
        if inputs.shape() != self.inputs.shape() {
            return Err(AifError::Dimension("replacement inputs change the shape".into()));
        }
        Dataset::new(inputs, self.outputs.clone(), self.role)
    }

    /// Keeps the first `m` input columns.
    pub fn select_columns(&self, m: usize) -> Result<Self> {
        if m == 0 || m > self.m() {
            return Err(AifError::Config(format!(
                "cannot keep {m} of {} columns",
                self.m()
            )));
        }
        Dataset::new(
            self.inputs.columns(0, m).into_owned(),
            self.outputs.clone(),
            self.role,
        )
    }

    /// The dataset stacked `k` times, in order.
    pub fn repeat(&self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(AifError::Config("repeat factor must be >= 1".into()));
        }
        let n = self.n();
        let inputs = DMatrix::from_fn(n * k, self.m(), |i, j| self.inputs[(i % n, j)]);
        let outputs = DVector::from_fn(n * k, |i, _| self.outputs[i % n]);
        Dataset::new(inputs, outputs, self.role)
    }

    /// Rows reordered so that row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n() {
            return Err(AifError::Dimension("permutation length".into()));
        }
        let inputs = DMatrix::from_fn(self.n(), self.m(), |i, j| self.inputs[(perm[i], j)]);
        let outputs = DVector::from_fn(self.n(), |i, _| self.outputs[perm[i]]);
        Dataset::new(inputs, outputs, self.role)
    }

    /// Scales every row to unit l2 norm; zero rows are rejected.
    pub fn normalize_rows(&self) -> Result<Self> {
        let mut inputs = self.inputs.clone();
        for i in 0..self.n() {
            let norm = inputs.row(i).norm();
            if norm == 0.0 {
                return Err(AifError::Normalization { row: i, norm });
            }
            let mut row = inputs.row_mut(i);
            row /= norm;
        }
        Dataset::new(inputs, self.outputs.clone(), self.role)
    }
}

/// Empirical Ê‖x‖_p = (1/n) Σ ‖x_i‖_p.
pub fn mean_norm(d: &Dataset, p: NormOrder) -> Result<f64> {
    if d.n() == 0 {
        return Err(AifError::Domain("mean norm of an empty dataset".into()));
    }
    let total: f64 = (0..d.n())
        .map(|i| {
            let row: Vec<f64> = d.inputs.row(i).iter().copied().collect();
            p.norm(&row)
        })
        .sum();
    Ok(total / d.n() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    GaussianLinear,
    GaussianLinearQuadratic,
    RandomEffect,
    UniformQuadraticBasis,
    UnitSphere,
}

impl std::str::FromStr for Family {
    type Err = AifError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| AifError::Config(format!("unknown dataset family '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RandomKeyword {
    Random,
}

/// Coefficient vector, either given explicitly or drawn i.i.d. N(0,1) from the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coefficients {
    Values(Vec<f64>),
    Keyword(RandomKeyword),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub family: Family,
    pub n: usize,
    pub m: usize,
    /// Total number of features driving the output. Only the first `m` are observed.
    #[serde(default, rename = "M", skip_serializing_if = "Option::is_none")]
    pub total_features: Option<usize>,
    #[serde(default = "one")]
    pub sigma_x: f64,
    #[serde(default)]
    pub sigma_xi: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta1: Option<Coefficients>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2: Option<Coefficients>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "train_role")]
    pub role: Role,
}

fn one() -> f64 {
    1.0
}

fn train_role() -> Role {
    Role::Train
}

impl GeneratorConfig {
    pub fn new(family: Family, n: usize, m: usize) -> Self {
        GeneratorConfig {
            family,
            n,
            m,
            total_features: None,
            sigma_x: 1.0,
            sigma_xi: 0.0,
            beta1: None,
            beta2: None,
            seed: 0,
            role: Role::Train,
        }
    }

    /// The same process with a different row stream, so both splits share coefficients.
    pub fn eval_split(&self, n: usize) -> Self {
        GeneratorConfig {
            n,
            role: Role::Eval,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(AifError::Config("generator needs n >= 1 and m >= 1".into()));
        }
        if !(self.sigma_x > 0.0 && self.sigma_x.is_finite()) {
            return Err(AifError::Config("sigma_x must be > 0".into()));
        }
        if !(self.sigma_xi >= 0.0 && self.sigma_xi.is_finite()) {
            return Err(AifError::Config("sigma_xi must be >= 0".into()));
        }
        match (self.family, self.total_features) {
            (Family::RandomEffect, None) => Err(AifError::Config(
                "random-effect family needs the total feature count M".into(),
            )),
            (Family::RandomEffect | Family::UniformQuadraticBasis, Some(total)) if total < self.m => {
                Err(AifError::Config(format!("m = {} exceeds M = {total}", self.m)))
            }
            (Family::GaussianLinear | Family::GaussianLinearQuadratic | Family::UnitSphere, Some(_)) => Err(
                AifError::Config(format!("M is not used by the {:?} family", self.family)),
            ),
            _ => Ok(()),
        }
    }

    fn latent_dim(&self) -> usize {
        match self.family {
            Family::RandomEffect | Family::UniformQuadraticBasis => self.total_features.unwrap_or(self.m),
            _ => self.m,
        }
    }
}

const COEFFICIENT_STREAM_BETA1: u64 = 1;
const COEFFICIENT_STREAM_BETA2: u64 = 2;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn row_stream(role: Role, row: usize) -> u64 {
    let tag: u64 = match role {
        Role::Train => 1,
        Role::Eval => 2,
    };
    (tag << 48) | row as u64
}

fn resolve_coefficients(
    coef: &Option<Coefficients>,
    len: usize,
    seed: u64,
    stream: u64,
    default_random: bool,
    name: &str,
) -> Result<Vec<f64>> {
    match coef {
        Some(Coefficients::Values(v)) => {
            if v.len() != len {
                return Err(AifError::Config(format!(
                    "{name} has length {}, expected {len}",
                    v.len()
                )));
            }
            Ok(v.clone())
        }
        Some(Coefficients::Keyword(RandomKeyword::Random)) => Ok(draw_normals(seed, stream, len)),
        None if default_random => Ok(draw_normals(seed, stream, len)),
        None => Ok(vec![0.0; len]),
    }
}

fn draw_normals(seed: u64, stream: u64, len: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, stream);
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Draws a dataset from the configured process. Every row has its own random stream, so the
/// result does not depend on evaluation order.
pub fn generate(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let latent = config.latent_dim();
    let beta1 = resolve_coefficients(
        &config.beta1,
        latent,
        config.seed,
        COEFFICIENT_STREAM_BETA1,
        true,
        "beta1",
    )?;
    let uses_beta2 = matches!(
        config.family,
        Family::GaussianLinearQuadratic | Family::UniformQuadraticBasis
    );
    let beta2 = if uses_beta2 {
        resolve_coefficients(
            &config.beta2,
            latent,
            config.seed,
            COEFFICIENT_STREAM_BETA2,
            false,
            "beta2",
        )?
    } else {
        if config.beta2.is_some() {
            return Err(AifError::Config(format!(
                "beta2 is not used by the {:?} family",
                config.family
            )));
        }
        Vec::new()
    };

    let rows: Vec<(Vec<f64>, f64)> = (0..config.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(config.seed, row_stream(config.role, i));
            draw_row(config, latent, &beta1, &beta2, &mut rng)
        })
        .collect();

    let m = config.m;
    let inputs = DMatrix::from_fn(config.n, m, |i, j| rows[i].0[j]);
    let outputs = DVector::from_fn(config.n, |i, _| rows[i].1);
    Dataset::new(inputs, outputs, config.role)
}

fn draw_row(
    config: &GeneratorConfig,
    latent: usize,
    beta1: &[f64],
    beta2: &[f64],
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, f64) {
    let mut x: Vec<f64> = match config.family {
        Family::UniformQuadraticBasis => {
            let unif = Uniform::new(-1.0, 1.0).expect("valid interval");
            (0..latent).map(|_| rng.sample(unif)).collect()
        }
        _ => (0..latent)
            .map(|_| config.sigma_x * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    };
    if config.family == Family::UnitSphere {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        x.iter_mut().for_each(|v| *v /= norm);
    }
    let noise = config.sigma_xi * rng.sample::<f64, _>(StandardNormal);
    let linear: f64 = x.iter().zip(beta1).map(|(a, b)| a * b).sum();
    let y = match config.family {
        Family::GaussianLinear | Family::RandomEffect | Family::UnitSphere => linear + noise,
        Family::GaussianLinearQuadratic => {
            let q: f64 = x.iter().zip(beta2).map(|(a, b)| a * b).sum();
            linear + q * q + noise
        }
        Family::UniformQuadraticBasis => {
            let q: f64 = x.iter().zip(beta2).map(|(a, b)| b * (a / 2.0) * (a / 2.0)).sum();
            linear + q + noise
        }
    };
    x.truncate(config.m);
    (x, y)
}

/// Reads a CSV with header `x1,...,xm,y`.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_error)?;
    let headers = reader.headers().map_err(csv_error)?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names.len() < 2 || names.last() != Some(&"y") {
        return Err(AifError::Parse {
            row: 0,
            column: names.last().unwrap_or(&"").to_string(),
            message: "header must be x1,...,xm,y".into(),
        });
    }
    let m = names.len() - 1;
    for (j, name) in names[..m].iter().enumerate() {
        if *name != format!("x{}", j + 1) {
            return Err(AifError::Parse {
                row: 0,
                column: name.to_string(),
                message: format!("expected header x{}", j + 1),
            });
        }
    }
    let mut values = Vec::new();
    let mut outputs = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(csv_error)?;
        if record.len() != m + 1 {
            return Err(AifError::Parse {
                row,
                column: if record.len() < m + 1 {
                    "y".into()
                } else {
                    format!("#{}", record.len())
                },
                message: format!("expected {} fields, found {}", m + 1, record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let column = names[j].to_string();
            let v: f64 = cell.parse().map_err(|_| AifError::Parse {
                row,
                column: column.clone(),
                message: format!("'{cell}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(AifError::Parse {
                    row,
                    column,
                    message: format!("non-finite value '{cell}'"),
                });
            }
            if j < m {
                values.push(v);
            } else {
                outputs.push(v);
            }
        }
    }
    let n = outputs.len();
    if n == 0 {
        return Err(AifError::Domain(format!("{} has no data rows", path.display())));
    }
    Dataset::new(
        DMatrix::from_row_slice(n, m, &values),
        DVector::from_vec(outputs),
        Role::Train,
    )
}

fn csv_error(e: csv::Error) -> AifError {
    let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => AifError::Io(io),
        other => AifError::Parse {
            row,
            column: String::new(),
            message: format!("{other:?}"),
        },
    }
}

/// Writes a dataset in the canonical CSV layout with round-trip exact floats.
pub fn write_csv(d: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_error)?;
    let mut header: Vec<String> = (1..=d.m()).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    writer.write_record(&header).map_err(csv_error)?;
    for i in 0..d.n() {
        let mut record: Vec<String> = d.inputs.row(i).iter().map(|&v| format_float(v)).collect();
        record.push(format_float(d.outputs[i]));
        writer.write_record(&record).map_err(csv_error)?;
    }
    writer.flush()?;
    Ok(())
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MnistSplit {
    #[default]
    Train,
    Test,
}

impl std::str::FromStr for MnistSplit {
    type Err = AifError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(MnistSplit::Train),
            "test" => Ok(MnistSplit::Test),
            other => Err(AifError::Config(format!("unknown MNIST split '{other}'"))),
        }
    }
}

impl MnistSplit {
    /// Standard file names of the split inside `dir`.
    pub fn paths(self, dir: &Path) -> (PathBuf, PathBuf) {
        let prefix = match self {
            MnistSplit::Train => "train",
            MnistSplit::Test => "t10k",
        };
        (
            dir.join(format!("{prefix}-images-idx3-ubyte")),
            dir.join(format!("{prefix}-labels-idx1-ubyte")),
        )
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| AifError::Domain(format!("{what}: truncated header")))
}

/// Loads `count` MNIST examples sampled without replacement. Pixels are scaled to [0, 1] and
/// the digit label is the real-valued output.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(AifError::Config("MNIST sample count must be >= 1".into()));
    }
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    decode_mnist(&images, &labels, count, seed)
}

pub fn decode_mnist(images: &[u8], labels: &[u8], count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(AifError::Config("MNIST sample count must be >= 1".into()));
    }
    let magic = be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(AifError::Domain(format!(
            "images magic {magic:#010x}, expected 0x00000803"
        )));
    }
    let magic = be_u32(labels, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(AifError::Domain(format!(
            "labels magic {magic:#010x}, expected 0x00000801"
        )));
    }
    let n_images = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let n_labels = be_u32(labels, 4, "labels")? as usize;
    if n_images != n_labels {
        return Err(AifError::Domain(format!(
            "{n_images} images but {n_labels} labels"
        )));
    }
    let m = rows * cols;
    if m == 0 {
        return Err(AifError::Domain("images have zero pixels".into()));
    }
    if images.len() < 16 + n_images * m {
        return Err(AifError::Domain("images file is truncated".into()));
    }
    if labels.len() < 8 + n_labels {
        return Err(AifError::Domain("labels file is truncated".into()));
    }
    if count > n_images {
        return Err(AifError::Config(format!(
            "requested {count} examples but only {n_images} are available"
        )));
    }
    let indices = mnist_sample_indices(n_images, count, seed);
    let pixels = &images[16..];
    let inputs = DMatrix::from_fn(count, m, |i, j| pixels[indices[i] * m + j] as f64 / 255.0);
    let outputs = DVector::from_fn(count, |i, _| labels[8 + indices[i]] as f64);
    Dataset::new(inputs, outputs, Role::Train)
}

/// Indices drawn without replacement; identical for identical arguments.
pub fn mnist_sample_indices(available: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, available, count).into_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row_set(d: &Dataset) -> Vec<(Vec<f64>, f64)> {
        (0..d.n())
            .map(|i| (d.x(i).iter().copied().collect(), d.y(i)))
            .collect()
    }

    #[test]
    fn gaussian_linear_shape() {
        let mut cfg = GeneratorConfig::new(Family::GaussianLinear, 500, 2);
        cfg.beta1 = Some(Coefficients::Values(vec![2.0, -3.4]));
        cfg.sigma_xi = 0.1;
        cfg.seed = 7;
        let d = generate(&cfg).unwrap();
        assert_eq!((d.n(), d.m()), (500, 2));
        let resid: f64 = (0..d.n())
            .map(|i| (d.y(i) - 2.0 * d.x(i)[0] + 3.4 * d.x(i)[1]).powi(2))
            .sum::<f64>()
            / 500.0;
        assert!((resid.sqrt() - 0.1).abs() < 0.02);
    }

    #[test]
    fn zero_coefficients_and_noise_give_zero_outputs() {
        let mut cfg = GeneratorConfig::new(Family::GaussianLinear, 1, 1);
        cfg.beta1 = Some(Coefficients::Values(vec![0.0]));
        let d = generate(&cfg).unwrap();
        assert_eq!(d.y(0), 0.0);
    }

    #[test]
    fn random_effect_outputs_are_centered() {
        let mut cfg = GeneratorConfig::new(Family::RandomEffect, 2000, 5);
        cfg.total_features = Some(10);
        cfg.sigma_xi = 0.1;
        cfg.seed = 3;
        let d = generate(&cfg).unwrap();
        let mean = d.outputs().mean();
        assert!(mean.abs() < 4.0 / (2000f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn random_effect_requires_m_at_most_total() {
        let mut cfg = GeneratorConfig::new(Family::RandomEffect, 10, 5);
        cfg.total_features = Some(3);
        assert!(matches!(generate(&cfg), Err(AifError::Config(_))));
        cfg.total_features = None;
        assert!(matches!(generate(&cfg), Err(AifError::Config(_))));
    }

    #[test]
    fn observed_columns_do_not_change_with_m() {
        let mut cfg = GeneratorConfig::new(Family::RandomEffect, 50, 3);
        cfg.total_features = Some(10);
        cfg.seed = 11;
        let small = generate(&cfg).unwrap();
        cfg.m = 7;
        let large = generate(&cfg).unwrap();
        assert_eq!(&large.select_columns(3).unwrap(), &small);
    }

    #[test]
    fn generation_is_deterministic_and_split_aware() {
        let mut cfg = GeneratorConfig::new(Family::GaussianLinearQuadratic, 64, 3);
        cfg.beta2 = Some(Coefficients::Values(vec![1.0, 0.0, -1.0]));
        cfg.seed = 5;
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        let e = generate(&cfg.eval_split(64)).unwrap();
        assert_ne!(a.inputs(), e.inputs());
        assert_eq!(e.role(), Role::Eval);
    }

    #[test]
    fn unit_sphere_rows_are_normalized() {
        let cfg = GeneratorConfig::new(Family::UnitSphere, 40, 6);
        let d = generate(&cfg).unwrap();
        for i in 0..d.n() {
            assert!((d.x(i).norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_norm_examples() {
        let d = Dataset::from_rows(&[(vec![1.0], 0.0), (vec![-1.0], 0.0)], Role::Train).unwrap();
        assert_eq!(mean_norm(&d, NormOrder::Two).unwrap(), 1.0);
        let d = Dataset::from_rows(&[(vec![3.0, 4.0], 0.0), (vec![0.0, 0.0], 0.0)], Role::Train).unwrap();
        assert_eq!(mean_norm(&d, NormOrder::Two).unwrap(), 2.5);
        assert_eq!(mean_norm(&d, NormOrder::One).unwrap(), 3.5);
        assert_eq!(mean_norm(&d, NormOrder::Inf).unwrap(), 2.0);
    }

    #[test]
    fn sample_covariance_converges() {
        let n = 10_000;
        for seed in [1u64, 2, 3] {
            let mut cfg = GeneratorConfig::new(Family::GaussianLinear, n, 3);
            cfg.sigma_x = 1.5;
            cfg.seed = seed;
            let d = generate(&cfg).unwrap();
            let x = d.inputs();
            let mean = x.row_mean();
            let centered = DMatrix::from_fn(n, 3, |i, j| x[(i, j)] - mean[j]);
            let cov = centered.transpose() * &centered / (n as f64 - 1.0);
            let target = DMatrix::identity(3, 3) * 2.25;
            let tol = 5.0 * 2.25 / (n as f64).sqrt();
            assert!((cov - target).amax() < tol);
        }
    }

    #[test]
    fn csv_two_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "x1,y\n1,2\n-1,-1").unwrap();
        let d = load_csv(&path).unwrap();
        assert_eq!((d.n(), d.m()), (2, 1));
        assert_eq!(row_set(&d), vec![(vec![1.0], 2.0), (vec![-1.0], -1.0)]);
    }

    #[test]
    fn csv_rejects_nan_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "x1,y\nNaN,2\n").unwrap();
        match load_csv(&path) {
            Err(AifError::Parse { row, column, .. }) => {
                assert_eq!(row, 1);
                assert_eq!(column, "x1");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_rejects_ragged_and_missing_y() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "x1,x2,y\n1,2,3\n1,2\n").unwrap();
        assert!(matches!(load_csv(&path), Err(AifError::Parse { row: 2, .. })));
        fs::write(&path, "x1,x2\n1,2\n").unwrap();
        assert!(matches!(load_csv(&path), Err(AifError::Parse { row: 0, .. })));
        fs::write(&path, "x1,y\n1,abc\n").unwrap();
        assert!(matches!(load_csv(&path), Err(AifError::Parse { row: 1, .. })));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut cfg = GeneratorConfig::new(Family::GaussianLinear, 30, 4);
        cfg.sigma_xi = 0.3;
        let d = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_csv(&d, &path).unwrap();
        assert_eq!(load_csv(&path).unwrap(), d);
    }

    fn idx_fixture(n: usize, rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        for v in [n, rows, cols] {
            images.extend_from_slice(&(v as u32).to_be_bytes());
        }
        for i in 0..n * rows * cols {
            images.push((i % 256) as u8);
        }
        let mut labels = Vec::new();
        labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&(n as u32).to_be_bytes());
        for i in 0..n {
            labels.push((i % 10) as u8);
        }
        (images, labels)
    }

    #[test]
    fn mnist_decoding() {
        let (images, labels) = idx_fixture(20, 28, 28);
        let d = decode_mnist(&images, &labels, 5, 0).unwrap();
        assert_eq!((d.n(), d.m()), (5, 784));
        assert!(d.inputs().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let idx = mnist_sample_indices(20, 5, 0);
        for (i, &k) in idx.iter().enumerate() {
            assert_eq!(d.y(i), (k % 10) as f64);
            assert_eq!(d.inputs()[(i, 0)], ((k * 784) % 256) as f64 / 255.0);
        }
        assert_eq!(idx, mnist_sample_indices(20, 5, 0));
        let mut unique = idx.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), 5);
    }

    #[test]
    fn mnist_errors() {
        let (images, labels) = idx_fixture(4, 2, 2);
        assert!(matches!(
            decode_mnist(&images, &labels, 0, 0),
            Err(AifError::Config(_))
        ));
        assert!(matches!(
            decode_mnist(&images, &labels, 5, 0),
            Err(AifError::Config(_))
        ));
        assert!(matches!(
            decode_mnist(&labels, &labels, 1, 0),
            Err(AifError::Domain(_))
        ));
        assert!(matches!(
            decode_mnist(&images[..images.len() - 1], &labels, 1, 0),
            Err(AifError::Domain(_))
        ));
    }

    #[test]
    fn mnist_files_from_disk() {
        let (images, labels) = idx_fixture(6, 3, 3);
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = MnistSplit::Train.paths(dir.path());
        fs::write(&ip, images).unwrap();
        fs::write(&lp, labels).unwrap();
        let d = load_mnist_idx(&ip, &lp, 6, 9).unwrap();
        assert_eq!((d.n(), d.m()), (6, 9));
    }
}
