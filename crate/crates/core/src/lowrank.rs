//! Low-rank and additive models of association matrices.
//!
//! A forgetting matrix `Z` is approximated by a rank-`r` factorization
//! `ẑ_ij = link(Σ_k α_ik β_jk + biases)`. For fully observed continuous
//! matrices [`fit_svd`] computes the exact Frobenius-optimal factors via
//! truncated SVD; [`fit_gd`] trains the same model by full-batch gradient
//! descent and also handles observation masks and the logistic link for
//! binary matrices; [`fit_additive`] fits the two-way additive model
//! `ẑ_ij = α_i + β_j`. Fits are scored by [`goodness_of_fit`] (R², and F1
//! for binary matrices) and explored across ranks with [`rank_sweep`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use ndarray_linalg::{JobSvd, SVDDCInto};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{AssociationMatrix, MatrixKind};

/// Magic bytes identifying the framed binary factor-model format.
const MODEL_MAGIC: &[u8; 4] = b"FMX1";

/// Rank used by default throughout the toolkit when none is requested.
pub const DEFAULT_RANK: usize = 5;

#[derive(Debug, Error)]
pub enum LowRankError {
    #[error("SVD fitting requires a fully observed matrix")]
    PartialObservation,
    #[error("SVD fitting requires a continuous matrix")]
    BinaryKindUnsupported,
    #[error("rank {rank} out of range (must be 1..={max})")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("row {0} has no observed entries")]
    EmptyRow(usize),
    #[error("column {0} has no observed entries")]
    EmptyColumn(usize),
    #[error("training diverged to non-finite values at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("observed values have zero variance; R² is undefined")]
    ZeroVariance,
    #[error("model is {model_tasks}×{model_examples}, matrix is {tasks}×{examples}")]
    ShapeMismatch {
        model_tasks: usize,
        model_examples: usize,
        tasks: usize,
        examples: usize,
    },
    #[error("component {k} out of range (model rank {rank}, components are 1-based)")]
    ComponentOutOfRange { k: usize, rank: usize },
    #[error("operation requires the identity link")]
    IdentityLinkRequired,
    #[error("alternating least squares did not converge")]
    NoConvergence,
    #[error("bad magic bytes: expected `FMX1`")]
    BadMagic,
    #[error("model file truncated or malformed")]
    BadFraming,
    #[error("SVD failed: {0}")]
    Linalg(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Output nonlinearity applied to the factor inner product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Logistic,
}

impl Link {
    #[inline]
    pub fn apply(self, u: f64) -> f64 {
        match self {
            Link::Identity => u,
            Link::Logistic => 1.0 / (1.0 + (-u).exp()),
        }
    }
}

/// A trained low-rank (plus optional additive-bias) model of a matrix.
///
/// Predicts `ẑ_ij = link(Σ_k α_ik β_jk + task_bias_i + example_bias_j)`.
/// Pure additive models carry rank 0 with both bias vectors set.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    rank: usize,
    task_factors: Array2<f64>,
    example_factors: Array2<f64>,
    link: Link,
    task_bias: Option<Array1<f64>>,
    example_bias: Option<Array1<f64>>,
}

impl FactorModel {
    pub fn new(
        task_factors: Array2<f64>,
        example_factors: Array2<f64>,
        link: Link,
        task_bias: Option<Array1<f64>>,
        example_bias: Option<Array1<f64>>,
    ) -> Self {
        assert_eq!(
            task_factors.ncols(),
            example_factors.ncols(),
            "factor ranks must agree"
        );
        if let Some(b) = &task_bias {
            assert_eq!(b.len(), task_factors.nrows());
        }
        if let Some(b) = &example_bias {
            assert_eq!(b.len(), example_factors.nrows());
        }
        Self {
            rank: task_factors.ncols(),
            task_factors,
            example_factors,
            link,
            task_bias,
            example_bias,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn link(&self) -> Link {
        self.link
    }

    pub fn num_tasks(&self) -> usize {
        self.task_factors.nrows()
    }

    pub fn num_examples(&self) -> usize {
        self.example_factors.nrows()
    }

    pub fn task_factors(&self) -> &Array2<f64> {
        &self.task_factors
    }

    pub fn example_factors(&self) -> &Array2<f64> {
        &self.example_factors
    }

    pub fn task_bias(&self) -> Option<&Array1<f64>> {
        self.task_bias.as_ref()
    }

    pub fn example_bias(&self) -> Option<&Array1<f64>> {
        self.example_bias.as_ref()
    }

    /// Pre-link linear term for one entry.
    #[inline]
    pub fn linear_term(&self, i: usize, j: usize) -> f64 {
        let mut u = self.task_factors.row(i).dot(&self.example_factors.row(j));
        if let Some(b) = &self.task_bias {
            u += b[i];
        }
        if let Some(b) = &self.example_bias {
            u += b[j];
        }
        u
    }

    #[inline]
    pub fn predict_entry(&self, i: usize, j: usize) -> f64 {
        self.link.apply(self.linear_term(i, j))
    }

    /// Full M×N prediction grid.
    pub fn predict(&self) -> Array2<f64> {
        let mut u = self.task_factors.dot(&self.example_factors.t());
        if let Some(b) = &self.task_bias {
            for (mut row, &bi) in u.rows_mut().into_iter().zip(b) {
                row += bi;
            }
        }
        if let Some(b) = &self.example_bias {
            for (mut col, &bj) in u.columns_mut().into_iter().zip(b) {
                col += bj;
            }
        }
        if self.link == Link::Logistic {
            u.mapv_inplace(|v| Link::Logistic.apply(v));
        }
        u
    }

    /// Predicted row for one task.
    pub fn predict_row(&self, i: usize) -> Array1<f64> {
        let mut u = self.example_factors.dot(&self.task_factors.row(i));
        if let Some(b) = &self.task_bias {
            u += b[i];
        }
        if let Some(b) = &self.example_bias {
            u += b;
        }
        u.mapv_inplace(|v| self.link.apply(v));
        u
    }
}

/// The k-th rank-1 component `α_k β_kᵀ` of an identity-link model
/// (1-based, ordered as fitted — descending singular value for SVD fits).
///
/// Components exclude bias terms, so summing all of them plus the biases
/// reproduces the full prediction exactly.
pub fn component(f: &FactorModel, k: usize) -> Result<Array2<f64>, LowRankError> {
    if f.link != Link::Identity {
        return Err(LowRankError::IdentityLinkRequired);
    }
    if k == 0 || k > f.rank {
        return Err(LowRankError::ComponentOutOfRange { k, rank: f.rank });
    }
    let a = f.task_factors.column(k - 1);
    let b = f.example_factors.column(k - 1);
    let mut out = Array2::zeros((f.num_tasks(), f.num_examples()));
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            out[(i, j)] = ai * bj;
        }
    }
    Ok(out)
}

/// Goodness-of-fit metrics for one model on one matrix.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitReport {
    /// 1 − Σ(z−ẑ)²/Σ(z−z̄)² over observed entries, z̄ the global observed mean.
    pub r2: f64,
    /// F1 of the "forgotten" class at threshold 0.5; binary matrices only.
    pub f1: Option<f64>,
    /// √Σ(z−ẑ)² over observed entries.
    pub frobenius_error: f64,
    /// Epochs actually run (zero for closed-form fits and bare evaluations).
    pub epochs_run: usize,
    /// Final value of the data term of the training objective (mean squared
    /// error, or mean cross-entropy for the logistic link).
    pub final_objective: f64,
}

/// Hyperparameters for gradient-descent fitting.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// L2 penalty weight on both factor matrices.
    pub l2: f64,
    /// Train additive bias terms alongside the factors.
    pub use_bias: bool,
    /// Std-dev of the normal factor initialization; default 0.1/√r.
    pub init_scale: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 1000,
            seed: 0,
            l2: 1e-4,
            use_bias: false,
            init_scale: None,
        }
    }
}

/// Exact rank-`r` factorization of a fully observed continuous matrix by
/// truncated SVD — the Frobenius-optimal rank-`r` approximation, with
/// components ordered by descending singular value.
pub fn fit_svd(m: &AssociationMatrix, r: usize) -> Result<FactorModel, LowRankError> {
    if m.kind() != MatrixKind::Continuous {
        return Err(LowRankError::BinaryKindUnsupported);
    }
    if !m.is_fully_observed() {
        return Err(LowRankError::PartialObservation);
    }
    let max_rank = m.num_tasks().min(m.num_examples());
    if r == 0 || r > max_rank {
        return Err(LowRankError::RankOutOfRange { rank: r, max: max_rank });
    }
    let (u, s, vt) = m
        .values()
        .to_owned()
        .svddc_into(JobSvd::Some)
        .map_err(|e| LowRankError::Linalg(e.to_string()))?;
    let u = u.expect("JobSvd::Some returns U");
    let vt = vt.expect("JobSvd::Some returns VT");
    // Task factors absorb the singular values: α_i = U_i,1..r · diag(σ).
    let mut task_factors = u.slice(ndarray::s![.., ..r]).to_owned();
    for (mut col, &sv) in task_factors.columns_mut().into_iter().zip(s.iter()) {
        col *= sv;
    }
    let example_factors = vt.slice(ndarray::s![..r, ..]).t().to_owned();
    Ok(FactorModel::new(
        task_factors,
        example_factors,
        Link::Identity,
        None,
        None,
    ))
}

fn observed_entries(m: &AssociationMatrix) -> Result<Vec<(usize, usize, f64)>, LowRankError> {
    let obs = m.observed();
    let vals = m.values();
    let mut row_seen = vec![false; m.num_tasks()];
    let mut col_seen = vec![false; m.num_examples()];
    let mut entries = Vec::with_capacity(m.observed_count());
    for ((i, j), &o) in obs.indexed_iter() {
        if o {
            row_seen[i] = true;
            col_seen[j] = true;
            entries.push((i, j, vals[(i, j)]));
        }
    }
    if let Some(i) = row_seen.iter().position(|&s| !s) {
        return Err(LowRankError::EmptyRow(i));
    }
    if let Some(j) = col_seen.iter().position(|&s| !s) {
        return Err(LowRankError::EmptyColumn(j));
    }
    Ok(entries)
}

/// Gradient-descent factorization. Handles observation masks; binary
/// matrices are fitted with the logistic link and cross-entropy loss,
/// continuous ones with the identity link and squared error.
pub fn fit_gd(
    m: &AssociationMatrix,
    r: usize,
    cfg: &FitConfig,
) -> Result<(FactorModel, FitReport), LowRankError> {
    let (model, report, _) = fit_gd_with_trace(m, r, cfg)?;
    Ok((model, report))
}

/// Like [`fit_gd`], additionally returning the per-epoch objective values
/// (data term plus L2 penalty — the quantity actually minimized).
pub fn fit_gd_with_trace(
    m: &AssociationMatrix,
    r: usize,
    cfg: &FitConfig,
) -> Result<(FactorModel, FitReport, Vec<f64>), LowRankError> {
    if r == 0 {
        return Err(LowRankError::RankOutOfRange { rank: r, max: 0 });
    }
    let entries = observed_entries(m)?;
    let n_obs = entries.len() as f64;
    let link = match m.kind() {
        MatrixKind::Continuous => Link::Identity,
        MatrixKind::Binary => Link::Logistic,
    };
    let (mt, ne) = (m.num_tasks(), m.num_examples());
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let scale = cfg.init_scale.unwrap_or(0.1 / (r as f64).sqrt());
    let normal = Normal::new(0.0, scale).expect("positive init scale");
    let mut a = Array2::from_shape_fn((mt, r), |_| normal.sample(&mut rng));
    let mut b = Array2::from_shape_fn((ne, r), |_| normal.sample(&mut rng));
    let mut task_bias = Array1::zeros(mt);
    let mut example_bias = Array1::zeros(ne);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut objective = f64::INFINITY;
    for epoch in 0..cfg.epochs {
        // Forward pass over observed entries.
        let mut data_term = 0.0;
        let mut grad_a = Array2::<f64>::zeros((mt, r));
        let mut grad_b = Array2::<f64>::zeros((ne, r));
        let mut grad_tb = Array1::<f64>::zeros(mt);
        let mut grad_eb = Array1::<f64>::zeros(ne);
        for &(i, j, z) in &entries {
            let mut u = a.row(i).dot(&b.row(j));
            if cfg.use_bias {
                u += task_bias[i] + example_bias[j];
            }
            let du = match link {
                Link::Identity => {
                    let e = u - z;
                    data_term += e * e;
                    2.0 * e / n_obs
                }
                Link::Logistic => {
                    let p = Link::Logistic.apply(u);
                    // Numerically stable cross-entropy in terms of u:
                    // −z ln p − (1−z) ln(1−p) = max(u,0) − z·u + ln(1+e^{−|u|}).
                    data_term += u.max(0.0) - z * u + (-u.abs()).exp().ln_1p();
                    (p - z) / n_obs
                }
            };
            for k in 0..r {
                grad_a[(i, k)] += du * b[(j, k)];
                grad_b[(j, k)] += du * a[(i, k)];
            }
            if cfg.use_bias {
                grad_tb[i] += du;
                grad_eb[j] += du;
            }
        }
        data_term /= n_obs;
        let l2_term = cfg.l2 * (a.iter().map(|v| v * v).sum::<f64>()
            + b.iter().map(|v| v * v).sum::<f64>());
        objective = data_term + l2_term;
        if !objective.is_finite() {
            return Err(LowRankError::NonFinite { epoch });
        }
        history.push(objective);
        grad_a += &(2.0 * cfg.l2 * &a);
        grad_b += &(2.0 * cfg.l2 * &b);
        a -= &(cfg.learning_rate * &grad_a);
        b -= &(cfg.learning_rate * &grad_b);
        if cfg.use_bias {
            task_bias -= &(cfg.learning_rate * &grad_tb);
            example_bias -= &(cfg.learning_rate * &grad_eb);
        }
    }
    let model = FactorModel::new(
        a,
        b,
        link,
        cfg.use_bias.then(|| task_bias),
        cfg.use_bias.then(|| example_bias),
    );
    let mut report = goodness_of_fit(m, &model)?;
    report.epochs_run = cfg.epochs;
    report.final_objective = objective;
    Ok((model, report, history))
}

/// Two-way additive model `ẑ_ij = α_i + β_j`, the least-squares solution
/// over observed entries computed by alternating means. The gauge is fixed
/// by shifting so the example biases have zero mean.
pub fn fit_additive(m: &AssociationMatrix) -> Result<FactorModel, LowRankError> {
    let entries = observed_entries(m)?;
    let (mt, ne) = (m.num_tasks(), m.num_examples());
    let mut row_entries: Vec<Vec<(usize, f64)>> = vec![Vec::new(); mt];
    let mut col_entries: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ne];
    for &(i, j, z) in &entries {
        row_entries[i].push((j, z));
        col_entries[j].push((i, z));
    }
    let mut alpha = vec![0.0f64; mt];
    let mut beta = vec![0.0f64; ne];
    const MAX_SWEEPS: usize = 100_000;
    const TOL: f64 = 1e-10;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut max_change = 0.0f64;
        for (i, row) in row_entries.iter().enumerate() {
            let mean = row.iter().map(|&(j, z)| z - beta[j]).sum::<f64>() / row.len() as f64;
            max_change = max_change.max((mean - alpha[i]).abs());
            alpha[i] = mean;
        }
        for (j, col) in col_entries.iter().enumerate() {
            let mean = col.iter().map(|&(i, z)| z - alpha[i]).sum::<f64>() / col.len() as f64;
            max_change = max_change.max((mean - beta[j]).abs());
            beta[j] = mean;
        }
        if max_change < TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LowRankError::NoConvergence);
    }
    let shift = beta.iter().sum::<f64>() / ne as f64;
    for b in beta.iter_mut() {
        *b -= shift;
    }
    for a in alpha.iter_mut() {
        *a += shift;
    }
    Ok(FactorModel::new(
        Array2::zeros((mt, 0)),
        Array2::zeros((ne, 0)),
        Link::Identity,
        Some(Array1::from_vec(alpha)),
        Some(Array1::from_vec(beta)),
    ))
}

/// R² (and, for binary matrices, F1) of a model's reconstruction, over
/// observed entries only.
pub fn goodness_of_fit(
    m: &AssociationMatrix,
    f: &FactorModel,
) -> Result<FitReport, LowRankError> {
    if f.num_tasks() != m.num_tasks() || f.num_examples() != m.num_examples() {
        return Err(LowRankError::ShapeMismatch {
            model_tasks: f.num_tasks(),
            model_examples: f.num_examples(),
            tasks: m.num_tasks(),
            examples: m.num_examples(),
        });
    }
    let entries = match observed_entries(m) {
        Ok(e) => e,
        // Empty rows or columns are fine for bare evaluation.
        Err(LowRankError::EmptyRow(_)) | Err(LowRankError::EmptyColumn(_)) => {
            let vals = m.values();
            m.observed()
                .indexed_iter()
                .filter(|&(_, &o)| o)
                .map(|((i, j), _)| (i, j, vals[(i, j)]))
                .collect()
        }
        Err(e) => return Err(e),
    };
    let n_obs = entries.len() as f64;
    let mean = entries.iter().map(|&(_, _, z)| z).sum::<f64>() / n_obs;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    let mut objective = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for &(i, j, z) in &entries {
        let pred = f.predict_entry(i, j);
        let e = z - pred;
        ss_res += e * e;
        ss_tot += (z - mean) * (z - mean);
        match m.kind() {
            MatrixKind::Continuous => objective += e * e,
            MatrixKind::Binary => {
                let p = pred.clamp(1e-12, 1.0 - 1e-12);
                objective -= z * p.ln() + (1.0 - z) * (1.0 - p).ln();
                let predicted_positive = pred >= 0.5;
                let actually_positive = z == 1.0;
                match (predicted_positive, actually_positive) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
        }
    }
    if ss_tot == 0.0 {
        return Err(LowRankError::ZeroVariance);
    }
    let f1 = match m.kind() {
        MatrixKind::Continuous => None,
        MatrixKind::Binary => {
            let denom = 2 * tp + fp + fn_;
            Some(if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            })
        }
    };
    Ok(FitReport {
        r2: 1.0 - ss_res / ss_tot,
        f1,
        frobenius_error: ss_res.sqrt(),
        epochs_run: 0,
        final_objective: objective / n_obs,
    })
}

/// Fits every requested rank and reports goodness of fit, using the exact
/// SVD path where it applies and gradient descent otherwise. Results are
/// sorted by rank.
pub fn rank_sweep(
    m: &AssociationMatrix,
    ranks: &[usize],
    cfg: &FitConfig,
) -> Result<Vec<(usize, FitReport)>, LowRankError> {
    let svd_path = m.kind() == MatrixKind::Continuous && m.is_fully_observed();
    let mut results: Vec<(usize, FitReport)> = ranks
        .par_iter()
        .map(|&r| {
            let report = if svd_path {
                let model = fit_svd(m, r)?;
                goodness_of_fit(m, &model)
            } else {
                fit_gd(m, r, cfg).map(|(_, rep)| rep)
            }?;
            Ok((r, report))
        })
        .collect::<Result<_, LowRankError>>()?;
    results.sort_by_key(|&(r, _)| r);
    Ok(results)
}

#[derive(Serialize, Deserialize)]
struct FactorModelData {
    rank: usize,
    link: Link,
    task_factors: Vec<Vec<f64>>,
    example_factors: Vec<Vec<f64>>,
    task_bias: Option<Vec<f64>>,
    example_bias: Option<Vec<f64>>,
}

impl From<&FactorModel> for FactorModelData {
    fn from(f: &FactorModel) -> Self {
        let to_rows = |a: &Array2<f64>| a.rows().into_iter().map(|r| r.to_vec()).collect();
        Self {
            rank: f.rank,
            link: f.link,
            task_factors: to_rows(&f.task_factors),
            example_factors: to_rows(&f.example_factors),
            task_bias: f.task_bias.as_ref().map(|b| b.to_vec()),
            example_bias: f.example_bias.as_ref().map(|b| b.to_vec()),
        }
    }
}

/// Writes a model as JSON for human inspection (f64 values round-trip
/// exactly through the decimal rendering).
pub fn write_model_json(f: &FactorModel, path: &Path) -> Result<(), LowRankError> {
    let file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(file, &FactorModelData::from(f))?;
    Ok(())
}

pub fn read_model_json(path: &Path) -> Result<FactorModel, LowRankError> {
    let data: FactorModelData = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let rows_to_array = |rows: Vec<Vec<f64>>, width: usize| -> Result<Array2<f64>, LowRankError> {
        let height = rows.len();
        let mut out = Array2::zeros((height, width));
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != width {
                return Err(LowRankError::BadFraming);
            }
            out.row_mut(i).iter_mut().zip(row).for_each(|(d, v)| *d = v);
        }
        Ok(out)
    };
    let task_factors = rows_to_array(data.task_factors, data.rank)?;
    let example_factors = rows_to_array(data.example_factors, data.rank)?;
    Ok(FactorModel::new(
        task_factors,
        example_factors,
        data.link,
        data.task_bias.map(Array1::from_vec),
        data.example_bias.map(Array1::from_vec),
    ))
}

/// Writes a model in the framed binary format (bit-exact round trip).
pub fn save_model(f: &FactorModel, path: &Path) -> Result<(), LowRankError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    w.write_u32::<LittleEndian>(f.num_tasks() as u32)?;
    w.write_u32::<LittleEndian>(f.num_examples() as u32)?;
    w.write_u32::<LittleEndian>(f.rank as u32)?;
    w.write_u8(match f.link {
        Link::Identity => 0,
        Link::Logistic => 1,
    })?;
    let flags = f.task_bias.is_some() as u8 | (f.example_bias.is_some() as u8) << 1;
    w.write_u8(flags)?;
    fn write_table<'a, W: Write>(
        w: &mut W,
        vals: impl IntoIterator<Item = &'a f64>,
    ) -> std::io::Result<()> {
        for &v in vals {
            w.write_f64::<LittleEndian>(v)?;
        }
        Ok(())
    }
    write_table(&mut w, &f.task_factors)?;
    write_table(&mut w, &f.example_factors)?;
    if let Some(b) = &f.task_bias {
        write_table(&mut w, b)?;
    }
    if let Some(b) = &f.example_bias {
        write_table(&mut w, b)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<FactorModel, LowRankError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(LowRankError::BadMagic);
    }
    let m = r.read_u32::<LittleEndian>()? as usize;
    let n = r.read_u32::<LittleEndian>()? as usize;
    let rank = r.read_u32::<LittleEndian>()? as usize;
    let link = match r.read_u8()? {
        0 => Link::Identity,
        1 => Link::Logistic,
        _ => return Err(LowRankError::BadFraming),
    };
    let flags = r.read_u8()?;
    let read_table = |r: &mut BufReader<File>, len: usize| -> Result<Vec<f64>, LowRankError> {
        let mut vals = vec![0f64; len];
        r.read_f64_into::<LittleEndian>(&mut vals)?;
        Ok(vals)
    };
    let task_factors =
        Array2::from_shape_vec((m, rank), read_table(&mut r, m * rank)?)
            .map_err(|_| LowRankError::BadFraming)?;
    let example_factors =
        Array2::from_shape_vec((n, rank), read_table(&mut r, n * rank)?)
            .map_err(|_| LowRankError::BadFraming)?;
    let task_bias = (flags & 1 != 0)
        .then(|| read_table(&mut r, m).map(Array1::from_vec))
        .transpose()?;
    let example_bias = (flags & 2 != 0)
        .then(|| read_table(&mut r, n).map(Array1::from_vec))
        .transpose()?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(LowRankError::BadFraming);
    }
    Ok(FactorModel::new(
        task_factors,
        example_factors,
        link,
        task_bias,
        example_bias,
    ))
}
