//! Predicting the forgetting row of an unseen task from a small seed.
//!
//! Fine-tuning on a new task and measuring forgetting over every upstream
//! example is expensive; these predictors instead extrapolate a full row of
//! the association matrix from a handful of observed entries (the
//! [`SeedSet`]) plus the rows of previously measured tasks:
//!
//! - [`predict_additive`] — task effect + example effect, the two-way
//!   additive model.
//! - [`predict_knn`] — similarity-weighted average of the most similar
//!   measured rows, with similarity computed on the seed columns.
//! - [`predict_mf`] — fold the new task into a fixed low-rank factorization
//!   by ridge least squares (or Newton steps for the logistic link).
//! - [`predict_features`] — regress forgetting onto inner products of
//!   transformed task/example feature vectors; needs no seed at all.
//! - [`predict_residual`] — a seed-based predictor plus a feature model
//!   trained on its residuals.
//!
//! [`evaluate_protocol`] scores any of these under repeated random seed
//! draws on held-out tasks, reproducibly from a single master seed.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use ndarray_linalg::Solve;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lowrank::{
    fit_additive, fit_gd, fit_svd, FitConfig, LowRankError, DEFAULT_RANK,
};
use crate::matrix::{AssociationMatrix, MatrixError, MatrixKind};

/// Default number of observed entries revealed for a new task.
pub const DEFAULT_SEED_SIZE: usize = 30;
/// Default neighbour count for the similarity-weighted predictor.
pub const DEFAULT_KNN_K: usize = 5;
/// Default ridge strength for matrix-factorization fold-in.
pub const DEFAULT_RIDGE: f64 = 1e-3;
/// Default number of repeated seed draws per test task.
pub const DEFAULT_REPEATS: usize = 10;

#[derive(Debug, Error)]
pub enum CompletionError {
    #[error("seed set must contain at least one entry")]
    EmptySeed,
    #[error("seed has {indices} indices but {values} values")]
    SeedLengthMismatch { indices: usize, values: usize },
    #[error("duplicate seed column {0}")]
    DuplicateSeedIndex(usize),
    #[error("seed column {index} out of range for {n} examples")]
    SeedIndexOutOfRange { index: usize, n: usize },
    #[error("non-finite seed value at position {0}")]
    NonFiniteSeed(usize),
    #[error("seed size {seed_size} must be below the number of examples {n}")]
    SeedTooLarge { seed_size: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("unknown task id `{0}`")]
    UnknownTask(String),
    #[error("task `{0}` appears in both train and test splits")]
    OverlappingSplit(String),
    #[error("train and test task lists must be non-empty")]
    EmptySplit,
    #[error("repeats must be at least 1")]
    ZeroRepeats,
    #[error("no feature vector for id `{0}`")]
    MissingFeature(String),
    #[error("feature vectors must share one dimension (got {left} and {right})")]
    FeatureDimMismatch { left: usize, right: usize },
    #[error("feature table has duplicate id `{0}`")]
    DuplicateFeatureId(String),
    #[error("non-finite feature value for id `{0}`")]
    NonFiniteFeature(String),
    #[error("feature table is empty")]
    EmptyFeatures,
    #[error("fold-in system could not be solved: {0}")]
    Solve(String),
    #[error("feature-model training diverged at epoch {0}")]
    TrainingDiverged(usize),
    #[error(transparent)]
    LowRank(#[from] LowRankError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// The revealed entries of a new task's forgetting row.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedSet {
    example_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SeedSet {
    pub fn new(example_indices: Vec<usize>, values: Vec<f64>) -> Result<Self, CompletionError> {
        if example_indices.is_empty() {
            return Err(CompletionError::EmptySeed);
        }
        if example_indices.len() != values.len() {
            return Err(CompletionError::SeedLengthMismatch {
                indices: example_indices.len(),
                values: values.len(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        for &idx in &example_indices {
            if !seen.insert(idx) {
                return Err(CompletionError::DuplicateSeedIndex(idx));
            }
        }
        for (pos, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(CompletionError::NonFiniteSeed(pos));
            }
        }
        Ok(Self {
            example_indices,
            values,
        })
    }

    /// Seed drawn from a known full row at the given columns.
    pub fn from_row(row: ArrayView1<'_, f64>, indices: &[usize]) -> Result<Self, CompletionError> {
        let values = indices
            .iter()
            .map(|&j| {
                row.get(j).copied().ok_or(CompletionError::SeedIndexOutOfRange {
                    index: j,
                    n: row.len(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(indices.to_vec(), values)
    }

    pub fn len(&self) -> usize {
        self.example_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.example_indices.is_empty()
    }

    pub fn example_indices(&self) -> &[usize] {
        &self.example_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn check_bounds(&self, n: usize) -> Result<(), CompletionError> {
        for &idx in &self.example_indices {
            if idx >= n {
                return Err(CompletionError::SeedIndexOutOfRange { index: idx, n });
            }
        }
        Ok(())
    }

    /// Forces the known values back into a predicted row.
    fn overwrite(&self, row: &mut [f64]) {
        for (&j, &v) in self.example_indices.iter().zip(&self.values) {
            row[j] = v;
        }
    }
}

/// Generalization regime of a train/test split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRegime {
    InDomain,
    OutOfDomain,
}

/// A train/test partition of the measured tasks plus protocol sizes.
#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub train_tasks: Vec<String>,
    pub test_tasks: Vec<String>,
    pub regime: SplitRegime,
    pub seed_size: usize,
    pub repeats: usize,
}

impl SplitSpec {
    pub fn new(
        train_tasks: Vec<String>,
        test_tasks: Vec<String>,
        regime: SplitRegime,
    ) -> Result<Self, CompletionError> {
        let spec = Self {
            train_tasks,
            test_tasks,
            regime,
            seed_size: DEFAULT_SEED_SIZE,
            repeats: DEFAULT_REPEATS,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_sizes(mut self, seed_size: usize, repeats: usize) -> Result<Self, CompletionError> {
        self.seed_size = seed_size;
        self.repeats = repeats;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), CompletionError> {
        if self.train_tasks.is_empty() || self.test_tasks.is_empty() {
            return Err(CompletionError::EmptySplit);
        }
        if self.repeats == 0 {
            return Err(CompletionError::ZeroRepeats);
        }
        if self.seed_size == 0 {
            return Err(CompletionError::EmptySeed);
        }
        let train: std::collections::HashSet<&str> =
            self.train_tasks.iter().map(String::as_str).collect();
        for t in &self.test_tasks {
            if train.contains(t.as_str()) {
                return Err(CompletionError::OverlappingSplit(t.clone()));
            }
        }
        Ok(())
    }
}

/// Fixed feature vectors (e.g. frozen text embeddings) keyed by id.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Array2<f64>,
}

impl FeatureTable {
    pub fn new(ids: Vec<String>, vectors: Array2<f64>) -> Result<Self, CompletionError> {
        if ids.is_empty() || vectors.ncols() == 0 {
            return Err(CompletionError::EmptyFeatures);
        }
        if ids.len() != vectors.nrows() {
            return Err(CompletionError::FeatureDimMismatch {
                left: ids.len(),
                right: vectors.nrows(),
            });
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(CompletionError::DuplicateFeatureId(id.clone()));
            }
            if vectors.row(i).iter().any(|v| !v.is_finite()) {
                return Err(CompletionError::NonFiniteFeature(id.clone()));
            }
        }
        Ok(Self {
            ids,
            index,
            vectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<ArrayView1<'_, f64>> {
        self.index.get(id).map(|&i| self.vectors.row(i))
    }

    /// Rows for the given ids, in order; errors on any missing id.
    pub fn gather(&self, ids: &[String]) -> Result<Array2<f64>, CompletionError> {
        let mut out = Array2::zeros((ids.len(), self.dim()));
        for (row, id) in ids.iter().enumerate() {
            let v = self
                .get(id)
                .ok_or_else(|| CompletionError::MissingFeature(id.clone()))?;
            out.row_mut(row).assign(&v);
        }
        Ok(out)
    }

    /// Builds per-task features as the mean of each task's example features.
    pub fn mean_per_group(
        &self,
        groups: &[(String, Vec<String>)],
    ) -> Result<FeatureTable, CompletionError> {
        let mut vectors = Array2::zeros((groups.len(), self.dim()));
        let mut ids = Vec::with_capacity(groups.len());
        for (row, (group_id, members)) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(CompletionError::EmptyFeatures);
            }
            let mut acc = Array1::<f64>::zeros(self.dim());
            for member in members {
                let v = self
                    .get(member)
                    .ok_or_else(|| CompletionError::MissingFeature(member.clone()))?;
                acc += &v;
            }
            acc /= members.len() as f64;
            vectors.row_mut(row).assign(&acc);
            ids.push(group_id.clone());
        }
        FeatureTable::new(ids, vectors)
    }

    /// Reads rows of the form `id,v1,...,vd` (no header).
    pub fn read_csv(path: &Path) -> Result<Self, CompletionError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(BufReader::new(File::open(path)?));
        let mut ids = Vec::new();
        let mut rows: Vec<f64> = Vec::new();
        let mut dim: Option<usize> = None;
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() < 2 {
                return Err(CompletionError::EmptyFeatures);
            }
            let d = rec.len() - 1;
            match dim {
                None => dim = Some(d),
                Some(expected) if expected != d => {
                    return Err(CompletionError::FeatureDimMismatch {
                        left: expected,
                        right: d,
                    })
                }
                _ => {}
            }
            ids.push(rec[0].to_string());
            for cell in rec.iter().skip(1) {
                rows.push(cell.trim().parse::<f64>().map_err(|_| {
                    CompletionError::NonFiniteFeature(rec[0].to_string())
                })?);
            }
        }
        let d = dim.ok_or(CompletionError::EmptyFeatures)?;
        let vectors = Array2::from_shape_vec((ids.len(), d), rows)
            .expect("row widths validated above");
        FeatureTable::new(ids, vectors)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), CompletionError> {
        let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        for (i, id) in self.ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(self.vectors.row(i).iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Task effect + example effect: fit example biases on the measured rows,
/// estimate the new task's bias from the seed, and predict their sum.
pub fn predict_additive(
    train: &AssociationMatrix,
    seed: &SeedSet,
) -> Result<Vec<f64>, CompletionError> {
    seed.check_bounds(train.num_examples())?;
    let model = fit_additive(train)?;
    let beta = model
        .example_bias()
        .expect("additive fit always produces example biases");
    predict_additive_with_bias(beta, seed)
}

fn predict_additive_with_bias(
    beta: &Array1<f64>,
    seed: &SeedSet,
) -> Result<Vec<f64>, CompletionError> {
    let alpha = seed
        .example_indices
        .iter()
        .zip(&seed.values)
        .map(|(&j, &z)| z - beta[j])
        .sum::<f64>()
        / seed.len() as f64;
    let mut row: Vec<f64> = beta.iter().map(|&b| alpha + b).collect();
    seed.overwrite(&mut row);
    Ok(row)
}

/// Diagnostics from one similarity-weighted prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnnReport {
    /// Similarity of every train row to the seed, in row order (duplicates
    /// of an earlier row still get their similarity reported here).
    pub similarities: Vec<f64>,
    /// Seed values had zero variance; similarities fell back to the
    /// uncentered cosine.
    pub cosine_fallback: bool,
    /// No neighbour had positive similarity; the top-k rows were averaged
    /// without weights.
    pub unweighted_fallback: bool,
}

/// Similarity-weighted average of the `k` most similar measured rows, with
/// similarity = Pearson correlation on the seed columns.
pub fn predict_knn(
    train: &AssociationMatrix,
    seed: &SeedSet,
    k: usize,
) -> Result<Vec<f64>, CompletionError> {
    predict_knn_with_options(train, seed, k, false).map(|(row, _)| row)
}

pub fn predict_knn_detailed(
    train: &AssociationMatrix,
    seed: &SeedSet,
    k: usize,
) -> Result<(Vec<f64>, KnnReport), CompletionError> {
    predict_knn_with_options(train, seed, k, false)
}

/// Like [`predict_knn`]; `rank_correlation` switches the similarity from
/// Pearson on raw seed values to Spearman on their ranks.
pub fn predict_knn_with_options(
    train: &AssociationMatrix,
    seed: &SeedSet,
    k: usize,
    rank_correlation: bool,
) -> Result<(Vec<f64>, KnnReport), CompletionError> {
    if k == 0 {
        return Err(CompletionError::ZeroK);
    }
    seed.check_bounds(train.num_examples())?;
    let n = train.num_examples();
    let mt = train.num_tasks();
    let s = &seed.values;
    let seed_mean = s.iter().sum::<f64>() / s.len() as f64;
    let seed_var: f64 = s.iter().map(|&v| (v - seed_mean) * (v - seed_mean)).sum();
    let cosine_fallback = seed_var == 0.0;
    let seed_norm: f64 = s.iter().map(|&v| v * v).sum::<f64>().sqrt();

    let mut similarities = Vec::with_capacity(mt);
    for i in 0..mt {
        let row_at_seed: Vec<f64> = seed
            .example_indices
            .iter()
            .map(|&j| train.values()[(i, j)])
            .collect();
        let sim = if cosine_fallback {
            let row_norm: f64 = row_at_seed.iter().map(|&v| v * v).sum::<f64>().sqrt();
            if seed_norm == 0.0 || row_norm == 0.0 {
                0.0
            } else {
                row_at_seed.iter().zip(s).map(|(&a, &b)| a * b).sum::<f64>()
                    / (seed_norm * row_norm)
            }
        } else if rank_correlation {
            crate::stats::spearman(&row_at_seed, s).unwrap_or(0.0)
        } else {
            crate::stats::pearson(&row_at_seed, s).unwrap_or(0.0)
        };
        similarities.push(sim);
    }

    // Collapse exactly-identical rows to one representative so duplicated
    // measurements cannot crowd the neighbour list: the prediction must be
    // invariant to duplicating a train row.
    let mut seen = std::collections::HashSet::new();
    let mut representatives = Vec::with_capacity(mt);
    for i in 0..mt {
        let mut key: Vec<u64> = train.row(i).iter().map(|v| v.to_bits()).collect();
        key.extend(train.observed().row(i).iter().map(|&o| u64::from(o)));
        if seen.insert(key) {
            representatives.push(i);
        }
    }

    // Top-k representatives by similarity; ties break toward the smaller
    // Euclidean distance on the seed columns (Pearson on short seeds cannot
    // separate a duplicate of the new row from merely co-monotone rows),
    // then toward the lower row index.
    let seed_distance = |i: usize| -> f64 {
        seed.example_indices
            .iter()
            .zip(s)
            .map(|(&j, &v)| {
                let d = train.values()[(i, j)] - v;
                d * d
            })
            .sum::<f64>()
    };
    let mut order = representatives;
    order.sort_by(|&a, &b| {
        similarities[b]
            .partial_cmp(&similarities[a])
            .expect("similarities are finite")
            .then_with(|| {
                seed_distance(a)
                    .partial_cmp(&seed_distance(b))
                    .expect("distances are finite")
            })
            .then(a.cmp(&b))
    });
    let top: Vec<usize> = order.into_iter().take(k).collect();
    let weight_sum: f64 = top.iter().map(|&i| similarities[i].max(0.0)).sum();
    let unweighted_fallback = weight_sum <= 0.0;

    let mut row = vec![0.0; n];
    if unweighted_fallback {
        for &i in &top {
            for (dst, &v) in row.iter_mut().zip(train.row(i)) {
                *dst += v / top.len() as f64;
            }
        }
    } else {
        for &i in &top {
            let w = similarities[i].max(0.0) / weight_sum;
            if w == 0.0 {
                continue;
            }
            for (dst, &v) in row.iter_mut().zip(train.row(i)) {
                *dst += w * v;
            }
        }
    }
    seed.overwrite(&mut row);
    Ok((
        row,
        KnnReport {
            similarities,
            cosine_fallback,
            unweighted_fallback,
        },
    ))
}

/// Example factors fitted on the measured rows, ready to fold new tasks in.
#[derive(Debug, Clone)]
struct FoldInBasis {
    /// N×r example factors.
    basis: Array2<f64>,
    logistic: bool,
}

impl FoldInBasis {
    fn fit(
        train: &AssociationMatrix,
        rank: usize,
        cfg: &FitConfig,
    ) -> Result<Self, CompletionError> {
        if rank == 0 {
            return Err(CompletionError::ZeroRank);
        }
        let logistic = train.kind() == MatrixKind::Binary;
        let model = if !logistic && train.is_fully_observed() {
            fit_svd(train, rank.min(train.num_tasks().min(train.num_examples())))?
        } else {
            // The fold-in solves for factors only, so the basis fit must not
            // train bias terms.
            let cfg = FitConfig {
                use_bias: false,
                ..cfg.clone()
            };
            fit_gd(train, rank, &cfg)?.0
        };
        Ok(Self {
            basis: model.example_factors().clone(),
            logistic,
        })
    }

    /// Ridge least squares (identity link) or ridge-regularized Newton
    /// iterations (logistic link) for the new task's factor vector.
    fn solve_alpha(&self, seed: &SeedSet, ridge: f64) -> Result<Array1<f64>, CompletionError> {
        let r = self.basis.ncols();
        let bs = {
            let mut bs = Array2::zeros((seed.len(), r));
            for (row, &j) in seed.example_indices.iter().enumerate() {
                bs.row_mut(row).assign(&self.basis.row(j));
            }
            bs
        };
        let z = Array1::from_vec(seed.values.clone());
        if !self.logistic {
            let mut normal = bs.t().dot(&bs);
            for d in 0..r {
                normal[(d, d)] += ridge;
            }
            let rhs = bs.t().dot(&z);
            return normal
                .solve_into(rhs)
                .map_err(|e| CompletionError::Solve(e.to_string()));
        }
        // Newton iterations on the ridge-regularized logistic objective.
        let mut alpha = Array1::<f64>::zeros(r);
        for _ in 0..100 {
            let u = bs.dot(&alpha);
            let p = u.mapv(|v| 1.0 / (1.0 + (-v).exp()));
            let grad = bs.t().dot(&(&p - &z)) + &(2.0 * ridge * &alpha);
            let w = &p * &(1.0 - &p);
            let mut hess = Array2::zeros((r, r));
            for (row, &wi) in w.iter().enumerate() {
                let b = bs.row(row);
                for a in 0..r {
                    for c in 0..r {
                        hess[(a, c)] += wi * b[a] * b[c];
                    }
                }
            }
            for d in 0..r {
                hess[(d, d)] += 2.0 * ridge;
            }
            let step = hess
                .solve_into(grad)
                .map_err(|e| CompletionError::Solve(e.to_string()))?;
            let step_norm = step.iter().map(|v| v * v).sum::<f64>().sqrt();
            alpha -= &step;
            if !alpha.iter().all(|v| v.is_finite()) {
                return Err(CompletionError::Solve(
                    "logistic fold-in diverged".to_string(),
                ));
            }
            if step_norm < 1e-8 {
                break;
            }
        }
        Ok(alpha)
    }

    fn predict(&self, alpha: &Array1<f64>) -> Vec<f64> {
        let mut row = self.basis.dot(alpha);
        if self.logistic {
            row.mapv_inplace(|u| 1.0 / (1.0 + (-u).exp()));
        }
        row.to_vec()
    }
}

/// Folds a new task into a low-rank factorization of the measured rows:
/// example factors stay fixed and the new task factor is solved from the
/// seed entries by ridge least squares (λ = 1e-3), or Newton iterations for
/// binary matrices.
pub fn predict_mf(
    train: &AssociationMatrix,
    seed: &SeedSet,
    rank: usize,
) -> Result<Vec<f64>, CompletionError> {
    predict_mf_with_options(train, seed, rank, DEFAULT_RIDGE, &FitConfig::default())
}

pub fn predict_mf_with_options(
    train: &AssociationMatrix,
    seed: &SeedSet,
    rank: usize,
    ridge: f64,
    cfg: &FitConfig,
) -> Result<Vec<f64>, CompletionError> {
    seed.check_bounds(train.num_examples())?;
    if seed.len() < rank {
        log::warn!(
            "seed size {} below rank {}; fold-in is under-determined (ridge keeps it solvable)",
            seed.len(),
            rank
        );
    }
    let basis = FoldInBasis::fit(train, rank, cfg)?;
    let alpha = basis.solve_alpha(seed, ridge)?;
    let mut row = basis.predict(&alpha);
    seed.overwrite(&mut row);
    Ok(row)
}

/// Hyperparameters of the two-tower feature regressor.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureModelConfig {
    pub hidden: usize,
    /// Shared output dimension of both towers; default min(task dim, example dim).
    pub output_dim: Option<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FeatureModelConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            output_dim: None,
            epochs: 2000,
            learning_rate: 1e-2,
            seed: 0,
        }
    }
}

/// One dense tower: linear → ReLU → linear.
#[derive(Debug, Clone)]
struct Tower {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

impl Tower {
    /// `zero_output` zero-initializes the second layer so the tower starts
    /// as the exact zero function (used for one tower so the whole model's
    /// initial prediction is zero everywhere, including off the train grid).
    fn new(
        input: usize,
        hidden: usize,
        output: usize,
        zero_output: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let he = |fan_in: usize, rng: &mut ChaCha12Rng, rows: usize, cols: usize| {
            let std = (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("positive std");
            Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
        };
        Self {
            w1: he(input, rng, input, hidden),
            b1: Array1::zeros(hidden),
            w2: if zero_output {
                Array2::zeros((hidden, output))
            } else {
                he(hidden, rng, hidden, output)
            },
            b2: Array1::zeros(output),
        }
    }

    /// Returns (hidden pre-activation, hidden activation, output).
    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let pre = x.dot(&self.w1) + &self.b1;
        let act = pre.mapv(|v| v.max(0.0));
        let out = act.dot(&self.w2) + &self.b2;
        (pre, act, out)
    }

}

/// Adam state for one parameter tensor.
#[derive(Debug, Clone)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, t: usize) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let t = t as i32;
        let bias1 = 1.0 - B1.powi(t);
        let bias2 = 1.0 - B2.powi(t);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = B1 * *m + (1.0 - B1) * g;
            *v = B2 * *v + (1.0 - B2) * g * g;
            let mhat = *m / bias1;
            let vhat = *v / bias2;
            *p -= lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}

/// Two-tower regressor: forgetting ≈ ⟨task tower(t_i), example tower(e_j)⟩.
#[derive(Debug, Clone)]
pub struct FeatureModel {
    task_tower: Tower,
    example_tower: Tower,
    train_r2: f64,
}

impl FeatureModel {
    /// Trains on the observed entries of `targets` (an M×N grid aligned with
    /// the rows of `task_vecs` and `example_vecs`).
    fn train(
        targets: &Array2<f64>,
        mask: Option<&Array2<bool>>,
        task_vecs: &Array2<f64>,
        example_vecs: &Array2<f64>,
        cfg: &FeatureModelConfig,
    ) -> Result<Self, CompletionError> {
        let d_task = task_vecs.ncols();
        let d_example = example_vecs.ncols();
        let out_dim = cfg.output_dim.unwrap_or(d_task.min(d_example)).max(1);
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let mut task_tower = Tower::new(d_task, cfg.hidden, out_dim, true, &mut rng);
        let mut example_tower = Tower::new(d_example, cfg.hidden, out_dim, false, &mut rng);

        let n_obs = match mask {
            Some(m) => m.iter().filter(|&&o| o).count(),
            None => targets.len(),
        } as f64;
        let mask_f = mask.map(|m| m.mapv(|o| f64::from(o)));

        let mut adam: Vec<AdamState> = [
            task_tower.w1.len(),
            task_tower.b1.len(),
            task_tower.w2.len(),
            task_tower.b2.len(),
            example_tower.w1.len(),
            example_tower.b1.len(),
            example_tower.w2.len(),
            example_tower.b2.len(),
        ]
        .iter()
        .map(|&l| AdamState::new(l))
        .collect();

        let mut last_sse = f64::INFINITY;
        for epoch in 1..=cfg.epochs {
            let (pre_t, act_t, a) = task_tower.forward(task_vecs);
            let (pre_e, act_e, b) = example_tower.forward(example_vecs);
            let mut err = a.dot(&b.t()) - targets;
            if let Some(mf) = &mask_f {
                err *= mf;
            }
            last_sse = err.iter().map(|v| v * v).sum::<f64>();
            if !last_sse.is_finite() {
                return Err(CompletionError::TrainingDiverged(epoch));
            }
            // At the floating-point floor the normalized optimizer would only
            // random-walk around the minimum; stop instead.
            if last_sse / n_obs <= 1e-24 {
                break;
            }
            let scale = 2.0 / n_obs;
            // d loss / d a = scale · err · B, and symmetrically for b.
            let ga = err.dot(&b).mapv(|v| v * scale);
            let gb = err.t().dot(&a).mapv(|v| v * scale);

            let backprop = |tower: &Tower,
                            x: &Array2<f64>,
                            pre: &Array2<f64>,
                            act: &Array2<f64>,
                            gout: &Array2<f64>| {
                let gw2 = act.t().dot(gout);
                let gb2 = gout.sum_axis(Axis(0));
                let mut ghid = gout.dot(&tower.w2.t());
                ghid.zip_mut_with(pre, |g, &p| {
                    if p <= 0.0 {
                        *g = 0.0;
                    }
                });
                let gw1 = x.t().dot(&ghid);
                let gb1 = ghid.sum_axis(Axis(0));
                (gw1, gb1, gw2, gb2)
            };
            let (gw1_t, gb1_t, gw2_t, gb2_t) =
                backprop(&task_tower, task_vecs, &pre_t, &act_t, &ga);
            let (gw1_e, gb1_e, gw2_e, gb2_e) =
                backprop(&example_tower, example_vecs, &pre_e, &act_e, &gb);

            // Linear decay to zero: the optimizer's constant-size steps would
            // otherwise hover around the optimum instead of settling on it.
            let lr = cfg.learning_rate * (1.0 - (epoch - 1) as f64 / cfg.epochs as f64);
            adam[0].update(
                task_tower.w1.as_slice_mut().expect("standard layout"),
                gw1_t.as_slice().expect("standard layout"),
                lr,
                epoch,
            );
            adam[1].update(
                task_tower.b1.as_slice_mut().expect("standard layout"),
                gb1_t.as_slice().expect("standard layout"),
                lr,
                epoch,
            );
            adam[2].update(
                task_tower.w2.as_slice_mut().expect("standard layout"),
                gw2_t.as_slice().expect("standard layout"),
                lr,
                epoch,
            );
            adam[3].update(
                task_tower.b2.as_slice_mut().expect("standard layout"),
                gb2_t.as_slice().expect("standard layout"),
                lr,
                epoch,
            );
            adam[4].update(
                example_tower.w1.as_slice_mut().expect("standard layout"),
                gw1_e.as_slice().expect("standard layout"),
                lr,
                epoch,
            );
            adam[5].update(
                example_tower.b1.as_slice_mut().expect("standard layout"),
                gb1_e.as_slice().expect("standard layout"),
                lr,
                epoch,
            );
            adam[6].update(
                example_tower.w2.as_slice_mut().expect("standard layout"),
                gw2_e.as_slice().expect("standard layout"),
                lr,
                epoch,
            );
            adam[7].update(
                example_tower.b2.as_slice_mut().expect("standard layout"),
                gb2_e.as_slice().expect("standard layout"),
                lr,
                epoch,
            );
        }

        // Training R² against the observed-mean baseline, for diagnostics.
        let ss_tot = {
            let mut sum = 0.0;
            let mut count = 0.0;
            for ((i, j), &z) in targets.indexed_iter() {
                if mask.map_or(true, |m| m[(i, j)]) {
                    sum += z;
                    count += 1.0;
                }
            }
            let mean = sum / count;
            let mut ss = 0.0;
            for ((i, j), &z) in targets.indexed_iter() {
                if mask.map_or(true, |m| m[(i, j)]) {
                    ss += (z - mean) * (z - mean);
                }
            }
            ss
        };
        let train_r2 = if ss_tot > 0.0 {
            1.0 - last_sse / ss_tot
        } else {
            f64::NAN
        };

        Ok(Self {
            task_tower,
            example_tower,
            train_r2,
        })
    }

    /// R² on the training entries after the final epoch.
    pub fn train_r2(&self) -> f64 {
        self.train_r2
    }

    /// Predicted row for one task feature vector against a bank of example
    /// vectors.
    fn predict_row(&self, task_vec: ArrayView1<'_, f64>, example_vecs: &Array2<f64>) -> Vec<f64> {
        let t = task_vec.insert_axis(Axis(0)).to_owned();
        let (_, _, a) = self.task_tower.forward(&t);
        let (_, _, b) = self.example_tower.forward(example_vecs);
        b.dot(&a.row(0)).to_vec()
    }
}

fn align_features(
    train: &AssociationMatrix,
    task_feats: &FeatureTable,
    example_feats: &FeatureTable,
) -> Result<(Array2<f64>, Array2<f64>), CompletionError> {
    let task_vecs = task_feats.gather(train.task_ids())?;
    let example_vecs = example_feats.gather(train.example_ids())?;
    Ok((task_vecs, example_vecs))
}

/// Trains the two-tower feature regressor on the measured rows and predicts
/// the new task's full row from its feature vector alone (no seed needed).
pub fn predict_features(
    train: &AssociationMatrix,
    task_feats: &FeatureTable,
    example_feats: &FeatureTable,
    new_task_id: &str,
) -> Result<Vec<f64>, CompletionError> {
    predict_features_with_config(
        train,
        task_feats,
        example_feats,
        new_task_id,
        &FeatureModelConfig::default(),
    )
}

pub fn predict_features_with_config(
    train: &AssociationMatrix,
    task_feats: &FeatureTable,
    example_feats: &FeatureTable,
    new_task_id: &str,
    cfg: &FeatureModelConfig,
) -> Result<Vec<f64>, CompletionError> {
    let model = train_feature_model(train, task_feats, example_feats, cfg)?;
    let new_vec = task_feats
        .get(new_task_id)
        .ok_or_else(|| CompletionError::MissingFeature(new_task_id.to_string()))?;
    let example_vecs = example_feats.gather(train.example_ids())?;
    Ok(model.predict_row(new_vec, &example_vecs))
}

/// Trains the feature regressor on a train matrix (exposed so callers can
/// reuse one trained model across many new tasks).
pub fn train_feature_model(
    train: &AssociationMatrix,
    task_feats: &FeatureTable,
    example_feats: &FeatureTable,
    cfg: &FeatureModelConfig,
) -> Result<FeatureModel, CompletionError> {
    let (task_vecs, example_vecs) = align_features(train, task_feats, example_feats)?;
    let mask = (!train.is_fully_observed()).then(|| train.observed().to_owned());
    FeatureModel::train(
        &train.values().to_owned(),
        mask.as_ref(),
        &task_vecs,
        &example_vecs,
        cfg,
    )
}

/// Train-grid predictions of the factorization backing the MF fold-in
/// (factors only, matching [`FoldInBasis`]).
fn mf_train_grid(
    train: &AssociationMatrix,
    rank: usize,
    cfg: &FitConfig,
) -> Result<Array2<f64>, CompletionError> {
    let model = if train.kind() == MatrixKind::Continuous && train.is_fully_observed() {
        fit_svd(train, rank.min(train.num_tasks().min(train.num_examples())))?
    } else {
        let cfg = FitConfig {
            use_bias: false,
            ..cfg.clone()
        };
        fit_gd(train, rank, &cfg)?.0
    };
    Ok(model.predict())
}

/// Which seed-based predictor anchors a residual combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualBase {
    Additive,
    Mf,
}

/// Seed-based base predictor plus a feature model trained on the base's
/// training residuals.
pub fn predict_residual(
    train: &AssociationMatrix,
    seed: &SeedSet,
    task_feats: &FeatureTable,
    example_feats: &FeatureTable,
    new_task_id: &str,
    base: ResidualBase,
) -> Result<Vec<f64>, CompletionError> {
    predict_residual_with_options(
        train,
        seed,
        task_feats,
        example_feats,
        new_task_id,
        base,
        DEFAULT_RANK,
        DEFAULT_RIDGE,
        &FitConfig::default(),
        &FeatureModelConfig::default(),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn predict_residual_with_options(
    train: &AssociationMatrix,
    seed: &SeedSet,
    task_feats: &FeatureTable,
    example_feats: &FeatureTable,
    new_task_id: &str,
    base: ResidualBase,
    rank: usize,
    ridge: f64,
    fit_cfg: &FitConfig,
    feature_cfg: &FeatureModelConfig,
) -> Result<Vec<f64>, CompletionError> {
    seed.check_bounds(train.num_examples())?;
    // Base predictions for the new row and for the train grid.
    let (base_row, train_pred): (Vec<f64>, Array2<f64>) = match base {
        ResidualBase::Additive => {
            let model = fit_additive(train)?;
            let beta = model.example_bias().expect("additive fit sets biases");
            let row = predict_additive_with_bias(beta, seed)?;
            (row, model.predict())
        }
        ResidualBase::Mf => {
            let basis = FoldInBasis::fit(train, rank, fit_cfg)?;
            let alpha = basis.solve_alpha(seed, ridge)?;
            let row = basis.predict(&alpha);
            (row, mf_train_grid(train, rank, fit_cfg)?)
        }
    };
    let residuals = &train.values().to_owned() - &train_pred;
    let (task_vecs, example_vecs) = align_features(train, task_feats, example_feats)?;
    let mask = (!train.is_fully_observed()).then(|| train.observed().to_owned());
    let model = FeatureModel::train(
        &residuals,
        mask.as_ref(),
        &task_vecs,
        &example_vecs,
        feature_cfg,
    )?;
    let new_vec = task_feats
        .get(new_task_id)
        .ok_or_else(|| CompletionError::MissingFeature(new_task_id.to_string()))?;
    let residual_row = model.predict_row(new_vec, &example_vecs);
    let mut row: Vec<f64> = base_row
        .iter()
        .zip(&residual_row)
        .map(|(&b, &r)| b + r)
        .collect();
    seed.overwrite(&mut row);
    Ok(row)
}

/// Which predictor the evaluation protocol should exercise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum ProtocolMethod {
    Additive,
    Knn { k: usize },
    Mf { rank: usize, ridge: f64 },
    Features,
    Residual { base: ResidualBase, rank: usize, ridge: f64 },
}

impl ProtocolMethod {
    pub fn name(&self) -> String {
        match self {
            ProtocolMethod::Additive => "additive".to_string(),
            ProtocolMethod::Knn { k } => format!("knn(k={k})"),
            ProtocolMethod::Mf { rank, ridge } => format!("mf(rank={rank}, ridge={ridge})"),
            ProtocolMethod::Features => "features".to_string(),
            ProtocolMethod::Residual { base, rank, .. } => format!(
                "residual({}+features, rank={rank})",
                match base {
                    ResidualBase::Additive => "additive",
                    ResidualBase::Mf => "mf",
                }
            ),
        }
    }
}

/// Shared hyperparameters for the protocol run.
#[derive(Debug, Clone, Default)]
pub struct EvalConfig {
    pub master_seed: u64,
    pub fit: FitConfig,
    pub features: FeatureModelConfig,
    pub task_features: Option<FeatureTable>,
    pub example_features: Option<FeatureTable>,
}

/// Scores of one test task across repeated seed draws.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskScore {
    pub task_id: String,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

/// What the protocol's score column means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMetric {
    /// Root mean squared error over non-seed columns, multiplied by 100.
    RmseTimes100,
    /// F1 of the "forgotten" class at threshold 0.5 over non-seed columns.
    F1,
}

/// Results of one protocol run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub metric: ScoreMetric,
    /// True when scores are RMSE values scaled by 100.
    pub rmse_scaled_by_100: bool,
    pub seed_size: usize,
    pub repeats: usize,
    pub master_seed: u64,
    pub per_task: Vec<TaskScore>,
    /// Mean of the per-task mean scores.
    pub mean: f64,
    /// Sample standard deviation of the per-task mean scores.
    pub sd: f64,
}

impl EvalReport {
    /// Grand list of all (task, repeat) scores in task-major order.
    pub fn all_scores(&self) -> Vec<f64> {
        self.per_task
            .iter()
            .flat_map(|t| t.scores.iter().copied())
            .collect()
    }

    /// CSV: one row per task (mean, sd, then each repeat), plus a summary row.
    pub fn write_csv(&self, path: &Path) -> Result<(), CompletionError> {
        let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        let mut header = vec!["task_id".to_string(), "mean".to_string(), "sd".to_string()];
        header.extend((0..self.repeats).map(|r| format!("repeat_{r}")));
        wtr.write_record(&header)?;
        for task in &self.per_task {
            let mut rec = vec![
                task.task_id.clone(),
                task.mean.to_string(),
                task.sd.to_string(),
            ];
            rec.extend(task.scores.iter().map(|s| s.to_string()));
            wtr.write_record(&rec)?;
        }
        let mut summary = vec![
            "overall".to_string(),
            self.mean.to_string(),
            self.sd.to_string(),
        ];
        summary.extend(std::iter::repeat(String::new()).take(self.repeats));
        wtr.write_record(&summary)?;
        wtr.flush()?;
        Ok(())
    }

    pub fn write_metadata_json(&self, path: &Path) -> Result<(), CompletionError> {
        let file = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// RMSE (×100) or F1 between prediction and truth, seed columns excluded.
pub fn score_row(
    truth: ArrayView1<'_, f64>,
    prediction: &[f64],
    seed_columns: &[usize],
    kind: MatrixKind,
) -> f64 {
    let seed_set: std::collections::HashSet<usize> = seed_columns.iter().copied().collect();
    match kind {
        MatrixKind::Continuous => {
            let mut sse = 0.0;
            let mut count = 0.0;
            for (j, (&z, &p)) in truth.iter().zip(prediction).enumerate() {
                if !seed_set.contains(&j) {
                    sse += (z - p) * (z - p);
                    count += 1.0;
                }
            }
            (sse / count).sqrt() * 100.0
        }
        MatrixKind::Binary => {
            let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
            for (j, (&z, &p)) in truth.iter().zip(prediction).enumerate() {
                if seed_set.contains(&j) {
                    continue;
                }
                let predicted = p >= 0.5;
                let actual = z == 1.0;
                match (predicted, actual) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        }
    }
}

/// Predictor state trained once on the train rows and reused across every
/// (test task, repeat) pair.
enum TrainedPredictor {
    Additive {
        beta: Array1<f64>,
    },
    Knn {
        k: usize,
    },
    Mf {
        basis: FoldInBasis,
        ridge: f64,
    },
    Features {
        model: FeatureModel,
        example_vecs: Array2<f64>,
    },
    Residual {
        base: Box<TrainedPredictor>,
        model: FeatureModel,
        example_vecs: Array2<f64>,
    },
}

impl TrainedPredictor {
    fn predict(
        &self,
        train: &AssociationMatrix,
        seed: &SeedSet,
        task_features: Option<&FeatureTable>,
        test_task_id: &str,
    ) -> Result<Vec<f64>, CompletionError> {
        match self {
            TrainedPredictor::Additive { beta } => predict_additive_with_bias(beta, seed),
            TrainedPredictor::Knn { k } => predict_knn(train, seed, *k),
            TrainedPredictor::Mf { basis, ridge } => {
                let alpha = basis.solve_alpha(seed, *ridge)?;
                let mut row = basis.predict(&alpha);
                seed.overwrite(&mut row);
                Ok(row)
            }
            TrainedPredictor::Features { model, example_vecs } => {
                let feats = task_features.ok_or_else(|| {
                    CompletionError::MissingFeature("task features".to_string())
                })?;
                let vec = feats
                    .get(test_task_id)
                    .ok_or_else(|| CompletionError::MissingFeature(test_task_id.to_string()))?;
                Ok(model.predict_row(vec, example_vecs))
            }
            TrainedPredictor::Residual {
                base,
                model,
                example_vecs,
            } => {
                let base_row = base.predict(train, seed, task_features, test_task_id)?;
                let feats = task_features.ok_or_else(|| {
                    CompletionError::MissingFeature("task features".to_string())
                })?;
                let vec = feats
                    .get(test_task_id)
                    .ok_or_else(|| CompletionError::MissingFeature(test_task_id.to_string()))?;
                let residual_row = model.predict_row(vec, example_vecs);
                let mut row: Vec<f64> = base_row
                    .iter()
                    .zip(&residual_row)
                    .map(|(&b, &r)| b + r)
                    .collect();
                seed.overwrite(&mut row);
                Ok(row)
            }
        }
    }
}

fn train_predictor(
    train: &AssociationMatrix,
    method: &ProtocolMethod,
    cfg: &EvalConfig,
) -> Result<TrainedPredictor, CompletionError> {
    let features = |cfg: &EvalConfig| -> Result<(FeatureModel, Array2<f64>), CompletionError> {
        let task_feats = cfg
            .task_features
            .as_ref()
            .ok_or_else(|| CompletionError::MissingFeature("task features".to_string()))?;
        let example_feats = cfg
            .example_features
            .as_ref()
            .ok_or_else(|| CompletionError::MissingFeature("example features".to_string()))?;
        let model = train_feature_model(train, task_feats, example_feats, &cfg.features)?;
        let example_vecs = example_feats.gather(train.example_ids())?;
        Ok((model, example_vecs))
    };
    Ok(match method {
        ProtocolMethod::Additive => {
            let model = fit_additive(train)?;
            TrainedPredictor::Additive {
                beta: model
                    .example_bias()
                    .expect("additive fit sets biases")
                    .clone(),
            }
        }
        ProtocolMethod::Knn { k } => {
            if *k == 0 {
                return Err(CompletionError::ZeroK);
            }
            TrainedPredictor::Knn { k: *k }
        }
        ProtocolMethod::Mf { rank, ridge } => TrainedPredictor::Mf {
            basis: FoldInBasis::fit(train, *rank, &cfg.fit)?,
            ridge: *ridge,
        },
        ProtocolMethod::Features => {
            let (model, example_vecs) = features(cfg)?;
            TrainedPredictor::Features { model, example_vecs }
        }
        ProtocolMethod::Residual { base, rank, ridge } => {
            let base_pred = match base {
                ResidualBase::Additive => {
                    train_predictor(train, &ProtocolMethod::Additive, cfg)?
                }
                ResidualBase::Mf => train_predictor(
                    train,
                    &ProtocolMethod::Mf {
                        rank: *rank,
                        ridge: *ridge,
                    },
                    cfg,
                )?,
            };
            // Residual targets: train values minus the base model's train
            // predictions.
            let train_pred = match base {
                ResidualBase::Additive => fit_additive(train)?.predict(),
                ResidualBase::Mf => mf_train_grid(train, *rank, &cfg.fit)?,
            };
            let residuals = &train.values().to_owned() - &train_pred;
            let task_feats = cfg
                .task_features
                .as_ref()
                .ok_or_else(|| CompletionError::MissingFeature("task features".to_string()))?;
            let example_feats = cfg
                .example_features
                .as_ref()
                .ok_or_else(|| CompletionError::MissingFeature("example features".to_string()))?;
            let (task_vecs, example_vecs) = align_features(train, task_feats, example_feats)?;
            let mask = (!train.is_fully_observed()).then(|| train.observed().to_owned());
            let model = FeatureModel::train(
                &residuals,
                mask.as_ref(),
                &task_vecs,
                &example_vecs,
                &cfg.features,
            )?;
            TrainedPredictor::Residual {
                base: Box::new(base_pred),
                model,
                example_vecs,
            }
        }
    })
}

/// Runs the seeded prediction protocol: for every test task and every
/// repeat, draw `seed_size` columns uniformly without replacement (streams
/// derived from the master seed), predict the rest of the row, and score it
/// with seed columns excluded. Identical inputs and master seed reproduce
/// the report bit-for-bit.
pub fn evaluate_protocol(
    m: &AssociationMatrix,
    split: &SplitSpec,
    method: &ProtocolMethod,
    cfg: &EvalConfig,
) -> Result<EvalReport, CompletionError> {
    split.validate()?;
    if split.seed_size >= m.num_examples() {
        return Err(CompletionError::SeedTooLarge {
            seed_size: split.seed_size,
            n: m.num_examples(),
        });
    }
    let resolve = |ids: &[String]| -> Result<Vec<usize>, CompletionError> {
        ids.iter()
            .map(|id| {
                m.task_index(id)
                    .ok_or_else(|| CompletionError::UnknownTask(id.clone()))
            })
            .collect()
    };
    let train_indices = resolve(&split.train_tasks)?;
    let test_indices = resolve(&split.test_tasks)?;
    let train = m.select_tasks(&train_indices)?;
    let predictor = train_predictor(&train, method, cfg)?;

    let pairs: Vec<(usize, usize)> = (0..test_indices.len())
        .flat_map(|t| (0..split.repeats).map(move |r| (t, r)))
        .collect();
    let scores: Vec<((usize, usize), f64)> = pairs
        .par_iter()
        .map(|&(t, rep)| {
            let row_idx = test_indices[t];
            let truth = m.row(row_idx);
            let mut rng = ChaCha12Rng::seed_from_u64(cfg.master_seed);
            rng.set_stream((t * split.repeats + rep) as u64);
            let mut columns =
                rand::seq::index::sample(&mut rng, m.num_examples(), split.seed_size)
                    .into_vec();
            columns.sort_unstable();
            let seed = SeedSet::from_row(truth, &columns)?;
            let prediction = predictor.predict(
                &train,
                &seed,
                cfg.task_features.as_ref(),
                &split.test_tasks[t],
            )?;
            Ok(((t, rep), score_row(truth, &prediction, &columns, m.kind())))
        })
        .collect::<Result<_, CompletionError>>()?;

    let mut by_task: Vec<Vec<f64>> = vec![vec![0.0; split.repeats]; test_indices.len()];
    for ((t, rep), score) in scores {
        by_task[t][rep] = score;
    }
    let per_task: Vec<TaskScore> = by_task
        .into_iter()
        .enumerate()
        .map(|(t, scores)| {
            let (mean, sd) = mean_sd(&scores);
            TaskScore {
                task_id: split.test_tasks[t].clone(),
                scores,
                mean,
                sd,
            }
        })
        .collect();
    let task_means: Vec<f64> = per_task.iter().map(|t| t.mean).collect();
    let (mean, sd) = mean_sd(&task_means);
    Ok(EvalReport {
        method: method.name(),
        metric: match m.kind() {
            MatrixKind::Continuous => ScoreMetric::RmseTimes100,
            MatrixKind::Binary => ScoreMetric::F1,
        },
        rmse_scaled_by_100: m.kind() == MatrixKind::Continuous,
        seed_size: split.seed_size,
        repeats: split.repeats,
        master_seed: cfg.master_seed,
        per_task,
        mean,
        sd,
    })
}
