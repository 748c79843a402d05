//! Choosing which upstream examples to replay during fine-tuning.
//!
//! Sparse replay injects one small batch of upstream examples every
//! `interval` training steps. The strategies here decide *which* examples:
//!
//! - [`Strategy::Random`] — uniform over the replayable pool.
//! - [`Strategy::GroundTruth`] — softmax-weighted by the fully measured
//!   forgetting row (requires an extra measurement pass).
//! - [`Strategy::PredictedOffline`] — weighted by a forgetting row predicted
//!   from a small seed measured after a replay-free pass.
//! - [`Strategy::PredictedOnline`] — random during a warmup fraction of the
//!   run, then weighted by a row predicted from seed forgetting measured on
//!   the partially fine-tuned model.
//! - [`Strategy::MirT`] — most-forgotten examples within a random candidate
//!   pool, scored from a full measurement pass.
//! - [`Strategy::PplWindow`] — uniform over examples whose current loss sits
//!   in a mid-percentile window.
//! - [`Strategy::GradProd`] — softmax-weighted by gradient inner products
//!   between the fine-tuning weight delta and per-example gradients.
//!
//! [`orchestrate`] drives a [`FineTuneSession`] through a full run under a
//! [`ReplayPolicy`], producing a [`ReplayTrace`] with every replayed index
//! and a symbolic cost ledger.

use std::collections::HashSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::completion::{
    predict_additive, predict_knn, predict_mf_with_options, CompletionError, SeedSet,
};
use crate::lowrank::FitConfig;
use crate::matrix::AssociationMatrix;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("batch of {batch} exceeds population {n}")]
    BatchTooLarge { batch: usize, n: usize },
    #[error("scores must be non-empty")]
    EmptyScores,
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("replay interval must be at least 1")]
    ZeroInterval,
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("online warmup fraction must lie in (0,1), got {0}")]
    BadWarmupFraction(f64),
    #[error("percentile window must satisfy 0 ≤ lo < hi ≤ 100, got {lo}–{hi}")]
    BadWindow { lo: f64, hi: f64 },
    #[error("percentile window holds {have} examples, need at least {need}")]
    WindowTooSmall { have: usize, need: usize },
    #[error("candidate pool must be non-empty")]
    EmptyPool,
    #[error("strategy {0:?} needs a row predictor")]
    MissingPredictor(Strategy),
    #[error("seed size must be at least 1 and below the replayable pool size")]
    BadSeedSize,
    #[error("fine-tune session failed: {0}")]
    Session(String),
    #[error(transparent)]
    Completion(#[from] CompletionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Replay selection strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    #[serde(alias = "gt")]
    GroundTruth,
    #[serde(alias = "mf-offline", alias = "offline")]
    PredictedOffline,
    #[serde(alias = "mf-online", alias = "online")]
    PredictedOnline,
    #[serde(alias = "mir-t")]
    MirT,
    #[serde(alias = "ppl-window", alias = "ppl")]
    PplWindow,
    #[serde(alias = "grad-prod", alias = "gradprod")]
    GradProd,
}

impl Strategy {
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::GroundTruth => "ground_truth",
            Strategy::PredictedOffline => "predicted_offline",
            Strategy::PredictedOnline => "predicted_online",
            Strategy::MirT => "mir_t",
            Strategy::PplWindow => "ppl_window",
            Strategy::GradProd => "grad_prod",
        }
    }
}

/// Default softmax temperature for weighted sampling.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
/// Default number of training steps between replay events.
pub const DEFAULT_INTERVAL: usize = 32;
/// Replay interval suited to short runs.
pub const SHORT_RUN_INTERVAL: usize = 8;
/// Default upstream examples per replay batch.
pub const DEFAULT_BATCH_SIZE: usize = 8;
/// Default fraction of the run spent replaying randomly before the online
/// strategy switches to predictions.
pub const DEFAULT_WARMUP_FRACTION: f64 = 0.10;
/// Default candidate-pool size for the most-forgotten-in-pool strategy.
pub const DEFAULT_MIR_CANDIDATES: usize = 64;
/// Default percentile window (inclusive hi, exclusive lo) around the median.
pub const DEFAULT_PPL_WINDOW: (f64, f64) = (40.0, 60.0);

/// How and when to replay upstream examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayPolicy {
    pub strategy: Strategy,
    pub temperature: f64,
    /// Replay one batch every this many training steps.
    pub interval: usize,
    pub batch_size: usize,
    pub online_warmup_fraction: f64,
    pub mir_candidate_size: usize,
    /// Percentile window (lo, hi) for the loss-window strategy.
    pub ppl_window: (f64, f64),
}

impl ReplayPolicy {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            temperature: DEFAULT_TEMPERATURE,
            interval: DEFAULT_INTERVAL,
            batch_size: DEFAULT_BATCH_SIZE,
            online_warmup_fraction: DEFAULT_WARMUP_FRACTION,
            mir_candidate_size: DEFAULT_MIR_CANDIDATES,
            ppl_window: DEFAULT_PPL_WINDOW,
        }
    }

    pub fn validate(&self) -> Result<(), ReplayError> {
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(ReplayError::NonPositiveTemperature(self.temperature));
        }
        if self.interval == 0 {
            return Err(ReplayError::ZeroInterval);
        }
        if self.batch_size == 0 {
            return Err(ReplayError::ZeroBatch);
        }
        if !(self.online_warmup_fraction > 0.0 && self.online_warmup_fraction < 1.0) {
            return Err(ReplayError::BadWarmupFraction(self.online_warmup_fraction));
        }
        let (lo, hi) = self.ppl_window;
        if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
            return Err(ReplayError::BadWindow { lo, hi });
        }
        if self.mir_candidate_size == 0 {
            return Err(ReplayError::EmptyPool);
        }
        Ok(())
    }
}

/// Softmax probabilities p_j = exp(s_j/τ) / Σ exp(s_k/τ), computed with the
/// max-shift for numerical stability.
pub fn softmax_probabilities(scores: &[f64], temperature: f64) -> Result<Vec<f64>, ReplayError> {
    if scores.is_empty() {
        return Err(ReplayError::EmptyScores);
    }
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(ReplayError::NonPositiveTemperature(temperature));
    }
    for (i, &s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(ReplayError::NonFiniteScore(i));
        }
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| ((s - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Draws `batch` distinct indices with probability ∝ exp(score/τ), removing
/// and renormalizing after each draw (sampling without replacement).
pub fn sample_weighted(
    scores: &[f64],
    temperature: f64,
    batch: usize,
    rng_seed: u64,
) -> Result<Vec<usize>, ReplayError> {
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    sample_weighted_with_rng(scores, temperature, batch, &mut rng)
}

pub fn sample_weighted_with_rng(
    scores: &[f64],
    temperature: f64,
    batch: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<usize>, ReplayError> {
    if batch > scores.len() {
        return Err(ReplayError::BatchTooLarge {
            batch,
            n: scores.len(),
        });
    }
    let probs = softmax_probabilities(scores, temperature)?;
    let mut remaining: Vec<(usize, f64)> = probs.into_iter().enumerate().collect();
    let mut picked = Vec::with_capacity(batch);
    for _ in 0..batch {
        let total: f64 = remaining.iter().map(|&(_, w)| w).sum();
        let mut r = rng.random::<f64>() * total;
        let mut choice = remaining.len() - 1;
        for (pos, &(_, w)) in remaining.iter().enumerate() {
            if r < w {
                choice = pos;
                break;
            }
            r -= w;
        }
        picked.push(remaining.swap_remove(choice).0);
    }
    Ok(picked)
}

/// Top-`batch` pool entries by score; ties break toward the lowest index.
pub fn select_mir_t(
    pool_scores: &[(usize, f64)],
    batch: usize,
) -> Result<Vec<usize>, ReplayError> {
    if pool_scores.is_empty() {
        return Err(ReplayError::EmptyPool);
    }
    if batch > pool_scores.len() {
        return Err(ReplayError::BatchTooLarge {
            batch,
            n: pool_scores.len(),
        });
    }
    for (pos, &(_, s)) in pool_scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(ReplayError::NonFiniteScore(pos));
        }
    }
    let mut order: Vec<&(usize, f64)> = pool_scores.iter().collect();
    order.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("scores are finite")
            .then(a.0.cmp(&b.0))
    });
    Ok(order.into_iter().take(batch).map(|&(i, _)| i).collect())
}

/// Indices whose value sits inside the nearest-rank percentile window:
/// ranks r (1-based, ascending order) with ⌈lo·N/100⌉ < r ≤ ⌈hi·N/100⌉.
fn percentile_window_candidates(values: &[f64], window: (f64, f64)) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .expect("values are finite")
            .then(a.cmp(&b))
    });
    let lo_rank = (window.0 * n as f64 / 100.0).ceil() as usize;
    let hi_rank = (window.1 * n as f64 / 100.0).ceil() as usize;
    order[lo_rank.min(n)..hi_rank.min(n)].to_vec()
}

/// Uniform sample without replacement from the examples whose value lies in
/// the percentile window.
pub fn select_ppl_window(
    ppl: &[f64],
    window: (f64, f64),
    batch: usize,
    rng_seed: u64,
) -> Result<Vec<usize>, ReplayError> {
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    select_ppl_window_with_rng(ppl, window, batch, &mut rng)
}

fn select_ppl_window_with_rng(
    ppl: &[f64],
    window: (f64, f64),
    batch: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<usize>, ReplayError> {
    if ppl.is_empty() {
        return Err(ReplayError::EmptyScores);
    }
    let (lo, hi) = window;
    if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
        return Err(ReplayError::BadWindow { lo, hi });
    }
    for (i, &v) in ppl.iter().enumerate() {
        if !v.is_finite() {
            return Err(ReplayError::NonFiniteScore(i));
        }
    }
    let candidates = percentile_window_candidates(ppl, window);
    if candidates.len() < batch {
        return Err(ReplayError::WindowTooSmall {
            have: candidates.len(),
            need: batch,
        });
    }
    let picks = rand::seq::index::sample(rng, candidates.len(), batch);
    Ok(picks.iter().map(|p| candidates[p]).collect())
}

/// Softmax-weighted sampling over gradient inner products. The products can
/// be negative, so raw proportional weights would be invalid; the softmax
/// maps them to a proper distribution.
pub fn select_grad_prod(
    products: &[f64],
    temperature: f64,
    batch: usize,
    rng_seed: u64,
) -> Result<Vec<usize>, ReplayError> {
    sample_weighted(products, temperature, batch, rng_seed)
}

/// One fine-tuning run that the orchestrator can drive step by step.
///
/// The session owns the model, the new task's data, and the upstream
/// examples. `reset` must restore the exact initial state (weights and data
/// order) so a second pass replays the same run.
pub trait FineTuneSession {
    /// Number of training steps in one full pass.
    fn total_steps(&self) -> usize;
    /// Number of upstream examples available.
    fn num_upstream(&self) -> usize;
    /// Upstream indices reserved for evaluation; these must never be
    /// replayed.
    fn held_out(&self) -> &[usize];
    /// Runs one training step. `replay = Some(indices)` replaces this step's
    /// batch with the given upstream examples; `None` trains on the next
    /// new-task batch.
    fn step(&mut self, replay: Option<&[usize]>) -> Result<(), ReplayError>;
    /// Current forgetting (loss increase since the initial model) of the
    /// given upstream examples.
    fn measure_forgetting(&mut self, indices: &[usize]) -> Result<Vec<f64>, ReplayError>;
    /// Current per-upstream-example loss.
    fn upstream_loss(&mut self) -> Result<Vec<f64>, ReplayError>;
    /// ⟨θ − θ₀, ∇θ loss(x_j; θ₀)⟩ per upstream example: the first-order
    /// forgetting estimate from the current weight delta.
    fn grad_products(&mut self) -> Result<Vec<f64>, ReplayError>;
    /// Restores the initial model and data state.
    fn reset(&mut self);
}

/// Completion-backed predictor turning a seed into a full forgetting row.
#[derive(Debug, Clone)]
pub enum RowPredictor<'a> {
    Additive {
        train: &'a AssociationMatrix,
    },
    Knn {
        train: &'a AssociationMatrix,
        k: usize,
    },
    Mf {
        train: &'a AssociationMatrix,
        rank: usize,
        ridge: f64,
    },
}

impl RowPredictor<'_> {
    pub fn predict(&self, seed: &SeedSet) -> Result<Vec<f64>, CompletionError> {
        match self {
            RowPredictor::Additive { train } => predict_additive(train, seed),
            RowPredictor::Knn { train, k } => predict_knn(train, seed, *k),
            RowPredictor::Mf { train, rank, ridge } => {
                predict_mf_with_options(train, seed, *rank, *ridge, &FitConfig::default())
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            RowPredictor::Additive { .. } => "additive",
            RowPredictor::Knn { .. } => "knn",
            RowPredictor::Mf { .. } => "mf",
        }
    }
}

/// One replay event in a trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEvent {
    /// Training step whose batch was replaced by replay.
    pub step: usize,
    /// Selection mode in effect ("random" during online warmup).
    pub mode: String,
    pub indices: Vec<usize>,
}

/// Symbolic cost of a run in fine-tune passes (FT), example evaluations
/// (EV), per-example gradient computations (GD), and matrix-completion
/// solves (MC).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub fine_tune_runs: usize,
    pub evaluated_examples: usize,
    pub gradient_examples: usize,
    pub completion_solves: usize,
    /// Table-style rendering, e.g. `2FT(Y) + EV(N)`.
    pub symbolic: String,
}

/// Record of one orchestrated replay run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayTrace {
    pub strategy: Strategy,
    pub master_seed: u64,
    pub seed_size: usize,
    pub events: Vec<ReplayEvent>,
    pub cost: CostLedger,
    pub held_out: Vec<usize>,
    /// Forgetting of the held-out upstream examples after the final model.
    pub final_forgetting: Vec<f64>,
}

impl ReplayTrace {
    pub fn mean_final_forgetting(&self) -> f64 {
        self.final_forgetting.iter().sum::<f64>() / self.final_forgetting.len() as f64
    }

    /// All replayed indices across events.
    pub fn replayed_indices(&self) -> Vec<usize> {
        self.events
            .iter()
            .flat_map(|e| e.indices.iter().copied())
            .collect()
    }

    /// CSV: one row per event (step, mode, space-separated indices).
    pub fn write_csv(&self, path: &Path) -> Result<(), ReplayError> {
        let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        wtr.write_record(["step", "mode", "indices"])?;
        for e in &self.events {
            let joined = e
                .indices
                .iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            wtr.write_record([e.step.to_string(), e.mode.clone(), joined])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_summary_json(&self, path: &Path) -> Result<(), ReplayError> {
        let file = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }
}

/// Replay-event steps for a run: every `interval`-th step before the last.
pub fn replay_schedule(total_steps: usize, interval: usize) -> Vec<usize> {
    (1..total_steps)
        .filter(|s| s % interval == 0 && *s < total_steps)
        .collect()
}

/// Per-strategy selection state prepared before (or during) the main pass.
enum SelectionState {
    Uniform,
    Weighted { scores: Vec<f64> },
    MirPool { scores: Vec<f64> },
    Window { candidates_scores: Vec<f64> },
    OnlinePending,
}

/// Drives `session` through one policy-governed fine-tuning run.
///
/// Two-pass strategies (GroundTruth, PredictedOffline, MirT, GradProd) first
/// run the session replay-free to obtain their scores, reset it, and then run
/// the replayed pass; everything is deterministic under `master_seed`.
pub fn orchestrate<S: FineTuneSession>(
    policy: &ReplayPolicy,
    session: &mut S,
    predictor: Option<&RowPredictor<'_>>,
    seed_size: usize,
    master_seed: u64,
) -> Result<ReplayTrace, ReplayError> {
    policy.validate()?;
    let n = session.num_upstream();
    let total = session.total_steps();
    let held_out: Vec<usize> = session.held_out().to_vec();
    let held: HashSet<usize> = held_out.iter().copied().collect();
    // The replayable pool: upstream examples outside the held-out set.
    let allowed: Vec<usize> = (0..n).filter(|i| !held.contains(i)).collect();
    if policy.batch_size > allowed.len() {
        return Err(ReplayError::BatchTooLarge {
            batch: policy.batch_size,
            n: allowed.len(),
        });
    }
    let needs_seed = matches!(
        policy.strategy,
        Strategy::PredictedOffline | Strategy::PredictedOnline
    );
    if needs_seed {
        if predictor.is_none() {
            return Err(ReplayError::MissingPredictor(policy.strategy));
        }
        if seed_size == 0 || seed_size >= allowed.len() {
            return Err(ReplayError::BadSeedSize);
        }
    }

    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    let mut cost = CostLedger::default();

    let run_plain_pass = |session: &mut S, cost: &mut CostLedger| -> Result<(), ReplayError> {
        for _ in 0..total {
            session.step(None)?;
        }
        cost.fine_tune_runs += 1;
        Ok(())
    };
    let measure_seed = |session: &mut S,
                        cost: &mut CostLedger,
                        rng: &mut ChaCha12Rng|
     -> Result<Vec<f64>, ReplayError> {
        let picks = rand::seq::index::sample(rng, allowed.len(), seed_size);
        let seed_cols: Vec<usize> = picks.iter().map(|p| allowed[p]).collect();
        let values = session.measure_forgetting(&seed_cols)?;
        cost.evaluated_examples += seed_cols.len();
        let seed = SeedSet::new(seed_cols, values)?;
        let row = predictor
            .expect("checked above")
            .predict(&seed)?;
        cost.completion_solves += 1;
        Ok(row)
    };
    let all_indices: Vec<usize> = (0..n).collect();

    // Preparation phase.
    let mut state = match policy.strategy {
        Strategy::Random => SelectionState::Uniform,
        Strategy::GroundTruth => {
            run_plain_pass(session, &mut cost)?;
            let row = session.measure_forgetting(&all_indices)?;
            cost.evaluated_examples += n;
            session.reset();
            SelectionState::Weighted {
                scores: allowed.iter().map(|&i| row[i]).collect(),
            }
        }
        Strategy::PredictedOffline => {
            run_plain_pass(session, &mut cost)?;
            let row = measure_seed(session, &mut cost, &mut rng)?;
            session.reset();
            SelectionState::Weighted {
                scores: allowed.iter().map(|&i| row[i]).collect(),
            }
        }
        Strategy::MirT => {
            run_plain_pass(session, &mut cost)?;
            let row = session.measure_forgetting(&all_indices)?;
            cost.evaluated_examples += n;
            session.reset();
            SelectionState::MirPool {
                scores: allowed.iter().map(|&i| row[i]).collect(),
            }
        }
        Strategy::PplWindow => {
            let losses = session.upstream_loss()?;
            cost.evaluated_examples += n;
            SelectionState::Window {
                candidates_scores: allowed.iter().map(|&i| losses[i]).collect(),
            }
        }
        Strategy::GradProd => {
            run_plain_pass(session, &mut cost)?;
            let products = session.grad_products()?;
            cost.gradient_examples += n;
            session.reset();
            SelectionState::Weighted {
                scores: allowed.iter().map(|&i| products[i]).collect(),
            }
        }
        Strategy::PredictedOnline => SelectionState::OnlinePending,
    };

    // Main pass.
    let warmup_steps = (policy.online_warmup_fraction * total as f64).ceil() as usize;
    let mut events: Vec<ReplayEvent> = Vec::new();
    for s in 1..=total {
        // The online strategy measures seed forgetting once the warmup
        // fraction of steps has completed, then switches to predictions.
        if matches!(state, SelectionState::OnlinePending) && s > warmup_steps {
            let row = measure_seed(session, &mut cost, &mut rng)?;
            state = SelectionState::Weighted {
                scores: allowed.iter().map(|&i| row[i]).collect(),
            };
        }
        let is_event = s % policy.interval == 0 && s < total;
        if !is_event {
            session.step(None)?;
            continue;
        }
        let (mode, local): (&str, Vec<usize>) = match &state {
            SelectionState::Uniform => {
                let picks =
                    rand::seq::index::sample(&mut rng, allowed.len(), policy.batch_size);
                ("random", picks.iter().collect())
            }
            SelectionState::OnlinePending => {
                let picks =
                    rand::seq::index::sample(&mut rng, allowed.len(), policy.batch_size);
                ("random", picks.iter().collect())
            }
            SelectionState::Weighted { scores } => (
                "weighted",
                sample_weighted_with_rng(
                    scores,
                    policy.temperature,
                    policy.batch_size,
                    &mut rng,
                )?,
            ),
            SelectionState::MirPool { scores } => {
                let pool_size = policy.mir_candidate_size.min(allowed.len());
                if pool_size < policy.batch_size {
                    return Err(ReplayError::BatchTooLarge {
                        batch: policy.batch_size,
                        n: pool_size,
                    });
                }
                let picks = rand::seq::index::sample(&mut rng, allowed.len(), pool_size);
                let pool: Vec<(usize, f64)> =
                    picks.iter().map(|p| (p, scores[p])).collect();
                ("top_of_pool", select_mir_t(&pool, policy.batch_size)?)
            }
            SelectionState::Window { candidates_scores } => (
                "window",
                select_ppl_window_with_rng(
                    candidates_scores,
                    policy.ppl_window,
                    policy.batch_size,
                    &mut rng,
                )?,
            ),
        };
        let indices: Vec<usize> = local.iter().map(|&p| allowed[p]).collect();
        session.step(Some(&indices))?;
        events.push(ReplayEvent {
            step: s,
            mode: mode.to_string(),
            indices,
        });
    }
    cost.fine_tune_runs += 1;

    cost.symbolic = match policy.strategy {
        Strategy::Random => "FT(Y)".to_string(),
        Strategy::GroundTruth => "2FT(Y) + EV(N)".to_string(),
        Strategy::PredictedOffline => "2FT(Y) + EV(S) + MC".to_string(),
        Strategy::PredictedOnline => "FT(Y) + EV(S) + MC".to_string(),
        Strategy::MirT => "2FT(Y) + EV(N)".to_string(),
        Strategy::PplWindow => "FT(Y) + EV(N)".to_string(),
        Strategy::GradProd => "2FT(Y) + GD(N)".to_string(),
    };

    // Final metric: forgetting on the held-out upstream set. Not part of the
    // strategy's cost — every strategy pays the same bookkeeping.
    let final_forgetting = session.measure_forgetting(&held_out)?;

    Ok(ReplayTrace {
        strategy: policy.strategy,
        master_seed,
        seed_size,
        events,
        cost,
        held_out,
        final_forgetting,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::MatrixKind;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    #[test]
    fn softmax_matches_hand_computed_two_point_distribution() {
        let p = softmax_probabilities(&[0.0, 2.0f64.ln()], 1.0).unwrap();
        assert_abs_diff_eq!(p[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let scores = [0.3, -1.2, 0.8, 0.0, 2.4];
        let shifted: Vec<f64> = scores.iter().map(|s| s + 123.456).collect();
        let a = softmax_probabilities(&scores, 0.1).unwrap();
        let b = softmax_probabilities(&shifted, 0.1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn sampler_matches_analytic_softmax_on_two_points() {
        // p = [1/3, 2/3]; 100k single draws; 3σ binomial tolerance.
        let scores = [0.0, 2.0f64.ln()];
        let draws = 100_000;
        let mut count1 = 0usize;
        for i in 0..draws {
            let picked = sample_weighted(&scores, 1.0, 1, i as u64).unwrap();
            if picked[0] == 1 {
                count1 += 1;
            }
        }
        let p = 2.0 / 3.0;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        let freq = count1 as f64 / draws as f64;
        assert!(
            (freq - p).abs() <= 3.0 * sigma,
            "freq {freq} vs p {p} (3σ = {})",
            3.0 * sigma
        );
    }

    #[test]
    fn sampler_uniform_scores_give_uniform_frequencies() {
        let n = 5;
        let scores = vec![0.7; n];
        let draws = 100_000;
        let mut counts = vec![0usize; n];
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..draws {
            let picked = sample_weighted_with_rng(&scores, 0.1, 1, &mut rng).unwrap();
            counts[picked[0]] += 1;
        }
        let p = 1.0 / n as f64;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!(
                (freq - p).abs() <= 3.0 * sigma,
                "index {i}: freq {freq} vs uniform {p}"
            );
        }
    }

    #[test]
    fn sampler_near_zero_temperature_picks_argmax_first() {
        let scores = [0.1, 0.9, 0.3, 0.89];
        for seed in 0..100 {
            let picked = sample_weighted(&scores, 1e-6, 2, seed).unwrap();
            assert_eq!(picked[0], 1);
        }
    }

    #[test]
    fn sampler_without_replacement_covers_everything_at_full_batch() {
        let scores = [0.5, 1.5, -0.7, 0.0, 2.2, 1.1];
        let mut picked = sample_weighted(&scores, 0.3, scores.len(), 7).unwrap();
        picked.sort_unstable();
        assert_eq!(picked, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn sampler_rejects_bad_inputs() {
        assert!(matches!(
            sample_weighted(&[1.0, 2.0], 0.0, 1, 0),
            Err(ReplayError::NonPositiveTemperature(_))
        ));
        assert!(matches!(
            sample_weighted(&[1.0, 2.0], 0.1, 3, 0),
            Err(ReplayError::BatchTooLarge { batch: 3, n: 2 })
        ));
        assert!(matches!(
            sample_weighted(&[], 0.1, 0, 0),
            Err(ReplayError::EmptyScores)
        ));
        assert!(matches!(
            sample_weighted(&[1.0, f64::NAN], 0.1, 1, 0),
            Err(ReplayError::NonFiniteScore(1))
        ));
    }

    #[test]
    fn weighted_sampling_dominates_uniform_on_the_score() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let scores: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pop_mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let draws = 20_000;
        let mut total = 0.0;
        for _ in 0..draws {
            let picked = sample_weighted_with_rng(&scores, 0.5, 1, &mut rng).unwrap();
            total += scores[picked[0]];
        }
        let sampled_mean = total / draws as f64;
        // Monte Carlo check with a 3σ cushion on the sampled mean.
        let var = scores
            .iter()
            .map(|&s| (s - pop_mean) * (s - pop_mean))
            .sum::<f64>()
            / scores.len() as f64;
        let sigma = (var / draws as f64).sqrt();
        assert!(
            sampled_mean >= pop_mean - 3.0 * sigma,
            "weighted mean {sampled_mean} fell below population mean {pop_mean}"
        );
        assert!(
            sampled_mean > pop_mean,
            "expected strict dominance: {sampled_mean} vs {pop_mean}"
        );
    }

    #[test]
    fn mir_selects_top_scores_with_low_index_ties() {
        let pool = [(10, 3.0), (11, 1.0), (12, 2.0)];
        assert_eq!(select_mir_t(&pool, 2).unwrap(), vec![10, 12]);

        let tied = [(5, 1.0), (3, 1.0), (8, 1.0)];
        assert_eq!(select_mir_t(&tied, 2).unwrap(), vec![3, 5]);

        assert!(matches!(
            select_mir_t(&pool, 4),
            Err(ReplayError::BatchTooLarge { batch: 4, n: 3 })
        ));
    }

    #[test]
    fn mir_selected_mean_dominates_pool_mean() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        for _ in 0..1000 {
            let pool: Vec<(usize, f64)> = (0..12)
                .map(|i| (i, rng.random_range(-2.0..2.0)))
                .collect();
            let picked = select_mir_t(&pool, 4).unwrap();
            let pool_mean = pool.iter().map(|&(_, s)| s).sum::<f64>() / pool.len() as f64;
            let picked_mean = picked
                .iter()
                .map(|&i| pool.iter().find(|&&(j, _)| j == i).unwrap().1)
                .sum::<f64>()
                / picked.len() as f64;
            assert!(picked_mean >= pool_mean);
        }
    }

    #[test]
    fn ppl_window_selects_exactly_the_middle_ranks() {
        // 100 distinct values, shuffled; window 40–60 must cover ranks 41..60.
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mut values: Vec<f64> = (0..100).map(|i| i as f64 * 0.01).collect();
        for i in (1..values.len()).rev() {
            let j = rng.random_range(0..=i);
            values.swap(i, j);
        }
        let candidates = percentile_window_candidates(&values, (40.0, 60.0));
        let mut ranks: Vec<usize> = candidates
            .iter()
            .map(|&i| (values[i] / 0.01).round() as usize + 1)
            .collect();
        ranks.sort_unstable();
        assert_eq!(ranks, (41..=60).collect::<Vec<_>>());

        // Window size 20: batch 20 returns exactly the candidate set.
        let mut all = select_ppl_window(&values, (40.0, 60.0), 20, 3).unwrap();
        all.sort_unstable();
        let mut expected = candidates;
        expected.sort_unstable();
        assert_eq!(all, expected);

        assert!(matches!(
            select_ppl_window(&values, (40.0, 60.0), 21, 3),
            Err(ReplayError::WindowTooSmall { have: 20, need: 21 })
        ));
    }

    #[test]
    fn full_window_is_equivalent_to_uniform_population() {
        let values = [0.5, 0.1, 0.9, 0.3, 0.7];
        let candidates = percentile_window_candidates(&values, (0.0, 100.0));
        let mut sorted = candidates;
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn grad_prod_handles_mixed_signs() {
        let products = [-0.5, 0.3, -0.1, 0.8];
        let p = softmax_probabilities(&products, DEFAULT_TEMPERATURE).unwrap();
        assert!(p.iter().all(|&v| v > 0.0));
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let picked = select_grad_prod(&products, 1e-6, 1, 0).unwrap();
        assert_eq!(picked, vec![3]);
    }

    #[test]
    fn policy_validation_rejects_bad_fields() {
        let mut p = ReplayPolicy::new(Strategy::Random);
        p.temperature = -1.0;
        assert!(matches!(
            p.validate(),
            Err(ReplayError::NonPositiveTemperature(_))
        ));
        let mut p = ReplayPolicy::new(Strategy::Random);
        p.interval = 0;
        assert!(matches!(p.validate(), Err(ReplayError::ZeroInterval)));
        let mut p = ReplayPolicy::new(Strategy::PredictedOnline);
        p.online_warmup_fraction = 1.0;
        assert!(matches!(p.validate(), Err(ReplayError::BadWarmupFraction(_))));
        let mut p = ReplayPolicy::new(Strategy::PplWindow);
        p.ppl_window = (60.0, 40.0);
        assert!(matches!(p.validate(), Err(ReplayError::BadWindow { .. })));
    }

    #[test]
    fn schedule_has_31_events_for_1000_steps_at_interval_32() {
        let events = replay_schedule(1000, 32);
        assert_eq!(events.len(), 31);
        assert_eq!(events.first(), Some(&32));
        assert_eq!(events.last(), Some(&992));
        assert!(events.iter().all(|s| s % 32 == 0 && *s < 1000));
    }

    /// Scripted stand-in for a real fine-tuning run: forgetting and losses
    /// are fixed vectors, steps just count.
    struct MockSession {
        total: usize,
        steps_taken: usize,
        forgetting: Vec<f64>,
        losses: Vec<f64>,
        products: Vec<f64>,
        held_out: Vec<usize>,
        resets: usize,
        /// steps_taken value at each measure_forgetting call.
        measure_log: Vec<usize>,
        replay_calls: Vec<(usize, Vec<usize>)>,
    }

    impl MockSession {
        fn new(total: usize, n: usize, held_out: Vec<usize>) -> Self {
            let forgetting: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
            let losses: Vec<f64> = (0..n).map(|i| (i as f64 * 0.11).cos() + 1.5).collect();
            let products: Vec<f64> = (0..n).map(|i| (i as f64 * 0.23).sin() * 0.5).collect();
            Self {
                total,
                steps_taken: 0,
                forgetting,
                losses,
                products,
                held_out,
                resets: 0,
                measure_log: Vec::new(),
                replay_calls: Vec::new(),
            }
        }
    }

    impl FineTuneSession for MockSession {
        fn total_steps(&self) -> usize {
            self.total
        }
        fn num_upstream(&self) -> usize {
            self.forgetting.len()
        }
        fn held_out(&self) -> &[usize] {
            &self.held_out
        }
        fn step(&mut self, replay: Option<&[usize]>) -> Result<(), ReplayError> {
            self.steps_taken += 1;
            if let Some(indices) = replay {
                self.replay_calls.push((self.steps_taken, indices.to_vec()));
            }
            Ok(())
        }
        fn measure_forgetting(&mut self, indices: &[usize]) -> Result<Vec<f64>, ReplayError> {
            self.measure_log.push(self.steps_taken);
            Ok(indices.iter().map(|&i| self.forgetting[i]).collect())
        }
        fn upstream_loss(&mut self) -> Result<Vec<f64>, ReplayError> {
            Ok(self.losses.clone())
        }
        fn grad_products(&mut self) -> Result<Vec<f64>, ReplayError> {
            Ok(self.products.clone())
        }
        fn reset(&mut self) {
            self.steps_taken = 0;
            self.resets += 1;
        }
    }

    fn policy(strategy: Strategy) -> ReplayPolicy {
        ReplayPolicy::new(strategy)
    }

    #[test]
    fn orchestrate_emits_the_full_schedule() {
        let mut session = MockSession::new(1000, 50, vec![]);
        let trace = orchestrate(&policy(Strategy::Random), &mut session, None, 0, 1).unwrap();
        assert_eq!(trace.events.len(), 31);
        let steps: Vec<usize> = trace.events.iter().map(|e| e.step).collect();
        assert_eq!(steps, replay_schedule(1000, 32));
        assert_eq!(session.steps_taken, 1000);
        for e in &trace.events {
            assert_eq!(e.indices.len(), DEFAULT_BATCH_SIZE);
        }
        assert_eq!(trace.cost.fine_tune_runs, 1);
        assert_eq!(trace.cost.symbolic, "FT(Y)");
    }

    #[test]
    fn online_strategy_switches_after_the_warmup_fraction() {
        let n = 60;
        let prior = {
            // Prior-task rows: the mock's forgetting vector plus small
            // per-task offsets, so the additive predictor is informative.
            let base: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
            let values =
                Array2::from_shape_fn((3, n), |(t, j)| base[j] + 0.01 * t as f64);
            AssociationMatrix::new(
                values,
                MatrixKind::Continuous,
                vec!["p0".into(), "p1".into(), "p2".into()],
                (0..n).map(|j| format!("e{j}")).collect(),
            )
            .unwrap()
        };
        let predictor = RowPredictor::Additive { train: &prior };
        let mut session = MockSession::new(1000, n, vec![0, 1]);
        let trace = orchestrate(
            &policy(Strategy::PredictedOnline),
            &mut session,
            Some(&predictor),
            10,
            3,
        )
        .unwrap();
        for e in &trace.events {
            if e.step <= 100 {
                assert_eq!(e.mode, "random", "step {}", e.step);
            } else {
                assert_eq!(e.mode, "weighted", "step {}", e.step);
            }
        }
        // Seed forgetting was measured exactly once the warmup completed
        // (model state after step 100), before the final held-out check.
        assert_eq!(session.measure_log.first(), Some(&100));
        assert_eq!(trace.cost.fine_tune_runs, 1);
        assert_eq!(trace.cost.evaluated_examples, 10);
        assert_eq!(trace.cost.completion_solves, 1);
        assert_eq!(trace.cost.symbolic, "FT(Y) + EV(S) + MC");
    }

    #[test]
    fn ground_truth_costs_two_runs_plus_full_evaluation() {
        let mut session = MockSession::new(320, 40, vec![2, 3]);
        let trace =
            orchestrate(&policy(Strategy::GroundTruth), &mut session, None, 0, 5).unwrap();
        assert_eq!(trace.cost.fine_tune_runs, 2);
        assert_eq!(trace.cost.evaluated_examples, 40);
        assert_eq!(trace.cost.symbolic, "2FT(Y) + EV(N)");
        assert_eq!(session.resets, 1);
        // Weighted events favour the most-forgotten examples.
        assert!(trace.events.iter().all(|e| e.mode == "weighted"));
    }

    #[test]
    fn no_strategy_replays_held_out_examples() {
        let n = 30;
        let held = vec![1, 4, 9, 16, 25];
        let prior = {
            let base: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
            let values =
                Array2::from_shape_fn((3, n), |(t, j)| base[j] + 0.01 * t as f64);
            AssociationMatrix::new(
                values,
                MatrixKind::Continuous,
                vec!["p0".into(), "p1".into(), "p2".into()],
                (0..n).map(|j| format!("e{j}")).collect(),
            )
            .unwrap()
        };
        let predictor = RowPredictor::Additive { train: &prior };
        for strategy in [
            Strategy::Random,
            Strategy::GroundTruth,
            Strategy::PredictedOffline,
            Strategy::PredictedOnline,
            Strategy::MirT,
            Strategy::PplWindow,
            Strategy::GradProd,
        ] {
            let mut p = policy(strategy);
            p.interval = 8;
            p.batch_size = 4;
            p.mir_candidate_size = 10;
            let mut session = MockSession::new(200, n, held.clone());
            let trace = orchestrate(&p, &mut session, Some(&predictor), 5, 11).unwrap();
            assert!(!trace.events.is_empty());
            for idx in trace.replayed_indices() {
                assert!(
                    !held.contains(&idx),
                    "{strategy:?} replayed held-out example {idx}"
                );
            }
        }
    }

    #[test]
    fn orchestrate_is_deterministic_under_a_fixed_seed() {
        for strategy in [Strategy::Random, Strategy::GroundTruth, Strategy::MirT] {
            let mut a = MockSession::new(256, 32, vec![0]);
            let mut b = MockSession::new(256, 32, vec![0]);
            let ta = orchestrate(&policy(strategy), &mut a, None, 0, 21).unwrap();
            let tb = orchestrate(&policy(strategy), &mut b, None, 0, 21).unwrap();
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn trace_round_trips_through_csv_and_json() {
        let mut session = MockSession::new(128, 20, vec![5]);
        let trace =
            orchestrate(&policy(Strategy::GroundTruth), &mut session, None, 0, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("trace.csv");
        let json_path = dir.path().join("trace.json");
        trace.write_csv(&csv_path).unwrap();
        trace.write_summary_json(&json_path).unwrap();

        let mut rdr = csv::Reader::from_path(&csv_path).unwrap();
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), trace.events.len());
        let first: Vec<usize> = rows[0][2]
            .split(' ')
            .map(|t| t.parse().unwrap())
            .collect();
        assert_eq!(first, trace.events[0].indices);

        let back: ReplayTrace =
            serde_json::from_reader(File::open(&json_path).unwrap()).unwrap();
        assert_eq!(back, trace);
    }

    #[test]
    fn ground_truth_weights_replay_toward_most_forgotten() {
        // Make one example dominate the forgetting scores; at τ = 0.1 it
        // should appear in essentially every weighted batch.
        let mut session = MockSession::new(640, 25, vec![]);
        session.forgetting = (0..25).map(|i| if i == 13 { 2.0 } else { 0.0 }).collect();
        let mut p = policy(Strategy::GroundTruth);
        p.batch_size = 3;
        let trace = orchestrate(&p, &mut session, None, 0, 9).unwrap();
        for e in &trace.events {
            assert!(
                e.indices.contains(&13),
                "dominant example missing from batch at step {}",
                e.step
            );
        }
    }
}
