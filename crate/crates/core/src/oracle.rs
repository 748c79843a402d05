//! A desk-scale forgetting generator: small dense networks trained on
//! rotated image tasks.
//!
//! The pipeline pretrains one classifier on several rotated variants of a
//! base image dataset (without telling it which rotation it is seeing),
//! fine-tunes copies on unseen rotations for one epoch, and records the
//! per-example cross-entropy increase on the pretraining data. Stacking
//! those rows over many fine-tuning angles yields [`AssociationMatrix`]
//! instances whose low-rank structure can be studied directly.
//!
//! Two data sources are supported: standard IDX digit files
//! ([`load_idx`]) and a fully procedural fallback ([`synthetic_blobs`])
//! so the whole pipeline runs without any external downloads.

use std::collections::hash_map::DefaultHasher;
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{BufReader, Read as IoRead};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{build_row, AssociationMatrix, MatrixError, MatrixKind, PerformanceSnapshot};
use crate::replay::{orchestrate, FineTuneSession, ReplayError, ReplayPolicy, ReplayTrace, RowPredictor};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("{path}: bad IDX magic, expected {expected:#010x} got {got:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        got: u32,
    },
    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{0}: file truncated")]
    Truncated(PathBuf),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("requested {requested} examples but only {available} are available")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("rotation angle must be finite, got {0}")]
    NonFiniteAngle(f64),
    #[error("network depth must be between 1 and 5 weight layers, got {0}")]
    BadDepth(usize),
    #[error("label {label} at example {index} is outside 0..{classes}")]
    BadLabel {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("training diverged (non-finite loss) at step {step}")]
    Divergence { step: usize },
    #[error("angle list must be non-empty and duplicate-free")]
    BadAngles,
    #[error("{field} must be positive")]
    NonPositive { field: &'static str },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// Number of output classes.
pub const NUM_CLASSES: usize = 10;
/// Image side length for the procedural dataset.
pub const BLOB_SIDE: usize = 28;

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// A labelled image dataset with a fixed resolution.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Row-major pixel intensities in [0,1], one image per row.
    pub images: Array2<f64>,
    pub labels: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.rows * self.cols
    }
}

/// Reads the classic big-endian IDX image/label file pair, scaling pixel
/// bytes to [0,1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, OracleError> {
    let mut img = BufReader::new(File::open(images_path)?);
    let magic = read_u32(&mut img, images_path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(OracleError::BadMagic {
            path: images_path.to_path_buf(),
            expected: IDX_IMAGE_MAGIC,
            got: magic,
        });
    }
    let count = read_u32(&mut img, images_path)? as usize;
    let rows = read_u32(&mut img, images_path)? as usize;
    let cols = read_u32(&mut img, images_path)? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    img.read_exact(&mut pixels)
        .map_err(|_| OracleError::Truncated(images_path.to_path_buf()))?;

    let mut lab = BufReader::new(File::open(labels_path)?);
    let magic = read_u32(&mut lab, labels_path)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(OracleError::BadMagic {
            path: labels_path.to_path_buf(),
            expected: IDX_LABEL_MAGIC,
            got: magic,
        });
    }
    let label_count = read_u32(&mut lab, labels_path)? as usize;
    if label_count != count {
        return Err(OracleError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let mut raw_labels = vec![0u8; label_count];
    lab.read_exact(&mut raw_labels)
        .map_err(|_| OracleError::Truncated(labels_path.to_path_buf()))?;

    if count == 0 {
        return Err(OracleError::EmptyDataset);
    }
    let images = Array2::from_shape_vec(
        (count, rows * cols),
        pixels.into_iter().map(|p| p as f64 / 255.0).collect(),
    )
    .expect("shape matches byte count");
    let labels: Vec<usize> = raw_labels.into_iter().map(|l| l as usize).collect();
    for (i, &l) in labels.iter().enumerate() {
        if l >= NUM_CLASSES {
            return Err(OracleError::BadLabel {
                index: i,
                label: l,
                classes: NUM_CLASSES,
            });
        }
    }
    Ok(Dataset {
        images,
        labels,
        rows,
        cols,
    })
}

fn read_u32<R: IoRead>(r: &mut R, path: &Path) -> Result<u32, OracleError> {
    r.read_u32::<BigEndian>()
        .map_err(|_| OracleError::Truncated(path.to_path_buf()))
}

/// Standard deviation (radians) of the common angular shift an example
/// applies to all of its bumps at once. The shift moves the whole figure
/// around the circle without disturbing the relative arrangement that
/// carries the label, so every example owns a private orientation — the
/// axis along which examples differ most in how exposed they are to any
/// given fine-tune rotation.
pub const BLOB_ANGULAR_JITTER_RAD: f64 = 0.35;

/// Standard deviation (radians) of the small independent angular jitter each
/// bump adds on top of the common shift. Kept well under the inter-bump
/// offset so the angular order of rings — the class signature — survives.
pub const BLOB_BUMP_JITTER_RAD: f64 = 0.15;

/// Per-example standard deviation (pixels) of bump-position jitter along the
/// radial direction. Kept below the ring spacing so jitter never swaps an
/// example's ring pattern onto a different ring set.
pub const BLOB_RADIAL_JITTER_PX: f64 = 0.5;

/// Procedural 10-class image dataset: each class is a fixed composition of
/// sharp Gaussian bumps placed inside the central disk (so rotations keep
/// them in frame). Every example re-renders the class bumps with jittered
/// positions and amplitudes, then adds pixel noise. Deterministic under
/// `seed`.
#[allow(clippy::too_many_arguments)]
fn render_bump(
    row: &mut [f64],
    side: usize,
    center: f64,
    radius: f64,
    theta: f64,
    amp: f64,
    sigma_major: f64,
    sigma_minor: f64,
    orientation: f64,
) {
    let cy = center + radius * theta.sin();
    let cx = center + radius * theta.cos();
    // Peak height is normalised by the footprint area so total energy per
    // bump depends only on `amp`, never on the bump's shape.
    let reference_area = 0.85 * 0.85;
    let peak = amp * reference_area / (sigma_major * sigma_minor);
    let (s, c0) = orientation.sin_cos();
    for r in 0..side {
        for c in 0..side {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            let major = dy * s + dx * c0;
            let minor = -dy * c0 + dx * s;
            let q = major * major / (2.0 * sigma_major * sigma_major)
                + minor * minor / (2.0 * sigma_minor * sigma_minor);
            row[r * side + c] += peak * (-q).exp();
        }
    }
}

pub fn synthetic_blobs(num_examples: usize, noise: f64, seed: u64) -> Dataset {
    let side = BLOB_SIDE;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let center = (side as f64 - 1.0) / 2.0;

    // Bumps sit well off center with widths comparable to the displacement a
    // few degrees of rotation produces — nearby angles stay correlated while
    // far angles become distinct inputs.
    struct Bump {
        radius: f64,
        theta: f64,
        amp: f64,
        sigma: f64,
    }
    // Classes come in pairs. Both classes of a pair put bumps on the same
    // three radial rings with the same amplitudes and widths — their radial
    // energy profiles are identical — and differ only in which ring leads
    // the angular sweep across the pair's wedge. No rotation-invariant
    // summary (ring energies, total mass) separates a pair, so a classifier
    // is forced to bind content to angular position. Those position-bound
    // weights are exactly what fine-tuning on an unseen rotation overwrites,
    // which keeps forgetting substantial for every draw of the geometry.
    const RINGS: [f64; 6] = [3.5, 5.0, 6.5, 8.0, 9.5, 11.0];
    let mut combos: Vec<[usize; 3]> = Vec::new();
    for a in 0..RINGS.len() {
        for b in (a + 1)..RINGS.len() {
            for c in (b + 1)..RINGS.len() {
                combos.push([a, b, c]);
            }
        }
    }
    // Angular offsets of the three bumps relative to the pair's wedge origin;
    // the sibling class cycles them one ring over.
    const OFFSETS: [f64; 3] = [0.0, 0.4, 0.8];
    let mut classes: Vec<Vec<Bump>> = Vec::with_capacity(NUM_CLASSES);
    for pair in 0..NUM_CLASSES / 2 {
        // Bumps live in one polar quadrant, the way digit strokes favour
        // certain orientations. Rotations inside the pretraining range keep
        // content in familiar pixel regions, while rotations from the
        // opposite range sweep it into territory the pretrained weights
        // never used.
        let rings = combos[4 * pair];
        let wedge = rng.random_range(0.0..std::f64::consts::FRAC_PI_2);
        let amps: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.0));
        let sigmas: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.82..1.12));
        for pattern in 0..2 {
            let bumps = (0..3)
                .map(|k| Bump {
                    radius: RINGS[rings[k]],
                    theta: wedge + OFFSETS[(k + pattern) % 3],
                    amp: amps[k],
                    sigma: sigmas[k],
                })
                .collect();
            classes.push(bumps);
        }
    }

    let pixel_noise = Normal::new(0.0, noise.max(1e-12)).expect("finite noise");
    let angular = Normal::new(0.0, BLOB_ANGULAR_JITTER_RAD).expect("finite jitter");
    let per_bump = Normal::new(0.0, BLOB_BUMP_JITTER_RAD).expect("finite jitter");
    let radial = Normal::new(0.0, BLOB_RADIAL_JITTER_PX).expect("finite jitter");
    let amp_jitter = Normal::new(0.0, 0.15).expect("finite jitter");
    let mut images = Array2::<f64>::zeros((num_examples, side * side));
    let mut labels = Vec::with_capacity(num_examples);
    let mut row = vec![0.0f64; side * side];
    for i in 0..num_examples {
        let class = i % NUM_CLASSES;
        labels.push(class);
        row.fill(0.0);
        // The whole figure swings around the circle as one piece; relative
        // bump arrangement — the label — is untouched.
        let swing = angular.sample(&mut rng);
        for bump in &classes[class] {
            let r_e = bump.radius + radial.sample(&mut rng);
            let t_e = bump.theta + swing + per_bump.sample(&mut rng);
            let amp = (bump.amp + amp_jitter.sample(&mut rng)).max(0.1);
            render_bump(&mut row, side, center, r_e, t_e, amp, bump.sigma, bump.sigma, 0.0);
        }
        for (p, v) in images.row_mut(i).iter_mut().zip(&row) {
            let noisy = if noise > 0.0 {
                v + pixel_noise.sample(&mut rng)
            } else {
                *v
            };
            *p = noisy.clamp(0.0, 1.0);
        }
    }
    Dataset {
        images,
        labels,
        rows: side,
        cols: side,
    }
}

/// Rotates one row-major image counterclockwise about its center using
/// bilinear interpolation with zero padding. `angle == 0.0` returns the
/// input unchanged.
pub fn rotate_image(src: ArrayView1<'_, f64>, rows: usize, cols: usize, angle_deg: f64) -> Vec<f64> {
    if angle_deg == 0.0 {
        return src.to_vec();
    }
    let cy = (rows as f64 - 1.0) / 2.0;
    let cx = (cols as f64 - 1.0) / 2.0;
    let (s, co) = angle_deg.to_radians().sin_cos();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            // Inverse map: sample the source at the backward-rotated point.
            let sy = cy + co * dy + s * dx;
            let sx = cx - s * dy + co * dx;
            let y0 = sy.floor();
            let x0 = sx.floor();
            let fy = sy - y0;
            let fx = sx - x0;
            let mut acc = 0.0;
            for (oy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                for (ox, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                    let yy = y0 as i64 + oy;
                    let xx = x0 as i64 + ox;
                    if yy >= 0 && (yy as usize) < rows && xx >= 0 && (xx as usize) < cols {
                        acc += wy * wx * src[yy as usize * cols + xx as usize];
                    }
                }
            }
            out[r * cols + c] = acc;
        }
    }
    out
}

/// One rotated task: `size` base examples rotated by a common angle.
#[derive(Debug, Clone)]
pub struct RotationTask {
    pub angle: f64,
    pub images: Array2<f64>,
    pub labels: Vec<usize>,
}

impl RotationTask {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Samples `n` base examples without replacement (seeded) and rotates each
/// by `angle` degrees.
pub fn make_rotated(
    base: &Dataset,
    angle: f64,
    n: usize,
    seed: u64,
) -> Result<RotationTask, OracleError> {
    if !angle.is_finite() {
        return Err(OracleError::NonFiniteAngle(angle));
    }
    if n > base.len() {
        return Err(OracleError::SampleTooLarge {
            requested: n,
            available: base.len(),
        });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, base.len(), n);
    let mut images = Array2::<f64>::zeros((n, base.input_dim()));
    let mut labels = Vec::with_capacity(n);
    for (out_row, src_row) in picks.iter().enumerate() {
        let rotated = rotate_image(base.images.row(src_row), base.rows, base.cols, angle);
        images
            .row_mut(out_row)
            .assign(&Array1::from_vec(rotated));
        labels.push(base.labels[src_row]);
    }
    Ok(RotationTask {
        angle,
        images,
        labels,
    })
}

/// Where the base images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    /// Standard IDX digit files on disk.
    Idx { images: PathBuf, labels: PathBuf },
    /// Procedural Gaussian-bump images; no external files needed.
    SyntheticBlobs {
        #[serde(default = "default_blob_base")]
        base_size: usize,
        #[serde(default = "default_blob_noise")]
        noise: f64,
    },
}

fn default_blob_base() -> usize {
    8000
}

fn default_blob_noise() -> f64 {
    0.1
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::SyntheticBlobs {
            base_size: default_blob_base(),
            noise: default_blob_noise(),
        }
    }
}

/// Pretraining angles: evenly spaced over 0–90° inclusive.
pub fn default_pretrain_angles() -> Vec<f64> {
    (0..10).map(|i| i as f64 * 10.0).collect()
}

/// Fine-tuning angles inside the pretraining range, offset by half the
/// grid spacing so they never coincide with a pretraining angle.
pub fn default_overlap_angles() -> Vec<f64> {
    (0..20).map(|i| 2.25 + 4.5 * i as f64).collect()
}

/// Fine-tuning angles from the disjoint range −90–0°.
pub fn default_disjoint_angles() -> Vec<f64> {
    (0..20).map(|i| -90.0 + 2.25 + 4.5 * i as f64).collect()
}

/// Full experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub pretrain_angles: Vec<f64>,
    pub overlap_angles: Vec<f64>,
    pub disjoint_angles: Vec<f64>,
    /// Number of weight layers (1 = a linear model).
    pub depth: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    /// Learning rate for the fine-tuning stage. When unset it is derived
    /// from `learning_rate` and `depth` (see [`OracleConfig::finetune_lr`])
    /// so that a single fine-tuning pass perturbs shallow and deep models
    /// by comparable amounts.
    pub finetune_learning_rate: Option<f64>,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    /// Examples per rotated task.
    pub task_size: usize,
    pub master_seed: u64,
    pub source: DataSource,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            pretrain_angles: default_pretrain_angles(),
            overlap_angles: default_overlap_angles(),
            disjoint_angles: default_disjoint_angles(),
            depth: 3,
            hidden: 100,
            learning_rate: 0.05,
            finetune_learning_rate: None,
            pretrain_epochs: 20,
            finetune_epochs: 1,
            batch_size: 32,
            task_size: 1000,
            master_seed: 0,
            source: DataSource::default(),
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), OracleError> {
        if !(1..=5).contains(&self.depth) {
            return Err(OracleError::BadDepth(self.depth));
        }
        for (field, ok) in [
            ("hidden", self.hidden >= 1),
            ("batch_size", self.batch_size >= 1),
            ("task_size", self.task_size >= 1),
            ("pretrain_epochs", self.pretrain_epochs >= 1),
        ] {
            if !ok {
                return Err(OracleError::NonPositive { field });
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(OracleError::NonPositive {
                field: "learning_rate",
            });
        }
        if let Some(lr) = self.finetune_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(OracleError::NonPositive {
                    field: "finetune_learning_rate",
                });
            }
        }
        for angles in [
            &self.pretrain_angles,
            &self.overlap_angles,
            &self.disjoint_angles,
        ] {
            if angles.is_empty() || !angles.iter().all(|a| a.is_finite()) {
                return Err(OracleError::BadAngles);
            }
            let mut sorted = angles.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(OracleError::BadAngles);
            }
        }
        Ok(())
    }

    /// Learning rate used for the fine-tuning stage.
    ///
    /// Explicit settings win. The default scales the pretraining rate down
    /// with depth — `learning_rate` for a linear model, then
    /// `learning_rate / (2·(depth − 1))` — because one epoch of SGD at a
    /// fixed rate displaces a deep network's function much further than a
    /// shallow one's: layerwise updates compound multiplicatively. Without
    /// the rescaling, deep fine-tuning runs overshoot into noise-dominated
    /// weight changes and the measured forgetting loses its low-rank
    /// task-by-example structure.
    pub fn finetune_lr(&self) -> f64 {
        match self.finetune_learning_rate {
            Some(lr) => lr,
            None if self.depth <= 1 => self.learning_rate,
            None => self.learning_rate / (2.0 * (self.depth as f64 - 1.0)),
        }
    }

    /// Loads (or generates) the base dataset named by `source`.
    pub fn load_source(&self) -> Result<Dataset, OracleError> {
        match &self.source {
            DataSource::Idx { images, labels } => load_idx(images, labels),
            DataSource::SyntheticBlobs { base_size, noise } => Ok(synthetic_blobs(
                *base_size,
                *noise,
                mix_seed(self.master_seed, 0, 0),
            )),
        }
    }
}

/// SplitMix64-style seed derivation so every sampled object gets an
/// independent, reproducible stream.
fn mix_seed(master: u64, domain: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(domain.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((index + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A plain fully connected ReLU classifier trained with softmax
/// cross-entropy. `depth` counts weight layers, so depth 1 is a single
/// linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

impl DenseNet {
    pub fn new(
        depth: usize,
        input: usize,
        hidden: usize,
        output: usize,
        seed: u64,
    ) -> Result<Self, OracleError> {
        if !(1..=5).contains(&depth) {
            return Err(OracleError::BadDepth(depth));
        }
        let mut dims = Vec::with_capacity(depth + 1);
        dims.push(input);
        for _ in 0..depth.saturating_sub(1) {
            dims.push(hidden);
        }
        dims.push(output);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(depth);
        let mut biases = Vec::with_capacity(depth);
        for l in 0..depth {
            let scale = (2.0 / dims[l] as f64).sqrt();
            let normal = Normal::new(0.0, scale).expect("finite init scale");
            weights.push(Array2::from_shape_fn((dims[l], dims[l + 1]), |_| {
                normal.sample(&mut rng)
            }));
            biases.push(Array1::zeros(dims[l + 1]));
        }
        Ok(Self { weights, biases })
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().expect("at least one layer").ncols()
    }

    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    /// All parameters flattened in fixed order: W₀ (row-major), b₀, W₁, b₁, …
    pub fn flat_params(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        Array1::from_vec(out)
    }

    /// Order-insensitive content hash of the weight bit patterns.
    pub fn weight_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for v in w.iter().chain(b.iter()) {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let depth = self.depth();
        let mut a = x.to_owned();
        for l in 0..depth {
            let mut z = a.dot(&self.weights[l]) + &self.biases[l];
            if l + 1 < depth {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        a
    }

    /// Per-example softmax cross-entropy in nats.
    pub fn per_example_loss(
        &self,
        images: ArrayView2<'_, f64>,
        labels: &[usize],
    ) -> Vec<f64> {
        let logits = self.logits(images);
        logits
            .axis_iter(Axis(0))
            .zip(labels)
            .map(|(row, &y)| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
                lse - row[y]
            })
            .collect()
    }

    pub fn accuracy(&self, images: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
        let logits = self.logits(images);
        let mut correct = 0usize;
        for (row, &y) in logits.axis_iter(Axis(0)).zip(labels) {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            if best == y {
                correct += 1;
            }
        }
        correct as f64 / labels.len().max(1) as f64
    }

    /// One SGD step on a batch (mean-gradient update). Returns the batch's
    /// mean loss so callers can watch for divergence.
    pub fn sgd_step(
        &mut self,
        x: ArrayView2<'_, f64>,
        labels: &[usize],
        lr: f64,
    ) -> Result<f64, OracleError> {
        let depth = self.depth();
        let batch = x.nrows();
        // Forward pass keeping post-activation values per layer.
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(depth);
        let mut a = x.to_owned();
        for l in 0..depth {
            let mut z = a.dot(&self.weights[l]) + &self.biases[l];
            if l + 1 < depth {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(a);
            a = z;
        }
        let logits = a;
        // Softmax probabilities and mean loss.
        let mut probs = Array2::<f64>::zeros(logits.raw_dim());
        let mut loss = 0.0;
        for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
            let total: f64 = exps.iter().sum();
            for (k, e) in exps.iter().enumerate() {
                probs[(i, k)] = e / total;
            }
            loss += m + total.ln() - row[labels[i]];
        }
        loss /= batch as f64;
        // Backward pass.
        let mut g = probs;
        for (i, &y) in labels.iter().enumerate() {
            g[(i, y)] -= 1.0;
        }
        g.mapv_inplace(|v| v / batch as f64);
        for l in (0..depth).rev() {
            let dw = acts[l].t().dot(&g);
            let db = g.sum_axis(Axis(0));
            if l > 0 {
                let mut back = g.dot(&self.weights[l].t());
                back.zip_mut_with(&acts[l], |gv, &av| {
                    if av <= 0.0 {
                        *gv = 0.0;
                    }
                });
                g = back;
            }
            self.weights[l].scaled_add(-lr, &dw);
            self.biases[l].scaled_add(-lr, &db);
        }
        if !loss.is_finite() {
            return Err(OracleError::Divergence { step: 0 });
        }
        Ok(loss)
    }
}

/// Gradient of the cross-entropy loss at one example with respect to every
/// parameter, flattened in the same fixed order as
/// [`DenseNet::flat_params`].
pub fn per_example_gradient(
    model: &DenseNet,
    image: ArrayView1<'_, f64>,
    label: usize,
) -> Result<Array1<f64>, OracleError> {
    let depth = model.depth();
    let mut acts: Vec<Array1<f64>> = Vec::with_capacity(depth);
    let mut a = image.to_owned();
    for l in 0..depth {
        let mut z = a.dot(&model.weights[l]) + &model.biases[l];
        if l + 1 < depth {
            z.mapv_inplace(|v| v.max(0.0));
        }
        acts.push(a);
        a = z;
    }
    let logits = a;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(OracleError::Divergence { step: 0 });
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.mapv(|v| (v - m).exp());
    let total = exps.sum();
    let mut g = exps / total;
    g[label] -= 1.0;

    let mut layer_grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(depth);
    for l in (0..depth).rev() {
        let dw = outer(&acts[l], &g);
        let db = g.clone();
        if l > 0 {
            let mut back = model.weights[l].dot(&g);
            back.zip_mut_with(&acts[l], |gv, &av| {
                if av <= 0.0 {
                    *gv = 0.0;
                }
            });
            g = back;
        }
        layer_grads.push((dw, db));
    }
    layer_grads.reverse();
    let mut flat = Vec::with_capacity(model.param_count());
    for (dw, db) in layer_grads {
        flat.extend(dw.iter().copied());
        flat.extend(db.iter().copied());
    }
    Ok(Array1::from_vec(flat))
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let (n, m) = (a.len(), b.len());
    Array2::from_shape_fn((n, m), |(i, j)| a[i] * b[j])
}

/// A pretrained model together with the upstream data and its initial
/// per-example loss snapshot (the reference point for forgetting).
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: DenseNet,
    pub snapshot: PerformanceSnapshot,
    pub tasks: Vec<RotationTask>,
    /// All upstream examples stacked task-major (matching snapshot order).
    pub upstream_images: Array2<f64>,
    pub upstream_labels: Vec<usize>,
}

impl Pretrained {
    pub fn num_upstream(&self) -> usize {
        self.upstream_labels.len()
    }

    /// Mean training accuracy over the upstream examples.
    pub fn upstream_accuracy(&self) -> f64 {
        self.model
            .accuracy(self.upstream_images.view(), &self.upstream_labels)
    }
}

/// Builds the rotated pretraining tasks for `cfg` (angle-sorted).
pub fn build_pretrain_tasks(
    cfg: &OracleConfig,
    base: &Dataset,
) -> Result<Vec<RotationTask>, OracleError> {
    let mut angles = cfg.pretrain_angles.clone();
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    angles
        .iter()
        .enumerate()
        .map(|(i, &angle)| {
            make_rotated(
                base,
                angle,
                cfg.task_size,
                mix_seed(cfg.master_seed, 1, i as u64),
            )
        })
        .collect()
}

/// Trains one model on the shuffled union of all pretraining tasks (plain
/// SGD; the rotation identity is never provided) and snapshots per-example
/// cross-entropy over every upstream example.
pub fn pretrain(cfg: &OracleConfig, base: &Dataset) -> Result<Pretrained, OracleError> {
    cfg.validate()?;
    let tasks = build_pretrain_tasks(cfg, base)?;
    let input_dim = base.input_dim();
    let total: usize = tasks.iter().map(|t| t.len()).sum();
    let mut upstream_images = Array2::<f64>::zeros((total, input_dim));
    let mut upstream_labels = Vec::with_capacity(total);
    let mut example_ids = Vec::with_capacity(total);
    let mut cursor = 0;
    for task in &tasks {
        for j in 0..task.len() {
            upstream_images.row_mut(cursor).assign(&task.images.row(j));
            upstream_labels.push(task.labels[j]);
            example_ids.push(format!("r{:+07.2}_{:04}", task.angle, j));
            cursor += 1;
        }
    }

    let mut model = DenseNet::new(
        cfg.depth,
        input_dim,
        cfg.hidden,
        NUM_CLASSES,
        mix_seed(cfg.master_seed, 2, 0),
    )?;
    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.master_seed, 3, 0));
    let mut step = 0usize;
    for _epoch in 0..cfg.pretrain_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = upstream_images.select(Axis(0), chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| upstream_labels[i]).collect();
            step += 1;
            model
                .sgd_step(batch.view(), &labels, cfg.learning_rate)
                .map_err(|_| OracleError::Divergence { step })?;
        }
    }

    let losses = model.per_example_loss(upstream_images.view(), &upstream_labels);
    let snapshot = PerformanceSnapshot::new(example_ids, losses, MatrixKind::Continuous)?;
    Ok(Pretrained {
        model,
        snapshot,
        tasks,
        upstream_images,
        upstream_labels,
    })
}

/// Replay wiring for a fine-tuning run.
#[derive(Debug, Clone)]
pub struct ReplaySetup<'a> {
    pub policy: &'a ReplayPolicy,
    pub predictor: Option<&'a RowPredictor<'a>>,
    pub seed_size: usize,
    /// Upstream indices reserved for evaluation; never replayed.
    pub held_out: &'a [usize],
    pub master_seed: u64,
}

/// One fine-tuning run driven step by step; implements the session contract
/// consumed by the replay orchestrator.
pub struct FineTuneRun<'a> {
    model: DenseNet,
    initial: DenseNet,
    pre: &'a Pretrained,
    task: &'a RotationTask,
    lr: f64,
    batch_size: usize,
    order: Vec<usize>,
    steps_taken: usize,
    total_steps: usize,
    held_out: Vec<usize>,
    run_seed: u64,
}

impl<'a> FineTuneRun<'a> {
    pub fn new(
        pre: &'a Pretrained,
        task: &'a RotationTask,
        cfg: &OracleConfig,
        held_out: Vec<usize>,
        run_seed: u64,
    ) -> Self {
        let steps_per_epoch = task.len().div_ceil(cfg.batch_size);
        let total_steps = steps_per_epoch * cfg.finetune_epochs;
        let mut run = Self {
            model: pre.model.clone(),
            initial: pre.model.clone(),
            pre,
            task,
            lr: cfg.finetune_lr(),
            batch_size: cfg.batch_size,
            order: Vec::new(),
            steps_taken: 0,
            total_steps,
            held_out,
            run_seed,
        };
        run.reshuffle();
        run
    }

    fn reshuffle(&mut self) {
        // One fixed pass order per run, repeated across epochs; the order is
        // a pure function of the run seed so reset() restores it exactly.
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(self.run_seed, 10, 0));
        let mut order: Vec<usize> = (0..self.task.len()).collect();
        order.shuffle(&mut rng);
        self.order = order;
    }

    pub fn model(&self) -> &DenseNet {
        &self.model
    }

    /// Runs every remaining step without replay.
    pub fn run_to_completion(&mut self) -> Result<(), ReplayError> {
        while self.steps_taken < self.total_steps {
            self.step(None)?;
        }
        Ok(())
    }

    /// Forgetting row over all upstream examples (current − initial loss).
    pub fn forgetting_row(&self) -> Result<Vec<f64>, OracleError> {
        let losses = self
            .model
            .per_example_loss(self.pre.upstream_images.view(), &self.pre.upstream_labels);
        let after = PerformanceSnapshot::new(
            self.pre.snapshot.example_ids().to_vec(),
            losses,
            MatrixKind::Continuous,
        )?;
        Ok(build_row(&self.pre.snapshot, &after)?)
    }
}

impl FineTuneSession for FineTuneRun<'_> {
    fn total_steps(&self) -> usize {
        self.total_steps
    }

    fn num_upstream(&self) -> usize {
        self.pre.num_upstream()
    }

    fn held_out(&self) -> &[usize] {
        &self.held_out
    }

    fn step(&mut self, replay: Option<&[usize]>) -> Result<(), ReplayError> {
        if self.steps_taken >= self.total_steps {
            return Err(ReplayError::Session(
                "fine-tuning run already complete".to_string(),
            ));
        }
        let steps_per_epoch = self.task.len().div_ceil(self.batch_size);
        let loss = match replay {
            Some(indices) => {
                let batch = self.pre.upstream_images.select(Axis(0), indices);
                let labels: Vec<usize> = indices
                    .iter()
                    .map(|&i| self.pre.upstream_labels[i])
                    .collect();
                self.model.sgd_step(batch.view(), &labels, self.lr)
            }
            None => {
                let within = self.steps_taken % steps_per_epoch;
                let lo = within * self.batch_size;
                let hi = (lo + self.batch_size).min(self.task.len());
                let chunk = &self.order[lo..hi];
                let batch = self.task.images.select(Axis(0), chunk);
                let labels: Vec<usize> =
                    chunk.iter().map(|&i| self.task.labels[i]).collect();
                self.model.sgd_step(batch.view(), &labels, self.lr)
            }
        };
        loss.map_err(|e| ReplayError::Session(e.to_string()))?;
        self.steps_taken += 1;
        Ok(())
    }

    fn measure_forgetting(&mut self, indices: &[usize]) -> Result<Vec<f64>, ReplayError> {
        let images = self.pre.upstream_images.select(Axis(0), indices);
        let labels: Vec<usize> = indices
            .iter()
            .map(|&i| self.pre.upstream_labels[i])
            .collect();
        let losses = self.model.per_example_loss(images.view(), &labels);
        Ok(indices
            .iter()
            .zip(losses)
            .map(|(&i, after)| after - self.pre.snapshot.scores()[i])
            .collect())
    }

    fn upstream_loss(&mut self) -> Result<Vec<f64>, ReplayError> {
        Ok(self
            .model
            .per_example_loss(self.pre.upstream_images.view(), &self.pre.upstream_labels))
    }

    fn grad_products(&mut self) -> Result<Vec<f64>, ReplayError> {
        let delta = &self.model.flat_params() - &self.initial.flat_params();
        let mut products = Vec::with_capacity(self.pre.num_upstream());
        for j in 0..self.pre.num_upstream() {
            let grad = per_example_gradient(
                &self.initial,
                self.pre.upstream_images.row(j),
                self.pre.upstream_labels[j],
            )
            .map_err(|e| ReplayError::Session(e.to_string()))?;
            products.push(delta.dot(&grad));
        }
        Ok(products)
    }

    fn reset(&mut self) {
        self.model = self.initial.clone();
        self.steps_taken = 0;
        self.reshuffle();
    }
}

/// Clones the pretrained model, fine-tunes it on `task`, and returns the
/// per-upstream-example loss increase. The original model is untouched.
/// With a [`ReplaySetup`], replay batches are injected per the policy and
/// the resulting trace returned alongside the row.
pub fn finetune_and_measure(
    pre: &Pretrained,
    task: &RotationTask,
    cfg: &OracleConfig,
    replay: Option<&ReplaySetup<'_>>,
) -> Result<(Vec<f64>, Option<ReplayTrace>), OracleError> {
    let run_seed = mix_seed(cfg.master_seed, 4, task.angle.to_bits() & 0xFFFF_FFFF);
    match replay {
        None => {
            let mut run = FineTuneRun::new(pre, task, cfg, Vec::new(), run_seed);
            run.run_to_completion()?;
            Ok((run.forgetting_row()?, None))
        }
        Some(setup) => {
            let mut run =
                FineTuneRun::new(pre, task, cfg, setup.held_out.to_vec(), run_seed);
            let trace = orchestrate(
                setup.policy,
                &mut run,
                setup.predictor,
                setup.seed_size,
                setup.master_seed,
            )?;
            Ok((run.forgetting_row()?, Some(trace)))
        }
    }
}

/// Runs the full pipeline: pretrain once, then fine-tune independently on
/// every unseen rotation from the shared pretrained weights, assembling one
/// forgetting matrix per regime (rows and columns angle-sorted).
pub fn run_experiment(
    cfg: &OracleConfig,
) -> Result<(AssociationMatrix, AssociationMatrix), OracleError> {
    cfg.validate()?;
    let base = cfg.load_source()?;
    let pre = pretrain(cfg, &base)?;
    let overlap = regime_matrix(cfg, &base, &pre, &cfg.overlap_angles, 5)?;
    let disjoint = regime_matrix(cfg, &base, &pre, &cfg.disjoint_angles, 6)?;
    Ok((overlap, disjoint))
}

fn regime_matrix(
    cfg: &OracleConfig,
    base: &Dataset,
    pre: &Pretrained,
    angles: &[f64],
    domain: u64,
) -> Result<AssociationMatrix, OracleError> {
    let mut sorted = angles.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let tasks: Vec<RotationTask> = sorted
        .iter()
        .enumerate()
        .map(|(i, &angle)| {
            make_rotated(base, angle, cfg.task_size, mix_seed(cfg.master_seed, domain, i as u64))
        })
        .collect::<Result<_, _>>()?;
    // Independent runs from the shared immutable pretrained weights.
    let rows: Vec<Vec<f64>> = tasks
        .par_iter()
        .map(|task| finetune_and_measure(pre, task, cfg, None).map(|(row, _)| row))
        .collect::<Result<_, _>>()?;
    let task_ids: Vec<String> = sorted.iter().map(|a| format!("{a:+.2}")).collect();
    let pairs: Vec<(String, Vec<f64>)> = task_ids.into_iter().zip(rows).collect();
    Ok(AssociationMatrix::from_rows(
        MatrixKind::Continuous,
        pre.snapshot.example_ids().to_vec(),
        pairs,
    )?)
}
