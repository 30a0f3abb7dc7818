//! Feature-map datasets: ingestion types, synthetic generation, and
//! partition pooling into part-level feature vectors.

use ndarray::{Array2, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Xoshiro256StarStar;

/// Number of stripes at the finest default partition level; the synthetic
/// generator works stripe-by-stripe at this granularity.
pub const SYNTH_STRIPES: usize = 6;

/// A per-image grid of d-dimensional descriptors plus an identity label.
///
/// Values are stored row-major as `(row, col, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    rows: usize,
    cols: usize,
    dim: usize,
    values: Vec<f32>,
    pub label: u32,
}

impl FeatureMap {
    pub fn new(rows: usize, cols: usize, dim: usize, values: Vec<f32>, label: u32) -> Result<Self> {
        if rows == 0 || cols == 0 || dim == 0 {
            return Err(Error::Invalid(format!(
                "feature map dimensions must be positive, got {rows}x{cols}x{dim}"
            )));
        }
        if values.len() != rows * cols * dim {
            return Err(Error::ShapeMismatch(format!(
                "feature map expects {} values, got {}",
                rows * cols * dim,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "feature map value",
                detail: format!("element {pos} of a {rows}x{cols}x{dim} grid"),
            });
        }
        Ok(FeatureMap {
            rows,
            cols,
            dim,
            values,
            label,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.values[(row * self.cols + col) * self.dim + channel]
    }
}

/// Uniform-partition levels, coarse to fine. Default `[1, 3, 6]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionSpec {
    levels: Vec<u32>,
}

impl PartitionSpec {
    pub fn new(levels: Vec<u32>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("levels must be non-empty".into()));
        }
        if levels[0] == 0 {
            return Err(Error::Config("levels must be positive".into()));
        }
        if !levels.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!(
                "levels must be strictly increasing, got {levels:?}"
            )));
        }
        Ok(PartitionSpec { levels })
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    /// Total node count N = sum of level sizes.
    pub fn num_parts(&self) -> usize {
        self.levels.iter().map(|&n| n as usize).sum()
    }

    /// A spec holding only the finest level (used by the single-layer
    /// retrieval variant).
    pub fn finest_only(&self) -> PartitionSpec {
        PartitionSpec {
            levels: vec![*self.levels.last().expect("non-empty levels")],
        }
    }
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec {
            levels: vec![1, 3, 6],
        }
    }
}

/// Identifies a part as (position of its level in the spec, stripe index
/// within the level), both zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PartId {
    pub level: usize,
    pub part: usize,
}

/// Pooled part vectors in canonical order: coarsest level first, stripes
/// top to bottom within each level.
#[derive(Debug, Clone)]
pub struct PartFeatureSet<F> {
    pub features: Array2<F>,
    pub parts: Vec<PartId>,
}

impl<F: NdFloat> PartFeatureSet<F> {
    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Average-pool the grid into one vector per part, for every level of the
/// spec. Stripe `i` of a level with `n` stripes pools rows
/// `i*rows/n ..< (i+1)*rows/n` across all columns.
pub fn partition_pool<F: NdFloat>(
    fmap: &FeatureMap,
    spec: &PartitionSpec,
) -> Result<PartFeatureSet<F>> {
    for &n in spec.levels() {
        if !fmap.rows().is_multiple_of(n as usize) {
            return Err(Error::Invalid(format!(
                "rows {} not divisible by partition level {n}",
                fmap.rows()
            )));
        }
    }
    let dim = fmap.dim();
    let n_parts = spec.num_parts();
    let mut features = Array2::<F>::zeros((n_parts, dim));
    let mut parts = Vec::with_capacity(n_parts);
    let mut row_idx = 0;
    let mut acc = vec![0f64; dim];
    for (level, &n) in spec.levels().iter().enumerate() {
        let stripe_rows = fmap.rows() / n as usize;
        let cells = (stripe_rows * fmap.cols()) as f64;
        for part in 0..n as usize {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for r in part * stripe_rows..(part + 1) * stripe_rows {
                for c in 0..fmap.cols() {
                    for (ch, a) in acc.iter_mut().enumerate() {
                        *a += fmap.at(r, c, ch) as f64;
                    }
                }
            }
            for (ch, a) in acc.iter().enumerate() {
                features[(row_idx, ch)] = F::from(*a / cells).expect("f64 fits in F");
            }
            parts.push(PartId { level, part });
            row_idx += 1;
        }
    }
    Ok(PartFeatureSet { features, parts })
}

/// Index lists defining how a dataset is used.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
}

/// Synthetic generator configuration. Generation is a pure function of this
/// struct, including the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    pub corrupt_prob: f64,
    pub seed: u64,
    /// Identities whose images go to the train split. `None` puts every
    /// identity in train and builds query/gallery over the same images;
    /// `Some(k)` trains on identities `0..k` and evaluates on the rest.
    #[serde(default)]
    pub train_identities: Option<usize>,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 2 {
            return Err(Error::Config(format!(
                "synth.n_identities must be at least 2 (retrieval is undefined otherwise), got {}",
                self.n_identities
            )));
        }
        if self.images_per_identity < 2 {
            return Err(Error::Config(format!(
                "synth.images_per_identity must be at least 2 so every query identity \
                 appears in the gallery, got {}",
                self.images_per_identity
            )));
        }
        if self.rows == 0 || !self.rows.is_multiple_of(SYNTH_STRIPES) {
            return Err(Error::Config(format!(
                "synth.rows must be a positive multiple of {SYNTH_STRIPES}, got {}",
                self.rows
            )));
        }
        if self.cols == 0 || self.dim == 0 {
            return Err(Error::Config(format!(
                "synth.cols and synth.dim must be positive, got {} and {}",
                self.cols, self.dim
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "synth.noise_sigma must be a finite nonnegative number, got {}",
                self.noise_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.corrupt_prob) {
            return Err(Error::Config(format!(
                "synth.corrupt_prob must be in [0, 1], got {}",
                self.corrupt_prob
            )));
        }
        if let Some(k) = self.train_identities {
            if k == 0 || k > self.n_identities {
                return Err(Error::Config(format!(
                    "synth.train_identities must be in 1..={}, got {k}",
                    self.n_identities
                )));
            }
            if k == self.n_identities {
                return Err(Error::Config(
                    "synth.train_identities must leave at least one identity for \
                     evaluation; omit it to train and evaluate on all identities"
                        .into(),
                ));
            }
        }
        Ok(())
    }
}

/// A set of feature maps plus split assignments and optional generator
/// provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<FeatureMap>,
    pub split: SplitIndices,
    pub meta: Option<SynthConfig>,
}

impl Dataset {
    /// Check split invariants: indices in range, query and gallery disjoint,
    /// every query identity present in the gallery.
    pub fn validate_split(&self) -> Result<()> {
        let n = self.images.len();
        for (name, idxs) in [
            ("train", &self.split.train),
            ("query", &self.split.query),
            ("gallery", &self.split.gallery),
        ] {
            if let Some(&bad) = idxs.iter().find(|&&i| i >= n) {
                return Err(Error::Invalid(format!(
                    "{name} split index {bad} out of range for {n} images"
                )));
            }
        }
        let gallery_set: std::collections::BTreeSet<usize> =
            self.split.gallery.iter().copied().collect();
        if let Some(&dup) = self.split.query.iter().find(|i| gallery_set.contains(i)) {
            return Err(Error::Invalid(format!(
                "image {dup} appears in both query and gallery splits"
            )));
        }
        let gallery_labels: std::collections::BTreeSet<u32> = self
            .split
            .gallery
            .iter()
            .map(|&i| self.images[i].label)
            .collect();
        for &q in &self.split.query {
            if !gallery_labels.contains(&self.images[q].label) {
                return Err(Error::Invalid(format!(
                    "query image {q} (identity {}) has no gallery match",
                    self.images[q].label
                )));
            }
        }
        Ok(())
    }
}

/// Generate a seeded synthetic dataset.
///
/// Procedure, in fixed draw order from a single xoshiro256** stream seeded
/// by `cfg.seed`:
///
/// 1. For each identity, draw one standard-normal prototype vector per
///    finest-level stripe (six stripes).
/// 2. For each image and stripe, draw a fresh noise vector; the stripe's
///    grid block is `prototype + noise_sigma * noise`, the same vector
///    replicated over every cell of the block.
/// 3. After the noise draw, one uniform decides corruption: with
///    probability `corrupt_prob` the block is instead a fresh
///    standard-normal vector, again replicated over the block.
/// 4. Splits: train takes all images of the train identities (all
///    identities when `train_identities` is unset); for each evaluation
///    identity the first image becomes a query and the rest gallery.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = Xoshiro256StarStar::from_seed(cfg.seed);
    let stripe_rows = cfg.rows / SYNTH_STRIPES;

    let draw_vec = |rng: &mut Xoshiro256StarStar, dim: usize| -> Vec<f64> {
        (0..dim).map(|_| rng.next_normal()).collect()
    };

    let mut prototypes = Vec::with_capacity(cfg.n_identities);
    for _ in 0..cfg.n_identities {
        let per_stripe: Vec<Vec<f64>> = (0..SYNTH_STRIPES)
            .map(|_| draw_vec(&mut rng, cfg.dim))
            .collect();
        prototypes.push(per_stripe);
    }

    let mut images = Vec::with_capacity(cfg.n_identities * cfg.images_per_identity);
    for (id, protos) in prototypes.iter().enumerate() {
        for _ in 0..cfg.images_per_identity {
            let mut values = vec![0f32; cfg.rows * cfg.cols * cfg.dim];
            for (stripe, proto) in protos.iter().enumerate() {
                let noise = draw_vec(&mut rng, cfg.dim);
                let corrupted = rng.next_f64() < cfg.corrupt_prob;
                let block: Vec<f64> = if corrupted {
                    draw_vec(&mut rng, cfg.dim)
                } else {
                    proto
                        .iter()
                        .zip(&noise)
                        .map(|(p, n)| p + cfg.noise_sigma * n)
                        .collect()
                };
                for r in stripe * stripe_rows..(stripe + 1) * stripe_rows {
                    for c in 0..cfg.cols {
                        let base = (r * cfg.cols + c) * cfg.dim;
                        for (ch, v) in block.iter().enumerate() {
                            values[base + ch] = *v as f32;
                        }
                    }
                }
            }
            images.push(FeatureMap::new(cfg.rows, cfg.cols, cfg.dim, values, id as u32)?);
        }
    }

    let train_ids = cfg.train_identities.unwrap_or(cfg.n_identities);
    let eval_start = if train_ids == cfg.n_identities {
        0
    } else {
        train_ids
    };
    let mut split = SplitIndices::default();
    for id in 0..cfg.n_identities {
        let first = id * cfg.images_per_identity;
        if id < train_ids {
            split.train.extend(first..first + cfg.images_per_identity);
        }
        if id >= eval_start {
            split.query.push(first);
            split.gallery.extend(first + 1..first + cfg.images_per_identity);
        }
    }

    let dataset = Dataset {
        images,
        split,
        meta: Some(cfg.clone()),
    };
    dataset.validate_split()?;
    Ok(dataset)
}
