//! Embedding extraction, distance computation, and retrieval metrics
//! (CMC at fixed ranks, mean average precision), with the single-layer and
//! appearance-only ablation variants.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, FeatureMap, PartitionSpec};
use crate::error::{Error, Result};
use crate::graph::{build_topology, GraphTopology};
use crate::model::{appearance_project, fuse, gcn_layer, prepare_image, DeltaPolicy, ModelParams};

/// Which pipeline produces the embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[derive(Default)]
pub enum Variant {
    /// Full hierarchical graph, fused features.
    #[default]
    Phgcn,
    /// Graph restricted to the finest level (intra-layer edges only).
    Pgcn,
    /// Appearance stream only; the graph output is dropped.
    Nogcn,
}


impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Phgcn => "phgcn",
            Variant::Pgcn => "pgcn",
            Variant::Nogcn => "nogcn",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phgcn" => Ok(Variant::Phgcn),
            "pgcn" => Ok(Variant::Pgcn),
            "nogcn" => Ok(Variant::Nogcn),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected phgcn, pgcn, or nogcn)"
            ))),
        }
    }
}

/// A concatenation of per-part fused feature vectors in canonical part
/// order, optionally L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f32>,
    normalized: bool,
}

impl Embedding {
    /// Wrap raw values without normalizing.
    pub fn from_raw(values: Vec<f32>) -> Self {
        Embedding {
            values,
            normalized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Stable content hash used as the last ranking tie-breaker so results
    /// do not depend on gallery ordering.
    pub fn content_digest(&self) -> u64 {
        let mut hasher = Sha256::new();
        for v in &self.values {
            hasher.update(v.to_le_bytes());
        }
        let digest = hasher.finalize();
        u64::from_be_bytes(digest[..8].try_into().expect("sha256 digest is 32 bytes"))
    }
}

fn l2_normalize(mut values: Vec<f32>) -> Vec<f32> {
    let norm = values
        .iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > 0.0 {
        for v in &mut values {
            *v = ((*v as f64) / norm) as f32;
        }
    }
    values
}

fn fused_rows(
    x: &crate::dataset::PartFeatureSet<f32>,
    a_norm: &crate::graph::NormalizedAdjacency<f32>,
    params: &ModelParams<f32>,
) -> Result<Array2<f32>> {
    let mut h = x.features.clone();
    for theta in &params.theta {
        let (_, out) = gcn_layer(&h, a_norm, theta, params.eps, true)?;
        h = out;
    }
    let (_, f) = appearance_project(&x.features, &params.proj)?;
    fuse(&h, &f, params.beta)
}

/// Extract the retrieval embedding of one image. The embedding is
/// L2-normalized; an all-zero embedding is left as-is.
pub fn embed(
    fmap: &FeatureMap,
    spec: &PartitionSpec,
    topo: &GraphTopology,
    params: &ModelParams<f32>,
    delta: &DeltaPolicy,
    variant: Variant,
) -> Result<Embedding> {
    let rows = match variant {
        Variant::Phgcn => {
            let (x, a_norm) = prepare_image::<f32>(fmap, spec, topo, delta)?;
            fused_rows(&x, &a_norm, params)?
        }
        Variant::Pgcn => {
            let fine_spec = spec.finest_only();
            let fine_topo = build_topology(&fine_spec);
            let (x, a_norm) = prepare_image::<f32>(fmap, &fine_spec, &fine_topo, delta)?;
            fused_rows(&x, &a_norm, params)?
        }
        Variant::Nogcn => {
            let x = crate::dataset::partition_pool::<f32>(fmap, spec)?;
            let (_, f) = appearance_project(&x.features, &params.proj)?;
            f
        }
    };
    let flat: Vec<f32> = rows.iter().copied().collect();
    Ok(Embedding {
        values: l2_normalize(flat),
        normalized: true,
    })
}

/// Euclidean distances between every query and gallery embedding.
pub fn pairwise_distances(queries: &[Embedding], gallery: &[Embedding]) -> Result<Array2<f64>> {
    let dim = queries
        .first()
        .or_else(|| gallery.first())
        .map_or(0, Embedding::dim);
    for e in queries.iter().chain(gallery) {
        if e.dim() != dim {
            return Err(Error::ShapeMismatch(format!(
                "embedding dimension {} does not match {dim}",
                e.dim()
            )));
        }
    }
    let mut dist = Array2::<f64>::zeros((queries.len(), gallery.len()));
    for (qi, q) in queries.iter().enumerate() {
        for (gi, g) in gallery.iter().enumerate() {
            let mut acc = 0.0f64;
            for (a, b) in q.values.iter().zip(&g.values) {
                let d = *a as f64 - *b as f64;
                acc += d * d;
            }
            dist[(qi, gi)] = acc.sqrt();
        }
    }
    Ok(dist)
}

/// Gallery-order-independent tie keys when no embedding content is
/// available: the gallery index itself.
pub fn index_tie_digests(n: usize) -> Vec<u64> {
    (0..n as u64).collect()
}

/// Gallery positions sorted ascending by (distance, label, digest).
fn ranked_order(dist_row: &[f64], gallery_labels: &[u32], tie_digests: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dist_row.len()).collect();
    order.sort_by(|&a, &b| {
        dist_row[a]
            .total_cmp(&dist_row[b])
            .then_with(|| gallery_labels[a].cmp(&gallery_labels[b]))
            .then_with(|| tie_digests[a].cmp(&tie_digests[b]))
    });
    order
}

fn check_metric_inputs(
    dist: &Array2<f64>,
    query_labels: &[u32],
    gallery_labels: &[u32],
    tie_digests: &[u64],
) -> Result<()> {
    if dist.nrows() != query_labels.len()
        || dist.ncols() != gallery_labels.len()
        || tie_digests.len() != gallery_labels.len()
    {
        return Err(Error::ShapeMismatch(format!(
            "distance matrix {}x{} vs {} query labels, {} gallery labels, {} tie keys",
            dist.nrows(),
            dist.ncols(),
            query_labels.len(),
            gallery_labels.len(),
            tie_digests.len()
        )));
    }
    Ok(())
}

/// CMC at each requested rank (clamped to the gallery size), plus the
/// number of queries excluded because their identity never occurs in the
/// gallery.
pub fn cmc(
    dist: &Array2<f64>,
    query_labels: &[u32],
    gallery_labels: &[u32],
    tie_digests: &[u64],
    ranks: &[usize],
) -> Result<(Vec<f64>, usize)> {
    check_metric_inputs(dist, query_labels, gallery_labels, tie_digests)?;
    if ranks.contains(&0) {
        return Err(Error::Invalid("CMC ranks must be positive".into()));
    }
    let gallery_size = gallery_labels.len();
    let mut counts = vec![0usize; ranks.len()];
    let mut valid = 0usize;
    let mut excluded = 0usize;
    for (qi, &qlabel) in query_labels.iter().enumerate() {
        if !gallery_labels.contains(&qlabel) {
            excluded += 1;
            continue;
        }
        valid += 1;
        let row = dist.row(qi);
        let order = ranked_order(row.as_slice().expect("standard layout"), gallery_labels, tie_digests);
        let first_match = order
            .iter()
            .position(|&g| gallery_labels[g] == qlabel)
            .expect("identity present in gallery");
        for (ri, &k) in ranks.iter().enumerate() {
            if first_match < k.min(gallery_size) {
                counts[ri] += 1;
            }
        }
    }
    if valid == 0 {
        return Err(Error::Invalid(
            "no query identity occurs in the gallery".into(),
        ));
    }
    let values = counts
        .iter()
        .map(|&c| c as f64 / valid as f64)
        .collect();
    Ok((values, excluded))
}

/// Mean average precision over queries with at least one gallery match;
/// returns the mAP and the number of excluded queries.
pub fn mean_ap(
    dist: &Array2<f64>,
    query_labels: &[u32],
    gallery_labels: &[u32],
    tie_digests: &[u64],
) -> Result<(f64, usize)> {
    check_metric_inputs(dist, query_labels, gallery_labels, tie_digests)?;
    let mut ap_sum = 0.0;
    let mut valid = 0usize;
    let mut excluded = 0usize;
    for (qi, &qlabel) in query_labels.iter().enumerate() {
        let row = dist.row(qi);
        let order = ranked_order(row.as_slice().expect("standard layout"), gallery_labels, tie_digests);
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (pos, &g) in order.iter().enumerate() {
            if gallery_labels[g] == qlabel {
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
            }
        }
        if hits == 0 {
            excluded += 1;
            continue;
        }
        valid += 1;
        ap_sum += precision_sum / hits as f64;
    }
    if valid == 0 {
        return Err(Error::Invalid(
            "no query identity occurs in the gallery".into(),
        ));
    }
    Ok((ap_sum / valid as f64, excluded))
}

/// CMC values at the report's fixed ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmcAtRanks {
    #[serde(rename = "1")]
    pub rank1: f64,
    #[serde(rename = "5")]
    pub rank5: f64,
    #[serde(rename = "10")]
    pub rank10: f64,
}

/// Evaluation outcome, serialized with a stable field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub map: f64,
    pub cmc: CmcAtRanks,
    pub num_queries: usize,
    pub num_gallery: usize,
    pub excluded_queries: usize,
    pub seed: u64,
    pub config_digest: String,
}

/// The fixed report ranks.
pub const REPORT_RANKS: [usize; 3] = [1, 5, 10];

/// Embed the query and gallery splits and score them.
pub fn evaluate(
    dataset: &Dataset,
    spec: &PartitionSpec,
    params: &ModelParams<f32>,
    delta: &DeltaPolicy,
    variant: Variant,
    seed: u64,
    config_digest: &str,
) -> Result<EvalReport> {
    if dataset.split.query.is_empty() {
        return Err(Error::Invalid("query split is empty".into()));
    }
    if dataset.split.gallery.is_empty() {
        return Err(Error::Invalid("gallery split is empty".into()));
    }
    dataset.validate_split()?;
    let topo = build_topology(spec);

    let embed_split = |idxs: &[usize]| -> Result<Vec<Embedding>> {
        idxs.iter()
            .map(|&i| embed(&dataset.images[i], spec, &topo, params, delta, variant))
            .collect()
    };
    let queries = embed_split(&dataset.split.query)?;
    let gallery = embed_split(&dataset.split.gallery)?;
    let query_labels: Vec<u32> = dataset.split.query.iter().map(|&i| dataset.images[i].label).collect();
    let gallery_labels: Vec<u32> =
        dataset.split.gallery.iter().map(|&i| dataset.images[i].label).collect();
    let tie_digests: Vec<u64> = gallery.iter().map(Embedding::content_digest).collect();

    let dist = pairwise_distances(&queries, &gallery)?;
    let (cmc_values, excluded) =
        cmc(&dist, &query_labels, &gallery_labels, &tie_digests, &REPORT_RANKS)?;
    let (map, _) = mean_ap(&dist, &query_labels, &gallery_labels, &tie_digests)?;

    Ok(EvalReport {
        variant,
        map,
        cmc: CmcAtRanks {
            rank1: cmc_values[0],
            rank5: cmc_values[1],
            rank10: cmc_values[2],
        },
        num_queries: query_labels.len(),
        num_gallery: gallery_labels.len(),
        excluded_queries: excluded,
        seed,
        config_digest: config_digest.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthConfig};
    use crate::model::{init_params, ModelConfig};

    fn unit(dim: usize, hot: usize) -> Embedding {
        let mut values = vec![0.0f32; dim];
        values[hot] = 1.0;
        Embedding {
            values,
            normalized: true,
        }
    }

    #[test]
    fn distance_identities() {
        let a = unit(4, 0);
        let b = unit(4, 1);
        let d = pairwise_distances(std::slice::from_ref(&a), &[a.clone(), b]).unwrap();
        assert_eq!(d[(0, 0)], 0.0);
        assert!((d[(0, 1)] - std::f64::consts::SQRT_2).abs() < 1e-7);
    }

    #[test]
    fn distance_is_symmetric_in_roles() {
        let a = unit(3, 0);
        let b = unit(3, 2);
        let d1 = pairwise_distances(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap();
        let d2 = pairwise_distances(&[b], &[a]).unwrap();
        assert_eq!(d1[(0, 0)], d2[(0, 0)]);
    }

    #[test]
    fn distance_rejects_dim_mismatch() {
        let a = unit(3, 0);
        let b = unit(4, 0);
        assert!(pairwise_distances(&[a], &[b]).is_err());
    }

    #[test]
    fn cmc_hand_case() {
        // Two queries; the first's match is ranked 1st, the second's 3rd.
        let dist = ndarray::array![
            [0.1, 0.5, 0.6, 0.9],
            [0.2, 0.3, 0.4, 0.8],
        ];
        let qlabels = [1, 2];
        let glabels = [1, 9, 9, 2];
        let keys = index_tie_digests(4);
        let (values, excluded) = cmc(&dist, &qlabels, &glabels, &keys, &[1, 5]).unwrap();
        assert_eq!(values, vec![0.5, 1.0]);
        assert_eq!(excluded, 0);
    }

    #[test]
    fn cmc_clamps_large_ranks() {
        let dist = ndarray::array![[0.3, 0.1, 0.2]];
        let glabels = [7, 8, 7];
        let keys = index_tie_digests(3);
        let (clamped, _) = cmc(&dist, &[7], &glabels, &keys, &[1_000_000]).unwrap();
        let (at_gallery, _) = cmc(&dist, &[7], &glabels, &keys, &[3]).unwrap();
        assert_eq!(clamped, at_gallery);
    }

    #[test]
    fn queries_without_matches_are_excluded() {
        let dist = ndarray::array![[0.1, 0.2], [0.3, 0.1]];
        let glabels = [5, 5];
        let keys = index_tie_digests(2);
        let (values, excluded) = cmc(&dist, &[5, 6], &glabels, &keys, &[1]).unwrap();
        assert_eq!(excluded, 1);
        assert_eq!(values, vec![1.0]);
        let (map, excluded) = mean_ap(&dist, &[5, 6], &glabels, &keys).unwrap();
        assert_eq!(excluded, 1);
        assert_eq!(map, 1.0);
    }

    #[test]
    fn ap_hand_case() {
        // Ranked relevance pattern [1, 0, 1]: AP = (1/1 + 2/3) / 2.
        let dist = ndarray::array![[0.1, 0.2, 0.3]];
        let glabels = [4, 9, 4];
        let keys = index_tie_digests(3);
        let (map, _) = mean_ap(&dist, &[4], &glabels, &keys).unwrap();
        assert!((map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((map - 0.833333).abs() < 1e-6);
    }

    #[test]
    fn perfect_ranking_gives_ap_one() {
        let dist = ndarray::array![[0.1, 0.2, 0.9, 0.8]];
        let glabels = [4, 4, 7, 8];
        let keys = index_tie_digests(4);
        let (map, _) = mean_ap(&dist, &[4], &glabels, &keys).unwrap();
        assert_eq!(map, 1.0);
    }

    /// Brute-force AP straight from the definition: explicit precision at
    /// every rank, independent of the implementation above.
    fn brute_force_ap(
        dist_row: &[f64],
        qlabel: u32,
        glabels: &[u32],
        keys: &[u64],
    ) -> Option<f64> {
        let mut order: Vec<usize> = (0..dist_row.len()).collect();
        order.sort_by(|&a, &b| {
            dist_row[a]
                .total_cmp(&dist_row[b])
                .then_with(|| glabels[a].cmp(&glabels[b]))
                .then_with(|| keys[a].cmp(&keys[b]))
        });
        let relevant: Vec<bool> = order.iter().map(|&g| glabels[g] == qlabel).collect();
        let total_relevant = relevant.iter().filter(|&&r| r).count();
        if total_relevant == 0 {
            return None;
        }
        let mut ap = 0.0;
        for rank in 1..=relevant.len() {
            if relevant[rank - 1] {
                let hits_at_rank = relevant[..rank].iter().filter(|&&r| r).count();
                ap += hits_at_rank as f64 / rank as f64;
            }
        }
        Some(ap / total_relevant as f64)
    }

    #[test]
    fn mean_ap_matches_brute_force_on_random_instances() {
        let mut rng = crate::rng::Xoshiro256StarStar::from_seed(2024);
        for _ in 0..30 {
            let n_gallery = 2 + rng.next_below(18) as usize;
            let n_query = 1 + rng.next_below(5) as usize;
            let n_ids = 2 + rng.next_below(4) as u32;
            let glabels: Vec<u32> = (0..n_gallery).map(|_| rng.next_below(n_ids as u64) as u32).collect();
            let qlabels: Vec<u32> = (0..n_query).map(|_| rng.next_below(n_ids as u64) as u32).collect();
            let keys = index_tie_digests(n_gallery);
            let mut dist = Array2::<f64>::zeros((n_query, n_gallery));
            for v in dist.iter_mut() {
                *v = rng.next_f64();
            }
            let mut aps = Vec::new();
            for (qi, &ql) in qlabels.iter().enumerate() {
                let row: Vec<f64> = dist.row(qi).to_vec();
                if let Some(ap) = brute_force_ap(&row, ql, &glabels, &keys) {
                    aps.push(ap);
                }
            }
            match mean_ap(&dist, &qlabels, &glabels, &keys) {
                Ok((map, _)) => {
                    let expect = aps.iter().sum::<f64>() / aps.len() as f64;
                    assert!((map - expect).abs() < 1e-9, "{map} vs {expect}");
                }
                Err(_) => assert!(aps.is_empty()),
            }
        }
    }

    #[test]
    fn metrics_are_invariant_to_gallery_permutation() {
        let mut rng = crate::rng::Xoshiro256StarStar::from_seed(31);
        let n_gallery = 12;
        let glabels: Vec<u32> = (0..n_gallery).map(|_| rng.next_below(3) as u32).collect();
        let keys: Vec<u64> = (0..n_gallery).map(|_| rng.next_u64()).collect();
        let qlabels = [0u32, 1, 2];
        let mut dist = Array2::<f64>::zeros((3, n_gallery));
        for v in dist.iter_mut() {
            // Coarse grid so exact distance ties occur.
            *v = (rng.next_below(5) as f64) * 0.25;
        }
        let (base_cmc, _) = cmc(&dist, &qlabels, &glabels, &keys, &[1, 2, 5]).unwrap();
        let (base_map, _) = mean_ap(&dist, &qlabels, &glabels, &keys).unwrap();

        let mut perm: Vec<usize> = (0..n_gallery).collect();
        rng.shuffle(&mut perm);
        let pg: Vec<u32> = perm.iter().map(|&i| glabels[i]).collect();
        let pk: Vec<u64> = perm.iter().map(|&i| keys[i]).collect();
        let mut pdist = Array2::<f64>::zeros((3, n_gallery));
        for q in 0..3 {
            for (new_g, &old_g) in perm.iter().enumerate() {
                pdist[(q, new_g)] = dist[(q, old_g)];
            }
        }
        let (perm_cmc, _) = cmc(&pdist, &qlabels, &pg, &pk, &[1, 2, 5]).unwrap();
        let (perm_map, _) = mean_ap(&pdist, &qlabels, &pg, &pk).unwrap();
        assert_eq!(base_cmc, perm_cmc);
        assert_eq!(base_map, perm_map);
    }

    fn trained_free_model(dim: usize) -> ModelParams<f32> {
        let cfg = ModelConfig {
            hidden_dim: 16,
            ..ModelConfig::default()
        };
        init_params::<f32>(dim, 3, 10, &cfg, 42).unwrap()
    }

    #[test]
    fn embedding_dimensions_per_variant() {
        let ds = generate_synthetic(&SynthConfig {
            n_identities: 2,
            images_per_identity: 2,
            rows: 12,
            cols: 4,
            dim: 8,
            noise_sigma: 0.1,
            corrupt_prob: 0.0,
            seed: 8,
            train_identities: None,
        })
        .unwrap();
        let spec = PartitionSpec::default();
        let topo = build_topology(&spec);
        let params = trained_free_model(8);
        let delta = DeltaPolicy::Auto;
        let e = embed(&ds.images[0], &spec, &topo, &params, &delta, Variant::Phgcn).unwrap();
        assert_eq!(e.dim(), 10 * 16);
        let e = embed(&ds.images[0], &spec, &topo, &params, &delta, Variant::Pgcn).unwrap();
        assert_eq!(e.dim(), 6 * 16);
        let e = embed(&ds.images[0], &spec, &topo, &params, &delta, Variant::Nogcn).unwrap();
        assert_eq!(e.dim(), 10 * 16);
        // Unit norm within 1e-6, measured in f64.
        let norm: f64 = e.values().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn nogcn_ignores_the_graph_entirely() {
        let ds = generate_synthetic(&SynthConfig {
            n_identities: 2,
            images_per_identity: 2,
            rows: 12,
            cols: 4,
            dim: 8,
            noise_sigma: 0.4,
            corrupt_prob: 0.5,
            seed: 21,
            train_identities: None,
        })
        .unwrap();
        let spec = PartitionSpec::default();
        let topo = build_topology(&spec);
        let params = trained_free_model(8);
        // Any delta policy produces the same appearance-only embedding: the
        // graph path is not evaluated at all.
        let a = embed(&ds.images[1], &spec, &topo, &params, &DeltaPolicy::Auto, Variant::Nogcn)
            .unwrap();
        let b = embed(
            &ds.images[1],
            &spec,
            &topo,
            &params,
            &DeltaPolicy::Fixed(123.0),
            Variant::Nogcn,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn evaluate_separable_synthetic_is_perfect() {
        let ds = generate_synthetic(&SynthConfig {
            n_identities: 4,
            images_per_identity: 3,
            rows: 12,
            cols: 4,
            dim: 16,
            noise_sigma: 0.0,
            corrupt_prob: 0.0,
            seed: 77,
            train_identities: None,
        })
        .unwrap();
        let spec = PartitionSpec::default();
        let params = init_params::<f32>(
            16,
            4,
            10,
            &ModelConfig {
                hidden_dim: 16,
                ..ModelConfig::default()
            },
            3,
        )
        .unwrap();
        let report = evaluate(&ds, &spec, &params, &DeltaPolicy::Auto, Variant::Phgcn, 77, "digest")
            .unwrap();
        assert_eq!(report.map, 1.0);
        assert_eq!(report.cmc.rank1, 1.0);
        assert_eq!(report.num_queries, 4);
        assert_eq!(report.num_gallery, 8);
        assert_eq!(report.excluded_queries, 0);

        // JSON round-trips losslessly.
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, back);
        assert!(json.contains("\"cmc\":{\"1\":"), "{json}");
    }
}
