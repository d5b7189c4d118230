//! 1:N identification evaluation and personalization metrics.
//!
//! Protocol: every client identity is enrolled with a gallery template (the
//! mean embedding of the first half of its eval rows); the second half are
//! that client's mated probes. Impostor identities — generated but never
//! enrolled and never trained on — supply the non-mated searches that fix
//! the decision threshold at a target false-positive identification rate.
//!
//! Embeddings are personalized: client c scores its probes against a
//! gallery embedded *with its own pipeline* (global ⊕ personalized), since
//! matching must happen in one embedding space. The frozen-reference mode
//! embeds everything with the shared pre-trained encoder instead and is the
//! baseline every run is compared against.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::ClientState;
use crate::datagen::Universe;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{cosine_similarity, Tensor, NORM_EPS};

const TAG_NONMATED: u64 = 0x91;
const TAG_NEGPAIRS: u64 = 0x92;

/// Which embedding function scores a protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    /// Frozen pre-trained reference encoder, identical for every client.
    PretrainedOnly,
    /// The client's personalized pipeline: global ⊕ personalized embedding.
    FedFs,
}

impl EmbedMode {
    pub fn label(&self) -> &'static str {
        match self {
            EmbedMode::PretrainedOnly => "pretrained",
            EmbedMode::FedFs => "fedfs",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvalConfig {
    /// Operating points for TPIR.
    pub fpirs: Vec<f64>,
    /// Histogram bins over [-1, 1].
    pub hist_bins: usize,
    /// Cap on non-mated searches per client (seeded subsample of the
    /// impostor rows). Must stay ≥ 1/min(fpir) for the smallest operating
    /// point to be measurable.
    pub non_mated_cap: usize,
    /// Negative pairs sampled per client for the similarity histograms.
    pub negative_pairs_per_client: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fpirs: vec![0.1, 0.01, 0.001],
            hist_bins: 64,
            non_mated_cap: 1200,
            negative_pairs_per_client: 91,
            seed: 1,
        }
    }
}

/// Embeds rows with either the shared reference or a client's pipeline.
pub fn embed_for_client(
    mode: EmbedMode,
    reference: &EncoderParams,
    client: &ClientState,
    rows: &Tensor,
) -> Result<Tensor> {
    match mode {
        EmbedMode::PretrainedOnly => Ok(reference.forward(rows)?.embedding),
        EmbedMode::FedFs => {
            let global = client.global.forward(rows)?.embedding;
            let personal = client.personal.forward(rows)?.embedding;
            global.concat_cols(&personal)
        }
    }
}

/// The raw-feature side of the protocol, shared by every embedding mode.
pub struct IdentificationProtocol {
    /// Enrollment rows per enrolled identity (first half of eval rows).
    pub enroll: Vec<Tensor>,
    /// Probe rows per enrolled identity (second half of eval rows).
    pub probes: Vec<Tensor>,
    /// Identity ids aligned with `enroll`/`probes`.
    pub identities: Vec<u32>,
    /// Seeded subsample of impostor rows driving the non-mated searches.
    pub non_mated: Tensor,
}

impl IdentificationProtocol {
    /// Splits eval rows in half per enrolled identity and pools a seeded,
    /// capped subsample of all impostor rows.
    pub fn build(universe: &Universe, cfg: &EvalConfig) -> Result<Self> {
        if universe.impostors.is_empty() {
            return Err(Error::InsufficientData(
                "no impostor identities to drive non-mated searches".into(),
            ));
        }
        let mut enroll = Vec::new();
        let mut probes = Vec::new();
        let mut identities = Vec::new();
        for c in &universe.clients {
            let n = c.eval.rows();
            if n < 2 {
                return Err(Error::InsufficientData(format!(
                    "identity {} has {} eval rows; need at least 2 (enroll + probe)",
                    c.identity_id, n
                )));
            }
            let half = n / 2 + n % 2; // first ceil(n/2) rows enroll
            enroll.push(c.eval.gather_rows(&(0..half).collect::<Vec<_>>()));
            probes.push(c.eval.gather_rows(&(half..n).collect::<Vec<_>>()));
            identities.push(c.identity_id);
        }

        // pool all impostor rows, then subsample deterministically
        let dim = universe.input_dim;
        let mut pool: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for imp in &universe.impostors {
            let rows = imp.all_rows();
            pool.extend_from_slice(rows.data());
            count += rows.rows();
        }
        let all = Tensor::new(&[count, dim], pool)?;
        let non_mated = if count <= cfg.non_mated_cap {
            all
        } else {
            let mut order: Vec<usize> = (0..count).collect();
            SplitMix64::new(derive_seed(&[cfg.seed, TAG_NONMATED])).shuffle(&mut order);
            let mut keep = order[..cfg.non_mated_cap].to_vec();
            keep.sort_unstable();
            all.gather_rows(&keep)
        };

        Ok(Self {
            enroll,
            probes,
            identities,
            non_mated,
        })
    }
}

/// Top-match scores from one client's searches.
#[derive(Clone, Debug)]
pub struct ScoreSet {
    /// (top score, top match is the probe's identity) per mated probe.
    pub mated: Vec<(f64, bool)>,
    /// Top score per non-mated search.
    pub non_mated: Vec<f64>,
}

/// Runs client `own`'s searches under one embedding function: gallery
/// templates are mean embeddings of every enrolled identity's enrollment
/// rows, probes are the client's own held-out rows plus the shared
/// non-mated pool.
pub fn score_client(
    protocol: &IdentificationProtocol,
    mode: EmbedMode,
    reference: &EncoderParams,
    client: &ClientState,
    own: usize,
) -> Result<ScoreSet> {
    let templates: Vec<Vec<f64>> = protocol
        .enroll
        .iter()
        .map(|rows| {
            let e = embed_for_client(mode, reference, client, rows)?;
            let (n, d) = (e.rows(), e.cols());
            let mut mean = vec![0.0; d];
            for i in 0..n {
                for (j, m) in mean.iter_mut().enumerate() {
                    *m += e.at(i, j);
                }
            }
            for m in mean.iter_mut() {
                *m /= n as f64;
            }
            Ok(mean)
        })
        .collect::<Result<_>>()?;

    let top_match = |row: &[f64]| -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (k, t) in templates.iter().enumerate() {
            let s = cosine_similarity(row, t, NORM_EPS);
            if s > best.0 {
                best = (s, k);
            }
        }
        best
    };

    let own_probes = embed_for_client(mode, reference, client, &protocol.probes[own])?;
    let mated = (0..own_probes.rows())
        .map(|i| {
            let (score, who) = top_match(own_probes.row(i));
            (score, who == own)
        })
        .collect();

    let non_mated_embedded = embed_for_client(mode, reference, client, &protocol.non_mated)?;
    let non_mated = (0..non_mated_embedded.rows())
        .map(|i| top_match(non_mated_embedded.row(i)).0)
        .collect();

    Ok(ScoreSet { mated, non_mated })
}

/// True-positive identification rate at a false-positive identification
/// rate. The threshold is the smallest observed non-mated score τ with
/// `#{non-mated ≥ τ} / #non-mated ≤ fpir` (step function, no
/// interpolation); TPIR is the fraction of mated probes whose top match is
/// correct with score ≥ τ.
pub fn tpir_at_fpir(scores: &ScoreSet, fpir: f64) -> Result<f64> {
    if scores.mated.is_empty() || scores.non_mated.is_empty() {
        return Err(Error::InsufficientData("empty score list".into()));
    }
    if !(fpir > 0.0 && fpir < 1.0) {
        return Err(Error::Contract(format!("fpir {fpir} outside (0, 1)")));
    }
    let m = scores.non_mated.len();
    if (m as f64) < 1.0 / fpir {
        return Err(Error::InsufficientData(format!(
            "{m} non-mated searches cannot resolve fpir {fpir}"
        )));
    }
    let allowed = (fpir * m as f64).floor() as usize;

    let mut non_mated_sorted = scores.non_mated.clone();
    non_mated_sorted.sort_by(f64::total_cmp);
    let count_ge = |tau: f64| m - non_mated_sorted.partition_point(|&s| s < tau);

    // candidate thresholds are all observed scores, scanned ascending
    let mut candidates: Vec<f64> = scores
        .non_mated
        .iter()
        .copied()
        .chain(scores.mated.iter().map(|(s, _)| *s))
        .collect();
    candidates.sort_by(f64::total_cmp);
    let Some(tau) = candidates.into_iter().find(|&t| count_ge(t) <= allowed) else {
        // ties at the global maximum overshoot the budget: unattainable
        return Ok(0.0);
    };

    let hits = scores
        .mated
        .iter()
        .filter(|(s, correct)| *correct && *s >= tau)
        .count();
    Ok(hits as f64 / scores.mated.len() as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counted half (two-sample Mann-Whitney formulation; equals the
/// trapezoidal ROC integral).
pub fn auroc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InsufficientData("empty score list".into()));
    }
    let mut pos = positives.to_vec();
    let mut neg = negatives.to_vec();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);

    // two-pointer sweep over the sorted negatives; counts stay integral so
    // the result is bit-identical to exhaustive pair enumeration
    let mut wins = 0u64;
    let mut ties = 0u64;
    let mut below = 0usize; // negatives strictly less than current positive
    let mut equal_end = 0usize;
    for &p in &pos {
        while below < neg.len() && neg[below] < p {
            below += 1;
        }
        equal_end = equal_end.max(below);
        while equal_end < neg.len() && neg[equal_end] == p {
            equal_end += 1;
        }
        wins += below as u64;
        ties += (equal_end.max(below) - below) as u64;
    }
    Ok((wins as f64 + 0.5 * ties as f64) / (pos.len() as f64 * neg.len() as f64))
}

/// Normalized histogram pair over [-1, 1] plus the shared-mass overlap.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimilarityHistograms {
    pub bins: usize,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    /// Σ min(p_bin, n_bin); 1.0 for identical histograms, 0.0 for disjoint.
    pub overlap: f64,
}

pub fn histogram_overlap(
    positive: &[f64],
    negative: &[f64],
    bins: usize,
) -> Result<SimilarityHistograms> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::InsufficientData(
            "similarity histogram needs scores on both sides".into(),
        ));
    }
    let fill = |scores: &[f64]| {
        let mut h = vec![0.0; bins];
        for &s in scores {
            let unit = ((s + 1.0) / 2.0).clamp(0.0, 1.0);
            let b = ((unit * bins as f64) as usize).min(bins - 1);
            h[b] += 1.0;
        }
        for x in h.iter_mut() {
            *x /= scores.len() as f64;
        }
        h
    };
    let p = fill(positive);
    let n = fill(negative);
    let overlap = p.iter().zip(&n).map(|(a, b)| a.min(*b)).sum();
    Ok(SimilarityHistograms {
        bins,
        positive: p,
        negative: n,
        overlap,
    })
}

/// Pools intra-identity and sampled inter-identity cosine similarities of
/// eval embeddings, each identity seen through its own embedding function.
pub fn similarity_histograms(
    mode: EmbedMode,
    reference: &EncoderParams,
    clients: &[ClientState],
    cfg: &EvalConfig,
) -> Result<SimilarityHistograms> {
    let mut positive = Vec::new();
    let mut negative = Vec::new();
    for (idx, client) in clients.iter().enumerate() {
        let own = embed_for_client(mode, reference, client, &client.dataset.eval)?;
        if own.rows() < 2 {
            return Err(Error::InsufficientData(format!(
                "identity {} has fewer than 2 eval embeddings",
                client.dataset.identity_id
            )));
        }
        for i in 0..own.rows() {
            for j in (i + 1)..own.rows() {
                positive.push(cosine_similarity(own.row(i), own.row(j), NORM_EPS));
            }
        }
        let mut rng = SplitMix64::new(derive_seed(&[cfg.seed, TAG_NEGPAIRS, idx as u64]));
        for _ in 0..cfg.negative_pairs_per_client {
            let other = loop {
                let k = rng.below(clients.len());
                if k != idx {
                    break k;
                }
            };
            let other_eval = &clients[other].dataset.eval;
            let row = other_eval.gather_rows(&[rng.below(other_eval.rows())]);
            let other_embedded = embed_for_client(mode, reference, client, &row)?;
            let own_row = rng.below(own.rows());
            negative.push(cosine_similarity(
                own.row(own_row),
                other_embedded.row(0),
                NORM_EPS,
            ));
        }
    }
    histogram_overlap(&positive, &negative, cfg.hist_bins)
}

/// Mean over identities of the mean squared distance of L2-normalized eval
/// embeddings to their centroid (the centroid itself is not re-normalized,
/// so antipodal pairs land at variance 1).
pub fn intra_class_variance(per_identity_embeddings: &[Tensor]) -> Result<f64> {
    if per_identity_embeddings.is_empty() {
        return Err(Error::InsufficientData("no identities".into()));
    }
    let mut total = 0.0;
    for e in per_identity_embeddings {
        let n = e.rows();
        if n < 2 {
            return Err(Error::InsufficientData(
                "intra-class variance needs ≥ 2 embeddings per identity".into(),
            ));
        }
        let d = e.cols();
        let normalized: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let row = e.row(i);
                let norm = crate::tensor::norm2(row).max(NORM_EPS);
                row.iter().map(|x| x / norm).collect()
            })
            .collect();
        let mut centroid = vec![0.0; d];
        for row in &normalized {
            for (c, x) in centroid.iter_mut().zip(row) {
                *c += x;
            }
        }
        for c in centroid.iter_mut() {
            *c /= n as f64;
        }
        let mut var = 0.0;
        for row in &normalized {
            var += row
                .iter()
                .zip(&centroid)
                .map(|(x, c)| (x - c) * (x - c))
                .sum::<f64>();
        }
        total += var / n as f64;
    }
    Ok(total / per_identity_embeddings.len() as f64)
}

/// Per-client metric rows for one embedding mode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client_id: u32,
    pub identity_id: u32,
    pub auroc: f64,
    /// (fpir, Some(tpir)) — None when the operating point is unresolvable
    /// with the available non-mated searches.
    pub tpir: Vec<(f64, Option<f64>)>,
}

/// Aggregate over clients for one embedding mode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: String,
    pub mean_auroc: f64,
    /// (fpir, mean tpir over clients) for resolvable operating points.
    pub mean_tpir: Vec<(f64, Option<f64>)>,
    pub intra_class_variance: f64,
    pub histogram_overlap: f64,
}

/// Full evaluation of one embedding mode over every client.
pub struct ModeEvaluation {
    pub per_client: Vec<ClientMetrics>,
    pub summary: ModeSummary,
    pub histograms: SimilarityHistograms,
    /// Pooled top-match scores for ROC plotting: (mated, non-mated).
    pub pooled_scores: (Vec<f64>, Vec<f64>),
}

pub fn evaluate_mode(
    protocol: &IdentificationProtocol,
    mode: EmbedMode,
    reference: &EncoderParams,
    clients: &[ClientState],
    cfg: &EvalConfig,
    threads: usize,
) -> Result<ModeEvaluation> {
    if clients.len() != protocol.identities.len() {
        return Err(Error::Contract(
            "client list does not match the protocol".into(),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let results: Vec<Result<(ClientMetrics, ScoreSet)>> = pool.install(|| {
        clients
            .par_iter()
            .enumerate()
            .map(|(own, client)| {
                let scores = score_client(protocol, mode, reference, client, own)?;
                let auroc_value = auroc(
                    &scores.mated.iter().map(|(s, _)| *s).collect::<Vec<_>>(),
                    &scores.non_mated,
                )?;
                let tpir = cfg
                    .fpirs
                    .iter()
                    .map(|&f| {
                        let value = match tpir_at_fpir(&scores, f) {
                            Ok(v) => Some(v),
                            Err(Error::InsufficientData(_)) => None,
                            Err(e) => return Err(e),
                        };
                        Ok((f, value))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((
                    ClientMetrics {
                        client_id: client.client_id,
                        identity_id: client.dataset.identity_id,
                        auroc: auroc_value,
                        tpir,
                    },
                    scores,
                ))
            })
            .collect()
    });

    let mut per_client = Vec::with_capacity(clients.len());
    let mut pooled_mated = Vec::new();
    let mut pooled_non_mated = Vec::new();
    for r in results {
        let (metrics, scores) = r?;
        pooled_mated.extend(scores.mated.iter().map(|(s, _)| *s));
        pooled_non_mated.extend(scores.non_mated.iter().copied());
        per_client.push(metrics);
    }
    per_client.sort_by_key(|m| m.client_id);

    let mean_auroc = per_client.iter().map(|m| m.auroc).sum::<f64>() / per_client.len() as f64;
    let mean_tpir: Vec<(f64, Option<f64>)> = cfg
        .fpirs
        .iter()
        .enumerate()
        .map(|(k, &f)| {
            let values: Vec<f64> = per_client.iter().filter_map(|m| m.tpir[k].1).collect();
            if values.len() == per_client.len() {
                (f, Some(values.iter().sum::<f64>() / values.len() as f64))
            } else {
                (f, None)
            }
        })
        .collect();

    let per_identity: Vec<Tensor> = clients
        .iter()
        .map(|c| embed_for_client(mode, reference, c, &c.dataset.eval))
        .collect::<Result<_>>()?;
    let variance = intra_class_variance(&per_identity)?;
    let histograms = similarity_histograms(mode, reference, clients, cfg)?;

    Ok(ModeEvaluation {
        summary: ModeSummary {
            mode: mode.label().into(),
            mean_auroc,
            mean_tpir,
            intra_class_variance: variance,
            histogram_overlap: histograms.overlap,
        },
        per_client,
        histograms,
        pooled_scores: (pooled_mated, pooled_non_mated),
    })
}
