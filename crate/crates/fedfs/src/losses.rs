//! The intra-subject self-supervised objective.
//!
//! Each training batch holds N positive samples of the client's single
//! identity. The batch flows through three encoders — global (trainable,
//! aggregated), personalized (trainable, private) and the frozen reference
//! — and the two trainable embeddings are fused by row-wise concatenation.
//! Because the fused vector has twice the reference embedding width, the
//! reference rows are lifted by self-concatenation before any pairing, which
//! preserves cosine values against the fused vector's symmetric halves and
//! keeps dot products comparable.
//!
//! Two pairings drive the objective:
//!
//! * a cosine-distance matrix (magnitude-blind) feeds the row-softmax cross
//!   entropy of the intra-subject loss, and
//! * raw dot products (magnitude-sensitive) feed the adaptive soft labels:
//!   per row, the diagonal score is boosted by `gamma`, the top-k remaining
//!   scores are kept, everything else is zeroed, and a row softmax (with an
//!   optional exponent-and-renormalize sharpening) yields the target
//!   distribution. Labels are treated as constants — no gradient flows
//!   through their construction.
//!
//! The regularizer is the mean cosine distance between the two trainable
//! encoders' pre-final activations, and the total objective is the convex
//! combination `lambda·intra + (1-lambda)·reg`.

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, TapedEncoder};
use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity, dot, logsumexp, softmax, GradTape, Tensor, Var, NORM_EPS};

/// Loss hyperparameters. Defaults are the published operating point:
/// `lambda` 0.7, `top_k` 4, `gamma` 2, label exponent 1.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the intra-subject term; the regularizer gets `1 - lambda`.
    pub lambda: f64,
    /// Off-diagonal scores kept per soft-label row (clamped to N-1).
    pub top_k: usize,
    /// When set, overrides `top_k` with `ceil(ratio · N)` per batch — the
    /// ratio-of-batch-size reading of the selection parameter.
    pub top_k_ratio: Option<f64>,
    /// Diagonal (self-score) boost in the soft-label construction.
    pub gamma: f64,
    /// Elementwise exponent applied to soft-label rows, then renormalized.
    /// 1.0 leaves the softmax untouched.
    pub exponent_t: f64,
    /// Ablation switch: include the regularization term.
    pub use_reg_loss: bool,
    /// Ablation switch: adaptive soft labels instead of one-hot labels.
    pub use_adaptive_soft_label: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.7,
            top_k: 4,
            top_k_ratio: None,
            gamma: 2.0,
            exponent_t: 1.0,
            use_reg_loss: true,
            use_adaptive_soft_label: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if self.gamma <= 0.0 {
            return Err(Error::Config("gamma must be positive".into()));
        }
        if self.exponent_t <= 0.0 {
            return Err(Error::Config("exponent_t must be positive".into()));
        }
        if let Some(r) = self.top_k_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("top_k_ratio {r} outside (0, 1]")));
            }
        }
        if self.top_k == 0 && self.top_k_ratio.is_none() {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        Ok(())
    }

    /// Top-k count for a batch of `n` rows, clamped to the valid 1..=n-1.
    pub fn effective_top_k(&self, n: usize) -> usize {
        let raw = match self.top_k_ratio {
            Some(r) => (r * n as f64).ceil() as usize,
            None => self.top_k,
        };
        raw.clamp(1, n.saturating_sub(1).max(1))
    }
}

/// Lifts reference embeddings to the fused width by self-concatenation.
pub fn lift_anchors(v: &Tensor) -> Tensor {
    v.concat_cols(v).expect("same row count")
}

/// `out[i][j] = 1 - cos(fused_i, lifted_ref_j)`; values in [0, 2].
pub fn cosine_matrix(fused: &Tensor, reference: &Tensor, eps: f64) -> Result<Tensor> {
    let anchors = lift_anchors(reference);
    if fused.cols() != anchors.cols() {
        return Err(Error::Shape(format!(
            "fused width {} vs lifted reference width {}",
            fused.cols(),
            anchors.cols()
        )));
    }
    let (n, m) = (fused.rows(), anchors.rows());
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            data.push(1.0 - cosine_similarity(fused.row(i), anchors.row(j), eps));
        }
    }
    Tensor::new(&[n, m], data)
}

/// The adaptive soft-label targets and their intermediates.
#[derive(Clone, Debug)]
pub struct SoftLabelMatrix {
    /// Raw dot-product scores `fused_i · lifted_ref_j`.
    pub scores: Tensor,
    /// Scores after diagonal boost, top-k selection and zeroing.
    pub beta: Tensor,
    /// Row-stochastic targets.
    pub alpha: Tensor,
    pub top_k: usize,
    pub gamma: f64,
    pub exponent_t: f64,
}

/// Builds the soft-label targets from current values. `k` must lie in
/// `1..=N-1`; ties at the k-th off-diagonal score break toward the lower
/// column index.
pub fn adaptive_soft_labels(
    fused: &Tensor,
    reference: &Tensor,
    k: usize,
    gamma: f64,
    exponent_t: f64,
) -> Result<SoftLabelMatrix> {
    let anchors = lift_anchors(reference);
    if fused.cols() != anchors.cols() {
        return Err(Error::Shape(format!(
            "fused width {} vs lifted reference width {}",
            fused.cols(),
            anchors.cols()
        )));
    }
    let n = fused.rows();
    if n != anchors.rows() {
        return Err(Error::Shape(format!(
            "{} fused rows vs {} reference rows",
            n,
            anchors.rows()
        )));
    }
    if k == 0 || k > n.saturating_sub(1) {
        return Err(Error::Contract(format!(
            "top-k {k} outside 1..={} for batch of {n}",
            n.saturating_sub(1)
        )));
    }
    if gamma <= 0.0 || exponent_t <= 0.0 {
        return Err(Error::Contract(
            "gamma and exponent_t must be positive".into(),
        ));
    }

    let mut scores = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            scores.push(dot(fused.row(i), anchors.row(j)));
        }
    }
    let scores = Tensor::new(&[n, n], scores)?;
    scores.ensure_finite("adaptive soft scores")?;

    let mut beta = vec![0.0; n * n];
    for i in 0..n {
        beta[i * n + i] = gamma * scores.at(i, i);
        let mut off: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        off.sort_by(|&a, &b| scores.at(i, b).total_cmp(&scores.at(i, a)).then(a.cmp(&b)));
        for &j in off.iter().take(k) {
            beta[i * n + j] = scores.at(i, j);
        }
    }
    let beta = Tensor::new(&[n, n], beta)?;

    let mut alpha = Vec::with_capacity(n * n);
    for i in 0..n {
        let mut row = softmax(beta.row(i))?;
        if exponent_t != 1.0 {
            for p in row.iter_mut() {
                *p = p.powf(exponent_t);
            }
            let sum: f64 = row.iter().sum();
            for p in row.iter_mut() {
                *p /= sum;
            }
        }
        alpha.extend(row);
    }
    let alpha = Tensor::new(&[n, n], alpha)?;

    Ok(SoftLabelMatrix {
        scores,
        beta,
        alpha,
        top_k: k,
        gamma,
        exponent_t,
    })
}

/// One-hot cross entropy over cosine-distance rows:
/// `-(1/N) Σ_i log softmax(row_i)[i]`. This is the plain-entropy baseline
/// the ablation's setup A runs.
pub fn hard_label_loss(cosm: &Tensor) -> Result<f64> {
    let n = cosm.rows();
    if cosm.shape().len() != 2 || n != cosm.cols() {
        return Err(Error::Shape(format!(
            "hard label loss wants a square matrix, got {:?}",
            cosm.shape()
        )));
    }
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let mut total = 0.0;
    for i in 0..n {
        let row = cosm.row(i);
        total += logsumexp(row) - row[i];
    }
    Ok(total / n as f64)
}

/// Soft-target cross entropy: `-(1/N) Σ_i Σ_j alpha[i][j] log softmax(row_i)[j]`.
/// Reduces exactly to [`hard_label_loss`] when `alpha` is the identity.
pub fn intra_subject_loss(cosm: &Tensor, alpha: &Tensor) -> Result<f64> {
    if cosm.shape() != alpha.shape() {
        return Err(Error::Shape(format!(
            "cosine matrix {:?} vs labels {:?}",
            cosm.shape(),
            alpha.shape()
        )));
    }
    let n = cosm.rows();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let mut total = 0.0;
    for i in 0..n {
        let row = cosm.row(i);
        let lse = logsumexp(row);
        for (j, &a) in alpha.row(i).iter().enumerate() {
            if a != 0.0 {
                total += a * (lse - row[j]);
            }
        }
    }
    Ok(total / n as f64)
}

/// Mean cosine distance between the two trainable encoders' pre-final rows.
pub fn regularization_loss(global_pre: &Tensor, personal_pre: &Tensor, eps: f64) -> Result<f64> {
    if global_pre.shape() != personal_pre.shape() {
        return Err(Error::Shape(format!(
            "pre-final shapes {:?} vs {:?}",
            global_pre.shape(),
            personal_pre.shape()
        )));
    }
    let n = global_pre.rows();
    let mut total = 0.0;
    for i in 0..n {
        total += 1.0 - cosine_similarity(global_pre.row(i), personal_pre.row(i), eps);
    }
    Ok(total / n as f64)
}

/// `lambda·intra + (1-lambda)·reg`.
pub fn total_loss(insub: f64, reg: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(lambda * insub + (1.0 - lambda) * reg)
}

/// Taped per-batch representations of one client's samples.
pub struct BatchRepresentations {
    /// Global-model embedding rows (trainable).
    pub global_embed: Var,
    /// Personalized-model embedding rows (trainable).
    pub personal_embed: Var,
    /// Row-wise concatenation of the two embeddings.
    pub fused: Var,
    /// Global-model pre-final activation.
    pub global_pre: Var,
    /// Personalized-model pre-final activation.
    pub personal_pre: Var,
    /// Frozen reference embedding (off tape; no gradient ever).
    pub reference: Tensor,
}

/// Runs all three encoders on a batch. The reference encoder stays off the
/// tape; the other two are registered so gradients reach their parameters.
pub fn build_representations(
    tape: &GradTape,
    reference: &EncoderParams,
    global: &EncoderParams,
    personal: &EncoderParams,
    batch: &Tensor,
) -> Result<(BatchRepresentations, TapedEncoder, TapedEncoder)> {
    if batch.rows() < 2 {
        return Err(Error::BatchTooSmall(batch.rows()));
    }
    let global_taped = global.register(tape);
    let personal_taped = personal.register(tape);
    let (global_embed, global_pre) = global_taped.forward(tape, batch)?;
    let (personal_embed, personal_pre) = personal_taped.forward(tape, batch)?;
    let fused = tape.concat_cols(global_embed, personal_embed)?;
    let reference_out = reference.forward(batch)?.embedding;
    Ok((
        BatchRepresentations {
            global_embed,
            personal_embed,
            fused,
            global_pre,
            personal_pre,
            reference: reference_out,
        },
        global_taped,
        personal_taped,
    ))
}

/// Scalar pieces of one batch loss evaluation.
pub struct BatchLoss {
    /// Node to backpropagate from.
    pub total: Var,
    pub insub_value: f64,
    pub reg_value: f64,
    pub total_value: f64,
    /// Targets used (identity matrix when adaptive labels are off).
    pub labels: Tensor,
}

/// Assembles the configured objective on the tape.
///
/// With the regularizer disabled the objective is the bare intra-subject
/// term (the regularizer is still evaluated for the trace); with adaptive
/// labels disabled the targets are the identity matrix.
pub fn fedfs_batch_loss(
    tape: &GradTape,
    reps: &BatchRepresentations,
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    cfg.validate().map_err(|e| match e {
        Error::Config(msg) => Error::Contract(msg),
        other => other,
    })?;
    let n = tape.shape(reps.fused)[0];
    let labels = if cfg.use_adaptive_soft_label {
        adaptive_soft_labels(
            &tape.value(reps.fused),
            &reps.reference,
            cfg.effective_top_k(n),
            cfg.gamma,
            cfg.exponent_t,
        )?
        .alpha
    } else {
        Tensor::identity(n)
    };

    let anchors = lift_anchors(&reps.reference);
    let cosm = tape.cosine_dist_to_const(reps.fused, &anchors, NORM_EPS)?;
    let insub = tape.softmax_cross_entropy(cosm, &labels)?;
    let insub_value = tape.value(insub).item()?;

    let reg_value = regularization_loss(
        &tape.value(reps.global_pre),
        &tape.value(reps.personal_pre),
        NORM_EPS,
    )?;

    // the ablation that removes the regularizer keeps the lambda weighting
    // on the intra-subject term, so its effective step size matches the
    // regularized variants
    let (total, total_value) = if cfg.use_reg_loss {
        let reg = tape.row_cosine_mean(reps.global_pre, reps.personal_pre, NORM_EPS)?;
        let combined = tape.add(
            tape.scale(insub, cfg.lambda),
            tape.scale(reg, 1.0 - cfg.lambda),
        )?;
        let value = total_loss(insub_value, reg_value, cfg.lambda)?;
        (combined, value)
    } else {
        (tape.scale(insub, cfg.lambda), cfg.lambda * insub_value)
    };

    Ok(BatchLoss {
        total,
        insub_value,
        reg_value,
        total_value,
        labels,
    })
}

/// Finite-difference verification of every loss gradient at seeded random
/// points: the hard-label and soft-label intra-subject losses through the
/// cosine-distance path, the regularizer, and the full objective through
/// both encoder parameter sets. Returns (loss name, max relative error)
/// per loss; every entry is expected below 1e-4.
pub fn gradient_check_report(points: usize, seed: u64) -> Result<Vec<(String, f64)>> {
    use crate::encoder::EncoderConfig;
    use crate::rng::{derive_seed, SplitMix64};
    use crate::tensor::{grad_check, grad_check_multi};

    let h = 1e-5;
    let random = |shape: &[usize], rng: &mut SplitMix64| {
        Tensor::new(shape, rng.gauss_vec(shape.iter().product())).expect("shape")
    };

    let mut worst_hard = 0.0f64;
    let mut worst_soft = 0.0f64;
    let mut worst_reg = 0.0f64;
    let mut worst_total = 0.0f64;

    for point in 0..points {
        let mut rng = SplitMix64::new(derive_seed(&[seed, point as u64]));
        let n = 4;
        let embed = 3;
        let fused = random(&[n, 2 * embed], &mut rng);
        let reference = random(&[n, embed], &mut rng);
        let anchors = lift_anchors(&reference);

        let err = grad_check(
            |tape, z| {
                let cosm = tape.cosine_dist_to_const(z, &anchors, NORM_EPS)?;
                tape.softmax_cross_entropy(cosm, &Tensor::identity(n))
            },
            &fused,
            h,
        )?;
        worst_hard = worst_hard.max(err);

        let alpha = adaptive_soft_labels(&fused, &reference, 2, 2.0, 1.0)?.alpha;
        let err = grad_check(
            |tape, z| {
                let cosm = tape.cosine_dist_to_const(z, &anchors, NORM_EPS)?;
                tape.softmax_cross_entropy(cosm, &alpha)
            },
            &fused,
            h,
        )?;
        worst_soft = worst_soft.max(err);

        let pre_a = random(&[n, 5], &mut rng);
        let pre_b = random(&[n, 5], &mut rng);
        let err = grad_check_multi(
            |tape, vars| tape.row_cosine_mean(vars[0], vars[1], NORM_EPS),
            &[pre_a, pre_b],
            h,
        )?;
        worst_reg = worst_reg.max(err);

        // full objective differentiated through both encoder stacks
        let ecfg = EncoderConfig {
            input_dim: 5,
            hidden_dims: vec![6],
            embed_dim: 4,
        };
        let refenc = EncoderParams::seeded(ecfg.clone(), derive_seed(&[seed, point as u64, 1]));
        let global = EncoderParams::seeded(ecfg.clone(), derive_seed(&[seed, point as u64, 2]));
        let personal = EncoderParams::seeded(ecfg.clone(), derive_seed(&[seed, point as u64, 3]));
        let batch = random(&[4, 5], &mut rng);
        let cfg = LossConfig::default();

        // freeze the labels exactly as training does
        let labels = {
            let tape = GradTape::new();
            let (reps, _, _) = build_representations(&tape, &refenc, &global, &personal, &batch)?;
            fedfs_batch_loss(&tape, &reps, &cfg)?.labels
        };
        let inputs: Vec<Tensor> = global
            .layers()
            .iter()
            .chain(personal.layers())
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect();
        let layer_count = global.layers().len();
        let err = grad_check_multi(
            |tape, vars| {
                let rebuild = |vars: &[crate::tensor::Var]| {
                    crate::encoder::TapedEncoder::from_vars(
                        ecfg.clone(),
                        vars.chunks(2).map(|c| (c[0], c[1])).collect(),
                    )
                };
                let global_taped = rebuild(&vars[..2 * layer_count]);
                let personal_taped = rebuild(&vars[2 * layer_count..]);
                let (global_embed, global_pre) = global_taped.forward(tape, &batch)?;
                let (personal_embed, personal_pre) = personal_taped.forward(tape, &batch)?;
                let fused = tape.concat_cols(global_embed, personal_embed)?;
                let reference_out = refenc.forward(&batch)?.embedding;
                let cosm =
                    tape.cosine_dist_to_const(fused, &lift_anchors(&reference_out), NORM_EPS)?;
                let insub = tape.softmax_cross_entropy(cosm, &labels)?;
                let reg = tape.row_cosine_mean(global_pre, personal_pre, NORM_EPS)?;
                tape.add(
                    tape.scale(insub, cfg.lambda),
                    tape.scale(reg, 1.0 - cfg.lambda),
                )
            },
            &inputs,
            h,
        )?;
        worst_total = worst_total.max(err);
    }

    Ok(vec![
        ("hard_label_loss".into(), worst_hard),
        ("intra_subject_loss".into(), worst_soft),
        ("regularization_loss".into(), worst_reg),
        ("total_loss".into(), worst_total),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::rng::SplitMix64;
    use crate::tensor::grad_check;

    fn random_tensor(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, rng.gauss_vec(n)).unwrap()
    }

    #[test]
    fn fused_row_is_concatenation() {
        let r = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let q = Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap();
        let z = r.concat_cols(&q).unwrap();
        assert_eq!(z.row(0), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn representation_shapes_and_frozen_reference() {
        let cfg = EncoderConfig::default();
        let psi = EncoderParams::seeded(cfg.clone(), 1);
        let w = EncoderParams::seeded(cfg.clone(), 2);
        let theta = EncoderParams::seeded(cfg, 3);
        let mut rng = SplitMix64::new(4);
        let batch = random_tensor(&[4, 24], &mut rng);

        let tape = GradTape::new();
        let (reps, _, _) = build_representations(&tape, &psi, &w, &theta, &batch).unwrap();
        assert_eq!(tape.shape(reps.fused), vec![4, 32]);
        assert_eq!(reps.reference.shape(), &[4, 16]);

        // frozen encoder: same params + batch give the identical reference
        let tape2 = GradTape::new();
        let (reps2, _, _) = build_representations(&tape2, &psi, &w, &theta, &batch).unwrap();
        assert_eq!(reps.reference, reps2.reference);
    }

    #[test]
    fn batch_of_one_rejected() {
        let cfg = EncoderConfig::default();
        let psi = EncoderParams::seeded(cfg.clone(), 1);
        let w = EncoderParams::seeded(cfg.clone(), 2);
        let theta = EncoderParams::seeded(cfg, 3);
        let batch = Tensor::zeros(&[1, 24]);
        let tape = GradTape::new();
        assert!(matches!(
            build_representations(&tape, &psi, &w, &theta, &batch),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn cosine_matrix_extremes() {
        // fused row [a|a] is exactly parallel to the lifted reference a
        let v = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, -2.0, 0.0]).unwrap();
        let fused = Tensor::new(
            &[3, 4],
            vec![
                1.0, 0.0, 1.0, 0.0, // parallel to ref 0
                1.0, 0.0, 1.0, 0.0, // orthogonal to ref 1
                1.0, 0.0, 1.0, 0.0, // anti-parallel to ref 2
            ],
        )
        .unwrap();
        let m = cosine_matrix(&fused, &v, NORM_EPS).unwrap();
        assert!((m.at(0, 0) - 0.0).abs() < 1e-12);
        assert!((m.at(1, 1) - 1.0).abs() < 1e-12);
        assert!((m.at(2, 2) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn hard_label_two_by_two_closed_form() {
        let cosm = Tensor::new(&[2, 2], vec![0.3, 1.1, -0.4, 0.9]).unwrap();
        let expect = -0.5
            * ((0.3f64.exp() / (0.3f64.exp() + 1.1f64.exp())).ln()
                + (0.9f64.exp() / ((-0.4f64).exp() + 0.9f64.exp())).ln());
        let got = hard_label_loss(&cosm).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn hard_label_uniform_rows_is_log_n() {
        for n in [2usize, 3, 5, 8] {
            let cosm = Tensor::new(&[n, n], vec![0.7; n * n]).unwrap();
            let got = hard_label_loss(&cosm).unwrap();
            assert!((got - (n as f64).ln()).abs() < 1e-12, "n={n} got {got}");
        }
    }

    #[test]
    fn hard_label_matches_naive_recomputation() {
        let mut rng = SplitMix64::new(77);
        let cosm = random_tensor(&[4, 4], &mut rng);
        // independent scalar route: naive unshifted softmax, explicit logs
        let mut naive = 0.0;
        for i in 0..4 {
            let row = cosm.row(i);
            let denom: f64 = row.iter().map(|x| x.exp()).sum();
            naive += -(row[i].exp() / denom).ln();
        }
        naive /= 4.0;
        let got = hard_label_loss(&cosm).unwrap();
        assert!((got - naive).abs() < 1e-12);
    }

    #[test]
    fn soft_labels_small_batch_saturates_k() {
        // N=2, k=1: the single off-diagonal entry of each row is kept
        let fused = Tensor::new(&[2, 2], vec![1.0, 0.5, -0.5, 2.0]).unwrap();
        let v = Tensor::new(&[2, 1], vec![1.0, -1.0]).unwrap();
        let labels = adaptive_soft_labels(&fused, &v, 1, 2.0, 1.0).unwrap();
        let s = &labels.scores;
        let b = &labels.beta;
        assert_eq!(b.at(0, 0), 2.0 * s.at(0, 0));
        assert_eq!(b.at(0, 1), s.at(0, 1));
        assert_eq!(b.at(1, 0), s.at(1, 0));
        assert_eq!(b.at(1, 1), 2.0 * s.at(1, 1));
    }

    #[test]
    fn gamma_boost_arithmetic() {
        // a diagonal score of 1.5 with gamma 2 becomes 3.0
        let fused = Tensor::new(&[2, 2], vec![1.5, 0.0, 0.0, 1.0]).unwrap();
        let v = Tensor::new(&[2, 1], vec![0.5, 1.0]).unwrap();
        // scores[0][0] = fused_0 · [0.5, 0.5] = 0.75... construct directly instead:
        let labels = adaptive_soft_labels(&fused, &v, 1, 2.0, 1.0).unwrap();
        assert!((labels.beta.at(0, 0) - 2.0 * labels.scores.at(0, 0)).abs() < 1e-15);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn soft_labels_match_brute_force() {
        // explicit sort + explicit softmax, entirely separate code path
        let mut rng = SplitMix64::new(505);
        for trial in 0..20 {
            let n = 5;
            let k = 2;
            let fused = random_tensor(&[n, 2 * 3], &mut rng);
            let v = random_tensor(&[n, 3], &mut rng);
            let got = adaptive_soft_labels(&fused, &v, k, 2.0, 1.0).unwrap();

            let lifted = lift_anchors(&v);
            for i in 0..n {
                let scores: Vec<f64> = (0..n).map(|j| dot(fused.row(i), lifted.row(j))).collect();
                let mut beta = vec![0.0; n];
                beta[i] = 2.0 * scores[i];
                // selection sort, descending, lower index on ties
                let mut pairs: Vec<(f64, usize)> =
                    (0..n).filter(|&j| j != i).map(|j| (scores[j], j)).collect();
                pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                for &(s, j) in pairs.iter().take(k) {
                    beta[j] = s;
                }
                let denom: f64 = beta.iter().map(|x| x.exp()).sum();
                for j in 0..n {
                    let expect = beta[j].exp() / denom;
                    assert!(
                        (got.alpha.at(i, j) - expect).abs() < 1e-12,
                        "trial {trial} row {i} col {j}"
                    );
                }
            }
        }
    }

    #[test]
    fn alpha_rows_are_distributions_for_any_exponent() {
        let mut rng = SplitMix64::new(99);
        for &t in &[0.25, 0.5, 1.0, 2.0, 7.0] {
            let fused = random_tensor(&[6, 8], &mut rng);
            let v = random_tensor(&[6, 4], &mut rng);
            let labels = adaptive_soft_labels(&fused, &v, 3, 2.0, t).unwrap();
            for i in 0..6 {
                let row = labels.alpha.row(i);
                assert!(row.iter().all(|&p| p >= 0.0));
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "t={t} row sum {sum}");
            }
        }
    }

    #[test]
    fn beta_has_exactly_k_plus_one_nonzeros() {
        let mut rng = SplitMix64::new(123);
        for n in 3..8usize {
            for k in 1..(n - 1) {
                let fused = random_tensor(&[n, 6], &mut rng);
                let v = random_tensor(&[n, 3], &mut rng);
                let labels = adaptive_soft_labels(&fused, &v, k, 2.0, 1.0).unwrap();
                for i in 0..n {
                    let nonzero = labels.beta.row(i).iter().filter(|&&x| x != 0.0).count();
                    // random scores: ties have measure zero, diagonal can
                    // vanish only if the boosted score is exactly 0
                    assert!(nonzero <= k + 1);
                    assert_eq!(nonzero, k + 1, "n={n} k={k} row {i}");
                }
            }
        }
    }

    #[test]
    fn top_k_ratio_reading() {
        // the ratio-of-batch-size reading: ceil(ratio·N), clamped to N−1
        let cfg = LossConfig {
            top_k_ratio: Some(0.5),
            ..Default::default()
        };
        assert_eq!(cfg.effective_top_k(8), 4);
        assert_eq!(cfg.effective_top_k(5), 3);
        let full = LossConfig {
            top_k_ratio: Some(1.0),
            ..Default::default()
        };
        assert_eq!(full.effective_top_k(8), 7); // clamped below N

        // default integer count, clamped to N−1 on small batches
        let plain = LossConfig::default();
        assert_eq!(plain.effective_top_k(8), 4);
        assert_eq!(plain.effective_top_k(3), 2);
    }

    #[test]
    fn k_out_of_range_rejected() {
        let fused = Tensor::zeros(&[3, 4]);
        let v = Tensor::zeros(&[3, 2]);
        assert!(adaptive_soft_labels(&fused, &v, 0, 2.0, 1.0).is_err());
        assert!(adaptive_soft_labels(&fused, &v, 3, 2.0, 1.0).is_err());
    }

    #[test]
    fn increasing_gamma_never_shrinks_diagonal_mass() {
        let mut rng = SplitMix64::new(321);
        for _ in 0..10 {
            let fused = random_tensor(&[5, 6], &mut rng);
            let v = random_tensor(&[5, 3], &mut rng);
            let lo = adaptive_soft_labels(&fused, &v, 2, 1.0, 1.0).unwrap();
            let hi = adaptive_soft_labels(&fused, &v, 2, 3.0, 1.0).unwrap();
            for i in 0..5 {
                // holds whenever the boosted diagonal score is nonnegative;
                // construct that case by flipping signs when needed
                if lo.scores.at(i, i) >= 0.0 {
                    assert!(hi.alpha.at(i, i) + 1e-12 >= lo.alpha.at(i, i));
                }
            }
        }
    }

    #[test]
    fn scaling_a_fused_row_moves_scores_not_cosines() {
        let mut rng = SplitMix64::new(42);
        let fused = random_tensor(&[4, 8], &mut rng);
        let v = random_tensor(&[4, 4], &mut rng);
        let mut scaled_rows: Vec<Vec<f64>> = (0..4).map(|i| fused.row(i).to_vec()).collect();
        for x in scaled_rows[2].iter_mut() {
            *x *= 3.5;
        }
        let scaled = Tensor::from_rows(&scaled_rows).unwrap();

        let cos_a = cosine_matrix(&fused, &v, NORM_EPS).unwrap();
        let cos_b = cosine_matrix(&scaled, &v, NORM_EPS).unwrap();
        for (a, b) in cos_a.data().iter().zip(cos_b.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let s_a = adaptive_soft_labels(&fused, &v, 2, 2.0, 1.0).unwrap();
        let s_b = adaptive_soft_labels(&scaled, &v, 2, 2.0, 1.0).unwrap();
        let row_changed = (0..4).any(|j| (s_a.scores.at(2, j) - s_b.scores.at(2, j)).abs() > 1e-9);
        assert!(row_changed, "dot-product pathway must see magnitude");
    }

    #[test]
    fn identity_alpha_reduces_to_hard_label() {
        let mut rng = SplitMix64::new(7);
        for _ in 0..20 {
            let cosm = random_tensor(&[5, 5], &mut rng);
            let hard = hard_label_loss(&cosm).unwrap();
            let soft = intra_subject_loss(&cosm, &Tensor::identity(5)).unwrap();
            assert!((hard - soft).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_alpha_algebraic_identity() {
        let mut rng = SplitMix64::new(8);
        let cosm = random_tensor(&[6, 6], &mut rng);
        let uniform = Tensor::new(&[6, 6], vec![1.0 / 6.0; 36]).unwrap();
        let got = intra_subject_loss(&cosm, &uniform).unwrap();
        let expect: f64 = (0..6)
            .map(|i| {
                let row = cosm.row(i);
                logsumexp(row) - row.iter().sum::<f64>() / 6.0
            })
            .sum::<f64>()
            / 6.0;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn regularization_extremes() {
        let a = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(regularization_loss(&a, &a, NORM_EPS).unwrap(), 0.0);

        let b = Tensor::new(&[2, 2], vec![0.0, 1.0, 2.0, 0.0]).unwrap();
        assert!((regularization_loss(&a, &b, NORM_EPS).unwrap() - 1.0).abs() < 1e-12);

        let neg = Tensor::new(&[2, 2], vec![-1.0, 0.0, 0.0, -2.0]).unwrap();
        assert!((regularization_loss(&a, &neg, NORM_EPS).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(1.0, 0.5, 1.0).unwrap(), 1.0);
        assert_eq!(total_loss(1.0, 0.5, 0.0).unwrap(), 0.5);
        assert!((total_loss(1.0, 0.5, 0.7).unwrap() - 0.85).abs() < 1e-15);
        assert!(total_loss(1.0, 0.5, 1.2).is_err());
        assert!(total_loss(1.0, 0.5, -0.1).is_err());
    }

    #[test]
    fn intra_subject_gradient_wrt_fused_passes_grad_check() {
        let mut rng = SplitMix64::new(2024);
        let fused = random_tensor(&[4, 6], &mut rng);
        let v = random_tensor(&[4, 3], &mut rng);
        // labels frozen from the unperturbed point, as in training
        let labels = adaptive_soft_labels(&fused, &v, 2, 2.0, 1.0).unwrap().alpha;
        let anchors = lift_anchors(&v);
        let err = grad_check(
            |tape, z| {
                let cosm = tape.cosine_dist_to_const(z, &anchors, NORM_EPS)?;
                tape.softmax_cross_entropy(cosm, &labels)
            },
            &fused,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn taped_loss_values_match_plain_functions() {
        let cfg = EncoderConfig {
            input_dim: 6,
            hidden_dims: vec![5],
            embed_dim: 4,
        };
        let psi = EncoderParams::seeded(cfg.clone(), 31);
        let w = EncoderParams::seeded(cfg.clone(), 32);
        let theta = EncoderParams::seeded(cfg, 33);
        let mut rng = SplitMix64::new(34);
        let batch = random_tensor(&[5, 6], &mut rng);

        let tape = GradTape::new();
        let (reps, _, _) = build_representations(&tape, &psi, &w, &theta, &batch).unwrap();
        let loss_cfg = LossConfig::default();
        let out = fedfs_batch_loss(&tape, &reps, &loss_cfg).unwrap();

        let fused = tape.value(reps.fused);
        let cosm = cosine_matrix(&fused, &reps.reference, NORM_EPS).unwrap();
        let insub = intra_subject_loss(&cosm, &out.labels).unwrap();
        let reg = regularization_loss(
            &tape.value(reps.global_pre),
            &tape.value(reps.personal_pre),
            NORM_EPS,
        )
        .unwrap();
        let total = total_loss(insub, reg, loss_cfg.lambda).unwrap();
        assert!((out.insub_value - insub).abs() < 1e-12);
        assert!((out.reg_value - reg).abs() < 1e-12);
        assert!((out.total_value - total).abs() < 1e-12);
        assert!((tape.value(out.total).item().unwrap() - total).abs() < 1e-12);
    }

    #[test]
    fn ablation_switches_change_objective() {
        let cfg = EncoderConfig {
            input_dim: 6,
            hidden_dims: vec![5],
            embed_dim: 4,
        };
        let psi = EncoderParams::seeded(cfg.clone(), 41);
        let w = EncoderParams::seeded(cfg.clone(), 42);
        let theta = EncoderParams::seeded(cfg, 43);
        let mut rng = SplitMix64::new(44);
        let batch = random_tensor(&[4, 6], &mut rng);

        let run = |use_reg: bool, use_soft: bool| {
            let tape = GradTape::new();
            let (reps, _, _) = build_representations(&tape, &psi, &w, &theta, &batch).unwrap();
            let cfg = LossConfig {
                use_reg_loss: use_reg,
                use_adaptive_soft_label: use_soft,
                ..Default::default()
            };
            fedfs_batch_loss(&tape, &reps, &cfg).unwrap()
        };

        let a = run(false, false);
        let b = run(true, false);
        let full = run(true, true);
        // setup A keeps the lambda weighting but drops the regularizer
        assert!((a.total_value - 0.7 * a.insub_value).abs() < 1e-15);
        // setup B mixes in the regularizer
        assert!((b.total_value - (0.7 * b.insub_value + 0.3 * b.reg_value)).abs() < 1e-12);
        // hard-label targets are one-hot; adaptive ones are not
        assert_eq!(a.labels, Tensor::identity(4));
        assert_ne!(full.labels, Tensor::identity(4));
    }
}
