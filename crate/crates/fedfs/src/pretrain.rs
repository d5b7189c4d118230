//! Pre-training of the frozen reference encoder on the public identity pool.
//!
//! The reference encoder plays the part of an off-the-shelf model trained on
//! public data: a seeded init followed by a short supervised classification
//! pass (linear head, softmax cross entropy, plain SGD) over identities that
//! no client ever sees. The head is discarded; only the encoder ships.

use serde::{Deserialize, Serialize};

use crate::datagen::IdentityDataset;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{GradTape, Tensor};

const TAG_ENCODER: u64 = 0x51;
const TAG_HEAD: u64 = 0x52;
const TAG_EPOCH: u64 = 0x53;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 32,
            lr: 0.02,
        }
    }
}

/// Deterministic pre-trained parameters for the reference encoder.
/// Same seed, same pool, same result — bit for bit.
pub fn init_pretrained(
    seed: u64,
    config: &EncoderConfig,
    public_pool: &[IdentityDataset],
    opts: &PretrainConfig,
) -> Result<EncoderParams> {
    if public_pool.is_empty() {
        return Err(Error::Config("public pool is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("pretrain batch_size must be positive".into()));
    }
    let num_classes = public_pool.len();
    let mut encoder = EncoderParams::seeded(config.clone(), derive_seed(&[seed, TAG_ENCODER]));
    // classifier head: one linear layer on top of the embedding
    let head_cfg = EncoderConfig {
        input_dim: config.embed_dim,
        hidden_dims: vec![],
        embed_dim: num_classes,
    };
    let mut head = EncoderParams::seeded(head_cfg, derive_seed(&[seed, TAG_HEAD]));

    // flatten the pool into one matrix plus class labels
    let mut rows: Vec<f64> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (class, identity) in public_pool.iter().enumerate() {
        let all = identity.all_rows();
        if all.cols() != config.input_dim {
            return Err(Error::Shape(format!(
                "public pool identity {} has {} features, encoder wants {}",
                identity.identity_id,
                all.cols(),
                config.input_dim
            )));
        }
        rows.extend_from_slice(all.data());
        labels.extend(std::iter::repeat_n(class, all.rows()));
    }
    let samples = Tensor::new(&[labels.len(), config.input_dim], rows)?;

    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..labels.len()).collect();
        let mut rng = SplitMix64::new(derive_seed(&[seed, TAG_EPOCH, epoch as u64]));
        rng.shuffle(&mut order);

        for chunk in order.chunks(opts.batch_size) {
            let batch = samples.gather_rows(chunk);
            let mut target_data = vec![0.0; chunk.len() * num_classes];
            for (row, &i) in chunk.iter().enumerate() {
                target_data[row * num_classes + labels[i]] = 1.0;
            }
            let targets = Tensor::new(&[chunk.len(), num_classes], target_data)?;

            let tape = GradTape::new();
            let enc_taped = encoder.register(&tape);
            let head_taped = head.register(&tape);
            let (embed, _) = enc_taped.forward(&tape, &batch)?;
            let (hw, hb) = head_taped.single_layer_vars();
            let logits = tape.add_bias(tape.matmul(embed, hw)?, hb)?;
            let loss = tape.softmax_cross_entropy(logits, &targets)?;
            if !tape.value(loss).item()?.is_finite() {
                return Err(Error::Numeric("pre-training loss diverged".into()));
            }
            let grads = tape.backward(loss)?;
            encoder = encoder.sgd_step(&enc_taped.grads(&grads), opts.lr)?;
            head = head.sgd_step(&head_taped.grads(&grads), opts.lr)?;
        }
    }
    Ok(encoder)
}
