//! Local client training.
//!
//! One call covers one communication round on one client: adopt the
//! broadcast global parameters, run the configured number of local epochs
//! of joint SGD on (global, personalized) against the total objective —
//! both parameter groups updated from the same backward pass — and hand
//! back the new global parameters plus the local sample count. The
//! personalized parameters persist on the client and are never uploaded;
//! the frozen reference encoder is read-only throughout.
//!
//! Training is pure: the caller owns state commits, so a diverged client
//! (non-finite loss) leaves no partial mutation behind and the server can
//! simply exclude it from aggregation for the round.

use serde::{Deserialize, Serialize};

use crate::convergence::TrajectoryRecorder;
use crate::datagen::IdentityDataset;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::losses::{build_representations, fedfs_batch_loss, LossConfig};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{GradTape, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ClientHyper {
    /// SGD learning rate η.
    pub lr: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
}

impl Default for ClientHyper {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            local_epochs: 2,
            batch_size: 8,
            loss: LossConfig::default(),
        }
    }
}

impl ClientHyper {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 (the intra-subject loss needs an off-diagonal pair)"
                    .into(),
            ));
        }
        self.loss.validate()
    }
}

/// One client's persistent state across rounds.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub client_id: u32,
    /// Local copy of the global model; overwritten by each broadcast.
    pub global: EncoderParams,
    /// Personalized model; persists across rounds, never uploaded.
    pub personal: EncoderParams,
    pub dataset: IdentityDataset,
    pub hyper: ClientHyper,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossTraceEntry {
    pub insub: f64,
    pub reg: f64,
    pub total: f64,
}

/// What a client uploads after local training.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub global: EncoderParams,
    /// Local training-set cardinality; the FedAvg weight numerator.
    pub num_samples: usize,
    /// (intra-subject, regularizer, total) per local step.
    pub loss_trace: Vec<LossTraceEntry>,
}

/// Full result of one local run: the upload plus the new private state.
#[derive(Debug)]
pub struct TrainingOutcome {
    pub update: ClientUpdate,
    pub personal: EncoderParams,
}

/// Seeded shuffle then contiguous chunks. A trailing chunk of a single row
/// is merged into the previous batch — every batch must keep at least one
/// off-diagonal pair.
pub fn make_batches(train: &Tensor, batch_size: usize, seed: u64) -> Result<Vec<Tensor>> {
    if batch_size < 2 {
        return Err(Error::Config("batch_size must be at least 2".into()));
    }
    let n = train.rows();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(seed).shuffle(&mut order);

    let mut bounds: Vec<usize> = (0..n / batch_size).map(|i| (i + 1) * batch_size).collect();
    match n % batch_size {
        0 => {}
        1 => {
            // fold the lone trailing row into the previous chunk
            if let Some(last) = bounds.last_mut() {
                *last = n;
            } else {
                bounds.push(n);
            }
        }
        _ => bounds.push(n),
    }
    let mut start = 0;
    Ok(bounds
        .into_iter()
        .map(|end| {
            let batch = train.gather_rows(&order[start..end]);
            start = end;
            batch
        })
        .collect())
}

/// Runs the local training procedure for one round.
///
/// Deterministic in (state, broadcast, reference, seed). On a non-finite
/// loss the error carries the local step index and no state is produced.
pub fn client_training(
    state: &ClientState,
    broadcast: &EncoderParams,
    reference: &EncoderParams,
    seed: u64,
    mut recorder: Option<&mut TrajectoryRecorder>,
) -> Result<TrainingOutcome> {
    state.hyper.validate()?;
    if broadcast.config() != state.personal.config() {
        return Err(Error::Shape(
            "broadcast and personalized architectures differ".into(),
        ));
    }
    if reference.config().embed_dim != broadcast.config().embed_dim {
        return Err(Error::Shape(
            "reference embedding width must match the trainable encoders".into(),
        ));
    }

    let mut global = broadcast.clone();
    let mut personal = state.personal.clone();
    let mut loss_trace = Vec::new();
    if let Some(rec) = recorder.as_deref_mut() {
        rec.record_params(&global, &personal);
    }

    let mut step = 0usize;
    for epoch in 0..state.hyper.local_epochs {
        let batches = make_batches(
            &state.dataset.train,
            state.hyper.batch_size,
            derive_seed(&[seed, epoch as u64]),
        )?;
        for batch in &batches {
            let tape = GradTape::new();
            let (reps, global_taped, personal_taped) =
                build_representations(&tape, reference, &global, &personal, batch)?;
            let loss = fedfs_batch_loss(&tape, &reps, &state.hyper.loss)?;
            if !loss.total_value.is_finite() {
                return Err(Error::Diverged { step });
            }
            let grads = tape.backward(loss.total)?;
            global = global.sgd_step(&global_taped.grads(&grads), state.hyper.lr)?;
            personal = personal.sgd_step(&personal_taped.grads(&grads), state.hyper.lr)?;
            loss_trace.push(LossTraceEntry {
                insub: loss.insub_value,
                reg: loss.reg_value,
                total: loss.total_value,
            });
            if let Some(rec) = recorder.as_deref_mut() {
                rec.record_params(&global, &personal);
                rec.record_loss(loss.total_value);
            }
            step += 1;
        }
    }

    Ok(TrainingOutcome {
        update: ClientUpdate {
            client_id: state.client_id,
            global,
            num_samples: state.dataset.train.rows(),
            loss_trace,
        },
        personal,
    })
}
