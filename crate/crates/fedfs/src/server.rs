//! Round orchestration: participant sampling, broadcast, collection,
//! sample-weighted FedAvg aggregation, and the outer communication-round
//! loop.
//!
//! Rounds are sequential (FedAvg is a synchronization barrier); within a
//! round the sampled clients train concurrently. Determinism does not
//! depend on scheduling: every client's work is a pure function of
//! (state, broadcast, seed), results are committed in client-id order, and
//! aggregation always sums in ascending client-id order.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{client_training, ClientState, ClientUpdate};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};

const TAG_SAMPLE: u64 = 0x71;
const TAG_TRAIN: u64 = 0x72;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RoundConfig {
    pub total_rounds: usize,
    /// Fraction of registered clients sampled each round, in (0, 1].
    pub participation_rate: f64,
    pub seed: u64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            total_rounds: 5,
            participation_rate: 0.7,
            seed: 1,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return Err(Error::Config(format!(
                "participation_rate {} outside (0, 1]",
                self.participation_rate
            )));
        }
        Ok(())
    }
}

/// Uniform sample without replacement of `max(1, round(rate·C))` client ids,
/// returned in registry order. Seeded by (seed, round): rounds draw
/// independently and runs reproduce exactly.
pub fn sample_participants(
    registry: &[u32],
    rate: f64,
    seed: u64,
    round: usize,
) -> Result<Vec<u32>> {
    if registry.is_empty() {
        return Err(Error::EmptyRegistry);
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Config(format!("participation rate {rate}")));
    }
    let count = ((rate * registry.len() as f64).round() as usize)
        .max(1)
        .min(registry.len());
    let mut rng = SplitMix64::new(derive_seed(&[seed, TAG_SAMPLE, round as u64]));
    let mut positions: Vec<usize> = (0..registry.len()).collect();
    // partial Fisher-Yates: the first `count` slots are the sample
    for i in 0..count {
        let j = i + rng.below(positions.len() - i);
        positions.swap(i, j);
    }
    let mut chosen = positions[..count].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|p| registry[p]).collect())
}

/// Parameter-wise weighted mean with weights `|D_c| / Σ|D_c|`, summed in
/// ascending client-id order for bit-reproducibility.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<EncoderParams> {
    if updates.is_empty() {
        return Err(Error::Contract("fedavg over an empty update list".into()));
    }
    let config = updates[0].global.config();
    if updates.iter().any(|u| u.global.config() != config) {
        return Err(Error::Shape("mixed architectures in aggregation".into()));
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);

    let total: usize = updates.iter().map(|u| u.num_samples).sum();
    if total == 0 {
        return Err(Error::Contract(
            "aggregation with zero total samples".into(),
        ));
    }
    let mut acc = vec![0.0f64; config.param_count()];
    for &i in &order {
        let weight = updates[i].num_samples as f64 / total as f64;
        for (a, p) in acc.iter_mut().zip(updates[i].global.to_flat()) {
            *a += weight * p;
        }
    }
    EncoderParams::from_flat(config.clone(), &acc)
}

/// Why a sampled client contributed nothing this round.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExclusionEvent {
    pub client_id: u32,
    pub reason: String,
}

/// Everything recorded about one communication round.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<u32>,
    pub excluded: Vec<ExclusionEvent>,
    /// True when every sampled client failed and aggregation was skipped.
    pub aborted: bool,
    pub mean_insub: f64,
    pub mean_reg: f64,
    pub mean_total: f64,
    /// (client_id, FedAvg weight), ascending by id.
    pub aggregation_weights: Vec<(u32, f64)>,
    /// Wall-clock seconds; diagnostic only, excluded from metrics files.
    pub wall_secs: f64,
}

/// Outcome of a full federation run.
#[derive(Debug)]
pub struct FederationRun {
    pub global: EncoderParams,
    pub rounds: Vec<RoundRecord>,
}

/// Runs T communication rounds over the given clients, mutating their
/// per-client state in place (sampled clients adopt the broadcast and their
/// trained parameters; everyone else keeps stale state).
pub fn run_federation(
    clients: &mut [ClientState],
    reference: &EncoderParams,
    initial_global: EncoderParams,
    config: &RoundConfig,
    threads: usize,
) -> Result<FederationRun> {
    config.validate()?;
    let registry: Vec<u32> = clients.iter().map(|c| c.client_id).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let mut global = initial_global;
    let mut rounds = Vec::with_capacity(config.total_rounds);

    for round in 0..config.total_rounds {
        let start = Instant::now();
        let ids = sample_participants(&registry, config.participation_rate, config.seed, round)?;
        let broadcast = global.clone();

        let mut indexed: Vec<usize> = ids
            .iter()
            .map(|id| {
                clients
                    .iter()
                    .position(|c| c.client_id == *id)
                    .expect("sampled id is registered")
            })
            .collect();
        indexed.sort_by_key(|&i| clients[i].client_id);

        let outcomes: Vec<(usize, crate::error::Result<crate::client::TrainingOutcome>)> = pool
            .install(|| {
                indexed
                    .par_iter()
                    .map(|&i| {
                        let state = &clients[i];
                        let seed = derive_seed(&[
                            config.seed,
                            TAG_TRAIN,
                            round as u64,
                            state.client_id as u64,
                        ]);
                        (i, client_training(state, &broadcast, reference, seed, None))
                    })
                    .collect()
            });

        let mut updates: Vec<ClientUpdate> = Vec::new();
        let mut excluded = Vec::new();
        for (i, outcome) in outcomes {
            match outcome {
                Ok(out) => {
                    clients[i].global = out.update.global.clone();
                    clients[i].personal = out.personal;
                    updates.push(out.update);
                }
                Err(e) => excluded.push(ExclusionEvent {
                    client_id: clients[i].client_id,
                    reason: e.to_string(),
                }),
            }
        }

        let mut record = RoundRecord {
            round,
            participants: ids,
            excluded,
            aborted: updates.is_empty(),
            mean_insub: f64::NAN,
            mean_reg: f64::NAN,
            mean_total: f64::NAN,
            aggregation_weights: Vec::new(),
            wall_secs: 0.0,
        };

        if !updates.is_empty() {
            updates.sort_by_key(|u| u.client_id);
            let total_samples: usize = updates.iter().map(|u| u.num_samples).sum();
            record.aggregation_weights = updates
                .iter()
                .map(|u| (u.client_id, u.num_samples as f64 / total_samples as f64))
                .collect();
            let mut sums = (0.0, 0.0, 0.0);
            let mut n = 0usize;
            for u in &updates {
                for e in &u.loss_trace {
                    sums.0 += e.insub;
                    sums.1 += e.reg;
                    sums.2 += e.total;
                    n += 1;
                }
            }
            if n > 0 {
                record.mean_insub = sums.0 / n as f64;
                record.mean_reg = sums.1 / n as f64;
                record.mean_total = sums.2 / n as f64;
            }
            global = fedavg(&updates)?;
        }
        // an aborted round leaves the global parameters untouched

        record.wall_secs = start.elapsed().as_secs_f64();
        rounds.push(record);
    }

    Ok(FederationRun { global, rounds })
}
