//! Synthetic identity universe.
//!
//! Stands in for the face-image benchmarks at desk scale: every identity is
//! a latent center on a sphere, samples are the center plus Gaussian
//! within-class noise pushed through a shared nonlinear warp, and each
//! client owns exactly one identity. A disjoint pool of *public* identities
//! feeds pre-training of the frozen reference encoder, and a pool of
//! *impostor* identities (never enrolled, never trained on) drives the
//! false-positive side of identification metrics.
//!
//! Datasets round-trip through a versioned JSON-lines file so externally
//! produced feature sets can be ingested as well.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tensor;

const TAG_CENTER: u64 = 0x11;
const TAG_SAMPLES: u64 = 0x22;
const TAG_WARP: u64 = 0x33;

/// Shape of the synthetic universe. Defaults give a minutes-scale federation
/// of 200 one-identity clients over 24-dimensional features.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct UniverseConfig {
    pub num_clients: usize,
    pub samples_per_identity: usize,
    pub input_dim: usize,
    /// Within-identity noise σ per feature dimension.
    pub intra_class_noise: f64,
    /// Radius of the sphere identity centers are drawn on.
    pub inter_class_separation: f64,
    /// Identities reserved as never-enrolled impostors (non-mated searches).
    pub impostor_identities: usize,
    /// Disjoint identities used only to pre-train the reference encoder.
    pub public_pool_identities: usize,
    pub seed: u64,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        Self {
            num_clients: 200,
            samples_per_identity: 70,
            input_dim: 24,
            intra_class_noise: 0.7,
            inter_class_separation: 6.0,
            impostor_identities: 50,
            public_pool_identities: 60,
            seed: 1,
        }
    }
}

impl UniverseConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_clients", self.num_clients),
            ("samples_per_identity", self.samples_per_identity),
            ("input_dim", self.input_dim),
            ("public_pool_identities", self.public_pool_identities),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.intra_class_noise <= 0.0 {
            return Err(Error::Config("intra_class_noise must be > 0".into()));
        }
        if self.inter_class_separation <= 0.0 {
            return Err(Error::Config("inter_class_separation must be > 0".into()));
        }
        Ok(())
    }
}

/// All samples of one identity, split 80/20 into train and eval rows.
/// `client_id` is 0 for identities no client owns (impostors, public pool).
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityDataset {
    pub client_id: u32,
    pub identity_id: u32,
    pub train: Tensor,
    pub eval: Tensor,
}

impl IdentityDataset {
    pub fn num_train(&self) -> usize {
        self.train.rows()
    }

    /// All rows, train then eval.
    pub fn all_rows(&self) -> Tensor {
        let mut data = self.train.data().to_vec();
        data.extend_from_slice(self.eval.data());
        Tensor::new(
            &[self.train.rows() + self.eval.rows(), self.train.cols()],
            data,
        )
        .expect("consistent dims")
    }
}

/// The generated (or loaded) world: client identities, impostor identities,
/// and the public pre-training pool.
#[derive(Clone, Debug)]
pub struct Universe {
    pub input_dim: usize,
    pub clients: Vec<IdentityDataset>,
    pub impostors: Vec<IdentityDataset>,
    pub public_pool: Vec<IdentityDataset>,
}

/// Shared nonlinear warp applied to every raw sample: `x + tanh(Mx)` with a
/// seeded mixing matrix. Keeps clusters separable while making the feature
/// map something the encoders actually have to learn.
struct Warp {
    mix: Vec<f64>,
    dim: usize,
}

impl Warp {
    fn new(dim: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(derive_seed(&[seed, TAG_WARP]));
        let scale = 1.0 / (dim as f64).sqrt();
        let mix = (0..dim * dim).map(|_| rng.next_gauss() * scale).collect();
        Self { mix, dim }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|i| {
                let mixed: f64 = (0..d).map(|j| self.mix[i * d + j] * x[j]).sum();
                x[i] + mixed.tanh()
            })
            .collect()
    }
}

fn split_80_20(samples: Vec<Vec<f64>>, dim: usize) -> (Tensor, Tensor) {
    let n = samples.len();
    let n_train = n * 4 / 5;
    let train: Vec<f64> = samples[..n_train].concat();
    let eval: Vec<f64> = samples[n_train..].concat();
    (
        Tensor::new(&[n_train, dim], train).expect("split shape"),
        Tensor::new(&[n - n_train, dim], eval).expect("split shape"),
    )
}

fn generate_identity(
    cfg: &UniverseConfig,
    warp: &Warp,
    identity_id: u32,
    client_id: u32,
) -> IdentityDataset {
    let d = cfg.input_dim;
    let mut center_rng = SplitMix64::new(derive_seed(&[cfg.seed, TAG_CENTER, identity_id as u64]));
    let raw = center_rng.gauss_vec(d);
    let norm: f64 = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let center: Vec<f64> = raw
        .iter()
        .map(|x| x / norm * cfg.inter_class_separation)
        .collect();

    let mut rng = SplitMix64::new(derive_seed(&[cfg.seed, TAG_SAMPLES, identity_id as u64]));
    let samples: Vec<Vec<f64>> = (0..cfg.samples_per_identity)
        .map(|_| {
            let raw: Vec<f64> = center
                .iter()
                .map(|c| c + cfg.intra_class_noise * rng.next_gauss())
                .collect();
            warp.apply(&raw)
        })
        .collect();

    let (train, eval) = split_80_20(samples, d);
    IdentityDataset {
        client_id,
        identity_id,
        train,
        eval,
    }
}

/// Generates the full universe deterministically from the config seed.
/// Identity ids are assigned clients first, then impostors, then the public
/// pool, so the three groups are always disjoint.
pub fn generate_universe(cfg: &UniverseConfig) -> Result<Universe> {
    cfg.validate()?;
    let warp = Warp::new(cfg.input_dim, cfg.seed);

    let clients: Vec<IdentityDataset> = (1..=cfg.num_clients as u32)
        .map(|c| generate_identity(cfg, &warp, c, c))
        .collect();
    let mut next_id = cfg.num_clients as u32;
    let impostors: Vec<IdentityDataset> = (0..cfg.impostor_identities)
        .map(|_| {
            next_id += 1;
            generate_identity(cfg, &warp, next_id, 0)
        })
        .collect();
    let public_pool: Vec<IdentityDataset> = (0..cfg.public_pool_identities)
        .map(|_| {
            next_id += 1;
            generate_identity(cfg, &warp, next_id, 0)
        })
        .collect();

    Ok(Universe {
        input_dim: cfg.input_dim,
        clients,
        impostors,
        public_pool,
    })
}

/// Fraction of eval rows whose nearest train centroid belongs to their own
/// identity. A generated universe must beat chance before any training runs.
pub fn nearest_centroid_accuracy(datasets: &[IdentityDataset]) -> f64 {
    let centroids: Vec<Vec<f64>> = datasets
        .iter()
        .map(|d| {
            let (n, c) = (d.train.rows(), d.train.cols());
            let mut mean = vec![0.0; c];
            for i in 0..n {
                for (j, m) in mean.iter_mut().enumerate() {
                    *m += d.train.at(i, j);
                }
            }
            mean.iter().map(|m| m / n as f64).collect()
        })
        .collect();

    let mut correct = 0usize;
    let mut total = 0usize;
    for (own, d) in datasets.iter().enumerate() {
        for i in 0..d.eval.rows() {
            let row = d.eval.row(i);
            let mut best = (f64::INFINITY, 0usize);
            for (k, c) in centroids.iter().enumerate() {
                let dist: f64 = row.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.0 {
                    best = (dist, k);
                }
            }
            if best.1 == own {
                correct += 1;
            }
            total += 1;
        }
    }
    correct as f64 / total.max(1) as f64
}

// --- JSON-lines persistence -------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    input_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    client_id: u32,
    identity_id: u32,
    role: String,
    split: String,
    features: Vec<f64>,
}

const FORMAT_VERSION: u32 = 1;

fn write_group<W: Write>(out: &mut W, group: &[IdentityDataset], role: &str) -> Result<()> {
    for d in group {
        for (split, t) in [("train", &d.train), ("eval", &d.eval)] {
            for i in 0..t.rows() {
                let rec = Record {
                    client_id: d.client_id,
                    identity_id: d.identity_id,
                    role: role.into(),
                    split: split.into(),
                    features: t.row(i).to_vec(),
                };
                serde_json::to_writer(&mut *out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

/// Writes the universe as JSON lines: a version header, then one record per
/// sample. `f64` features round-trip exactly.
pub fn save_dataset(universe: &Universe, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(
        &mut out,
        &Header {
            format_version: FORMAT_VERSION,
            input_dim: universe.input_dim,
        },
    )?;
    out.write_all(b"\n")?;
    write_group(&mut out, &universe.clients, "client")?;
    write_group(&mut out, &universe.impostors, "impostor")?;
    write_group(&mut out, &universe.public_pool, "public")?;
    out.flush()?;
    Ok(())
}

struct PendingIdentity {
    client_id: u32,
    identity_id: u32,
    role: String,
    train: Vec<Vec<f64>>,
    eval: Vec<Vec<f64>>,
}

/// Loads and validates a JSON-lines dataset file.
pub fn load_dataset(path: &Path) -> Result<Universe> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let header: Header = match lines.next() {
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty file (missing header line)".into(),
            })
        }
        Some((_, line)) => {
            let line = line?;
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: 1,
                msg: format!("bad header: {e}"),
            })?
        }
    };
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported format_version {}", header.format_version),
        });
    }

    // identity_id -> accumulated samples, in first-seen order
    let mut order: Vec<u32> = Vec::new();
    let mut pending: std::collections::HashMap<u32, PendingIdentity> =
        std::collections::HashMap::new();

    for (i, line) in lines {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if rec.features.len() != header.input_dim {
            return Err(Error::Validation(format!(
                "record at line {} (client {}, identity {}): {} features, expected {}",
                line_no,
                rec.client_id,
                rec.identity_id,
                rec.features.len(),
                header.input_dim
            )));
        }
        match rec.role.as_str() {
            "client" if rec.client_id == 0 => {
                return Err(Error::Validation(format!(
                    "record at line {line_no}: client role requires client_id >= 1"
                )))
            }
            "impostor" | "public" if rec.client_id != 0 => {
                return Err(Error::Validation(format!(
                    "record at line {line_no}: role {} must not carry a client_id",
                    rec.role
                )))
            }
            "client" | "impostor" | "public" => {}
            other => {
                return Err(Error::Validation(format!(
                    "record at line {line_no}: unknown role {other:?}"
                )))
            }
        }
        let entry = pending.entry(rec.identity_id).or_insert_with(|| {
            order.push(rec.identity_id);
            PendingIdentity {
                client_id: rec.client_id,
                identity_id: rec.identity_id,
                role: rec.role.clone(),
                train: Vec::new(),
                eval: Vec::new(),
            }
        });
        if entry.client_id != rec.client_id || entry.role != rec.role {
            return Err(Error::Validation(format!(
                "record at line {line_no}: identity {} previously seen with client {} role {}",
                rec.identity_id, entry.client_id, entry.role
            )));
        }
        match rec.split.as_str() {
            "train" => entry.train.push(rec.features),
            "eval" => entry.eval.push(rec.features),
            other => {
                return Err(Error::Validation(format!(
                    "record at line {line_no}: unknown split {other:?}"
                )))
            }
        }
    }

    if pending.is_empty() {
        return Err(Error::Parse {
            line: 2,
            msg: "no records after header".into(),
        });
    }

    // one identity per client
    let mut clients_seen: std::collections::HashMap<u32, u32> = std::collections::HashMap::new();
    for p in pending.values() {
        if p.client_id != 0 {
            if let Some(prev) = clients_seen.insert(p.client_id, p.identity_id) {
                return Err(Error::Validation(format!(
                    "client {} holds identities {} and {}",
                    p.client_id, prev, p.identity_id
                )));
            }
        }
    }

    let mut universe = Universe {
        input_dim: header.input_dim,
        clients: Vec::new(),
        impostors: Vec::new(),
        public_pool: Vec::new(),
    };
    let d = header.input_dim;
    for id in order {
        let p = pending.remove(&id).expect("ordered key");
        let to_tensor = |rows: Vec<Vec<f64>>| {
            Tensor::new(&[rows.len(), d], rows.concat()).expect("validated dims")
        };
        let ds = IdentityDataset {
            client_id: p.client_id,
            identity_id: p.identity_id,
            train: to_tensor(p.train),
            eval: to_tensor(p.eval),
        };
        match p.role.as_str() {
            "client" => universe.clients.push(ds),
            "impostor" => universe.impostors.push(ds),
            _ => universe.public_pool.push(ds),
        }
    }
    universe.clients.sort_by_key(|c| c.client_id);
    Ok(universe)
}
