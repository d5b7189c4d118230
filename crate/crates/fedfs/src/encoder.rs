//! Small feedforward encoders.
//!
//! Three parameter sets share this architecture: the frozen pre-trained
//! reference encoder, the global model aggregated by the server, and the
//! per-client personalized model (the latter two are required to be
//! architecturally identical; here all three are). Hidden layers use tanh;
//! the final layer is linear. [`EncoderOutput`] exposes both the embedding
//! and the activation *before* the final linear layer, which the
//! regularization loss consumes.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{matmul, GradTape, Gradients, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 24,
            hidden_dims: vec![32],
            embed_dim: 16,
        }
    }
}

impl EncoderConfig {
    /// (in, out) for every linear layer including the final one.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.embed_dim));
        dims
    }

    /// Total parameter count: Σ (in+1)·out over layers.
    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// in×out weight matrix.
    pub weight: Tensor,
    /// out-length bias vector.
    pub bias: Tensor,
}

/// One encoder's parameters: an immutable snapshot, cheap to clone and safe
/// to broadcast to parallel client tasks. Training produces new snapshots.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    layers: Vec<DenseLayer>,
}

/// Batch output of a forward pass.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// batch×embed_dim output of the final linear layer.
    pub embedding: Tensor,
    /// batch×h activation fed into the final linear layer.
    pub pre_final: Tensor,
}

impl EncoderParams {
    /// Xavier-uniform weights, zero biases, fully determined by the seed.
    pub fn seeded(config: EncoderConfig, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let layers = config
            .layer_dims()
            .iter()
            .map(|&(fan_in, fan_out)| {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w: Vec<f64> = (0..fan_in * fan_out)
                    .map(|_| rng.uniform(-limit, limit))
                    .collect();
                DenseLayer {
                    weight: Tensor::new(&[fan_in, fan_out], w).expect("init shape"),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Self { config, layers }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    /// Copy with every layer scaled by `scale`. Starting the trainable
    /// encoders small keeps activation and embedding norms small, which
    /// gives the cosine-based objectives real leverage over the geometry
    /// within a short local-training budget; Xavier-scale inits barely move
    /// under the published learning rate.
    pub fn scaled(&self, scale: f64) -> EncoderParams {
        let scale_t = |t: &Tensor| {
            Tensor::new(t.shape(), t.data().iter().map(|x| x * scale).collect())
                .expect("same shape")
        };
        let layers = self
            .layers
            .iter()
            .map(|l| DenseLayer {
                weight: scale_t(&l.weight),
                bias: scale_t(&l.bias),
            })
            .collect();
        EncoderParams {
            config: self.config.clone(),
            layers,
        }
    }

    /// Pure forward pass. Same inputs always produce identical output,
    /// bit for bit, and exactly match the taped forward pass.
    pub fn forward(&self, batch: &Tensor) -> Result<EncoderOutput> {
        if batch.cols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "batch has {} columns, encoder wants {}",
                batch.cols(),
                self.config.input_dim
            )));
        }
        let mut current = batch.clone();
        for layer in &self.layers[..self.layers.len() - 1] {
            current = add_bias_plain(&matmul(&current, &layer.weight)?, &layer.bias);
            current = Tensor::new(
                current.shape(),
                current.data().iter().map(|x| x.tanh()).collect(),
            )?;
        }
        let last = self.layers.last().expect("at least one layer");
        let embedding = add_bias_plain(&matmul(&current, &last.weight)?, &last.bias);
        Ok(EncoderOutput {
            embedding,
            pre_final: current,
        })
    }

    /// Registers every layer on the tape so gradients flow to the weights.
    pub fn register(&self, tape: &GradTape) -> TapedEncoder {
        TapedEncoder {
            config: self.config.clone(),
            vars: self
                .layers
                .iter()
                .map(|l| (tape.input(l.weight.clone()), tape.input(l.bias.clone())))
                .collect(),
        }
    }

    /// One plain SGD step: `p ← p − lr·g` elementwise. No momentum, no
    /// weight decay.
    pub fn sgd_step(&self, grads: &EncoderGrads, lr: f64) -> Result<EncoderParams> {
        if lr < 0.0 {
            return Err(Error::Config(format!("negative learning rate {lr}")));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Shape("gradient/parameter layer count".into()));
        }
        let layers = self
            .layers
            .iter()
            .zip(&grads.layers)
            .map(|(l, (gw, gb))| {
                if gw.shape() != l.weight.shape() || gb.shape() != l.bias.shape() {
                    return Err(Error::Shape("gradient/parameter shape".into()));
                }
                Ok(DenseLayer {
                    weight: step(&l.weight, gw, lr),
                    bias: step(&l.bias, gb, lr),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderParams {
            config: self.config.clone(),
            layers,
        })
    }

    /// Flattens all parameters, layer by layer (weight row-major, then bias).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            flat.extend_from_slice(l.weight.data());
            flat.extend_from_slice(l.bias.data());
        }
        flat
    }

    pub fn from_flat(config: EncoderConfig, flat: &[f64]) -> Result<EncoderParams> {
        if flat.len() != config.param_count() {
            return Err(Error::Shape(format!(
                "{} values for a {}-parameter encoder",
                flat.len(),
                config.param_count()
            )));
        }
        let mut offset = 0;
        let layers = config
            .layer_dims()
            .iter()
            .map(|&(fan_in, fan_out)| {
                let w = &flat[offset..offset + fan_in * fan_out];
                offset += fan_in * fan_out;
                let b = &flat[offset..offset + fan_out];
                offset += fan_out;
                DenseLayer {
                    weight: Tensor::new(&[fan_in, fan_out], w.to_vec()).expect("layout"),
                    bias: Tensor::new(&[fan_out], b.to_vec()).expect("layout"),
                }
            })
            .collect();
        Ok(EncoderParams { config, layers })
    }

    /// L2 distance between two same-architecture parameter sets.
    pub fn l2_distance(&self, other: &EncoderParams) -> f64 {
        self.to_flat()
            .iter()
            .zip(other.to_flat())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// FNV-1a over the raw parameter bits; used to assert frozen parameters
    /// really stayed frozen.
    pub fn checksum(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for v in self.to_flat() {
            for byte in v.to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x1000_0000_01b3);
            }
        }
        hash
    }

    /// Writes `<path>` as flat little-endian f64 plus a `.json` sidecar
    /// describing the dims and layout.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        for v in self.to_flat() {
            file.write_all(&v.to_le_bytes())?;
        }
        file.flush()?;
        let sidecar = Sidecar {
            format_version: 1,
            input_dim: self.config.input_dim,
            hidden_dims: self.config.hidden_dims.clone(),
            embed_dim: self.config.embed_dim,
            activation: "tanh".into(),
            layout: LAYOUT_NOTE.into(),
        };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EncoderParams> {
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        let config = EncoderConfig {
            input_dim: sidecar.input_dim,
            hidden_dims: sidecar.hidden_dims,
            embed_dim: sidecar.embed_dim,
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() != config.param_count() * 8 {
            return Err(Error::Validation(format!(
                "{} bytes for a {}-parameter encoder",
                bytes.len(),
                config.param_count()
            )));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        EncoderParams::from_flat(config, &flat)
    }
}

const LAYOUT_NOTE: &str =
    "per layer in order: weight row-major (input_dim x output_dim), then bias (output_dim)";

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    input_dim: usize,
    hidden_dims: Vec<usize>,
    embed_dim: usize,
    activation: String,
    layout: String,
}

fn add_bias_plain(m: &Tensor, bias: &Tensor) -> Tensor {
    let cols = m.cols();
    Tensor::new(
        m.shape(),
        m.data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bias.data()[i % cols])
            .collect(),
    )
    .expect("same shape")
}

fn step(p: &Tensor, g: &Tensor, lr: f64) -> Tensor {
    Tensor::new(
        p.shape(),
        p.data()
            .iter()
            .zip(g.data())
            .map(|(p, g)| p - lr * g)
            .collect(),
    )
    .expect("same shape")
}

/// Tape handles for one encoder's parameters.
pub struct TapedEncoder {
    config: EncoderConfig,
    vars: Vec<(Var, Var)>,
}

impl TapedEncoder {
    /// Assembles a taped encoder from externally registered layer vars
    /// (used by gradient-check harnesses that own the leaf registration).
    pub fn from_vars(config: EncoderConfig, vars: Vec<(Var, Var)>) -> Self {
        Self { config, vars }
    }

    /// Taped forward pass; returns (embedding, pre_final) nodes.
    pub fn forward(&self, tape: &GradTape, batch: &Tensor) -> Result<(Var, Var)> {
        if batch.cols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "batch has {} columns, encoder wants {}",
                batch.cols(),
                self.config.input_dim
            )));
        }
        let mut current = tape.input(batch.clone());
        for (w, b) in &self.vars[..self.vars.len() - 1] {
            let lin = tape.add_bias(tape.matmul(current, *w)?, *b)?;
            current = tape.tanh(lin);
        }
        let (w, b) = self.vars.last().expect("at least one layer");
        let embedding = tape.add_bias(tape.matmul(current, *w)?, *b)?;
        Ok((embedding, current))
    }

    /// (weight, bias) vars of a single-layer encoder, e.g. a linear head.
    pub fn single_layer_vars(&self) -> (Var, Var) {
        debug_assert_eq!(self.vars.len(), 1, "not a single-layer encoder");
        self.vars[0]
    }

    /// Extracts this encoder's gradients from a backward sweep.
    pub fn grads(&self, gradients: &Gradients) -> EncoderGrads {
        EncoderGrads {
            layers: self
                .vars
                .iter()
                .map(|(w, b)| (gradients.wrt(*w).clone(), gradients.wrt(*b).clone()))
                .collect(),
        }
    }
}

/// Per-layer (weight, bias) gradients matching an [`EncoderParams`] layout.
pub struct EncoderGrads {
    pub layers: Vec<(Tensor, Tensor)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_multi;

    #[test]
    fn param_count_example() {
        let cfg = EncoderConfig {
            input_dim: 24,
            hidden_dims: vec![32],
            embed_dim: 16,
        };
        assert_eq!(cfg.param_count(), 24 * 32 + 32 + 32 * 16 + 16);
        assert_eq!(cfg.param_count(), 1328);
    }

    #[test]
    fn zero_params_zero_output() {
        let cfg = EncoderConfig::default();
        let zero = EncoderParams::from_flat(cfg.clone(), &vec![0.0; cfg.param_count()]).unwrap();
        let batch = Tensor::new(&[2, 24], (0..48).map(|i| i as f64).collect()).unwrap();
        let out = zero.forward(&batch).unwrap();
        assert!(out.embedding.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_single_layer_passes_input_through() {
        let cfg = EncoderConfig {
            input_dim: 3,
            hidden_dims: vec![],
            embed_dim: 3,
        };
        let mut flat = Tensor::identity(3).data().to_vec();
        flat.extend_from_slice(&[0.0; 3]);
        let enc = EncoderParams::from_flat(cfg, &flat).unwrap();
        let batch = Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let out = enc.forward(&batch).unwrap();
        assert_eq!(out.embedding, batch);
        assert_eq!(out.pre_final, batch); // no hidden layer: pre-final is the input
    }

    #[test]
    fn seeded_init_deterministic() {
        let cfg = EncoderConfig::default();
        let a = EncoderParams::seeded(cfg.clone(), 33);
        let b = EncoderParams::seeded(cfg, 33);
        assert_eq!(a, b);
    }

    #[test]
    fn forward_shapes() {
        let enc = EncoderParams::seeded(EncoderConfig::default(), 5);
        let batch = Tensor::new(&[4, 24], vec![0.1; 96]).unwrap();
        let out = enc.forward(&batch).unwrap();
        assert_eq!(out.embedding.shape(), &[4, 16]);
        assert_eq!(out.pre_final.shape(), &[4, 32]);
    }

    #[test]
    fn embedding_is_last_linear_of_pre_final() {
        let enc = EncoderParams::seeded(EncoderConfig::default(), 6);
        let batch = Tensor::new(&[3, 24], (0..72).map(|i| (i as f64).sin()).collect()).unwrap();
        let out = enc.forward(&batch).unwrap();
        let last = enc.layers().last().unwrap();
        let recomputed = add_bias_plain(&matmul(&out.pre_final, &last.weight).unwrap(), &last.bias);
        for (a, b) in out.embedding.data().iter().zip(recomputed.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn taped_forward_matches_pure() {
        let enc = EncoderParams::seeded(EncoderConfig::default(), 7);
        let batch = Tensor::new(&[4, 24], (0..96).map(|i| (i as f64).cos()).collect()).unwrap();
        let pure = enc.forward(&batch).unwrap();
        let tape = GradTape::new();
        let taped = enc.register(&tape);
        let (embed, pre) = taped.forward(&tape, &batch).unwrap();
        assert_eq!(tape.value(embed), pure.embedding);
        assert_eq!(tape.value(pre), pure.pre_final);
    }

    #[test]
    fn sgd_zero_gradient_is_identity() {
        let enc = EncoderParams::seeded(EncoderConfig::default(), 8);
        let zeros = EncoderGrads {
            layers: enc
                .layers()
                .iter()
                .map(|l| {
                    (
                        Tensor::zeros(l.weight.shape()),
                        Tensor::zeros(l.bias.shape()),
                    )
                })
                .collect(),
        };
        assert_eq!(enc.sgd_step(&zeros, 0.005).unwrap(), enc);
    }

    #[test]
    fn sgd_scalar_arithmetic() {
        let cfg = EncoderConfig {
            input_dim: 1,
            hidden_dims: vec![],
            embed_dim: 1,
        };
        let p = EncoderParams::from_flat(cfg, &[1.0, 0.0]).unwrap();
        let g = EncoderGrads {
            layers: vec![(
                Tensor::new(&[1, 1], vec![2.0]).unwrap(),
                Tensor::zeros(&[1]),
            )],
        };
        let next = p.sgd_step(&g, 0.005).unwrap();
        assert!((next.layers()[0].weight.data()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn sgd_descends_on_quadratic() {
        // f(p) = ‖p‖² over the flattened parameters
        let enc = EncoderParams::seeded(EncoderConfig::default(), 9);
        let flat = enc.to_flat();
        let loss = |flat: &[f64]| flat.iter().map(|x| x * x).sum::<f64>();
        let grads: Vec<f64> = flat.iter().map(|x| 2.0 * x).collect();
        let stepped: Vec<f64> = flat
            .iter()
            .zip(&grads)
            .map(|(p, g)| p - 0.005 * g)
            .collect();
        assert!(loss(&stepped) < loss(&flat));
    }

    #[test]
    fn flat_round_trip() {
        let enc = EncoderParams::seeded(EncoderConfig::default(), 10);
        let back = EncoderParams::from_flat(enc.config().clone(), &enc.to_flat()).unwrap();
        assert_eq!(enc, back);
    }

    #[test]
    fn save_load_round_trip() {
        let enc = EncoderParams::seeded(EncoderConfig::default(), 11);
        let dir = std::env::temp_dir().join("fedfs_encoder_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("params.bin");
        enc.save(&path).unwrap();
        let back = EncoderParams::load(&path).unwrap();
        assert_eq!(enc, back);
    }

    #[test]
    fn encoder_gradients_pass_grad_check() {
        // differentiate Σ embedding² through the whole encoder stack
        let cfg = EncoderConfig {
            input_dim: 5,
            hidden_dims: vec![6],
            embed_dim: 4,
        };
        let enc = EncoderParams::seeded(cfg, 12);
        let batch =
            Tensor::new(&[3, 5], (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let inputs: Vec<Tensor> = enc
            .layers()
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect();
        let err = grad_check_multi(
            |tape, vars| {
                let taped = TapedEncoder::from_vars(
                    enc.config().clone(),
                    vars.chunks(2).map(|c| (c[0], c[1])).collect(),
                );
                let (embed, _) = taped.forward(tape, &batch)?;
                Ok(tape.sum_squares(embed))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "encoder grad err {err}");
    }
}
