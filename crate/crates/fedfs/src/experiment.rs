//! Experiment driver: presets, seed derivation, artifact assembly.
//!
//! One experiment = a grid of (run arm × master seed). Every master seed
//! derives independent child seeds for universe generation, pre-training,
//! global init, round sampling and evaluation, so arms within a seed share
//! one universe (ablations and sweeps are paired comparisons) while seeds
//! are independent replicates. Everything downstream of the config is
//! deterministic; artifact files are byte-identical across re-runs and
//! parallelism degrees.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::client::{client_training, ClientHyper, ClientState};
use crate::convergence::{check_bounds, estimate_lipschitz, BoundsReport, TrajectoryRecorder};
use crate::datagen::{generate_universe, Universe, UniverseConfig};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_mode, EmbedMode, EvalConfig, IdentificationProtocol, ModeEvaluation, ModeSummary,
};
use crate::losses::{build_representations, fedfs_batch_loss};
use crate::pretrain::{init_pretrained, PretrainConfig};
use crate::rng::derive_seed;
use crate::server::{run_federation, RoundConfig, RoundRecord};
use crate::tensor::GradTape;

const TAG_UNIVERSE: u64 = 0xA1;
const TAG_PRETRAIN: u64 = 0xA2;
const TAG_INIT: u64 = 0xA3;
const TAG_INIT_PERSONAL: u64 = 0xA8;
const TAG_ROUNDS: u64 = 0xA4;
const TAG_EVAL: u64 = 0xA5;
const TAG_MONITOR: u64 = 0xA6;
const TAG_LIPSCHITZ: u64 = 0xA7;

/// Complete experiment configuration. Defaults are the published operating
/// point: η=5e-3, 2 local epochs, T=5 rounds, batch 8, λ=0.7, k=4, γ=2,
/// label exponent 1, participation 0.7.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ExperimentConfig {
    pub universe: UniverseConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub client: ClientHyper,
    pub rounds: RoundConfig,
    pub eval: EvalConfig,
    /// Master seeds; each is an independent replicate.
    pub seeds: Vec<u64>,
    /// Worker threads (0 = all available cores).
    pub threads: usize,
    /// Participation rates exercised by the sweep preset.
    pub sweep_rates: Vec<f64>,
    /// Init scale of the trainable encoders (all layers). Small inits give
    /// the cosine objectives leverage over the embedding geometry within
    /// the short local-training budget.
    pub trainable_init_scale: f64,
    /// Convergence-monitor probe count and ball radius.
    pub lipschitz_probes: usize,
    pub lipschitz_radius: f64,
    /// Also emit ROC curves as SVG.
    pub emit_svg: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            universe: UniverseConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            client: ClientHyper::default(),
            rounds: RoundConfig::default(),
            eval: EvalConfig::default(),
            seeds: vec![1, 2, 3, 4, 5],
            threads: 0,
            sweep_rates: vec![0.01, 0.1, 0.3, 0.5, 0.7],
            trainable_init_scale: 0.2,
            lipschitz_probes: 6,
            lipschitz_radius: 0.05,
            emit_svg: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.universe.validate()?;
        self.client.validate()?;
        self.rounds.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed required".into()));
        }
        if self.encoder.input_dim != self.universe.input_dim {
            return Err(Error::Config(format!(
                "encoder input_dim {} != universe input_dim {}",
                self.encoder.input_dim, self.universe.input_dim
            )));
        }
        for r in &self.sweep_rates {
            if !(*r > 0.0 && *r <= 1.0) {
                return Err(Error::Config(format!("sweep rate {r} outside (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn effective_threads(&self) -> usize {
        if self.threads == 0 {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        } else {
            self.threads
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }
}

/// The four experiment presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Trained federation vs the frozen pre-trained baseline.
    Main,
    /// Participation-rate sweep with the full objective.
    Sweep,
    /// Objective ablations (A: neither component, B: regularizer only,
    /// full: both), sharing one universe per seed.
    Ablation,
    /// Similarity-distribution analysis of trained vs frozen embeddings.
    Similarity,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Preset> {
        match name {
            "main" => Ok(Preset::Main),
            "sweep" => Ok(Preset::Sweep),
            "ablation" => Ok(Preset::Ablation),
            "similarity" => Ok(Preset::Similarity),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (main|sweep|ablation|similarity)"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Preset::Main => "main",
            Preset::Sweep => "sweep",
            Preset::Ablation => "ablation",
            Preset::Similarity => "similarity",
        }
    }
}

/// One federation arm of the grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSpec {
    pub name: String,
    pub participation_rate: f64,
    pub use_reg_loss: bool,
    pub use_adaptive_soft_label: bool,
}

/// Expands a preset into its federation arms.
pub fn plan_runs(preset: Preset, config: &ExperimentConfig) -> Vec<RunSpec> {
    let full = |name: &str, rate: f64| RunSpec {
        name: name.into(),
        participation_rate: rate,
        use_reg_loss: true,
        use_adaptive_soft_label: true,
    };
    match preset {
        Preset::Main | Preset::Similarity => {
            vec![full("full", config.rounds.participation_rate)]
        }
        Preset::Sweep => config
            .sweep_rates
            .iter()
            .map(|&r| full(&format!("rate_{r}"), r))
            .collect(),
        Preset::Ablation => vec![
            RunSpec {
                name: "ablation_a".into(),
                participation_rate: config.rounds.participation_rate,
                use_reg_loss: false,
                use_adaptive_soft_label: false,
            },
            RunSpec {
                name: "ablation_b".into(),
                participation_rate: config.rounds.participation_rate,
                use_reg_loss: true,
                use_adaptive_soft_label: false,
            },
            full("full", config.rounds.participation_rate),
        ],
    }
}

/// Convergence diagnostics for one monitored client.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub client_id: u32,
    /// L̂ coupling ∇_global differences to personal-parameter distance.
    pub lipschitz_global: f64,
    /// L̂ coupling ∇_personal differences to global-parameter distance.
    pub lipschitz_personal: f64,
    pub bounds: BoundsReport,
}

/// All metrics of one (run, seed) cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub summary: ModeSummary,
    pub rounds: Vec<RoundRecord>,
    pub convergence: Option<ConvergenceReport>,
}

/// Per-arm results across seeds plus medians of the per-seed client means.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunOutcome {
    pub spec: RunSpec,
    pub per_seed: Vec<SeedOutcome>,
    pub median_auroc: f64,
    /// (fpir, median of per-seed mean TPIR); None when unresolvable.
    pub median_tpir: Vec<(f64, Option<f64>)>,
    pub median_overlap: f64,
    pub median_intra_class_variance: f64,
}

/// Everything the acceptance suite and the report command consume.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub preset: String,
    /// The frozen-baseline pseudo-run ("pretrained") plus every arm.
    pub runs: Vec<RunOutcome>,
}

/// Per-client metric rows for the CSV writer.
#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub run: String,
    pub seed: u64,
    pub mode: String,
    pub client_id: u32,
    pub identity_id: u32,
    pub metric: String,
    pub operating_point: String,
    pub value: Option<f64>,
}

/// Histogram rows for the CSV writer.
#[derive(Clone, Debug)]
pub struct HistogramRow {
    pub run: String,
    pub seed: u64,
    pub kind: &'static str,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub mass: f64,
}

/// In-memory result of a whole experiment, pre-serialization.
pub struct ExperimentResult {
    pub summary: ExperimentSummary,
    pub metrics: Vec<MetricsRow>,
    pub histograms: Vec<HistogramRow>,
    /// (run, seed, pooled mated scores, pooled non-mated scores).
    pub roc_scores: Vec<(String, u64, Vec<f64>, Vec<f64>)>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

struct SeedWorld {
    universe: Universe,
    reference: EncoderParams,
    initial_global: EncoderParams,
    initial_personal: EncoderParams,
    protocol: IdentificationProtocol,
    eval_cfg: EvalConfig,
}

impl SeedWorld {
    fn build(config: &ExperimentConfig, master_seed: u64) -> Result<SeedWorld> {
        let mut ucfg = config.universe.clone();
        ucfg.seed = derive_seed(&[master_seed, TAG_UNIVERSE]);
        let universe = generate_universe(&ucfg)?;
        let reference = init_pretrained(
            derive_seed(&[master_seed, TAG_PRETRAIN]),
            &config.encoder,
            &universe.public_pool,
            &config.pretrain,
        )?;
        let initial_global = EncoderParams::seeded(
            config.encoder.clone(),
            derive_seed(&[master_seed, TAG_INIT]),
        )
        .scaled(config.trainable_init_scale);
        let initial_personal = EncoderParams::seeded(
            config.encoder.clone(),
            derive_seed(&[master_seed, TAG_INIT_PERSONAL]),
        )
        .scaled(config.trainable_init_scale);
        let mut eval_cfg = config.eval.clone();
        eval_cfg.seed = derive_seed(&[master_seed, TAG_EVAL]);
        let protocol = IdentificationProtocol::build(&universe, &eval_cfg)?;
        Ok(SeedWorld {
            universe,
            reference,
            initial_global,
            initial_personal,
            protocol,
            eval_cfg,
        })
    }

    /// Fresh client states at the initial parameters. The personalized
    /// model starts from its own seed so the regularizer has two genuinely
    /// different encoders to pull together.
    fn initial_clients(&self, hyper: &ClientHyper) -> Vec<ClientState> {
        self.universe
            .clients
            .iter()
            .map(|dataset| ClientState {
                client_id: dataset.client_id,
                global: self.initial_global.clone(),
                personal: self.initial_personal.clone(),
                dataset: dataset.clone(),
                hyper: hyper.clone(),
            })
            .collect()
    }
}

/// Post-run diagnostic pass over one client: re-runs its local training
/// from the final broadcast with a trajectory recorder, estimates the two
/// cross-Lipschitz constants at the trained point, and evaluates the
/// contraction bounds. Purely observational — client state is untouched.
fn monitor_convergence(
    config: &ExperimentConfig,
    state: &ClientState,
    final_global: &EncoderParams,
    reference: &EncoderParams,
    master_seed: u64,
) -> Result<ConvergenceReport> {
    let mut recorder = TrajectoryRecorder::new();
    let outcome = client_training(
        state,
        final_global,
        reference,
        derive_seed(&[master_seed, TAG_MONITOR]),
        Some(&mut recorder),
    )?;
    let trace = recorder.finish();

    let batch = crate::client::make_batches(
        &state.dataset.train,
        state.hyper.batch_size,
        derive_seed(&[master_seed, TAG_MONITOR, 2]),
    )?
    .into_iter()
    .next()
    .expect("at least one batch");

    let trained_global = outcome.update.global;
    let trained_personal = outcome.personal;
    let loss_cfg = state.hyper.loss.clone();
    let encoder_cfg = trained_global.config().clone();

    let grad_of = |vary_global: bool| {
        let trained_global = trained_global.clone();
        let trained_personal = trained_personal.clone();
        let batch = batch.clone();
        let loss_cfg = loss_cfg.clone();
        let encoder_cfg = encoder_cfg.clone();
        let reference = reference.clone();
        move |flat: &[f64]| -> Vec<f64> {
            let varied = EncoderParams::from_flat(encoder_cfg.clone(), flat)
                .expect("probe dims match the trained encoder");
            let (global, personal) = if vary_global {
                (&varied, &trained_personal)
            } else {
                (&trained_global, &varied)
            };
            let tape = GradTape::new();
            let (reps, global_taped, personal_taped) =
                build_representations(&tape, &reference, global, personal, &batch)
                    .expect("monitor forward");
            let loss = fedfs_batch_loss(&tape, &reps, &loss_cfg).expect("monitor loss");
            let grads = tape.backward(loss.total).expect("monitor backward");
            // measure the gradient of the *other* parameter group
            let measured = if vary_global {
                personal_taped.grads(&grads)
            } else {
                global_taped.grads(&grads)
            };
            measured
                .layers
                .iter()
                .flat_map(|(w, b)| w.data().iter().chain(b.data()).copied().collect::<Vec<_>>())
                .collect()
        }
    };

    // Assumption-style cross constants: how much ∇_global moves per unit of
    // personal-parameter distance, and vice versa.
    let lipschitz_global = estimate_lipschitz(
        grad_of(false),
        &trained_personal.to_flat(),
        config.lipschitz_probes,
        config.lipschitz_radius,
        derive_seed(&[master_seed, TAG_LIPSCHITZ, 1]),
    )?;
    let lipschitz_personal = estimate_lipschitz(
        grad_of(true),
        &trained_global.to_flat(),
        config.lipschitz_probes,
        config.lipschitz_radius,
        derive_seed(&[master_seed, TAG_LIPSCHITZ, 2]),
    )?;

    let bounds = check_bounds(&trace, state.hyper.lr, lipschitz_global, lipschitz_personal)?;
    Ok(ConvergenceReport {
        client_id: state.client_id,
        lipschitz_global,
        lipschitz_personal,
        bounds,
    })
}

fn collect_rows(rows: &mut Vec<MetricsRow>, run: &str, seed: u64, evaluation: &ModeEvaluation) {
    for m in &evaluation.per_client {
        rows.push(MetricsRow {
            run: run.into(),
            seed,
            mode: evaluation.summary.mode.clone(),
            client_id: m.client_id,
            identity_id: m.identity_id,
            metric: "auroc".into(),
            operating_point: String::new(),
            value: Some(m.auroc),
        });
        for (fpir, tpir) in &m.tpir {
            rows.push(MetricsRow {
                run: run.into(),
                seed,
                mode: evaluation.summary.mode.clone(),
                client_id: m.client_id,
                identity_id: m.identity_id,
                metric: "tpir".into(),
                operating_point: format!("{fpir}"),
                value: *tpir,
            });
        }
    }
}

fn collect_histograms(
    rows: &mut Vec<HistogramRow>,
    run: &str,
    seed: u64,
    evaluation: &ModeEvaluation,
) {
    let bins = evaluation.histograms.bins;
    let width = 2.0 / bins as f64;
    for (kind, masses) in [
        ("positive", &evaluation.histograms.positive),
        ("negative", &evaluation.histograms.negative),
    ] {
        for (b, &mass) in masses.iter().enumerate() {
            rows.push(HistogramRow {
                run: run.into(),
                seed,
                kind,
                bin_lo: -1.0 + b as f64 * width,
                bin_hi: -1.0 + (b + 1) as f64 * width,
                mass,
            });
        }
    }
}

fn summarize_run(spec: RunSpec, per_seed: Vec<SeedOutcome>, fpirs: &[f64]) -> RunOutcome {
    let median_auroc = median(
        &mut per_seed
            .iter()
            .map(|s| s.summary.mean_auroc)
            .collect::<Vec<_>>(),
    );
    let median_tpir = fpirs
        .iter()
        .enumerate()
        .map(|(k, &f)| {
            let values: Vec<f64> = per_seed
                .iter()
                .filter_map(|s| s.summary.mean_tpir[k].1)
                .collect();
            if values.len() == per_seed.len() {
                (f, Some(median(&mut values.clone())))
            } else {
                (f, None)
            }
        })
        .collect();
    let median_overlap = median(
        &mut per_seed
            .iter()
            .map(|s| s.summary.histogram_overlap)
            .collect::<Vec<_>>(),
    );
    let median_intra = median(
        &mut per_seed
            .iter()
            .map(|s| s.summary.intra_class_variance)
            .collect::<Vec<_>>(),
    );
    RunOutcome {
        spec,
        per_seed,
        median_auroc,
        median_tpir,
        median_overlap,
        median_intra_class_variance: median_intra,
    }
}

/// Executes the preset's full grid. This is the engine behind the CLI `run`
/// subcommand; the CLI adds artifact writing on top.
pub fn run_experiment(config: &ExperimentConfig, preset: Preset) -> Result<ExperimentResult> {
    config.validate()?;
    let threads = config.effective_threads();
    let arms = plan_runs(preset, config);

    let mut metrics = Vec::new();
    let mut histogram_rows = Vec::new();
    let mut roc_scores = Vec::new();
    let mut baseline_seeds: Vec<SeedOutcome> = Vec::new();
    let mut arm_seeds: Vec<Vec<SeedOutcome>> = vec![Vec::new(); arms.len()];

    for &master_seed in &config.seeds {
        let world = SeedWorld::build(config, master_seed)?;
        let reference_checksum = world.reference.checksum();

        // frozen-baseline evaluation (no federation)
        let baseline_clients = world.initial_clients(&config.client);
        let baseline_eval = evaluate_mode(
            &world.protocol,
            EmbedMode::PretrainedOnly,
            &world.reference,
            &baseline_clients,
            &world.eval_cfg,
            threads,
        )?;
        collect_rows(&mut metrics, "pretrained", master_seed, &baseline_eval);
        collect_histograms(
            &mut histogram_rows,
            "pretrained",
            master_seed,
            &baseline_eval,
        );
        roc_scores.push((
            "pretrained".into(),
            master_seed,
            baseline_eval.pooled_scores.0.clone(),
            baseline_eval.pooled_scores.1.clone(),
        ));
        baseline_seeds.push(SeedOutcome {
            seed: master_seed,
            summary: baseline_eval.summary,
            rounds: Vec::new(),
            convergence: None,
        });

        for (arm_idx, arm) in arms.iter().enumerate() {
            let mut hyper = config.client.clone();
            hyper.loss.use_reg_loss = arm.use_reg_loss;
            hyper.loss.use_adaptive_soft_label = arm.use_adaptive_soft_label;
            let mut clients = world.initial_clients(&hyper);
            let round_cfg = RoundConfig {
                total_rounds: config.rounds.total_rounds,
                participation_rate: arm.participation_rate,
                seed: derive_seed(&[master_seed, TAG_ROUNDS]),
            };
            let run = run_federation(
                &mut clients,
                &world.reference,
                world.initial_global.clone(),
                &round_cfg,
                threads,
            )?;

            let evaluation = evaluate_mode(
                &world.protocol,
                EmbedMode::FedFs,
                &world.reference,
                &clients,
                &world.eval_cfg,
                threads,
            )?;
            collect_rows(&mut metrics, &arm.name, master_seed, &evaluation);
            collect_histograms(&mut histogram_rows, &arm.name, master_seed, &evaluation);
            roc_scores.push((
                arm.name.clone(),
                master_seed,
                evaluation.pooled_scores.0.clone(),
                evaluation.pooled_scores.1.clone(),
            ));

            let convergence = monitor_convergence(
                config,
                &clients[0],
                &run.global,
                &world.reference,
                master_seed,
            )?;

            arm_seeds[arm_idx].push(SeedOutcome {
                seed: master_seed,
                summary: evaluation.summary,
                rounds: run.rounds,
                convergence: Some(convergence),
            });
        }
        // the frozen reference must survive the whole seed untouched
        if world.reference.checksum() != reference_checksum {
            return Err(Error::Contract(
                "reference encoder was mutated during the experiment".into(),
            ));
        }
    }

    let mut runs = vec![summarize_run(
        RunSpec {
            name: "pretrained".into(),
            participation_rate: 0.0,
            use_reg_loss: false,
            use_adaptive_soft_label: false,
        },
        baseline_seeds,
        &config.eval.fpirs,
    )];
    for (arm, seeds) in arms.into_iter().zip(arm_seeds) {
        runs.push(summarize_run(arm, seeds, &config.eval.fpirs));
    }

    Ok(ExperimentResult {
        summary: ExperimentSummary {
            preset: preset.label().into(),
            runs,
        },
        metrics,
        histograms: histogram_rows,
        roc_scores,
    })
}
