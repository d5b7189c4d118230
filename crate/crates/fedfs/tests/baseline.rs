//! The pre-trained reference must be worth freezing: on held-out client
//! identities it has to beat an untrained random encoder of the same
//! architecture at 1:N identification.

use fedfs::client::{ClientHyper, ClientState};
use fedfs::datagen::{generate_universe, UniverseConfig};
use fedfs::encoder::{EncoderConfig, EncoderParams};
use fedfs::eval::{evaluate_mode, EmbedMode, EvalConfig, IdentificationProtocol};
use fedfs::pretrain::{init_pretrained, PretrainConfig};
use fedfs::rng::derive_seed;

fn mean_auroc(
    encoder: &EncoderParams,
    universe: &fedfs::datagen::Universe,
    protocol: &IdentificationProtocol,
    eval_cfg: &EvalConfig,
) -> f64 {
    let clients: Vec<ClientState> = universe
        .clients
        .iter()
        .map(|d| ClientState {
            client_id: d.client_id,
            global: encoder.clone(),
            personal: encoder.clone(),
            dataset: d.clone(),
            hyper: ClientHyper::default(),
        })
        .collect();
    evaluate_mode(
        protocol,
        EmbedMode::PretrainedOnly,
        encoder,
        &clients,
        eval_cfg,
        2,
    )
    .unwrap()
    .summary
    .mean_auroc
}

#[test]
fn pretrained_beats_untrained_random_encoder() {
    let mut pretrained_scores = Vec::new();
    let mut random_scores = Vec::new();
    for seed in 1..=3u64 {
        let universe = generate_universe(&UniverseConfig {
            num_clients: 60,
            impostor_identities: 15,
            seed: derive_seed(&[seed, 1]),
            ..Default::default()
        })
        .unwrap();
        let eval_cfg = EvalConfig {
            fpirs: vec![0.1],
            non_mated_cap: 400,
            seed: derive_seed(&[seed, 2]),
            ..Default::default()
        };
        let protocol = IdentificationProtocol::build(&universe, &eval_cfg).unwrap();

        let pretrained = init_pretrained(
            derive_seed(&[seed, 3]),
            &EncoderConfig::default(),
            &universe.public_pool,
            &PretrainConfig::default(),
        )
        .unwrap();
        let random = EncoderParams::seeded(EncoderConfig::default(), derive_seed(&[seed, 4]));

        pretrained_scores.push(mean_auroc(&pretrained, &universe, &protocol, &eval_cfg));
        random_scores.push(mean_auroc(&random, &universe, &protocol, &eval_cfg));
    }
    pretrained_scores.sort_by(f64::total_cmp);
    random_scores.sort_by(f64::total_cmp);
    let (pre, rand) = (pretrained_scores[1], random_scores[1]);
    assert!(
        pre > rand,
        "median pre-trained AUROC {pre:.4} should beat untrained {rand:.4}"
    );
}
