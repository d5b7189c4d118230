//! Empirical convergence diagnostics.
//!
//! The local-training analysis assumes cross-Lipschitz-smooth gradients and
//! bounded parameter drift, and derives per-step contraction bounds of the
//! form `‖w^{e+1} - w*‖ ≤ ‖w^e - w*‖ - η·L·‖θ^e - θ*‖`. The optimum (w*, θ*)
//! is unobservable, so the run's final parameters stand in as the reference
//! point, and the Lipschitz constant is estimated from seeded gradient
//! probes. The result is explicitly a descriptive report — observed
//! satisfaction fractions — not a pass/fail theorem verification: the
//! underlying derivation leans on a reversed triangle inequality and can
//! only be illustrated, never certified, from a trajectory.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::norm2;

/// Collects per-step parameter snapshots and losses during one client's
/// local training run.
#[derive(Default)]
pub struct TrajectoryRecorder {
    global: Vec<Vec<f64>>,
    personal: Vec<Vec<f64>>,
    losses: Vec<f64>,
}

impl TrajectoryRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Snapshot the parameter pair. Called once before training and once
    /// after every SGD step.
    pub fn record_params(&mut self, global: &EncoderParams, personal: &EncoderParams) {
        self.global.push(global.to_flat());
        self.personal.push(personal.to_flat());
    }

    pub fn record_loss(&mut self, loss: f64) {
        self.losses.push(loss);
    }

    /// Distances of every snapshot to the final one (which therefore ends
    /// at exactly zero).
    pub fn finish(self) -> TrajectoryTrace {
        let dist_to_last = |snaps: &[Vec<f64>]| -> Vec<f64> {
            let last = snaps.last().cloned().unwrap_or_default();
            snaps
                .iter()
                .map(|s| {
                    let diff: Vec<f64> = s.iter().zip(&last).map(|(a, b)| a - b).collect();
                    norm2(&diff)
                })
                .collect()
        };
        TrajectoryTrace {
            global_dist: dist_to_last(&self.global),
            personal_dist: dist_to_last(&self.personal),
            losses: self.losses,
        }
    }
}

/// Per-step distances to the run-final parameters, plus the per-step loss.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryTrace {
    /// ‖w^e − w^final‖₂ for e = 0..=steps.
    pub global_dist: Vec<f64>,
    /// ‖θ^e − θ^final‖₂ for e = 0..=steps.
    pub personal_dist: Vec<f64>,
    /// Total loss at each step, length = steps.
    pub losses: Vec<f64>,
}

/// Max over seeded probe pairs within a radius ball of
/// `‖g(p₁) - g(p₂)‖ / ‖p₁ - p₂‖` — a lower bound on the local Lipschitz
/// constant of the supplied gradient function. Growing the probe count can
/// only grow the estimate (the probe stream is prefix-stable).
pub fn estimate_lipschitz<G>(
    grad: G,
    center: &[f64],
    probes: usize,
    radius: f64,
    seed: u64,
) -> Result<f64>
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    if probes < 2 {
        return Err(Error::Contract("need at least 2 probes".into()));
    }
    if radius <= 0.0 {
        return Err(Error::Contract("radius must be positive".into()));
    }
    let dim = center.len();
    let mut rng = SplitMix64::new(seed);
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(probes);
    while points.len() < probes {
        let dir = rng.gauss_vec(dim);
        let norm = norm2(&dir).max(1e-300);
        let r = radius * rng.next_f64().powf(1.0 / dim as f64);
        let p: Vec<f64> = center
            .iter()
            .zip(&dir)
            .map(|(c, d)| c + r * d / norm)
            .collect();
        // identical probe points would divide by zero; draw again
        if points.iter().all(|q| q != &p) {
            points.push(p);
        }
    }

    let grads: Vec<Vec<f64>> = points.iter().map(|p| grad(p)).collect();
    let mut best = 0.0f64;
    for i in 0..probes {
        for j in (i + 1)..probes {
            let dg: Vec<f64> = grads[i].iter().zip(&grads[j]).map(|(a, b)| a - b).collect();
            let dp: Vec<f64> = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| a - b)
                .collect();
            best = best.max(norm2(&dg) / norm2(&dp));
        }
    }
    Ok(best)
}

/// Observed contraction statistics for one trajectory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundsReport {
    pub steps: usize,
    pub eta: f64,
    pub lipschitz_global: f64,
    pub lipschitz_personal: f64,
    /// Fraction of steps where ‖w^{e+1}−ref‖ ≤ ‖w^e−ref‖ − η·L̂·‖θ^e−ref‖.
    pub global_bound_fraction: f64,
    /// Fraction of steps satisfying the θ counterpart.
    pub personal_bound_fraction: f64,
    /// Fraction of steps with strictly decreasing distance.
    pub global_monotone_fraction: f64,
    pub personal_monotone_fraction: f64,
}

/// Evaluates the per-step contraction inequalities against an observed
/// trajectory. Descriptive only.
pub fn check_bounds(
    trace: &TrajectoryTrace,
    eta: f64,
    lipschitz_global: f64,
    lipschitz_personal: f64,
) -> Result<BoundsReport> {
    let n = trace.global_dist.len();
    if n < 2 || trace.personal_dist.len() != n {
        return Err(Error::Contract(
            "trajectory needs at least 2 snapshots".into(),
        ));
    }
    let steps = n - 1;
    let mut global_ok = 0usize;
    let mut personal_ok = 0usize;
    let mut global_mono = 0usize;
    let mut personal_mono = 0usize;
    for e in 0..steps {
        let (gw, gw1) = (trace.global_dist[e], trace.global_dist[e + 1]);
        let (gp, gp1) = (trace.personal_dist[e], trace.personal_dist[e + 1]);
        if gw1 <= gw - eta * lipschitz_global * gp {
            global_ok += 1;
        }
        if gp1 <= gp - eta * lipschitz_personal * gw {
            personal_ok += 1;
        }
        if gw1 < gw {
            global_mono += 1;
        }
        if gp1 < gp {
            personal_mono += 1;
        }
    }
    Ok(BoundsReport {
        steps,
        eta,
        lipschitz_global,
        lipschitz_personal,
        global_bound_fraction: global_ok as f64 / steps as f64,
        personal_bound_fraction: personal_ok as f64 / steps as f64,
        global_monotone_fraction: global_mono as f64 / steps as f64,
        personal_monotone_fraction: personal_mono as f64 / steps as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_has_unit_lipschitz() {
        // ∇ ½‖p‖² = p, so every probe pair gives ratio exactly 1
        let center = vec![0.3, -0.7, 1.2, 0.0];
        let l = estimate_lipschitz(|p| p.to_vec(), &center, 8, 0.5, 42).unwrap();
        assert!((l - 1.0).abs() < 1e-6, "L̂ {l}");
    }

    #[test]
    fn linear_loss_has_zero_lipschitz() {
        let center = vec![1.0, 2.0];
        let l = estimate_lipschitz(|p| vec![3.0; p.len()], &center, 8, 0.5, 42).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn more_probes_never_shrink_the_estimate() {
        let grad = |p: &[f64]| p.iter().map(|x| x * x.abs()).collect::<Vec<_>>();
        let center = vec![0.5, -1.0, 0.2];
        let l5 = estimate_lipschitz(grad, &center, 5, 1.0, 7).unwrap();
        let l12 = estimate_lipschitz(grad, &center, 12, 1.0, 7).unwrap();
        assert!(l12 >= l5, "{l12} < {l5}");
    }

    #[test]
    fn probe_preconditions() {
        assert!(estimate_lipschitz(|p| p.to_vec(), &[1.0], 1, 0.5, 1).is_err());
        assert!(estimate_lipschitz(|p| p.to_vec(), &[1.0], 4, 0.0, 1).is_err());
    }

    #[test]
    fn constant_trace_reports_zero_decrease() {
        // lr = 0: every snapshot identical, distances to final are all zero
        let trace = TrajectoryTrace {
            global_dist: vec![0.0; 5],
            personal_dist: vec![0.0; 5],
            losses: vec![1.0; 4],
        };
        let report = check_bounds(&trace, 0.005, 1.0, 1.0).unwrap();
        assert_eq!(report.global_monotone_fraction, 0.0);
        assert_eq!(report.personal_monotone_fraction, 0.0);
        // 0 ≤ 0 − η·L·0 holds trivially
        assert_eq!(report.global_bound_fraction, 1.0);
    }

    #[test]
    fn contracting_fixture_satisfies_bounds() {
        // distances shrink faster than η·L̂ times the sibling distance
        let trace = TrajectoryTrace {
            global_dist: vec![8.0, 4.0, 2.0, 1.0, 0.0],
            personal_dist: vec![8.0, 4.0, 2.0, 1.0, 0.0],
            losses: vec![4.0, 3.0, 2.0, 1.0],
        };
        let report = check_bounds(&trace, 0.1, 1.0, 1.0).unwrap();
        assert_eq!(report.global_bound_fraction, 1.0);
        assert_eq!(report.personal_bound_fraction, 1.0);
        assert_eq!(report.global_monotone_fraction, 1.0);
    }

    #[test]
    fn recorder_distances_end_at_zero() {
        use crate::encoder::{EncoderConfig, EncoderParams};
        let cfg = EncoderConfig {
            input_dim: 2,
            hidden_dims: vec![],
            embed_dim: 1,
        };
        let mut rec = TrajectoryRecorder::new();
        for seed in 0..4 {
            let p = EncoderParams::seeded(cfg.clone(), seed);
            rec.record_params(&p, &p);
            if seed > 0 {
                rec.record_loss(seed as f64);
            }
        }
        let trace = rec.finish();
        assert_eq!(*trace.global_dist.last().unwrap(), 0.0);
        assert_eq!(trace.global_dist.len(), 4);
        assert_eq!(trace.losses.len(), 3);
        assert!(trace.global_dist.iter().all(|&d| d >= 0.0));
    }
}
