//! Planted-latent synthetic cohorts with a closed-form Bayes oracle.
//!
//! Each row draws a shared latent `u ~ N(0, I)` and a group-specific latent
//! `v ~ N(m_g, I)`. Features are `A·u + B_g·v + ε`, and outcome `c` is
//! Bernoulli with probability `sigmoid(β_c·u + γ_c·v + b_c)`. The intercept
//! `b_c` is bisected so the target group's empirical rate hits the requested
//! one. The generating probabilities are returned as oracle scores.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, N_OUTCOMES};
use crate::error::{Error, Result};
use crate::graph::sigmoid;
use crate::rng;

/// Target-cohort positive rates for AF, arrest, DVT/PE, AKI, transfusion and
/// intraoperative events.
pub const DEFAULT_RATES: [f64; N_OUTCOMES] = [0.2587, 0.0040, 0.0217, 0.3216, 0.3104, 0.0451];

const CALIBRATION_STEPS: usize = 60;
const CALIBRATION_TOLERANCE: f64 = 0.005;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub groups: usize,
    pub rows_per_group: usize,
    pub features: usize,
    pub latent_shared: usize,
    pub latent_specific: usize,
    pub noise: f64,
    /// Standard deviation of the per-group offsets of the specific latent.
    pub group_offset: f64,
    /// Approximate standard deviation of the outcome logits.
    pub signal: f64,
    pub rates: Vec<f64>,
    pub missing_rate: f64,
    /// Group whose empirical rates are calibrated.
    pub target_group: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            groups: 4,
            rows_per_group: 6000,
            features: 128,
            latent_shared: 4,
            latent_specific: 4,
            noise: 1.0,
            group_offset: 1.5,
            signal: 3.0,
            rates: DEFAULT_RATES.to_vec(),
            missing_rate: 0.1,
            target_group: 0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.groups == 0 || self.rows_per_group == 0 || self.features == 0 {
            return bad("groups, rows_per_group and features must be positive");
        }
        if self.latent_shared == 0 || self.latent_specific == 0 {
            return bad("latent dimensions must be positive");
        }
        if self.rates.len() != N_OUTCOMES {
            return bad(&format!("need {N_OUTCOMES} rates, got {}", self.rates.len()));
        }
        if self.rates.iter().any(|&r| !(r > 0.0 && r < 1.0)) {
            return bad("rates must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad("missing_rate must lie in [0, 1)");
        }
        if !(self.noise >= 0.0 && self.group_offset >= 0.0 && self.signal >= 0.0) {
            return bad("noise, group_offset and signal must be nonnegative");
        }
        if self.target_group >= self.groups {
            return bad("target_group out of range");
        }
        Ok(())
    }
}

/// Exact generating probabilities, row-major n×C.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleScores {
    pub probs: Vec<f64>,
    /// Calibrated intercepts `b_c`.
    pub intercepts: Vec<f64>,
}

impl OracleScores {
    pub fn prob(&self, row: usize, outcome: usize) -> f64 {
        self.probs[row * N_OUTCOMES + outcome]
    }

    pub fn outcome_scores(&self, rows: &[usize], outcome: usize) -> Vec<f64> {
        rows.iter().map(|&i| self.prob(i, outcome)).collect()
    }
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<(Dataset, OracleScores)> {
    cfg.validate()?;
    let (du, dv, nf) = (cfg.latent_shared, cfg.latent_specific, cfg.features);
    let n = cfg.groups * cfg.rows_per_group;
    let mix_scale = 1.0 / ((du + dv) as f64).sqrt();

    let mut maps = rng::stream(cfg.seed, &[1]);
    let shared_map = normal_matrix(&mut maps, nf, du, mix_scale);
    let specific_maps: Vec<Vec<f64>> = (0..cfg.groups)
        .map(|_| normal_matrix(&mut maps, nf, dv, mix_scale))
        .collect();
    let offsets: Vec<Vec<f64>> = (0..cfg.groups)
        .map(|_| normal_matrix(&mut maps, 1, dv, cfg.group_offset))
        .collect();
    let beta = normal_matrix(&mut maps, N_OUTCOMES, du, cfg.signal * mix_scale);
    let gamma = normal_matrix(&mut maps, N_OUTCOMES, dv, cfg.signal * mix_scale);

    let mut latents = rng::stream(cfg.seed, &[2]);
    let mut noise = rng::stream(cfg.seed, &[3]);
    let mut coins = rng::stream(cfg.seed, &[4]);
    let mut holes = rng::stream(cfg.seed, &[5]);

    let mut case_ids = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * nf);
    let mut feature_mask = Vec::with_capacity(n * nf);
    let mut base_logits = Vec::with_capacity(n * N_OUTCOMES);
    let mut uniforms = Vec::with_capacity(n * N_OUTCOMES);
    for g in 0..cfg.groups {
        for r in 0..cfg.rows_per_group {
            case_ids.push(format!("g{g}-{r:06}"));
            groups.push(g);
            let u: Vec<f64> = (0..du).map(|_| StandardNormal.sample(&mut latents)).collect();
            let v: Vec<f64> = (0..dv)
                .map(|j| {
                    let e: f64 = StandardNormal.sample(&mut latents);
                    offsets[g][j] + e
                })
                .collect();
            for f in 0..nf {
                let e: f64 = StandardNormal.sample(&mut noise);
                let x = dot(&shared_map[f * du..(f + 1) * du], &u)
                    + dot(&specific_maps[g][f * dv..(f + 1) * dv], &v)
                    + cfg.noise * e;
                features.push(x);
                feature_mask.push(holes.gen::<f64>() >= cfg.missing_rate);
            }
            for c in 0..N_OUTCOMES {
                base_logits.push(
                    dot(&beta[c * du..(c + 1) * du], &u) + dot(&gamma[c * dv..(c + 1) * dv], &v),
                );
                uniforms.push(coins.gen::<f64>());
            }
        }
    }

    let target: Vec<usize> = (0..n).filter(|&i| groups[i] == cfg.target_group).collect();
    let mut intercepts = Vec::with_capacity(N_OUTCOMES);
    for c in 0..N_OUTCOMES {
        let rate_at = |b: f64| {
            let pos = target
                .iter()
                .filter(|&&i| uniforms[i * N_OUTCOMES + c] < sigmoid(base_logits[i * N_OUTCOMES + c] + b))
                .count();
            pos as f64 / target.len() as f64
        };
        let (mut lo, mut hi) = (-40.0, 40.0);
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for _ in 0..CALIBRATION_STEPS {
            let mid = 0.5 * (lo + hi);
            let r = rate_at(mid);
            if (r - cfg.rates[c]).abs() < best.0 {
                best = ((r - cfg.rates[c]).abs(), mid, r);
            }
            if r < cfg.rates[c] {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if best.0 > CALIBRATION_TOLERANCE {
            return Err(Error::Calibration {
                outcome: c,
                achieved: best.2,
                target: cfg.rates[c],
            });
        }
        intercepts.push(best.1);
    }

    let mut labels = Vec::with_capacity(n * N_OUTCOMES);
    let mut probs = Vec::with_capacity(n * N_OUTCOMES);
    for i in 0..n {
        for c in 0..N_OUTCOMES {
            let p = sigmoid(base_logits[i * N_OUTCOMES + c] + intercepts[c]);
            probs.push(p);
            labels.push(if uniforms[i * N_OUTCOMES + c] < p { 1.0 } else { 0.0 });
        }
    }
    let ds = Dataset::new(
        case_ids,
        groups,
        labels,
        vec![true; n * N_OUTCOMES],
        features,
        feature_mask,
        nf,
    )?;
    Ok((ds, OracleScores { probs, intercepts }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            groups: 3,
            rows_per_group: 400,
            features: 12,
            rates: vec![0.3, 0.05, 0.1, 0.3, 0.3, 0.05],
            ..SynthConfig::default()
        }
    }

    #[test]
    fn seed_determinism() {
        let (a, oa) = synth_generate(&small()).unwrap();
        let (b, ob) = synth_generate(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(oa, ob);
    }

    #[test]
    fn rates_are_calibrated_on_target_group() {
        let cfg = small();
        let (ds, oracle) = synth_generate(&cfg).unwrap();
        let rows = ds.rows_of_group(0);
        for c in 0..N_OUTCOMES {
            let r = ds.positive_rate(&rows, c).unwrap();
            assert!((r - cfg.rates[c]).abs() <= 0.005, "outcome {c}: {r}");
        }
        for i in 0..ds.n_rows() {
            for c in 0..N_OUTCOMES {
                let p = oracle.prob(i, c);
                assert!(p > 0.0 && p < 1.0);
            }
        }
    }

    #[test]
    fn missingness_near_configured_rate() {
        let cfg = small();
        let (ds, _) = synth_generate(&cfg).unwrap();
        let n = ds.n_rows() * ds.n_features();
        let missing = (0..ds.n_rows())
            .flat_map(|i| ds.feature_mask_row(i).to_vec())
            .filter(|m| !m)
            .count();
        let rate = missing as f64 / n as f64;
        assert!((rate - cfg.missing_rate).abs() < 0.02, "{rate}");
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = small();
        cfg.rates[2] = 0.0;
        assert!(matches!(synth_generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn unreachable_rate_reports_calibration_error() {
        // 10 target rows can only realize multiples of 10%
        let cfg = SynthConfig {
            groups: 2,
            rows_per_group: 10,
            features: 4,
            rates: vec![0.3, 0.05, 0.3, 0.3, 0.3, 0.3],
            ..SynthConfig::default()
        };
        match synth_generate(&cfg) {
            Err(Error::Calibration { outcome, target, .. }) => {
                assert_eq!(outcome, 1);
                assert_eq!(target, 0.05);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
