//! Exact t-SNE for 2-D projections of latent means.
//!
//! O(n²) per iteration; meant for a few thousand points at most.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, MathError, Result};
use crate::rng;
use crate::tensor::Tensor;

const TAG_INIT: u64 = 0x7453_4e45;
const PERPLEXITY_TOL: f64 = 1e-4;
const BISECTION_STEPS: usize = 50;
const LN_BETA_RANGE: f64 = 40.0;
const P_FLOOR: f64 = 1e-12;
pub const MAX_POINTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneOptions {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    /// Iterations with early exaggeration and the lower momentum.
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneOptions {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// `ln(perplexity)`, the entropy every conditional is matched to.
    pub target_entropy: f64,
    pub max_entropy_error: f64,
    /// Largest `|exp(H) − perplexity|` over points.
    pub max_perplexity_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    /// n×2.
    pub coords: Tensor,
    pub kl_initial: f64,
    pub kl_final: f64,
    pub iterations: usize,
    pub seed: u64,
    pub calibration: Calibration,
}

fn squared_distances(x: &Tensor) -> Result<(usize, Vec<f64>)> {
    let (n, d) = x.dims2()?;
    let rows = crate::exec::map_indexed(n, |i| {
        (0..n)
            .map(|j| (0..d).map(|t| (x.get2(i, t) - x.get2(j, t)).powi(2)).sum::<f64>())
            .collect::<Vec<f64>>()
    });
    Ok((n, rows.concat()))
}

/// Conditional distribution of row `i` at precision `beta`; returns its
/// entropy in nats.
fn conditional(dist: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let min = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    for (j, (o, &v)) in out.iter_mut().zip(dist).enumerate() {
        // shifting by the nearest neighbour keeps large β from underflowing
        *o = if j == i { 0.0 } else { (-beta * (v - min)).exp() };
        z += *o;
    }
    let mut h = 0.0;
    for (o, &v) in out.iter_mut().zip(dist) {
        *o /= z;
        if *o > 0.0 {
            h += *o * beta * (v - min);
        }
    }
    h + z.ln()
}

/// Bisection on `ln β` so that each conditional has entropy `ln(perplexity)`.
/// Distances are rescaled by their mean first; β is relative to that scale.
fn affinities(dist: &[f64], n: usize, perplexity: f64) -> (Vec<f64>, Calibration) {
    let off_diag = (n * (n - 1)) as f64;
    let scale = dist.iter().sum::<f64>() / off_diag;
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let target = perplexity.ln();
    let rows = crate::exec::map_indexed(n, |i| {
        let d: Vec<f64> = dist[i * n..(i + 1) * n].iter().map(|v| v / scale).collect();
        let mut p = vec![0.0; n];
        let (mut lo, mut hi) = (-LN_BETA_RANGE, LN_BETA_RANGE);
        let mut best = (f64::INFINITY, f64::INFINITY, Vec::new());
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            let h = conditional(&d, i, mid.exp(), &mut p);
            let err = (h - target).abs();
            if err < best.0 {
                best = (err, (h.exp() - perplexity).abs(), p.clone());
            }
            if best.1 < PERPLEXITY_TOL * 1e-2 {
                break;
            }
            // entropy falls as β grows
            if h > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        best
    });
    let max_err = rows.iter().map(|r| r.0).fold(0.0, f64::max);
    let max_perp_err = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((rows[i].2[j] + rows[j].2[i]) / (2.0 * n as f64)).max(P_FLOOR);
            }
        }
    }
    (
        p,
        Calibration {
            target_entropy: target,
            max_entropy_error: max_err,
            max_perplexity_error: max_perp_err,
        },
    )
}

/// Student-t kernel values `(1 + ‖yᵢ − yⱼ‖²)⁻¹` and their off-diagonal sum.
fn kernel(y: &[f64], n: usize) -> (Vec<f64>, f64) {
    let rows = crate::exec::map_indexed(n, |i| {
        (0..n)
            .map(|j| {
                if i == j {
                    0.0
                } else {
                    let (dx, dy) = (y[2 * i] - y[2 * j], y[2 * i + 1] - y[2 * j + 1]);
                    1.0 / (1.0 + dx * dx + dy * dy)
                }
            })
            .collect::<Vec<f64>>()
    });
    let w = rows.concat();
    let z = w.iter().sum();
    (w, z)
}

fn kl_divergence(p: &[f64], w: &[f64], z: f64) -> f64 {
    p.iter()
        .zip(w)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &wv)| pv * (pv / (wv / z).max(f64::MIN_POSITIVE)).ln())
        .sum()
}

/// Embeds the rows of `x` in two dimensions.
pub fn tsne(x: &Tensor, opts: &TsneOptions) -> Result<Embedding> {
    let (n, _) = x.dims2()?;
    if !(4..=MAX_POINTS).contains(&n) {
        return Err(Error::Usage(format!(
            "exact t-SNE takes 4 to {MAX_POINTS} points, got {n}"
        )));
    }
    if !(opts.perplexity >= 1.0 && opts.perplexity < n as f64 / 3.0) {
        return Err(Error::Usage(format!(
            "perplexity {} is infeasible for {n} points; use a value in [1, {:.1})",
            opts.perplexity,
            n as f64 / 3.0
        )));
    }
    if !(opts.learning_rate > 0.0 && opts.exaggeration >= 1.0) {
        return Err(Error::Usage("t-SNE learning rate must be positive and exaggeration ≥ 1".into()));
    }
    let (_, dist) = squared_distances(x)?;
    let (p, calibration) = affinities(&dist, n, opts.perplexity);

    let mut r = rng::stream(opts.seed, &[TAG_INIT]);
    let normal = Normal::new(0.0, 1e-2).map_err(|e| Error::Usage(e.to_string()))?;
    let mut y: Vec<f64> = (0..2 * n).map(|_| normal.sample(&mut r)).collect();
    let mut velocity = vec![0.0; 2 * n];
    let mut gains = vec![1.0f64; 2 * n];

    let (w, z) = kernel(&y, n);
    let kl_initial = kl_divergence(&p, &w, z);
    for it in 0..opts.iterations {
        let early = it < opts.exaggeration_iters;
        let exag = if early { opts.exaggeration } else { 1.0 };
        let momentum = if early { 0.5 } else { 0.8 };
        let (w, z) = kernel(&y, n);
        let grad: Vec<[f64; 2]> = crate::exec::map_indexed(n, |i| {
            let mut g = [0.0; 2];
            for j in 0..n {
                let wij = w[i * n + j];
                let f = 4.0 * (exag * p[i * n + j] - wij / z) * wij;
                g[0] += f * (y[2 * i] - y[2 * j]);
                g[1] += f * (y[2 * i + 1] - y[2 * j + 1]);
            }
            g
        });
        for (k, g) in grad.iter().flatten().enumerate() {
            // delta-bar-delta gains, as in the reference optimizer
            gains[k] = if (*g > 0.0) != (velocity[k] > 0.0) {
                gains[k] + 0.2
            } else {
                (gains[k] * 0.8).max(0.01)
            };
            velocity[k] = momentum * velocity[k] - opts.learning_rate * gains[k] * g;
            y[k] += velocity[k];
        }
        for axis in 0..2 {
            let mean = (0..n).map(|i| y[2 * i + axis]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| y[2 * i + axis] -= mean);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(MathError::NonFinite(format!("t-SNE iteration {it}")).into());
        }
    }
    let (w, z) = kernel(&y, n);
    Ok(Embedding {
        coords: Tensor::matrix(n, 2, y)?,
        kl_initial,
        kl_final: kl_divergence(&p, &w, z),
        iterations: opts.iterations,
        seed: opts.seed,
        calibration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpret::silhouette;

    fn clusters(per: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut r = rng::stream(seed, &[1]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3 {
            for _ in 0..per {
                for t in 0..10 {
                    let centre = if t == c { 10.0 } else { 0.0 };
                    data.push(centre + normal.sample(&mut r));
                }
                labels.push(c);
            }
        }
        (Tensor::matrix(3 * per, 10, data).unwrap(), labels)
    }

    #[test]
    fn conditional_entropy_matches_target() {
        let (x, _) = clusters(20, 3);
        let (n, dist) = squared_distances(&x).unwrap();
        let (p, cal) = affinities(&dist, n, 10.0);
        assert!(cal.max_perplexity_error < PERPLEXITY_TOL);
        assert!(cal.max_entropy_error < PERPLEXITY_TOL);
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
        for i in 0..n {
            for j in 0..n {
                assert_eq!(p[i * n + j], p[j * n + i]);
            }
        }
    }

    #[test]
    fn separated_clusters_stay_separated() {
        let (x, labels) = clusters(30, 5);
        let opts = TsneOptions {
            perplexity: 10.0,
            iterations: 1000,
            ..Default::default()
        };
        let e = tsne(&x, &opts).unwrap();
        assert!(e.kl_final < e.kl_initial);
        let s = silhouette(&e.coords, &labels).unwrap();
        assert!(s > 0.5, "silhouette {s}, kl {} -> {}", e.kl_initial, e.kl_final);
        assert_eq!(tsne(&x, &opts).unwrap(), e);
    }

    #[test]
    fn infeasible_perplexity_is_rejected() {
        let (x, _) = clusters(3, 1);
        let opts = TsneOptions {
            perplexity: 5.0,
            ..Default::default()
        };
        assert!(matches!(tsne(&x, &opts), Err(Error::Usage(_))));
    }
}
