//! The composite objective: reconstruction, KL to the prior, total
//! correlation of the latent, cross-group MMD on `z1`, pairwise contrastive
//! margin loss on `z2`, and masked multi-outcome cross-entropy.
//!
//! Every term is returned as a penalty to be minimized.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, MathError, MathResult, Result};
use crate::graph::{logsumexp, sigmoid, softplus, Graph, Kernel, NodeId};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gaussian-kernel bandwidth for the MMD term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    /// Fixed `σ`; the kernel uses `σ²`.
    Fixed(f64),
    Named(BandwidthRule),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthRule {
    /// `σ²` = half the median pairwise squared distance in the batch.
    Median,
}

impl Bandwidth {
    pub const MEDIAN: Bandwidth = Bandwidth::Named(BandwidthRule::Median);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub recon: f64,
    pub kld: f64,
    pub tc: f64,
    pub mmd: f64,
    pub contrastive: f64,
    pub prediction: f64,
    pub margin: f64,
    pub kernel_bandwidth: Bandwidth,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            kld: 1.0,
            tc: 1.0,
            mmd: 1.0,
            contrastive: 1.0,
            prediction: 10.0,
            margin: 1.0,
            kernel_bandwidth: Bandwidth::MEDIAN,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [
            self.recon,
            self.kld,
            self.tc,
            self.mmd,
            self.contrastive,
            self.prediction,
        ];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss_weights: weights must be finite and ≥ 0".into()));
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::Config("loss_weights: margin must be positive".into()));
        }
        if let Bandwidth::Fixed(s) = self.kernel_bandwidth {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Config(
                    "loss_weights: kernel_bandwidth must be positive or \"median\"".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.recon,
            self.kld,
            self.tc,
            self.mmd,
            self.contrastive,
            self.prediction,
        ]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kld: f64,
    pub tc: f64,
    pub mmd: f64,
    pub contrastive: f64,
    pub prediction: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("recon", self.recon),
            ("kld", self.kld),
            ("tc", self.tc),
            ("mmd", self.mmd),
            ("contrastive", self.contrastive),
            ("prediction", self.prediction),
        ]
    }

    pub fn recombine(&self, w: &LossWeights) -> f64 {
        self.terms()
            .iter()
            .zip(w.as_array())
            .map(|((_, t), w)| w * t)
            .sum()
    }
}

fn check_same_shape(g: &Graph, a: NodeId, b: NodeId, what: &str) -> MathResult<()> {
    if g.shape(a) != g.shape(b) {
        return Err(MathError::Dimension(format!(
            "{what}: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// Mean squared error over all entries.
pub fn recon_loss(g: &mut Graph, x: NodeId, xhat: NodeId) -> MathResult<NodeId> {
    check_same_shape(g, x, xhat, "reconstruction")?;
    let d = g.sub(x, xhat)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

/// Closed-form `KL(N(μ, e^ℓ) ‖ N(0, I))`, summed over latent dims and
/// averaged over rows.
pub fn kld_loss(g: &mut Graph, mu: NodeId, logvar: NodeId) -> MathResult<NodeId> {
    check_same_shape(g, mu, logvar, "kld")?;
    let (n, _) = g.value(mu).dims2()?;
    let mu2 = g.square(mu)?;
    let var = g.exp(logvar)?;
    let a = g.add_scalar(logvar, 1.0)?;
    let a = g.sub(a, mu2)?;
    let a = g.sub(a, var)?;
    let s = g.sum(a)?;
    g.scale(s, -0.5 / n as f64)
}

/// Minibatch estimate of `KL(q(z) ‖ Π_j q(z_j))`.
///
/// The aggregate posterior at each sample is approximated by an importance
/// weighted mixture over the batch: the row's own posterior carries weight
/// `1/N` and each of the other `n-1` rows `(N-1)/(N(n-1))`, where `N` is the
/// dataset size. The weights sum to one, so the estimate is exactly zero
/// for a one-dimensional latent and tends to zero on factorized posteriors.
pub struct TotalCorrelation {
    pub dataset_size: usize,
}

impl TotalCorrelation {
    fn log_weights(&self, n: usize) -> (f64, f64) {
        let big_n = self.dataset_size.max(1) as f64;
        let own = -big_n.ln();
        let other = if big_n > 1.0 {
            ((big_n - 1.0) / (big_n * (n as f64 - 1.0))).ln()
        } else {
            f64::NEG_INFINITY
        };
        (own, other)
    }

    /// `log N(z_ij; μ_mj, e^{ℓ_mj})` for all `m`, `j` at fixed `i`.
    fn log_density_row(z: &[f64], mu: &Tensor, lv: &Tensor, out: &mut [f64]) {
        let (n, d) = (mu.shape()[0], mu.shape()[1]);
        for m in 0..n {
            let (mr, lr) = (mu.row(m), lv.row(m));
            for j in 0..d {
                let diff = z[j] - mr[j];
                out[m * d + j] = -0.5 * (LN_2PI + lr[j] + diff * diff * (-lr[j]).exp());
            }
        }
    }
}

impl Kernel for TotalCorrelation {
    fn name(&self) -> &'static str {
        "total_correlation"
    }

    fn forward(&self, inputs: &[&Tensor]) -> MathResult<(Tensor, Vec<Vec<f64>>)> {
        let [z, mu, lv] = inputs else {
            return Err(MathError::Usage("tc takes z, mu, logvar".into()));
        };
        let (n, d) = z.dims2()?;
        if mu.shape() != z.shape() || lv.shape() != z.shape() {
            return Err(MathError::Dimension("tc: z, mu, logvar shapes differ".into()));
        }
        if n < 2 {
            return Err(MathError::Usage("tc needs a batch of at least 2 rows".into()));
        }
        let (w_own, w_other) = self.log_weights(n);
        let rows = crate::exec::map_indexed(n, |i| {
            let mut l = vec![0.0; n * d];
            Self::log_density_row(z.row(i), mu, lv, &mut l);
            let w = |m: usize| if m == i { w_own } else { w_other };
            let joint: Vec<f64> = (0..n)
                .map(|m| l[m * d..(m + 1) * d].iter().sum::<f64>() + w(m))
                .collect();
            let mut marg_sum = 0.0;
            let mut col = vec![0.0; n];
            for j in 0..d {
                for m in 0..n {
                    col[m] = l[m * d + j] + w(m);
                }
                marg_sum += logsumexp(&col);
            }
            logsumexp(&joint) - marg_sum
        });
        let value = rows.iter().sum::<f64>() / n as f64;
        Ok((Tensor::scalar(value)?, Vec::new()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        _saved: &[Vec<f64>],
        grad: &[f64],
    ) -> MathResult<Vec<Option<Vec<f64>>>> {
        let (z, mu, lv) = (inputs[0], inputs[1], inputs[2]);
        let (n, d) = z.dims2()?;
        let (w_own, w_other) = self.log_weights(n);
        let scale = grad[0] / n as f64;
        // per-row contributions: (dz_i, dmu, dlv) folded sequentially below
        let per_row = crate::exec::map_indexed(n, |i| {
            let mut l = vec![0.0; n * d];
            Self::log_density_row(z.row(i), mu, lv, &mut l);
            let w = |m: usize| if m == i { w_own } else { w_other };
            let joint: Vec<f64> = (0..n)
                .map(|m| l[m * d..(m + 1) * d].iter().sum::<f64>() + w(m))
                .collect();
            let lse = logsumexp(&joint);
            let alpha: Vec<f64> = joint.iter().map(|a| (a - lse).exp()).collect();
            let mut coef = vec![0.0; n * d];
            let mut col = vec![0.0; n];
            for j in 0..d {
                for m in 0..n {
                    col[m] = l[m * d + j] + w(m);
                }
                let lse_j = logsumexp(&col);
                for m in 0..n {
                    coef[m * d + j] = alpha[m] - (col[m] - lse_j).exp();
                }
            }
            let zi = z.row(i);
            let mut dz = vec![0.0; d];
            let mut dmu = vec![0.0; n * d];
            let mut dlv = vec![0.0; n * d];
            for m in 0..n {
                let (mr, lr) = (mu.row(m), lv.row(m));
                for j in 0..d {
                    let c = coef[m * d + j] * scale;
                    if c == 0.0 {
                        continue;
                    }
                    let inv_var = (-lr[j]).exp();
                    let diff = zi[j] - mr[j];
                    dz[j] -= c * diff * inv_var;
                    dmu[m * d + j] += c * diff * inv_var;
                    dlv[m * d + j] += c * -0.5 * (1.0 - diff * diff * inv_var);
                }
            }
            (dz, dmu, dlv)
        });
        let mut gz = Vec::with_capacity(n * d);
        let mut gmu = vec![0.0; n * d];
        let mut glv = vec![0.0; n * d];
        for (dz, dmu, dlv) in per_row {
            gz.extend_from_slice(&dz);
            gmu.iter_mut().zip(dmu).for_each(|(a, b)| *a += b);
            glv.iter_mut().zip(dlv).for_each(|(a, b)| *a += b);
        }
        Ok(vec![Some(gz), Some(gmu), Some(glv)])
    }
}

pub fn tc_loss(
    g: &mut Graph,
    z: NodeId,
    mu: NodeId,
    logvar: NodeId,
    dataset_size: usize,
) -> MathResult<NodeId> {
    g.custom(Arc::new(TotalCorrelation { dataset_size }), &[z, mu, logvar])
}

/// Group pairs that the MMD term can compare: groups present with ≥ 1 row.
fn groups_present(groups: &[usize]) -> Vec<Vec<usize>> {
    let g_max = groups.iter().copied().max().map_or(0, |g| g + 1);
    let mut members = vec![Vec::new(); g_max];
    for (i, &g) in groups.iter().enumerate() {
        members[g].push(i);
    }
    members.into_iter().filter(|m| !m.is_empty()).collect()
}

/// Average over group pairs of the Gaussian-kernel MMD V-statistic.
pub struct GroupMmd {
    pub groups: Vec<usize>,
    pub bandwidth: Bandwidth,
}

/// Squared bandwidth and, for the median rule, the pair(s) it came from.
struct KernelScale {
    sigma2: f64,
    median_pairs: Vec<(usize, usize, f64)>,
}

impl GroupMmd {
    /// Ordered-pair coefficients `C` with `value = Σ C_ij k(z_i, z_j)`.
    fn coefficients(&self, n: usize) -> (Vec<f64>, usize) {
        let present = groups_present(&self.groups);
        let mut c = vec![0.0; n * n];
        let mut pairs = 0;
        for a in 0..present.len() {
            for b in a + 1..present.len() {
                pairs += 1;
                let (ga, gb) = (&present[a], &present[b]);
                let (na, nb) = (ga.len() as f64, gb.len() as f64);
                for &i in ga {
                    for &j in ga {
                        c[i * n + j] += 1.0 / (na * na);
                    }
                    for &j in gb {
                        c[i * n + j] -= 1.0 / (na * nb);
                        c[j * n + i] -= 1.0 / (na * nb);
                    }
                }
                for &i in gb {
                    for &j in gb {
                        c[i * n + j] += 1.0 / (nb * nb);
                    }
                }
            }
        }
        if pairs > 0 {
            c.iter_mut().for_each(|v| *v /= pairs as f64);
        }
        (c, pairs)
    }

    fn scale(&self, d2: &[f64], n: usize) -> KernelScale {
        match self.bandwidth {
            Bandwidth::Fixed(s) => KernelScale {
                sigma2: s * s,
                median_pairs: Vec::new(),
            },
            Bandwidth::Named(BandwidthRule::Median) => {
                let mut all: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
                for i in 0..n {
                    for j in i + 1..n {
                        all.push((d2[i * n + j], i, j));
                    }
                }
                if all.is_empty() {
                    return KernelScale {
                        sigma2: 1.0,
                        median_pairs: Vec::new(),
                    };
                }
                all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
                let m = all.len();
                let picks: Vec<(f64, usize, usize)> = if m % 2 == 1 {
                    vec![all[m / 2]]
                } else {
                    vec![all[m / 2 - 1], all[m / 2]]
                };
                let share = 1.0 / picks.len() as f64;
                let median: f64 = picks.iter().map(|p| p.0 * share).sum();
                if median > 0.0 {
                    KernelScale {
                        sigma2: 0.5 * median,
                        median_pairs: picks.iter().map(|p| (p.1, p.2, 0.5 * share)).collect(),
                    }
                } else {
                    KernelScale {
                        sigma2: 1.0,
                        median_pairs: Vec::new(),
                    }
                }
            }
        }
    }
}

fn pairwise_sq_dists(z: &Tensor) -> (Vec<f64>, usize, usize) {
    let (n, d) = (z.shape()[0], z.shape()[1]);
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = z
                .row(i)
                .iter()
                .zip(z.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2[i * n + j] = s;
            d2[j * n + i] = s;
        }
    }
    (d2, n, d)
}

impl Kernel for GroupMmd {
    fn name(&self) -> &'static str {
        "group_mmd"
    }

    fn forward(&self, inputs: &[&Tensor]) -> MathResult<(Tensor, Vec<Vec<f64>>)> {
        let z = inputs[0];
        let (n, _) = z.dims2()?;
        if self.groups.len() != n {
            return Err(MathError::Dimension(format!(
                "mmd: {} group labels for {n} rows",
                self.groups.len()
            )));
        }
        let (d2, _, _) = pairwise_sq_dists(z);
        let sc = self.scale(&d2, n);
        let (c, _) = self.coefficients(n);
        let value: f64 = c
            .iter()
            .zip(&d2)
            .map(|(ci, di)| if *ci == 0.0 { 0.0 } else { ci * (-di / (2.0 * sc.sigma2)).exp() })
            .sum();
        // rounding can leave a tiny negative for identical groups
        Ok((Tensor::scalar(value.max(0.0))?, Vec::new()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        _saved: &[Vec<f64>],
        grad: &[f64],
    ) -> MathResult<Vec<Option<Vec<f64>>>> {
        let z = inputs[0];
        let (d2, n, d) = pairwise_sq_dists(z);
        let sc = self.scale(&d2, n);
        let (c, _) = self.coefficients(n);
        let mut gz = vec![0.0; n * d];
        let mut d_sigma2 = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let coef = c[i * n + j] + c[j * n + i];
                if coef == 0.0 {
                    continue;
                }
                let k = (-d2[i * n + j] / (2.0 * sc.sigma2)).exp();
                let f = grad[0] * coef * k / sc.sigma2;
                for t in 0..d {
                    gz[i * d + t] -= f * (z.row(i)[t] - z.row(j)[t]);
                }
                if j > i {
                    d_sigma2 += grad[0] * coef * k * d2[i * n + j] / (2.0 * sc.sigma2 * sc.sigma2);
                }
            }
        }
        // σ² = ½·median(d²) moves with the pair(s) that realize the median
        for &(p, q, w) in &sc.median_pairs {
            for t in 0..d {
                let diff = z.row(p)[t] - z.row(q)[t];
                gz[p * d + t] += d_sigma2 * w * 2.0 * diff;
                gz[q * d + t] -= d_sigma2 * w * 2.0 * diff;
            }
        }
        Ok(vec![Some(gz)])
    }
}

/// MMD node plus whether any group pair was available.
#[derive(Clone, Copy, Debug)]
pub struct TermNode {
    pub node: NodeId,
    /// Set when the term had nothing to compare and returned 0.
    pub degenerate: bool,
}

pub fn mmd_loss(
    g: &mut Graph,
    z1: NodeId,
    groups: &[usize],
    bandwidth: Bandwidth,
) -> MathResult<TermNode> {
    let pairs = groups_present(groups).len();
    let kernel = GroupMmd {
        groups: groups.to_vec(),
        bandwidth,
    };
    let node = g.custom(Arc::new(kernel), &[z1])?;
    Ok(TermNode {
        node,
        degenerate: pairs < 2,
    })
}

/// Pairwise margin loss over all unordered batch pairs, normalized by the
/// batch size.
pub struct Contrastive {
    pub groups: Vec<usize>,
    pub margin: f64,
}

impl Kernel for Contrastive {
    fn name(&self) -> &'static str {
        "contrastive"
    }

    fn forward(&self, inputs: &[&Tensor]) -> MathResult<(Tensor, Vec<Vec<f64>>)> {
        let z = inputs[0];
        let (n, _) = z.dims2()?;
        if self.groups.len() != n {
            return Err(MathError::Dimension(format!(
                "contrastive: {} group labels for {n} rows",
                self.groups.len()
            )));
        }
        let (d2, _, _) = pairwise_sq_dists(z);
        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let s = d2[i * n + j];
                total += if self.groups[i] == self.groups[j] {
                    s
                } else {
                    (self.margin - s.sqrt()).max(0.0).powi(2)
                };
            }
        }
        Ok((Tensor::scalar(total / n as f64)?, Vec::new()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        _saved: &[Vec<f64>],
        grad: &[f64],
    ) -> MathResult<Vec<Option<Vec<f64>>>> {
        let z = inputs[0];
        let (n, d) = z.dims2()?;
        let (d2, _, _) = pairwise_sq_dists(z);
        let scale = grad[0] / n as f64;
        let mut gz = vec![0.0; n * d];
        for i in 0..n {
            for j in i + 1..n {
                let f = if self.groups[i] == self.groups[j] {
                    2.0
                } else {
                    let dist = d2[i * n + j].sqrt();
                    if dist >= self.margin || dist == 0.0 {
                        continue;
                    }
                    -2.0 * (self.margin - dist) / dist
                };
                for t in 0..d {
                    let diff = z.row(i)[t] - z.row(j)[t];
                    gz[i * d + t] += scale * f * diff;
                    gz[j * d + t] -= scale * f * diff;
                }
            }
        }
        Ok(vec![Some(gz)])
    }
}

/// Contrastive term; single-group batches have no negatives and yield 0
/// with the degenerate flag set.
pub fn contrastive_loss(
    g: &mut Graph,
    z2: NodeId,
    groups: &[usize],
    margin: f64,
) -> MathResult<TermNode> {
    if groups.len() < 2 {
        return Err(MathError::Usage("contrastive loss needs at least 2 rows".into()));
    }
    if groups_present(groups).len() < 2 {
        let node = g.constant(Tensor::scalar(0.0)?);
        return Ok(TermNode {
            node,
            degenerate: true,
        });
    }
    let kernel = Contrastive {
        groups: groups.to_vec(),
        margin,
    };
    let node = g.custom(Arc::new(kernel), &[z2])?;
    Ok(TermNode {
        node,
        degenerate: false,
    })
}

/// Masked binary cross-entropy on logits, averaged per outcome over observed
/// rows and then over outcomes.
pub struct MaskedBce {
    pub targets: Vec<f64>,
    pub mask: Vec<bool>,
}

impl MaskedBce {
    fn observed_counts(&self, n: usize, c: usize) -> Vec<usize> {
        (0..c)
            .map(|k| (0..n).filter(|&i| self.mask[i * c + k]).count())
            .collect()
    }
}

impl Kernel for MaskedBce {
    fn name(&self) -> &'static str {
        "prediction"
    }

    fn forward(&self, inputs: &[&Tensor]) -> MathResult<(Tensor, Vec<Vec<f64>>)> {
        let logits = inputs[0];
        let (n, c) = logits.dims2()?;
        if self.targets.len() != n * c || self.mask.len() != n * c {
            return Err(MathError::Dimension(format!(
                "prediction: logits {n}×{c} vs {} targets",
                self.targets.len()
            )));
        }
        let counts = self.observed_counts(n, c);
        let mut total = 0.0;
        for (k, &cnt) in counts.iter().enumerate() {
            if cnt == 0 {
                continue;
            }
            let s: f64 = (0..n)
                .filter(|&i| self.mask[i * c + k])
                .map(|i| {
                    let (l, y) = (logits.data()[i * c + k], self.targets[i * c + k]);
                    // softplus(l) - y·l without cancellation at large |l|
                    y * softplus(-l) + (1.0 - y) * softplus(l)
                })
                .sum();
            total += s / cnt as f64;
        }
        Ok((Tensor::scalar(total / c as f64)?, Vec::new()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        _saved: &[Vec<f64>],
        grad: &[f64],
    ) -> MathResult<Vec<Option<Vec<f64>>>> {
        let logits = inputs[0];
        let (n, c) = logits.dims2()?;
        let counts = self.observed_counts(n, c);
        let mut gl = vec![0.0; n * c];
        for i in 0..n {
            for k in 0..c {
                let idx = i * c + k;
                if self.mask[idx] {
                    gl[idx] = grad[0] * (sigmoid(logits.data()[idx]) - self.targets[idx])
                        / (counts[k] as f64 * c as f64);
                }
            }
        }
        Ok(vec![Some(gl)])
    }
}

pub fn prediction_loss(
    g: &mut Graph,
    logits: NodeId,
    targets: &[f64],
    mask: &[bool],
) -> MathResult<NodeId> {
    let kernel = MaskedBce {
        targets: targets.to_vec(),
        mask: mask.to_vec(),
    };
    g.custom(Arc::new(kernel), &[logits])
}

/// Graph nodes the objective reads from one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub x: NodeId,
    pub xhat: NodeId,
    pub mu: NodeId,
    pub logvar: NodeId,
    pub z: NodeId,
    pub z1: NodeId,
    pub z2: NodeId,
    pub logits: NodeId,
}

/// Labels and bookkeeping of one batch.
pub struct BatchTargets<'a> {
    pub groups: &'a [usize],
    pub labels: &'a [f64],
    pub label_mask: &'a [bool],
    pub dataset_size: usize,
}

#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub root: NodeId,
    pub breakdown: LossBreakdown,
    pub mmd_degenerate: bool,
    pub contrastive_degenerate: bool,
    pub term_nodes: [NodeId; 6],
}

/// Replaces the message of a non-finite failure with the term's name.
fn named<T>(r: MathResult<T>, term: &str) -> MathResult<T> {
    r.map_err(|e| match e {
        MathError::NonFinite(_) => MathError::NonFinite(term.to_string()),
        other => other,
    })
}

/// Weighted sum of all six terms. Zero-weighted terms are evaluated for the
/// breakdown but left out of the differentiated root.
pub fn total_loss(
    g: &mut Graph,
    nodes: &ForwardNodes,
    batch: &BatchTargets<'_>,
    weights: &LossWeights,
) -> MathResult<TotalLoss> {
    let recon = named(recon_loss(g, nodes.x, nodes.xhat), "recon")?;
    let kld = named(kld_loss(g, nodes.mu, nodes.logvar), "kld")?;
    let tc = named(
        tc_loss(g, nodes.z, nodes.mu, nodes.logvar, batch.dataset_size),
        "tc",
    )?;
    let mmd = named(
        mmd_loss(g, nodes.z1, batch.groups, weights.kernel_bandwidth),
        "mmd",
    )?;
    let con = named(
        contrastive_loss(g, nodes.z2, batch.groups, weights.margin),
        "contrastive",
    )?;
    let pred = named(
        prediction_loss(g, nodes.logits, batch.labels, batch.label_mask),
        "prediction",
    )?;
    let term_nodes = [recon, kld, tc, mmd.node, con.node, pred];

    let mut root: Option<NodeId> = None;
    for (&t, w) in term_nodes.iter().zip(weights.as_array()) {
        if w == 0.0 {
            continue;
        }
        let scaled = g.scale(t, w)?;
        root = Some(match root {
            None => scaled,
            Some(r) => g.add(r, scaled)?,
        });
    }
    let root = match root {
        Some(r) => r,
        None => g.constant(Tensor::scalar(0.0)?),
    };
    let v = |id: NodeId| g.value(id).item();
    let breakdown = LossBreakdown {
        recon: v(recon),
        kld: v(kld),
        tc: v(tc),
        mmd: v(mmd.node),
        contrastive: v(con.node),
        prediction: v(pred),
        total: v(root),
    };
    Ok(TotalLoss {
        root,
        breakdown,
        mmd_degenerate: mmd.degenerate,
        contrastive_degenerate: con.degenerate,
        term_nodes,
    })
}

/// Evaluates a scalar-valued graph built from constants.
pub fn evaluate(
    inputs: &[&Tensor],
    build: impl FnOnce(&mut Graph, &[NodeId]) -> MathResult<NodeId>,
) -> MathResult<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let out = build(&mut g, &ids)?;
    Ok(g.value(out).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradient_check;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn wavy(n: usize, d: usize, seed: f64) -> Tensor {
        let data = (0..n * d)
            .map(|i| ((i as f64 + seed) * 1.618).sin() * 1.3)
            .collect();
        Tensor::matrix(n, d, data).unwrap()
    }

    #[test]
    fn recon_cases() {
        let x = m(&[&[0.0, 0.0]]);
        let xh = m(&[&[1.0, 1.0]]);
        assert_eq!(evaluate(&[&x, &x], |g, i| recon_loss(g, i[0], i[1])).unwrap(), 0.0);
        assert_eq!(evaluate(&[&x, &xh], |g, i| recon_loss(g, i[0], i[1])).unwrap(), 1.0);
        let a = wavy(3, 4, 0.0);
        let b = wavy(3, 4, 2.0);
        let na = a.map(|v| -v).unwrap();
        let nb = b.map(|v| -v).unwrap();
        let l1 = evaluate(&[&a, &b], |g, i| recon_loss(g, i[0], i[1])).unwrap();
        let l2 = evaluate(&[&na, &nb], |g, i| recon_loss(g, i[0], i[1])).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
        assert!(evaluate(&[&a, &x], |g, i| recon_loss(g, i[0], i[1])).is_err());
    }

    #[test]
    fn kld_closed_form() {
        let zero = m(&[&[0.0]]);
        let one = m(&[&[1.0]]);
        assert_eq!(evaluate(&[&zero, &zero], |g, i| kld_loss(g, i[0], i[1])).unwrap(), 0.0);
        assert_eq!(evaluate(&[&one, &zero], |g, i| kld_loss(g, i[0], i[1])).unwrap(), 0.5);
    }

    #[test]
    fn tc_is_zero_for_one_dimensional_latent() {
        let z = wavy(6, 1, 0.0);
        let mu = wavy(6, 1, 3.0);
        let lv = wavy(6, 1, 5.0).map(|v| 0.3 * v).unwrap();
        for size in [6, 100, 10_000] {
            let v = evaluate(&[&z, &mu, &lv], |g, i| tc_loss(g, i[0], i[1], i[2], size)).unwrap();
            assert!(v.abs() < 1e-9, "{v}");
        }
        let one = wavy(1, 2, 0.0);
        assert!(evaluate(&[&one, &one, &one], |g, i| tc_loss(g, i[0], i[1], i[2], 10)).is_err());
    }

    /// 512 posteriors with equal σ. Factorized: means on a 16×32 product
    /// grid. Correlated: means on the diagonal, so z₂ = z₁ up to noise.
    fn tc_batch(correlated: bool) -> (Tensor, Tensor, Tensor) {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut r = crate::rng::stream(11, &[]);
        let (n, d, sigma) = (512, 2, 0.3f64);
        let mut mu = Vec::with_capacity(n * d);
        for i in 0..n {
            let (a, b) = if correlated {
                let t = i as f64 / n as f64 * 4.0 - 2.0;
                (t, t)
            } else {
                ((i / 32) as f64 / 16.0 * 4.0 - 2.0, (i % 32) as f64 / 32.0 * 4.0 - 2.0)
            };
            mu.extend_from_slice(&[a, b]);
        }
        let lv = vec![2.0 * sigma.ln(); n * d];
        let z: Vec<f64> = mu
            .iter()
            .map(|m| m + sigma * r.sample::<f64, _>(StandardNormal))
            .collect();
        (
            Tensor::matrix(n, d, z).unwrap(),
            Tensor::matrix(n, d, mu).unwrap(),
            Tensor::matrix(n, d, lv).unwrap(),
        )
    }

    #[test]
    fn tc_separates_factorized_from_correlated() {
        let (z, mu, lv) = tc_batch(false);
        let indep = evaluate(&[&z, &mu, &lv], |g, i| tc_loss(g, i[0], i[1], i[2], 512)).unwrap();
        assert!(indep.abs() < 0.05, "{indep}");
        let (z, mu, lv) = tc_batch(true);
        let dep = evaluate(&[&z, &mu, &lv], |g, i| tc_loss(g, i[0], i[1], i[2], 512)).unwrap();
        assert!(dep > 0.5, "{dep}");
    }

    #[test]
    fn mmd_identical_groups_is_zero() {
        let z = m(&[&[0.1, 0.2], &[1.0, -1.0], &[0.1, 0.2], &[1.0, -1.0]]);
        let groups = [0, 0, 1, 1];
        let v = evaluate(&[&z], |g, i| {
            Ok(mmd_loss(g, i[0], &groups, Bandwidth::MEDIAN)?.node)
        })
        .unwrap();
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn mmd_two_points_hand_formula() {
        let a = [0.3, -1.2];
        let b = [1.1, 0.4];
        let z = m(&[&a, &b]);
        let d2: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        for (bw, sigma2) in [(Bandwidth::Fixed(0.7), 0.49), (Bandwidth::MEDIAN, d2 / 2.0)] {
            let v = evaluate(&[&z], |g, i| Ok(mmd_loss(g, i[0], &[0, 1], bw)?.node)).unwrap();
            let hand = 2.0 * (1.0 - (-d2 / (2.0 * sigma2)).exp());
            assert!((v - hand).abs() < 1e-12, "{v} vs {hand}");
        }
    }

    #[test]
    fn mmd_single_group_is_degenerate() {
        let z = wavy(4, 2, 0.0);
        let mut g = Graph::new();
        let id = g.constant(z);
        let t = mmd_loss(&mut g, id, &[1, 1, 1, 1], Bandwidth::MEDIAN).unwrap();
        assert!(t.degenerate);
        assert_eq!(g.value(t.node).item(), 0.0);
    }

    #[test]
    fn mmd_symmetric_in_group_labels() {
        let z = wavy(7, 3, 1.0);
        let ga = [0, 1, 0, 2, 1, 2, 0];
        let gb = [2, 0, 2, 1, 0, 1, 2];
        let va = evaluate(&[&z], |g, i| Ok(mmd_loss(g, i[0], &ga, Bandwidth::MEDIAN)?.node)).unwrap();
        let vb = evaluate(&[&z], |g, i| Ok(mmd_loss(g, i[0], &gb, Bandwidth::MEDIAN)?.node)).unwrap();
        assert!((va - vb).abs() < 1e-12);
        assert!(va >= 0.0);
    }

    #[test]
    fn contrastive_worked_cases() {
        let same = m(&[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]]);
        let groups_same = [0, 0, 0];
        let mut g = Graph::new();
        let id = g.constant(same.clone());
        let t = contrastive_loss(&mut g, id, &groups_same, 1.0).unwrap();
        assert_eq!(g.value(t.node).item(), 0.0);

        let at_margin = m(&[&[0.0, 0.0], &[0.6, 0.8]]);
        let v = evaluate(&[&at_margin], |g, i| Ok(contrastive_loss(g, i[0], &[0, 1], 1.0)?.node))
            .unwrap();
        assert_eq!(v, 0.0);

        let coincident = m(&[&[0.2, 0.2], &[0.2, 0.2]]);
        let v = evaluate(&[&coincident], |g, i| {
            Ok(contrastive_loss(g, i[0], &[0, 1], 1.0)?.node)
        })
        .unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn contrastive_permutation_invariant() {
        let z = wavy(6, 2, 0.5);
        let groups = [0, 1, 0, 1, 2, 2];
        let perm = [3, 5, 0, 2, 4, 1];
        let zp = z.select_rows(&perm).unwrap();
        let gp: Vec<usize> = perm.iter().map(|&i| groups[i]).collect();
        let a = evaluate(&[&z], |g, i| Ok(contrastive_loss(g, i[0], &groups, 1.0)?.node)).unwrap();
        let b = evaluate(&[&zp], |g, i| Ok(contrastive_loss(g, i[0], &gp, 1.0)?.node)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn prediction_cases() {
        let zero = m(&[&[0.0]]);
        let v = evaluate(&[&zero], |g, i| prediction_loss(g, i[0], &[1.0], &[true])).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        let big = m(&[&[20.0]]);
        let v = evaluate(&[&big], |g, i| prediction_loss(g, i[0], &[1.0], &[true])).unwrap();
        let x = (-20f64).exp();
        let series = x - x * x / 2.0 + x * x * x / 3.0;
        assert!((v - series).abs() < 1e-22, "{v}");
        let two = m(&[&[0.0, 3.0], &[0.0, -2.0]]);
        let v = evaluate(&[&two], |g, i| {
            prediction_loss(g, i[0], &[1.0, 1.0, 1.0, 0.0], &[true, false, true, false])
        })
        .unwrap();
        assert!((v - 2f64.ln() / 2.0).abs() < 1e-15);
    }

    fn check(build: impl Fn(&mut Graph, NodeId) -> MathResult<NodeId>, p: &Tensor) {
        let r = gradient_check(build, p, 1e-5, 1e-4).unwrap();
        assert!(r.passed(), "{:?}", r.worst());
    }

    #[test]
    fn term_gradients_match_finite_differences() {
        let groups = [0, 1, 0, 2, 1, 1, 0, 2];
        let x = wavy(8, 5, 0.0);
        let mu = wavy(8, 4, 1.0);
        let lv = wavy(8, 4, 2.0).map(|v| 0.4 * v).unwrap();
        let z = wavy(8, 4, 3.0);
        let xc = x.clone();
        check(
            |g, p| {
                let x = g.constant(xc.clone());
                recon_loss(g, x, p)
            },
            &wavy(8, 5, 7.0),
        );
        let lvc = lv.clone();
        check(
            |g, p| {
                let l = g.constant(lvc.clone());
                kld_loss(g, p, l)
            },
            &mu,
        );
        let muc = mu.clone();
        check(
            |g, p| {
                let m = g.constant(muc.clone());
                kld_loss(g, m, p)
            },
            &lv,
        );
        for size in [8, 1000] {
            let (muc, lvc) = (mu.clone(), lv.clone());
            check(
                |g, p| {
                    let m = g.constant(muc.clone());
                    let l = g.constant(lvc.clone());
                    tc_loss(g, p, m, l, size)
                },
                &z,
            );
            let (zc, lvc) = (z.clone(), lv.clone());
            check(
                |g, p| {
                    let zz = g.constant(zc.clone());
                    let l = g.constant(lvc.clone());
                    tc_loss(g, zz, p, l, size)
                },
                &mu,
            );
            let (zc, muc) = (z.clone(), mu.clone());
            check(
                |g, p| {
                    let zz = g.constant(zc.clone());
                    let m = g.constant(muc.clone());
                    tc_loss(g, zz, m, p, size)
                },
                &lv,
            );
        }
        for bw in [Bandwidth::MEDIAN, Bandwidth::Fixed(1.3)] {
            check(|g, p| Ok(mmd_loss(g, p, &groups, bw)?.node), &z);
        }
        for margin in [1.0, 3.0] {
            check(|g, p| Ok(contrastive_loss(g, p, &groups, margin)?.node), &z);
        }
        let targets: Vec<f64> = (0..8 * 6).map(|i| ((i * 5) % 3 == 0) as u8 as f64).collect();
        let mask: Vec<bool> = (0..8 * 6).map(|i| i % 7 != 3).collect();
        check(|g, p| prediction_loss(g, p, &targets, &mask), &wavy(8, 6, 4.0));
    }
}
