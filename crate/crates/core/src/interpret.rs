//! Integrated Gradients attributions and importance summaries.

use serde::{Deserialize, Serialize};

use crate::dataset::feature_name;
use crate::error::{Error, MathResult, Result};
use crate::graph::Graph;
use crate::model::{Bound, Parameters};
use crate::tensor::Tensor;

/// Rows of the straight-line path evaluated per graph.
const PATH_CHUNK: usize = 128;

/// A differentiable scalar function of one feature row.
pub trait Scorer: Sync {
    fn features(&self) -> usize;

    /// Values and input gradients at each row of `points` (n×F).
    fn value_and_grad(&self, points: &Tensor) -> MathResult<(Vec<f64>, Tensor)>;
}

/// `sigmoid(head_c(μ(x)))`, the outcome probability through the posterior
/// mean.
pub struct HeadScorer<'a> {
    pub params: &'a Parameters,
    pub outcome: usize,
}

impl<'a> HeadScorer<'a> {
    pub fn new(params: &'a Parameters, outcome: usize) -> Result<Self> {
        if outcome >= params.config.outcomes {
            return Err(Error::Usage(format!(
                "outcome index {outcome} out of range for {} heads",
                params.config.outcomes
            )));
        }
        Ok(Self { params, outcome })
    }
}

impl Scorer for HeadScorer<'_> {
    fn features(&self) -> usize {
        self.params.config.features
    }

    fn value_and_grad(&self, points: &Tensor) -> MathResult<(Vec<f64>, Tensor)> {
        let (n, _) = points.dims2()?;
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, self.params, false);
        let x = g.param(points.clone());
        let eps = g.constant(Tensor::zeros(&[n, self.params.config.latent_dim()]));
        let enc = bound.encode(&mut g, x, eps)?;
        let logit = bound.head_logit(&mut g, enc.mu, self.outcome)?;
        let prob = g.sigmoid(logit)?;
        // rows are independent, so the gradient of the sum is per-row
        let total = g.sum(prob)?;
        g.backward(total)?;
        let values = g.value(prob).data().to_vec();
        let grad = g.grad(x).unwrap_or_else(|| Tensor::zeros(points.shape()));
        Ok((values, grad))
    }
}

/// `w·x + b`.
pub struct LinearScorer {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Scorer for LinearScorer {
    fn features(&self) -> usize {
        self.weights.len()
    }

    fn value_and_grad(&self, points: &Tensor) -> MathResult<(Vec<f64>, Tensor)> {
        let (n, f) = points.dims2()?;
        let values = (0..n)
            .map(|i| self.bias + points.row(i).iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let grad = Tensor::new(vec![n, f], self.weights.repeat(n))?;
        Ok((values, grad))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub values: Vec<f64>,
    /// `F(x)` and `F(baseline)`.
    pub score: f64,
    pub baseline_score: f64,
    /// `|Σ IG − (F(x) − F(baseline))|`.
    pub residual: f64,
}

/// Midpoint-rule Integrated Gradients along the straight path from
/// `baseline` to `x` with `steps` evaluation points.
pub fn integrated_gradients(
    scorer: &dyn Scorer,
    x: &[f64],
    baseline: &[f64],
    steps: usize,
) -> Result<Attribution> {
    let nf = scorer.features();
    if x.len() != nf || baseline.len() != nf {
        return Err(Error::Usage(format!(
            "attribution input has {} features, scorer expects {nf}",
            x.len()
        )));
    }
    if steps == 0 {
        return Err(Error::Usage("integrated gradients needs at least one step".into()));
    }
    let chunks = crate::exec::map_indexed(steps.div_ceil(PATH_CHUNK), |ci| -> MathResult<Vec<f64>> {
        let (lo, hi) = (ci * PATH_CHUNK, ((ci + 1) * PATH_CHUNK).min(steps));
        let mut pts = Vec::with_capacity((hi - lo) * nf);
        for t in lo..hi {
            let alpha = (t as f64 + 0.5) / steps as f64;
            pts.extend(x.iter().zip(baseline).map(|(xi, bi)| bi + alpha * (xi - bi)));
        }
        let (_, grad) = scorer.value_and_grad(&Tensor::matrix(hi - lo, nf, pts)?)?;
        let mut sum = vec![0.0; nf];
        for r in 0..hi - lo {
            sum.iter_mut().zip(grad.row(r)).for_each(|(s, g)| *s += g);
        }
        Ok(sum)
    });
    let mut grad_sum = vec![0.0; nf];
    for c in chunks {
        grad_sum.iter_mut().zip(c?).for_each(|(s, g)| *s += g);
    }
    let values: Vec<f64> = (0..nf)
        .map(|i| (x[i] - baseline[i]) * grad_sum[i] / steps as f64)
        .collect();
    let ends = Tensor::matrix(2, nf, [x, baseline].concat())?;
    let (fv, _) = scorer.value_and_grad(&ends)?;
    let residual = (values.iter().sum::<f64>() - (fv[0] - fv[1])).abs();
    Ok(Attribution {
        values,
        score: fv[0],
        baseline_score: fv[1],
        residual,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    /// Mean |IG| per feature.
    pub scores: Vec<f64>,
    /// `100·score / Σ scores`.
    pub percent: Vec<f64>,
}

pub fn normalize_importance(rows: &[Vec<f64>]) -> Result<Importance> {
    let Some(first) = rows.first() else {
        return Err(Error::Usage("no attributed rows".into()));
    };
    let nf = first.len();
    if rows.iter().any(|r| r.len() != nf) {
        return Err(Error::Usage("attribution rows differ in length".into()));
    }
    let mut scores = vec![0.0; nf];
    for r in rows {
        scores.iter_mut().zip(r).for_each(|(s, v)| *s += v.abs());
    }
    scores.iter_mut().for_each(|s| *s /= rows.len() as f64);
    let total: f64 = scores.iter().sum();
    if total == 0.0 {
        return Err(Error::Undefined("all attributions are zero".into()));
    }
    let percent = scores.iter().map(|s| 100.0 * s / total).collect();
    Ok(Importance { scores, percent })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub index: usize,
    pub name: String,
    pub percent: f64,
}

/// Highest `k` percentages, ties broken by lower feature index.
pub fn top_k(percent: &[f64], k: usize) -> Vec<RankedFeature> {
    let mut order: Vec<usize> = (0..percent.len()).collect();
    order.sort_by(|&a, &b| percent[b].total_cmp(&percent[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .map(|i| RankedFeature {
            index: i,
            name: feature_name(i),
            percent: percent[i],
        })
        .collect()
}

/// Mean silhouette coefficient of `labels` under Euclidean distance. Points
/// alone in their cluster score 0.
pub fn silhouette(points: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, d) = points.dims2()?;
    if labels.len() != n {
        return Err(Error::Usage(format!("{} labels for {n} points", labels.len())));
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::Undefined("silhouette needs at least two clusters".into()));
    }
    let per_point = crate::exec::map_indexed(n, |i| {
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                let s: f64 = (0..d).map(|t| (points.get2(i, t) - points.get2(j, t)).powi(2)).sum();
                sums[labels[j]] += s.sqrt();
            }
        }
        let own = labels[i];
        if sizes[own] < 2 {
            return 0.0;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if a.max(b) == 0.0 {
            0.0
        } else {
            (b - a) / a.max(b)
        }
    });
    Ok(per_point.iter().sum::<f64>() / n as f64)
}
