//! Per-outcome L2-regularized logistic regression, the comparison floor.
//!
//! Each outcome minimizes the mean cross-entropy over rows with an observed
//! label plus `½·l2·‖w‖²` (the intercept is not penalized). The solver is
//! full-batch Nesterov-accelerated gradient descent with per-block steps
//! from a curvature bound and gradient-based momentum restart.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FoldAssignment, N_OUTCOMES};
use crate::error::{Error, Result};
use crate::graph::{sigmoid, softplus};
use crate::tensor::Tensor;
use crate::training::training_pool;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRegOptions {
    pub l2: f64,
    pub max_iter: usize,
    /// Stop once the full gradient norm falls below this.
    pub tol: f64,
    /// Fixed step for every coordinate; `None` derives per-block steps from
    /// the data.
    pub step: Option<f64>,
}

impl Default for LogRegOptions {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            max_iter: 10_000,
            tol: 1e-6,
            step: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

impl LogisticFit {
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.intercept + x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Row-major design without the intercept column.
struct Design<'a> {
    x: &'a [f64],
    n: usize,
    f: usize,
}

impl Design<'_> {
    fn logits(&self, w: &[f64], b: f64, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.x[i * self.f..(i + 1) * self.f];
            *o = b + row.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
        }
    }

    /// Gradient of the objective at `(w, b)`; returns the objective too.
    fn gradient(&self, y: &[f64], l2: f64, w: &[f64], b: f64, scratch: &mut [f64], gw: &mut [f64]) -> (f64, f64) {
        self.logits(w, b, scratch);
        gw.iter_mut().for_each(|v| *v = 0.0);
        let (mut gb, mut loss) = (0.0, 0.0);
        for i in 0..self.n {
            let l = scratch[i];
            loss += y[i] * softplus(-l) + (1.0 - y[i]) * softplus(l);
            let r = sigmoid(l) - y[i];
            gb += r;
            let row = &self.x[i * self.f..(i + 1) * self.f];
            for (g, a) in gw.iter_mut().zip(row) {
                *g += r * a;
            }
        }
        let inv = 1.0 / self.n as f64;
        for (g, wj) in gw.iter_mut().zip(w) {
            *g = *g * inv + l2 * wj;
        }
        let penalty = 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
        (gb * inv, loss * inv + penalty)
    }

    /// Curvature bounds for the weights and the intercept. The loss Hessian
    /// is at most `¼·X̃ᵀX̃/n` with `X̃ = [X 1]`, and `X̃ᵀX̃ ⪯ 2·diag(XᵀX, n)`,
    /// so the blocks can take separate steps. `λ_max(XᵀX/n)` comes from
    /// power iteration.
    fn curvature(&self, l2: f64) -> (f64, f64) {
        let mut v = vec![1.0 / (self.f as f64).sqrt(); self.f];
        let mut lambda = 0.0;
        let mut xv = vec![0.0; self.n];
        for _ in 0..100 {
            self.logits(&v, 0.0, &mut xv);
            let mut next = vec![0.0; self.f];
            for i in 0..self.n {
                let row = &self.x[i * self.f..(i + 1) * self.f];
                for (nj, a) in next.iter_mut().zip(row) {
                    *nj += xv[i] * a;
                }
            }
            next.iter_mut().for_each(|x| *x /= self.n as f64);
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            lambda = norm;
            v = next.into_iter().map(|x| x / norm).collect();
        }
        // power iteration approaches λ_max from below
        (1.1 * 0.5 * lambda + l2, 0.5)
    }
}

/// Fits one outcome. `x` is `n×f` row-major, `y` in {0, 1}.
pub fn fit_logistic(x: &[f64], n: usize, f: usize, y: &[f64], opts: &LogRegOptions) -> Result<LogisticFit> {
    if x.len() != n * f || y.len() != n {
        return Err(Error::Usage(format!("logistic fit: {n}×{f} design with {} values", x.len())));
    }
    if n == 0 {
        return Err(Error::Usage("logistic fit on zero rows".into()));
    }
    if !(opts.l2 >= 0.0 && opts.l2.is_finite()) {
        return Err(Error::Config("baseline l2 must be finite and ≥ 0".into()));
    }
    let design = Design { x, n, f };
    let (step_w, step_b) = match opts.step {
        Some(s) => (s, s),
        None => {
            let (lw, lb) = design.curvature(opts.l2);
            (1.0 / lw, 1.0 / lb)
        }
    };
    let mut scratch = vec![0.0; n];
    let mut gw = vec![0.0; f];
    let (mut w, mut b) = (vec![0.0; f], 0.0);
    let (mut yw, mut yb) = (w.clone(), b);
    let mut theta = 1.0f64;
    let mut best = LogisticFit {
        weights: w.clone(),
        intercept: b,
        iterations: 0,
        grad_norm: f64::INFINITY,
        converged: false,
    };
    for it in 0..opts.max_iter {
        let (gb, _) = design.gradient(y, opts.l2, &yw, yb, &mut scratch, &mut gw);
        let norm = (gb * gb + gw.iter().map(|g| g * g).sum::<f64>()).sqrt();
        if norm < best.grad_norm {
            best = LogisticFit {
                weights: yw.clone(),
                intercept: yb,
                iterations: it,
                grad_norm: norm,
                converged: false,
            };
        }
        if norm < opts.tol {
            best.converged = true;
            return Ok(best);
        }
        let nw: Vec<f64> = yw.iter().zip(&gw).map(|(a, g)| a - step_w * g).collect();
        let nb = yb - step_b * gb;
        // restart when the momentum direction opposes descent
        let uphill = gb * (nb - b) + gw.iter().zip(nw.iter().zip(&w)).map(|(g, (a, c))| g * (a - c)).sum::<f64>();
        if uphill > 0.0 {
            theta = 1.0;
        }
        let next_theta = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        let mom = (theta - 1.0) / next_theta;
        yw = nw.iter().zip(&w).map(|(a, c)| a + mom * (a - c)).collect();
        yb = nb + mom * (nb - b);
        w = nw;
        b = nb;
        theta = next_theta;
    }
    best.iterations = opts.max_iter;
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub outcomes: Vec<LogisticFit>,
    pub l2: f64,
}

impl LogisticModel {
    /// Every outcome reached the gradient tolerance.
    pub fn converged(&self) -> bool {
        self.outcomes.iter().all(|o| o.converged)
    }

    pub fn predict_proba(&self, ds: &Dataset, rows: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * N_OUTCOMES);
        for &i in rows {
            for fit in &self.outcomes {
                data.push(sigmoid(fit.logit(ds.feature_row(i))));
            }
        }
        Ok(Tensor::matrix(rows.len(), N_OUTCOMES, data)?)
    }
}

/// One independent model per outcome on the training pool of `test_fold`.
/// `ds` is expected to be normalized.
pub fn train_logreg_baseline(
    ds: &Dataset,
    folds: &FoldAssignment,
    test_fold: usize,
    opts: &LogRegOptions,
) -> Result<LogisticModel> {
    let pool = training_pool(folds, test_fold)?;
    let nf = ds.n_features();
    let outcomes = crate::exec::map_indexed(N_OUTCOMES, |c| {
        let rows: Vec<usize> = pool.iter().copied().filter(|&i| ds.label(i, c).is_some()).collect();
        let mut x = Vec::with_capacity(rows.len() * nf);
        let mut y = Vec::with_capacity(rows.len());
        for &i in &rows {
            x.extend_from_slice(ds.feature_row(i));
            y.push(ds.label(i, c).unwrap_or(0.0));
        }
        fit_logistic(&x, rows.len(), nf, &y, opts)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(LogisticModel {
        outcomes,
        l2: opts.l2,
    })
}
