//! Cross-cohort batching and the training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FoldAssignment, N_OUTCOMES};
use crate::error::{Error, MathError, Result};
use crate::graph::Graph;
use crate::losses::{self, BatchTargets, ForwardNodes, LossBreakdown, LossWeights};
use crate::metrics;
use crate::model::{self, Bound, ModelConfig, Parameters};
use crate::optim::{adam_step, AdamHyper, AdamState};
use crate::rng;
use crate::tensor::Tensor;

const TAG_SHUFFLE: u64 = 0x5348_5546;
const TAG_EPS: u64 = 0x4550_5331;
const TAG_MONITOR: u64 = 0x4d4f_4e49;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Epochs between validation snapshots; the first and last epoch are
    /// always snapshotted.
    pub eval_every: usize,
    /// Size of the fixed training subsample used for latent diagnostics.
    pub monitor_rows: usize,
    /// Filled from the run configuration's `loss_weights` section.
    #[serde(skip)]
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            eval_every: 10,
            monitor_rows: 512,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.epochs == 0 || self.batch_size < 2 || self.eval_every == 0 {
            return bad("epochs and eval_every must be positive, batch_size at least 2");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if self.monitor_rows < 2 {
            return bad("monitor_rows must be at least 2");
        }
        self.loss_weights.validate()
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub epoch: usize,
    pub val_macro_auroc: Option<f64>,
    pub val_macro_auprc: Option<f64>,
    /// Group-pair MMD of posterior-mean `z1` on the monitor rows.
    pub z1_mmd: f64,
    /// Mean Euclidean distance of cross-group posterior-mean `z2` pairs.
    pub z2_cross_distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Batch-averaged loss terms, one entry per epoch.
    pub epochs: Vec<LossBreakdown>,
    pub snapshots: Vec<Snapshot>,
    /// Batches whose MMD or contrastive term had a single group.
    pub degenerate_batches: usize,
}

/// Rows used for training when `test_fold` is held out.
pub fn training_pool(folds: &FoldAssignment, test_fold: usize) -> Result<Vec<usize>> {
    if test_fold >= folds.k {
        return Err(Error::Usage(format!("test fold {test_fold} of {}", folds.k)));
    }
    let pool = folds.train_rows(test_fold);
    if pool.len() < 2 {
        return Err(Error::Usage("training pool has fewer than 2 rows".into()));
    }
    Ok(pool)
}

fn well_mixed(batch: &[usize], groups: &[usize]) -> bool {
    let mut seen: Vec<(usize, usize)> = Vec::new();
    for &i in batch {
        match seen.iter_mut().find(|(g, _)| *g == groups[i]) {
            Some(e) => e.1 += 1,
            None => seen.push((groups[i], 1)),
        }
    }
    seen.len() >= 2 && seen.iter().any(|&(_, c)| c >= 2)
}

/// Shuffled consecutive slices of the training pool for one epoch. A short
/// tail that cannot hold two groups with a repeated group is merged into the
/// previous batch.
pub fn make_batches(
    groups: &[usize],
    folds: &FoldAssignment,
    test_fold: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Usage("batch_size must be at least 2".into()));
    }
    let mut pool = training_pool(folds, test_fold)?;
    pool.shuffle(&mut rng::stream(seed, &[TAG_SHUFFLE, epoch as u64]));
    let mut batches: Vec<Vec<usize>> = pool.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() >= 2 {
        let tail = &batches[batches.len() - 1];
        if tail.len() < batch_size && (tail.len() < 2 || !well_mixed(tail, groups)) {
            let tail = batches.pop().unwrap_or_default();
            batches.last_mut().map(|b| b.extend(tail));
        }
    }
    Ok(batches)
}

pub(crate) fn gather_features(ds: &Dataset, rows: &[usize]) -> Result<Tensor> {
    let nf = ds.n_features();
    let mut data = Vec::with_capacity(rows.len() * nf);
    for &i in rows {
        data.extend_from_slice(ds.feature_row(i));
    }
    Ok(Tensor::matrix(rows.len(), nf, data)?)
}

fn gather_labels(ds: &Dataset, rows: &[usize]) -> (Vec<f64>, Vec<bool>) {
    let mut y = Vec::with_capacity(rows.len() * N_OUTCOMES);
    let mut m = Vec::with_capacity(rows.len() * N_OUTCOMES);
    for &i in rows {
        for c in 0..N_OUTCOMES {
            let l = ds.label(i, c);
            y.push(l.unwrap_or(0.0));
            m.push(l.is_some());
        }
    }
    (y, m)
}

/// Posterior-mean latent diagnostics on a fixed row subsample.
fn latent_diagnostics(
    ds: &Dataset,
    rows: &[usize],
    params: &Parameters,
    weights: &LossWeights,
) -> Result<(f64, f64)> {
    let x = gather_features(ds, rows)?;
    let mu = model::encode_mean_batched(&x, params)?;
    let groups: Vec<usize> = rows.iter().map(|&i| ds.groups()[i]).collect();
    let d1 = params.config.invariant_dim;
    let d = params.config.latent_dim();
    let mut g = Graph::new();
    let mu_id = g.constant(mu.clone());
    let z1 = g.slice_cols(mu_id, 0, d1)?;
    let mmd = losses::mmd_loss(&mut g, z1, &groups, weights.kernel_bandwidth)?;
    let (mut total, mut pairs) = (0.0, 0usize);
    for a in 0..rows.len() {
        for b in a + 1..rows.len() {
            if groups[a] != groups[b] {
                let s: f64 = (d1..d)
                    .map(|j| (mu.get2(a, j) - mu.get2(b, j)).powi(2))
                    .sum();
                total += s.sqrt();
                pairs += 1;
            }
        }
    }
    let cross = if pairs > 0 { total / pairs as f64 } else { 0.0 };
    Ok((g.value(mmd.node).item(), cross))
}

/// Per-outcome probabilities for `rows` from posterior means.
pub fn score_rows(ds: &Dataset, rows: &[usize], params: &Parameters) -> Result<Tensor> {
    let x = gather_features(ds, rows)?;
    Ok(model::predict_proba(&x, params)?)
}

/// Macro AUROC and AUPRC over outcomes with both classes present.
pub fn macro_metrics(ds: &Dataset, rows: &[usize], probs: &Tensor) -> (Option<f64>, Option<f64>) {
    let mut auroc = Vec::with_capacity(N_OUTCOMES);
    let mut auprc = Vec::with_capacity(N_OUTCOMES);
    for c in 0..N_OUTCOMES {
        let (mut s, mut l) = (Vec::new(), Vec::new());
        for (k, &i) in rows.iter().enumerate() {
            if let Some(y) = ds.label(i, c) {
                s.push(probs.get2(k, c));
                l.push(y == 1.0);
            }
        }
        auroc.push(metrics::auroc(&s, &l).ok());
        auprc.push(metrics::auprc(&s, &l).ok());
    }
    (
        metrics::macro_average(&auroc).ok().map(|m| m.value),
        metrics::macro_average(&auprc).ok().map(|m| m.value),
    )
}

fn abort(term: &str, epoch: usize, batch: usize) -> Error {
    Error::NumericalAbort {
        term: term.to_string(),
        epoch,
        batch,
    }
}

/// Maps non-finite failures inside one stage of a step to an abort that
/// names the stage; other errors pass through.
fn stage<T>(r: std::result::Result<T, MathError>, term: &str, epoch: usize, batch: usize) -> Result<T> {
    r.map_err(|e| match e {
        MathError::NonFinite(_) => abort(term, epoch, batch),
        other => other.into(),
    })
}

/// Trains on `ds` (already normalized) with `test_fold` held out.
pub fn train(
    ds: &Dataset,
    folds: &FoldAssignment,
    test_fold: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Parameters, TrainHistory)> {
    train_observed(ds, folds, test_fold, model_cfg, cfg, &mut |_, _| {})
}

/// Like [`train`], reporting each batch's rows to `observer(epoch, rows)`.
pub fn train_observed(
    ds: &Dataset,
    folds: &FoldAssignment,
    test_fold: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(usize, &[usize]),
) -> Result<(Parameters, TrainHistory)> {
    cfg.validate()?;
    model_cfg.validate()?;
    if model_cfg.features != ds.n_features() {
        return Err(Error::Config(format!(
            "model expects {} features, data has {}",
            model_cfg.features,
            ds.n_features()
        )));
    }
    if folds.folds.len() != ds.n_rows() {
        return Err(Error::Usage("fold assignment does not match the dataset".into()));
    }
    let pool = training_pool(folds, test_fold)?;
    let validation = folds.test_rows(test_fold);
    let mut monitor = pool.clone();
    monitor.shuffle(&mut rng::stream(cfg.seed, &[TAG_MONITOR]));
    monitor.truncate(cfg.monitor_rows);
    monitor.sort_unstable();

    let mut params = Parameters::init(model_cfg)?;
    let mut state = AdamState::new(params.tensors());
    let hyper = cfg.adam();
    let latent = model_cfg.latent_dim();
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        let batches = make_batches(ds.groups(), folds, test_fold, cfg.batch_size, cfg.seed, epoch)?;
        let mut sum = LossBreakdown::default();
        for (b, rows) in batches.iter().enumerate() {
            observer(epoch, rows);
            let x = gather_features(ds, rows)?;
            let (y, mask) = gather_labels(ds, rows);
            let groups: Vec<usize> = rows.iter().map(|&i| ds.groups()[i]).collect();
            let eps = model::draw_eps(rows.len(), latent, cfg.seed, &[TAG_EPS, epoch as u64, b as u64]);

            let mut g = Graph::new();
            let bound = Bound::new(&mut g, &params, true);
            let xi = g.constant(x);
            let ei = g.constant(eps);
            let (enc, xhat, logits) = stage(
                (|| {
                    let enc = bound.encode(&mut g, xi, ei)?;
                    let xhat = bound.decode(&mut g, enc.z)?;
                    let logits = bound.predict_heads(&mut g, enc.z)?;
                    Ok((enc, xhat, logits))
                })(),
                "forward",
                epoch,
                b,
            )?;
            let nodes = ForwardNodes {
                x: xi,
                xhat,
                mu: enc.mu,
                logvar: enc.logvar,
                z: enc.z,
                z1: enc.z1,
                z2: enc.z2,
                logits,
            };
            let targets = BatchTargets {
                groups: &groups,
                labels: &y,
                label_mask: &mask,
                dataset_size: pool.len(),
            };
            let total = losses::total_loss(&mut g, &nodes, &targets, &cfg.loss_weights)
                .map_err(|e| match e {
                    MathError::NonFinite(term) => abort(&term, epoch, b),
                    other => other.into(),
                })?;
            if let Some((term, _)) = total.breakdown.terms().iter().find(|(_, v)| !v.is_finite()) {
                return Err(abort(term, epoch, b));
            }
            if total.mmd_degenerate || total.contrastive_degenerate {
                history.degenerate_batches += 1;
            }
            stage(g.backward(total.root), "gradient", epoch, b)?;
            let grads: Vec<Option<&[f64]>> = bound.ids().iter().map(|&id| g.grad_data(id)).collect();
            stage(
                adam_step(params.tensors_mut(), &grads, &mut state, &hyper),
                "update",
                epoch,
                b,
            )?;
            accumulate(&mut sum, &total.breakdown);
        }
        history.epochs.push(scaled(&sum, 1.0 / batches.len() as f64));

        let e = epoch + 1;
        if e == 1 || e % cfg.eval_every == 0 || e == cfg.epochs {
            let (z1_mmd, z2_cross_distance) =
                latent_diagnostics(ds, &monitor, &params, &cfg.loss_weights)?;
            let (val_macro_auroc, val_macro_auprc) = if validation.is_empty() {
                (None, None)
            } else {
                let probs = score_rows(ds, &validation, &params)?;
                macro_metrics(ds, &validation, &probs)
            };
            history.snapshots.push(Snapshot {
                epoch: e,
                val_macro_auroc,
                val_macro_auprc,
                z1_mmd,
                z2_cross_distance,
            });
        }
    }
    Ok((params, history))
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.recon += b.recon;
    acc.kld += b.kld;
    acc.tc += b.tc;
    acc.mmd += b.mmd;
    acc.contrastive += b.contrastive;
    acc.prediction += b.prediction;
    acc.total += b.total;
}

fn scaled(b: &LossBreakdown, s: f64) -> LossBreakdown {
    LossBreakdown {
        recon: b.recon * s,
        kld: b.kld * s,
        tc: b.tc * s,
        mmd: b.mmd * s,
        contrastive: b.contrastive * s,
        prediction: b.prediction * s,
        total: b.total * s,
    }
}
