//! K-fold cross-validation on the target group, with non-target rows always
//! in the training pool.

use serde::{Deserialize, Serialize};

use crate::baseline::{train_logreg_baseline, LogRegOptions, LogisticModel};
use crate::dataset::{
    apply_normalizer, fit_normalizer, stratified_folds, Dataset, FoldAssignment, NormStats,
    N_OUTCOMES, OUTCOMES,
};
use crate::error::{Error, Result};
use crate::metrics::{self, Curves, MacroAverage, OperatingPoint};
use crate::model::{ModelConfig, Parameters};
use crate::tensor::Tensor;
use crate::training::{self, TrainConfig, TrainHistory};

/// Sensitivity at which operating points are reported.
pub const TARGET_SENSITIVITY: f64 = 0.85;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeMetrics {
    pub outcome: String,
    pub rows: usize,
    pub positives: usize,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub operating_point: Option<OperatingPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub outcomes: Vec<OutcomeMetrics>,
    pub macro_auroc: Option<MacroAverage>,
    pub macro_auprc: Option<MacroAverage>,
}

/// Scores and labels of one outcome over the rows where it is observed.
pub fn outcome_scores(ds: &Dataset, rows: &[usize], probs: &Tensor, c: usize) -> (Vec<f64>, Vec<bool>) {
    let mut s = Vec::with_capacity(rows.len());
    let mut l = Vec::with_capacity(rows.len());
    for (k, &i) in rows.iter().enumerate() {
        if let Some(y) = ds.label(i, c) {
            s.push(probs.get2(k, c));
            l.push(y == 1.0);
        }
    }
    (s, l)
}

/// Metrics of `probs` (one row per entry of `rows`).
pub fn evaluate(ds: &Dataset, rows: &[usize], probs: &Tensor) -> EvaluationReport {
    let outcomes: Vec<OutcomeMetrics> = (0..N_OUTCOMES)
        .map(|c| {
            let (s, l) = outcome_scores(ds, rows, probs, c);
            OutcomeMetrics {
                outcome: OUTCOMES[c].to_string(),
                rows: s.len(),
                positives: l.iter().filter(|&&y| y).count(),
                auroc: metrics::auroc(&s, &l).ok(),
                auprc: metrics::auprc(&s, &l).ok(),
                operating_point: metrics::metrics_at_sensitivity(&s, &l, TARGET_SENSITIVITY).ok(),
            }
        })
        .collect();
    let au: Vec<Option<f64>> = outcomes.iter().map(|o| o.auroc).collect();
    let ap: Vec<Option<f64>> = outcomes.iter().map(|o| o.auprc).collect();
    EvaluationReport {
        macro_auroc: metrics::macro_average(&au).ok(),
        macro_auprc: metrics::macro_average(&ap).ok(),
        outcomes,
    }
}

/// ROC and PR points per outcome; `None` where a class is missing.
pub fn curves(ds: &Dataset, rows: &[usize], probs: &Tensor) -> Vec<Option<Curves>> {
    (0..N_OUTCOMES)
        .map(|c| {
            let (s, l) = outcome_scores(ds, rows, probs, c);
            metrics::curve_points(&s, &l).ok()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStat {
    pub mean: f64,
    pub stderr: f64,
    /// Folds in which the metric was defined.
    pub folds: usize,
}

fn summarize(values: &[Option<f64>]) -> Option<SummaryStat> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return None;
    }
    let (mean, stderr) = metrics::mean_and_stderr(&v);
    Some(SummaryStat {
        mean,
        stderr,
        folds: v.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateOutcome {
    pub outcome: String,
    pub auroc: Option<SummaryStat>,
    pub auprc: Option<SummaryStat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub outcomes: Vec<AggregateOutcome>,
    /// Macro average of the per-outcome fold means above.
    pub macro_auroc: Option<MacroAverage>,
    pub macro_auprc: Option<MacroAverage>,
    /// Spread of the per-fold macro values.
    pub macro_auroc_folds: Option<SummaryStat>,
    pub macro_auprc_folds: Option<SummaryStat>,
}

pub fn aggregate(reports: &[&EvaluationReport]) -> Aggregate {
    let outcomes: Vec<AggregateOutcome> = (0..N_OUTCOMES)
        .map(|c| AggregateOutcome {
            outcome: OUTCOMES[c].to_string(),
            auroc: summarize(&reports.iter().map(|r| r.outcomes[c].auroc).collect::<Vec<_>>()),
            auprc: summarize(&reports.iter().map(|r| r.outcomes[c].auprc).collect::<Vec<_>>()),
        })
        .collect();
    let mean_of = |f: fn(&AggregateOutcome) -> &Option<SummaryStat>| {
        let v: Vec<Option<f64>> = outcomes.iter().map(|o| f(o).as_ref().map(|s| s.mean)).collect();
        metrics::macro_average(&v).ok()
    };
    Aggregate {
        macro_auroc: mean_of(|o| &o.auroc),
        macro_auprc: mean_of(|o| &o.auprc),
        macro_auroc_folds: summarize(
            &reports.iter().map(|r| r.macro_auroc.map(|m| m.value)).collect::<Vec<_>>(),
        ),
        macro_auprc_folds: summarize(
            &reports.iter().map(|r| r.macro_auprc.map(|m| m.value)).collect::<Vec<_>>(),
        ),
        outcomes,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvSetup {
    pub folds: usize,
    pub target_group: usize,
    /// Outcome whose positives are balanced across folds; the rarest in the
    /// target group when unset.
    pub strat_outcome: Option<String>,
    pub fold_seed: u64,
}

impl Default for CvSetup {
    fn default() -> Self {
        Self {
            folds: 5,
            target_group: 0,
            strat_outcome: None,
            fold_seed: 0,
        }
    }
}

impl CvSetup {
    pub fn assign(&self, ds: &Dataset) -> Result<FoldAssignment> {
        if self.folds < 2 {
            return Err(Error::Config("data: folds must be at least 2".into()));
        }
        if self.target_group >= ds.n_groups() {
            return Err(Error::Config(format!(
                "data: target_group {} but the data has {} groups",
                self.target_group,
                ds.n_groups()
            )));
        }
        let target = ds.rows_of_group(self.target_group);
        let strat = match &self.strat_outcome {
            Some(name) => crate::dataset::outcome_index(name).ok_or_else(|| {
                Error::Config(format!(
                    "data: unknown outcome {name:?}; valid: {}",
                    OUTCOMES.join(", ")
                ))
            })?,
            None => ds.rarest_outcome(&target),
        };
        stratified_folds(ds, self.folds, self.target_group, strat, self.fold_seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FoldModel {
    Vae {
        params: Parameters,
        history: TrainHistory,
    },
    Logistic(LogisticModel),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub test_rows: Vec<usize>,
    /// Outcome probabilities, one row per test row.
    pub probs: Tensor,
    pub normalizer: NormStats,
    pub report: EvaluationReport,
    pub model: FoldModel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossValidation {
    pub assignment: FoldAssignment,
    pub folds: Vec<FoldResult>,
    pub aggregate: Aggregate,
}

fn run_folds(
    ds: &Dataset,
    setup: &CvSetup,
    fit: impl Fn(usize, &Dataset, &FoldAssignment) -> Result<(Tensor, FoldModel)> + Sync + Send,
) -> Result<CrossValidation> {
    let assignment = setup.assign(ds)?;
    let results = crate::exec::map_indexed(assignment.k, |fold| -> Result<FoldResult> {
        let wrap = |e: Error| Error::Fold {
            fold,
            source: Box::new(e),
        };
        let pool = training::training_pool(&assignment, fold).map_err(wrap)?;
        let normalizer = fit_normalizer(ds, &pool).map_err(wrap)?;
        let normalized = apply_normalizer(ds, &normalizer).map_err(wrap)?;
        let (probs_fn, model) = fit(fold, &normalized, &assignment).map_err(wrap)?;
        let test_rows = assignment.test_rows(fold);
        let report = evaluate(&normalized, &test_rows, &probs_fn);
        Ok(FoldResult {
            fold,
            test_rows,
            probs: probs_fn,
            normalizer,
            report,
            model,
        })
    });
    let folds = results.into_iter().collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(&folds.iter().map(|f| &f.report).collect::<Vec<_>>());
    Ok(CrossValidation {
        assignment,
        folds,
        aggregate,
    })
}

/// Trains one model per fold and scores the held-out target rows from
/// posterior means.
pub fn cross_validate(
    ds: &Dataset,
    setup: &CvSetup,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<CrossValidation> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    run_folds(ds, setup, |fold, normalized, assignment| {
        let (params, history) = training::train(normalized, assignment, fold, model_cfg, train_cfg)?;
        let probs = training::score_rows(normalized, &assignment.test_rows(fold), &params)?;
        Ok((probs, FoldModel::Vae { params, history }))
    })
}

pub fn cross_validate_baseline(
    ds: &Dataset,
    setup: &CvSetup,
    opts: &LogRegOptions,
) -> Result<CrossValidation> {
    run_folds(ds, setup, |fold, normalized, assignment| {
        let model = train_logreg_baseline(normalized, assignment, fold, opts)?;
        let probs = model.predict_proba(normalized, &assignment.test_rows(fold))?;
        Ok((probs, FoldModel::Logistic(model)))
    })
}
