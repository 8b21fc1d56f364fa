//! The run report written by `crossval` and `baseline`.

use serde::{Deserialize, Serialize};
use surgvae::config::RunConfig;
use surgvae::crossval::{Aggregate, CrossValidation, EvaluationReport, FoldModel};
use surgvae::interpret::RankedFeature;
use surgvae::training::TrainHistory;

pub const TOOL: &str = "surgvae";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub rows: usize,
    pub features: usize,
    pub groups: usize,
    pub target_rows: usize,
    pub strat_outcome: String,
    /// Positives of `strat_outcome` in each test fold.
    pub fold_positives: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineFitSummary {
    pub outcome: String,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_rows: usize,
    pub metrics: EvaluationReport,
    pub history: Option<TrainHistory>,
    pub baseline_fits: Option<Vec<BaselineFitSummary>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub model: String,
    pub aggregate: Aggregate,
    /// surgVAE minus comparison model.
    pub macro_auroc_delta: Option<f64>,
    pub macro_auprc_delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeAttribution {
    pub outcome: String,
    pub fold: usize,
    pub rows: usize,
    pub steps: usize,
    pub max_residual: f64,
    pub top: Vec<RankedFeature>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub model: String,
    pub seed: u64,
    pub config: RunConfig,
    pub data: DataSummary,
    pub folds: Vec<FoldReport>,
    pub aggregate: Aggregate,
    pub baseline_comparison: Option<Comparison>,
    pub attribution: Vec<OutcomeAttribution>,
}

impl RunReport {
    /// Whether every per-fold and aggregate metric is defined.
    pub fn all_defined(&self) -> bool {
        let folds_ok = self.folds.iter().all(|f| {
            f.metrics
                .outcomes
                .iter()
                .all(|o| o.auroc.is_some() && o.auprc.is_some() && o.operating_point.is_some())
        });
        let agg_ok = self.aggregate.macro_auroc.is_some_and(|m| m.excluded == 0)
            && self.aggregate.macro_auprc.is_some_and(|m| m.excluded == 0);
        folds_ok && agg_ok
    }
}

pub fn fold_reports(cv: &CrossValidation) -> Vec<FoldReport> {
    cv.folds
        .iter()
        .map(|f| {
            let (history, baseline_fits) = match &f.model {
                FoldModel::Vae { history, .. } => (Some(history.clone()), None),
                FoldModel::Logistic(m) => (
                    None,
                    Some(
                        m.outcomes
                            .iter()
                            .zip(surgvae::dataset::OUTCOMES)
                            .map(|(fit, name)| BaselineFitSummary {
                                outcome: name.to_string(),
                                iterations: fit.iterations,
                                grad_norm: fit.grad_norm,
                                converged: fit.converged,
                            })
                            .collect(),
                    ),
                ),
            };
            FoldReport {
                fold: f.fold,
                test_rows: f.test_rows.len(),
                metrics: f.report.clone(),
                history,
                baseline_fits,
            }
        })
        .collect()
}

pub fn compare(ours: &Aggregate, model: &str, theirs: &Aggregate) -> Comparison {
    let delta = |a: Option<surgvae::metrics::MacroAverage>, b: Option<surgvae::metrics::MacroAverage>| {
        Some(a?.value - b?.value)
    };
    Comparison {
        model: model.into(),
        aggregate: theirs.clone(),
        macro_auroc_delta: delta(ours.macro_auroc, theirs.macro_auroc),
        macro_auprc_delta: delta(ours.macro_auprc, theirs.macro_auprc),
    }
}
