//! Subcommand implementations. Every file written here is a pure function
//! of the inputs, so reruns are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use surgvae::checkpoint::Checkpoint;
use surgvae::config::{DataShape, RunConfig};
use surgvae::crossval::{self, CrossValidation, FoldModel};
use surgvae::dataset::{apply_normalizer, feature_name, outcome_index, Dataset, N_OUTCOMES, OUTCOMES};
use surgvae::exec::with_threads;
use surgvae::interpret::{integrated_gradients, normalize_importance, top_k, Attribution, HeadScorer};
use surgvae::model::{encode_mean_batched, Parameters};
use surgvae::synth::synth_generate;
use surgvae::tsne::{tsne, TsneOptions};
use surgvae::{Error, Result, Tensor};

use crate::report::{self, DataSummary, OutcomeAttribution, RunReport, TOOL};
use crate::svg;

/// Held-out rows per outcome explained for the report's attribution summary.
const SUMMARY_ATTRIBUTION_ROWS: usize = 32;
const SUMMARY_ATTRIBUTION_STEPS: usize = 64;
pub const TOP_K: usize = 10;

/// Whether every metric came out defined; `false` maps to its own exit code.
pub type Completeness = bool;

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}{suffix}"))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn json<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn load_config(path: Option<&Path>, shape: Option<DataShape>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            RunConfig::from_toml(&text, shape)
        }
        None => RunConfig::from_toml("", shape),
    }
}

fn shape_of(ds: &Dataset) -> DataShape {
    DataShape {
        features: ds.n_features(),
        groups: ds.n_groups(),
    }
}

fn rows_tensor(ds: &Dataset, rows: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * ds.n_features());
    for &i in rows {
        data.extend_from_slice(ds.feature_row(i));
    }
    Ok(Tensor::matrix(rows.len(), ds.n_features(), data)?)
}

fn label_cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |y| format!("{y}"))
}

pub fn synth(config: Option<&Path>, out: &Path, seed: u64) -> Result<Completeness> {
    let mut cfg = load_config(config, None)?;
    cfg.synth.seed = seed;
    cfg.synth.validate()?;
    let (ds, oracle) = synth_generate(&cfg.synth)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    ds.save_csv(out)?;
    let mut csv = String::from("case_id,group");
    for o in OUTCOMES {
        let _ = write!(csv, ",p_{o}");
    }
    csv.push('\n');
    for i in 0..ds.n_rows() {
        let _ = write!(csv, "{},{}", ds.case_ids()[i], ds.groups()[i]);
        for c in 0..N_OUTCOMES {
            let _ = write!(csv, ",{}", oracle.prob(i, c));
        }
        csv.push('\n');
    }
    write(&sibling(out, ".oracle.csv"), &csv)?;
    Ok(true)
}

fn data_summary(ds: &Dataset, cfg: &RunConfig, cv: &CrossValidation) -> DataSummary {
    let target = ds.rows_of_group(cfg.data.target_group);
    let strat = cfg
        .data
        .strat_outcome
        .as_deref()
        .and_then(outcome_index)
        .unwrap_or_else(|| ds.rarest_outcome(&target));
    let fold_positives = (0..cv.assignment.k)
        .map(|f| {
            cv.assignment
                .test_rows(f)
                .iter()
                .filter(|&&i| ds.label(i, strat) == Some(1.0))
                .count()
        })
        .collect();
    DataSummary {
        rows: ds.n_rows(),
        features: ds.n_features(),
        groups: ds.n_groups(),
        target_rows: target.len(),
        strat_outcome: OUTCOMES[strat].into(),
        fold_positives,
    }
}

/// Out-of-fold probabilities in fold order.
fn pooled_predictions(cv: &CrossValidation) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let (mut rows, mut folds, mut probs) = (Vec::new(), Vec::new(), Vec::new());
    for f in &cv.folds {
        rows.extend_from_slice(&f.test_rows);
        folds.extend(std::iter::repeat(f.fold).take(f.test_rows.len()));
        probs.extend_from_slice(f.probs.data());
    }
    (rows, folds, probs)
}

fn write_predictions_and_curves(ds: &Dataset, cv: &CrossValidation, dir: &Path) -> Result<()> {
    let (rows, folds, probs) = pooled_predictions(cv);
    let mut csv = String::from("case_id,fold");
    for o in OUTCOMES {
        let _ = write!(csv, ",p_{o},y_{o}");
    }
    csv.push('\n');
    for (k, &i) in rows.iter().enumerate() {
        let _ = write!(csv, "{},{}", ds.case_ids()[i], folds[k]);
        for c in 0..N_OUTCOMES {
            let _ = write!(csv, ",{},{}", probs[k * N_OUTCOMES + c], label_cell(ds.label(i, c)));
        }
        csv.push('\n');
    }
    write(&dir.join("predictions.csv"), &csv)?;

    let probs = Tensor::matrix(rows.len(), N_OUTCOMES, probs)?;
    for (c, curves) in crossval::curves(ds, &rows, &probs).into_iter().enumerate() {
        let Some(curves) = curves else { continue };
        let name = OUTCOMES[c];
        let mut roc = String::from("threshold,fpr,tpr\n");
        for p in &curves.roc {
            let _ = writeln!(roc, "{},{},{}", p.threshold, p.fpr, p.tpr);
        }
        let mut pr = String::from("threshold,recall,precision\n");
        for p in &curves.pr {
            let _ = writeln!(pr, "{},{},{}", p.threshold, p.recall, p.precision);
        }
        write(&dir.join("curves").join(format!("{name}_roc.csv")), &roc)?;
        write(&dir.join("curves").join(format!("{name}_pr.csv")), &pr)?;
        let roc_pts: Vec<(f64, f64)> = curves.roc.iter().map(|p| (p.fpr, p.tpr)).collect();
        let pr_pts: Vec<(f64, f64)> = curves.pr.iter().map(|p| (p.recall, p.precision)).collect();
        write(
            &dir.join("plots").join(format!("{name}_roc.svg")),
            &svg::line_plot(&format!("ROC: {name} (out-of-fold)"), "false positive rate", "true positive rate", &roc_pts, true),
        )?;
        write(
            &dir.join("plots").join(format!("{name}_pr.svg")),
            &svg::line_plot(&format!("PR: {name} (out-of-fold)"), "recall", "precision", &pr_pts, false),
        )?;
    }
    Ok(())
}

fn attribution_rows(ds: &Dataset, params: &Parameters, rows: &[usize], outcome: usize, steps: usize) -> Result<Vec<Attribution>> {
    let scorer = HeadScorer::new(params, outcome)?;
    let baseline = vec![0.0; ds.n_features()];
    rows.iter()
        .map(|&i| integrated_gradients(&scorer, ds.feature_row(i), &baseline, steps))
        .collect()
}

fn attribution_summary(ds: &Dataset, cv: &CrossValidation) -> Result<Vec<OutcomeAttribution>> {
    let Some(first) = cv.folds.first() else { return Ok(Vec::new()) };
    let FoldModel::Vae { params, .. } = &first.model else { return Ok(Vec::new()) };
    let normalized = apply_normalizer(ds, &first.normalizer)?;
    let rows: Vec<usize> = first.test_rows.iter().copied().take(SUMMARY_ATTRIBUTION_ROWS).collect();
    (0..N_OUTCOMES)
        .map(|c| {
            let attrs = attribution_rows(&normalized, params, &rows, c, SUMMARY_ATTRIBUTION_STEPS)?;
            let values: Vec<Vec<f64>> = attrs.iter().map(|a| a.values.clone()).collect();
            let importance = normalize_importance(&values)?;
            Ok(OutcomeAttribution {
                outcome: OUTCOMES[c].into(),
                fold: first.fold,
                rows: rows.len(),
                steps: SUMMARY_ATTRIBUTION_STEPS,
                max_residual: attrs.iter().map(|a| a.residual).fold(0.0, f64::max),
                top: top_k(&importance.percent, TOP_K),
            })
        })
        .collect()
}

fn base_report(command: &str, model: &str, cfg: &RunConfig, ds: &Dataset, cv: &CrossValidation) -> RunReport {
    RunReport {
        tool: TOOL.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        model: model.into(),
        seed: cfg.train.seed,
        config: cfg.clone(),
        data: data_summary(ds, cfg, cv),
        folds: report::fold_reports(cv),
        aggregate: cv.aggregate.clone(),
        baseline_comparison: None,
        attribution: Vec::new(),
    }
}

pub fn crossval(data: &Path, config: &Path, out: &Path, jobs: usize) -> Result<Completeness> {
    let ds = Dataset::load_csv(data, None)?;
    let cfg = load_config(Some(config), Some(shape_of(&ds)))?;
    let setup = cfg.data.cv();
    let (cv, baseline) = with_threads(jobs, || -> Result<_> {
        let cv = crossval::cross_validate(&ds, &setup, &cfg.model, &cfg.train)?;
        let baseline = crossval::cross_validate_baseline(&ds, &setup, &cfg.data.baseline())?;
        Ok((cv, baseline))
    })?;
    fs::create_dir_all(out)?;
    for f in &cv.folds {
        if let FoldModel::Vae { params, .. } = &f.model {
            let mut ck = Checkpoint::new(params, &f.normalizer, cfg.train.seed, &cfg.loss_weights);
            ck.fold = Some(f.fold);
            ck.target_group = cfg.data.target_group;
            ck.eval_cases = f.test_rows.iter().map(|&i| ds.case_ids()[i].clone()).collect();
            write(&out.join("checkpoints").join(format!("fold_{}.json", f.fold)), &ck.to_json()?)?;
        }
    }
    write_predictions_and_curves(&ds, &cv, out)?;
    let mut rep = base_report("crossval", "surgvae", &cfg, &ds, &cv);
    rep.baseline_comparison = Some(report::compare(&cv.aggregate, "logistic_regression", &baseline.aggregate));
    rep.attribution = with_threads(jobs, || attribution_summary(&ds, &cv))?;
    write(&out.join("report.json"), &json(&rep)?)?;
    print_summary(&rep);
    Ok(rep.all_defined())
}

pub fn baseline(data: &Path, config: &Path, out: &Path) -> Result<Completeness> {
    let ds = Dataset::load_csv(data, None)?;
    let cfg = load_config(Some(config), Some(shape_of(&ds)))?;
    let cv = with_threads(1, || crossval::cross_validate_baseline(&ds, &cfg.data.cv(), &cfg.data.baseline()))?;
    let rep = base_report("baseline", "logistic_regression", &cfg, &ds, &cv);
    write(out, &json(&rep)?)?;
    print_summary(&rep);
    Ok(rep.all_defined())
}

fn print_summary(rep: &RunReport) {
    println!("{} ({}): {} folds", rep.command, rep.model, rep.folds.len());
    for o in &rep.aggregate.outcomes {
        let fmt = |s: &Option<surgvae::crossval::SummaryStat>| {
            s.as_ref().map_or_else(|| "undefined".to_string(), |s| format!("{:.4} ± {:.4}", s.mean, s.stderr))
        };
        println!("  {:<12} AUROC {}  AUPRC {}", o.outcome, fmt(&o.auroc), fmt(&o.auprc));
    }
    let m = |v: Option<surgvae::metrics::MacroAverage>| v.map_or_else(|| "undefined".into(), |m| format!("{:.4}", m.value));
    println!("  macro        AUROC {}  AUPRC {}", m(rep.aggregate.macro_auroc), m(rep.aggregate.macro_auprc));
    if let Some(c) = &rep.baseline_comparison {
        println!(
            "  {} macro AUROC {}  AUPRC {}",
            c.model,
            m(c.aggregate.macro_auroc),
            m(c.aggregate.macro_auprc)
        );
    }
}

fn resolve_outcome(name: &str) -> Result<usize> {
    outcome_index(name).ok_or_else(|| {
        Error::Config(format!("unknown outcome {name:?}; valid names: {}", OUTCOMES.join(", ")))
    })
}

/// Checkpoint plus the data normalized with its statistics.
fn load_model(checkpoint: &Path, data: &Path) -> Result<(Checkpoint, Parameters, Dataset)> {
    let ck = Checkpoint::load(checkpoint)?;
    let params = ck.parameters()?;
    let ds = Dataset::load_csv(data, Some(ck.model.features))?;
    let normalized = apply_normalizer(&ds, &ck.normalizer)?;
    Ok((ck, params, normalized))
}

/// Held-out rows named in the checkpoint, or the whole target group.
fn evaluation_rows(ck: &Checkpoint, ds: &Dataset) -> Result<Vec<usize>> {
    if ck.eval_cases.is_empty() {
        return Ok(ds.rows_of_group(ck.target_group));
    }
    let index: std::collections::HashMap<&str, usize> =
        ds.case_ids().iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    ck.eval_cases
        .iter()
        .map(|c| {
            index
                .get(c.as_str())
                .copied()
                .ok_or_else(|| Error::Value(format!("checkpoint case {c:?} is not in the data")))
        })
        .collect()
}

pub fn explain(checkpoint: &Path, data: &Path, outcome: &str, out: &Path, steps: usize) -> Result<Completeness> {
    let c = resolve_outcome(outcome)?;
    if steps < 2 {
        return Err(Error::Config("--steps must be at least 2".into()));
    }
    let (ck, params, ds) = load_model(checkpoint, data)?;
    let rows = evaluation_rows(&ck, &ds)?;
    if rows.is_empty() {
        return Err(Error::Value("no rows to explain".into()));
    }
    let attrs = attribution_rows(&ds, &params, &rows, c, steps)?;
    let values: Vec<Vec<f64>> = attrs.iter().map(|a| a.values.clone()).collect();
    let importance = normalize_importance(&values)?;
    let ranked = top_k(&importance.percent, ds.n_features());
    let mut rank = vec![0; ds.n_features()];
    for (r, f) in ranked.iter().enumerate() {
        rank[f.index] = r + 1;
    }
    let name = OUTCOMES[c];
    let mut csv = String::from("outcome,feature,raw_score,percent,rank\n");
    for f in 0..ds.n_features() {
        let _ = writeln!(
            csv,
            "{name},{},{},{},{}",
            feature_name(f),
            importance.scores[f],
            importance.percent[f],
            rank[f]
        );
    }
    write(out, &csv)?;

    let mut per_row = String::from("case_id,score,baseline_score,attribution_sum,residual\n");
    for (a, &i) in attrs.iter().zip(&rows) {
        let _ = writeln!(
            per_row,
            "{},{},{},{},{}",
            ds.case_ids()[i],
            a.score,
            a.baseline_score,
            a.values.iter().sum::<f64>(),
            a.residual
        );
    }
    write(&sibling(out, ".rows.csv"), &per_row)?;

    let mut table = String::from("rank,feature,percent\n");
    println!("top {TOP_K} features for {name} over {} rows ({steps} steps):", rows.len());
    for (r, f) in ranked.iter().take(TOP_K).enumerate() {
        let _ = writeln!(table, "{},{},{}", r + 1, f.name, f.percent);
        println!("  {:>2}. {}  {:.3}%", r + 1, f.name, f.percent);
    }
    write(&sibling(out, ".top10.csv"), &table)?;
    Ok(true)
}

pub fn project(checkpoint: &Path, data: &Path, out: &Path, perplexity: f64, seed: u64) -> Result<Completeness> {
    let (ck, params, ds) = load_model(checkpoint, data)?;
    let rows = ds.rows_of_group(ck.target_group);
    let mu = encode_mean_batched(&rows_tensor(&ds, &rows)?, &params)?;
    let opts = TsneOptions {
        perplexity,
        seed,
        ..TsneOptions::default()
    };
    let emb = tsne(&mu, &opts).map_err(|e| match e {
        Error::Usage(m) => Error::Config(m),
        other => other,
    })?;
    let mut csv = String::from("case_id,dim1,dim2,group");
    for o in OUTCOMES {
        let _ = write!(csv, ",y_{o}");
    }
    csv.push('\n');
    let coords: Vec<(f64, f64)> = (0..rows.len()).map(|k| (emb.coords.get2(k, 0), emb.coords.get2(k, 1))).collect();
    for (k, &i) in rows.iter().enumerate() {
        let _ = write!(csv, "{},{},{},{}", ds.case_ids()[i], coords[k].0, coords[k].1, ds.groups()[i]);
        for c in 0..N_OUTCOMES {
            let _ = write!(csv, ",{}", label_cell(ds.label(i, c)));
        }
        csv.push('\n');
    }
    write(out, &csv)?;
    for (c, name) in OUTCOMES.iter().enumerate() {
        let labels: Vec<Option<bool>> = rows.iter().map(|&i| ds.label(i, c).map(|y| y == 1.0)).collect();
        write(
            &sibling(out, &format!(".{name}.svg")),
            &svg::scatter(&format!("t-SNE of latent means, colored by {name}"), &coords, &labels),
        )?;
    }
    #[derive(serde::Serialize)]
    struct Summary<'a> {
        rows: usize,
        perplexity: f64,
        seed: u64,
        iterations: usize,
        kl_initial: f64,
        kl_final: f64,
        calibration: &'a surgvae::tsne::Calibration,
    }
    let summary = Summary {
        rows: rows.len(),
        perplexity,
        seed,
        iterations: emb.iterations,
        kl_initial: emb.kl_initial,
        kl_final: emb.kl_final,
        calibration: &emb.calibration,
    };
    write(&sibling(out, ".json"), &json(&summary)?)?;
    println!(
        "projected {} rows: KL {:.4} -> {:.4}, max entropy error {:.2e}",
        rows.len(),
        emb.kl_initial,
        emb.kl_final,
        emb.calibration.max_entropy_error
    );
    Ok(true)
}
