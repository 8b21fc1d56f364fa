//! Ranking metrics for binary outcomes: AUROC, average precision, fixed
//! sensitivity operating points and curve points.
//!
//! Scores are compared exactly; equal scores form one tie block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Value(format!("score {i} is not finite")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Tie blocks in descending score order as `(score, positives, negatives)`.
fn descending_blocks(scores: &[f64], labels: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut blocks: Vec<(f64, usize, usize)> = Vec::new();
    for i in order {
        let (p, n) = if labels[i] { (1, 0) } else { (0, 1) };
        match blocks.last_mut() {
            Some(b) if b.0 == scores[i] => {
                b.1 += p;
                b.2 += n;
            }
            _ => blocks.push((scores[i], p, n)),
        }
    }
    blocks
}

/// Mann–Whitney statistic with ties counted as ½.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("auroc needs both classes".into()));
    }
    // walk ascending: each positive beats all negatives below its block
    let mut below = 0usize;
    let mut twice_wins = 0u128;
    for (_, p, n) in descending_blocks(scores, labels).into_iter().rev() {
        twice_wins += (p as u128) * (2 * below as u128 + n as u128);
        below += n;
    }
    Ok(twice_wins as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Average precision; positives in a tie block share the precision reached
/// at the end of the block.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(Error::Undefined("auprc needs a positive".into()));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut total = 0.0;
    for (_, p, n) in descending_blocks(scores, labels) {
        tp += p;
        fp += n;
        if p > 0 {
            total += p as f64 * tp as f64 / (tp + fp) as f64;
        }
    }
    Ok(total / pos as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    /// 1 when there are no negatives.
    pub specificity: f64,
    pub precision: f64,
    pub accuracy: f64,
}

/// Operating point at the largest score threshold `t` whose rule
/// `score ≥ t` reaches sensitivity `target` with at least one true positive.
pub fn metrics_at_sensitivity(scores: &[f64], labels: &[bool], target: f64) -> Result<OperatingPoint> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 {
        return Err(Error::Undefined("operating point needs a positive".into()));
    }
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Usage(format!("sensitivity target {target} outside [0, 1]")));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    for (s, p, n) in descending_blocks(scores, labels) {
        tp += p;
        fp += n;
        let sens = tp as f64 / pos as f64;
        if tp > 0 && sens >= target {
            let tn = neg - fp;
            return Ok(OperatingPoint {
                threshold: s,
                sensitivity: sens,
                specificity: if neg == 0 { 1.0 } else { tn as f64 / neg as f64 },
                precision: tp as f64 / (tp + fp) as f64,
                accuracy: (tp + tn) as f64 / (pos + neg) as f64,
            });
        }
    }
    unreachable!("the lowest threshold reaches sensitivity 1")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub roc: Vec<RocPoint>,
    pub pr: Vec<PrPoint>,
}

/// One point per distinct threshold. Both curves start at threshold `+∞`
/// (ROC origin, PR at recall 0 with precision 1).
pub fn curve_points(scores: &[f64], labels: &[bool]) -> Result<Curves> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("curves need both classes".into()));
    }
    let mut roc = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let mut pr = vec![PrPoint {
        threshold: f64::INFINITY,
        recall: 0.0,
        precision: 1.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (s, p, n) in descending_blocks(scores, labels) {
        tp += p;
        fp += n;
        roc.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
        pr.push(PrPoint {
            threshold: s,
            recall: tp as f64 / pos as f64,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    Ok(Curves { roc, pr })
}

pub fn trapezoid_area(roc: &[RocPoint]) -> f64 {
    roc.windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroAverage {
    pub value: f64,
    pub excluded: usize,
}

/// Unweighted mean over the defined entries.
pub fn macro_average(values: &[Option<f64>]) -> Result<MacroAverage> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Undefined("no outcome has a defined metric".into()));
    }
    // running mean: exact when all entries are equal
    let value = defined
        .iter()
        .enumerate()
        .fold(0.0, |m, (k, v)| m + (v - m) / (k + 1) as f64);
    Ok(MacroAverage {
        value,
        excluded: values.len() - defined.len(),
    })
}

/// Mean and standard error of the mean over the defined entries.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: [f64; 4] = [0.9, 0.8, 0.7, 0.6];
    const L: [bool; 4] = [true, true, false, true];

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&S, &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 5], &[true, false, true, false, false]).unwrap(), 0.5);
        assert!((auroc(&S, &L).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(auroc(&S, &[true; 4]), Err(Error::Undefined(_))));
    }

    #[test]
    fn auprc_cases() {
        assert_eq!(auprc(&S, &[true, true, false, false]).unwrap(), 1.0);
        assert!((auprc(&S, &L).unwrap() - 2.75 / 3.0).abs() < 1e-15);
        assert!(matches!(auprc(&S, &[false; 4]), Err(Error::Undefined(_))));
    }

    #[test]
    fn operating_point_cases() {
        let op = metrics_at_sensitivity(&S, &L, 0.85).unwrap();
        assert_eq!(
            op,
            OperatingPoint {
                threshold: 0.6,
                sensitivity: 1.0,
                specificity: 0.0,
                precision: 0.75,
                accuracy: 0.75
            }
        );
        let op = metrics_at_sensitivity(&[0.1, 0.9, 0.5], &[true, false, true], 0.0).unwrap();
        assert_eq!(op.threshold, 0.5);
        assert!(op.sensitivity > 0.0);
        let op = metrics_at_sensitivity(&S, &[true, true, false, false], 0.85).unwrap();
        assert_eq!(op.specificity, 1.0);
    }

    #[test]
    fn macro_cases() {
        assert_eq!(macro_average(&[Some(0.4); 6]).unwrap().value, 0.4);
        let m = macro_average(&[Some(0.6), None, Some(0.8)]).unwrap();
        assert!((m.value - 0.7).abs() < 1e-15);
        assert_eq!(m.excluded, 1);
        assert!(macro_average(&[None, None]).is_err());
    }

    #[test]
    fn roc_points_and_area() {
        let s = [0.1, 0.4, 0.4, 0.35, 0.8, 0.7];
        let l = [false, true, false, true, true, false];
        let c = curve_points(&s, &l).unwrap();
        assert!(c.roc.len() <= s.len() + 1);
        for w in c.roc.windows(2) {
            assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
        assert_eq!(c.roc.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
        assert!((trapezoid_area(&c.roc) - auroc(&s, &l).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        assert_eq!(mean_and_stderr(&[0.5, 0.5, 0.5]), (0.5, 0.0));
        let (m, se) = mean_and_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - 1.0).abs() < 1e-15);
    }
}
