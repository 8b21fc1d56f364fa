//! Multi-cohort tabular data: schema, CSV ingestion, normalization and
//! stratified fold assignment.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Outcome column names, in file order.
pub const OUTCOMES: [&str; 6] = ["af", "arrest", "dvtpe", "aki", "transfusion", "intraop"];
pub const N_OUTCOMES: usize = OUTCOMES.len();

pub fn outcome_index(name: &str) -> Option<usize> {
    let name = name.strip_prefix("y_").unwrap_or(name);
    OUTCOMES.iter().position(|&o| o == name)
}

pub fn feature_name(f: usize) -> String {
    format!("f_{:04}", f + 1)
}

/// One row per case: group label, six binary outcomes and `F` features,
/// each with an observed mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    case_ids: Vec<String>,
    groups: Vec<usize>,
    n_groups: usize,
    labels: Vec<f64>,
    label_mask: Vec<bool>,
    features: Vec<f64>,
    feature_mask: Vec<bool>,
    n_features: usize,
}

impl Dataset {
    pub fn new(
        case_ids: Vec<String>,
        groups: Vec<usize>,
        labels: Vec<f64>,
        label_mask: Vec<bool>,
        features: Vec<f64>,
        feature_mask: Vec<bool>,
        n_features: usize,
    ) -> Result<Self> {
        let n = case_ids.len();
        if n == 0 {
            return Err(Error::Value("dataset has no rows".into()));
        }
        if groups.len() != n
            || labels.len() != n * N_OUTCOMES
            || label_mask.len() != n * N_OUTCOMES
            || features.len() != n * n_features
            || feature_mask.len() != n * n_features
        {
            return Err(Error::Value("row counts disagree across columns".into()));
        }
        let n_groups = groups.iter().max().map_or(0, |g| g + 1);
        let mut seen = vec![false; n_groups];
        groups.iter().for_each(|&g| seen[g] = true);
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Value(format!(
                "group indices must be dense in [0, {n_groups}); group {missing} is absent"
            )));
        }
        for (i, (&y, &m)) in labels.iter().zip(&label_mask).enumerate() {
            if m && y != 0.0 && y != 1.0 {
                return Err(Error::Value(format!(
                    "label {y} at row {} outcome {} is not 0/1",
                    i / N_OUTCOMES,
                    OUTCOMES[i % N_OUTCOMES]
                )));
            }
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Value("non-finite feature value".into()));
        }
        Ok(Self {
            case_ids,
            groups,
            n_groups,
            labels,
            label_mask,
            features,
            feature_mask,
            n_features,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.case_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn case_ids(&self) -> &[String] {
        &self.case_ids
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn feature_mask_row(&self, i: usize) -> &[bool] {
        &self.feature_mask[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn feature_observed(&self, i: usize, f: usize) -> bool {
        self.feature_mask[i * self.n_features + f]
    }

    pub fn label(&self, i: usize, c: usize) -> Option<f64> {
        let k = i * N_OUTCOMES + c;
        self.label_mask[k].then_some(self.labels[k])
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn label_mask(&self) -> &[bool] {
        &self.label_mask
    }

    /// Rows belonging to `group`, in file order.
    pub fn rows_of_group(&self, group: usize) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| self.groups[i] == group).collect()
    }

    /// Observed positive rate of outcome `c` over `rows`.
    pub fn positive_rate(&self, rows: &[usize], c: usize) -> Option<f64> {
        let (pos, obs) = rows.iter().fold((0usize, 0usize), |(p, o), &i| {
            match self.label(i, c) {
                Some(y) => (p + (y == 1.0) as usize, o + 1),
                None => (p, o),
            }
        });
        (obs > 0).then(|| pos as f64 / obs as f64)
    }

    /// Outcome with the lowest positive rate among `rows`.
    pub fn rarest_outcome(&self, rows: &[usize]) -> usize {
        (0..N_OUTCOMES)
            .min_by(|&a, &b| {
                let ra = self.positive_rate(rows, a).unwrap_or(f64::INFINITY);
                let rb = self.positive_rate(rows, b).unwrap_or(f64::INFINITY);
                ra.total_cmp(&rb)
            })
            .unwrap_or(0)
    }

    pub fn load_csv(path: impl AsRef<Path>, expected_features: Option<usize>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::read_csv(file, expected_features)
    }

    pub fn read_csv(reader: impl Read, expected_features: Option<usize>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut mandatory = vec!["case_id".to_string(), "group".to_string()];
        mandatory.extend(OUTCOMES.iter().map(|o| format!("y_{o}")));
        for (pos, name) in mandatory.iter().enumerate() {
            match header.get(pos) {
                Some(h) if h == name => {}
                _ if !header.contains(name) => {
                    return Err(Error::Schema(format!("missing mandatory column `{name}`")))
                }
                _ => {
                    return Err(Error::Schema(format!(
                        "column `{name}` must be at position {}",
                        pos + 1
                    )))
                }
            }
        }
        let n_features = header.len() - mandatory.len();
        for f in 0..n_features {
            let expected = feature_name(f);
            if header[mandatory.len() + f] != expected {
                return Err(Error::Schema(format!(
                    "expected feature column `{expected}`, found `{}`",
                    header[mandatory.len() + f]
                )));
            }
        }
        if let Some(want) = expected_features {
            if want != n_features {
                let name = if n_features < want {
                    feature_name(n_features)
                } else {
                    feature_name(want)
                };
                return Err(Error::Schema(format!(
                    "expected {want} feature columns, found {n_features} (first mismatch at `{name}`)"
                )));
            }
        }

        let mut case_ids = Vec::new();
        let mut groups = Vec::new();
        let mut labels = Vec::new();
        let mut label_mask = Vec::new();
        let mut features = Vec::new();
        let mut feature_mask = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = r + 1;
            case_ids.push(rec[0].to_string());
            let g: usize = rec[1].trim().parse().map_err(|_| Error::Parse {
                row,
                column: "group".into(),
                message: format!("`{}` is not a nonnegative integer", &rec[1]),
            })?;
            groups.push(g);
            for c in 0..N_OUTCOMES {
                let cell = rec[2 + c].trim();
                match cell {
                    "" => {
                        labels.push(0.0);
                        label_mask.push(false);
                    }
                    "0" => {
                        labels.push(0.0);
                        label_mask.push(true);
                    }
                    "1" => {
                        labels.push(1.0);
                        label_mask.push(true);
                    }
                    other => {
                        return Err(Error::Value(format!(
                            "row {row}, column y_{}: label `{other}` is not 0, 1 or empty",
                            OUTCOMES[c]
                        )))
                    }
                }
            }
            for f in 0..n_features {
                let cell = rec[mandatory.len() + f].trim();
                if cell.is_empty() {
                    features.push(0.0);
                    feature_mask.push(false);
                    continue;
                }
                let v: f64 = cell
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        row,
                        column: feature_name(f),
                        message: format!("`{cell}` is not a finite number"),
                    })?;
                features.push(v);
                feature_mask.push(true);
            }
        }
        Self::new(
            case_ids,
            groups,
            labels,
            label_mask,
            features,
            feature_mask,
            n_features,
        )
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["case_id".to_string(), "group".to_string()];
        header.extend(OUTCOMES.iter().map(|o| format!("y_{o}")));
        header.extend((0..self.n_features).map(feature_name));
        w.write_record(&header)?;
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for i in 0..self.n_rows() {
            rec.clear();
            rec.push(self.case_ids[i].clone());
            rec.push(self.groups[i].to_string());
            for c in 0..N_OUTCOMES {
                rec.push(match self.label(i, c) {
                    Some(y) => format!("{}", y as u8),
                    None => String::new(),
                });
            }
            for f in 0..self.n_features {
                let k = i * self.n_features + f;
                rec.push(if self.feature_mask[k] {
                    format!("{}", self.features[k])
                } else {
                    String::new()
                });
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path.as_ref())?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Per-feature location and scale fitted on observed entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Mean and population standard deviation of observed entries over `rows`.
///
/// Fully missing features fall back to mean 0; features without spread get
/// std 1.
pub fn fit_normalizer(ds: &Dataset, rows: &[usize]) -> Result<NormStats> {
    if rows.is_empty() {
        return Err(Error::Usage("cannot fit a normalizer on zero rows".into()));
    }
    let nf = ds.n_features();
    let mut count = vec![0usize; nf];
    let mut sum = vec![0.0; nf];
    for &i in rows {
        for f in 0..nf {
            if ds.feature_observed(i, f) {
                count[f] += 1;
                sum[f] += ds.feature_row(i)[f];
            }
        }
    }
    let mean: Vec<f64> = (0..nf)
        .map(|f| if count[f] > 0 { sum[f] / count[f] as f64 } else { 0.0 })
        .collect();
    let mut ss = vec![0.0; nf];
    for &i in rows {
        for f in 0..nf {
            if ds.feature_observed(i, f) {
                let d = ds.feature_row(i)[f] - mean[f];
                ss[f] += d * d;
            }
        }
    }
    let std = (0..nf)
        .map(|f| {
            if count[f] == 0 {
                return 1.0;
            }
            let s = (ss[f] / count[f] as f64).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    Ok(NormStats { mean, std })
}

/// Standardizes observed entries and writes exactly 0 into missing ones.
pub fn apply_normalizer(ds: &Dataset, stats: &NormStats) -> Result<Dataset> {
    let nf = ds.n_features();
    if stats.mean.len() != nf || stats.std.len() != nf {
        return Err(Error::Value(format!(
            "normalizer has {} features, dataset has {nf}",
            stats.mean.len()
        )));
    }
    let mut out = ds.clone();
    for (k, v) in out.features.iter_mut().enumerate() {
        let f = k % nf;
        *v = if ds.feature_mask[k] {
            (*v - stats.mean[f]) / stats.std[f]
        } else {
            0.0
        };
    }
    Ok(out)
}

/// Per-row fold index; `None` marks rows outside the target group, which are
/// always in the training pool.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub folds: Vec<Option<usize>>,
    pub k: usize,
}

impl FoldAssignment {
    pub fn test_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len())
            .filter(|&i| self.folds[i] == Some(fold))
            .collect()
    }

    /// Non-target rows plus target rows outside `test_fold`.
    pub fn train_rows(&self, test_fold: usize) -> Vec<usize> {
        (0..self.folds.len())
            .filter(|&i| self.folds[i] != Some(test_fold))
            .collect()
    }

    /// Fold indices with `-1` for train-always rows.
    pub fn as_signed(&self) -> Vec<i64> {
        self.folds
            .iter()
            .map(|f| f.map_or(-1, |v| v as i64))
            .collect()
    }
}

/// Splits the target group into `k` folds.
///
/// Positives of `strat_outcome` are dealt first, then negatives grouped by
/// the joint label pattern of the remaining outcomes, all round-robin from a
/// single counter. That keeps per-fold positive counts and per-fold sizes
/// within one of each other while spreading the other outcomes evenly.
pub fn stratified_folds(
    ds: &Dataset,
    k: usize,
    target_group: usize,
    strat_outcome: usize,
    seed: u64,
) -> Result<FoldAssignment> {
    if k == 0 {
        return Err(Error::Usage("fold count must be positive".into()));
    }
    let target = ds.rows_of_group(target_group);
    if target.len() < k {
        return Err(Error::Usage(format!(
            "target group {target_group} has {} rows, fewer than {k} folds",
            target.len()
        )));
    }
    let mut rng = rng::stream(seed, &[0x5742_4154]);
    let key = |i: usize| -> Vec<u8> {
        (0..N_OUTCOMES)
            .filter(|&c| c != strat_outcome)
            .map(|c| match ds.label(i, c) {
                None => 2,
                Some(y) => y as u8,
            })
            .collect()
    };
    let mut positives: Vec<usize> = target
        .iter()
        .copied()
        .filter(|&i| ds.label(i, strat_outcome) == Some(1.0))
        .collect();
    positives.shuffle(&mut rng);
    let mut strata: BTreeMap<Vec<u8>, Vec<usize>> = BTreeMap::new();
    for &i in &target {
        if ds.label(i, strat_outcome) != Some(1.0) {
            strata.entry(key(i)).or_default().push(i);
        }
    }
    let mut order = positives;
    for rows in strata.values_mut() {
        rows.shuffle(&mut rng);
        order.extend_from_slice(rows);
    }
    let mut folds = vec![None; ds.n_rows()];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = Some(pos % k);
    }
    Ok(FoldAssignment { folds, k })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(nf: usize) -> String {
        let mut h = "case_id,group,y_af,y_arrest,y_dvtpe,y_aki,y_transfusion,y_intraop".to_string();
        for f in 0..nf {
            h.push(',');
            h.push_str(&feature_name(f));
        }
        h
    }

    pub(crate) fn toy(groups: &[usize], labels: &[[u8; 6]], feats: &[Vec<Option<f64>>]) -> Dataset {
        let n = groups.len();
        let nf = feats[0].len();
        Dataset::new(
            (0..n).map(|i| format!("c{i}")).collect(),
            groups.to_vec(),
            labels.iter().flat_map(|r| r.iter().map(|&v| v as f64)).collect(),
            vec![true; n * 6],
            feats.iter().flat_map(|r| r.iter().map(|v| v.unwrap_or(0.0))).collect(),
            feats.iter().flat_map(|r| r.iter().map(Option::is_some)).collect(),
            nf,
        )
        .unwrap()
    }

    #[test]
    fn loads_well_formed_csv() {
        let text = format!(
            "{}\na,0,1,0,,0,1,0,1.5,\nb,1,0,0,0,1,0,0,,2\n",
            header(2)
        );
        let ds = Dataset::read_csv(text.as_bytes(), Some(2)).unwrap();
        assert_eq!(ds.n_rows(), 2);
        assert_eq!(ds.label(0, 2), None);
        assert_eq!(ds.label(0, 0), Some(1.0));
        assert!(ds.feature_observed(0, 0));
        assert!(!ds.feature_observed(0, 1));
        assert!(!ds.feature_observed(1, 0));
        assert_eq!(ds.feature_row(1)[1], 2.0);
    }

    #[test]
    fn missing_group_column_is_schema_error() {
        let text = "case_id,y_af,y_arrest,y_dvtpe,y_aki,y_transfusion,y_intraop,f_0001\n";
        let err = Dataset::read_csv(text.as_bytes(), None).unwrap_err();
        match err {
            Error::Schema(m) => assert!(m.contains("`group`"), "{m}"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn non_numeric_feature_cites_row_and_column() {
        let mut text = header(7);
        text.push_str("\na,0,0,0,0,0,0,0,1,2,3,4,5,6,7\nb,0,0,0,0,0,0,0,1,2,3,4,5,6,abc\n");
        match Dataset::read_csv(text.as_bytes(), None).unwrap_err() {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "f_0007");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn label_outside_binary_is_value_error() {
        let text = format!("{}\na,0,2,0,0,0,0,0,1\n", header(1));
        assert!(matches!(
            Dataset::read_csv(text.as_bytes(), None),
            Err(Error::Value(_))
        ));
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let ds = toy(
            &[0, 1, 0],
            &[[1, 0, 0, 0, 0, 0], [0, 1, 0, 0, 0, 1], [0, 0, 0, 0, 0, 0]],
            &[
                vec![Some(0.1), None],
                vec![Some(1.0 / 3.0), Some(-2.5e-17)],
                vec![None, Some(7.0)],
            ],
        );
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice(), Some(2)).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn normalizer_rules() {
        let ds = toy(
            &[0, 0, 0],
            &[[0; 6]; 3],
            &[
                vec![Some(1.0), Some(5.0), None],
                vec![Some(3.0), Some(5.0), None],
                vec![None, Some(5.0), None],
            ],
        );
        let s = fit_normalizer(&ds, &[0, 1, 2]).unwrap();
        assert_eq!(s.mean[0], 2.0);
        assert_eq!(s.std[0], 1.0);
        assert_eq!((s.mean[1], s.std[1]), (5.0, 1.0));
        assert_eq!((s.mean[2], s.std[2]), (0.0, 1.0));
        assert!(fit_normalizer(&ds, &[]).is_err());

        let stats = NormStats {
            mean: vec![2.0, 5.0, 0.0],
            std: vec![1.0, 1.0, 1.0],
        };
        let n = apply_normalizer(&ds, &stats).unwrap();
        assert_eq!(n.feature_row(1)[0], 1.0);
        assert_eq!(n.feature_row(2)[0], 0.0);
        assert_eq!(n.feature_row(0)[1], 0.0);
        assert!(!n.feature_observed(2, 0));
        let bad = NormStats {
            mean: vec![0.0],
            std: vec![1.0],
        };
        assert!(apply_normalizer(&ds, &bad).is_err());
    }

    fn with_arrest_positives(n_target: usize, positives: usize) -> Dataset {
        let mut groups = vec![0; n_target];
        groups.extend([1, 1, 2]);
        let labels: Vec<[u8; 6]> = (0..groups.len())
            .map(|i| {
                let mut r = [0u8; 6];
                r[1] = (i < positives) as u8;
                r[0] = (i % 3 == 0) as u8;
                r
            })
            .collect();
        let feats = vec![vec![Some(0.0)]; groups.len()];
        toy(&groups, &labels, &feats)
    }

    #[test]
    fn divisible_positives_one_per_fold() {
        let ds = with_arrest_positives(100, 5);
        let fa = stratified_folds(&ds, 5, 0, 1, 3).unwrap();
        for f in 0..5 {
            let pos = fa
                .test_rows(f)
                .iter()
                .filter(|&&i| ds.label(i, 1) == Some(1.0))
                .count();
            assert_eq!(pos, 1);
        }
    }

    #[test]
    fn uneven_positives_split_ceiling_floor() {
        let ds = with_arrest_positives(6502, 26);
        let fa = stratified_folds(&ds, 5, 0, 1, 11).unwrap();
        let mut counts: Vec<usize> = (0..5)
            .map(|f| {
                fa.test_rows(f)
                    .iter()
                    .filter(|&&i| ds.label(i, 1) == Some(1.0))
                    .count()
            })
            .collect();
        counts.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(counts, vec![6, 5, 5, 5, 5]);
        let sizes: Vec<usize> = (0..5).map(|f| fa.test_rows(f).len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn non_target_rows_train_always() {
        let ds = with_arrest_positives(20, 5);
        let fa = stratified_folds(&ds, 5, 0, 1, 0).unwrap();
        for i in 20..23 {
            assert_eq!(fa.folds[i], None);
        }
        assert_eq!(fa.as_signed()[21], -1);
        assert!(stratified_folds(&ds, 25, 0, 1, 0).is_err());
    }
}
