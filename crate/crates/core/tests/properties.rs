use proptest::prelude::*;
use surgvae::dataset::{stratified_folds, Dataset, N_OUTCOMES};
use surgvae::interpret::{integrated_gradients, normalize_importance, silhouette, top_k, LinearScorer};
use surgvae::losses::{self, Bandwidth};
use surgvae::metrics::{auprc, auroc, metrics_at_sensitivity};
use surgvae::Tensor;

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(prop_oneof![(0u8..5).prop_map(f64::from), -10.0..10.0f64], n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

fn matrix(rows: std::ops::Range<usize>, cols: usize) -> impl Strategy<Value = Tensor> {
    rows.prop_flat_map(move |n| {
        prop::collection::vec(-3.0..3.0f64, n * cols).prop_map(move |d| Tensor::matrix(n, cols, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn auroc_is_rank_based((s, l) in scored(), shift in -5.0..5.0f64) {
        let Ok(a) = auroc(&s, &l) else { return Ok(()) };
        prop_assert!((0.0..=1.0).contains(&a));
        // strictly increasing maps keep the ranking and the ties
        let moved: Vec<f64> = s.iter().map(|v| (v + shift).exp()).collect();
        prop_assert_eq!(auroc(&moved, &l).unwrap(), a);
        let flipped: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((auroc(&flipped, &l).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn auprc_is_rank_based((s, l) in scored()) {
        let Ok(ap) = auprc(&s, &l) else { return Ok(()) };
        prop_assert!(ap > 0.0 && ap <= 1.0);
        let moved: Vec<f64> = s.iter().map(|v| 3.0 * v - 1.0).collect();
        prop_assert_eq!(auprc(&moved, &l).unwrap(), ap);
    }

    #[test]
    fn operating_point_reaches_target((s, l) in scored(), target in 0.0..=1.0f64) {
        let Ok(op) = metrics_at_sensitivity(&s, &l, target) else { return Ok(()) };
        prop_assert!(op.sensitivity >= target);
        for v in [op.specificity, op.precision, op.accuracy] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn loss_terms_are_nonnegative(
        x in matrix(4..9, 3),
        seed in any::<u64>(),
        margin in 0.1..4.0f64,
    ) {
        let n = x.dims2().unwrap().0;
        let groups: Vec<usize> = (0..n).map(|i| (i + seed as usize) % 2).collect();
        let lv = x.map(|v| 0.5 * v).unwrap();
        let kld = losses::evaluate(&[&x, &lv], |g, i| losses::kld_loss(g, i[0], i[1])).unwrap();
        let mmd = losses::evaluate(&[&x], |g, i| Ok(losses::mmd_loss(g, i[0], &groups, Bandwidth::MEDIAN)?.node)).unwrap();
        let con = losses::evaluate(&[&x], |g, i| Ok(losses::contrastive_loss(g, i[0], &groups, margin)?.node)).unwrap();
        let rec = losses::evaluate(&[&x, &lv], |g, i| losses::recon_loss(g, i[0], i[1])).unwrap();
        prop_assert!(kld >= 0.0 && con >= 0.0 && rec >= 0.0);
        // the V-statistic is a squared RKHS norm
        prop_assert!(mmd >= -1e-12);
    }

    #[test]
    fn prediction_loss_is_nonnegative(
        logits in prop::collection::vec(-30.0..30.0f64, 12),
        labels in prop::collection::vec(any::<bool>(), 12),
        mask in prop::collection::vec(any::<bool>(), 12),
    ) {
        prop_assume!(mask.iter().any(|&m| m));
        let s = Tensor::matrix(2, 6, logits).unwrap();
        let y: Vec<f64> = labels.iter().map(|&b| f64::from(u8::from(b))).collect();
        let v = losses::evaluate(&[&s], |g, i| losses::prediction_loss(g, i[0], &y, &mask)).unwrap();
        prop_assert!(v >= 0.0 && v.is_finite());
    }

    #[test]
    fn importance_percentages_sum_to_100(rows in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 7), 1..6)) {
        let Ok(imp) = normalize_importance(&rows) else { return Ok(()) };
        prop_assert!((imp.percent.iter().sum::<f64>() - 100.0).abs() < 1e-6);
        prop_assert!(imp.percent.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn top_k_is_sorted_prefix(percent in prop::collection::vec(prop_oneof![Just(5.0), 0.0..100.0f64], 1..30), k in 0usize..40) {
        let top = top_k(&percent, k);
        prop_assert_eq!(top.len(), k.min(percent.len()));
        for w in top.windows(2) {
            prop_assert!(w[0].percent > w[1].percent || (w[0].percent == w[1].percent && w[0].index < w[1].index));
        }
        if let Some(last) = top.last() {
            let above = percent.iter().filter(|&&p| p > last.percent).count();
            prop_assert!(above < top.len());
        }
    }

    #[test]
    fn linear_ig_is_exact(
        w in prop::collection::vec(-4.0..4.0f64, 6),
        x in prop::collection::vec(-4.0..4.0f64, 6),
        b in prop::collection::vec(-4.0..4.0f64, 6),
        steps in 1usize..300,
    ) {
        let scorer = LinearScorer { weights: w.clone(), bias: 0.3 };
        let a = integrated_gradients(&scorer, &x, &b, steps).unwrap();
        for i in 0..6 {
            prop_assert!((a.values[i] - w[i] * (x[i] - b[i])).abs() < 1e-12);
        }
        prop_assert!(a.residual < 1e-12);
    }

    #[test]
    fn silhouette_is_bounded(points in matrix(3..20, 2), shift in 0usize..3) {
        let n = points.dims2().unwrap().0;
        let labels: Vec<usize> = (0..n).map(|i| (i + shift) % 3).collect();
        let s = silhouette(&points, &labels).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn folds_partition_the_target_group(
        groups in prop::collection::vec(0usize..3, 12..80),
        positives in prop::collection::vec(prop::bool::weighted(0.1), 80),
        k in 2usize..6,
        seed in any::<u64>(),
    ) {
        let mut groups = groups;
        groups[..3].copy_from_slice(&[0, 1, 2]);
        let n = groups.len();
        prop_assume!(groups.iter().filter(|&&g| g == 0).count() >= k);
        let mut labels = vec![0.0; n * N_OUTCOMES];
        for i in 0..n {
            labels[i * N_OUTCOMES + 1] = f64::from(u8::from(positives[i]));
        }
        let ds = Dataset::new(
            (0..n).map(|i| format!("c{i}")).collect(),
            groups.clone(),
            labels,
            vec![true; n * N_OUTCOMES],
            vec![0.0; n],
            vec![true; n],
            1,
        ).unwrap();
        let asg = stratified_folds(&ds, k, 0, 1, seed).unwrap();
        let mut counts = vec![0usize; k];
        let mut sizes = vec![0usize; k];
        for i in 0..n {
            match asg.folds[i] {
                Some(f) => {
                    prop_assert_eq!(groups[i], 0);
                    sizes[f] += 1;
                    counts[f] += usize::from(positives[i]);
                }
                None => prop_assert_ne!(groups[i], 0),
            }
        }
        prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}
