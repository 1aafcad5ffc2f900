use proptest::prelude::*;

use almauc::alm::mu_update;
use almauc::constraint::{q_values, variant_penalties, VariantPenalties};
use almauc::data::{gen_gaussians, stratified_splits, subsample_to_ratio, Covariance};
use almauc::experiments::{leaderboard_order, Candidate, LeaderboardEntry, Stage};
use almauc::alm::PenaltyMode;
use almauc::losses::{loss_and_gradient, LossKind, LossSpec};
use almauc::metrics::{
    accuracy, auc_from_labels, auc_mann_whitney, auc_trapezoid, ensemble_logits, fpr_at_tpr, multiclass_error_at_tpr,
    roc_from_groups,
};
use almauc::netcore::{softmax_rows, Head, Matrix, Mlp};

fn scores(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 1..max_len)
}

/// Scores on a coarse grid so ties occur.
fn tied_scores(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0i32..8).prop_map(|v| v as f64 * 0.5), 1..max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn q_zero_iff_margin_met(pos in scores(20), neg in scores(20), delta in 0.0f64..1.0) {
        let q = q_values(&pos, &neg, delta);
        let min_p = pos.iter().copied().fold(f64::INFINITY, f64::min);
        let max_n = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(q.iter().all(|&v| v == 0.0), min_p - max_n >= delta);
        prop_assert!(q.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn q_matches_brute_force(pos in scores(64), neg in scores(64), delta in 0.0f64..1.0) {
        let q = q_values(&pos, &neg, delta);
        for (j, p) in pos.iter().enumerate() {
            let brute: f64 = neg.iter().map(|n| (n - p + delta).max(0.0)).sum();
            prop_assert!((q[j] - brute).abs() <= 1e-12 * brute.max(1.0));
        }
    }

    #[test]
    fn q_shift_and_permutation_invariant(pos in scores(16), neg in scores(16), delta in 0.0f64..1.0, c in -3.0f64..3.0) {
        let q = q_values(&pos, &neg, delta);
        // dyadic shift keeps the sums exact enough for a tight tolerance
        let c = (c * 8.0).round() / 8.0;
        let shifted = q_values(
            &pos.iter().map(|v| v + c).collect::<Vec<_>>(),
            &neg.iter().map(|v| v + c).collect::<Vec<_>>(),
            delta,
        );
        for (a, b) in q.iter().zip(&shifted) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        let mut rev_pos = pos.clone();
        rev_pos.reverse();
        let mut rev_neg = neg.clone();
        rev_neg.reverse();
        let rq = q_values(&rev_pos, &rev_neg, delta);
        for (j, v) in rq.iter().enumerate() {
            prop_assert!((v - q[pos.len() - 1 - j]).abs() <= 1e-12 * v.max(1.0));
        }
    }

    #[test]
    fn pair_mass_shared_by_groupings(pos in scores(12), neg in scores(12), delta in 0.0f64..1.0) {
        let v = variant_penalties(&pos, &neg, delta);
        let a: f64 = v.per_positive.iter().sum();
        let b: f64 = v.per_negative.iter().sum();
        let c: f64 = v.per_pair.iter().sum();
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0) && (a - c).abs() <= 1e-9 * a.max(1.0));
        // squares of grouped sums dominate squares of single pairs
        let cost = |g: &[f64]| VariantPenalties::cost(g, 1.0, 0.0, pos.len(), neg.len());
        prop_assert!(cost(&v.per_positive) + 1e-12 >= cost(&v.per_pair));
    }

    #[test]
    fn auc_estimators_agree(pos in tied_scores(30), neg in tied_scores(30)) {
        let mw = auc_mann_whitney(&pos, &neg).unwrap();
        let tr = auc_trapezoid(&roc_from_groups(&pos, &neg).unwrap());
        prop_assert!((mw - tr).abs() <= 1e-12);
    }

    #[test]
    fn auc_invariant_under_increasing_transform(pos in scores(30), neg in scores(30)) {
        let f = |v: &f64| (v * 0.7).exp() + v;
        let a = auc_mann_whitney(&pos, &neg).unwrap();
        let b = auc_mann_whitney(&pos.iter().map(f).collect::<Vec<_>>(), &neg.iter().map(f).collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn flipped_labels_complement(values in prop::collection::btree_set(-10_000i32..10_000, 2..40), cut in 1usize..39) {
        let s: Vec<f64> = values.iter().map(|&v| v as f64 / 100.0).collect();
        let cut = cut.min(s.len() - 1);
        // interleave labels so both classes are present
        let labels: Vec<bool> = (0..s.len()).map(|i| (i * 7 + cut) % s.len() < cut).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let sum = auc_from_labels(&s, &labels).unwrap() + auc_from_labels(&s, &flipped).unwrap();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn fpr_non_decreasing_in_target(pos in tied_scores(30), neg in tied_scores(30), a in 0.01f64..1.0, b in 0.01f64..1.0) {
        let curve = roc_from_groups(&pos, &neg).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(fpr_at_tpr(&curve, lo).unwrap() <= fpr_at_tpr(&curve, hi).unwrap());
    }

    #[test]
    fn mu_update_is_exact(mu in 1e-8f64..1.0, rho in 1.01f64..4.0, cur in 0.0f64..1.0, prev in 0.0f64..1.0) {
        let next = mu_update(mu, rho, cur, prev, 1e-4);
        prop_assert!(next == mu || next == mu * rho);
        prop_assert_eq!(next == mu * rho, cur < prev - 1e-4);
    }

    #[test]
    fn losses_permutation_invariant(z in prop::collection::vec(-4.0f64..4.0, 4..12), shift in 1usize..11) {
        let n = z.len();
        let y: Vec<usize> = (0..n).map(|i| usize::from(i % 3 == 0)).collect();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let zp: Vec<f64> = perm.iter().map(|&i| z[i]).collect();
        let yp: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
        for kind in [
            LossKind::Bce,
            LossKind::Wbce { w: 3.0 },
            LossKind::CbBce { beta: 0.99 },
            LossKind::SFl { gamma: 2.0 },
            LossKind::AFl { gamma: 1.0, m: 0.5 },
            LossKind::SMl { m: 1.0 },
            LossKind::AMl { m: 2.0 },
            LossKind::Ldam { s: 0.5 },
            LossKind::Mbauc { margin: 0.5 },
        ] {
            let spec = LossSpec::new(kind, vec![40, 7]).unwrap();
            let a = loss_and_gradient(&spec, &Matrix::column(&z), &y).unwrap();
            let b = loss_and_gradient(&spec, &Matrix::column(&zp), &yp).unwrap();
            prop_assert!((a.loss - b.loss).abs() <= 1e-12 * a.loss.abs().max(1.0), "{:?}", kind);
            for (k, &i) in perm.iter().enumerate() {
                prop_assert!((a.grad.as_slice()[i] - b.grad.as_slice()[k]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn loss_reductions(z in prop::collection::vec(-4.0f64..4.0, 2..12)) {
        let y: Vec<usize> = (0..z.len()).map(|i| usize::from(i % 2 == 0)).collect();
        let x = Matrix::column(&z);
        let eval = |k| loss_and_gradient(&LossSpec::new(k, vec![30, 6]).unwrap(), &x, &y).unwrap().loss;
        let bce = eval(LossKind::Bce);
        let wbce = eval(LossKind::Wbce { w: 1.0 });
        let aml = eval(LossKind::AMl { m: 0.0 });
        let cb = eval(LossKind::CbBce { beta: 1e-12 });
        prop_assert!((wbce - bce).abs() <= 1e-12);
        prop_assert!((aml - bce).abs() <= 1e-12);
        prop_assert!((cb - bce).abs() <= 1e-9);
    }

    #[test]
    fn softmax_rows_are_distributions(z in prop::collection::vec(-30.0f64..30.0, 3..30)) {
        let rows = z.len() / 3;
        let m = Matrix::from_vec(rows, 3, z[..rows * 3].to_vec()).unwrap();
        let p = softmax_rows(&m);
        for r in p.iter_rows() {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn ensemble_is_elementwise_mean(a in prop::collection::vec(-5.0f64..5.0, 6), b in prop::collection::vec(-5.0f64..5.0, 6)) {
        let ma = Matrix::from_vec(3, 2, a.clone()).unwrap();
        let mb = Matrix::from_vec(3, 2, b.clone()).unwrap();
        let e = ensemble_logits(&[ma, mb]).unwrap();
        for i in 0..6 {
            prop_assert!((e.as_slice()[i] - (a[i] + b[i]) / 2.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn leaderboard_order_is_total(metrics in prop::collection::vec(0usize..4, 2..12), seed in 0u64..1000) {
        let entries: Vec<LeaderboardEntry> = metrics
            .iter()
            .enumerate()
            .map(|(i, &m)| LeaderboardEntry {
                stage: Stage::MuRho,
                candidate: Candidate {
                    loss: LossKind::Bce,
                    penalty_mode: PenaltyMode::Alm,
                    mu0: [1e-7, 1e-6, 1e-5, 1e-4, 1e-3][i % 5],
                    rho: if i / 5 % 2 == 0 { 2.0 } else { 3.0 },
                    delta: [0.1, 0.25][i / 10 % 2],
                },
                val_metric: m as f64 / 4.0,
            })
            .collect();
        let mut a = entries.clone();
        a.sort_by(leaderboard_order);
        let mut b = entries;
        let k = (seed as usize) % b.len();
        b.rotate_left(k);
        b.sort_by(leaderboard_order);
        prop_assert_eq!(&a, &b);
        for w in a.windows(2) {
            prop_assert!(w[0].val_metric >= w[1].val_metric);
        }
    }

    #[test]
    fn subsampling_keeps_features(seed in 0u64..500, ratio in 1.0f64..20.0) {
        let cov = vec![Covariance::Diagonal(vec![1.0, 1.0]); 2];
        let d = gen_gaussians(&[120, 120], &[vec![0.0, 0.0], vec![1.0, 1.0]], &cov, seed).unwrap();
        let s = subsample_to_ratio(&d, 1, ratio, seed).unwrap();
        for sample in s.samples() {
            let orig = d.samples().iter().find(|o| o.id == sample.id).unwrap();
            prop_assert_eq!(orig, sample);
        }
        prop_assert_eq!(s.class_counts()[0], 120);
    }

    #[test]
    fn stratified_fractions(seed in 0u64..500, n0 in 10usize..80, n1 in 3usize..20, fraction in 0.3f64..0.9) {
        let cov = vec![Covariance::Diagonal(vec![1.0]); 2];
        let d = gen_gaussians(&[n0, n1], &[vec![0.0], vec![1.0]], &cov, seed).unwrap();
        match stratified_splits(&d, 2, fraction, seed) {
            Ok(splits) => {
                for s in splits {
                    for (c, &n) in d.class_counts().iter().enumerate() {
                        let got = s.train.class_counts()[c] as f64;
                        prop_assert!((got - fraction * n as f64).abs() <= 1.0);
                        prop_assert_eq!(s.train.class_counts()[c] + s.validation.class_counts()[c], n);
                    }
                }
            }
            Err(_) => prop_assert!(n1 < 3 || (fraction * n1 as f64).round() as usize >= n1),
        }
    }

    #[test]
    fn relu_net_positively_homogeneous(c in 0.1f64..10.0, x in prop::collection::vec(-2.0f64..2.0, 3), seed in 0u64..100) {
        let mut net = Mlp::new(3, &[5, 4], 2, Head::IdentityLogits, seed).unwrap();
        let mut params = net.params();
        // zero the biases: each layer is weights then bias
        let mut offset = 0;
        let dims: Vec<(usize, usize)> = net.layers().iter().map(|l| (l.in_dim, l.out_dim)).collect();
        for (i, o) in dims {
            offset += i * o;
            params[offset..offset + o].iter_mut().for_each(|b| *b = 0.0);
            offset += o;
        }
        net.set_params(&params).unwrap();
        let a = net.logits(&Matrix::from_vec(1, 3, x.clone()).unwrap()).unwrap();
        let b = net.logits(&Matrix::from_vec(1, 3, x.iter().map(|v| v * c).collect()).unwrap()).unwrap();
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((u * c - v).abs() <= 1e-10 * v.abs().max(1.0));
        }
        let again = net.logits(&Matrix::from_vec(1, 3, x).unwrap()).unwrap();
        prop_assert_eq!(a, again);
    }

    #[test]
    fn multiclass_error_at_zero_target_is_argmax(z in prop::collection::vec(-3.0f64..3.0, 24)) {
        let logits = Matrix::from_vec(8, 3, z).unwrap();
        let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();
        let e = multiclass_error_at_tpr(&logits, &labels, 2, 0.0).unwrap();
        // argmax over classes 0 and 1 on the non-critical samples
        let mut wrong = 0;
        let mut total = 0;
        for (r, &l) in labels.iter().enumerate() {
            if l == 2 {
                continue;
            }
            total += 1;
            let pred = if logits.get(r, 1) > logits.get(r, 0) { 1 } else { 0 };
            wrong += usize::from(pred != l);
        }
        prop_assert!((e.error - wrong as f64 / total as f64).abs() <= 1e-12);
        let _ = accuracy(&logits, &labels).unwrap();
    }
}
