mod common;

use common::*;
use ndarray::{array, Array2, Axis};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use rcl_core::losses::*;

fn batch(emb: Array2<f64>, labels: Vec<usize>) -> EmbeddingBatch {
    EmbeddingBatch::new(emb, labels, true).unwrap()
}

fn priors_of(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    counts.iter().map(|&n| n as f64 / total as f64).collect()
}

#[test]
fn oracle_primitives_are_double_double() {
    use twofloat::consts::{E, LN_10};
    assert!(to_f64((exp(t(1.0)) - E).abs()) < 1e-29);
    assert!(to_f64((ln(t(10.0)) - LN_10).abs()) < 1e-29);
    for x in [-20.0, -3.3, 0.01, 2.5, 15.0] {
        assert!(to_f64((ln(exp(t(x))) - x).abs()) < 1e-28);
    }
    let (a, b) = (t(1.0) / 3.0 + 1e-20, t(7.0).sqrt());
    assert!(to_f64((div(a, b) * b - a).abs()) < 1e-31);
}

#[test]
fn log_sum_exp_examples() {
    assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(
        log_sum_exp(&[1000.0, 1000.0]).unwrap(),
        1000.0 + std::f64::consts::LN_2
    );
    assert_eq!(log_sum_exp(&[-3.5]).unwrap(), -3.5);
    assert!(log_sum_exp(&[]).is_err());
}

#[test]
fn classifier_losses_match_oracle_and_finite_differences() {
    let mut r = rng(11);
    for case in 0..60 {
        let l = r.gen_range(2..7);
        let f: Vec<f64> = (0..l).map(|_| r.gen_range(-6.0..6.0)).collect();
        let y = r.gen_range(0..l);
        let counts = random_counts(&mut r, l, 1000);
        let priors = priors_of(&counts);
        let tau = r.gen_range(0.0..2.0);
        let cases: [(&str, (f64, Vec<f64>), Vec<f64>); 3] = [
            ("ce", ce_loss(&f, y).unwrap(), no_shift(l)),
            (
                "balanced",
                balanced_softmax_loss(&f, y, &counts).unwrap(),
                count_shift(&counts),
            ),
            (
                "logit-adjusted",
                logit_adjusted_loss(&f, y, &priors, tau).unwrap(),
                prior_shift(&priors, tau),
            ),
        ];
        for (name, (loss, grad), shift) in cases {
            let exact = to_f64(ce_oracle(&flat_tf(&f), y, &shift));
            assert!(
                (loss - exact).abs() <= 1e-13 * exact.abs().max(1e-3),
                "{name} case {case}: {loss} vs {exact}"
            );
            assert!(loss > 0.0);
            let fd = fd_gradient(&f, FD_STEP, |x| ce_oracle(x, y, &shift));
            let err = max_rel_err(&grad, &fd);
            assert!(err <= 1e-5, "{name} case {case}: gradient rel err {err:e}");
        }
    }
}

#[test]
fn ce_confident_prediction() {
    let (l, g) = ce_loss(&[10.0, -10.0], 0).unwrap();
    let exact = to_f64(ce_oracle(&[t(10.0), t(-10.0)], 0, &[0.0, 0.0]));
    assert!((l - exact).abs() / exact < 1e-14);
    assert!((l - 2.061e-9).abs() < 1e-12);
    assert!((g[0] + 2.061e-9).abs() < 1e-12 && (g[1] - 2.061e-9).abs() < 1e-12);
}

#[test]
fn identity_chains() {
    let mut r = rng(12);
    for _ in 0..100 {
        let l = r.gen_range(2..8);
        let f: Vec<f64> = (0..l).map(|_| r.gen_range(-10.0..10.0)).collect();
        let y = r.gen_range(0..l);
        let counts = random_counts(&mut r, l, 1000);
        let (bs, gbs) = balanced_softmax_loss(&f, y, &counts).unwrap();
        let (la, gla) = logit_adjusted_loss(&f, y, &priors_of(&counts), 1.0).unwrap();
        assert!((bs - la).abs() <= 1e-12, "{bs} vs {la}");
        assert!(max_abs_diff(&gbs, &gla) <= 1e-12);
        let c = r.gen_range(1..500);
        let (eq, geq) = balanced_softmax_loss(&f, y, &vec![c; l]).unwrap();
        let (ce, gce) = ce_loss(&f, y).unwrap();
        assert!((eq - ce).abs() <= 1e-12);
        assert!(max_abs_diff(&geq, &gce) <= 1e-12);
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn classifier_losses_are_shift_invariant(
        f in prop::collection::vec(-20.0f64..20.0, 2..8),
        c in -50.0f64..50.0,
        ysel in 0usize..100,
        tau in 0.0f64..2.0,
    ) {
        let l = f.len();
        let y = ysel % l;
        let shifted: Vec<f64> = f.iter().map(|v| v + c).collect();
        let counts: Vec<usize> = (0..l).map(|i| 1 + 37 * i).collect();
        let priors = priors_of(&counts);
        let pairs = [
            (ce_loss(&f, y).unwrap().0, ce_loss(&shifted, y).unwrap().0),
            (
                balanced_softmax_loss(&f, y, &counts).unwrap().0,
                balanced_softmax_loss(&shifted, y, &counts).unwrap().0,
            ),
            (
                logit_adjusted_loss(&f, y, &priors, tau).unwrap().0,
                logit_adjusted_loss(&shifted, y, &priors, tau).unwrap().0,
            ),
        ];
        for (a, b) in pairs {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{} vs {}", a, b);
            prop_assert!(a > 0.0);
        }
    }

    #[test]
    fn contrastive_losses_are_permutation_equivariant(seed in 0u64..1000) {
        let mut r = rng(seed);
        let n = r.gen_range(3..10);
        let emb = random_unit_rows(&mut r, n, 4);
        let labels = random_labels(&mut r, n, 3, true);
        let protos = Prototypes::new(random_unit_rows(&mut r, 3, 4)).unwrap();
        let counts = random_counts(&mut r, 3, 1000);
        let map = CompressionMap::new(vec![1.0, 0.005, 0.3]).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let pe = emb.select(Axis(0), &perm);
        let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let (b, pb) = (batch(emb, labels), batch(pe, pl));

        let check = |l0: f64, g0: &Array2<f64>, l1: f64, g1: &Array2<f64>| -> Result<(), TestCaseError> {
            prop_assert!((l0 - l1).abs() <= 1e-12 * l0.abs().max(1.0));
            let moved = g0.select(Axis(0), &perm);
            for (x, y) in moved.iter().zip(g1) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            Ok(())
        };
        if b.labels.iter().any(|&y| b.labels.iter().filter(|&&l| l == y).count() > 1) {
            let (l0, g0) = scl_loss(&b, 0.5).unwrap();
            let (l1, g1) = scl_loss(&pb, 0.5).unwrap();
            check(l0, &g0, l1, &g1)?;
            let (l0, g0) = rcl_loss(&b, &counts, 0.5).unwrap();
            let (l1, g1) = rcl_loss(&pb, &counts, 0.5).unwrap();
            check(l0, &g0, l1, &g1)?;
        }
        let (l0, g0, p0) = bcl_loss(&b, &protos, 0.5).unwrap();
        let (l1, g1, p1) = bcl_loss(&pb, &protos, 0.5).unwrap();
        check(l0, &g0, l1, &g1)?;
        for (x, y) in p0.iter().zip(&p1) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        let (l0, g0, _) = bcl_rcl_loss(&b, &protos, &counts, &map, 0.5).unwrap();
        let (l1, g1, _) = bcl_rcl_loss(&pb, &protos, &counts, &map, 0.5).unwrap();
        check(l0, &g0, l1, &g1)?;
    }
}

#[test]
fn scl_three_point_example() {
    let b = batch(array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![0, 0, 1]);
    let (loss, _) = scl_loss(&b, 1.0).unwrap();
    let exact = contrastive_oracle(&rows_tf(&b.embeddings), &b.labels, None, 2, 1.0, &Family::scl())
        .unwrap();
    assert!((loss - to_f64(exact)).abs() <= 1e-12);
    // Both class-0 anchors: -ln(e / (e + 1)); the class-1 anchor has no positive.
    assert!((loss - (-1.0f64).exp().ln_1p()).abs() <= 1e-15);
}

#[test]
fn rcl_head_tail_example() {
    let b = batch(array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![0, 0, 1]);
    let emb = rows_tf(&b.embeddings);
    let (loss, _) = rcl_loss(&b, &[100, 1], 1.0).unwrap();
    let exact = contrastive_oracle(&emb, &b.labels, None, 2, 1.0, &Family::rcl(&[100, 1])).unwrap();
    assert!((loss - to_f64(exact)).abs() <= 1e-12);
    // The only contributing anchors belong to the head class; the tail
    // competitor is down-weighted by n_tail / n_head.
    let equal = scl_loss(&b, 1.0).unwrap().0;
    assert!(loss < equal, "{loss} !< {equal}");
    assert!((loss - (1.0 / (100.0 * std::f64::consts::E)).ln_1p()).abs() <= 1e-15);

    // Reversed frequencies: the same anchors now face a head competitor.
    let (rev, _) = rcl_loss(&b, &[1, 100], 1.0).unwrap();
    assert!(rev > equal);
}

#[test]
fn bcl_two_point_example() {
    let b = batch(array![[1.0, 0.0], [0.0, 1.0]], vec![0, 1]);
    let protos = Prototypes::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
    let (loss, _, _) = bcl_loss(&b, &protos, 1.0).unwrap();
    let exact = contrastive_oracle(
        &rows_tf(&b.embeddings),
        &b.labels,
        Some(&rows_tf(&protos.centers)),
        2,
        1.0,
        &Family::bcl(),
    )
    .unwrap();
    assert!((loss - to_f64(exact)).abs() <= 1e-12);
    // Each anchor: positive is its own prototype (s = 1); the other class
    // contributes the mean of two zero-similarity terms.
    let e = std::f64::consts::E;
    assert!((loss - ((e + 1.0) / e).ln()).abs() <= 1e-15);
}

#[test]
fn bcl_singleton_is_zero() {
    let b = batch(array![[0.6, 0.8]], vec![0]);
    let protos = Prototypes::new(array![[0.6, 0.8]]).unwrap();
    let (loss, g, gp) = bcl_loss(&b, &protos, 1.0).unwrap();
    assert_eq!(loss, 0.0);
    assert!(g.iter().chain(&gp).all(|&v| v == 0.0));
}

#[test]
fn reductions_are_exact() {
    let mut r = rng(13);
    for _ in 0..50 {
        let n = r.gen_range(2..16);
        let l = r.gen_range(2..5);
        let b = batch(random_unit_rows(&mut r, n, 5), random_labels(&mut r, n, l, false));
        let c = r.gen_range(1..1000);
        let (s, gs) = scl_loss(&b, 0.3).unwrap();
        let (rc, grc) = rcl_loss(&b, &vec![c; l], 0.3).unwrap();
        assert_eq!(s.to_bits(), rc.to_bits());
        assert_eq!(gs, grc);

        let protos = Prototypes::new(random_unit_rows(&mut r, l, 5)).unwrap();
        let (bl, gb, gpb) = bcl_loss(&b, &protos, 0.3).unwrap();
        let (br, gbr, gpbr) =
            bcl_rcl_loss(&b, &protos, &vec![c; l], &CompressionMap::identity(l), 0.3).unwrap();
        assert_eq!(bl.to_bits(), br.to_bits());
        assert_eq!(gb, gbr);
        assert_eq!(gpb, gpbr);
    }
}

#[test]
fn contrastive_losses_match_brute_force_oracle() {
    let mut r = rng(14);
    for case in 0..200 {
        let n = r.gen_range(2..=6);
        let l = r.gen_range(2..4);
        let k = r.gen_range(2..5);
        let temp = [0.1, 0.5, 1.0][case % 3];
        let emb = random_unit_rows(&mut r, n, k);
        let labels = random_labels(&mut r, n, l, true);
        let protos = Prototypes::new(random_unit_rows(&mut r, l, k)).unwrap();
        let counts = random_counts(&mut r, l, 1000);
        let factors: Vec<f64> = (0..l).map(|_| [1.0, 0.005, 0.4][r.gen_range(0..3)]).collect();
        let map = CompressionMap::new(factors.clone()).unwrap();
        let b = batch(emb, labels);
        let (e, p) = (rows_tf(&b.embeddings), rows_tf(&protos.centers));
        let close = |name: &str, got: f64, exact: Option<T>| {
            let exact = to_f64(exact.expect("oracle has anchors"));
            assert!(
                (got - exact).abs() <= 1e-10 * exact.abs().max(1.0),
                "{name} case {case}: {got} vs {exact}"
            );
        };
        let has_pos = b.labels.iter().any(|&y| b.labels.iter().filter(|&&z| z == y).count() > 1);
        if has_pos {
            close("scl", scl_loss(&b, temp).unwrap().0, contrastive_oracle(&e, &b.labels, None, l, temp, &Family::scl()));
            close(
                "rcl",
                rcl_loss(&b, &counts, temp).unwrap().0,
                contrastive_oracle(&e, &b.labels, None, l, temp, &Family::rcl(&counts)),
            );
        }
        close(
            "bcl",
            bcl_loss(&b, &protos, temp).unwrap().0,
            contrastive_oracle(&e, &b.labels, Some(&p), l, temp, &Family::bcl()),
        );
        close(
            "bcl+rcl",
            bcl_rcl_loss(&b, &protos, &counts, &map, temp).unwrap().0,
            contrastive_oracle(&e, &b.labels, Some(&p), l, temp, &Family::bcl_rcl(&counts, &factors)),
        );
    }
}

#[test]
fn strict_normalizer_matches_oracle() {
    let mut r = rng(15);
    for _ in 0..30 {
        let n = r.gen_range(3..=6);
        let emb = random_unit_rows(&mut r, n, 3);
        let labels = random_labels(&mut r, n, 2, false);
        let counts = random_counts(&mut r, 2, 100);
        let protos = random_unit_rows(&mut r, 2, 3);
        for with_protos in [false, true] {
            let params = ContrastiveParams {
                class_counts: Some(&counts),
                class_averaging: with_protos,
                strict_normalizer: true,
                ..ContrastiveParams::plain(0.7)
            };
            let out = contrastive_loss(emb.view(), &labels, with_protos.then(|| protos.view()), 2, &params)
                .unwrap();
            let fam = Family {
                counts: Some(counts.clone()),
                averaging: with_protos,
                factors: None,
                strict: true,
            };
            let p = rows_tf(&protos);
            let exact = contrastive_oracle(
                &rows_tf(&emb),
                &labels,
                with_protos.then_some(p.as_slice()),
                2,
                0.7,
                &fam,
            )
            .unwrap();
            assert!((out.loss - to_f64(exact)).abs() <= 1e-12);
        }
    }
}

/// Finite differences of the oracle with respect to embeddings and (when
/// used) prototypes, against the engine's analytic gradients.
fn check_contrastive_gradient(
    emb: &Array2<f64>,
    labels: &[usize],
    protos: Option<&Array2<f64>>,
    num_classes: usize,
    params: &ContrastiveParams<'_>,
    fam: &Family,
) {
    let out = contrastive_loss(emb.view(), labels, protos.map(|p| p.view()), num_classes, params).unwrap();
    let (n, k) = emb.dim();
    let mut x: Vec<f64> = emb.iter().copied().collect();
    if let Some(p) = protos {
        x.extend(p.iter());
    }
    let fd = fd_gradient(&x, FD_STEP, |v| {
        let e = unflatten(&v[..n * k], k);
        let p = protos.map(|_| unflatten(&v[n * k..], k));
        contrastive_oracle(&e, labels, p.as_deref(), num_classes, params.temperature, fam).unwrap()
    });
    let mut analytic: Vec<f64> = out.grad_embeddings.iter().copied().collect();
    if let Some(gp) = &out.grad_prototypes {
        analytic.extend(gp.iter());
    }
    let err = max_rel_err(&analytic, &fd);
    assert!(err <= 1e-5, "gradient rel err {err:e} for {fam:?}");
}

#[test]
fn contrastive_gradients_match_finite_differences() {
    let mut r = rng(16);
    for case in 0..12 {
        let n = 8;
        let l = 3;
        let temp = if case % 2 == 0 { 1.0 } else { 0.2 };
        let emb = random_unit_rows(&mut r, n, 4);
        let labels = random_labels(&mut r, n, l, false);
        let protos = random_unit_rows(&mut r, l, 4);
        let counts = random_counts(&mut r, l, 1000);
        let factors = vec![1.0, 0.005, 1.0];
        let map = CompressionMap::new(factors.clone()).unwrap();

        let plain = ContrastiveParams::plain(temp);
        check_contrastive_gradient(&emb, &labels, None, l, &plain, &Family::scl());
        let rcl = ContrastiveParams {
            class_counts: Some(&counts),
            ..plain
        };
        check_contrastive_gradient(&emb, &labels, None, l, &rcl, &Family::rcl(&counts));
        let bcl = ContrastiveParams {
            class_averaging: true,
            ..plain
        };
        check_contrastive_gradient(&emb, &labels, Some(&protos), l, &bcl, &Family::bcl());
        let both = ContrastiveParams {
            class_counts: Some(&counts),
            class_averaging: true,
            compression: Some(&map),
            ..plain
        };
        check_contrastive_gradient(
            &emb,
            &labels,
            Some(&protos),
            l,
            &both,
            &Family::bcl_rcl(&counts, &factors),
        );
    }
}

#[test]
fn named_losses_agree_with_engine_gradients() {
    let mut r = rng(17);
    let emb = random_unit_rows(&mut r, 6, 3);
    let labels = vec![0, 1, 0, 2, 1, 2];
    let protos = Prototypes::new(random_unit_rows(&mut r, 3, 3)).unwrap();
    let counts = [500, 20, 3];
    let map = CompressionMap::new(vec![0.005, 1.0, 1.0]).unwrap();
    let b = batch(emb.clone(), labels.clone());
    let (_, g, gp) = bcl_rcl_loss(&b, &protos, &counts, &map, 0.1).unwrap();
    let out = contrastive_loss(
        emb.view(),
        &labels,
        Some(protos.centers.view()),
        3,
        &ContrastiveParams {
            class_counts: Some(&counts),
            class_averaging: true,
            compression: Some(&map),
            ..ContrastiveParams::plain(0.1)
        },
    )
    .unwrap();
    assert_eq!(g, out.grad_embeddings);
    assert_eq!(Some(gp), out.grad_prototypes);
}

#[test]
fn rcl_equals_pairwise_margin_form() {
    let mut r = rng(18);
    for _ in 0..200 {
        let n = r.gen_range(4..=32);
        let l = [2, 3, 5][r.gen_range(0..3)];
        let temp = [0.1, 1.0][r.gen_range(0..2)];
        let b = batch(random_unit_rows(&mut r, n, 6), random_labels(&mut r, n, l, false));
        let counts = random_counts(&mut r, l, 1000);
        let a = rcl_loss(&b, &counts, temp).unwrap().0;
        let m = rcl_pairwise_margin_form(&b, &counts, temp).unwrap();
        assert!((a - m).abs() <= 1e-9 * a.abs(), "{a} vs {m}");
    }
}

#[test]
fn all_losses_are_non_negative() {
    let mut r = rng(19);
    for _ in 0..100 {
        let n = r.gen_range(2..12);
        let l = r.gen_range(1..4);
        let b = batch(random_unit_rows(&mut r, n, 3), random_labels(&mut r, n, l, false));
        let protos = Prototypes::new(random_unit_rows(&mut r, l, 3)).unwrap();
        let counts = random_counts(&mut r, l, 1000);
        let map = CompressionMap::new((0..l).map(|_| r.gen_range(0.001..1.0)).collect()).unwrap();
        let temp = r.gen_range(0.05..2.0);
        assert!(scl_loss(&b, temp).unwrap().0 >= 0.0);
        assert!(bcl_loss(&b, &protos, temp).unwrap().0 >= 0.0);
        assert!(bcl_rcl_loss(&b, &protos, &counts, &map, temp).unwrap().0 >= 0.0);
    }
}

#[test]
fn unit_norm_is_enforced() {
    let not_unit = EmbeddingBatch::new(array![[2.0, 0.0], [1.0, 0.0]], vec![0, 0], false).unwrap();
    assert!(scl_loss(&not_unit, 1.0).is_err());
    assert!(rcl_loss(&not_unit, &[1], 1.0).is_err());
    assert!(EmbeddingBatch::new(array![[2.0, 0.0]], vec![0], true).is_err());
    let fixed = EmbeddingBatch::normalized(array![[2.0, 0.0], [1.0, 0.0]], vec![0, 0]).unwrap();
    assert_eq!(scl_loss(&fixed, 1.0).unwrap().0, 0.0);
    assert!(Prototypes::new(array![[0.5, 0.0]]).is_err());
}

#[test]
fn compression_scales_rows_and_dots() {
    let b = batch(array![[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]], vec![0, 0, 1]);
    let map = CompressionMap::new(vec![0.005, 1.0]).unwrap();
    let c = compress_features(&b, &map).unwrap();
    assert!(!c.unit_normalized);
    for i in 0..2 {
        let row = c.embeddings.row(i);
        assert!((row.dot(&row).sqrt() - 0.005).abs() < 1e-15);
    }
    let d = |m: &Array2<f64>, i: usize, j: usize| m.row(i).dot(&m.row(j));
    assert!((d(&c.embeddings, 0, 1) - 0.005f64.powi(2) * d(&b.embeddings, 0, 1)).abs() < 1e-18);
    assert!((d(&c.embeddings, 1, 2) - 0.005 * d(&b.embeddings, 1, 2)).abs() < 1e-18);
    let id = compress_features(&b, &CompressionMap::identity(2)).unwrap();
    assert_eq!(id.embeddings, b.embeddings);
    assert!(CompressionMap::new(vec![1.0, 0.0]).is_err());
}

#[test]
fn total_loss_weights() {
    let mut cfg = LossConfig::for_counts(ClassifierLoss::CrossEntropy, ContrastiveLoss::Scl, &[1, 1]);
    assert_eq!(total_loss(1.0, 1.0, &cfg), 3.0);
    cfg.alpha = 1.0;
    cfg.beta = 7.0;
    assert_eq!(total_loss(0.42, 0.0, &cfg), 0.42);
    cfg.alpha = 9.0;
    cfg.beta = 1.0;
    assert_eq!(total_loss(0.0, 0.37, &cfg), 0.37);
}
