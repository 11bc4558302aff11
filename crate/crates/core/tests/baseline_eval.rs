mod common;

use common::rng;
use floodhmt::baseline::{label_propagation_smooth, pixelwise_classify};
use floodhmt::eval::{confusion, precision_recall_f1, report, Confusion};
use floodhmt::model::{fit_initial_params, labeled_samples, InitConfig};
use floodhmt::raster::{Grid, SceneBundle, DEFAULT_NODATA};
use floodhmt::synth::{generate_scene, SynthConfig};
use proptest::prelude::*;

/// Two-band quadratic discriminant written out with the closed-form 2x2
/// inverse and determinant.
fn qda_2d(x: &[f64], mu: &[Vec<f64>; 2], sigma: &[Vec<f64>; 2], pi: f64) -> u8 {
    let score = |c: usize, prior: f64| {
        let s = &sigma[c];
        let det = s[0] * s[3] - s[1] * s[2];
        let (dx, dy) = (x[0] - mu[c][0], x[1] - mu[c][1]);
        let q = (s[3] * dx * dx - (s[1] + s[2]) * dx * dy + s[0] * dy * dy) / det;
        prior.ln() - 0.5 * det.ln() - 0.5 * q
    };
    u8::from(score(1, pi) > score(0, 1.0 - pi))
}

#[test]
fn pixelwise_classifier_matches_direct_discriminant() {
    let mut r = rng(17);
    for trial in 0..20 {
        let n = 20 + r.below(81);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let class = u8::from(i % 2 == 1 || r.uniform() < 0.3);
            let base = if class == 1 { 1.0 } else { -1.0 };
            let a = r.normal();
            features.push(vec![base + a, 0.5 * base + 0.6 * a + 0.8 * r.normal()]);
            labels.push(class);
        }
        let params = fit_initial_params(&features, &labels, &InitConfig::default()).unwrap();
        let dem = Grid::from_values(1, n, vec![0.0; n]).unwrap();
        let band =
            |k: usize| Grid::from_values(1, n, features.iter().map(|f| f[k]).collect()).unwrap();
        let scene = SceneBundle::new(dem, vec![band(0), band(1)], None).unwrap();
        let out = pixelwise_classify(&scene, &params).unwrap();
        for (i, x) in features.iter().enumerate() {
            let direct = qda_2d(x, &params.mu, &params.sigma, params.pi);
            assert_eq!(out.values[i], f64::from(direct), "trial {trial} point {i}");
        }
    }
}

fn salt_and_pepper_scene(seed: u64) -> floodhmt::synth::SyntheticScene {
    generate_scene(&SynthConfig {
        nrows: 64,
        ncols: 64,
        seed,
        dry_mean: vec![3.5, 3.5, 3.5],
        flood_mean: vec![2.0, 2.0, 2.0],
        withheld_fraction: 0.9,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn smoothing_raises_f1_on_salt_and_pepper() {
    for seed in 1..=5 {
        let s = salt_and_pepper_scene(seed);
        let (x, y) = labeled_samples(&s.scene);
        let params = fit_initial_params(&x, &y, &InitConfig::default()).unwrap();
        let raw = pixelwise_classify(&s.scene, &params).unwrap();
        let smooth = label_propagation_smooth(&raw, 10);
        let before = report(&raw, &s.truth).unwrap().average_f1;
        let after = report(&smooth, &s.truth).unwrap().average_f1;
        assert!(after > before, "seed {seed}: {before} -> {after}");
    }
}

/// Pixels whose label differs from every valid 4-neighbour.
fn isolated(g: &Grid) -> usize {
    let (nr, nc) = (g.nrows, g.ncols);
    (0..g.len())
        .filter(|&i| {
            let (r, c) = (i / nc, i % nc);
            let mut any = false;
            let mut all_differ = true;
            for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr < 0 || cc < 0 || rr >= nr as i64 || cc >= nc as i64 {
                    continue;
                }
                any = true;
                all_differ &= g.values[rr as usize * nc + cc as usize] != g.values[i];
            }
            any && all_differ
        })
        .count()
}

#[test]
fn smoothing_removes_isolated_flips() {
    let s = salt_and_pepper_scene(9);
    let (x, y) = labeled_samples(&s.scene);
    let params = fit_initial_params(&x, &y, &InitConfig::default()).unwrap();
    let raw = pixelwise_classify(&s.scene, &params).unwrap();
    let smooth = label_propagation_smooth(&raw, 10);
    assert!(isolated(&raw) > 20);
    assert!(isolated(&smooth) * 10 < isolated(&raw));
}

fn label_grid(bits: &[u8], holes: &[bool], ncols: usize) -> Grid {
    let values = bits
        .iter()
        .zip(holes)
        .map(|(&b, &h)| if h { DEFAULT_NODATA } else { f64::from(b) })
        .collect();
    Grid::from_values(bits.len() / ncols, ncols, values).unwrap()
}

proptest! {
    #[test]
    fn smoothing_respects_domain_and_is_idempotent(
        bits in prop::collection::vec(0u8..2, 48),
        holes in prop::collection::vec(prop::bool::weighted(0.1), 48),
    ) {
        let g = label_grid(&bits, &holes, 8);
        let s = label_propagation_smooth(&g, 200);
        for (a, b) in g.values.iter().zip(&s.values) {
            prop_assert_eq!(g.is_nodata(*a), g.is_nodata(*b));
            prop_assert!(g.is_nodata(*b) || *b == 0.0 || *b == 1.0);
        }
        let again = label_propagation_smooth(&s, 1);
        // A converged map is a fixed point; period-two oscillation is the
        // only way to exhaust the sweep budget.
        if again != s {
            prop_assert_eq!(label_propagation_smooth(&again, 1), s);
        }
    }

    #[test]
    fn class_swap_mirrors_counts(
        pred in prop::collection::vec(0u8..2, 30),
        truth in prop::collection::vec(0u8..2, 30),
        holes in prop::collection::vec(prop::bool::weighted(0.15), 30),
    ) {
        let p = label_grid(&pred, &holes, 6);
        let t = label_grid(&truth, &[false; 30], 6);
        let c1 = confusion(&p, &t, 1).unwrap();
        let c0 = confusion(&p, &t, 0).unwrap();
        prop_assert_eq!(c0, c1.swapped());
        let mut brute = Confusion::default();
        for i in 0..30 {
            if holes[i] {
                continue;
            }
            match (pred[i], truth[i]) {
                (1, 1) => brute.tp += 1,
                (1, 0) => brute.fp += 1,
                (0, 1) => brute.fn_ += 1,
                _ => brute.tn += 1,
            }
        }
        prop_assert_eq!(c1, brute);
        let s1 = precision_recall_f1(&c1);
        let s0 = precision_recall_f1(&c0);
        // Flood precision is one minus the share of predicted floods that are dry.
        if c1.tp + c1.fp > 0 {
            prop_assert!((s1.precision - (1.0 - c1.fp as f64 / (c1.tp + c1.fp) as f64)).abs() < 1e-15);
        }
        if c0.tp + c0.fn_ > 0 {
            prop_assert_eq!(s0.recall, c1.tn as f64 / (c1.tn + c1.fp) as f64);
        }
    }

    #[test]
    fn f1_symmetric_and_equal_when_p_equals_r(tp in 1u64..500, fp in 0u64..500, fn_ in 0u64..500) {
        let a = precision_recall_f1(&Confusion { tp, fp, fn_, tn: 0 });
        let b = precision_recall_f1(&Confusion { tp, fp: fn_, fn_: fp, tn: 0 });
        prop_assert_eq!(a.f1, b.f1);
        prop_assert_eq!((a.precision, a.recall), (b.recall, b.precision));
        let c = precision_recall_f1(&Confusion { tp, fp, fn_: fp, tn: 0 });
        prop_assert!((c.f1 - c.precision).abs() < 1e-15);
    }
}

#[test]
fn swapped_confusion_counts() {
    let c = Confusion {
        tp: 3,
        fp: 1,
        fn_: 2,
        tn: 9,
    };
    assert_eq!(
        c.swapped(),
        Confusion {
            tp: 9,
            fp: 2,
            fn_: 1,
            tn: 3
        }
    );
    assert_eq!(c.total(), 15);
}
