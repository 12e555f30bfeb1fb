use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ivcr::bounds::{lattice, outer_set, verify_membership, BoundsConfig, BoundsFrontiers};
use ivcr::data::{cell_counts, read_csv, write_csv, CellIndex, CsvSchema, Dataset, EventCode, ObservationRecord};
use ivcr::estimator::{
    derived_quantities, fit_curve, objective, residual_vector, FitConfig, QuantileGrid, WeightingPolicy,
};
use ivcr::inference::{bootstrap_distribution, BootstrapConfig, Contrast};
use ivcr::simulation::{generate, generate_replicate, Design, DgpSpec, GroundTruth};
use ivcr::smoothing::{smooth, SmootherKind};
use ivcr::surface::{assemble_surface, BandwidthPolicy, FnSurface, Surface};
use ivcr::survival::{aalen_johansen, product_limit, CellProcess};

fn record() -> impl Strategy<Value = ObservationRecord> {
    (0.0f64..5.0, 0u8..3, 0usize..2, 0usize..2).prop_map(|(y, e, z, w)| ObservationRecord {
        y,
        event: EventCode::from_code(e).unwrap(),
        z,
        w,
    })
}

/// Records with every cell populated.
fn dataset() -> impl Strategy<Value = Dataset> {
    prop::collection::vec(record(), 4..60).prop_map(|mut recs| {
        for (i, (z, w)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            recs[i].z = z;
            recs[i].w = w;
        }
        Dataset::new(recs, vec!["a".into(), "b".into()], vec!["x".into(), "y".into()], BTreeSet::new()).unwrap()
    })
}

fn cell_process(recs: &[ObservationRecord]) -> CellProcess {
    CellProcess::from_records(recs.iter())
}

fn single_cell(times: Vec<(f64, u8)>) -> Vec<ObservationRecord> {
    times
        .into_iter()
        .map(|(y, e)| ObservationRecord {
            y,
            event: EventCode::from_code(e).unwrap(),
            z: 0,
            w: 0,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip_is_bit_exact(data in dataset()) {
        let mut buf = Vec::new();
        write_csv(&data, &mut buf).unwrap();
        let schema = CsvSchema {
            treatment_order: Some(vec!["a".into(), "b".into()]),
            instrument_order: Some(vec!["x".into(), "y".into()]),
            ..CsvSchema::default()
        };
        let back = read_csv(buf.as_slice(), &schema).unwrap();
        prop_assert_eq!(back.records(), data.records());
        let counts = cell_counts(&data);
        prop_assert_eq!(counts.total(), data.len());
    }

    #[test]
    fn incidence_is_a_proper_survival_shape(recs in prop::collection::vec((0.0f64..3.0, 0u8..3), 1..80)) {
        let cp = cell_process(&single_cell(recs.clone()));
        let s = aalen_johansen(&cp, EventCode::Cause1);
        prop_assert_eq!(s.value_at_zero(), 1.0);
        prop_assert!(s.is_non_increasing());
        let last1 = recs.iter().filter(|r| r.1 == 1).map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
        if last1.is_finite() {
            prop_assert_eq!(s.eval(last1), s.eval(last1 + 10.0));
            prop_assert_eq!(*s.jump_times().last().unwrap(), last1);
        } else {
            prop_assert!(s.jump_times().is_empty());
        }
    }

    #[test]
    fn survival_and_incidences_decompose(recs in prop::collection::vec((0.0f64..3.0, 0u8..3), 1..80)) {
        let cp = cell_process(&single_cell(recs.clone()));
        let km = product_limit(&cp);
        let s1 = aalen_johansen(&cp, EventCode::Cause1);
        let s2 = aalen_johansen(&cp, EventCode::Cause2);
        for &(t, _) in &recs {
            let total = km.eval(t) + (1.0 - s1.eval(t)) + (1.0 - s2.eval(t));
            prop_assert!((total - 1.0).abs() < 1e-12, "t={} total={}", t, total);
        }
    }

    #[test]
    fn convolution_stays_within_local_oscillation(
        recs in prop::collection::vec((0.0f64..2.0, 0u8..3), 2..60),
        h in 0.01f64..0.8,
        probes in prop::collection::vec(0.0f64..1.0, 10),
    ) {
        let cp = cell_process(&single_cell(recs));
        let step = aalen_johansen(&cp, EventCode::Cause1);
        let Some(&last) = step.jump_times().last() else { return Ok(()) };
        let curve = smooth(&step, h, SmootherKind::Convolution).unwrap();
        for p in probes {
            let t = p * last;
            let gap = (curve.eval(t) - step.eval(t)).abs();
            prop_assert!(gap <= step.local_oscillation(t, h) + 1e-12, "t={} gap={}", t, gap);
        }
    }

    #[test]
    fn monotone_post_processing_is_non_expansive(
        recs in prop::collection::vec((0.0f64..2.0, 0u8..3), 3..60),
        h in 0.01f64..0.5,
    ) {
        let cp = cell_process(&single_cell(recs));
        let step = aalen_johansen(&cp, EventCode::Cause1);
        let curve = smooth(&step, h, SmootherKind::LocalLinear).unwrap();
        if let Some((dt, raw, values)) = curve.nodes() {
            // Distance to the step function at the nodes, a non-increasing target.
            let dist = |v: &[f64]| {
                v.iter().enumerate().map(|(i, x)| (x - step.eval(i as f64 * dt)).abs()).fold(0.0, f64::max)
            };
            prop_assert!(dist(values) <= dist(raw) + 1e-12);
            prop_assert!(values.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn weighting_scale_leaves_argmin_unchanged(
        cands in prop::collection::vec((0.0f64..0.6, 0.0f64..0.6), 2..30),
        scale in 0.01f64..100.0,
        u in 0.05f64..0.45,
    ) {
        let surface = two_level_surface();
        let v = vec![vec![2.0, 0.5], vec![0.5, 1.0]];
        let sv: Vec<Vec<f64>> = v.iter().map(|r| r.iter().map(|x| x * scale).collect()).collect();
        let argmin = |w: &[Vec<f64>]| {
            let vals: Vec<f64> = cands.iter().map(|&(a, b)| objective(&[a, b], u, &surface, Some(w))).collect();
            let best = vals.iter().copied().fold(f64::INFINITY, f64::min);
            vals.iter().map(|&x| x <= best * (1.0 + 1e-12)).collect::<Vec<_>>()
        };
        prop_assert_eq!(argmin(&v), argmin(&sv));
    }

    #[test]
    fn outer_set_membership_saturates_and_nests(
        a in prop::collection::vec(0.05f64..1.0, 4),
        y in prop::collection::vec(0.3f64..1.0, 2),
        u1 in 0.3f64..1.0,
        du in 0.0f64..0.3,
    ) {
        let (y0, y1) = (y[0], y[1]);
        let surface = FnSurface {
            num_treatments: 2,
            num_instruments: 2,
            f: move |t: f64, z: usize, w: usize| {
                let yz = if z == 0 { y0 } else { y1 };
                a[2 * z + w] * (1.0 - 0.8 * t.clamp(0.0, yz) / yz)
            },
        };
        let f = BoundsFrontiers { y1: y.clone(), caps: y.iter().map(|v| v * 1.1).collect(), u_hat: 0.0 };
        let u2 = (u1 + du).min(1.0);
        let cfg = BoundsConfig::default();
        let low = outer_set(u1, &surface, &f, &cfg).unwrap();
        let high = outer_set(u2, &surface, &f, &cfg).unwrap();
        for theta in lattice(&[1.5, 1.5], 16) {
            let sat: Vec<f64> = theta.iter().zip(&y).map(|(&t, &yy)| t.min(yy)).collect();
            prop_assert_eq!(
                verify_membership(&theta, u1, &surface, &f),
                verify_membership(&sat, u1, &surface, &f)
            );
            prop_assert_eq!(low.contains(&theta), low.contains(&sat));
            if low.contains(&theta) {
                prop_assert!(high.contains(&theta));
            }
        }
    }
}

/// Level `z` at instrument `w`: a linear incidence scaled by the cell
/// probability, flat past 0.5.
fn two_level_surface() -> impl Surface {
    FnSurface {
        num_treatments: 2,
        num_instruments: 2,
        f: |t: f64, z: usize, w: usize| {
            let p = [[0.8, 0.3], [0.2, 0.7]][z][w];
            let slope = [[0.9, 0.6], [1.2, 0.5]][z][w];
            p * (1.0 - slope * t.clamp(0.0, 0.5))
        },
    }
}

#[test]
fn uncensored_incidence_is_one_minus_empirical_cdf() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = rng.gen_range(1..50);
        let recs: Vec<(f64, u8)> = (0..n).map(|_| ((rng.gen_range(0..20) as f64) / 7.0, rng.gen_range(1..3))).collect();
        let cp = cell_process(&single_cell(recs.clone()));
        let s = aalen_johansen(&cp, EventCode::Cause1);
        for k in 0..40 {
            let t = k as f64 / 13.0;
            let ecdf = recs.iter().filter(|r| r.1 == 1 && r.0 <= t).count() as f64 / n as f64;
            assert!((s.eval(t) - (1.0 - ecdf)).abs() < 1e-12);
        }
    }
}

fn small_design(design: Design, n: usize, seed: u64) -> Dataset {
    generate(&DgpSpec { design, n, seed }).unwrap().dataset().unwrap()
}

#[test]
fn residual_at_origin_equals_u_on_estimated_surface() {
    let data = small_design(Design::Two, 3000, 8);
    let surface = assemble_surface(&data, &BandwidthPolicy::RuleOfThumb, SmootherKind::LocalLinear).unwrap();
    for u in [0.1, 0.37, 0.9] {
        for r in residual_vector(&[0.0, 0.0], u, &surface) {
            assert!((r - u).abs() < 1e-12, "{r} vs {u}");
        }
    }
}

#[test]
fn solver_beats_random_audit_points() {
    let data = small_design(Design::Two, 3000, 21);
    let cfg = FitConfig {
        grid: QuantileGrid::uniform(20).unwrap(),
        ..FitConfig::default()
    };
    let fit = fit_curve(&data, &cfg).unwrap();
    let surface = assemble_surface(&data, &cfg.bandwidth, cfg.smoother).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y = &fit.frontiers.y_hat;
    for (m, &u) in fit.grid.points().iter().enumerate() {
        if !fit.reported_mask[m] {
            continue;
        }
        let best = objective(&fit.theta[m], u, &surface, None);
        for _ in 0..100 {
            let cand: Vec<f64> = y.iter().map(|&yy| rng.gen_range(0.0..yy)).collect();
            assert!(best <= objective(&cand, u, &surface, None) + 1e-15, "u={u}");
        }
    }
}

#[test]
fn weighting_policy_validation_accepts_scaled_identity() {
    let v = WeightingPolicy::Constant(vec![vec![3.0, 0.0], vec![0.0, 3.0]]);
    assert!(v.validate(2, 10).is_ok());
}

#[test]
fn derived_incidence_inverts_the_quantile_curve() {
    let data = small_design(Design::Two, 5000, 2);
    let fit = fit_curve(&data, &FitConfig::default()).unwrap();
    let d = derived_quantities(&fit, None);
    for level in &d.levels {
        let c = &level.curve;
        for (&u, &t) in c.u.iter().zip(&c.t) {
            let back = c.incidence(t).unwrap();
            let q = c.quantile(back).unwrap();
            assert!((q - t).abs() < 1e-9, "t={t} q={q} u={u}");
        }
    }
}

#[test]
fn generation_and_fitting_are_seed_deterministic() {
    let spec = DgpSpec {
        design: Design::One,
        n: 2000,
        seed: 77,
    };
    let a = generate(&spec).unwrap();
    assert_eq!(a, generate(&spec).unwrap());
    assert_ne!(a, generate_replicate(&spec, 1).unwrap());
    let data = a.dataset().unwrap();
    let cfg = FitConfig::default();
    assert_eq!(fit_curve(&data, &cfg).unwrap(), fit_curve(&data, &cfg).unwrap());
}

#[test]
fn empirical_frontier_grows_toward_support_bound() {
    let truth = GroundTruth::for_design(Design::Two);
    let spec = DgpSpec {
        design: Design::Two,
        n: 100_000,
        seed: 4,
    };
    let sample = generate(&spec).unwrap();
    let mut prev = [0.0f64; 2];
    for n in [100, 1_000, 10_000, 100_000] {
        let mut max = [0.0f64; 2];
        for (r, l) in sample.records.iter().zip(&sample.latent).take(n) {
            if l.e == EventCode::Cause1 {
                max[r.z] = max[r.z].max(l.t);
            }
        }
        for z in 0..2 {
            assert!(max[z] >= prev[z] && max[z] <= truth.t1[z]);
        }
        prev = max;
    }
    assert!(prev[0] > 0.99 && prev[1] > 0.74);
}

#[test]
fn bootstrap_is_deterministic_and_levels_nest() {
    let data = small_design(Design::Two, 2000, 6);
    let cfg = FitConfig {
        grid: QuantileGrid::uniform(20).unwrap(),
        ..FitConfig::default()
    };
    let boot = BootstrapConfig {
        draws: 40,
        seed: 3,
        ..BootstrapConfig::default()
    };
    let d1 = bootstrap_distribution(&data, &cfg, &boot, Contrast::default()).unwrap();
    let d2 = bootstrap_distribution(&data, &cfg, &boot, Contrast::default()).unwrap();
    assert_eq!(d1, d2);
    let b95 = d1.band(0.95, 0.5).unwrap();
    let b99 = d1.band(0.99, 0.5).unwrap();
    let mut valid = 0;
    for (r95, r99) in b95.rows.iter().zip(&b99.rows) {
        assert_eq!(r95.valid, r99.valid);
        if r95.valid {
            valid += 1;
            assert!(r99.lower.unwrap() <= r95.lower.unwrap());
            assert!(r95.upper.unwrap() <= r99.upper.unwrap());
        }
    }
    assert!(valid > 0);
    let share = b95.point_inside_share().unwrap();
    eprintln!("full-sample estimate inside the 95% band at {:.0}% of points", 100.0 * share);
}

#[test]
fn structural_zero_cell_contributes_nothing() {
    let data = small_design(Design::One, 2000, 1);
    let surface = assemble_surface(&data, &BandwidthPolicy::RuleOfThumb, SmootherKind::LocalLinear).unwrap();
    assert!(surface.is_structural_zero(1, 0));
    for t in [0.0, 0.2, 0.5] {
        assert_eq!(surface.value(t, 1, 0), 0.0);
    }
    assert!(data.is_structural_zero(CellIndex::new(1, 0)));
}
