use approx::assert_relative_eq;
use dfrelay::allocators::{
    allocate, grid_oracle, pas0_with, project_capped_simplex, water_fill, AllocOptions, Scenario,
    Scheme,
};
use dfrelay::model::{sample_topology, NetworkConfig, UserGeometry};
use dfrelay::ops::NoCount;
use dfrelay::quartic::Approximation;
use dfrelay::rates::system_rate;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_config(seed: u64, m: usize) -> NetworkConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let relay_to_dest = rng.random_range(0.1..1.0);
    let ps = rng.random_range(1.0..10.0);
    let pr = rng.random_range(1.0..(20.0 * m as f64));
    NetworkConfig::normalized(ps, pr, sample_topology(seed, m, relay_to_dest)).unwrap()
}

fn check_feasible(cfg: &NetworkConfig, scheme: Scheme, opts: &AllocOptions) {
    let a = allocate(cfg, scheme, opts).unwrap();
    assert_eq!(a.powers.len(), cfg.m);
    assert!(
        a.powers.iter().all(|&p| p >= 0.0 && p.is_finite()),
        "{scheme}: {:?}",
        a.powers
    );
    assert!(
        a.total() <= cfg.pr * (1.0 + 1e-9),
        "{scheme}: {} > {}",
        a.total(),
        cfg.pr
    );
    assert!(
        (a.total() + a.unspent - cfg.pr).abs() <= 1e-6 * cfg.pr,
        "{scheme}: budget not accounted"
    );
    if a.unspent > 1e-6 * cfg.pr {
        // A shortfall is only allowed when every user sits at its cap.
        let caps = Scenario::new(cfg).unwrap().caps();
        assert!(
            a.powers
                .iter()
                .zip(&caps)
                .all(|(p, c)| *p >= c * (1.0 - 1e-9)),
            "{scheme}: unexplained shortfall"
        );
    }
    if scheme.is_capped() {
        let rep = system_rate(cfg, &a.powers).unwrap();
        assert!(
            rep.violations.is_empty(),
            "{scheme} violates caps for users {:?}",
            rep.violations
        );
    }
}

#[test]
fn small_instances_agree_with_grid_oracle() {
    let opts = AllocOptions::default();
    for seed in 0..30 {
        let m = 1 + (seed as usize % 3);
        let cfg = random_config(seed, m);
        let oracle = grid_oracle(&cfg, &opts).unwrap();
        let best = system_rate(&cfg, &oracle.powers).unwrap().system_rate;
        let pas0 = allocate(&cfg, Scheme::Pas0, &opts).unwrap();
        let r0 = system_rate(&cfg, &pas0.powers).unwrap().system_rate;
        // The grid is a lower bound on the optimum, so PAS-0 may beat it slightly.
        assert!(r0 >= best - 1e-4, "seed {seed}: pas0 {r0} < oracle {best}");
        let pas1 = allocate(&cfg, Scheme::Pas1, &opts).unwrap();
        let r1 = system_rate(&cfg, &pas1.powers).unwrap().system_rate;
        assert!(r1 >= 0.99 * best, "seed {seed}: pas1 {r1} < 0.99 × {best}");
    }
}

#[test]
fn reference_dominates_other_schemes() {
    let opts = AllocOptions::default();
    for seed in 100..120 {
        let cfg = random_config(seed, 8);
        let rate = |s: Scheme| {
            system_rate(&cfg, &allocate(&cfg, s, &opts).unwrap().powers)
                .unwrap()
                .system_rate
        };
        let r0 = rate(Scheme::Pas0);
        for s in [Scheme::Pas1, Scheme::Pas2, Scheme::Subop, Scheme::Cwf] {
            assert!(
                r0 >= rate(s) - 1e-6,
                "seed {seed}: pas0 {r0} < {s} {}",
                rate(s)
            );
        }
    }
}

#[test]
fn table_approximation_also_works() {
    let opts = AllocOptions {
        approximation: Approximation::Table,
        ..AllocOptions::default()
    };
    for seed in 200..210 {
        let cfg = random_config(seed, 6);
        check_feasible(&cfg, Scheme::Pas1, &opts);
        let a = allocate(&cfg, Scheme::Pas1, &opts).unwrap();
        assert!(a.converged);
    }
}

#[test]
fn all_capped_when_budget_exceeds_caps() {
    let cfg = NetworkConfig::normalized(
        5.0,
        1e4,
        vec![
            UserGeometry {
                d_sr: 0.5,
                d_sd: 1.0,
                d_rd: 0.5,
            };
            3
        ],
    )
    .unwrap();
    let opts = AllocOptions::default();
    for s in [Scheme::Pas0, Scheme::Pas1, Scheme::Pas2] {
        let a = allocate(&cfg, s, &opts).unwrap();
        assert_eq!(a.capped_users, vec![0, 1, 2], "{s}");
        assert!(a.unspent > 0.0);
    }
}

#[test]
fn pas0_objective_never_decreases() {
    let cfg = random_config(7, 10);
    let sc = Scenario::new(&cfg).unwrap();
    let (a, history) = pas0_with(&sc, &AllocOptions::default(), &mut NoCount);
    assert!(a.converged);
    for w in history.windows(2) {
        assert!(w[1] >= w[0] - 1e-12 * w[0].abs(), "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn pas1_reports_multiplier() {
    let cfg = random_config(9, 5);
    let a = allocate(&cfg, Scheme::Pas1, &AllocOptions::default()).unwrap();
    if a.capped_users.len() < cfg.m {
        assert!(a.multiplier.is_some_and(|t| t > 0.0));
    }
    assert!(allocate(&cfg, Scheme::Pas2, &AllocOptions::default())
        .unwrap()
        .multiplier
        .is_none());
}

#[test]
fn oracle_rejects_large_instances() {
    let cfg = random_config(1, 4);
    assert!(grid_oracle(&cfg, &AllocOptions::default()).is_err());
}

#[test]
fn water_fill_levels() {
    let p = water_fill(&[0.5, 1.0, 4.0], 3.0);
    // Level ν = 2.25 covers the first two users only.
    assert_relative_eq!(p[0], 1.75, max_relative = 1e-15);
    assert_relative_eq!(p[1], 1.25, max_relative = 1e-15);
    assert_eq!(p[2], 0.0);
    assert!(water_fill(&[], 1.0).is_empty());
}

#[test]
fn scheme_names_parse() {
    for s in Scheme::ALL {
        assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
    }
    assert_eq!("PAS-1".parse::<Scheme>().unwrap(), Scheme::Pas1);
    assert!("pas9".parse::<Scheme>().is_err());
}

#[test]
fn oracle_special_cases() {
    let opts = AllocOptions::default();
    let g = UserGeometry {
        d_sr: 0.3,
        d_sd: 1.0,
        d_rd: 0.5,
    };
    for pr in [0.5, 3.0, 500.0] {
        let cfg = NetworkConfig::normalized(5.0, pr, vec![g]).unwrap();
        let cap = Scenario::new(&cfg).unwrap().caps()[0];
        let a = grid_oracle(&cfg, &opts).unwrap();
        assert_relative_eq!(a.powers[0], pr.min(cap), max_relative = 1e-12);
    }
    let cfg = NetworkConfig::normalized(5.0, 2.0, vec![g, g]).unwrap();
    let a = grid_oracle(&cfg, &opts).unwrap();
    assert!((a.powers[0] - a.powers[1]).abs() <= 2.0 * cfg.pr / opts.oracle_steps as f64 + 1e-12);
}

#[test]
fn oracle_grid_refinement_is_converged() {
    let coarse = AllocOptions::default();
    let fine = AllocOptions {
        oracle_steps: 2 * coarse.oracle_steps,
        ..AllocOptions::default()
    };
    for seed in 300..310 {
        let cfg = random_config(seed, 2 + (seed as usize % 2));
        let rate = |o: &AllocOptions| system_rate(&cfg, &grid_oracle(&cfg, o).unwrap().powers).unwrap().system_rate;
        assert!((rate(&fine) - rate(&coarse)).abs() < 1e-5, "seed {seed}");
    }
}

#[test]
fn pas1_powers_are_continuous_in_budget() {
    let opts = AllocOptions::default();
    for seed in 400..420 {
        let cfg = random_config(seed, 10);
        let mut nudged = cfg.clone();
        nudged.pr *= 1.0 + 1e-3;
        let a = allocate(&cfg, Scheme::Pas1, &opts).unwrap();
        let b = allocate(&nudged, Scheme::Pas1, &opts).unwrap();
        if a.capped_users != b.capped_users {
            continue;
        }
        for (x, y) in a.powers.iter().zip(&b.powers) {
            assert!((x - y).abs() <= cfg.pr / 10.0, "seed {seed}: {x} -> {y}");
        }
    }
}

#[test]
fn outer_iterations_stay_below_user_count() {
    let opts = AllocOptions::default();
    for seed in 500..560 {
        let m = 1 + (seed as usize % 40);
        let cfg = random_config(seed, m);
        for s in [Scheme::Pas1, Scheme::Pas2] {
            let k = allocate(&cfg, s, &opts).unwrap().iterations;
            assert!(k <= m.max(1), "{s} seed {seed}: K = {k} > M = {m}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn capped_schemes_are_feasible(seed in 0u64..1_000_000, m in 1usize..25) {
        let cfg = random_config(seed, m);
        let opts = AllocOptions::default();
        for s in [Scheme::Pas0, Scheme::Pas1, Scheme::Pas2, Scheme::Subop, Scheme::Cwf] {
            check_feasible(&cfg, s, &opts);
        }
    }

    #[test]
    fn projection_lands_in_the_set(
        z in proptest::collection::vec(-5.0f64..5.0, 1..12),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let caps: Vec<f64> = z.iter().map(|_| rng.random_range(0.1..3.0)).collect();
        let total = rng.random_range(0.0..1.0) * caps.iter().sum::<f64>();
        let y = project_capped_simplex(&z, &caps, total);
        let s: f64 = y.iter().sum();
        prop_assert!((s - total).abs() <= 1e-9 * (1.0 + total));
        for (yi, ci) in y.iter().zip(&caps) {
            prop_assert!(*yi >= 0.0 && *yi <= *ci);
        }
        // Optimality: no feasible pairwise exchange moves y closer to z.
        for i in 0..y.len() {
            for j in 0..y.len() {
                let can_raise = y[i] < caps[i] - 1e-12;
                let can_lower = y[j] > 1e-12;
                if i != j && can_raise && can_lower {
                    prop_assert!((z[i] - y[i]) - (z[j] - y[j]) <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn water_fill_spends_budget(
        inv in proptest::collection::vec(0.01f64..10.0, 1..20),
        budget in 0.0f64..50.0,
    ) {
        let p = water_fill(&inv, budget);
        let s: f64 = p.iter().sum();
        prop_assert!((s - budget).abs() <= 1e-9 * (1.0 + budget));
        let levels: Vec<f64> = p.iter().zip(&inv).filter(|(pi, _)| **pi > 0.0).map(|(pi, v)| pi + v).collect();
        for l in &levels {
            prop_assert!((l - levels[0]).abs() <= 1e-9 * levels[0]);
        }
        for (pi, v) in p.iter().zip(&inv) {
            if *pi == 0.0 && !levels.is_empty() {
                prop_assert!(*v >= levels[0] - 1e-9);
            }
        }
    }
}
