mod common;

use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cobf::dbsum::{build_surrogate, default_penalty};
use cobf::dwmmse::{compute_state, solve_quadratic_ball, wsr_lower_bound, MU_REL_TOL};
use cobf::harness::{read_csv, write_csv, Algo, ResultRecord};
use cobf::implicit_rate::{certified_rate, rate_derivative, rate_from_scalars, solve_xi, XI_REL_TOL};
use cobf::linalg::{self, CMat, CVec};
use cobf::model::{cross_powers, generate_instance, BeamformerSet, ChannelStats, CrossPowers, NetworkConfig};
use cobf::polyblock::{new_vertices, update_vertex_set, Vertex, VertexSet};
use cobf::relaxed_bound::{relaxed_slack, solve_beta, RelaxedInstance};
use cobf::sdp::{solve_max_slack, SdpOptions};
use cobf::utilities::{UtilityKind, UtilitySpec};

use common::{grid_beta, random_beam, random_beams, scalar_max_slack};

fn rho_strategy() -> impl Strategy<Value = f64> {
    0.5f64..0.99
}

fn instance(seed: u64, k: usize, n: usize, snr_db: f64, eta: f64) -> (NetworkConfig, ChannelStats) {
    let cfg = NetworkConfig::from_snr_db(k, n, snr_db, 0.1).unwrap();
    let stats = generate_instance(seed, &cfg, eta).unwrap();
    (cfg, stats)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn rate_is_concave_increasing_in_signal(
        s in 0.01f64..20.0, d in 0.01f64..20.0, i1 in 0.0f64..5.0, i2 in 0.0f64..5.0,
        noise in 0.05f64..2.0, rho in rho_strategy(),
    ) {
        let r = |x: f64| rate_from_scalars(x, &[i1, i2], noise, rho);
        let (lo, hi) = (s, s + d);
        prop_assert!(r(hi) > r(lo));
        prop_assert!(r(0.5 * (lo + hi)) >= 0.5 * (r(lo) + r(hi)) - 1e-9);
    }

    #[test]
    fn rate_is_convex_nonincreasing_in_interference(
        s in 0.01f64..20.0, a in 0.0f64..10.0, d in 0.01f64..10.0, other in 0.0f64..5.0,
        noise in 0.05f64..2.0, rho in rho_strategy(),
    ) {
        let r = |x: f64| rate_from_scalars(s, &[x, other], noise, rho);
        let (lo, hi) = (a, a + d);
        prop_assert!(r(hi) <= r(lo) + 1e-12);
        prop_assert!(r(0.5 * (lo + hi)) <= 0.5 * (r(lo) + r(hi)) + 1e-9);
        // doubling a positive interferer strictly lowers the rate
        prop_assert!(r(2.0 * hi) < r(hi));
    }

    #[test]
    fn xi_monotonicity_along_geometric_grid(
        base in 1e-3f64..1e-1, other in 0.0f64..3.0, noise in 0.05f64..2.0, rho in rho_strategy(),
    ) {
        let mut prev: Option<(f64, f64)> = None;
        for step in 0..12 {
            let x = base * 2f64.powi(step);
            let xi = solve_xi(&[x, other], noise, rho, XI_REL_TOL);
            if let Some((xp, px)) = prev {
                prop_assert!(xi < xp);
                prop_assert!(x * xi > px);
            }
            prev = Some((xi, x * xi));
        }
    }

    #[test]
    fn xi_residual_and_bracket(interf in prop::collection::vec(0.0f64..10.0, 0..5), noise in 0.01f64..5.0, rho in rho_strategy()) {
        let xi = solve_xi(&interf, noise, rho, XI_REL_TOL);
        let phi = cobf::implicit_rate::phi(xi, &interf, noise, rho);
        prop_assert!(phi.abs() <= 1e-9);
        prop_assert!(xi > 0.0 && xi <= -rho.ln() / noise);
    }

    #[test]
    fn derivative_matches_central_difference(seed in 0u64..10_000, k in 2usize..5) {
        let (cfg, stats) = instance(seed, k, 2, 10.0, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beams = random_beams(&cfg, &mut rng);
        let powers = cross_powers(&beams, &stats).unwrap();
        let (i, j) = (0, 1);
        let rate_at = |v: f64| {
            let mut p = powers.clone();
            p.set(i, j, v);
            let interf = p.interference(j);
            rate_from_scalars(p.signal(j), &interf, cfg.noise_power[j], cfg.success_target[j])
        };
        let x = powers.get(i, j);
        let h = 1e-4 * x.max(1e-3);
        let fd = (rate_at(x + h) - rate_at(x - h)) / (2.0 * h);
        let cert = certified_rate(&beams, &stats, &cfg).unwrap();
        let exact = rate_derivative(&powers, cert.xi[j], cfg.noise_power[j], j, i).unwrap();
        prop_assert!((fd - exact).abs() <= 1e-4 * exact.abs() + 1e-9, "fd {} exact {}", fd, exact);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn block_surrogate_sandwich_and_concavity(seed in 0u64..10_000, k in 2usize..5, n in 1usize..4, kind in 0usize..4) {
        let (cfg, stats) = instance(seed, k, n, 10.0, 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let base = random_beams(&cfg, &mut rng);
        let kinds = [UtilityKind::WeightedSumRate, UtilityKind::ProportionalFairness, UtilityKind::HarmonicMean, UtilityKind::MmfLse];
        let u = UtilitySpec::new(kinds[kind], vec![1.0 / k as f64; k]).unwrap();
        let user = seed as usize % k;
        let model = build_surrogate(user, &base, &stats, &cfg, default_penalty(&cfg)).unwrap();
        let true_base = certified_rate(&base, &stats, &cfg).unwrap();
        let at_base = model.rates(&base.beams[user]).unwrap();
        for j in 0..k {
            prop_assert!((at_base[j] - true_base.rate[j]).abs() <= 1e-9);
        }
        for _ in 0..20 {
            let w = random_beam(n, cfg.power_budget[user], &mut rng);
            let mut trial = base.clone();
            trial.beams[user] = w.clone();
            let truth = certified_rate(&trial, &stats, &cfg).unwrap();
            if let Some(sr) = model.rates(&w) {
                for j in 0..k {
                    prop_assert!(sr[j] <= truth.rate[j] + 1e-9, "user {} surrogate {} true {}", j, sr[j], truth.rate[j]);
                }
                prop_assert!(model.value(&w, &u) <= u.evaluate(&truth.rate) + 1e-9);
            }
            let w2 = random_beam(n, cfg.power_budget[user], &mut rng);
            let mid = (&w + &w2) * Complex64::new(0.5, 0.0);
            let (a, b, m) = (model.value(&w, &u), model.value(&w2, &u), model.value(&mid, &u));
            // the utility's domain: every surrogate rate positive at both ends
            let in_domain = |x: &CVec| model.rates(x).is_some_and(|r| r.iter().all(|v| *v > u.rate_floor));
            if in_domain(&w) && in_domain(&w2) {
                prop_assert!(m >= 0.5 * (a + b) - 1e-9 * (1.0 + a.abs() + b.abs()));
            }
        }
    }

    #[test]
    fn wmmse_bound_chain(seed in 0u64..10_000, k in 1usize..5, n in 1usize..4) {
        let (cfg, stats) = instance(seed, k, n, 10.0, 0.6);
        let alpha = vec![1.0 / k as f64; k];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 11);
        let base = random_beams(&cfg, &mut rng);
        let state = compute_state(&base, &stats, &cfg, &alpha).unwrap();
        let base_powers = cross_powers(&base, &stats).unwrap();
        for i in 0..k {
            prop_assert!((state.zeta(&base_powers, cfg.noise_power[i], i) - state.users[i].xi).abs() <= 1e-9 * state.users[i].xi.max(1.0));
        }
        let base_cert = certified_rate(&base, &stats, &cfg).unwrap();
        let base_wsr: f64 = alpha.iter().zip(&base_cert.rate).map(|(a, r)| a * r).sum();
        prop_assert!((wsr_lower_bound(&state, &base, &stats, &cfg, &alpha).unwrap() - base_wsr).abs() <= 1e-9);
        for _ in 0..20 {
            let w = random_beams(&cfg, &mut rng);
            let powers = cross_powers(&w, &stats).unwrap();
            let cert = certified_rate(&w, &stats, &cfg).unwrap();
            for i in 0..k {
                prop_assert!(state.zeta(&powers, cfg.noise_power[i], i) <= cert.xi[i] + 1e-9);
            }
            let lower = wsr_lower_bound(&state, &w, &stats, &cfg, &alpha).unwrap();
            let middle = state.zeta_wsr(&powers, &cfg, &alpha);
            let truth: f64 = alpha.iter().zip(&cert.rate).map(|(a, r)| a * r).sum();
            prop_assert!(lower <= middle + 1e-9, "{} > {}", lower, middle);
            prop_assert!(middle <= truth + 1e-9, "{} > {}", middle, truth);
        }
    }

    #[test]
    fn quadratic_ball_matches_projected_gradient(seed in 0u64..10_000, n in 1usize..5, power in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = CMat::from_fn(n, n, |_, _| random_beam(1, 1.0, &mut rng)[0]);
        let a = &g * g.adjoint();
        let b = random_beam(n, 4.0, &mut rng);
        let f = |w: &CVec| linalg::quad_form(&a, w) - 2.0 * b.dotc(w).re;
        let sol = solve_quadratic_ball(&a, &b, power, MU_REL_TOL).unwrap();
        prop_assert!(linalg::norm_sqr(&sol.w) <= power * (1.0 + 1e-9));
        // accelerated projected gradient as an independent solver
        let lip = 2.0 * linalg::lambda_max(&a) + 1e-12;
        let mut x = CVec::zeros(n);
        let mut y = x.clone();
        let mut t = 1.0f64;
        for _ in 0..20_000 {
            let grad = (&a * &y) * Complex64::new(2.0, 0.0) - &b * Complex64::new(2.0, 0.0);
            let mut next = &y - grad * Complex64::new(1.0 / lip, 0.0);
            linalg::project_ball(&mut next, power);
            let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &next + (&next - &x) * Complex64::new((t - 1.0) / tn, 0.0);
            x = next;
            t = tn;
        }
        let (fs, fx) = (f(&sol.w), f(&x));
        prop_assert!(fs <= fx + 1e-6 * fx.abs().max(1e-3), "closed form {} vs gradient {}", fs, fx);
        prop_assert!((fs - fx).abs() <= 1e-6 * fx.abs().max(1e-3));
    }

    #[test]
    fn polyblock_update_stays_proper_and_nested(coords in prop::collection::vec(prop::collection::vec(0.1f64..1.0, 3), 1..6), frac in prop::collection::vec(0.0f64..1.0, 3), pick in 0usize..6) {
        let set = VertexSet::from_vertices(coords.into_iter().map(|c| Vertex::new(c).unwrap()).collect());
        prop_assert!(set.is_proper());
        let best = set.iter().nth(pick % set.len()).unwrap().clone();
        let cut = Vertex::new(best.coords().iter().zip(&frac).map(|(b, f)| b * f).collect()).unwrap();
        let next = update_vertex_set(&set, &best, new_vertices(&best, &cut).unwrap());
        prop_assert!(next.is_proper());
        for v in next.iter() {
            prop_assert!(set.iter().any(|u| v.dominated_by(u)));
            // nothing strictly above the cut survives
            prop_assert!(!(v.coords().iter().zip(cut.coords()).all(|(a, c)| a > c) && v.dominated_by(&best)));
        }
        for u in set.iter().filter(|u| *u != &best) {
            prop_assert!(next.covers(u.coords()));
        }
    }

    #[test]
    fn csv_round_trip_is_bit_exact(
        seed in any::<u64>(), k in 1usize..9, value in any::<f64>().prop_filter("finite", |v| v.is_finite()),
        bound in prop::option::of(-1e6f64..1e6), eta in 1e-6f64..1.0, t in 0.0f64..1e4, iters in 0usize..100_000,
    ) {
        let rec = ResultRecord {
            seed, algo: Algo::Dwmmse, utility: UtilityKind::MmfLse, num_users: k, num_antennas: 3, eta,
            snr_db: -3.25, value, bound, gap_ratio: bound.map(|b| value / b), iters, time_s: t, messages: 2 * iters,
        };
        let mut buf = Vec::new();
        write_csv(std::slice::from_ref(&rec), &mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), 1);
        prop_assert_eq!(back[0].value.to_bits(), value.to_bits());
        prop_assert_eq!(&back[0], &rec);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn relaxation_contains_certified_points(seed in 0u64..10_000, k in 1usize..5, n in 1usize..4, shrink in 0.0f64..1.0) {
        let (cfg, stats) = instance(seed, k, n, 10.0, 0.5);
        let inst = RelaxedInstance::new(&stats, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..40 {
            let beams = random_beams(&cfg, &mut rng);
            let cert = certified_rate(&beams, &stats, &cfg).unwrap();
            let rates: Vec<f64> = cert.rate.iter().map(|r| r * shrink.max(0.5)).collect();
            for s in relaxed_slack(&inst, &beams, &rates) {
                prop_assert!(s >= -1e-10, "slack {}", s);
            }
        }
    }

    #[test]
    fn scalar_sdp_matches_lp_enumeration(seed in 0u64..10_000, k in 2usize..4, scale in 0.2f64..1.5) {
        let (cfg, stats) = instance(seed, k, 1, 10.0, 1.0);
        let inst = RelaxedInstance::new(&stats, &cfg).unwrap();
        let rates: Vec<f64> = inst.box_vertex.coords().iter().map(|r| r * scale / k as f64).collect();
        let p = inst.problem(&rates).unwrap();
        let sol = solve_max_slack(&p, &SdpOptions::default()).unwrap();
        let exact = scalar_max_slack(&p);
        prop_assert!((sol.t - exact).abs() <= 1e-4 * (1.0 + exact.abs()), "sdp {} lp {}", sol.t, exact);
    }

    #[test]
    fn beta_matches_power_grid(seed in 0u64..10_000, v0 in 0.05f64..1.0, v1 in 0.05f64..1.0) {
        let (cfg, stats) = instance(seed, 2, 1, 10.0, 1.0);
        let inst = RelaxedInstance::new(&stats, &cfg).unwrap();
        let v = [v0, v1];
        let hit = solve_beta(&inst, &Vertex::new(v.to_vec()).unwrap(), 1e-6).unwrap();
        let grid = grid_beta(&inst, &v, 1000);
        prop_assert!(grid <= hit.beta_upper * (1.0 + 1e-9));
        prop_assert!((hit.beta - grid).abs() <= 2e-3 * grid.max(1e-12), "bisection {} grid {}", hit.beta, grid);
    }

    #[test]
    fn stats_text_round_trip(seed in 0u64..10_000, k in 1usize..4, n in 1usize..4, eta in 0.05f64..1.0) {
        let (_, stats) = instance(seed, k, n, 0.0, eta);
        let back = ChannelStats::from_text(&stats.to_text()).unwrap();
        prop_assert_eq!(back, stats);
    }

    #[test]
    fn cross_powers_from_values_is_consistent(seed in 0u64..10_000, k in 1usize..5) {
        let (cfg, stats) = instance(seed, k, 2, 10.0, 0.8);
        let beams = BeamformerSet::random_unit(&cfg, seed);
        let p = cross_powers(&beams, &stats).unwrap();
        let values: Vec<f64> = (0..k * k).map(|idx| p.get(idx / k, idx % k)).collect();
        let again = CrossPowers::from_values(k, values).unwrap();
        for i in 0..k {
            prop_assert_eq!(again.signal(i), p.signal(i));
        }
    }
}
