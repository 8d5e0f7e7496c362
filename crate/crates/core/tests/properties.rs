use bats_relay::channel::{
    build_environment, innovative_rank_distribution, ChannelSpec, RankEnvironment,
};
use bats_relay::idle::{idle_time_markov, send_count_distribution, IdleMethod};
use bats_relay::optimizer::{evaluate_point, sweep};
use bats_relay::recoding::{brute_force_recoding, sink_rank, solve_recoding};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec_strategy(max_m: usize) -> impl Strategy<Value = ChannelSpec> {
    (1..=max_m, 0.0..0.6f64, 0.0..0.6f64, 0.05..1.0f64)
        .prop_map(|(m, p_sr, p_rd, p_sd)| ChannelSpec::new(m, 1.0, p_sr, p_rd, p_sd).unwrap())
}

fn env_of(spec: &ChannelSpec) -> RankEnvironment {
    build_environment(spec, spec.default_t_max()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn objective_is_monotone_and_concave(spec in spec_strategy(10)) {
        let env = env_of(&spec);
        let step = 0.125;
        let top = 2.0 * spec.batch_size as f64;
        let values: Vec<f64> = (0..=(top / step) as usize)
            .map(|k| solve_recoding(&env, k as f64 * step).unwrap().sink_rank_mean)
            .collect();
        for w in values.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12);
        }
        for w in values.windows(3) {
            prop_assert!(w[1] >= 0.5 * (w[0] + w[2]) - 1e-12);
        }
    }

    #[test]
    fn moving_mass_between_ranks_never_helps(spec in spec_strategy(8), frac in 0.0..1.5f64) {
        let env = env_of(&spec);
        let t_avg = frac * spec.batch_size as f64;
        let scheme = solve_recoding(&env, t_avg).unwrap();
        let base = sink_rank(&env, &scheme.t).unwrap();
        let h = env.h();
        let eps = 1e-4;
        let support: Vec<usize> = (0..h.len()).filter(|&r| h[r] > 1e-9).collect();
        for &from in &support {
            let cut = eps / h[from];
            if scheme.t[from] < cut {
                continue;
            }
            for &to in &support {
                if to == from {
                    continue;
                }
                let mut t = scheme.t.clone();
                t[from] -= cut;
                t[to] += eps / h[to];
                if t[to] > env.t_max() as f64 {
                    continue;
                }
                let moved = sink_rank(&env, &t).unwrap();
                prop_assert!(moved <= base + 1e-10, "{from}->{to}: {moved} > {base}");
            }
        }
    }

    #[test]
    fn greedy_beats_grid_oracle(spec in spec_strategy(3), k in 0usize..=60) {
        let env = env_of(&spec);
        let step = 0.05;
        let t_avg = k as f64 * step;
        let greedy = solve_recoding(&env, t_avg).unwrap().sink_rank_mean;
        let brute = brute_force_recoding(&env, t_avg, step).unwrap().sink_rank_mean;
        let max_gain = (0..=spec.batch_size)
            .map(|r| env.marginal_gain(r, 0).unwrap())
            .fold(0.0, f64::max);
        prop_assert!(greedy >= brute - step * max_gain - 1e-12);
    }

    #[test]
    fn idle_shrinks_as_budget_grows(spec in spec_strategy(6), batches in prop::sample::select(vec![2usize, 5, 12])) {
        let env = env_of(&spec);
        let h = env.h().to_vec();
        let slot = spec.source_batch_time();
        let mut prev = f64::INFINITY;
        for k in 0..=(8 * spec.batch_size) {
            let t_avg = k as f64 * 0.25;
            let scheme = solve_recoding(&env, t_avg).unwrap();
            let tbar = send_count_distribution(&h, &scheme.t).unwrap();
            let d = idle_time_markov(&tbar, &spec, batches).unwrap().total_idle;
            prop_assert!(d <= prev + 1e-9);
            prop_assert!(d >= slot - 1e-9 && d <= batches as f64 * slot + 1e-9);
            prev = d;
        }
    }
}

#[test]
fn source_bound_curve_ignores_file_size() {
    let spec = ChannelSpec::reference(8);
    let env = env_of(&spec);
    let bound = |f| {
        sweep(f, &env, (6.0, 9.0), 0.01, &IdleMethod::Markov)
            .unwrap()
            .into_iter()
            .map(|p| p.source_bound.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bound(100), bound(512));
}

#[test]
fn efficiency_is_the_smaller_bound() {
    let spec = ChannelSpec::reference(16);
    let env = env_of(&spec);
    for t_avg in [0.5, 10.0, 14.17, 16.0, 30.0] {
        let p = evaluate_point(100, &env, t_avg, &IdleMethod::Markov).unwrap();
        assert_eq!(p.efficiency, p.source_bound.min(p.relay_bound));
    }
}

#[test]
fn innovative_rank_matches_sampled_packets() {
    let spec = ChannelSpec::reference(8);
    let h = innovative_rank_distribution(&spec).unwrap();
    let draws = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = vec![0u64; spec.batch_size + 1];
    for _ in 0..draws {
        let r = (0..spec.batch_size)
            .filter(|_| {
                let at_relay = rng.random::<f64>() >= spec.p_sr;
                let missed_by_sink = rng.random::<f64>() < spec.p_sd;
                at_relay && missed_by_sink
            })
            .count();
        counts[r] += 1;
    }
    for (r, &c) in counts.iter().enumerate() {
        let freq = c as f64 / draws as f64;
        let se = (h[r] * (1.0 - h[r]) / draws as f64).sqrt().max(1e-12);
        assert!((freq - h[r]).abs() <= 4.0 * se, "r={r}: {freq} vs {}", h[r]);
    }
}
