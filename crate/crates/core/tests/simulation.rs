use bats_relay::channel::{build_environment, ChannelSpec};
use bats_relay::idle::{
    idle_gap_distributions, idle_time_markov, send_count_distribution, IdleMethod,
};
use bats_relay::optimizer::{optimize, OptimizerConfig};
use bats_relay::recoding::{solve_recoding, RecodingScheme};
use bats_relay::sim::{empirical_efficiency_batch, simulate_many, simulate_transfer};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn optimum(f: usize, m: usize) -> (ChannelSpec, RecodingScheme, usize, f64, f64) {
    let spec = ChannelSpec::reference(m);
    let env = build_environment(&spec, spec.default_t_max()).unwrap();
    let res = optimize(f, &env, &OptimizerConfig::for_spec(&spec, 1)).unwrap();
    let best = res.best;
    (
        spec,
        best.scheme(),
        best.batches,
        best.total_idle,
        best.efficiency,
    )
}

#[test]
fn realized_send_count_tracks_t_avg() {
    let spec = ChannelSpec::reference(8);
    let env = build_environment(&spec, spec.default_t_max()).unwrap();
    let scheme = solve_recoding(&env, 6.37).unwrap();
    let rep = simulate_transfer(&spec, &scheme, 50_000, 3).unwrap();
    let sent: Vec<f64> = rep.traces.iter().map(|t| t.recoded_sent as f64).collect();
    let (mean, se) = mean_and_se(&sent);
    assert!(
        (mean - scheme.t_avg).abs() <= 3.0 * se,
        "{mean} vs {} (se {se})",
        scheme.t_avg
    );
}

#[test]
fn per_gap_idle_matches_chain() {
    let spec = ChannelSpec::new(4, 1.0, 0.2, 0.2, 0.8).unwrap();
    let env = build_environment(&spec, 8).unwrap();
    let scheme = solve_recoding(&env, 2.6).unwrap();
    let tbar = send_count_distribution(env.h(), &scheme.t).unwrap();
    let batches = 5;
    let gaps = idle_gap_distributions(&tbar, &spec, batches).unwrap();
    let runs = 20_000;
    let reports = simulate_many(&spec, &scheme, batches, runs, 77).unwrap();
    let critical = |dof: usize| ChiSquared::new(dof as f64).unwrap().inverse_cdf(0.99);
    for (g, probs) in gaps.iter().enumerate() {
        let mut observed = vec![0.0; probs.len()];
        for rep in &reports {
            let idle = rep.traces[g + 1].idle_before;
            assert_eq!(idle.fract(), 0.0);
            observed[idle as usize] += 1.0;
        }
        // Merge sparse cells so every expected count is at least 5.
        let mut stat = 0.0;
        let mut cells = 0;
        let (mut exp_acc, mut obs_acc) = (0.0, 0.0);
        for (p, o) in probs.iter().zip(&observed) {
            exp_acc += p * runs as f64;
            obs_acc += o;
            if exp_acc >= 5.0 {
                stat += (obs_acc - exp_acc).powi(2) / exp_acc;
                cells += 1;
                exp_acc = 0.0;
                obs_acc = 0.0;
            }
        }
        if exp_acc > 0.0 || obs_acc > 0.0 {
            stat += (obs_acc - exp_acc).powi(2) / exp_acc.max(1e-300);
            cells += 1;
        }
        if cells < 2 {
            continue;
        }
        assert!(
            stat <= critical(cells - 1),
            "gap {}: chi2 {stat} with {cells} cells",
            g + 1
        );
    }
}

#[test]
fn simulated_rank_and_idle_match_model() {
    let (spec, scheme, batches, total_idle, _) = optimum(512, 8);
    let reports = simulate_many(&spec, &scheme, batches, 200, 12).unwrap();
    let ranks: Vec<f64> = reports.iter().map(|r| r.mean_sink_rank()).collect();
    let idles: Vec<f64> = reports.iter().map(|r| r.total_idle).collect();
    let (rank, rank_se) = mean_and_se(&ranks);
    let (idle, idle_se) = mean_and_se(&idles);
    assert!(
        (rank - scheme.sink_rank_mean).abs() <= 3.0 * rank_se,
        "{rank} vs {}",
        scheme.sink_rank_mean
    );
    assert!(
        (idle - total_idle).abs() <= 3.0 * idle_se,
        "{idle} vs {total_idle}"
    );
}

#[test]
fn simulated_efficiency_near_optimum() {
    let (spec, scheme, _, _, efficiency) = optimum(100, 8);
    let summary = empirical_efficiency_batch(&spec, &scheme, 100, 200, 5).unwrap();
    assert!(
        (summary.mean - efficiency).abs() <= 0.02,
        "{} vs {efficiency}",
        summary.mean
    );
    assert!((summary.analytic - efficiency).abs() < 1e-12);

    let env = build_environment(&spec, spec.default_t_max()).unwrap();
    let heavier = solve_recoding(&env, scheme.t_avg + 2.0).unwrap();
    let other = empirical_efficiency_batch(&spec, &heavier, 100, 200, 5).unwrap();
    let sigma = (summary.stderr.powi(2) + other.stderr.powi(2)).sqrt();
    assert!(other.mean <= summary.mean + 2.0 * sigma);
}

#[test]
fn model_idle_and_simulation_agree_off_optimum() {
    let spec = ChannelSpec::reference(4);
    let env = build_environment(&spec, spec.default_t_max()).unwrap();
    let scheme = solve_recoding(&env, 3.3).unwrap();
    let tbar = send_count_distribution(env.h(), &scheme.t).unwrap();
    let exact = idle_time_markov(&tbar, &spec, 16).unwrap().total_idle;
    let mc = IdleMethod::MonteCarlo {
        trials: 20_000,
        seed: 4,
    }
    .evaluate(&tbar, &spec, 16)
    .unwrap();
    let reports = simulate_many(&spec, &scheme, 16, 4_000, 8).unwrap();
    let idles: Vec<f64> = reports.iter().map(|r| r.total_idle).collect();
    let (sim, se) = mean_and_se(&idles);
    assert!((sim - exact).abs() <= 3.0 * se);
    assert!((mc.total_idle - exact).abs() <= 3.0 * mc.stderr);
}
