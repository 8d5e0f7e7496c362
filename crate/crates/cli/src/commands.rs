use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use bats_relay::channel::{build_environment, RankEnvironment};
use bats_relay::idle::{idle_time_markov, send_count_distribution, IdleMethod};
use bats_relay::optimizer::{batches_for, optimize, sweep, upper_bound_point};
use bats_relay::recoding::{sink_rank, RecodingScheme};
use bats_relay::sim::empirical_efficiency_batch;

use crate::config::RunConfig;
use crate::CliError;

fn environment(cfg: &RunConfig) -> Result<RankEnvironment, CliError> {
    if cfg.spec.p_sd == 0.0 {
        log::warn!("p_sd = 0: the sink overhears every source packet and the relay adds nothing");
    }
    build_environment(&cfg.spec, cfg.t_max).map_err(|e| CliError::Usage(e.to_string()))
}

/// Where CSV goes: the `--out` file, or standard output.
fn csv_sink(
    path: Option<&Path>,
    out: &mut dyn Write,
    body: impl FnOnce(&mut dyn Write) -> io::Result<()>,
) -> anyhow::Result<()> {
    match path {
        Some(p) => {
            let file = File::create(p).with_context(|| format!("cannot create {}", p.display()))?;
            let mut w = BufWriter::new(file);
            body(&mut w).with_context(|| format!("cannot write {}", p.display()))?;
            w.flush()
                .with_context(|| format!("cannot write {}", p.display()))?;
        }
        None => body(out)?,
    }
    Ok(())
}

fn optimal_scheme(
    cfg: &RunConfig,
    env: &RankEnvironment,
) -> Result<(RecodingScheme, usize), CliError> {
    let res = optimize(cfg.f, env, &cfg.optimizer()?)?;
    Ok((res.best.scheme(), res.best.batches))
}

/// Reads `M + 1` send counts separated by whitespace or commas.
fn read_scheme(path: &Path, env: &RankEnvironment) -> Result<RecodingScheme, CliError> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let t = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let want = env.batch_size() + 1;
    if t.len() != want {
        return Err(CliError::Usage(format!(
            "{}: expected {want} send counts, found {}",
            path.display(),
            t.len()
        )));
    }
    let rank = sink_rank(env, &t).map_err(|e| CliError::Usage(e.to_string()))?;
    let t_avg = env.h().iter().zip(&t).map(|(h, x)| h * x).sum();
    Ok(RecodingScheme {
        t,
        t_avg,
        sink_rank_mean: rank,
    })
}

pub fn optimize_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    if cfg.is_stochastic() {
        cfg.require_seed("optimize with Monte Carlo idle estimates")?;
    }
    let env = environment(cfg)?;
    let res = optimize(cfg.f, &env, &cfg.optimizer()?)?;
    let b = &res.best;
    let m = cfg.spec.batch_size;
    writeln!(
        out,
        "{:>6} {:>4} {:>5} {:>8} {:>8} {:>10} {:>11}",
        "F", "M", "B", "D/B", "t_avg", "efficiency", "upper_bound"
    )?;
    writeln!(
        out,
        "{:>6} {:>4} {:>5} {:>8.4} {:>8.4} {:>10.4} {:>11.4}",
        cfg.f,
        m,
        b.batches,
        b.idle_per_batch(),
        b.t_avg,
        b.efficiency,
        res.upper_bound
    )?;
    if let Some(path) = &cfg.output_path {
        csv_sink(Some(path), out, |w| {
            writeln!(w, "F,M,B,D_over_B,tavg,eff,E,upper_bound")?;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                cfg.f,
                m,
                b.batches,
                b.idle_per_batch(),
                b.t_avg,
                b.efficiency,
                b.sink_rank,
                res.upper_bound
            )
        })?;
    }
    Ok(())
}

pub fn sweep_cmd(
    cfg: &RunConfig,
    from: f64,
    to: Option<f64>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    if cfg.is_stochastic() {
        cfg.require_seed("sweep with Monte Carlo idle estimates")?;
    }
    let env = environment(cfg)?;
    let to = to.unwrap_or((2 * cfg.spec.batch_size).min(cfg.t_max) as f64);
    if !(from >= 0.0) || !(to >= from) || to > cfg.t_max as f64 {
        return Err(CliError::Usage(format!(
            "range [{from}, {to}] must lie inside [0, t_max={}]",
            cfg.t_max
        )));
    }
    let points = sweep(cfg.f, &env, (from, to), cfg.grid_step, &cfg.idle_method()?)?;
    csv_sink(cfg.output_path.as_deref(), out, |w| {
        writeln!(w, "tavg,eff1,eff2,E,B,D_over_B")?;
        for p in &points {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                p.t_avg,
                p.relay_bound,
                p.source_bound,
                p.sink_rank,
                p.batches,
                p.idle_per_batch()
            )?;
        }
        Ok(())
    })?;
    Ok(())
}

pub fn idle_cmd(
    cfg: &RunConfig,
    t_file: Option<&PathBuf>,
    batches: Option<usize>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let env = environment(cfg)?;
    if cfg.is_stochastic() {
        cfg.require_seed("Monte Carlo idle estimates")?;
    }
    let (scheme, optimal_b) = match t_file {
        Some(path) => {
            let s = read_scheme(path, &env)?;
            let b = batches_for(cfg.f, s.sink_rank_mean)?;
            (s, b)
        }
        None => optimal_scheme(cfg, &env)?,
    };
    let b = batches.unwrap_or(optimal_b);
    if b == 0 {
        return Err(CliError::Usage("--batches must be at least 1".into()));
    }
    let tbar = send_count_distribution(env.h(), &scheme.t)?;
    writeln!(
        out,
        "t_avg {:.4}  E {:.4}  B {b}",
        scheme.t_avg, scheme.sink_rank_mean
    )?;
    writeln!(
        out,
        "{:<8} {:>10} {:>8} {:>8}",
        "method", "D", "D/B", "stderr"
    )?;
    let mut row = |name: &str, d: f64, se: f64| {
        writeln!(
            out,
            "{:<8} {:>10.4} {:>8.4} {:>8.4}",
            name,
            d,
            d / b as f64,
            se
        )
    };
    if cfg.spec.integer_omega().is_some() {
        let exact = idle_time_markov(&tbar, &cfg.spec, b)?;
        row("markov", exact.total_idle, exact.stderr)?;
    }
    // Monte Carlo runs whenever a seed makes it reproducible.
    if let Some(seed) = cfg.seed {
        let mc = IdleMethod::MonteCarlo {
            trials: cfg.trials,
            seed,
        }
        .evaluate(&tbar, &cfg.spec, b)?;
        row("mc", mc.total_idle, mc.stderr)?;
    }
    Ok(())
}

pub fn upper_bound_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let env = environment(cfg)?;
    let (t_avg, value) = upper_bound_point(&env);
    writeln!(out, "{:>8} {:>11}", "t_avg", "upper_bound")?;
    writeln!(out, "{:>8.4} {:>11.4}", t_avg, value)?;
    Ok(())
}

pub fn simulate_cmd(
    cfg: &RunConfig,
    runs: usize,
    t_file: Option<&PathBuf>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let seed = cfg.require_seed("simulate")?;
    if runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    let env = environment(cfg)?;
    let scheme = match t_file {
        Some(path) => read_scheme(path, &env)?,
        None => optimal_scheme(cfg, &env)?.0,
    };
    let summary = empirical_efficiency_batch(&cfg.spec, &scheme, cfg.f, runs, seed)?;
    let n = runs as f64;
    let idle = summary.reports.iter().map(|r| r.total_idle).sum::<f64>() / n;
    let rank = summary
        .reports
        .iter()
        .map(|r| r.mean_sink_rank())
        .sum::<f64>()
        / n;
    writeln!(
        out,
        "{:>5} {:>8} {:>10} {:>8} {:>9} {:>8} {:>8} {:>8} {:>9}",
        "runs", "t_avg", "efficiency", "stderr", "analytic", "F/time", "batches", "E", "idle"
    )?;
    writeln!(
        out,
        "{:>5} {:>8.4} {:>10.4} {:>8.4} {:>9.4} {:>8.4} {:>8.4} {:>8.4} {:>9.4}",
        runs,
        scheme.t_avg,
        summary.mean,
        summary.stderr,
        summary.analytic,
        summary.file_mean,
        summary.mean_batches,
        rank,
        idle
    )?;
    if let Some(path) = &cfg.output_path {
        csv_sink(Some(path), out, |w| {
            writeln!(
                w,
                "run,batch,innov_rank,sent,received,sink_rank,idle_before,relay_start,relay_finish"
            )?;
            for (run, rep) in summary.reports.iter().enumerate() {
                for t in &rep.traces {
                    writeln!(
                        w,
                        "{},{},{},{},{},{},{},{},{}",
                        run,
                        t.batch_index,
                        t.innovative_rank,
                        t.recoded_sent,
                        t.recoded_received,
                        t.sink_rank,
                        t.idle_before,
                        t.relay_start_time,
                        t.relay_finish_time
                    )?;
                }
            }
            Ok(())
        })?;
    }
    Ok(())
}
