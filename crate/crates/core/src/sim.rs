//! Discrete-event simulation of one transfer over the relay.
//!
//! The source emits batch `b` (0-based) during `[bωM, (b+1)ωM)`. Each packet
//! independently reaches the relay and the sink. Once a batch is complete at
//! the source and the relay is free, the relay sends its recoded packets back
//! to back, one time unit each. Ranks follow the generic (large-field) rule:
//! every recoded packet the sink receives adds one rank until the sink holds
//! everything the relay knows about the batch.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channel::{innovative_rank_distribution, ChannelSpec};
use crate::error::{domain, Error, Result};
use crate::idle::{send_count_distribution, stream_rng, IdleMethod};
use crate::optimizer::{batches_for, efficiency_e1, efficiency_e2};
use crate::recoding::RecodingScheme;

/// Largest batch size the packet bitmasks can hold.
pub const MAX_SIM_BATCH: usize = 128;

/// What happened to one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTrace {
    pub batch_index: usize,
    /// Bit `j` set when source packet `j` reached the relay.
    pub relay_received: u128,
    /// Bit `j` set when the sink overheard source packet `j`.
    pub sink_overheard: u128,
    pub innovative_rank: usize,
    pub recoded_sent: usize,
    pub recoded_received: usize,
    pub sink_rank: usize,
    pub relay_start_time: f64,
    pub relay_finish_time: f64,
    /// Relay idle time right before this batch; for the first batch this is
    /// the initial delay.
    pub idle_before: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub traces: Vec<BatchTrace>,
    pub total_idle: f64,
    pub finish_time_relay: f64,
    pub finish_time_source: f64,
    pub decoding_time: f64,
    pub cumulative_sink_rank: usize,
    /// Delivered rank per unit of decoding time. Like the model's
    /// `E/(t_avg + D/B)`, this counts every delivered rank, including what
    /// the last batch delivers beyond the file size.
    pub empirical_efficiency: f64,
}

impl TransferReport {
    pub fn batches(&self) -> usize {
        self.traces.len()
    }

    pub fn mean_sink_rank(&self) -> f64 {
        self.cumulative_sink_rank as f64 / self.traces.len() as f64
    }
}

#[derive(Debug, Clone, Copy)]
enum Stop {
    Batches(usize),
    Rank { target: usize, max_batches: usize },
}

fn check_scheme(spec: &ChannelSpec, scheme: &RecodingScheme) -> Result<()> {
    spec.validate()?;
    if spec.batch_size > MAX_SIM_BATCH {
        return domain(format!(
            "simulation supports batch sizes up to {MAX_SIM_BATCH}, got {}",
            spec.batch_size
        ));
    }
    if scheme.t.len() != spec.batch_size + 1 {
        return domain(format!(
            "scheme has {} entries, expected {}",
            scheme.t.len(),
            spec.batch_size + 1
        ));
    }
    if scheme.t.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return domain("scheme send counts must be finite and nonnegative");
    }
    Ok(())
}

fn draw_mask(rng: &mut ChaCha8Rng, packets: usize, loss: f64) -> u128 {
    (0..packets).fold(0u128, |mask, j| {
        if rng.random::<f64>() >= loss {
            mask | (1 << j)
        } else {
            mask
        }
    })
}

fn run(
    spec: &ChannelSpec,
    scheme: &RecodingScheme,
    stop: Stop,
    rng: &mut ChaCha8Rng,
) -> Result<TransferReport> {
    let m = spec.batch_size;
    let slot = spec.source_batch_time();
    let mut traces = Vec::new();
    let mut relay_free: f64 = 0.0;
    let mut total_idle = 0.0;
    let mut cumulative = 0usize;
    loop {
        match stop {
            Stop::Batches(n) if traces.len() >= n => break,
            Stop::Rank { target, .. } if cumulative >= target => break,
            Stop::Rank {
                target,
                max_batches,
            } if traces.len() >= max_batches => {
                return Err(Error::NonTermination {
                    target,
                    max_batches,
                })
            }
            _ => {}
        }
        let b = traces.len();
        let relay_received = draw_mask(rng, m, spec.p_sr);
        let sink_overheard = draw_mask(rng, m, spec.p_sd);
        let innovative_rank = (relay_received & !sink_overheard).count_ones() as usize;

        let planned = scheme.t[innovative_rank];
        let whole = planned.floor();
        let extra = rng.random::<f64>() < planned - whole;
        let recoded_sent = whole as usize + usize::from(extra);
        let recoded_received = (0..recoded_sent)
            .filter(|_| rng.random::<f64>() >= spec.p_rd)
            .count();
        let sink_rank =
            sink_overheard.count_ones() as usize + recoded_received.min(innovative_rank);

        let ready = (b + 1) as f64 * slot;
        let relay_start_time = relay_free.max(ready);
        let idle_before = relay_start_time - relay_free;
        let relay_finish_time = relay_start_time + recoded_sent as f64;
        relay_free = relay_finish_time;
        total_idle += idle_before;
        cumulative += sink_rank;
        traces.push(BatchTrace {
            batch_index: b,
            relay_received,
            sink_overheard,
            innovative_rank,
            recoded_sent,
            recoded_received,
            sink_rank,
            relay_start_time,
            relay_finish_time,
            idle_before,
        });
    }
    let finish_time_source = traces.len() as f64 * slot;
    let decoding_time = relay_free.max(finish_time_source);
    Ok(TransferReport {
        total_idle,
        finish_time_relay: relay_free,
        finish_time_source,
        decoding_time,
        cumulative_sink_rank: cumulative,
        empirical_efficiency: cumulative as f64 / decoding_time,
        traces,
    })
}

/// Simulates exactly `batches` batches.
pub fn simulate_transfer(
    spec: &ChannelSpec,
    scheme: &RecodingScheme,
    batches: usize,
    seed: u64,
) -> Result<TransferReport> {
    simulate_run(spec, scheme, batches, seed, 0)
}

/// Simulates run number `run` of a seeded experiment; each run owns the RNG
/// stream `(seed, run)`.
pub fn simulate_run(
    spec: &ChannelSpec,
    scheme: &RecodingScheme,
    batches: usize,
    seed: u64,
    run: u64,
) -> Result<TransferReport> {
    check_scheme(spec, scheme)?;
    if batches == 0 {
        return domain("number of batches must be at least 1");
    }
    run_with(spec, scheme, Stop::Batches(batches), seed, run)
}

fn run_with(
    spec: &ChannelSpec,
    scheme: &RecodingScheme,
    stop: Stop,
    seed: u64,
    run_index: u64,
) -> Result<TransferReport> {
    let mut rng = stream_rng(seed, run_index);
    run(spec, scheme, stop, &mut rng)
}

/// Independent fixed-length transfers, ordered by run index.
pub fn simulate_many(
    spec: &ChannelSpec,
    scheme: &RecodingScheme,
    batches: usize,
    runs: usize,
    seed: u64,
) -> Result<Vec<TransferReport>> {
    (0..runs as u64)
        .into_par_iter()
        .map(|i| simulate_run(spec, scheme, batches, seed, i))
        .collect()
}

/// Sample mean and variance, shifted by the first value so identical samples
/// give exactly that value and zero spread.
fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let shift = xs[0];
    let mean_offset = xs.iter().map(|x| x - shift).sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter()
            .map(|x| (x - shift - mean_offset).powi(2))
            .sum::<f64>()
            / (n - 1.0)
    } else {
        0.0
    };
    (shift + mean_offset, var)
}

/// Outcome of repeated transfers of an `F`-packet file.
#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencySummary {
    pub runs: usize,
    pub mean: f64,
    pub stderr: f64,
    /// Model prediction `min{E/(t_avg + D/B), E/(ωM)}` for the same scheme.
    pub analytic: f64,
    pub mean_batches: f64,
    /// Mean of `F / decoding time`, which ignores the last batch's surplus.
    pub file_mean: f64,
    pub reports: Vec<TransferReport>,
}

/// Repeats transfers until the sink collects `F` ranks and measures the
/// delivered rank per unit time. A run fails after `10·⌈F/E⌉` batches.
pub fn empirical_efficiency_batch(
    spec: &ChannelSpec,
    scheme: &RecodingScheme,
    input_packets: usize,
    runs: usize,
    seed: u64,
) -> Result<EfficiencySummary> {
    check_scheme(spec, scheme)?;
    if runs == 0 {
        return domain("runs must be at least 1");
    }
    if input_packets == 0 {
        return domain("number of input packets must be at least 1");
    }
    let nominal = batches_for(input_packets, scheme.sink_rank_mean)?;
    let stop = Stop::Rank {
        target: input_packets,
        max_batches: 10 * nominal,
    };
    let reports: Vec<TransferReport> = (0..runs as u64)
        .into_par_iter()
        .map(|i| run_with(spec, scheme, stop, seed, i))
        .collect::<Result<_>>()?;

    let efficiencies: Vec<f64> = reports.iter().map(|r| r.empirical_efficiency).collect();
    let (mean, var) = mean_and_variance(&efficiencies);
    let per_file: Vec<f64> = reports
        .iter()
        .map(|r| input_packets as f64 / r.decoding_time)
        .collect();
    let file_mean = mean_and_variance(&per_file).0;
    let mean_batches = reports.iter().map(|r| r.batches() as f64).sum::<f64>() / runs as f64;

    let h = innovative_rank_distribution(spec)?;
    let tbar = send_count_distribution(&h, &scheme.t)?;
    let idle = IdleMethod::default_for(spec, seed).evaluate(&tbar, spec, nominal)?;
    let e = scheme.sink_rank_mean;
    let analytic =
        efficiency_e2(e, scheme.t_avg, idle.total_idle, nominal)?.min(efficiency_e1(e, spec));

    Ok(EfficiencySummary {
        runs,
        mean,
        stderr: (var / runs as f64).sqrt(),
        analytic,
        mean_batches,
        file_mean,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lossless(m: usize) -> ChannelSpec {
        ChannelSpec::new(m, 1.0, 0.0, 0.0, 1.0).unwrap()
    }

    fn flat_scheme(m: usize, t: f64) -> RecodingScheme {
        RecodingScheme {
            t: vec![t; m + 1],
            t_avg: t,
            sink_rank_mean: 0.0,
        }
    }

    #[test]
    fn lossless_timeline_is_deterministic() {
        let m = 4;
        let b = 5;
        let rep = simulate_transfer(&lossless(m), &flat_scheme(m, m as f64), b, 9).unwrap();
        assert!(rep
            .traces
            .iter()
            .all(|t| t.sink_rank == m && t.innovative_rank == m));
        assert_eq!(rep.decoding_time, (m * (b + 1)) as f64);
        assert_eq!(rep.total_idle, m as f64);
        assert_eq!(rep.finish_time_source, (b * m) as f64);
        for (i, t) in rep.traces.iter().enumerate() {
            assert_eq!(t.relay_start_time, ((i + 1) * m) as f64);
            assert_eq!(t.relay_finish_time, ((i + 2) * m) as f64);
        }
    }

    #[test]
    fn silent_relay() {
        let spec = ChannelSpec::reference(8);
        let rep = simulate_transfer(&spec, &flat_scheme(8, 0.0), 12, 5).unwrap();
        let overheard: usize = rep
            .traces
            .iter()
            .map(|t| t.sink_overheard.count_ones() as usize)
            .sum();
        assert_eq!(rep.cumulative_sink_rank, overheard);
        assert_eq!(rep.decoding_time, 12.0 * 8.0);
        assert_eq!(rep.total_idle, 12.0 * 8.0);
    }

    #[test]
    fn trace_invariants() {
        let spec = ChannelSpec::reference(8);
        let scheme = RecodingScheme {
            t: (0..=8).map(|r| r as f64 * 1.3).collect(),
            t_avg: 0.0,
            sink_rank_mean: 0.0,
        };
        let rep = simulate_transfer(&spec, &scheme, 200, 11).unwrap();
        let mut prev_finish = 0.0;
        for t in &rep.traces {
            let union = (t.relay_received | t.sink_overheard).count_ones() as usize;
            assert!(t.sink_rank <= union && t.sink_rank <= 8);
            assert_eq!(
                t.sink_rank == union,
                t.recoded_received >= t.innovative_rank
            );
            assert!(t.innovative_rank <= t.relay_received.count_ones() as usize);
            assert!(t.relay_start_time >= (t.batch_index + 1) as f64 * 8.0);
            assert!(t.relay_start_time >= prev_finish);
            assert_eq!(
                t.relay_finish_time - t.relay_start_time,
                t.recoded_sent as f64
            );
            prev_finish = t.relay_finish_time;
        }
        let idle: f64 = rep.traces.iter().map(|t| t.idle_before).sum();
        assert_eq!(idle, rep.total_idle);
        let sent: usize = rep.traces.iter().map(|t| t.recoded_sent).sum();
        assert!((rep.finish_time_relay - (sent as f64 + rep.total_idle)).abs() < 1e-9);
    }

    #[test]
    fn seeded_runs_repeat() {
        let spec = ChannelSpec::reference(8);
        let scheme = flat_scheme(8, 6.5);
        let a = simulate_transfer(&spec, &scheme, 20, 77).unwrap();
        let b = simulate_transfer(&spec, &scheme, 20, 77).unwrap();
        assert_eq!(a, b);
        let c = simulate_transfer(&spec, &scheme, 20, 78).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn lossless_efficiency_has_no_variance() {
        let m = 4;
        let mut scheme = flat_scheme(m, m as f64);
        scheme.sink_rank_mean = m as f64;
        let s = empirical_efficiency_batch(&lossless(m), &scheme, 20, 10, 1).unwrap();
        assert_eq!(s.stderr, 0.0);
        // 5 batches: relay finishes at 4 + 5*4 = 24.
        assert_eq!(s.mean, 20.0 / 24.0);
        assert_eq!(s.file_mean, 20.0 / 24.0);
        assert_eq!(s.mean_batches, 5.0);
    }

    #[test]
    fn surplus_of_last_batch_counts_as_delivered() {
        let m = 4;
        let mut scheme = flat_scheme(m, m as f64);
        scheme.sink_rank_mean = m as f64;
        let s = empirical_efficiency_batch(&lossless(m), &scheme, 18, 3, 1).unwrap();
        assert_eq!(s.mean, 20.0 / 24.0);
        assert_eq!(s.file_mean, 18.0 / 24.0);
    }

    #[test]
    fn guard_stops_hopeless_schemes() {
        let spec = ChannelSpec::new(8, 1.0, 0.2, 0.2, 1.0).unwrap();
        let mut scheme = flat_scheme(8, 0.0);
        // Nothing is overheard and the relay stays silent.
        scheme.sink_rank_mean = 6.0;
        let err = empirical_efficiency_batch(&spec, &scheme, 200, 4, 3).unwrap_err();
        assert!(matches!(err, Error::NonTermination { target: 200, .. }));
    }

    #[test]
    fn rejects_bad_input() {
        let spec = ChannelSpec::reference(8);
        assert!(simulate_transfer(&spec, &flat_scheme(4, 1.0), 3, 1).is_err());
        assert!(simulate_transfer(&spec, &flat_scheme(8, 1.0), 0, 1).is_err());
        assert!(simulate_transfer(&spec, &flat_scheme(8, -1.0), 3, 1).is_err());
        assert!(empirical_efficiency_batch(&spec, &flat_scheme(8, 1.0), 10, 0, 1).is_err());
    }
}
