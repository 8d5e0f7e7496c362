//! Idle time of the relay.
//!
//! `Q_b` is the time the source finishes batch `b + 1` minus the time the relay
//! finishes batch `b`. With `i` packets sent for a batch it evolves as
//! `Q_{b+1} = min(Q_b, 0) + ωM - i`; whenever it is positive the relay waits
//! `Q_b` units for the next batch. The expected total idle time over `B`
//! batches, initial delay `ωM` included, is `D`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channel::ChannelSpec;
use crate::error::{domain, Error, Result};

/// Trials handled by one Monte Carlo work item. Work items, not threads, own
/// RNG streams, so estimates do not depend on the thread pool size.
pub const MC_CHUNK: usize = 4096;

/// Default number of Monte Carlo trials.
pub const DEFAULT_TRIALS: usize = 100_000;

/// Probability of sending exactly `i` recoded packets for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SendCountDistribution {
    pub tbar: Vec<f64>,
}

impl SendCountDistribution {
    pub fn new(tbar: Vec<f64>) -> Result<Self> {
        if tbar.is_empty() || tbar.iter().any(|&p| !(p >= 0.0)) {
            return domain("send-count distribution must be nonempty and nonnegative");
        }
        let total: f64 = tbar.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return domain(format!("send-count distribution sums to {total}"));
        }
        Ok(Self { tbar })
    }

    /// Always sends exactly `count` packets.
    pub fn point_mass(count: usize) -> Self {
        let mut tbar = vec![0.0; count + 1];
        tbar[count] = 1.0;
        Self { tbar }
    }

    pub fn mean(&self) -> f64 {
        self.tbar
            .iter()
            .enumerate()
            .map(|(i, &p)| i as f64 * p)
            .sum()
    }

    pub fn max_count(&self) -> usize {
        self.tbar.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

/// Mixes the per-rank send counts: rank `r` sends `⌊t_r⌋` packets, plus one
/// more with probability `t_r - ⌊t_r⌋`.
pub fn send_count_distribution(h: &[f64], t: &[f64]) -> Result<SendCountDistribution> {
    if h.len() != t.len() {
        return domain(format!(
            "h has length {} but t has length {}",
            h.len(),
            t.len()
        ));
    }
    if h.iter().any(|&p| !(p >= 0.0)) || (h.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return domain("h must be a probability vector");
    }
    if t.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return domain("send counts must be finite and nonnegative");
    }
    let top = t.iter().map(|x| x.floor() as usize).max().unwrap_or(0);
    let mut tbar = vec![0.0; top + 2];
    for (&hr, &tr) in h.iter().zip(t) {
        let whole = tr.floor();
        let frac = tr - whole;
        let i = whole as usize;
        tbar[i] += hr * (1.0 - frac);
        tbar[i + 1] += hr * frac;
    }
    Ok(SendCountDistribution { tbar })
}

/// One transition of the slack process.
pub fn q_step(q: f64, sent: usize, spec: &ChannelSpec) -> f64 {
    q.min(0.0) + spec.source_batch_time() - sent as f64
}

/// Expected total idle time for one transfer of `batches` batches.
#[derive(Debug, Clone, PartialEq)]
pub struct IdleModel {
    pub spec: ChannelSpec,
    pub tbar: SendCountDistribution,
    pub batches: usize,
    /// `D`, initial delay included.
    pub total_idle: f64,
    /// Standard error of `total_idle`; zero for the exact chain.
    pub stderr: f64,
}

impl IdleModel {
    /// `D / B`.
    pub fn per_batch(&self) -> f64 {
        self.total_idle / self.batches as f64
    }
}

/// Which estimator computes `D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdleMethod {
    Markov,
    MonteCarlo { trials: usize, seed: u64 },
}

impl IdleMethod {
    /// Exact chain for integer omega, Monte Carlo otherwise.
    pub fn default_for(spec: &ChannelSpec, seed: u64) -> Self {
        if spec.integer_omega().is_some() {
            IdleMethod::Markov
        } else {
            IdleMethod::MonteCarlo {
                trials: DEFAULT_TRIALS,
                seed,
            }
        }
    }

    pub fn evaluate(
        &self,
        tbar: &SendCountDistribution,
        spec: &ChannelSpec,
        batches: usize,
    ) -> Result<IdleModel> {
        match *self {
            IdleMethod::Markov => idle_time_markov(tbar, spec, batches),
            IdleMethod::MonteCarlo { trials, seed } => {
                idle_time_monte_carlo(tbar, spec, batches, trials, seed)
            }
        }
    }
}

fn check_inputs(spec: &ChannelSpec, batches: usize) -> Result<()> {
    spec.validate()?;
    if batches == 0 {
        return domain("number of batches must be at least 1");
    }
    Ok(())
}

/// Seeded RNG owned by one work item of a parallel estimator.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Monte Carlo estimate of `D` with its standard error.
pub fn idle_time_monte_carlo(
    tbar: &SendCountDistribution,
    spec: &ChannelSpec,
    batches: usize,
    trials: usize,
    seed: u64,
) -> Result<IdleModel> {
    check_inputs(spec, batches)?;
    if trials == 0 {
        return domain("trials must be at least 1");
    }
    let sampler = WeightedIndex::new(&tbar.tbar)
        .map_err(|e| Error::Domain(format!("invalid send-count distribution: {e}")))?;
    let initial = spec.source_batch_time();

    let chunks = trials.div_ceil(MC_CHUNK);
    let partials: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = stream_rng(seed, chunk as u64);
            let n = MC_CHUNK.min(trials - chunk * MC_CHUNK);
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for _ in 0..n {
                // Starting from any q >= 0 gives the same first transition.
                let mut q = 0.0;
                let mut idle = 0.0;
                for _ in 1..batches {
                    q = q_step(q, sampler.sample(&mut rng), spec);
                    idle += q.max(0.0);
                }
                sum += idle;
                sum_sq += idle * idle;
            }
            (sum, sum_sq)
        })
        .collect();

    let (sum, sum_sq) = partials
        .iter()
        .fold((0.0, 0.0), |(a, b), &(s, q)| (a + s, b + q));
    let n = trials as f64;
    let mean = sum / n;
    let var = if trials > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(IdleModel {
        spec: *spec,
        tbar: tbar.clone(),
        batches,
        total_idle: initial + mean,
        stderr: (var / n).sqrt(),
    })
}

/// Walks the chain for gaps `1..batches`, handing each gap's distribution
/// over backlog `k = ωM - q` to `visit`.
///
/// The backlog drops by at most `ωM` per step, so at gap `g` a state with
/// `k ≥ ωM·(B - g)` stays busy through the last gap. Such mass is clamped
/// onto that cell; idle accounting is unaffected.
fn walk_chain(
    tbar: &SendCountDistribution,
    spec: &ChannelSpec,
    batches: usize,
    mut visit: impl FnMut(&[f64]),
) -> Result<usize> {
    check_inputs(spec, batches)?;
    let omega = spec
        .integer_omega()
        .ok_or(Error::UnsupportedOmega(spec.omega))?;
    let slot = omega * spec.batch_size;
    let sends: Vec<(usize, f64)> = tbar.tbar[..=tbar.max_count()]
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, p)| p > 0.0)
        .collect();
    let widest = tbar.max_count();
    let reach = widest * batches.saturating_sub(1);
    let cells = reach.min(slot * batches) + 1;

    let mut dist = vec![0.0; cells];
    let mut base = vec![0.0; cells];
    dist[0] = 1.0;
    let mut support = 1;
    for gap in 1..batches {
        let floor = (slot * (batches - gap)).min(cells - 1);
        let mut base_support = 1;
        for (k, cell) in dist[..support].iter_mut().enumerate() {
            let p = std::mem::take(cell);
            let b = k.saturating_sub(slot);
            base[b] += p;
            base_support = base_support.max(b + 1);
        }
        support = (base_support + widest).min(floor + 1);
        for b in 0..base_support {
            let pb = base[b];
            if pb == 0.0 {
                continue;
            }
            base[b] = 0.0;
            for &(i, pi) in &sends {
                dist[(b + i).min(floor)] += pb * pi;
            }
        }
        visit(&dist[..support]);
    }
    Ok(slot)
}

/// Exact `D` for integer omega: `ωM` plus the expected idle of each gap,
/// summed over gaps `1..B` (the chain has no useful stationary limit).
pub fn idle_time_markov(
    tbar: &SendCountDistribution,
    spec: &ChannelSpec,
    batches: usize,
) -> Result<IdleModel> {
    let slot = spec.integer_omega().map_or(0, |w| w * spec.batch_size);
    let mut idle = slot as f64;
    walk_chain(tbar, spec, batches, |dist| {
        idle += dist
            .iter()
            .take(slot)
            .enumerate()
            .map(|(k, &p)| p * (slot - k) as f64)
            .sum::<f64>();
    })?;
    Ok(IdleModel {
        spec: *spec,
        tbar: tbar.clone(),
        batches,
        total_idle: idle,
        stderr: 0.0,
    })
}

/// Distribution of the idle time in each gap `b = 1..B`: entry `[b-1][j]` is
/// the probability that the relay idles exactly `j` units before batch `b + 1`.
pub fn idle_gap_distributions(
    tbar: &SendCountDistribution,
    spec: &ChannelSpec,
    batches: usize,
) -> Result<Vec<Vec<f64>>> {
    let slot = spec.integer_omega().map_or(0, |w| w * spec.batch_size);
    let mut gaps = Vec::with_capacity(batches.saturating_sub(1));
    walk_chain(tbar, spec, batches, |dist| {
        let mut idle = vec![0.0; slot + 1];
        for (k, &p) in dist.iter().enumerate() {
            idle[slot.saturating_sub(k)] += p;
        }
        gaps.push(idle);
    })?;
    Ok(gaps)
}
