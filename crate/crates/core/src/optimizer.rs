//! Time-efficiency optimization over the average recoding budget `t_avg`.
//!
//! For a fixed `t_avg` the efficiency is `min{E/(t_avg + D/B), E/(ωM)}` with
//! `B = ⌈F/E⌉` batches. As `t_avg` grows, `B` drops in steps, and between two
//! steps the first objective is close to linear. The search therefore scores
//! the two ends of every constant-`B` segment, keeps the two segments next to
//! the best end, and scans them on a fine grid.

use crate::channel::{ChannelSpec, RankEnvironment};
use crate::error::{domain, Error, Result};
use crate::idle::{send_count_distribution, IdleMethod};
use crate::recoding::{GreedyState, RecodingScheme};
use rayon::prelude::*;

/// Default `t_avg` resolution of the refinement scan.
pub const DEFAULT_GRID_STEP: f64 = 0.01;

/// Default back-off from the right end of a segment, in `t_avg` mass.
pub const DEFAULT_EPSILON_EDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub grid_step: f64,
    pub epsilon_edge: f64,
    pub idle_method: IdleMethod,
}

impl OptimizerConfig {
    /// Defaults for `spec`; `seed` is only used when omega forces Monte Carlo.
    pub fn for_spec(spec: &ChannelSpec, seed: u64) -> Self {
        Self {
            grid_step: DEFAULT_GRID_STEP,
            epsilon_edge: DEFAULT_EPSILON_EDGE,
            idle_method: IdleMethod::default_for(spec, seed),
        }
    }
}

/// One evaluated operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyPoint {
    pub t_avg: f64,
    pub t: Vec<f64>,
    /// Expected sink rank per batch, `E`.
    pub sink_rank: f64,
    /// `B = ⌈F/E⌉`.
    pub batches: usize,
    /// Expected total idle time `D`.
    pub total_idle: f64,
    pub idle_stderr: f64,
    /// `min{E/(t_avg + D/B), E/(ωM)}`.
    pub efficiency: f64,
    pub source_bound: f64,
    pub relay_bound: f64,
}

impl EfficiencyPoint {
    pub fn idle_per_batch(&self) -> f64 {
        self.total_idle / self.batches as f64
    }

    pub fn scheme(&self) -> RecodingScheme {
        RecodingScheme {
            t: self.t.clone(),
            t_avg: self.t_avg,
            sink_rank_mean: self.sink_rank,
        }
    }
}

/// The stretch of `t_avg` over which `⌈F/E⌉` stays at `batches`.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub batches: usize,
    pub left: EfficiencyPoint,
    pub right: EfficiencyPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationResult {
    pub best: EfficiencyPoint,
    pub segments: Vec<Segment>,
    pub upper_bound: f64,
    pub search_interval: (f64, f64),
}

/// `E/(ωM)`: efficiency when the source is the bottleneck.
pub fn efficiency_e1(sink_rank: f64, spec: &ChannelSpec) -> f64 {
    sink_rank / spec.source_batch_time()
}

/// `E/(t_avg + D/B)`: efficiency when the relay is the bottleneck.
pub fn efficiency_e2(sink_rank: f64, t_avg: f64, total_idle: f64, batches: usize) -> Result<f64> {
    if batches == 0 {
        return domain("number of batches must be at least 1");
    }
    let denom = t_avg + total_idle / batches as f64;
    if !(denom > 0.0) {
        return domain(format!(
            "relay time per batch must be positive, got {denom}"
        ));
    }
    Ok(sink_rank / denom)
}

/// `⌈F/E⌉`, treating quotients within `1e-9` of an integer as that integer so
/// a rank that hits `F/B` exactly keeps `B`.
pub fn batches_for(input_packets: usize, sink_rank: f64) -> Result<usize> {
    if !(sink_rank > 0.0) {
        return domain(format!(
            "expected sink rank must be positive, got {sink_rank}"
        ));
    }
    let ratio = input_packets as f64 / sink_rank;
    let nearest = ratio.round();
    let batches = if (ratio - nearest).abs() <= 1e-9 * ratio.max(1.0) {
        nearest
    } else {
        ratio.ceil()
    };
    Ok((batches as usize).max(1))
}

fn check_packets(input_packets: usize) -> Result<()> {
    if input_packets == 0 {
        return domain("number of input packets must be at least 1");
    }
    Ok(())
}

/// Scores the allocation held by `state`, reporting it at `t_avg`.
fn evaluate_state(
    input_packets: usize,
    env: &RankEnvironment,
    state: &GreedyState<'_>,
    t_avg: f64,
    method: &IdleMethod,
) -> Result<EfficiencyPoint> {
    evaluate_allocation(
        input_packets,
        env,
        state.t().to_vec(),
        state.sink_rank(),
        t_avg,
        method,
    )
}

fn evaluate_allocation(
    input_packets: usize,
    env: &RankEnvironment,
    t: Vec<f64>,
    sink_rank: f64,
    t_avg: f64,
    method: &IdleMethod,
) -> Result<EfficiencyPoint> {
    let spec = env.spec();
    let batches = batches_for(input_packets, sink_rank)?;
    let tbar = send_count_distribution(env.h(), &t)?;
    let idle = method.evaluate(&tbar, spec, batches)?;
    let relay_bound = efficiency_e2(sink_rank, t_avg, idle.total_idle, batches)?;
    let source_bound = efficiency_e1(sink_rank, spec);
    Ok(EfficiencyPoint {
        t_avg,
        t,
        sink_rank,
        batches,
        total_idle: idle.total_idle,
        idle_stderr: idle.stderr,
        efficiency: relay_bound.min(source_bound),
        source_bound,
        relay_bound,
    })
}

/// Scores the optimal allocation for a single `t_avg`.
pub fn evaluate_point(
    input_packets: usize,
    env: &RankEnvironment,
    t_avg: f64,
    method: &IdleMethod,
) -> Result<EfficiencyPoint> {
    check_packets(input_packets)?;
    if !(t_avg >= 0.0) || t_avg > env.t_max() as f64 {
        return domain(format!("t_avg={t_avg} outside [0, {}]", env.t_max()));
    }
    let mut state = GreedyState::new(env);
    state.add_mass(t_avg);
    evaluate_state(input_packets, env, &state, t_avg, method)
}

/// Sink rank reached with every supported rank at `t_max`.
fn saturated_rank(env: &RankEnvironment) -> f64 {
    let mut state = GreedyState::new(env);
    state.add_mass(env.t_max() as f64);
    state.sink_rank()
}

/// End points of the constant-`B` segment.
///
/// The left end is the smallest `t_avg` whose expected sink rank reaches `F/B`
/// (zero when overhearing alone already does). The right end is `epsilon_edge`
/// short of the `t_avg` where the rank reaches `F/(B-1)`, or `t_max` when that
/// rank is out of reach.
pub fn segment_endpoints(
    input_packets: usize,
    env: &RankEnvironment,
    batches: usize,
    config: &OptimizerConfig,
) -> Result<Segment> {
    check_packets(input_packets)?;
    if batches == 0 {
        return domain("number of batches must be at least 1");
    }
    let f = input_packets as f64;
    let low = env.overheard();
    let high = saturated_rank(env);
    let left_target = f / batches as f64;
    let right_target = if batches > 1 {
        f / (batches - 1) as f64
    } else {
        f64::INFINITY
    };
    if left_target > high || right_target <= low {
        return Err(Error::InfeasibleBatches {
            batches,
            target: left_target,
            low,
            high,
        });
    }

    let mut state = GreedyState::new(env);
    state.advance_to_rank(left_target)?;
    let left_t = state.t_avg();
    let left = evaluate_state(input_packets, env, &state, left_t, &config.idle_method)?;

    let right_t = if right_target > high {
        env.t_max() as f64
    } else {
        let mut probe = state.clone();
        probe.advance_to_rank(right_target)?;
        (probe.t_avg() - config.epsilon_edge).max(left_t)
    };
    state.add_mass(right_t - left_t);
    let right = evaluate_state(input_packets, env, &state, right_t, &config.idle_method)?;
    if right.batches != batches || left.batches != batches {
        log::warn!(
            "segment B={batches} end points evaluate to B={} and B={}",
            left.batches,
            right.batches
        );
    }
    Ok(Segment {
        batches,
        left,
        right,
    })
}

/// Grid of `t_avg` values: both interval ends plus every multiple of `step`
/// strictly between them.
pub fn grid_points(interval: (f64, f64), step: f64) -> Vec<f64> {
    let (a, b) = interval;
    let mut points = vec![a];
    // Dividing by an integer reciprocal keeps 6.1 as 6.1 rather than 610 * 0.01.
    let per_unit = (1.0 / step).round();
    let exact_reciprocal = (per_unit * step - 1.0).abs() < 1e-12;
    let at = |k: i64| {
        if exact_reciprocal {
            k as f64 / per_unit
        } else {
            k as f64 * step
        }
    };
    let mut k = (a / step).floor() as i64 + 1;
    loop {
        let x = at(k);
        if x >= b - 1e-9 * step {
            break;
        }
        if x > a + 1e-9 * step {
            points.push(x);
        }
        k += 1;
    }
    if b > a {
        points.push(b);
    }
    points
}

/// Scans `interval` at resolution `step`, carrying one greedy allocation
/// forward, and returns every evaluated point in order.
pub fn sweep(
    input_packets: usize,
    env: &RankEnvironment,
    interval: (f64, f64),
    step: f64,
    method: &IdleMethod,
) -> Result<Vec<EfficiencyPoint>> {
    check_packets(input_packets)?;
    let (a, b) = interval;
    if !(step > 0.0) || !step.is_finite() {
        return domain(format!("grid step must be positive, got {step}"));
    }
    if !(a >= 0.0) || !(b >= a) || b > env.t_max() as f64 {
        return domain(format!("interval [{a}, {b}] outside [0, {}]", env.t_max()));
    }
    // The allocation advances in order; the idle chains are independent.
    let mut state = GreedyState::new(env);
    let mut allocations = Vec::new();
    for x in grid_points(interval, step) {
        state.add_mass(x - state.t_avg());
        if state.sink_rank() > 0.0 {
            allocations.push((x, state.t().to_vec(), state.sink_rank()));
        }
    }
    allocations
        .into_par_iter()
        .map(|(x, t, rank)| evaluate_allocation(input_packets, env, t, rank, x, method))
        .collect()
}

/// Best efficiency on the grid over `interval`.
pub fn grid_search(
    input_packets: usize,
    env: &RankEnvironment,
    interval: (f64, f64),
    step: f64,
    method: &IdleMethod,
) -> Result<EfficiencyPoint> {
    sweep(input_packets, env, interval, step, method)?
        .into_iter()
        .reduce(|best, p| {
            if p.efficiency > best.efficiency {
                p
            } else {
                best
            }
        })
        .ok_or_else(|| Error::Domain("no grid point has a positive sink rank".into()))
}

/// Range of batch counts worth a segment: from the fewest batches any
/// allocation allows down to the count reached with one recoded packet per batch.
pub fn feasible_batches(input_packets: usize, env: &RankEnvironment) -> Result<(usize, usize)> {
    let fewest = batches_for(input_packets, saturated_rank(env))?;
    let mut state = GreedyState::new(env);
    state.add_mass(1.0f64.min(env.t_max() as f64));
    let most = batches_for(input_packets, state.sink_rank())?;
    Ok((fewest, most.max(fewest)))
}

/// Full search: segment end points, then a grid scan over the two segments
/// that border the best end point.
pub fn optimize(
    input_packets: usize,
    env: &RankEnvironment,
    config: &OptimizerConfig,
) -> Result<OptimizationResult> {
    check_packets(input_packets)?;
    let (fewest, most) = feasible_batches(input_packets, env)?;
    let mut segments = Vec::new();
    for batches in fewest..=most {
        match segment_endpoints(input_packets, env, batches, config) {
            Ok(seg) => segments.push(seg),
            Err(Error::InfeasibleBatches { .. }) => {
                log::info!("B={batches} has no feasible t_avg; skipped")
            }
            Err(e) => return Err(e),
        }
    }
    if segments.is_empty() {
        return Err(Error::InfeasibleBatches {
            batches: fewest,
            target: input_packets as f64 / fewest as f64,
            low: env.overheard(),
            high: env.max_sink_rank(),
        });
    }
    // Segments are ordered by decreasing t_avg (increasing B).
    segments.sort_by_key(|s| std::cmp::Reverse(s.batches));

    let mut best_idx = 0;
    let mut best_is_left = true;
    let mut best_f = f64::NEG_INFINITY;
    for (i, seg) in segments.iter().enumerate() {
        for (is_left, p) in [(true, &seg.left), (false, &seg.right)] {
            if p.efficiency > best_f {
                best_f = p.efficiency;
                best_idx = i;
                best_is_left = is_left;
            }
        }
    }
    let (lo_seg, hi_seg) = if best_is_left {
        (best_idx.saturating_sub(1), best_idx)
    } else {
        (best_idx, (best_idx + 1).min(segments.len() - 1))
    };
    let interval = (segments[lo_seg].left.t_avg, segments[hi_seg].right.t_avg);
    let refined = grid_search(
        input_packets,
        env,
        interval,
        config.grid_step,
        &config.idle_method,
    )?;
    let endpoint = if best_is_left {
        &segments[best_idx].left
    } else {
        &segments[best_idx].right
    };
    let best = if endpoint.efficiency > refined.efficiency {
        endpoint.clone()
    } else {
        refined
    };
    Ok(OptimizationResult {
        best,
        segments,
        upper_bound: solve_upper_bound(env),
        search_interval: interval,
    })
}

/// `(t_avg, value)` maximizing `E*(t_avg) / max{ωM, t_avg}`, the efficiency
/// limit as `D/B → 0`.
///
/// `E*` is concave and piecewise linear with kinks where the greedy fills a
/// whole packet. Below `ωM` the ratio grows with `E*`; above it every linear
/// piece gives a ratio monotone in `t_avg`. So the maximum sits at `ωM` or at
/// a kink beyond it.
pub fn upper_bound_point(env: &RankEnvironment) -> (f64, f64) {
    let slot = env.spec().source_batch_time();
    let cap = env.t_max() as f64;
    let ratio = |t: f64, e: f64| e / slot.max(t);

    let mut state = GreedyState::new(env);
    let knee = slot.min(cap);
    state.add_mass(knee);
    let mut best = (knee, ratio(knee, state.sink_rank()));

    let mut state = GreedyState::new(env);
    while let Some((r, _)) = state.best() {
        let cap_mass = env.h()[r] * (1.0 - state.t()[r].fract());
        state.add_mass(cap_mass);
        let t = state.t_avg();
        if t >= slot {
            let value = ratio(t, state.sink_rank());
            if value > best.1 {
                best = (t, value);
            }
        }
    }
    best
}

pub fn solve_upper_bound(env: &RankEnvironment) -> f64 {
    upper_bound_point(env).1
}
