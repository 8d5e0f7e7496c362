//! Adaptive recoding: split an average budget of `t_avg` recoded packets per
//! batch across innovative ranks so the expected sink rank is maximal.
//!
//! Every `E(r, ·)` is concave and piecewise linear, so pouring mass into the
//! rank with the steepest current slope is optimal. [`GreedyState`] keeps that
//! pour resumable so the optimizer can walk `t_avg` upward without restarting.

use crate::channel::RankEnvironment;
use crate::error::{domain, Error, Result};

/// Per-rank recoded packet counts and the expected sink rank they achieve.
#[derive(Debug, Clone, PartialEq)]
pub struct RecodingScheme {
    /// `t[r]` packets for a batch of innovative rank `r`; the fractional part is
    /// the probability of sending one extra packet.
    pub t: Vec<f64>,
    /// `h · t`.
    pub t_avg: f64,
    /// `R + Σ_r h_r E(r, t_r)`.
    pub sink_rank_mean: f64,
}

/// Resumable greedy allocation.
#[derive(Debug, Clone)]
pub struct GreedyState<'a> {
    env: &'a RankEnvironment,
    t: Vec<f64>,
    t_avg: f64,
    sink_rank: f64,
}

impl<'a> GreedyState<'a> {
    pub fn new(env: &'a RankEnvironment) -> Self {
        Self {
            env,
            t: vec![0.0; env.batch_size() + 1],
            t_avg: 0.0,
            sink_rank: env.overheard(),
        }
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn t_avg(&self) -> f64 {
        self.t_avg
    }

    /// Current expected sink rank `E`.
    pub fn sink_rank(&self) -> f64 {
        self.sink_rank
    }

    /// Rank with the largest `Δ_{r,⌊t_r⌋}` among ranks that can still take
    /// mass; ties go to the lowest rank.
    pub fn best(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (r, (&hr, &tr)) in self.env.h().iter().zip(&self.t).enumerate() {
            let whole = tr.floor() as usize;
            if hr <= 0.0 || whole >= self.env.t_max() {
                continue;
            }
            let gain = self.env.gain(r, whole);
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((r, gain));
            }
        }
        best
    }

    /// `Δ_{t_avg}`, the best available marginal gain (0 once nothing can grow).
    pub fn best_gain(&self) -> f64 {
        self.best().map_or(0.0, |(_, g)| g)
    }

    /// Mass that rank `r` takes before its send count reaches the next integer.
    fn unit_capacity(&self, r: usize) -> f64 {
        let tr = self.t[r];
        self.env.h()[r] * (1.0 - (tr - tr.floor()))
    }

    fn fill_unit(&mut self, r: usize, gain: f64) -> f64 {
        let cap = self.unit_capacity(r);
        self.t[r] = self.t[r].floor() + 1.0;
        self.t_avg += cap;
        self.sink_rank += cap * gain;
        cap
    }

    fn fill_partial(&mut self, r: usize, gain: f64, mass: f64) {
        self.t[r] += mass / self.env.h()[r];
        self.t_avg += mass;
        self.sink_rank += mass * gain;
    }

    /// Pours `mass` more units of `t_avg` into the allocation. Returns the
    /// mass that could not be placed (nonzero only past `t_max` everywhere).
    pub fn add_mass(&mut self, mass: f64) -> f64 {
        let mut remaining = mass;
        while remaining > 0.0 {
            let Some((r, gain)) = self.best() else {
                break;
            };
            if remaining < self.unit_capacity(r) {
                self.fill_partial(r, gain, remaining);
                remaining = 0.0;
            } else {
                remaining -= self.fill_unit(r, gain);
            }
        }
        remaining.max(0.0)
    }

    /// Pours mass until the expected sink rank reaches `target`, stopping
    /// exactly on it. Fails when the rank function saturates first.
    pub fn advance_to_rank(&mut self, target: f64) -> Result<()> {
        while self.sink_rank < target {
            let (r, gain) = match self.best() {
                Some((r, g)) if g > 0.0 => (r, g),
                _ => {
                    return Err(Error::Domain(format!(
                        "expected sink rank saturates at {:.9} below target {target:.9}",
                        self.sink_rank
                    )))
                }
            };
            let needed = (target - self.sink_rank) / gain;
            if needed <= self.unit_capacity(r) {
                self.fill_partial(r, gain, needed);
                self.sink_rank = target;
                break;
            }
            self.fill_unit(r, gain);
        }
        Ok(())
    }

    pub fn scheme(&self) -> RecodingScheme {
        RecodingScheme {
            t: self.t.clone(),
            t_avg: self.t_avg,
            sink_rank_mean: self.sink_rank,
        }
    }
}

fn check_budget(env: &RankEnvironment, t_avg: f64) -> Result<f64> {
    if !(t_avg >= 0.0) || !t_avg.is_finite() {
        return domain(format!("t_avg must be finite and nonnegative, got {t_avg}"));
    }
    let cap = env.t_max() as f64;
    if t_avg > cap {
        log::warn!("t_avg={t_avg} exceeds t_max={cap}; clamped");
        return Ok(cap);
    }
    Ok(t_avg)
}

/// Optimal adaptive recoding for an average budget of `t_avg` packets per batch.
pub fn solve_recoding(env: &RankEnvironment, t_avg: f64) -> Result<RecodingScheme> {
    let t_avg = check_budget(env, t_avg)?;
    let mut state = GreedyState::new(env);
    state.add_mass(t_avg);
    Ok(state.scheme())
}

/// `R + Σ_r h_r E(r, t_r)` for an arbitrary allocation.
pub fn sink_rank(env: &RankEnvironment, t: &[f64]) -> Result<f64> {
    if t.len() != env.batch_size() + 1 {
        return domain(format!(
            "t has length {}, expected {}",
            t.len(),
            env.batch_size() + 1
        ));
    }
    let mut total = env.overheard();
    for (r, (&tr, &hr)) in t.iter().zip(env.h()).enumerate() {
        if !(tr >= 0.0) || !tr.is_finite() {
            return domain(format!("t[{r}] must be finite and nonnegative, got {tr}"));
        }
        total += hr * env.interpolated_rank(r, tr);
    }
    Ok(total)
}

/// Upper limit on grid points examined by [`brute_force_recoding`].
pub const BRUTE_FORCE_BUDGET: u64 = 100_000_000;

#[derive(Debug, Clone, Copy)]
struct Partial {
    mass: f64,
    value: f64,
    parent: usize,
    steps: usize,
}

/// Exhaustive search over allocations whose entries are multiples of
/// `grid_step` and whose mass `h · t` lies in `[t_avg - grid_step, t_avg]`.
///
/// Only monotonicity of each `E(r, ·)` is used: partial allocations are
/// pruned when another uses no more mass for no less rank, and the rank with
/// the smallest `h_r` absorbs all leftover budget. Rank 0 never gains and
/// entries stop at `t_max`, where every row is flat. Test oracle only.
pub fn brute_force_recoding(
    env: &RankEnvironment,
    t_avg: f64,
    grid_step: f64,
) -> Result<RecodingScheme> {
    if !(grid_step > 0.0) || !grid_step.is_finite() {
        return domain(format!("grid step must be positive, got {grid_step}"));
    }
    if !(t_avg >= 0.0) || !t_avg.is_finite() {
        return domain(format!("t_avg must be finite and nonnegative, got {t_avg}"));
    }
    let h = env.h();
    let mut support: Vec<usize> = (1..h.len()).filter(|&r| h[r] > 0.0).collect();
    support.sort_by(|&a, &b| h[b].total_cmp(&h[a]).then(a.cmp(&b)));
    let Some((&last, free)) = support.split_last() else {
        return Ok(RecodingScheme {
            t: vec![0.0; h.len()],
            t_avg: 0.0,
            sink_rank_mean: env.overheard(),
        });
    };
    let slack = 1e-9 * grid_step;
    let max_steps = (env.t_max() as f64 / grid_step + 1e-9).floor() as usize;

    let mut levels: Vec<Vec<Partial>> = vec![vec![Partial {
        mass: 0.0,
        value: 0.0,
        parent: usize::MAX,
        steps: 0,
    }]];
    let mut visited: u64 = 0;
    for &r in free {
        let unit = h[r] * grid_step;
        let mut next = Vec::new();
        for (idx, node) in levels.last().unwrap().iter().enumerate() {
            for k in 0..=max_steps {
                let mass = node.mass + unit * k as f64;
                if mass > t_avg + slack {
                    break;
                }
                visited += 1;
                if visited > BRUTE_FORCE_BUDGET {
                    return Err(Error::Resource(format!(
                        "grid search over {} ranks at step {grid_step} exceeds {BRUTE_FORCE_BUDGET} points",
                        support.len()
                    )));
                }
                next.push(Partial {
                    mass,
                    value: node.value + h[r] * env.interpolated_rank(r, k as f64 * grid_step),
                    parent: idx,
                    steps: k,
                });
            }
        }
        next.sort_by(|a, b| a.mass.total_cmp(&b.mass).then(b.value.total_cmp(&a.value)));
        let mut frontier: Vec<Partial> = Vec::with_capacity(next.len());
        for p in next {
            if frontier.last().is_none_or(|q| p.value > q.value) {
                frontier.push(p);
            }
        }
        levels.push(frontier);
    }

    let unit = h[last] * grid_step;
    let mut best: Option<(f64, usize, usize)> = None;
    for (idx, node) in levels.last().unwrap().iter().enumerate() {
        let k = (((t_avg - node.mass) / unit + 1e-9).floor().max(0.0) as usize).min(max_steps);
        let value = node.value + h[last] * env.interpolated_rank(last, k as f64 * grid_step);
        if best.is_none_or(|(v, _, _)| value > v) {
            best = Some((value, idx, k));
        }
    }
    let (value, mut idx, k_last) = best.expect("frontier is never empty");

    let mut t = vec![0.0; h.len()];
    t[last] = k_last as f64 * grid_step;
    for (level, &r) in free.iter().enumerate().rev() {
        let node = levels[level + 1][idx];
        t[r] = node.steps as f64 * grid_step;
        idx = node.parent;
    }
    let mass = h.iter().zip(&t).map(|(a, b)| a * b).sum();
    Ok(RecodingScheme {
        t,
        t_avg: mass,
        sink_rank_mean: env.overheard() + value,
    })
}
