//! Channel parameters and rank statistics of the two-hop relay.
//!
//! A batch of `M` linearly independent packets leaves the source. Each packet
//! independently reaches the relay and is overheard by the sink. The relay can
//! only add what it holds and the sink lacks (the *innovative rank*), and the
//! sink's gain from `t` recoded packets over a lossy relay link is the
//! expected-rank function `E(r, t)`.

use crate::error::{domain, Result};

/// A row whose last tabulated gain is below this counts as saturated, so
/// holding it flat past `t_max` loses nothing visible.
pub const SATURATION_GAIN: f64 = 1e-9;

/// Network parameters of the source → relay → sink topology.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelSpec {
    /// Batch size `M`, in packets.
    pub batch_size: usize,
    /// Duration of one source transmission; a relay transmission takes one unit.
    pub omega: f64,
    /// Source → relay per-packet loss probability.
    pub p_sr: f64,
    /// Relay → sink per-packet loss probability.
    pub p_rd: f64,
    /// Source → sink (overhearing) per-packet loss probability.
    pub p_sd: f64,
}

impl ChannelSpec {
    pub fn new(batch_size: usize, omega: f64, p_sr: f64, p_rd: f64, p_sd: f64) -> Result<Self> {
        let spec = Self {
            batch_size,
            omega,
            p_sr,
            p_rd,
            p_sd,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The evaluation setting used throughout: 20% loss on both single-hop
    /// links, 80% loss on the double-hop overhearing link, `omega = 1`.
    pub fn reference(batch_size: usize) -> Self {
        Self {
            batch_size,
            omega: 1.0,
            p_sr: 0.2,
            p_rd: 0.2,
            p_sd: 0.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return domain("batch size must be at least 1");
        }
        if !(self.omega.is_finite() && self.omega > 0.0) {
            return domain(format!("omega must be positive, got {}", self.omega));
        }
        for (name, p) in [
            ("p_sr", self.p_sr),
            ("p_rd", self.p_rd),
            ("p_sd", self.p_sd),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return domain(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        Ok(())
    }

    /// Time the source needs to emit one batch, `omega * M`.
    pub fn source_batch_time(&self) -> f64 {
        self.omega * self.batch_size as f64
    }

    /// `Some(omega)` when omega is a positive integer.
    pub fn integer_omega(&self) -> Option<usize> {
        let rounded = self.omega.round();
        (rounded >= 1.0 && (self.omega - rounded).abs() < 1e-12).then_some(rounded as usize)
    }

    /// Default tabulation cap on recoded packets per batch.
    pub fn default_t_max(&self) -> usize {
        4 * self.batch_size
    }
}

/// Probability mass function of `Binomial(n, success)` for `n = 0..=n_max`,
/// built row by row with the one-trial recurrence (no factorials involved).
fn binomial_rows(n_max: usize, success: f64) -> Vec<Vec<f64>> {
    let fail = 1.0 - success;
    let mut rows = Vec::with_capacity(n_max + 1);
    let mut pmf = vec![1.0];
    rows.push(pmf.clone());
    for _ in 0..n_max {
        let mut next = vec![0.0; pmf.len() + 1];
        for (i, &p) in pmf.iter().enumerate() {
            next[i] += p * fail;
            next[i + 1] += p * success;
        }
        pmf = next;
        rows.push(pmf.clone());
    }
    rows
}

/// Innovative-rank distribution `h`: a packet contributes innovative rank iff
/// the relay receives it and the sink misses it, so `h ~ Binomial(M, (1-p_sr) p_sd)`.
pub fn innovative_rank_distribution(spec: &ChannelSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let q = (1.0 - spec.p_sr) * spec.p_sd;
    Ok(binomial_rows(spec.batch_size, q).pop().unwrap_or_default())
}

/// Expected rank at the sink from overhearing alone, `M (1 - p_sd)`.
pub fn overheard_rank_mean(spec: &ChannelSpec) -> Result<f64> {
    spec.validate()?;
    Ok(spec.batch_size as f64 * (1.0 - spec.p_sd))
}

/// Marginal gains `delta[r][t] = E(r, t+1) - E(r, t)` for integer `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalGain {
    pub delta: Vec<Vec<f64>>,
}

impl MarginalGain {
    pub fn get(&self, r: usize, t: usize) -> f64 {
        self.delta
            .get(r)
            .and_then(|row| row.get(t))
            .copied()
            .unwrap_or(0.0)
    }
}

/// Everything the optimizer needs to know about one channel: `h`, `R` and the
/// tabulated expected-rank function.
#[derive(Debug, Clone, PartialEq)]
pub struct RankEnvironment {
    spec: ChannelSpec,
    h: Vec<f64>,
    overheard: f64,
    table: Vec<Vec<f64>>,
    t_max: usize,
}

/// Tabulates `E(r, t)` for `r = 0..=M`, `t = 0..=t_max` under independent
/// relay → sink losses.
fn expected_rank_table(batch_size: usize, p_rd: f64, t_max: usize) -> Vec<Vec<f64>> {
    let received = binomial_rows(t_max, 1.0 - p_rd);
    (0..=batch_size)
        .map(|r| {
            received
                .iter()
                .map(|pmf| {
                    pmf.iter()
                        .enumerate()
                        .map(|(i, &p)| p * i.min(r) as f64)
                        .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

/// Builds the environment for `spec` with the closed-form `h` and `R`.
pub fn build_environment(spec: &ChannelSpec, t_max: usize) -> Result<RankEnvironment> {
    let h = innovative_rank_distribution(spec)?;
    let overheard = overheard_rank_mean(spec)?;
    RankEnvironment::with_distribution(*spec, h, overheard, t_max)
}

impl RankEnvironment {
    /// Builds an environment from an explicit innovative-rank distribution.
    /// Used for hand-crafted distributions (point masses etc.) in tests and tools.
    pub fn with_distribution(
        spec: ChannelSpec,
        h: Vec<f64>,
        overheard: f64,
        t_max: usize,
    ) -> Result<Self> {
        spec.validate()?;
        let m = spec.batch_size;
        if t_max == 0 {
            return domain("t_max must be at least 1");
        }
        if h.len() != m + 1 {
            return domain(format!("h has length {}, expected {}", h.len(), m + 1));
        }
        if h.iter().any(|&x| !(x >= 0.0)) {
            return domain("h must be nonnegative");
        }
        let total: f64 = h.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return domain(format!("h must sum to 1, sums to {total}"));
        }
        if !(0.0..=m as f64).contains(&overheard) {
            return domain(format!("R must lie in [0, {m}], got {overheard}"));
        }
        let table = expected_rank_table(m, spec.p_rd, t_max);
        let env = Self {
            spec,
            h,
            overheard,
            table,
            t_max,
        };
        let tail = (1..=m).map(|r| env.gain(r, t_max - 1)).fold(0.0, f64::max);
        if tail >= SATURATION_GAIN {
            log::warn!(
                "t_max={t_max} truncates E(r, t) while gains are still {tail:.3e}; \
                 values beyond t_max are held flat"
            );
        }
        Ok(env)
    }

    pub fn spec(&self) -> &ChannelSpec {
        &self.spec
    }

    pub fn batch_size(&self) -> usize {
        self.spec.batch_size
    }

    /// Innovative-rank distribution `h`.
    pub fn h(&self) -> &[f64] {
        &self.h
    }

    /// Expected overheard rank `R`.
    pub fn overheard(&self) -> f64 {
        self.overheard
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// Row `r` of the tabulated `E(r, ·)`.
    pub fn table_row(&self, r: usize) -> &[f64] {
        &self.table[r]
    }

    /// `Σ_r h_r r`, the most the relay can add to the sink on average.
    pub fn innovative_mean(&self) -> f64 {
        self.h.iter().enumerate().map(|(r, &p)| p * r as f64).sum()
    }

    /// Largest achievable expected sink rank, `R + Σ_r h_r r`.
    pub fn max_sink_rank(&self) -> f64 {
        self.overheard + self.innovative_mean()
    }

    /// `Δ_{r,t}` without bounds checks; zero at and beyond `t_max`.
    pub(crate) fn gain(&self, r: usize, t: usize) -> f64 {
        if t >= self.t_max {
            0.0
        } else {
            self.table[r][t + 1] - self.table[r][t]
        }
    }

    /// `E(r, t)` with linear interpolation between integer send counts.
    pub fn expected_rank(&self, r: usize, t: f64) -> Result<f64> {
        if r > self.batch_size() {
            return domain(format!("rank {r} exceeds batch size {}", self.batch_size()));
        }
        if !(t >= 0.0) || !t.is_finite() {
            return domain(format!(
                "send count must be finite and nonnegative, got {t}"
            ));
        }
        Ok(self.interpolated_rank(r, t))
    }

    pub(crate) fn interpolated_rank(&self, r: usize, t: f64) -> f64 {
        let whole = t.floor();
        if whole >= self.t_max as f64 {
            return self.table[r][self.t_max];
        }
        let k = whole as usize;
        let frac = t - whole;
        let lo = self.table[r][k];
        if frac == 0.0 {
            lo
        } else {
            (1.0 - frac) * lo + frac * self.table[r][k + 1]
        }
    }

    /// `Δ_{r,t} = E(r, t+1) - E(r, t)` for `t < t_max`.
    pub fn marginal_gain(&self, r: usize, t: usize) -> Result<f64> {
        if r > self.batch_size() {
            return domain(format!("rank {r} exceeds batch size {}", self.batch_size()));
        }
        if t + 1 > self.t_max {
            return domain(format!("t={t} must be below t_max={}", self.t_max));
        }
        Ok(self.gain(r, t))
    }

    pub fn marginal_gains(&self) -> MarginalGain {
        let delta = (0..=self.batch_size())
            .map(|r| (0..self.t_max).map(|t| self.gain(r, t)).collect())
            .collect();
        MarginalGain { delta }
    }
}
