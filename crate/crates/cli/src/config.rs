//! Run configuration: command-line flags layered over an optional
//! `key=value` file layered over defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bats_relay::channel::ChannelSpec;
use bats_relay::idle::{IdleMethod, DEFAULT_TRIALS};
use bats_relay::optimizer::{OptimizerConfig, DEFAULT_EPSILON_EDGE, DEFAULT_GRID_STEP};
use clap::{Args, ValueEnum};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DMethod {
    Markov,
    Mc,
}

impl FromStr for DMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "markov" => Ok(DMethod::Markov),
            "mc" | "monte_carlo" => Ok(DMethod::Mc),
            _ => Err(format!("unknown d_method '{s}' (expected markov or mc)")),
        }
    }
}

/// Flags shared by every subcommand. All are optional so that a config file
/// can supply them.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Number of input packets
    #[arg(long = "F")]
    pub f: Option<usize>,
    /// Batch size
    #[arg(long = "M")]
    pub m: Option<usize>,
    /// Source slot length in relay slots [default: 1]
    #[arg(long)]
    pub omega: Option<f64>,
    /// Source to relay loss probability [default: 0.2]
    #[arg(long = "p-sr")]
    pub p_sr: Option<f64>,
    /// Relay to sink loss probability [default: 0.2]
    #[arg(long = "p-rd")]
    pub p_rd: Option<f64>,
    /// Source to sink loss probability [default: 0.8]
    #[arg(long = "p-sd")]
    pub p_sd: Option<f64>,
    /// Largest tabulated send count per rank [default: 4M]
    #[arg(long = "t-max")]
    pub t_max: Option<usize>,
    /// Grid resolution in t_avg [default: 0.01]
    #[arg(long)]
    pub step: Option<f64>,
    /// Right end-point back-off [default: 1e-6]
    #[arg(long = "epsilon-edge")]
    pub epsilon_edge: Option<f64>,
    /// Monte Carlo trials for the idle time [default: 100000]
    #[arg(long)]
    pub trials: Option<usize>,
    /// RNG seed, required by stochastic commands
    #[arg(long)]
    pub seed: Option<u64>,
    /// Idle-time estimator [default: markov for integer omega, else mc]
    #[arg(long = "d-method", value_enum)]
    pub d_method: Option<DMethod>,
    /// Output file for CSV data
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flat key=value file with defaults for any of the above
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub f: usize,
    pub spec: ChannelSpec,
    pub t_max: usize,
    pub grid_step: f64,
    pub epsilon_edge: f64,
    pub trials: usize,
    pub seed: Option<u64>,
    pub d_method: DMethod,
    pub output_path: Option<PathBuf>,
}

const KEYS: [&str; 13] = [
    "F",
    "M",
    "omega",
    "p_sr",
    "p_rd",
    "p_sd",
    "t_max",
    "grid_step",
    "epsilon_edge",
    "trials",
    "seed",
    "d_method",
    "output_path",
];

fn parse_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("{}:{}: expected key=value", path.display(), n + 1))
        })?;
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(CliError::Usage(format!(
                "{}:{}: unknown key '{key}'",
                path.display(),
                n + 1
            )));
        }
        map.insert(key.to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn from_file<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Option<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    map.get(key)
        .map(|v| {
            v.parse::<T>()
                .map_err(|e| CliError::Usage(format!("config key {key}: {e}")))
        })
        .transpose()
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let file = match &self.config {
            Some(path) => parse_file(path)?,
            None => BTreeMap::new(),
        };
        macro_rules! pick {
            ($flag:expr, $key:literal) => {
                match $flag.clone() {
                    Some(v) => Some(v),
                    None => from_file(&file, $key)?,
                }
            };
        }
        let f: usize = pick!(self.f, "F")
            .ok_or_else(|| CliError::Usage("--F is required (flag or config)".into()))?;
        let m: usize = pick!(self.m, "M")
            .ok_or_else(|| CliError::Usage("--M is required (flag or config)".into()))?;
        if f == 0 {
            return Err(CliError::Usage("F must be at least 1".into()));
        }
        let spec = ChannelSpec::new(
            m,
            pick!(self.omega, "omega").unwrap_or(1.0),
            pick!(self.p_sr, "p_sr").unwrap_or(0.2),
            pick!(self.p_rd, "p_rd").unwrap_or(0.2),
            pick!(self.p_sd, "p_sd").unwrap_or(0.8),
        )
        .map_err(|e| CliError::Usage(e.to_string()))?;
        let t_max = pick!(self.t_max, "t_max").unwrap_or_else(|| spec.default_t_max());
        if t_max == 0 {
            return Err(CliError::Usage("t_max must be at least 1".into()));
        }
        let grid_step = pick!(self.step, "grid_step").unwrap_or(DEFAULT_GRID_STEP);
        if !(grid_step > 0.0) || !grid_step.is_finite() {
            return Err(CliError::Usage(format!(
                "grid step must be positive, got {grid_step}"
            )));
        }
        let epsilon_edge = pick!(self.epsilon_edge, "epsilon_edge").unwrap_or(DEFAULT_EPSILON_EDGE);
        if !(epsilon_edge >= 0.0) || !epsilon_edge.is_finite() {
            return Err(CliError::Usage(format!(
                "epsilon_edge must be nonnegative, got {epsilon_edge}"
            )));
        }
        let trials = pick!(self.trials, "trials").unwrap_or(DEFAULT_TRIALS);
        if trials == 0 {
            return Err(CliError::Usage("trials must be at least 1".into()));
        }
        let d_method = match pick!(self.d_method, "d_method") {
            Some(DMethod::Markov) if spec.integer_omega().is_none() => {
                return Err(CliError::Usage(format!(
                    "the Markov idle chain needs an integer omega, got {}",
                    spec.omega
                )))
            }
            Some(d) => d,
            None if spec.integer_omega().is_some() => DMethod::Markov,
            None => DMethod::Mc,
        };
        Ok(RunConfig {
            f,
            spec,
            t_max,
            grid_step,
            epsilon_edge,
            trials,
            seed: pick!(self.seed, "seed"),
            d_method,
            output_path: pick!(self.out, "output_path"),
        })
    }
}

impl RunConfig {
    pub fn is_stochastic(&self) -> bool {
        self.d_method == DMethod::Mc
    }

    pub fn require_seed(&self, what: &str) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Usage(format!("--seed is required for {what}")))
    }

    pub fn idle_method(&self) -> Result<IdleMethod, CliError> {
        Ok(match self.d_method {
            DMethod::Markov => IdleMethod::Markov,
            DMethod::Mc => IdleMethod::MonteCarlo {
                trials: self.trials,
                seed: self.require_seed("Monte Carlo idle estimates")?,
            },
        })
    }

    pub fn optimizer(&self) -> Result<OptimizerConfig, CliError> {
        Ok(OptimizerConfig {
            grid_step: self.grid_step,
            epsilon_edge: self.epsilon_edge,
            idle_method: self.idle_method()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn args() -> ConfigArgs {
        ConfigArgs {
            f: Some(100),
            m: Some(8),
            ..Default::default()
        }
    }

    #[test]
    fn defaults() {
        let c = args().resolve().unwrap();
        assert_eq!(c.spec, ChannelSpec::reference(8));
        assert_eq!(c.t_max, 32);
        assert_eq!(c.grid_step, 0.01);
        assert_eq!(c.epsilon_edge, 1e-6);
        assert_eq!(c.trials, 100_000);
        assert_eq!(c.d_method, DMethod::Markov);
        assert!(!c.is_stochastic());
    }

    #[test]
    fn fractional_omega_switches_to_monte_carlo() {
        let c = ConfigArgs {
            omega: Some(1.5),
            ..args()
        }
        .resolve()
        .unwrap();
        assert_eq!(c.d_method, DMethod::Mc);
        assert!(c.idle_method().is_err());
        let forced = ConfigArgs {
            omega: Some(1.5),
            d_method: Some(DMethod::Markov),
            ..args()
        };
        assert!(matches!(forced.resolve(), Err(CliError::Usage(_))));
    }

    #[test]
    fn flags_override_file() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            file,
            "# reference\nF = 256\nM=16\np_sd=0.5\nseed=9\nd_method=mc"
        )
        .unwrap();
        let c = ConfigArgs {
            m: Some(4),
            config: Some(file.path().to_path_buf()),
            ..Default::default()
        }
        .resolve()
        .unwrap();
        assert_eq!(c.f, 256);
        assert_eq!(c.spec.batch_size, 4);
        assert_eq!(c.spec.p_sd, 0.5);
        assert_eq!(c.seed, Some(9));
        assert_eq!(c.d_method, DMethod::Mc);
    }

    #[test]
    fn bad_files_are_usage_errors() {
        for body in ["F=100\nbogus=1\n", "F=100\nM\n", "F=ten\nM=8\n"] {
            let mut file = tempfile::NamedTempFile::new().unwrap();
            write!(file, "{body}").unwrap();
            let res = ConfigArgs {
                config: Some(file.path().to_path_buf()),
                ..Default::default()
            }
            .resolve();
            assert!(matches!(res, Err(CliError::Usage(_))), "{body:?}");
        }
    }

    #[test]
    fn invalid_channel_is_usage_error() {
        let res = ConfigArgs {
            p_sr: Some(1.5),
            ..args()
        }
        .resolve();
        assert!(matches!(res, Err(CliError::Usage(_))));
    }
}
