use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use ufm::{Layout, RankChoice};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ufm", version, about = "Universal factor analysis for large panels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate factors and quantile loadings (ufa or idw-ufa).
    Estimate {
        /// ufa | idw-ufa
        #[arg(long)]
        method: Option<String>,
        #[command(flatten)]
        opts: Opts,
    },
    /// Penalized rank estimate and its eigenvalues.
    Rank {
        #[command(flatten)]
        opts: Opts,
    },
    /// Count factors of strength at least alpha.
    Select {
        /// ufa | idw-ufa
        #[arg(long)]
        method: Option<String>,
        #[command(flatten)]
        opts: Opts,
    },
    /// Least-squares loadings on the estimated factors.
    MeanLoadings {
        /// ufa | idw-ufa
        #[arg(long)]
        method: Option<String>,
        #[command(flatten)]
        opts: Opts,
    },
    /// Weighted fit with plug-in standard errors.
    Infer {
        #[command(flatten)]
        opts: Opts,
    },
    /// Monte Carlo replication of the simulation tables.
    Simulate {
        /// 1, 2, 3 or 4
        #[arg(long)]
        table: Option<String>,
        /// Run 1000 replications.
        #[arg(long)]
        full: bool,
        #[command(flatten)]
        opts: Opts,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Estimate { .. } => "estimate",
            Command::Rank { .. } => "rank",
            Command::Select { .. } => "select",
            Command::MeanLoadings { .. } => "mean-loadings",
            Command::Infer { .. } => "infer",
            Command::Simulate { .. } => "simulate",
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Opts {
    /// Panel CSV.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// wide | long
    #[arg(long)]
    pub layout: Option<String>,
    /// Number of quantile levels.
    #[arg(long = "M")]
    pub m: Option<usize>,
    /// Number of factors or `auto`.
    #[arg(long)]
    pub rank: Option<String>,
    /// Smoothing bandwidth.
    #[arg(long)]
    pub h: Option<f64>,
    /// Step of the density difference quotient.
    #[arg(long)]
    pub hd: Option<f64>,
    /// 2 or 14.
    #[arg(long = "kernel-order")]
    pub kernel_order: Option<u32>,
    /// Penalty constant; the selector constant for `select`.
    #[arg(long = "C")]
    pub c: Option<f64>,
    /// Eigenvalue threshold of the rank estimate.
    #[arg(long = "Cr")]
    pub cr: Option<f64>,
    /// Penalty constant when `--C` is taken by the selector.
    #[arg(long = "penalty-C")]
    pub penalty_c: Option<f64>,
    /// Strength exponent for `select`.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Quantile level (must lie on the grid).
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Comma-separated square sizes N = T.
    #[arg(long)]
    pub sizes: Option<String>,
    /// Worker thread cap.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long = "out-dir")]
    pub out_dir: Option<PathBuf>,
    /// key=value file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

const FILE_KEYS: &[&str] = &[
    "input",
    "layout",
    "m",
    "rank",
    "h",
    "hd",
    "kernel-order",
    "c",
    "cr",
    "penalty-c",
    "alpha",
    "tau",
    "seed",
    "reps",
    "sizes",
    "threads",
    "out-dir",
    "method",
    "table",
];

/// Flat `key=value` settings. Keys match the long flag names, case-insensitively.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FileConfig {
    entries: BTreeMap<String, String>,
}

fn normalize_key(k: &str) -> String {
    k.trim().trim_start_matches("--").to_ascii_lowercase().replace('_', "-")
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", lineno + 1)))?;
            let key = normalize_key(k);
            if !FILE_KEYS.contains(&key.as_str()) {
                return Err(CliError::Usage(format!("config line {}: unknown key {:?}", lineno + 1, k.trim())));
            }
            if entries.insert(key, v.trim().to_string()).is_some() {
                return Err(CliError::Usage(format!("config line {}: duplicate key {:?}", lineno + 1, k.trim())));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.entries
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::Usage(format!("config key {key}: cannot parse {v:?}: {e}")))
            })
            .transpose()
    }
}

/// Fully resolved run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub input: Option<PathBuf>,
    pub layout: Layout,
    pub m_count: usize,
    pub rank: RankChoice,
    pub h: Option<f64>,
    pub hd: f64,
    pub kernel_order: u32,
    pub c: Option<f64>,
    pub cr: Option<f64>,
    pub penalty_c: Option<f64>,
    pub alpha: f64,
    pub tau: Option<f64>,
    pub seed: u64,
    pub reps: Option<usize>,
    pub sizes: Option<Vec<usize>>,
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub method: Option<String>,
    pub table: Option<String>,
}

fn parse_flag<T: FromStr>(name: &str, v: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| CliError::Usage(format!("--{name}: cannot parse {v:?}: {e}")))
}

pub fn parse_sizes(s: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| parse_flag::<usize>("sizes", p.trim()))
        .collect()
}

impl Settings {
    /// Merges flags over the config file over built-in defaults.
    pub fn resolve(opts: &Opts, method: Option<&str>, table: Option<&str>) -> Result<Self, CliError> {
        let file = match &opts.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        macro_rules! pick {
            ($flag:expr, $key:literal) => {
                match $flag.clone() {
                    Some(v) => Some(v),
                    None => file.get($key)?,
                }
            };
        }
        let layout: String = pick!(opts.layout, "layout").unwrap_or_else(|| "wide".into());
        let rank: String = pick!(opts.rank, "rank").unwrap_or_else(|| "auto".into());
        let sizes = match pick!(opts.sizes, "sizes") {
            Some(s) => Some(parse_sizes(&s)?),
            None => None,
        };
        let threads: Option<usize> = pick!(opts.threads, "threads");
        if threads == Some(0) {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        Ok(Self {
            input: pick!(opts.input, "input"),
            layout: parse_flag("layout", &layout)?,
            m_count: pick!(opts.m, "m").unwrap_or(9),
            rank: parse_flag("rank", &rank)?,
            h: pick!(opts.h, "h"),
            hd: pick!(opts.hd, "hd").unwrap_or(0.04),
            kernel_order: pick!(opts.kernel_order, "kernel-order").unwrap_or(14),
            c: pick!(opts.c, "c"),
            cr: pick!(opts.cr, "cr"),
            penalty_c: pick!(opts.penalty_c, "penalty-c"),
            alpha: pick!(opts.alpha, "alpha").unwrap_or(1.0),
            tau: pick!(opts.tau, "tau"),
            seed: pick!(opts.seed, "seed").unwrap_or(0),
            reps: pick!(opts.reps, "reps"),
            sizes,
            threads,
            out_dir: pick!(opts.out_dir, "out-dir"),
            method: match method {
                Some(m) => Some(m.to_string()),
                None => file.get("method")?,
            },
            table: match table {
                Some(t) => Some(t.to_string()),
                None => file.get("table")?,
            },
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "input": self.input.as_ref().map(|p| p.display().to_string()),
            "layout": format!("{:?}", self.layout).to_ascii_lowercase(),
            "M": self.m_count,
            "rank": match self.rank {
                RankChoice::Auto => "auto".to_string(),
                RankChoice::Fixed(r) => r.to_string(),
            },
            "h": self.h,
            "hd": self.hd,
            "kernel_order": self.kernel_order,
            "C": self.c,
            "Cr": self.cr,
            "penalty_C": self.penalty_c,
            "alpha": self.alpha,
            "tau": self.tau,
            "seed": self.seed,
            "reps": self.reps,
            "sizes": self.sizes,
            "threads": self.threads,
            "out_dir": self.out_dir.as_ref().map(|p| p.display().to_string()),
            "method": self.method,
            "table": self.table,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_keys_are_case_insensitive() {
        let f = FileConfig::parse("# comment\nM = 5\nkernel_order=2\n--Cr=0.1\n").unwrap();
        assert_eq!(f.get::<usize>("m").unwrap(), Some(5));
        assert_eq!(f.get::<u32>("kernel-order").unwrap(), Some(2));
        assert_eq!(f.get::<f64>("cr").unwrap(), Some(0.1));
    }

    #[test]
    fn bad_file_lines() {
        assert!(FileConfig::parse("M 5").is_err());
        assert!(FileConfig::parse("bogus=1").is_err());
        assert!(FileConfig::parse("M=1\nm=2").is_err());
    }

    #[test]
    fn sizes_list() {
        assert_eq!(parse_sizes("50, 100,150").unwrap(), vec![50, 100, 150]);
        assert!(parse_sizes("50,x").is_err());
    }
}
