//! Experiment configuration and its flat `key = value` text form.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bsc::BscConfig;
use crate::error::{Error, Result};
use crate::pfi::PfiConfig;
use crate::pima::{LrMode, PimaConfig};
use crate::stream::{Setup, StreamConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Dpcl,
    Er,
    Finetune,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dpcl" => Ok(Method::Dpcl),
            "er" => Ok(Method::Er),
            "finetune" => Ok(Method::Finetune),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Dpcl => "dpcl",
            Method::Er => "er",
            Method::Finetune => "finetune",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemoryPolicy {
    MutualInformation,
    Reservoir,
}

impl FromStr for MemoryPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mi" => Ok(MemoryPolicy::MutualInformation),
            "reservoir" => Ok(MemoryPolicy::Reservoir),
            other => Err(Error::Config(format!("unknown memory policy '{other}'"))),
        }
    }
}

impl fmt::Display for MemoryPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MemoryPolicy::MutualInformation => "mi",
            MemoryPolicy::Reservoir => "reservoir",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic {
        classes: usize,
        dims: usize,
        per_class: usize,
        test_per_class: usize,
        spread: f64,
    },
    /// `label,f1,...,fd` files; features standardized with train statistics.
    Csv {
        train: PathBuf,
        test: PathBuf,
        has_header: bool,
        num_classes: Option<usize>,
    },
    /// Little-endian `f64` matrices with JSON sidecars.
    Binary { train: PathBuf, test: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    pub data: DataSource,
    pub stream: StreamConfig,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub batch_size: usize,
    pub updates_per_sample: f64,
    pub lr: f64,
    /// Evaluate every this many stream samples (and at every task end).
    pub eval_every: usize,
    pub memory_capacity: usize,
    pub memory_policy: MemoryPolicy,
    pub pfi: PfiConfig,
    pub bsc: BscConfig,
    pub pima: PimaConfig,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Dpcl,
            seed: 0,
            data: DataSource::Synthetic {
                classes: 8,
                dims: 16,
                per_class: 250,
                test_per_class: 100,
                spread: 0.35,
            },
            stream: StreamConfig::disjoint(4, 0),
            hidden: vec![64, 64],
            feature_dim: 32,
            batch_size: 16,
            updates_per_sample: 3.0,
            lr: 3e-4,
            eval_every: 50,
            memory_capacity: 2000,
            memory_policy: MemoryPolicy::MutualInformation,
            pfi: PfiConfig::default(),
            bsc: BscConfig::default(),
            pima: PimaConfig::default(),
            output_dir: None,
        }
    }
}

/// Settings that actually drive a run once the method is taken into account.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub use_pfi: bool,
    pub num_heads: usize,
    pub bsc: BscConfig,
    pub memory_enabled: bool,
    pub memory_policy: MemoryPolicy,
    pub lr_mode: LrMode,
}

impl Resolved {
    /// Whether mutual-information histories must be maintained.
    pub fn tracks_history(&self) -> bool {
        self.memory_enabled && self.memory_policy == MemoryPolicy::MutualInformation
            || self.lr_mode != LrMode::Off
    }
}

impl ExperimentConfig {
    pub fn resolve(&self) -> Resolved {
        match self.method {
            Method::Dpcl => Resolved {
                use_pfi: true,
                num_heads: self.bsc.num_heads,
                bsc: self.bsc.clone(),
                memory_enabled: self.memory_capacity > 0,
                memory_policy: self.memory_policy,
                lr_mode: self.pima.lr_mode,
            },
            Method::Er | Method::Finetune => Resolved {
                use_pfi: false,
                num_heads: 1,
                bsc: BscConfig {
                    num_heads: 1,
                    weight_averaging: false,
                    ..self.bsc.clone()
                },
                memory_enabled: self.method == Method::Er && self.memory_capacity > 0,
                memory_policy: MemoryPolicy::Reservoir,
                lr_mode: LrMode::Off,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(Error::Config("train.batch_size must be even and positive".into()));
        }
        if !(self.updates_per_sample > 0.0 && self.updates_per_sample.is_finite()) {
            return Err(Error::Config("train.updates_per_sample must be > 0".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train.lr must be > 0".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("train.eval_every must be >= 1".into()));
        }
        if self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if let DataSource::Synthetic {
            classes,
            dims,
            per_class,
            test_per_class,
            spread,
        } = &self.data
        {
            if *classes == 0 || *dims == 0 || *per_class == 0 || *test_per_class == 0 {
                return Err(Error::Config("synthetic data sizes must be >= 1".into()));
            }
            if !(*spread >= 0.0) {
                return Err(Error::Config("data.spread must be >= 0".into()));
            }
        }
        self.stream.validate()?;
        self.pfi.validate()?;
        self.bsc.validate()?;
        self.pima.validate()?;
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep defaults.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{}'", n + 1, k.trim())));
            }
        }
        Self::from_map(&map)
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut stream_seed = None;
        let source = map.get("data.source").map(String::as_str).unwrap_or("synthetic");
        let (mut classes, mut dims, mut per_class, mut test_per_class, mut spread) = match &cfg.data {
            DataSource::Synthetic {
                classes,
                dims,
                per_class,
                test_per_class,
                spread,
            } => (*classes, *dims, *per_class, *test_per_class, *spread),
            _ => unreachable!(),
        };
        let (mut train_path, mut test_path, mut has_header, mut num_classes) = (None, None, false, None);

        for (key, value) in map {
            let v = value.as_str();
            match key.as_str() {
                "method" => cfg.method = v.parse()?,
                "seed" => cfg.seed = num(key, v)?,
                "data.source" => {}
                "data.classes" => classes = num(key, v)?,
                "data.dims" => dims = num(key, v)?,
                "data.per_class" => per_class = num(key, v)?,
                "data.test_per_class" => test_per_class = num(key, v)?,
                "data.spread" => spread = num(key, v)?,
                "data.train_path" => train_path = Some(PathBuf::from(v)),
                "data.test_path" => test_path = Some(PathBuf::from(v)),
                "data.has_header" => has_header = flag(key, v)?,
                "data.num_classes" => num_classes = Some(num(key, v)?),
                "stream.setup" => cfg.stream.setup = v.parse()?,
                "stream.tasks" => cfg.stream.tasks = num(key, v)?,
                "stream.n_b" => cfg.stream.disjoint_portion = num(key, v)?,
                "stream.m_b" => cfg.stream.minor_portion = num(key, v)?,
                "stream.seed" => stream_seed = Some(num(key, v)?),
                "model.hidden" => {
                    cfg.hidden = if v.is_empty() {
                        Vec::new()
                    } else {
                        v.split(',').map(|w| num(key, w.trim())).collect::<Result<_>>()?
                    }
                }
                "model.feature_dim" => cfg.feature_dim = num(key, v)?,
                "train.batch_size" => cfg.batch_size = num(key, v)?,
                "train.updates_per_sample" => cfg.updates_per_sample = num(key, v)?,
                "train.lr" => cfg.lr = num(key, v)?,
                "train.eval_every" => cfg.eval_every = num(key, v)?,
                "memory.capacity" => cfg.memory_capacity = num(key, v)?,
                "memory.policy" => cfg.memory_policy = v.parse()?,
                "pfi.sigma_m" => cfg.pfi.sigma_m = num(key, v)?,
                "pfi.sigma_a" => cfg.pfi.sigma_a = num(key, v)?,
                "pfi.alpha" => cfg.pfi.alpha = num(key, v)?,
                "pfi.beta" => cfg.pfi.beta = num(key, v)?,
                "pfi.ema_coeff" => cfg.pfi.ema_coeff = num(key, v)?,
                "pfi.per_sample_zeta" => cfg.pfi.per_sample_zeta = flag(key, v)?,
                "pfi.force_zeta" => {
                    cfg.pfi.force_zeta = if v == "none" { None } else { Some(num(key, v)?) }
                }
                "bsc.num_heads" => cfg.bsc.num_heads = num(key, v)?,
                "bsc.period_p" => cfg.bsc.period = num(key, v)?,
                "bsc.rank_a" => cfg.bsc.rank = num(key, v)?,
                "bsc.num_mc_samples_r" => cfg.bsc.mc_samples = num(key, v)?,
                "bsc.weight_averaging" => cfg.bsc.weight_averaging = flag(key, v)?,
                "pima.gamma" => cfg.pima.gamma = num(key, v)?,
                "pima.omega" => cfg.pima.omega = num(key, v)?,
                "pima.lr_mode" => cfg.pima.lr_mode = v.parse()?,
                "pima.lr_bound" => {
                    cfg.pima.lr_bound = if v == "none" { None } else { Some(num(key, v)?) }
                }
                "output.dir" => cfg.output_dir = Some(PathBuf::from(v)),
                other => return Err(Error::Config(format!("unknown config key '{other}'"))),
            }
        }

        cfg.data = match source {
            "synthetic" => DataSource::Synthetic {
                classes,
                dims,
                per_class,
                test_per_class,
                spread,
            },
            "csv" | "binary" => {
                let train = train_path.ok_or_else(|| Error::Config("data.train_path is required".into()))?;
                let test = test_path.ok_or_else(|| Error::Config("data.test_path is required".into()))?;
                if source == "csv" {
                    DataSource::Csv {
                        train,
                        test,
                        has_header,
                        num_classes,
                    }
                } else {
                    DataSource::Binary { train, test }
                }
            }
            other => return Err(Error::Config(format!("unknown data.source '{other}'"))),
        };
        // the stream seed follows the run seed unless pinned
        cfg.stream.seed = stream_seed.unwrap_or(cfg.seed);
        match cfg.stream.setup {
            Setup::Disjoint if !map.contains_key("stream.n_b") && !map.contains_key("stream.m_b") => {
                cfg.stream.disjoint_portion = 1.0;
                cfg.stream.minor_portion = 0.0;
            }
            Setup::Blurry if !map.contains_key("stream.n_b") => cfg.stream.disjoint_portion = 0.0,
            _ => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every setting as flat key/value pairs; parsing them back gives an equal config.
    pub fn to_kv_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("method", self.method.to_string());
        put("seed", self.seed.to_string());
        match &self.data {
            DataSource::Synthetic {
                classes,
                dims,
                per_class,
                test_per_class,
                spread,
            } => {
                put("data.source", "synthetic".into());
                put("data.classes", classes.to_string());
                put("data.dims", dims.to_string());
                put("data.per_class", per_class.to_string());
                put("data.test_per_class", test_per_class.to_string());
                put("data.spread", spread.to_string());
            }
            DataSource::Csv {
                train,
                test,
                has_header,
                num_classes,
            } => {
                put("data.source", "csv".into());
                put("data.train_path", train.display().to_string());
                put("data.test_path", test.display().to_string());
                put("data.has_header", has_header.to_string());
                if let Some(c) = num_classes {
                    put("data.num_classes", c.to_string());
                }
            }
            DataSource::Binary { train, test } => {
                put("data.source", "binary".into());
                put("data.train_path", train.display().to_string());
                put("data.test_path", test.display().to_string());
            }
        }
        put("stream.setup", self.stream.setup.to_string());
        put("stream.tasks", self.stream.tasks.to_string());
        put("stream.n_b", self.stream.disjoint_portion.to_string());
        put("stream.m_b", self.stream.minor_portion.to_string());
        put("stream.seed", self.stream.seed.to_string());
        put(
            "model.hidden",
            self.hidden.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
        );
        put("model.feature_dim", self.feature_dim.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.updates_per_sample", self.updates_per_sample.to_string());
        put("train.lr", self.lr.to_string());
        put("train.eval_every", self.eval_every.to_string());
        put("memory.capacity", self.memory_capacity.to_string());
        put("memory.policy", self.memory_policy.to_string());
        put("pfi.sigma_m", self.pfi.sigma_m.to_string());
        put("pfi.sigma_a", self.pfi.sigma_a.to_string());
        put("pfi.alpha", self.pfi.alpha.to_string());
        put("pfi.beta", self.pfi.beta.to_string());
        put("pfi.ema_coeff", self.pfi.ema_coeff.to_string());
        put("pfi.per_sample_zeta", self.pfi.per_sample_zeta.to_string());
        put(
            "pfi.force_zeta",
            self.pfi.force_zeta.map_or("none".to_string(), |z| z.to_string()),
        );
        put("bsc.num_heads", self.bsc.num_heads.to_string());
        put("bsc.period_p", self.bsc.period.to_string());
        put("bsc.rank_a", self.bsc.rank.to_string());
        put("bsc.num_mc_samples_r", self.bsc.mc_samples.to_string());
        put("bsc.weight_averaging", self.bsc.weight_averaging.to_string());
        put("pima.gamma", self.pima.gamma.to_string());
        put("pima.omega", self.pima.omega.to_string());
        put("pima.lr_mode", self.pima.lr_mode.to_string());
        put(
            "pima.lr_bound",
            self.pima.lr_bound.map_or("none".to_string(), |b| b.to_string()),
        );
        if let Some(d) = &self.output_dir {
            put("output.dir", d.display().to_string());
        }
        m
    }

    pub fn to_kv_text(&self) -> String {
        self.to_kv_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{v}'"))),
    }
}
