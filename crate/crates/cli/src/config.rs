use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bgm_core::denoiser::{ArchDescriptor, TrainConfig};
use bgm_core::diffusion::{make_schedule, NoiseSchedule, ScheduleKind};
use bgm_core::metrics::RetrievalConfig;
use bgm_core::{Error, Result};

/// Keys read into the architecture descriptor.
const ARCH_KEYS: &[&str] = &[
    "channels", "levels", "steps", "pitch_lo", "pitches", "d_model", "d_cond", "d_key", "d_fv", "d_fl", "k", "t0",
    "conditional",
];

const RUN_KEYS: &[&str] = &[
    "seed",
    "schedule",
    "n",
    "beta_start",
    "beta_end",
    "learning_rate",
    "train_steps",
    "batch",
    "manifest",
    "checkpoint",
    "out",
    "generated",
    "threads",
    "retrieval_m",
    "retrieval_k",
];

/// Every knob of a run. Relative paths are resolved against the directory of
/// the config file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub schedule: NoiseSchedule,
    pub arch: ArchDescriptor,
    pub learning_rate: f64,
    pub train_steps: usize,
    pub batch: usize,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub generated: Option<PathBuf>,
    /// Worker threads for per-item fan-out; 0 picks the machine default.
    pub threads: usize,
    pub retrieval: RetrievalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            schedule: NoiseSchedule::default(),
            arch: ArchDescriptor::default(),
            learning_rate: 5e-5,
            train_steps: 2000,
            batch: 1,
            manifest: None,
            checkpoint: None,
            out: None,
            generated: None,
            threads: 0,
            retrieval: RetrievalConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl RunConfig {
    /// Parses `key=value` lines; `#` starts a comment line. Unknown keys are
    /// rejected so typos do not silently fall back to defaults.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !ARCH_KEYS.contains(&k) && !RUN_KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key {k:?}", i + 1)));
            }
            if pairs.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
        }
        let mut c = RunConfig::default();
        let arch_pairs: BTreeMap<String, String> = pairs
            .iter()
            .filter(|(k, _)| ARCH_KEYS.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        c.arch = ArchDescriptor::from_pairs(&arch_pairs)?;
        let path = |v: &String| base.join(v);
        let kind: ScheduleKind = pairs.get("schedule").map_or(Ok(ScheduleKind::Linear), |v| v.parse())?;
        let n = pairs.get("n").map_or(Ok(1000), |v| parse_num("n", v))?;
        let start = pairs.get("beta_start").map_or(Ok(1e-4), |v| parse_num("beta_start", v))?;
        let end = pairs.get("beta_end").map_or(Ok(0.02), |v| parse_num("beta_end", v))?;
        c.schedule = make_schedule(kind, n, start, end)?;
        for (k, v) in &pairs {
            match k.as_str() {
                "seed" => c.seed = Some(parse_num(k, v)?),
                "learning_rate" => c.learning_rate = parse_num(k, v)?,
                "train_steps" => c.train_steps = parse_num(k, v)?,
                "batch" => c.batch = parse_num(k, v)?,
                "manifest" => c.manifest = Some(path(v)),
                "checkpoint" => c.checkpoint = Some(path(v)),
                "out" => c.out = Some(path(v)),
                "generated" => c.generated = Some(path(v)),
                "threads" => c.threads = parse_num(k, v)?,
                "retrieval_m" => c.retrieval.m = parse_num(k, v)?,
                "retrieval_k" => {
                    c.retrieval.ks = v.split(',').map(|x| parse_num(k, x.trim())).collect::<Result<_>>()?
                }
                _ => {}
            }
        }
        if !(c.learning_rate >= 0.0 && c.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", c.learning_rate)));
        }
        if c.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if c.arch.t0 > c.schedule.n() {
            return Err(Error::Config(format!("t0={} exceeds n={}", c.arch.t0, c.schedule.n())));
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required (config key `seed` or --seed)".into()))
    }

    pub fn require<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| Error::Config(format!("config key `{key}` is required")))
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.train_steps,
            learning_rate: self.learning_rate,
            batch: self.batch,
            seed,
            ..TrainConfig::default()
        }
    }
}
