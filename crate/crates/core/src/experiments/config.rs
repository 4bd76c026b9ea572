use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use crate::covert::{MessagePattern, CALIBRATED_EVICT_NOISE, CALIBRATED_FLUSH_NOISE};
use crate::error::ConfigError;
use crate::kernel::{NoiseModel, SimConfig};
use crate::mem::MachineConfig;
use crate::xpt::XptConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExperimentKind {
    TriggerSweep,
    EntrySweep,
    IndexScenarios,
    BoundaryScenarios,
    InvalidateScenarios,
    CovertFlush,
    CovertEvict,
    SqmRsa,
    MlRsa,
    Keystroke,
    Network,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 11] = [
        ExperimentKind::TriggerSweep,
        ExperimentKind::EntrySweep,
        ExperimentKind::IndexScenarios,
        ExperimentKind::BoundaryScenarios,
        ExperimentKind::InvalidateScenarios,
        ExperimentKind::CovertFlush,
        ExperimentKind::CovertEvict,
        ExperimentKind::SqmRsa,
        ExperimentKind::MlRsa,
        ExperimentKind::Keystroke,
        ExperimentKind::Network,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::TriggerSweep => "TriggerSweep",
            ExperimentKind::EntrySweep => "EntrySweep",
            ExperimentKind::IndexScenarios => "IndexScenarios",
            ExperimentKind::BoundaryScenarios => "BoundaryScenarios",
            ExperimentKind::InvalidateScenarios => "InvalidateScenarios",
            ExperimentKind::CovertFlush => "CovertFlush",
            ExperimentKind::CovertEvict => "CovertEvict",
            ExperimentKind::SqmRsa => "SqmRsa",
            ExperimentKind::MlRsa => "MlRsa",
            ExperimentKind::Keystroke => "Keystroke",
            ExperimentKind::Network => "Network",
        }
    }

    /// One-line description of what the experiment reproduces.
    pub fn description(self) -> &'static str {
        match self {
            ExperimentKind::TriggerSweep => {
                "probe latency vs number of training misses, same core and cross core (trigger threshold)"
            }
            ExperimentKind::EntrySweep => {
                "latency of the first primed page after priming N pages (table capacity and LRU)"
            }
            ExperimentKind::IndexScenarios => {
                "physical page vs virtual page vs instruction address as the table index"
            }
            ExperimentKind::BoundaryScenarios => {
                "training never primes the next 4 KiB page under 4 KiB, 2 MiB and 1 GiB mappings"
            }
            ExperimentKind::InvalidateScenarios => {
                "six cross-process and cross-thread replacement and invalidation scenarios"
            }
            ExperimentKind::CovertFlush => "covert channel that resets the sender's page with a TLB flush",
            ExperimentKind::CovertEvict => "covert channel that evicts the receiver's entry with page walks",
            ExperimentKind::SqmRsa => "exponent recovery against square-and-multiply",
            ExperimentKind::MlRsa => "exponent recovery against the Montgomery ladder",
            ExperimentKind::Keystroke => "keystroke timing, with the prefetcher enabled and disabled",
            ExperimentKind::Network => "packet arrival timing at a fixed packet interval",
        }
    }

    pub fn is_covert(self) -> bool {
        matches!(self, ExperimentKind::CovertFlush | ExperimentKind::CovertEvict)
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn normalize(s: &str) -> String {
    s.chars()
        .filter(|c| *c != '-' && *c != '_')
        .flat_map(char::to_lowercase)
        .collect()
}

impl FromStr for ExperimentKind {
    type Err = ConfigError;

    /// Case-insensitive; `-` and `_` are ignored.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted = normalize(s);
        ExperimentKind::ALL
            .into_iter()
            .find(|k| normalize(k.name()) == wanted)
            .ok_or_else(|| ConfigError::invalid("experiment", format!("unknown experiment `{s}`")))
    }
}

/// Splits `key = value` lines. `#` starts a comment; blank lines are
/// skipped; a key may appear only once.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: i + 1,
                reason: format!("expected `key = value`, found `{line}`"),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                reason: "empty key".into(),
            });
        }
        if pairs.iter().any(|(k, _)| k == key) {
            return Err(ConfigError::Syntax {
                line: i + 1,
                reason: format!("duplicate key `{key}`"),
            });
        }
        pairs.push((key.to_string(), value.to_string()));
    }
    Ok(pairs)
}

/// Everything an experiment run depends on. Defaults reproduce the
/// reference settings of each experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub out: PathBuf,
    /// `None` selects the experiment's calibrated default.
    pub spurious_walk_prob: Option<f64>,
    pub jitter: u32,
    pub xpt: XptConfig,
    /// Also write the event trace (covert experiments only).
    pub trace: bool,
    pub trials: u32,
    pub max_misses: u32,
    pub max_pages: u32,
    pub bits: usize,
    /// `None` runs every pattern.
    pub pattern: Option<MessagePattern>,
    pub rounds_per_bit: u32,
    /// `None` selects the experiment's reference exponent.
    pub exponent: Option<u64>,
    pub exponent_bits: usize,
    pub reps: u32,
    pub keystrokes: usize,
    pub keystroke_gap_min_ns: u64,
    pub keystroke_gap_max_ns: u64,
    pub packets: usize,
    pub packet_interval_ns: f64,
}

/// Keys accepted by [`ExperimentConfig::set`], in `to_text` order.
pub const KEYS: [&str; 24] = [
    "experiment",
    "seed",
    "out",
    "noise.spurious_walk_prob",
    "noise.jitter",
    "xpt.threshold",
    "xpt.capacity",
    "xpt.enabled",
    "xpt.global_flush_clears",
    "trace",
    "trials",
    "max_misses",
    "max_pages",
    "bits",
    "pattern",
    "rounds_per_bit",
    "exponent",
    "exponent_bits",
    "reps",
    "keystrokes",
    "keystroke_gap_min_ns",
    "keystroke_gap_max_ns",
    "packets",
    "packet_interval_ns",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| ConfigError::invalid(key, format!("`{value}` is not a valid number")))
}

fn flag(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::invalid(key, format!("`{value}` is not a boolean"))),
    }
}

fn hex_or_dec(key: &str, value: &str) -> Result<u64, ConfigError> {
    let parsed = match value.strip_prefix("0x").or_else(|| value.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => value.parse().ok(),
    };
    parsed.ok_or_else(|| ConfigError::invalid(key, format!("`{value}` is not a valid integer")))
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind) -> Self {
        ExperimentConfig {
            experiment,
            seed: 1,
            out: PathBuf::from("out"),
            spurious_walk_prob: None,
            jitter: NoiseModel::default().jitter,
            xpt: XptConfig::default(),
            trace: false,
            trials: 10,
            max_misses: 64,
            max_pages: 300,
            bits: 10_000,
            pattern: None,
            rounds_per_bit: 1,
            exponent: None,
            exponent_bits: 8,
            reps: 10,
            keystrokes: 10,
            keystroke_gap_min_ns: 1_000_000,
            keystroke_gap_max_ns: 5_000_000,
            packets: 1_000,
            packet_interval_ns: 26_000.0,
        }
    }

    /// Builds a configuration from ordered pairs; later pairs override
    /// earlier ones. The `experiment` key is required.
    pub fn from_pairs<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> Result<Self, ConfigError> {
        let kind = pairs
            .iter()
            .rev()
            .find(|(k, _)| k.as_ref() == "experiment")
            .ok_or_else(|| ConfigError::invalid("experiment", "no experiment selected"))?
            .1
            .as_ref()
            .parse()?;
        let mut cfg = ExperimentConfig::new(kind);
        for (k, v) in pairs {
            cfg.set(k.as_ref(), v.as_ref())?;
        }
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "experiment" => self.experiment = value.parse()?,
            "seed" => self.seed = hex_or_dec(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "noise.spurious_walk_prob" => {
                self.spurious_walk_prob = match value {
                    "default" => None,
                    v => Some(num(key, v)?),
                }
            }
            "noise.jitter" => self.jitter = num(key, value)?,
            "xpt.threshold" => self.xpt.trigger_threshold = num(key, value)?,
            "xpt.capacity" => self.xpt.capacity = num(key, value)?,
            "xpt.enabled" => self.xpt.enabled = flag(key, value)?,
            "xpt.global_flush_clears" => self.xpt.global_flush_clears = flag(key, value)?,
            "trace" => self.trace = flag(key, value)?,
            "trials" => self.trials = num(key, value)?,
            "max_misses" => self.max_misses = num(key, value)?,
            "max_pages" => self.max_pages = num(key, value)?,
            "bits" => self.bits = num(key, value)?,
            "pattern" => {
                self.pattern = match value {
                    "all" => None,
                    v => Some(v.parse().map_err(|e: String| ConfigError::invalid(key, e))?),
                }
            }
            "rounds_per_bit" => self.rounds_per_bit = num(key, value)?,
            "exponent" => {
                self.exponent = match value {
                    "default" => None,
                    v => Some(hex_or_dec(key, v)?),
                }
            }
            "exponent_bits" => self.exponent_bits = num(key, value)?,
            "reps" => self.reps = num(key, value)?,
            "keystrokes" => self.keystrokes = num(key, value)?,
            "keystroke_gap_min_ns" => self.keystroke_gap_min_ns = num(key, value)?,
            "keystroke_gap_max_ns" => self.keystroke_gap_max_ns = num(key, value)?,
            "packets" => self.packets = num(key, value)?,
            "packet_interval_ns" => self.packet_interval_ns = num(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn effective_noise_prob(&self) -> f64 {
        self.spurious_walk_prob.unwrap_or(match self.experiment {
            ExperimentKind::CovertEvict => CALIBRATED_EVICT_NOISE,
            ExperimentKind::CovertFlush => CALIBRATED_FLUSH_NOISE,
            _ => 0.0,
        })
    }

    pub fn effective_exponent(&self) -> u64 {
        self.exponent.unwrap_or(match self.experiment {
            ExperimentKind::MlRsa => 0x93,
            _ => 0xf0,
        })
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            machine: MachineConfig {
                xpt: self.xpt.clone(),
                ..MachineConfig::default()
            },
            noise: NoiseModel {
                seed: self.seed,
                spurious_walk_prob: self.effective_noise_prob(),
                jitter: self.jitter,
            },
            ..SimConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let sim = self.sim_config();
        sim.noise.validate()?;
        sim.machine.validate(sim.noise.jitter)?;
        let positive = |key: &str, v: u64| {
            if v == 0 {
                Err(ConfigError::invalid(key, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        positive("trials", u64::from(self.trials))?;
        positive("bits", self.bits as u64)?;
        positive("rounds_per_bit", u64::from(self.rounds_per_bit))?;
        positive("reps", u64::from(self.reps))?;
        positive("keystrokes", self.keystrokes as u64)?;
        positive("packets", self.packets as u64)?;
        positive("keystroke_gap_min_ns", self.keystroke_gap_min_ns)?;
        if !(1..=64).contains(&self.max_misses) {
            return Err(ConfigError::invalid("max_misses", "must be in 1..=64"));
        }
        if self.max_pages < 2 {
            return Err(ConfigError::invalid("max_pages", "must be at least 2"));
        }
        if !(1..=64).contains(&self.exponent_bits) {
            return Err(ConfigError::invalid("exponent_bits", "must be in 1..=64"));
        }
        if self.exponent_bits < 64 && self.effective_exponent() >> self.exponent_bits != 0 {
            return Err(ConfigError::invalid("exponent", "does not fit in exponent_bits"));
        }
        if self.keystroke_gap_min_ns > self.keystroke_gap_max_ns {
            return Err(ConfigError::invalid(
                "keystroke_gap_max_ns",
                "must not be below keystroke_gap_min_ns",
            ));
        }
        if !(self.packet_interval_ns.is_finite() && self.packet_interval_ns > 0.0) {
            return Err(ConfigError::invalid("packet_interval_ns", "must be positive"));
        }
        if self.trace && !self.experiment.is_covert() {
            return Err(ConfigError::invalid("trace", "only the covert experiments write a trace"));
        }
        Ok(())
    }

    /// Every key with its effective value, in a form [`Self::from_text`]
    /// reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("experiment", self.experiment.name().into());
        put("seed", self.seed.to_string());
        put("out", self.out.display().to_string());
        put("noise.spurious_walk_prob", self.effective_noise_prob().to_string());
        put("noise.jitter", self.jitter.to_string());
        put("xpt.threshold", self.xpt.trigger_threshold.to_string());
        put("xpt.capacity", self.xpt.capacity.to_string());
        put("xpt.enabled", self.xpt.enabled.to_string());
        put("xpt.global_flush_clears", self.xpt.global_flush_clears.to_string());
        put("trace", self.trace.to_string());
        put("trials", self.trials.to_string());
        put("max_misses", self.max_misses.to_string());
        put("max_pages", self.max_pages.to_string());
        put("bits", self.bits.to_string());
        put("pattern", self.pattern.map_or("all", MessagePattern::as_str).into());
        put("rounds_per_bit", self.rounds_per_bit.to_string());
        put("exponent", format!("{:#x}", self.effective_exponent()));
        put("exponent_bits", self.exponent_bits.to_string());
        put("reps", self.reps.to_string());
        put("keystrokes", self.keystrokes.to_string());
        put("keystroke_gap_min_ns", self.keystroke_gap_min_ns.to_string());
        put("keystroke_gap_max_ns", self.keystroke_gap_max_ns.to_string());
        put("packets", self.packets.to_string());
        put("packet_interval_ns", self.packet_interval_ns.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in ExperimentKind::ALL {
            assert_eq!(k.name().parse::<ExperimentKind>().unwrap(), k);
        }
        assert_eq!("covert-flush".parse::<ExperimentKind>().unwrap(), ExperimentKind::CovertFlush);
        assert!("Nope".parse::<ExperimentKind>().is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::new(ExperimentKind::MlRsa);
        cfg.seed = 9;
        cfg.xpt.enabled = false;
        cfg.pattern = Some(MessagePattern::Zeros);
        let text = cfg.to_text();
        assert_eq!(text.lines().count(), KEYS.len());
        for (line, key) in text.lines().zip(KEYS) {
            assert!(line.starts_with(&format!("{key} = ")), "{line}");
        }
        let mut back = ExperimentConfig::from_text(&text).unwrap();
        assert_eq!(back.exponent, Some(0x93));
        back.exponent = None;
        back.spurious_walk_prob = None;
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert_eq!(
            ExperimentConfig::from_text("experiment = SqmRsa\ncolour = red\n"),
            Err(ConfigError::UnknownKey("colour".into()))
        );
        assert!(matches!(parse_pairs("seed 4"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(parse_pairs("a = 1\na = 2"), Err(ConfigError::Syntax { line: 2, .. })));
        assert!(ExperimentConfig::from_text("seed = 4").is_err());
        assert!(ExperimentConfig::from_text("experiment = SqmRsa\nseed = x").is_err());
    }

    #[test]
    fn comments_and_overrides() {
        let pairs = parse_pairs("# header\nexperiment = Network # trailing\n\npackets = 5\n").unwrap();
        let mut all = pairs.clone();
        all.push(("packets".into(), "7".into()));
        let cfg = ExperimentConfig::from_pairs(&all).unwrap();
        assert_eq!(cfg.experiment, ExperimentKind::Network);
        assert_eq!(cfg.packets, 7);
    }

    #[test]
    fn experiment_defaults() {
        assert_eq!(ExperimentConfig::new(ExperimentKind::CovertEvict).effective_noise_prob(), CALIBRATED_EVICT_NOISE);
        assert_eq!(ExperimentConfig::new(ExperimentKind::SqmRsa).effective_noise_prob(), 0.0);
        assert_eq!(ExperimentConfig::new(ExperimentKind::SqmRsa).effective_exponent(), 0xf0);
        let mut cfg = ExperimentConfig::new(ExperimentKind::SqmRsa);
        cfg.exponent = Some(0x1ff);
        assert!(cfg.validate().is_err());
        cfg.trace = true;
        cfg.exponent = None;
        assert!(cfg.validate().is_err());
    }
}
