use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::ConfigError;

/// Upper bound (exclusive) of an LLC hit.
pub const LLC_HIT_MAX: u32 = 160;
pub const OPTIMIZED_MIN: u32 = 170;
pub const OPTIMIZED_MAX: u32 = 330;
pub const NORMAL_MIN: u32 = 350;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LatencyClass {
    LlcHit,
    OptimizedMiss,
    NormalMiss,
}

impl LatencyClass {
    pub const ALL: [LatencyClass; 3] = [
        LatencyClass::LlcHit,
        LatencyClass::OptimizedMiss,
        LatencyClass::NormalMiss,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LatencyClass::LlcHit => "LlcHit",
            LatencyClass::OptimizedMiss => "OptimizedMiss",
            LatencyClass::NormalMiss => "NormalMiss",
        }
    }
}

impl fmt::Display for LatencyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LatencyClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LatencyClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown latency class `{s}`"))
    }
}

/// Total classifier. Values inside the class bands map to their band; the
/// gaps between bands split at their midpoints.
pub fn classify(cycles: u32) -> LatencyClass {
    if cycles < (LLC_HIT_MAX + OPTIMIZED_MIN) / 2 {
        LatencyClass::LlcHit
    } else if cycles < (OPTIMIZED_MAX + NORMAL_MIN) / 2 {
        LatencyClass::OptimizedMiss
    } else {
        LatencyClass::NormalMiss
    }
}

/// Class centers. Samples are `center ± jitter`, uniform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatencyModel {
    pub llc_hit: u32,
    pub optimized_miss: u32,
    pub normal_miss: u32,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            llc_hit: 100,
            optimized_miss: 225,
            normal_miss: 380,
        }
    }
}

impl LatencyModel {
    pub fn center(&self, class: LatencyClass) -> u32 {
        match class {
            LatencyClass::LlcHit => self.llc_hit,
            LatencyClass::OptimizedMiss => self.optimized_miss,
            LatencyClass::NormalMiss => self.normal_miss,
        }
    }

    /// Every sample the model can emit must fall inside its class band.
    pub fn validate(&self, jitter: u32) -> Result<(), ConfigError> {
        let bands = [
            ("latency.llc_hit", self.llc_hit, 0, LLC_HIT_MAX - 1),
            (
                "latency.optimized_miss",
                self.optimized_miss,
                OPTIMIZED_MIN,
                OPTIMIZED_MAX,
            ),
            ("latency.normal_miss", self.normal_miss, NORMAL_MIN, u32::MAX),
        ];
        for (key, center, lo, hi) in bands {
            let lo_ok = center.checked_sub(jitter).is_some_and(|v| v >= lo);
            let hi_ok = center.checked_add(jitter).is_some_and(|v| v <= hi);
            if !(lo_ok && hi_ok) {
                return Err(ConfigError::invalid(
                    key,
                    format!("{center} ± {jitter} leaves the band [{lo}, {hi}]"),
                ));
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, class: LatencyClass, jitter: u32, rng: &mut R) -> u32 {
        let center = self.center(class);
        if jitter == 0 {
            center
        } else {
            rng.gen_range(center - jitter..=center + jitter)
        }
    }
}
