//! End-to-end side-channel attacks: exponent recovery against two RSA
//! exponentiation skeletons, and event-timing monitors.

pub mod monitor;
pub mod rsa;

pub use monitor::{
    monitor_events, EventKind, EventMatch, EventVictim, LatencySplit, MonitorConfig, MonitorReport,
    ProbeSample,
};
pub use rsa::{
    attack_ml_rsa, attack_sqm_rsa, AttackConfig, BitObservation, MlRsaVictim, RecoveredSecret,
    SqmRsaVictim,
};
