//! Protocol configuration and quorum arithmetic.
//!
//! The replica count is fixed at `n = 3f + 2p + 1`: `f` is the number of
//! Byzantine replicas tolerated outright, and the `2p` extra replicas let
//! the fast path survive up to `p` diverged (or faulty) replicas.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::CryptoMode;
use crate::types::{Micros, MS};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("percentile q must satisfy 0 < q <= 100, got {0}")]
    BadPercentile(u32),
    #[error("checkpoint interval must be >= 1")]
    BadInterval,
    #[error("window size must be >= 1")]
    BadWindow,
    #[error("gamma must be >= 0 and finite, got {0}")]
    BadGamma(f64),
    #[error("timeout `{0}` must be > 0")]
    BadTimeout(&'static str),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    /// Tolerated Byzantine replicas.
    pub f: u32,
    /// Tolerated diverged/faulty replicas on the fast path.
    pub p: u32,
    /// Checkpoint interval `I` in log entries.
    pub checkpoint_interval: u64,
    pub sync_timeout_ms: u64,
    pub chkpt_timeout_ms: u64,
    pub view_change_timeout_ms: u64,
    /// ETA padding coefficient (dimensionless).
    pub gamma: f64,
    /// ETA cap in milliseconds.
    pub delta_ms: u64,
    /// Delay percentile in (0, 100].
    pub q: u32,
    /// Length of the per-replica delay sample window.
    pub window_size: usize,
    /// Incoming ETAs further than this past the local clock are overwritten.
    pub eta_overwrite_threshold_ms: u64,
    /// Cadence of proxy background delay probes.
    pub probe_interval_ms: u64,
    /// Whether diverged replicas proactively align to quorum checkpoints.
    pub align_enabled: bool,
    pub crypto: CryptoMode,
}

impl Default for Config {
    fn default() -> Self {
        let delta_ms = 500;
        Config {
            f: 1,
            p: 1,
            checkpoint_interval: 16,
            sync_timeout_ms: 150,
            chkpt_timeout_ms: 100,
            view_change_timeout_ms: 300,
            gamma: 0.25,
            delta_ms,
            q: 90,
            window_size: 32,
            // Default overwrite threshold: twice the ETA cap.
            eta_overwrite_threshold_ms: 2 * delta_ms,
            probe_interval_ms: 100,
            align_enabled: true,
            crypto: CryptoMode::Null,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.q == 0 || self.q > 100 {
            return Err(ConfigError::BadPercentile(self.q));
        }
        if self.checkpoint_interval < 1 {
            return Err(ConfigError::BadInterval);
        }
        if self.window_size < 1 {
            return Err(ConfigError::BadWindow);
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(ConfigError::BadGamma(self.gamma));
        }
        for (name, v) in [
            ("sync_timeout_ms", self.sync_timeout_ms),
            ("chkpt_timeout_ms", self.chkpt_timeout_ms),
            ("view_change_timeout_ms", self.view_change_timeout_ms),
            ("delta_ms", self.delta_ms),
        ] {
            if v == 0 {
                return Err(ConfigError::BadTimeout(name));
            }
        }
        Ok(())
    }

    /// Total replicas: n = 3f + 2p + 1.
    pub fn n(&self) -> usize {
        (3 * self.f + 2 * self.p + 1) as usize
    }

    /// Fast-path quorum: n - p consistent speculative replies (or SYNCs).
    pub fn fast_quorum(&self) -> usize {
        self.n() - self.p as usize
    }

    /// Strong quorum: n - f, used for repair LOG collection, prepare and
    /// commit certificates, and the checkpoint-timeout trigger.
    pub fn strong_quorum(&self) -> usize {
        self.n() - self.f as usize
    }

    /// Weak quorum: f + 1, enough to contain one correct replica.
    pub fn weak_quorum(&self) -> usize {
        self.f as usize + 1
    }

    /// Rule-one support in log merging: f + p + 1 consistent histories.
    pub fn merge_support(&self) -> usize {
        (self.f + self.p + 1) as usize
    }

    pub fn delta_us(&self) -> Micros {
        self.delta_ms * MS
    }

    pub fn sync_timeout_us(&self) -> Micros {
        self.sync_timeout_ms * MS
    }

    pub fn chkpt_timeout_us(&self) -> Micros {
        self.chkpt_timeout_ms * MS
    }

    pub fn view_change_timeout_us(&self) -> Micros {
        self.view_change_timeout_ms * MS
    }

    pub fn eta_overwrite_threshold_us(&self) -> Micros {
        self.eta_overwrite_threshold_ms * MS
    }

    pub fn probe_interval_us(&self) -> Micros {
        self.probe_interval_ms * MS
    }

    /// Repair leader for a view.
    pub fn leader_of(&self, view: u64) -> u32 {
        (view % self.n() as u64) as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(f: u32, p: u32) -> Config {
        Config { f, p, ..Config::default() }
    }

    #[test]
    fn fast_quorum_examples() {
        assert_eq!(cfg(1, 1).n(), 6);
        assert_eq!(cfg(1, 1).fast_quorum(), 5);
        assert_eq!(cfg(1, 0).n(), 4);
        assert_eq!(cfg(1, 0).fast_quorum(), 4);
        assert_eq!(cfg(2, 3).n(), 13);
        assert_eq!(cfg(2, 3).fast_quorum(), 10);
    }

    #[test]
    fn quorum_intersection_is_majority() {
        // (n-p) + (n-f) - n = 2f + p + 1 > n/2 for every valid config.
        for f in 0..5u32 {
            for p in 0..5u32 {
                let c = cfg(f, p);
                let inter = c.fast_quorum() + c.strong_quorum() - c.n();
                assert_eq!(inter, (2 * f + p + 1) as usize);
                assert!(2 * inter > c.n(), "f={f} p={p}");
                assert_eq!(inter, c.merge_support() + c.f as usize);
            }
        }
    }

    #[test]
    fn validation_rejects_bad_fields() {
        let mut c = Config::default();
        c.q = 0;
        assert_eq!(c.validate(), Err(ConfigError::BadPercentile(0)));
        let mut c = Config::default();
        c.q = 101;
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.checkpoint_interval = 0;
        assert_eq!(c.validate(), Err(ConfigError::BadInterval));
        let mut c = Config::default();
        c.gamma = -0.5;
        assert!(c.validate().is_err());
        assert!(Config::default().validate().is_ok());
    }

    #[test]
    fn leader_rotates_mod_n() {
        let c = cfg(1, 1);
        assert_eq!(c.leader_of(0), 0);
        assert_eq!(c.leader_of(7), 1);
    }
}
