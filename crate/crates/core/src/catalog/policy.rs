use std::fmt;

use thiserror::Error;

/// An integer bound that may be absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Limit {
    Unlimited,
    At(u64),
}

impl Limit {
    pub fn allows(self, value: u64) -> bool {
        match self {
            Limit::Unlimited => true,
            Limit::At(max) => value <= max,
        }
    }
}

impl fmt::Display for Limit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Limit::Unlimited => f.write_str("unlimited"),
            Limit::At(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestionPolicy {
    pub name: String,
    pub excess_records_spill: bool,
    pub excess_records_discard: bool,
    pub max_spill_bytes: Limit,
    pub recover_soft_failure: bool,
    pub recover_hard_failure: bool,
    pub max_consecutive_skipped: Limit,
    pub collect_statistics: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("unknown policy parameter `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for policy parameter `{key}`")]
    BadValue { key: String, value: String },
}

pub const BASIC: &str = "Basic";
pub const MONITORED: &str = "Monitored";
pub const FAULT_TOLERANT: &str = "Fault-Tolerant";

/// Accepted DDL keys, in display order.
pub const KEYS: [&str; 7] = [
    "excess.records.spill",
    "excess.records.discard",
    "excess.records.max.spill.bytes",
    "recover.soft.failure",
    "recover.hard.failure",
    "max.consecutive.skipped.records",
    "collect.statistics",
];

impl IngestionPolicy {
    pub fn basic() -> Self {
        IngestionPolicy {
            name: BASIC.into(),
            excess_records_spill: false,
            excess_records_discard: true,
            max_spill_bytes: Limit::Unlimited,
            recover_soft_failure: false,
            recover_hard_failure: false,
            max_consecutive_skipped: Limit::Unlimited,
            collect_statistics: false,
        }
    }

    pub fn monitored() -> Self {
        IngestionPolicy { name: MONITORED.into(), collect_statistics: true, ..Self::basic() }
    }

    pub fn fault_tolerant() -> Self {
        IngestionPolicy {
            name: FAULT_TOLERANT.into(),
            excess_records_spill: true,
            excess_records_discard: false,
            max_spill_bytes: Limit::Unlimited,
            recover_soft_failure: true,
            recover_hard_failure: true,
            max_consecutive_skipped: Limit::Unlimited,
            collect_statistics: true,
        }
    }

    pub fn builtins() -> [IngestionPolicy; 3] {
        [Self::basic(), Self::monitored(), Self::fault_tolerant()]
    }

    /// Copy of `self` renamed and with the given keys overridden.
    pub fn derive(&self, name: &str, overrides: &[(String, String)]) -> Result<Self, PolicyError> {
        let mut p = self.clone();
        p.name = name.to_string();
        for (k, v) in overrides {
            p.set(k, v)?;
        }
        Ok(p)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PolicyError> {
        let bad = || PolicyError::BadValue { key: key.to_string(), value: value.to_string() };
        let flag = || match value.trim().to_ascii_lowercase().as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(bad()),
        };
        let limit = || {
            let v = value.trim();
            if v.eq_ignore_ascii_case("unlimited") || v == "-1" {
                Ok(Limit::Unlimited)
            } else {
                v.parse::<u64>().map(Limit::At).map_err(|_| bad())
            }
        };
        match key {
            "excess.records.spill" => self.excess_records_spill = flag()?,
            "excess.records.discard" => self.excess_records_discard = flag()?,
            "excess.records.max.spill.bytes" => self.max_spill_bytes = limit()?,
            "recover.soft.failure" => self.recover_soft_failure = flag()?,
            "recover.hard.failure" => self.recover_hard_failure = flag()?,
            "max.consecutive.skipped.records" => self.max_consecutive_skipped = limit()?,
            "collect.statistics" => self.collect_statistics = flag()?,
            _ => return Err(PolicyError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// (key, value) pairs in DDL form.
    pub fn parameters(&self) -> Vec<(&'static str, String)> {
        vec![
            (KEYS[0], self.excess_records_spill.to_string()),
            (KEYS[1], self.excess_records_discard.to_string()),
            (KEYS[2], self.max_spill_bytes.to_string()),
            (KEYS[3], self.recover_soft_failure.to_string()),
            (KEYS[4], self.recover_hard_failure.to_string()),
            (KEYS[5], self.max_consecutive_skipped.to_string()),
            (KEYS[6], self.collect_statistics.to_string()),
        ]
    }
}
