//! Host-registered record functions applied by compute stages.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde_json::Value;
use thiserror::Error;

use super::ddl::UdfRef;
use crate::dataflow::Record;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct UdfError(pub String);

/// A record transformation. `Ok(None)` drops the record without error.
///
/// Implementations are shared by every instance of a compute stage, so any
/// state must be interior and thread-safe.
pub trait Udf: Send + Sync {
    fn apply(&self, record: Record) -> Result<Option<Record>, UdfError>;
}

type Factory = dyn Fn(&[i64]) -> Result<Arc<dyn Udf>, String> + Send + Sync;

#[derive(Clone)]
pub struct FunctionRegistry {
    factories: BTreeMap<String, Arc<Factory>>,
}

impl fmt::Debug for FunctionRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

impl Default for FunctionRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl FunctionRegistry {
    pub fn empty() -> Self {
        FunctionRegistry { factories: BTreeMap::new() }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("identity", |args| {
            no_args("identity", args)?;
            Ok(Arc::new(Identity))
        });
        r.register("addHashTags", |args| {
            no_args("addHashTags", args)?;
            Ok(Arc::new(AddHashTags))
        });
        r.register("failEvery", |args| match args {
            [n] if *n >= 1 => Ok(Arc::new(FailEvery::new(*n as u64))),
            _ => Err("failEvery takes one positive integer argument".into()),
        });
        r
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&[i64]) -> Result<Arc<dyn Udf>, String> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Arc::new(factory));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    /// Creates a fresh function instance with its own state.
    pub fn instantiate(&self, udf: &UdfRef) -> Result<Arc<dyn Udf>, String> {
        let f = self.factories.get(&udf.name).ok_or_else(|| format!("unknown function `{}`", udf.name))?;
        f(&udf.args)
    }
}

fn no_args(name: &str, args: &[i64]) -> Result<(), String> {
    if args.is_empty() {
        Ok(())
    } else {
        Err(format!("{name} takes no arguments"))
    }
}

pub struct Identity;

impl Udf for Identity {
    fn apply(&self, record: Record) -> Result<Option<Record>, UdfError> {
        Ok(Some(record))
    }
}

/// Collects `#` tokens of `message-text` into `referred-topics`, copies
/// `user.screen-name` to `userId` and pairs the coordinates into
/// `sender-location` when both are present.
pub struct AddHashTags;

pub fn hashtags(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|tok| tok.strip_prefix('#'))
        .map(|t| t.trim_end_matches(|c: char| !(c.is_alphanumeric() || c == '_')))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

impl Udf for AddHashTags {
    fn apply(&self, mut record: Record) -> Result<Option<Record>, UdfError> {
        let text = record
            .get("message-text")
            .and_then(Value::as_str)
            .ok_or_else(|| UdfError("addHashTags: message-text missing or not a string".into()))?;
        let topics: Vec<Value> = hashtags(text).into_iter().map(Value::String).collect();
        let user = record
            .get_path("user.screen-name")
            .and_then(Value::as_str)
            .ok_or_else(|| UdfError("addHashTags: user.screen-name missing".into()))?
            .to_string();
        let location = match (record.get("location-lat").and_then(Value::as_f64), record.get("location-long").and_then(Value::as_f64)) {
            (Some(lat), Some(long)) => Some(Value::Array(vec![lat.into(), long.into()])),
            _ => None,
        };
        record.update(|m| {
            m.insert("userId".into(), Value::String(user));
            if let Some(loc) = location {
                m.insert("sender-location".into(), loc);
            }
            m.insert("referred-topics".into(), Value::Array(topics));
        });
        Ok(Some(record))
    }
}

/// Test poison: fails on every n-th invocation, counted across all callers.
pub struct FailEvery {
    every: u64,
    calls: AtomicU64,
}

impl FailEvery {
    pub fn new(every: u64) -> Self {
        FailEvery { every, calls: AtomicU64::new(0) }
    }
}

impl Udf for FailEvery {
    fn apply(&self, record: Record) -> Result<Option<Record>, UdfError> {
        let n = self.calls.fetch_add(1, Ordering::Relaxed) + 1;
        if n.is_multiple_of(self.every) {
            Err(UdfError(format!("failEvery({}): injected failure on call {n}", self.every)))
        } else {
            Ok(Some(record))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_hash_tags_shapes_processed_tweet() {
        let reg = FunctionRegistry::with_builtins();
        let f = reg.instantiate(&UdfRef::named("addHashTags")).unwrap();
        let r = Record::from_json(
            r#"{"tweetId":"1","user":{"screen-name":"NathanGiesen@211"},"location-lat":47.44,
                "location-long":80.65,"message-text":"love #verizon its #customer-service is great!"}"#,
        )
        .unwrap();
        let out = f.apply(r).unwrap().unwrap();
        assert_eq!(out.get("userId"), Some(&Value::from("NathanGiesen@211")));
        assert_eq!(out.get("referred-topics"), Some(&serde_json::json!(["verizon", "customer-service"])));
        assert_eq!(out.get("sender-location"), Some(&serde_json::json!([47.44, 80.65])));
        assert!(out.get("user").is_some());
        assert_eq!(out.encoded_len(), out.to_json().len());
    }

    #[test]
    fn add_hash_tags_fails_without_text() {
        let f = AddHashTags;
        assert!(f.apply(Record::from_json(r#"{"user":{"screen-name":"x"}}"#).unwrap()).is_err());
    }

    #[test]
    fn fail_every_counts_calls() {
        let reg = FunctionRegistry::with_builtins();
        let f = reg.instantiate(&UdfRef { name: "failEvery".into(), args: vec![3] }).unwrap();
        let fails: Vec<bool> = (0..9).map(|_| f.apply(Record::from_json("{}").unwrap()).is_err()).collect();
        assert_eq!(fails, [false, false, true, false, false, true, false, false, true]);
        assert!(reg.instantiate(&UdfRef { name: "failEvery".into(), args: vec![0] }).is_err());
        assert!(reg.instantiate(&UdfRef::named("nope")).is_err());
    }
}
