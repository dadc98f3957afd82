use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, NaiveDateTime};
use serde_json::Value;

use crate::cluster::NodeId;
use crate::dataflow::Record;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldKind {
    String,
    Int,
    Double,
    Point,
    Datetime,
    StringBag,
    /// A previously declared record type, checked one level deep.
    Record(String),
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldKind::String => f.write_str("string"),
            FieldKind::Int => f.write_str("int"),
            FieldKind::Double => f.write_str("double"),
            FieldKind::Point => f.write_str("point"),
            FieldKind::Datetime => f.write_str("datetime"),
            FieldKind::StringBag => f.write_str("{{string}}"),
            FieldKind::Record(name) => f.write_str(name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldDef {
    pub name: String,
    pub kind: FieldKind,
    pub optional: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordType {
    pub name: String,
    pub fields: Vec<FieldDef>,
    pub open: bool,
}

impl RecordType {
    pub fn field(&self, name: &str) -> Option<&FieldDef> {
        self.fields.iter().find(|f| f.name == name)
    }

    /// Structural check: every required field exists with a parseable kind,
    /// optional fields are checked when present, extra fields pass through.
    pub fn check(&self, record: &Record, types: &BTreeMap<String, RecordType>) -> Result<(), String> {
        check_object(self, record.fields(), types, 0)
    }
}

fn check_object(
    ty: &RecordType,
    fields: &serde_json::Map<String, Value>,
    types: &BTreeMap<String, RecordType>,
    depth: usize,
) -> Result<(), String> {
    for f in &ty.fields {
        match fields.get(&f.name) {
            None | Some(Value::Null) if f.optional => {}
            None | Some(Value::Null) => return Err(format!("missing required field `{}` of type {}", f.name, ty.name)),
            Some(v) => check_value(&f.name, &f.kind, v, types, depth)?,
        }
    }
    Ok(())
}

fn check_value(
    name: &str,
    kind: &FieldKind,
    v: &Value,
    types: &BTreeMap<String, RecordType>,
    depth: usize,
) -> Result<(), String> {
    let ok = match kind {
        FieldKind::String => v.is_string(),
        FieldKind::Int => v.is_i64() || v.is_u64() || v.as_str().is_some_and(|s| s.trim().parse::<i64>().is_ok()),
        FieldKind::Double => v.is_number() || v.as_str().is_some_and(|s| s.trim().parse::<f64>().is_ok()),
        FieldKind::Point => parse_point(v).is_some(),
        FieldKind::Datetime => v.as_str().is_some_and(parse_datetime),
        FieldKind::StringBag => v.as_array().is_some_and(|a| a.iter().all(Value::is_string)),
        FieldKind::Record(tname) => {
            let obj = v.as_object().ok_or_else(|| format!("field `{name}` is not a record"))?;
            if depth > 0 {
                return Ok(());
            }
            let nested = types.get(tname).ok_or_else(|| format!("unknown type `{tname}`"))?;
            return check_object(nested, obj, types, depth + 1).map_err(|e| format!("in field `{name}`: {e}"));
        }
    };
    if ok {
        Ok(())
    } else {
        Err(format!("field `{name}` is not a valid {kind}: {v}"))
    }
}

/// Accepts `[x, y]`, `{"lat":..,"long":..}` or the text `x,y` / `point("x,y")`.
pub fn parse_point(v: &Value) -> Option<(f64, f64)> {
    match v {
        Value::Array(a) if a.len() == 2 => Some((a[0].as_f64()?, a[1].as_f64()?)),
        Value::Object(m) => Some((m.get("lat")?.as_f64()?, m.get("long")?.as_f64()?)),
        Value::String(s) => {
            let s = s.trim();
            let s = s.strip_prefix("point(").and_then(|r| r.strip_suffix(')')).unwrap_or(s);
            let s = s.trim_matches('"');
            let (x, y) = s.split_once(',')?;
            Some((x.trim().parse().ok()?, y.trim().parse().ok()?))
        }
        _ => None,
    }
}

pub fn parse_datetime(s: &str) -> bool {
    let s = s.trim();
    let s = s.strip_prefix("datetime(").and_then(|r| r.strip_suffix(')')).unwrap_or(s).trim_matches('"');
    DateTime::parse_from_rfc3339(s).is_ok()
        || NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S%.f").is_ok()
        || NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S").is_ok()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetDef {
    pub name: String,
    pub record_type: String,
    pub primary_key: String,
    pub nodegroup: Vec<NodeId>,
    /// Single hash secondary index: (index name, field).
    pub secondary_index: Option<(String, String)>,
}

impl DatasetDef {
    pub fn index_field(&self) -> Option<&str> {
        self.secondary_index.as_ref().map(|(_, f)| f.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_types() -> BTreeMap<String, RecordType> {
        let user = RecordType {
            name: "TwitterUser".into(),
            open: true,
            fields: vec![
                FieldDef { name: "screen-name".into(), kind: FieldKind::String, optional: false },
                FieldDef { name: "friends_count".into(), kind: FieldKind::Int, optional: false },
            ],
        };
        let raw = RecordType {
            name: "RawTweet".into(),
            open: true,
            fields: vec![
                FieldDef { name: "tweetId".into(), kind: FieldKind::String, optional: false },
                FieldDef { name: "user".into(), kind: FieldKind::Record("TwitterUser".into()), optional: false },
                FieldDef { name: "location".into(), kind: FieldKind::Point, optional: true },
                FieldDef { name: "send-time".into(), kind: FieldKind::Datetime, optional: false },
                FieldDef { name: "topics".into(), kind: FieldKind::StringBag, optional: true },
            ],
        };
        [user, raw].into_iter().map(|t| (t.name.clone(), t)).collect()
    }

    #[test]
    fn open_type_accepts_extra_fields() {
        let types = raw_types();
        let r = Record::from_json(
            r#"{"tweetId":"1","user":{"screen-name":"a","friends_count":3,"extra":1},
                "send-time":"2014-03-01T10:00:00","topics":["x"],"unexpected":true}"#,
        )
        .unwrap();
        types["RawTweet"].check(&r, &types).unwrap();
    }

    #[test]
    fn missing_or_malformed_fields_are_rejected() {
        let types = raw_types();
        let missing = Record::from_json(r#"{"user":{"screen-name":"a","friends_count":3},"send-time":"2014-03-01T10:00:00"}"#).unwrap();
        assert!(types["RawTweet"].check(&missing, &types).unwrap_err().contains("tweetId"));
        let bad_time = Record::from_json(r#"{"tweetId":"1","user":{"screen-name":"a","friends_count":3},"send-time":"noon"}"#).unwrap();
        assert!(types["RawTweet"].check(&bad_time, &types).is_err());
        let bad_nested = Record::from_json(r#"{"tweetId":"1","user":{"screen-name":"a"},"send-time":"2014-03-01T10:00:00"}"#).unwrap();
        assert!(types["RawTweet"].check(&bad_nested, &types).unwrap_err().contains("friends_count"));
    }

    #[test]
    fn point_forms() {
        assert_eq!(parse_point(&serde_json::json!([1.0, 2.5])), Some((1.0, 2.5)));
        assert_eq!(parse_point(&serde_json::json!("point(\"3,4\")")), Some((3.0, 4.0)));
        assert_eq!(parse_point(&serde_json::json!({"lat": 1, "long": 2})), Some((1.0, 2.0)));
        assert_eq!(parse_point(&serde_json::json!("nowhere")), None);
    }
}
