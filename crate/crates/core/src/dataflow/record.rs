use std::fmt;
use std::io;

use serde_json::{Map, Value};

/// A feed record: an open key/value document.
#[derive(Clone, PartialEq)]
pub struct Record {
    fields: Map<String, Value>,
    encoded_len: usize,
}

impl Record {
    pub fn new(fields: Map<String, Value>) -> Self {
        let encoded_len = json_len(&fields);
        Record { fields, encoded_len }
    }

    /// Parses one JSON object. Anything else is an error.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let fields: Map<String, Value> = serde_json::from_str(text)?;
        Ok(Record::new(fields))
    }

    pub fn fields(&self) -> &Map<String, Value> {
        &self.fields
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.fields.get(name)
    }

    /// Looks up a dotted path such as `user.screen-name`.
    pub fn get_path(&self, path: &str) -> Option<&Value> {
        let mut parts = path.split('.');
        let mut cur = self.fields.get(parts.next()?)?;
        for p in parts {
            cur = cur.as_object()?.get(p)?;
        }
        Some(cur)
    }

    /// Applies a mutation and refreshes the cached encoded length.
    pub fn update(&mut self, f: impl FnOnce(&mut Map<String, Value>)) {
        f(&mut self.fields);
        self.encoded_len = json_len(&self.fields);
    }

    pub fn into_fields(self) -> Map<String, Value> {
        self.fields
    }

    /// Length in bytes of the compact JSON encoding.
    pub fn encoded_len(&self) -> usize {
        self.encoded_len
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.fields).expect("map serialization is infallible")
    }

    /// Canonical text for a field value used as a key: strings raw, other
    /// values as compact JSON. `None` for a missing or null field.
    pub fn key_text(&self, field: &str) -> Option<String> {
        match self.fields.get(field)? {
            Value::Null => None,
            Value::String(s) => Some(s.clone()),
            other => Some(other.to_string()),
        }
    }
}

impl fmt::Debug for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Record({})", self.to_json())
    }
}

fn json_len(fields: &Map<String, Value>) -> usize {
    struct Counter(usize);
    impl io::Write for Counter {
        fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
            self.0 += buf.len();
            Ok(buf.len())
        }
        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }
    let mut c = Counter(0);
    serde_json::to_writer(&mut c, fields).expect("map serialization is infallible");
    c.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn encoded_len_tracks_updates() {
        let mut r = Record::from_json(r#"{"a":1}"#).unwrap();
        assert_eq!(r.encoded_len(), r.to_json().len());
        r.update(|m| {
            m.insert("bb".into(), json!("xyz"));
        });
        assert_eq!(r.encoded_len(), r.to_json().len());
    }

    #[test]
    fn dotted_paths_and_key_text() {
        let r = Record::from_json(r#"{"id":7,"user":{"screen-name":"bo"},"n":null}"#).unwrap();
        assert_eq!(r.get_path("user.screen-name"), Some(&json!("bo")));
        assert_eq!(r.key_text("id").as_deref(), Some("7"));
        assert_eq!(r.key_text("n"), None);
        assert_eq!(r.key_text("missing"), None);
        assert!(Record::from_json("[1,2]").is_err());
    }
}
