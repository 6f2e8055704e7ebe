use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::time::SimTime;

pub const ENVELOPE_VERSION: u32 = 1;

/// One message on the bus, or one observation record in the message log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub version: u32,
    pub msg_type: String,
    pub request_id: String,
    pub sender: String,
    pub recipient: String,
    pub body: Value,
    pub sent_at: SimTime,
}

impl Envelope {
    /// Byte-stable single-line rendering: keys sorted at every level.
    pub fn canonical(&self) -> String {
        let value = serde_json::to_value(self).expect("envelope is always representable as JSON");
        canonical_json(&value)
    }

    pub fn parse_line(line: &str) -> Result<Envelope, serde_json::Error> {
        serde_json::from_str(line)
    }

    pub fn body_as<T: DeserializeOwned>(&self) -> Result<T, serde_json::Error> {
        T::deserialize(&self.body)
    }

    /// `true` for `<type>.ok` replies.
    pub fn is_ok_reply(&self) -> bool {
        self.msg_type.ends_with(".ok")
    }
}

/// Renders a JSON value with object keys sorted lexicographically and numbers
/// in shortest round-trip form.
pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(key).expect("string key"));
                out.push(':');
                write_canonical(&map[key], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

/// Matches a message type against a pattern: exact, or a prefix ending in `*`.
pub fn type_matches(pattern: &str, msg_type: &str) -> bool {
    match pattern.strip_suffix('*') {
        Some(prefix) => msg_type.starts_with(prefix),
        None => pattern == msg_type,
    }
}
