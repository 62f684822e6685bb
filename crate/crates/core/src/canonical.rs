//! Canonical JSON and content digests.

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Serializes a value as compact JSON with lexicographically sorted object keys.
pub fn canonical_json<S: Serialize>(value: &S) -> String {
    let v: Value = serde_json::to_value(value).expect("serializable");
    // serde_json's default map is ordered by key.
    serde_json::to_string(&v).expect("json")
}

/// Pretty-printed variant for files meant to be read by people.
pub fn canonical_json_pretty<S: Serialize>(value: &S) -> String {
    let v: Value = serde_json::to_value(value).expect("serializable");
    let mut s = serde_json::to_string_pretty(&v).expect("json");
    s.push('\n');
    s
}

/// Lowercase hex SHA-256 of the canonical JSON form.
pub fn digest<S: Serialize>(value: &S) -> String {
    Sha256::digest(canonical_json(value).as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_are_sorted() {
        assert_eq!(canonical_json(&json!({"b": 1, "a": [2, {"d": 0, "c": 1}]})), r#"{"a":[2,{"c":1,"d":0}],"b":1}"#);
        assert_eq!(digest(&json!({"x": 1})), digest(&json!({"x": 1})));
        assert_eq!(digest(&json!(null)).len(), 64);
    }
}
