//! Canonical JSON: object keys sorted, floats in shortest round-trip form.

use serde::Serialize;

/// Serializes through `serde_json::Value`, whose maps are ordered by key.
pub fn to_string<T: Serialize + ?Sized>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("in-memory JSON serialization");
    serde_json::to_string(&v).expect("in-memory JSON serialization")
}

pub fn to_vec<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    to_string(value).into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Unordered {
        zeta: f64,
        alpha: u8,
    }

    #[test]
    fn keys_are_sorted_and_floats_roundtrip() {
        let s = to_string(&Unordered { zeta: 0.1 + 0.2, alpha: 1 });
        assert_eq!(s, r#"{"alpha":1,"zeta":0.30000000000000004}"#);
    }
}
