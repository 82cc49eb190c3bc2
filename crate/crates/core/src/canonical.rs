//! Canonical JSON text: object keys sorted, no insignificant whitespace,
//! floats limited to 9 significant digits.

use serde::Serialize;
use serde_json::Value;

use crate::error::Result;

/// Rounds to 9 significant digits; the shortest round-trip form of the
/// result never prints more.
pub fn round9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

/// Widens an `f32` without inventing digits (`0.1f32` stays `0.1`).
pub fn f32_value(x: f32) -> f64 {
    format!("{x}").parse().unwrap_or(x as f64)
}

fn normalize(v: Value) -> Value {
    match v {
        Value::Number(n) if !(n.is_i64() || n.is_u64()) => {
            let x = round9(n.as_f64().unwrap_or(0.0));
            serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(normalize).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, normalize(v))).collect()),
        other => other,
    }
}

fn write(v: &Value, out: &mut String) {
    match v {
        Value::Object(o) => {
            let mut keys: Vec<&String> = o.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write(&o[k], out);
            }
            out.push('}');
        }
        Value::Array(a) => {
            out.push('[');
            for (i, x) in a.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write(x, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

pub fn to_value<S: Serialize>(s: &S) -> Result<Value> {
    Ok(normalize(serde_json::to_value(s)?))
}

pub fn to_string<S: Serialize>(s: &S) -> Result<String> {
    let mut out = String::new();
    write(&to_value(s)?, &mut out);
    Ok(out)
}
