//! Canonical JSON: sorted object keys, no insignificant whitespace, integers
//! printed plainly and floats with 17 significant digits.
//!
//! Values pass through `serde_json::Value`, which turns non-finite floats
//! into `null`; callers that must reject them check before encoding.

use serde::Serialize;
use serde_json::Value;
use ur2_core::numfmt::format_g17;

#[derive(Debug, thiserror::Error)]
pub enum CanonicalError {
    #[error("cannot encode value: {0}")]
    Encode(#[from] serde_json::Error),
    #[error("non-finite number")]
    NonFinite,
}

pub fn to_string<T: Serialize + ?Sized>(value: &T) -> Result<String, CanonicalError> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&v, &mut out)?;
    Ok(out)
}

pub fn value_to_string(v: &Value) -> Result<String, CanonicalError> {
    let mut out = String::new();
    write_value(v, &mut out)?;
    Ok(out)
}

fn write_value(v: &Value, out: &mut String) -> Result<(), CanonicalError> {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                let f = n.as_f64().ok_or(CanonicalError::NonFinite)?;
                out.push_str(&format_g17(f).ok_or(CanonicalError::NonFinite)?);
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s)?),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out)?;
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k)?);
                out.push(':');
                write_value(&map[k], out)?;
            }
            out.push('}');
        }
    }
    Ok(())
}
