//! Reproducible text output: C-style `%.12g` floats, canonical JSON, hashes.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Result;

/// Formats `v` the way C's `printf("%.12g", v)` does.
pub fn fmt_g12(v: f64) -> String {
    fmt_g(v, 12)
}

/// C-style `%.{precision}g` formatting.
pub fn fmt_g(v: f64, precision: usize) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let p = precision.max(1);
    // Round to p significant digits first; the exponent of the rounded value
    // decides between fixed and scientific notation.
    let sci = format!("{:.*e}", p - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= p as i32 {
        let mantissa = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (p as i32 - 1 - exp).max(0) as usize;
        strip_zeros(&format!("{:.*}", decimals, v)).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Serialises `value` as pretty JSON with lexicographically sorted object keys.
///
/// Floats use the shortest round-trip representation so files reload to the
/// identical bit patterns.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json::Map is a BTreeMap without the `preserve_order` feature.
    let tree = serde_json::to_value(value)?;
    let mut out = serde_json::to_string_pretty(&tree)?;
    out.push('\n');
    Ok(out)
}

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
