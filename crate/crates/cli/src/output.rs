//! Report serialization. Every float leaving the CLI is rounded to 12
//! significant digits so tables, CSV and JSON agree and goldens stay stable.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

pub const SIG_DIGITS: usize = 12;

pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.*e}", SIG_DIGITS - 1, x).parse().unwrap_or(x)
}

/// Shortest decimal text of the rounded value.
pub fn num(x: f64) -> String {
    let r = round_sig(x);
    if r.is_nan() {
        "nan".into()
    } else if r.is_infinite() {
        if r > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{r}")
    }
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().and_then(|f| serde_json::Number::from_f64(round_sig(f))) {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_value),
        Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

pub fn json_report<T: Serialize>(report: &T) -> Result<String> {
    let mut v = serde_json::to_value(report)?;
    round_value(&mut v);
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

pub fn csv_report(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Writes to `path`, or stdout when absent.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding() {
        assert_eq!(round_sig(1.0 / 3.0), 0.333333333333);
        assert_eq!(round_sig(123456789.1234567), 123456789.123);
        assert_eq!(round_sig(-2.5e-20 / 3.0), -8.33333333333e-21);
        assert_eq!(num(0.5), "0.5");
        assert_eq!(num(f64::INFINITY), "inf");
    }

    #[test]
    fn json_rounds_floats_only() {
        let s = json_report(&serde_json::json!({"a": [1.0 / 3.0, 7], "b": {"c": 2.0f64.sqrt()}})).unwrap();
        let v: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["a"][0], 0.333333333333);
        assert_eq!(v["a"][1], 7);
        assert_eq!(v["b"]["c"].to_string(), "1.41421356237");
    }

    #[test]
    fn csv_quotes_labels() {
        let s = csv_report(&["label", "x"], &[vec!["f({\"a\":1,\"b\":2})".into(), "1".into()]]).unwrap();
        assert_eq!(s, "label,x\n\"f({\"\"a\"\":1,\"\"b\"\":2})\",1\n");
    }
}
