//! Bit-stable text output: every float is written with 17 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;


use crate::error::Result;
use crate::nonlinear::SolutionRecord;

pub const BRANCH_HEADER: &str = "lambda,energy,sup_norm,mu1,residual,iterations,kind";

/// `{:.16e}`; non-finite values as `NaN` / `inf` / `-inf`.
pub fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// JSON number, or `null` when non-finite.
pub fn json_num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        "null".into()
    }
}

pub fn json_array<'a>(xs: impl IntoIterator<Item = &'a f64>) -> String {
    let parts: Vec<String> = xs.into_iter().map(|x| json_num(*x)).collect();
    format!("[{}]", parts.join(","))
}

pub fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

pub fn branch_row(r: &SolutionRecord) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        num(r.lambda),
        num(r.energy),
        num(r.sup_norm),
        num(r.mu1),
        num(r.residual),
        r.iterations,
        r.kind
    )
}

pub fn branch_csv<'a>(records: impl IntoIterator<Item = &'a SolutionRecord>) -> String {
    let mut out = String::from(BRANCH_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&branch_row(r));
        out.push('\n');
    }
    out
}

/// One JSON line holding a solution and its node coordinates.
pub fn snapshot_line(r: &SolutionRecord, nodes: &[Vec<f64>], seed: u64, extra: &[(&str, String)]) -> String {
    let mut line = String::new();
    write!(
        line,
        "{{\"lambda\":{},\"kind\":{},\"seed\":{},\"energy\":{},\"sup_norm\":{},\"mu1\":{},\"residual\":{},\"iterations\":{}",
        json_num(r.lambda),
        json_str(&r.kind.to_string()),
        seed,
        json_num(r.energy),
        json_num(r.sup_norm),
        json_num(r.mu1),
        json_num(r.residual),
        r.iterations
    )
    .unwrap();
    for (k, v) in extra {
        write!(line, ",{}:{}", json_str(k), v).unwrap();
    }
    let pts: Vec<String> = nodes.iter().map(|p| json_array(p)).collect();
    write!(line, ",\"nodes\":[{}],\"field\":{}}}", pts.join(","), json_array(r.field.iter())).unwrap();
    line
}


/// Write `contents` to `dir/name`, creating `dir`.
pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nonlinear::SolutionKind;
    use nalgebra::DVector;

    #[test]
    fn seventeen_significant_digits() {
        assert_eq!(num(0.1), "1.0000000000000001e-1");
        assert_eq!(num(-2.0), "-2.0000000000000000e0");
        assert_eq!(num(f64::NAN), "NaN");
        let back: f64 = num(std::f64::consts::PI).parse().unwrap();
        assert_eq!(back, std::f64::consts::PI);
    }

    #[test]
    fn snapshot_is_valid_json() {
        let r = SolutionRecord {
            lambda: 0.5,
            field: DVector::from_vec(vec![0.25, 0.5]),
            residual: 1e-12,
            energy: -0.1,
            sup_norm: 0.5,
            mu1: f64::NAN,
            kind: SolutionKind::Minimal,
            iterations: 7,
            floor_hit: false,
        };
        let line = snapshot_line(&r, &[vec![0.25], vec![0.75]], 9, &[("note", json_str("a\"b"))]);
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["field"][1].as_f64(), Some(0.5));
        assert!(v["mu1"].is_null());
        assert_eq!(v["note"], "a\"b");
        assert_eq!(branch_csv([&r]).lines().next(), Some(BRANCH_HEADER));
    }
}
