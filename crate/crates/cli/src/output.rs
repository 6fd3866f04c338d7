//! CSV and JSON writers.
//!
//! CSV starts with `# key = value` comment lines that, stripped of their
//! `# ` prefix, form a TOML file accepted by `--config`. Floats use 17
//! significant digits; non-finite values are written as `inf`, `-inf`,
//! `nan` in both formats.

use std::io::{self, Write};

use serde::Serialize;
use serde_json::{Map, Value};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// `%.17g`-style formatting.
pub fn g17(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf" } else { "-inf" }.into();
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0" } else { "0" }.into();
    }
    let sci = format!("{v:.16e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if (-5..17).contains(&exp) {
        let fixed = format!("{:.*}", (16 - exp) as usize, v);
        trim_zeros(&fixed).to_string()
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// JSON number, or a string for non-finite values.
pub fn num(v: f64) -> Value {
    if v.is_finite() {
        serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number)
    } else {
        Value::String(g17(v))
    }
}

/// Header lines recording version, command and the resolved arguments.
pub fn header(command: &str, args: &impl Serialize) -> io::Result<String> {
    let mut out = format!("# version = \"{VERSION}\"\n# command = \"{command}\"\n");
    let body = toml::to_string(args).map_err(io::Error::other)?;
    for line in body.lines().filter(|l| !l.is_empty()) {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    Ok(out)
}

/// CSV writer with a header block and a fixed column list.
pub struct Csv<W: Write> {
    out: W,
}

impl<W: Write> Csv<W> {
    pub fn new(mut out: W, header: &str, columns: &[&str]) -> io::Result<Self> {
        out.write_all(header.as_bytes())?;
        writeln!(out, "{}", columns.join(","))?;
        Ok(Csv { out })
    }

    pub fn row(&mut self, cells: &[Cell]) -> io::Result<()> {
        let line: Vec<String> = cells.iter().map(Cell::render).collect();
        writeln!(self.out, "{}", line.join(","))
    }

    pub fn finish(mut self) -> io::Result<()> {
        self.out.flush()
    }
}

pub enum Cell {
    F(f64),
    I(usize),
    Empty,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::F(v) => g17(*v),
            Cell::I(v) => v.to_string(),
            Cell::Empty => String::new(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::F(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::I(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::F)
    }
}

/// Flat JSON object: version, command, every argument, then `fields`.
pub fn report(command: &str, args: &impl Serialize, fields: Vec<(&str, Value)>) -> io::Result<String> {
    let mut map = Map::new();
    map.insert("version".into(), Value::String(VERSION.into()));
    map.insert("command".into(), Value::String(command.into()));
    if let Value::Object(a) = serde_json::to_value(args).map_err(io::Error::other)? {
        for (k, v) in a {
            // unset optional arguments are left out
            if !v.is_null() {
                map.insert(k, v);
            }
        }
    }
    for (k, v) in fields {
        map.insert(k.into(), v);
    }
    serde_json::to_string_pretty(&Value::Object(map)).map_err(io::Error::other)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits() {
        assert_eq!(g17(2f64.sqrt()), "1.4142135623730951");
        assert_eq!(g17(0.0), "0");
        assert_eq!(g17(5.0), "5");
        assert_eq!(g17(0.1), "0.10000000000000001");
        assert_eq!(g17(1e-7), "9.9999999999999995e-08");
        assert_eq!(g17(1.5e20), "1.5e+20");
        assert_eq!(g17(f64::INFINITY), "inf");
        assert_eq!(g17(f64::NAN), "nan");
        for v in [std::f64::consts::PI, 1.0 / 3.0, 123456.789, 6.02e23, -2.5e-300] {
            assert_eq!(g17(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn json_numbers() {
        assert_eq!(num(1.5), serde_json::json!(1.5));
        assert_eq!(num(f64::INFINITY), serde_json::json!("inf"));
        assert_eq!(num(f64::NAN), serde_json::json!("nan"));
    }
}
