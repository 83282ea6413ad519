//! CSV emission with a fixed numeric format: nine significant digits,
//! comma separator, single `\n` line endings, no locale dependence.

use std::fmt::Write as _;

/// Nine-significant-digit rendering; infinities render as `inf` so flagged
/// ratios survive the round trip.
pub fn fmt_sig9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    format!("{x:.8e}")
}

/// Quantize through the CSV format: derived columns are computed from
/// quantized inputs, so re-parsing a file and re-deriving reproduces the
/// emitted bytes exactly.
pub fn q9(x: f64) -> f64 {
    fmt_sig9(x).parse().expect("sig9 output always parses")
}

/// A cell value: already-formatted text or a number to format.
pub enum Cell {
    Text(String),
    Num(f64),
    Int(i64),
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}
impl From<i64> for Cell {
    fn from(x: i64) -> Self {
        Cell::Int(x)
    }
}
impl From<u32> for Cell {
    fn from(x: u32) -> Self {
        Cell::Int(x as i64)
    }
}
impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.into())
    }
}
impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}
impl From<bool> for Cell {
    fn from(b: bool) -> Self {
        Cell::Text(if b { "true" } else { "false" }.into())
    }
}

/// Header plus rows; `render` produces the final byte-deterministic text.
pub struct CsvDoc {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl CsvDoc {
    pub fn new(header: Vec<&'static str>) -> Self {
        Self { header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.header.join(","));
        out.push('\n');
        for row in &self.rows {
            let mut first = true;
            for cell in row {
                if !first {
                    out.push(',');
                }
                first = false;
                match cell {
                    Cell::Text(s) => out.push_str(s),
                    Cell::Num(x) => {
                        let _ = write!(out, "{}", fmt_sig9(*x));
                    }
                    Cell::Int(i) => {
                        let _ = write!(out, "{i}");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_sig9(0.5488116360940264), "5.48811636e-1");
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(f64::INFINITY), "inf");
        assert_eq!(fmt_sig9(-1.0), "-1.00000000e0");
    }

    #[test]
    fn quantization_is_idempotent() {
        for &x in &[0.123456789123, 1.0 / 3.0, 2.718281828459045, 83.33333333333333, 1e-9] {
            let once = q9(x);
            assert_eq!(once, q9(once));
            assert_eq!(fmt_sig9(once), fmt_sig9(q9(once)));
        }
    }

    #[test]
    fn header_only_for_empty_rows() {
        let doc = CsvDoc::new(vec!["a", "b"]);
        assert_eq!(doc.render(), "a,b\n");
    }

    #[test]
    fn rows_render_with_lf_only() {
        let mut doc = CsvDoc::new(vec!["x", "label"]);
        doc.push(vec![Cell::Num(1.5), Cell::Text("ok".into())]);
        assert_eq!(doc.render(), "x,label\n1.50000000e0,ok\n");
    }
}
