//! Shared helpers for the line-oriented text formats.

use std::io::BufRead;

use crate::error::{Error, Result};

/// 17 significant digits, enough for an exact `f64` round trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// `%.{digits}g`-style formatting.
pub fn fmt_sig(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let digits = digits.max(1);
    let exp = v.abs().log10().floor() as i32;
    // Rounding can bump the exponent (9.9999 -> 10.000), so re-derive it from
    // the scientific rendering.
    let sci = format!("{:.*e}", digits - 1, v);
    let exp = sci
        .rsplit_once('e')
        .and_then(|(_, e)| e.parse::<i32>().ok())
        .unwrap_or(exp);
    if exp < -5 || exp >= digits as i32 {
        return sci;
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Reads lines while tracking 1-based line numbers; skips blank lines and
/// `#` comments.
pub struct LineReader<R> {
    inner: R,
    line: usize,
    buf: String,
}

impl<R: BufRead> LineReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            line: 0,
            buf: String::new(),
        }
    }

    pub fn line_number(&self) -> usize {
        self.line
    }

    pub fn next_line(&mut self) -> Result<Option<(usize, String)>> {
        loop {
            self.buf.clear();
            if self.inner.read_line(&mut self.buf)? == 0 {
                return Ok(None);
            }
            self.line += 1;
            let t = self.buf.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            return Ok(Some((self.line, t.to_string())));
        }
    }
}

pub fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| Error::parse(line, format!("invalid number '{tok}'")))
}

pub fn parse_u64(tok: &str, line: usize) -> Result<u64> {
    tok.parse::<u64>()
        .map_err(|_| Error::parse(line, format!("invalid integer '{tok}'")))
}
