//! KIEMB: the text interchange format for per-category embedding vectors.
//!
//! ```text
//! KIEMB 1 <scale-tag> <dim> <count>
//! <category>\t<v0> <v1> ... <v_{dim-1}>
//! ```
//!
//! Values are written with 9 significant digits in the shortest `%g` style,
//! which is enough to round-trip every `f32` exactly. Lines end with LF.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::scale::Scale;

pub const MAGIC: &str = "KIEMB";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KiembError {
    #[error("corrupt KIEMB file: {0}")]
    CorruptFile(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub scale: Scale,
    pub dim: usize,
    pub rows: Vec<(String, Vec<f32>)>,
}

impl EmbeddingFile {
    pub fn new(scale: Scale, dim: usize) -> Self {
        Self {
            scale,
            dim,
            rows: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.rows.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {VERSION} {} {} {}\n", self.scale.tag(), self.dim, self.rows.len());
        for (name, values) in &self.rows {
            out.push_str(name);
            out.push('\t');
            for (i, v) in values.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                out.push_str(&format_g9(f64::from(*v)));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, KiembError> {
        let corrupt = |m: String| KiembError::CorruptFile(m);
        let mut lines = text.split('\n');
        let header = lines.next().ok_or_else(|| corrupt("empty file".into()))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 5 || fields[0] != MAGIC {
            return Err(corrupt(format!("bad header {header:?}")));
        }
        if fields[1] != VERSION.to_string() {
            return Err(corrupt(format!("unsupported version {}", fields[1])));
        }
        let scale = match fields[2] {
            "KI-S" => Scale::Small,
            "KI-M" => Scale::Medium,
            "KI-L" => Scale::Large,
            other => return Err(corrupt(format!("unknown scale tag {other:?}"))),
        };
        let dim: usize = fields[3].parse().map_err(|_| corrupt(format!("bad dim {:?}", fields[3])))?;
        let count: usize = fields[4].parse().map_err(|_| corrupt(format!("bad count {:?}", fields[4])))?;
        let mut rows = Vec::with_capacity(count);
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let (name, values) = line
                .split_once('\t')
                .ok_or_else(|| corrupt(format!("row {}: missing tab", i + 1)))?;
            let values = values
                .split(' ')
                .map(|v| v.parse::<f32>())
                .collect::<Result<Vec<f32>, _>>()
                .map_err(|e| corrupt(format!("row {} ({name}): {e}", i + 1)))?;
            if values.len() != dim {
                return Err(corrupt(format!(
                    "row {} ({name}): {} values, header says {dim}",
                    i + 1,
                    values.len()
                )));
            }
            rows.push((name.to_string(), values));
        }
        if rows.len() != count {
            return Err(corrupt(format!("header count {count} but {} rows", rows.len())));
        }
        Ok(Self { scale, dim, rows })
    }

    /// Writes via a temporary file and rename so readers never see a partial file.
    pub fn write(&self, path: &Path) -> Result<(), KiembError> {
        let io = |e: std::io::Error| KiembError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let tmp = path.with_extension("kiemb.tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(io)?;
            f.write_all(self.to_text().as_bytes()).map_err(io)?;
            f.sync_all().map_err(io)?;
        }
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self, KiembError> {
        let text = fs::read_to_string(path).map_err(|e| KiembError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }
}

/// Formats like C's `%.9g`.
pub fn format_g9(v: f64) -> String {
    const PRECISION: i32 = 9;
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !v.is_finite() {
        return if v.is_nan() {
            "nan".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{:.*e}", (PRECISION - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..PRECISION).contains(&exp) {
        let decimals = (PRECISION - 1 - exp) as usize;
        strip_zeros(&format!("{v:.decimals$}")).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", strip_zeros(mantissa), exp.abs())
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
