//! Plain-text parameter checkpoints.
//!
//! ```text
//! kgc-enc v1 <buckets> <dim>
//! <buckets lines: query table rows>
//! <buckets lines: candidate table rows>
//! log_inv_tau <value>
//! ```
//!
//! Values are written with the shortest representation that parses back to
//! the identical float, so save/load is lossless.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::encoder::EncoderParams;
use crate::scalar::Scalar;

const MAGIC: &str = "kgc-enc";
const VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line 1: bad checkpoint header {found:?} (expected `{MAGIC} {VERSION} <buckets> <dim>`)")]
    Header { found: String },
    #[error("line {line}: {message}")]
    Body { line: usize, message: String },
}

pub fn to_string<S: Scalar>(params: &EncoderParams<S>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {VERSION} {} {}", params.buckets, params.dim);
    for table in [&params.hr_table, &params.tail_table] {
        for row in table.chunks(params.dim) {
            let mut first = true;
            for x in row {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{x}");
            }
            out.push('\n');
        }
    }
    let _ = writeln!(out, "log_inv_tau {}", params.log_inv_temperature);
    out
}

pub fn save<S: Scalar>(params: &EncoderParams<S>, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, to_string(params))?;
    Ok(())
}

pub fn from_str<S: Scalar>(text: &str) -> Result<EncoderParams<S>, CheckpointError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (buckets, dim) = match fields.as_slice() {
        [m, v, b, d] if *m == MAGIC && *v == VERSION => {
            match (b.parse::<usize>(), d.parse::<usize>()) {
                (Ok(b), Ok(d)) if b >= 2 && d >= 1 => (b, d),
                _ => {
                    return Err(CheckpointError::Header {
                        found: header.to_owned(),
                    })
                }
            }
        }
        _ => {
            return Err(CheckpointError::Header {
                found: header.to_owned(),
            })
        }
    };
    let mut params = EncoderParams::<S>::zeros(buckets, dim);
    let mut line_no = 1;
    for table in [&mut params.hr_table, &mut params.tail_table] {
        for row in table.chunks_mut(dim) {
            line_no += 1;
            let line = lines.next().ok_or(CheckpointError::Body {
                line: line_no,
                message: "unexpected end of file".into(),
            })?;
            let mut n = 0;
            for (slot, tok) in row.iter_mut().zip(line.split_whitespace()) {
                *slot = parse_finite(tok, line_no)?;
                n += 1;
            }
            if n != dim || line.split_whitespace().count() != dim {
                return Err(CheckpointError::Body {
                    line: line_no,
                    message: format!(
                        "expected {dim} values, found {}",
                        line.split_whitespace().count()
                    ),
                });
            }
        }
    }
    line_no += 1;
    let tail = lines.next().unwrap_or("");
    match tail.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["log_inv_tau", v] => params.log_inv_temperature = parse_finite(v, line_no)?,
        _ => {
            return Err(CheckpointError::Body {
                line: line_no,
                message: format!("expected `log_inv_tau <value>`, found {tail:?}"),
            })
        }
    }
    if let Some(extra) = lines.find(|l| !l.trim().is_empty()) {
        return Err(CheckpointError::Body {
            line: line_no + 1,
            message: format!("trailing content {extra:?}"),
        });
    }
    Ok(params)
}

fn parse_finite<S: Scalar>(tok: &str, line: usize) -> Result<S, CheckpointError> {
    match tok.parse::<S>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(CheckpointError::Body {
            line,
            message: format!("invalid value {tok:?}"),
        }),
    }
}

pub fn load<S: Scalar>(path: &Path) -> Result<EncoderParams<S>, CheckpointError> {
    from_str(&fs::read_to_string(path)?)
}
