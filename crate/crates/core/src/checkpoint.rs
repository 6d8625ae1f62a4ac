//! Versioned text checkpoints.
//!
//! Layout (whitespace-separated, one record per line):
//!
//! ```text
//! corpn-checkpoint v1
//! config_hash <hex string>
//! extractor <rows> <cols>
//! <cols floats>            (one line per extractor row)
//! head <n_rpns> <feature_dim>
//! <feature_dim floats>     (one line per classifier row)
//! <n_rpns floats>          (head biases)
//! classifier <fc|cosine> <n_categories> <feature_dim> <cosine_scale>
//! <feature_dim floats>     (one line per category row)
//! <n_categories floats>    (classifier biases)
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so loading a saved
//! checkpoint reproduces every parameter bit-exactly.

use crate::corpn::CoRpnHead;
use crate::linalg::Matrix;
use crate::train::{ClassifierHead, ClassifierVariant, ModelState};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

pub const FORMAT_TAG: &str = "corpn-checkpoint v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// FNV-1a over the parameter bits; cheap identity check for freeze contracts.
pub fn params_digest(state: &ModelState) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    let mut eat = |values: &[f64]| {
        for v in values {
            for b in v.to_bits().to_le_bytes() {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        }
    };
    eat(state.extractor.data());
    eat(state.head.weights().data());
    eat(state.head.biases());
    eat(state.classifier.weights().data());
    eat(state.classifier.biases());
    hash
}

pub fn to_string(state: &ModelState, config_hash: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{FORMAT_TAG}");
    let _ = writeln!(out, "config_hash {config_hash}");
    let write_rows = |out: &mut String, m: &Matrix| {
        for r in 0..m.rows() {
            let row: Vec<String> = m.row(r).iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
    };
    let _ = writeln!(out, "extractor {} {}", state.extractor.rows(), state.extractor.cols());
    write_rows(&mut out, &state.extractor);
    let _ = writeln!(out, "head {} {}", state.head.n_rpns(), state.head.feature_dim());
    write_rows(&mut out, state.head.weights());
    let biases: Vec<String> = state.head.biases().iter().map(|v| format!("{v}")).collect();
    let _ = writeln!(out, "{}", biases.join(" "));
    let variant = match state.classifier.variant {
        ClassifierVariant::Fc => "fc",
        ClassifierVariant::Cosine => "cosine",
    };
    // Row count includes the trailing background row.
    let _ = writeln!(
        out,
        "classifier {variant} {} {} {}",
        state.classifier.weights().rows(),
        state.classifier.feature_dim(),
        state.classifier.cosine_scale()
    );
    write_rows(&mut out, state.classifier.weights());
    let biases: Vec<String> = state.classifier.biases().iter().map(|v| format!("{v}")).collect();
    let _ = writeln!(out, "{}", biases.join(" "));
    out
}

pub fn save(state: &ModelState, config_hash: &str, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, to_string(state, config_hash))?;
    Ok(())
}

struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<(usize, &'a str), CheckpointError> {
        self.iter
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| CheckpointError::Parse { line: 0, message: "unexpected end of file".into() })
    }
}

fn parse_floats(line: &str, lineno: usize, expected: usize) -> Result<Vec<f64>, CheckpointError> {
    let values: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
    let values = values.map_err(|e| CheckpointError::Parse {
        line: lineno,
        message: format!("bad float: {e}"),
    })?;
    if values.len() != expected {
        return Err(CheckpointError::Parse {
            line: lineno,
            message: format!("expected {expected} values, got {}", values.len()),
        });
    }
    Ok(values)
}

fn parse_matrix(lines: &mut Lines, rows: usize, cols: usize) -> Result<Matrix, CheckpointError> {
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let (no, line) = lines.next()?;
        let values = parse_floats(line, no, cols)?;
        m.row_mut(r).copy_from_slice(&values);
    }
    Ok(m)
}

fn expect_header<'a>(
    lines: &mut Lines<'a>,
    keyword: &str,
) -> Result<(usize, Vec<&'a str>), CheckpointError> {
    let (no, line) = lines.next()?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some(keyword) {
        return Err(CheckpointError::Parse {
            line: no,
            message: format!("expected `{keyword}` section, got {line:?}"),
        });
    }
    Ok((no, parts.collect()))
}

fn parse_dim(field: Option<&&str>, no: usize, what: &str) -> Result<usize, CheckpointError> {
    field
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CheckpointError::Parse { line: no, message: format!("bad {what}") })
}

pub fn from_str(text: &str) -> Result<(ModelState, String), CheckpointError> {
    let mut lines = Lines { iter: text.lines().enumerate() };

    let (no, tag) = lines.next()?;
    if tag.trim() != FORMAT_TAG {
        return Err(CheckpointError::Parse {
            line: no,
            message: format!("unknown format tag {tag:?}"),
        });
    }
    let (no, header) = expect_header(&mut lines, "config_hash")?;
    let config_hash = header
        .first()
        .ok_or_else(|| CheckpointError::Parse { line: no, message: "missing hash".into() })?
        .to_string();

    let (no, dims) = expect_header(&mut lines, "extractor")?;
    let rows = parse_dim(dims.first(), no, "extractor rows")?;
    let cols = parse_dim(dims.get(1), no, "extractor cols")?;
    let extractor = parse_matrix(&mut lines, rows, cols)?;

    let (no, dims) = expect_header(&mut lines, "head")?;
    let n = parse_dim(dims.first(), no, "head rows")?;
    let d = parse_dim(dims.get(1), no, "head feature dim")?;
    let weights = parse_matrix(&mut lines, n, d)?;
    let (no, line) = lines.next()?;
    let biases = parse_floats(line, no, n)?;
    let head = CoRpnHead::new(weights, biases);

    let (no, fields) = expect_header(&mut lines, "classifier")?;
    let variant = match fields.first().copied() {
        Some("fc") => ClassifierVariant::Fc,
        Some("cosine") => ClassifierVariant::Cosine,
        other => {
            return Err(CheckpointError::Parse {
                line: no,
                message: format!("unknown classifier variant {other:?}"),
            })
        }
    };
    let categories = parse_dim(fields.get(1), no, "classifier categories")?;
    let dim = parse_dim(fields.get(2), no, "classifier dim")?;
    let scale: f64 = fields
        .get(3)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CheckpointError::Parse { line: no, message: "bad cosine scale".into() })?;
    let weights = parse_matrix(&mut lines, categories, dim)?;
    let (no, line) = lines.next()?;
    let biases = parse_floats(line, no, categories)?;
    let classifier = ClassifierHead::from_parts(variant, weights, biases, scale);

    Ok((ModelState { extractor, head, classifier }, config_hash))
}

pub fn load(path: &Path) -> Result<(ModelState, String), CheckpointError> {
    from_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::{World, WorldConfig};
    use crate::train::{ModelState, TrainConfig};

    fn some_state() -> ModelState {
        let world = World::generate(5, WorldConfig { n_base: 3, n_novel: 2, ..WorldConfig::default() });
        ModelState::init(&world, &TrainConfig { n_rpns: 4, seed: 5, ..TrainConfig::default() })
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let state = some_state();
        let text = to_string(&state, "deadbeef");
        let (loaded, hash) = from_str(&text).unwrap();
        assert_eq!(hash, "deadbeef");
        assert_eq!(loaded, state);
        assert_eq!(params_digest(&loaded), params_digest(&state));
    }

    #[test]
    fn digest_is_sensitive_to_any_parameter() {
        let state = some_state();
        let before = params_digest(&state);
        let mut tweaked = state.clone();
        let v = tweaked.extractor.at(0, 0);
        tweaked.extractor.set(0, 0, f64::from_bits(v.to_bits() ^ 1));
        assert_ne!(before, params_digest(&tweaked));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let state = some_state();
        let mut text = to_string(&state, "x");
        text = text.replacen("extractor", "extruder", 1);
        match from_str(&text) {
            Err(CheckpointError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_files_fail_cleanly() {
        let state = some_state();
        let text = to_string(&state, "x");
        let cut: String = text.lines().take(5).collect::<Vec<_>>().join("\n");
        assert!(from_str(&cut).is_err());
    }
}
