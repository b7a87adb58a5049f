//! Token corpus files: one sequence per line, whitespace-separated integer
//! token ids, plus an optional JSON sidecar labeling each line with the
//! ensemble member that generated it.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{TokenId, TokenSequence};
use crate::scheme::Variant;

/// Parses one corpus line into a token sequence (all generated content).
pub fn parse_line(line: &str, line_no: usize) -> Result<TokenSequence> {
    let tokens: std::result::Result<Vec<TokenId>, _> =
        line.split_whitespace().map(str::parse::<TokenId>).collect();
    match tokens {
        Ok(tokens) if !tokens.is_empty() => TokenSequence::new(tokens, 0),
        Ok(_) => Err(Error::Parse {
            line: line_no,
            message: "empty sequence".to_string(),
        }),
        Err(e) => Err(Error::Parse {
            line: line_no,
            message: e.to_string(),
        }),
    }
}

/// Reads a corpus file. Blank lines are rejected as malformed.
pub fn read_corpus(path: &Path) -> Result<Vec<TokenSequence>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        out.push(parse_line(&line?, i + 1)?);
    }
    Ok(out)
}

/// Writes the generated region of each sequence, one line per sequence.
pub fn write_corpus(path: &Path, texts: &[TokenSequence]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for text in texts {
        let line: Vec<String> = text.generated().iter().map(|t| t.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// Per-line label for experiment corpora: which ensemble member produced the
/// line and under which scheme parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub key_index: usize,
    pub scheme: Variant,
    pub gamma: f64,
    pub delta: f64,
}

pub fn write_sidecar(path: &Path, entries: &[SidecarEntry]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(entries)?)?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<Vec<SidecarEntry>> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
