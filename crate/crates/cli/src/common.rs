//! Helpers shared by the subcommands.

use std::path::{Path, PathBuf};

use serde::Serialize;

use atnf_core::checkpoint::Checkpoint;
use atnf_core::controller::Session;
use atnf_core::image_io::write_atomic;
use atnf_core::text::{TokenSequence, Vocabulary};
use atnf_core::Error;

use crate::error::{usage, CliResult};

pub const DEFAULT_CHECKPOINT: &str = "checkpoints/reference.atnf";

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

pub fn read_session(path: &Path) -> CliResult<Session> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: not a session file: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    ensure_parent(path)?;
    Ok(write_atomic(path, &bytes)?)
}

pub fn ensure_parent(path: &Path) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn ensure_dir(dir: &Path) -> CliResult<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.to_path_buf())
}

/// Session checkpoint must match the loaded one, or edits replay a
/// different source image.
pub fn check_session(session: &Session, ck: &Checkpoint, ck_path: &Path) -> CliResult {
    let fp = ck.fingerprint();
    if session.checkpoint != fp {
        return Err(usage(format!(
            "session was generated with checkpoint {}, but {} is {fp}",
            session.checkpoint,
            ck_path.display()
        )));
    }
    Ok(())
}

/// `"3"` or a word of the prompt (first occurrence).
pub fn resolve_token(vocab: &Vocabulary, tokens: &TokenSequence, reference: &str) -> CliResult<usize> {
    let words = vocab.token_words(tokens);
    let listing = || {
        words
            .iter()
            .enumerate()
            .map(|(i, w)| format!("{i}:{w}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    if let Ok(i) = reference.parse::<usize>() {
        if i < words.len() {
            return Ok(i);
        }
        return Err(usage(format!("token index {i} is beyond the prompt ({})", listing())));
    }
    words
        .iter()
        .position(|w| w == reference)
        .ok_or_else(|| usage(format!("word {reference:?} is not in the prompt ({})", listing())))
}

/// Splits `KEY=VALUE` with a float value.
pub fn parse_assignment(text: &str) -> CliResult<(String, f64)> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| usage(format!("expected WORD=VALUE, got {text:?}")))?;
    let v: f64 = v
        .trim()
        .parse()
        .map_err(|_| usage(format!("{text:?}: {v:?} is not a number")))?;
    Ok((k.trim().to_string(), v))
}

pub fn parse_list(text: &str) -> CliResult<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| usage(format!("{s:?} is not a number")))
        })
        .collect()
}

/// Prints one JSON document on stdout.
pub fn emit<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("serializable"));
}
