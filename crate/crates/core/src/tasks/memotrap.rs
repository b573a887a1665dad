//! Reader and writer for the released MemoTrap CSV layout:
//! `prompt,classes,answer_index`, where `classes` is a Python list literal of
//! strings such as `[' heavy', ' fonder']`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TaskError, Vocabulary};
use crate::model::START;
use crate::steering::ContrastPair;

const HEADER: [&str; 3] = ["prompt", "classes", "answer_index"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoTrapRecord {
    pub prompt: String,
    pub classes: Vec<String>,
    pub answer_index: usize,
}

impl MemoTrapRecord {
    fn validate(&self) -> Result<(), String> {
        if self.classes.len() < 2 {
            return Err(format!("{} classes, need at least 2", self.classes.len()));
        }
        if self.answer_index >= self.classes.len() {
            return Err(format!(
                "answer_index {} out of range for {} classes",
                self.answer_index,
                self.classes.len()
            ));
        }
        Ok(())
    }

    /// Contrast pair against the first non-answer class, when the prompt and both
    /// classes map onto `vocab` with each class a single word.
    pub fn to_contrast_pair(&self, vocab: &Vocabulary) -> Option<ContrastPair> {
        let single = |s: &str| {
            let ids = vocab.encode(s).ok()?;
            (ids.len() == 1).then(|| ids[0])
        };
        let target = single(&self.classes[self.answer_index])?;
        let competing = self
            .classes
            .iter()
            .enumerate()
            .find(|&(i, _)| i != self.answer_index)
            .and_then(|(_, c)| single(c))?;
        Some(ContrastPair {
            input_tokens: vocab.encode(&self.prompt).ok()?,
            decoder_prefix: vec![START],
            target,
            competing,
        })
    }
}

/// Parses a Python list of string literals.
fn parse_py_list(text: &str) -> Result<Vec<String>, String> {
    let inner = text
        .trim()
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or("classes is not a bracketed list")?;
    let mut out = Vec::new();
    let mut chars = inner.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        let Some(quote) = chars.next() else { break };
        if quote != '\'' && quote != '"' {
            return Err(format!("expected a quoted string, found {quote:?}"));
        }
        let mut item = String::new();
        loop {
            match chars.next() {
                None => return Err("unterminated string in classes".into()),
                Some('\\') => match chars.next() {
                    Some('n') => item.push('\n'),
                    Some('t') => item.push('\t'),
                    Some(c @ ('\\' | '\'' | '"')) => item.push(c),
                    other => return Err(format!("unsupported escape {other:?}")),
                },
                Some(c) if c == quote => break,
                Some(c) => item.push(c),
            }
        }
        out.push(item);
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        match chars.next() {
            None => break,
            Some(',') => continue,
            Some(c) => return Err(format!("expected ',' between classes, found {c:?}")),
        }
    }
    Ok(out)
}

/// Python `repr` of one string.
fn py_repr(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') {
        '"'
    } else {
        '\''
    };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

fn py_list(items: &[String]) -> String {
    let parts: Vec<String> = items.iter().map(|s| py_repr(s)).collect();
    format!("[{}]", parts.join(", "))
}

/// Parses MemoTrap CSV text. Errors name the 1-based line of the bad row.
pub fn parse_memotrap<R: Read>(input: R) -> Result<Vec<MemoTrapRecord>, TaskError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = reader.headers()?.clone();
    if !headers.is_empty() && headers.iter().ne(HEADER) {
        return Err(TaskError::Row {
            row: 1,
            msg: format!("expected header {}, found {:?}", HEADER.join(","), headers),
        });
    }
    let mut records = Vec::new();
    for result in reader.records() {
        let row = result.map_err(|e| TaskError::Row {
            row: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let fail = |msg: String| TaskError::Row { row: line, msg };
        if row.len() != 3 {
            return Err(fail(format!("expected 3 columns, found {}", row.len())));
        }
        let answer_index = row[2]
            .trim()
            .parse::<usize>()
            .map_err(|e| fail(format!("answer_index: {e}")))?;
        let record = MemoTrapRecord {
            prompt: row[0].to_string(),
            classes: parse_py_list(&row[1]).map_err(fail)?,
            answer_index,
        };
        record.validate().map_err(fail)?;
        records.push(record);
    }
    Ok(records)
}

pub fn load_memotrap(path: &Path) -> Result<Vec<MemoTrapRecord>, TaskError> {
    parse_memotrap(std::fs::File::open(path)?)
}

/// Writes records in the released layout with `\n` line endings and minimal quoting.
pub fn serialize_memotrap<W: Write>(records: &[MemoTrapRecord], out: W) -> Result<(), TaskError> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    writer.write_record(HEADER)?;
    for r in records {
        writer.write_record([
            r.prompt.as_str(),
            py_list(&r.classes).as_str(),
            r.answer_index.to_string().as_str(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}
