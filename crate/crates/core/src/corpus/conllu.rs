//! Minimal CoNLL-U reader and writer.
//!
//! Only the columns needed for unlabeled tree work are interpreted: ID, FORM,
//! HEAD and DEPREL. Multiword-token ranges (`1-2`) and empty nodes (`1.1`) are
//! skipped. Sentences are separated by blank lines; a `# sent_id = ...`
//! comment names the sentence, otherwise its 1-based ordinal in the file is
//! used.

use std::io::{self, BufRead, Write};

use serde::Serialize;

use super::{DepSentence, TreeError};

/// A sentence that could not be turned into a [`DepSentence`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedSentence {
    pub id: String,
    /// 1-based line number of the offending line, or of the sentence's first
    /// line when the problem is tree-level.
    pub line: usize,
    pub reason: String,
    /// Set when the sentence parsed but its tree was invalid.
    #[serde(skip)]
    pub tree_error: Option<TreeError>,
}

#[derive(Debug, Clone, Default)]
pub struct ParseOutcome {
    pub sentences: Vec<DepSentence>,
    pub skipped: Vec<SkippedSentence>,
}

impl ParseOutcome {
    /// Sentences rejected for having zero or several root attachments.
    pub fn root_errors(&self) -> usize {
        self.skipped
            .iter()
            .filter(|s| matches!(s.tree_error, Some(TreeError::NoUniqueRoot(_))))
            .count()
    }
}

#[derive(Default)]
struct Pending {
    id: Option<String>,
    first_line: usize,
    tokens: Vec<String>,
    heads: Vec<usize>,
    rels: Vec<String>,
    error: Option<(usize, String)>,
    has_content: bool,
}

impl Pending {
    fn take_line(&mut self, lineno: usize, line: &str) {
        if self.error.is_some() {
            return;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            self.error = Some((lineno, format!("expected 10 columns, found {}", cols.len())));
            return;
        }
        let id = cols[0];
        if id.contains('-') || id.contains('.') {
            return;
        }
        let expected = self.tokens.len() + 1;
        match id.parse::<usize>() {
            Ok(v) if v == expected => {}
            Ok(v) => {
                self.error = Some((lineno, format!("token id {v} out of sequence, expected {expected}")));
                return;
            }
            Err(_) => {
                self.error = Some((lineno, format!("invalid token id {id:?}")));
                return;
            }
        }
        let head = match cols[6].parse::<usize>() {
            Ok(h) => h,
            Err(_) => {
                self.error = Some((lineno, format!("invalid head {:?}", cols[6])));
                return;
            }
        };
        self.tokens.push(cols[1].to_string());
        self.heads.push(head);
        self.rels.push(cols[7].to_string());
    }

    fn finish(self, ordinal: usize, out: &mut ParseOutcome) {
        let id = self.id.unwrap_or_else(|| ordinal.to_string());
        if let Some((line, reason)) = self.error {
            out.skipped.push(SkippedSentence { id, line, reason, tree_error: None });
            return;
        }
        match DepSentence::new(id.clone(), self.tokens, self.heads, self.rels) {
            Ok(s) => out.sentences.push(s),
            Err(e) => out.skipped.push(SkippedSentence {
                id,
                line: self.first_line,
                reason: e.to_string(),
                tree_error: Some(e),
            }),
        }
    }
}

/// Reads every sentence from a CoNLL-U stream. Record-level problems skip the
/// sentence and are reported in [`ParseOutcome::skipped`]; only IO failures
/// abort the read.
pub fn parse_conllu<R: BufRead>(reader: R) -> io::Result<ParseOutcome> {
    let mut out = ParseOutcome::default();
    let mut pending = Pending::default();
    let mut ordinal = 0;

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if pending.has_content {
                ordinal += 1;
                std::mem::take(&mut pending).finish(ordinal, &mut out);
            }
            continue;
        }
        if !pending.has_content {
            pending.has_content = true;
            pending.first_line = lineno;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((key, value)) = comment.split_once('=') {
                if key.trim() == "sent_id" {
                    pending.id = Some(value.trim().to_string());
                }
            }
            continue;
        }
        pending.take_line(lineno, line);
    }
    if pending.has_content {
        ordinal += 1;
        pending.finish(ordinal, &mut out);
    }
    Ok(out)
}

/// Writes sentences as CoNLL-U with `sent_id` and `text` comments; columns
/// the toolkit does not model are written as `_`.
pub fn write_conllu<W: Write>(sentences: &[DepSentence], mut w: W) -> io::Result<()> {
    for s in sentences {
        writeln!(w, "# sent_id = {}", s.id())?;
        writeln!(w, "# text = {}", s.tokens().join(" "))?;
        for i in 0..s.len() {
            writeln!(
                w,
                "{}\t{}\t_\t_\t_\t_\t{}\t{}\t_\t_",
                i + 1,
                s.tokens()[i],
                s.heads()[i],
                s.rels()[i]
            )?;
        }
        writeln!(w)?;
    }
    Ok(())
}
