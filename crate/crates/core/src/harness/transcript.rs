//! Append-only run log. Every line is `time|actor|step|detail`, rendered
//! identically for identical runs, so two transcripts can be compared byte
//! for byte and metrics can be recomputed from the text alone.

use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogLine {
    pub at_ms: u64,
    pub actor: String,
    pub step: String,
    pub detail: String,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}|{}|{}|{}",
            self.at_ms, self.actor, self.step, self.detail
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    lines: Vec<LogLine>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TranscriptError {
    #[error("line {0}: expected time|actor|step|detail")]
    Malformed(usize),
    #[error("line {0}: bad timestamp")]
    BadTime(usize),
}

impl Transcript {
    pub fn log(
        &mut self,
        at_ms: u64,
        actor: impl Into<String>,
        step: impl Into<String>,
        detail: impl Into<String>,
    ) {
        self.lines.push(LogLine {
            at_ms,
            actor: actor.into(),
            step: step.into(),
            detail: detail.into(),
        });
    }

    pub fn lines(&self) -> &[LogLine] {
        &self.lines
    }

    pub fn count(&self, step: &str) -> usize {
        self.lines.iter().filter(|l| l.step == step).count()
    }

    pub fn has(&self, actor: &str, step: &str) -> bool {
        self.lines
            .iter()
            .any(|l| l.actor == actor && l.step == step)
    }

    pub fn first(&self, step: &str) -> Option<&LogLine> {
        self.lines.iter().find(|l| l.step == step)
    }

    pub fn last(&self, step: &str) -> Option<&LogLine> {
        self.lines.iter().rev().find(|l| l.step == step)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for line in &self.lines {
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }

    /// Inverse of [`render`]. Details may contain pipes; only the first
    /// three separators split.
    pub fn parse(text: &str) -> Result<Transcript, TranscriptError> {
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.is_empty() {
                continue;
            }
            let mut parts = raw.splitn(4, '|');
            let time = parts.next().ok_or(TranscriptError::Malformed(i + 1))?;
            let actor = parts.next().ok_or(TranscriptError::Malformed(i + 1))?;
            let step = parts.next().ok_or(TranscriptError::Malformed(i + 1))?;
            let detail = parts.next().unwrap_or_default();
            lines.push(LogLine {
                at_ms: time.parse().map_err(|_| TranscriptError::BadTime(i + 1))?,
                actor: actor.to_string(),
                step: step.to_string(),
                detail: detail.to_string(),
            });
        }
        Ok(Transcript { lines })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_roundtrip_preserves_pipes_in_details() {
        let mut t = Transcript::default();
        t.log(0, "o1", "publish-capsule", "descriptor=o1-data");
        t.log(15, "dc", "cancel", "tag=cancel|c0:0");
        let text = t.render();
        let back = Transcript::parse(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.lines()[1].detail, "tag=cancel|c0:0");
    }

    #[test]
    fn counting_and_lookup_helpers() {
        let mut t = Transcript::default();
        t.log(0, "o1", "provision", "descriptor=o1-data");
        t.log(5, "o2", "provision", "descriptor=o2-data");
        t.log(9, "dc", "result-verified", "columns=3");
        assert_eq!(t.count("provision"), 2);
        assert!(t.has("dc", "result-verified"));
        assert!(!t.has("o1", "result-verified"));
        assert_eq!(t.first("provision").unwrap().actor, "o1");
        assert_eq!(t.last("provision").unwrap().actor, "o2");
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert_eq!(
            Transcript::parse("not a line"),
            Err(TranscriptError::Malformed(1))
        );
        assert_eq!(
            Transcript::parse("x|dc|step|detail"),
            Err(TranscriptError::BadTime(1))
        );
    }
}
