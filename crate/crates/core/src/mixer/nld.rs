//! Caption template: one clause per event in start order, separated by single spaces.
//!
//! ```text
//! <Label>, Start at <s>s and End at <e>s, it has <P> Pitch and <E> Energy.
//! ```
//!
//! Times carry exactly one decimal and no leading zeros, so the grammar has one
//! spelling per annotation list and parsing inverts rendering in both directions.

use super::{tenths, Category, EventAnnotation, MixerError, Result};

/// Labels are non-empty, comma-free, and neither start nor end with whitespace.
pub fn check_label(label: &str) -> std::result::Result<(), String> {
    if label.is_empty() {
        return Err("empty label".into());
    }
    if label.trim() != label {
        return Err(format!("label `{label}` has surrounding whitespace"));
    }
    if let Some(c) = label.chars().find(|c| *c == ',' || c.is_control()) {
        return Err(format!("label `{label}` contains {c:?}"));
    }
    Ok(())
}

fn time(t: f64) -> String {
    // validated annotations sit on the 0.1 s grid
    let k = tenths(t).expect("validated");
    format!("{}.{}", k / 10, k % 10)
}

/// Renders annotations sorted by start time (stable for ties).
pub fn render_nld(annotations: &[EventAnnotation]) -> Result<String> {
    for a in annotations {
        a.validate()?;
    }
    let mut sorted: Vec<&EventAnnotation> = annotations.iter().collect();
    sorted.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    let clauses: Vec<String> = sorted
        .iter()
        .map(|a| {
            format!(
                "{}, Start at {}s and End at {}s, it has {} Pitch and {} Energy.",
                a.label,
                time(a.start_s),
                time(a.end_s),
                a.pitch_category,
                a.energy_category
            )
        })
        .collect();
    Ok(clauses.join(" "))
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail<T>(&self, at: usize, message: impl Into<String>) -> Result<T> {
        Err(MixerError::Caption {
            offset: at,
            message: message.into(),
        })
    }

    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn expect(&mut self, literal: &str) -> Result<()> {
        if self.rest().starts_with(literal) {
            self.pos += literal.len();
            Ok(())
        } else {
            let found: String = self.rest().chars().take(literal.chars().count()).collect();
            self.fail(self.pos, format!("expected `{literal}`, found `{found}`"))
        }
    }

    /// `0.d` or `[1-9][0-9]*.d`, returned in tenths.
    fn time(&mut self) -> Result<u32> {
        let start = self.pos;
        let bytes = self.rest().as_bytes();
        let int_len = bytes.iter().take_while(|b| b.is_ascii_digit()).count();
        if int_len == 0 {
            return self.fail(start, "expected a time");
        }
        if int_len > 1 && bytes[0] == b'0' {
            return self.fail(start, "leading zero in time");
        }
        if bytes.get(int_len) != Some(&b'.')
            || !bytes.get(int_len + 1).is_some_and(u8::is_ascii_digit)
        {
            return self.fail(start + int_len, "time needs exactly one decimal");
        }
        if bytes.get(int_len + 2).is_some_and(u8::is_ascii_digit) {
            return self.fail(start + int_len + 2, "time needs exactly one decimal");
        }
        let whole: u32 = self.rest()[..int_len]
            .parse()
            .ok()
            .filter(|w| *w < u32::MAX / 10)
            .map_or_else(|| self.fail(start, "time out of range"), Ok)?;
        let value = whole * 10 + u32::from(bytes[int_len + 1] - b'0');
        self.pos += int_len + 2;
        Ok(value)
    }

    fn category(&mut self) -> Result<Category> {
        let start = self.pos;
        let word: &str = self.rest().split(' ').next().unwrap_or("");
        match word.parse() {
            Ok(c) => {
                self.pos += word.len();
                Ok(c)
            }
            Err(_) => self.fail(
                start,
                format!("expected Low, Normal or High, found `{word}`"),
            ),
        }
    }
}

/// Parses a caption produced by [`render_nld`]; errors carry the byte offset
/// of the first violation.
pub fn parse_nld(caption: &str) -> Result<Vec<EventAnnotation>> {
    let mut cur = Cursor {
        text: caption,
        pos: 0,
    };
    let mut out: Vec<EventAnnotation> = Vec::new();
    if caption.is_empty() {
        return cur.fail(0, "empty caption");
    }
    loop {
        let clause_start = cur.pos;
        let Some(len) = cur.rest().find(", Start at ") else {
            return cur.fail(clause_start, "expected `<label>, Start at`");
        };
        let label = &cur.rest()[..len];
        if let Err(message) = check_label(label) {
            return cur.fail(clause_start, message);
        }
        cur.pos += len;
        cur.expect(", Start at ")?;
        let start_at = cur.pos;
        let start = cur.time()?;
        cur.expect("s and End at ")?;
        let end = cur.time()?;
        if start >= end {
            return cur.fail(
                start_at,
                format!(
                    "start {} is not before end {}",
                    time_str(start),
                    time_str(end)
                ),
            );
        }
        if let Some(prev) = out.last() {
            if tenths(prev.start_s).expect("parsed") > start {
                return cur.fail(clause_start, "clauses are not in start-time order");
            }
        }
        cur.expect("s, it has ")?;
        let pitch = cur.category()?;
        cur.expect(" Pitch and ")?;
        let energy = cur.category()?;
        cur.expect(" Energy.")?;
        out.push(EventAnnotation::new(label, start, end, pitch, energy));
        if cur.rest().is_empty() {
            return Ok(out);
        }
        cur.expect(" ")?;
    }
}

fn time_str(k: u32) -> String {
    format!("{}.{}", k / 10, k % 10)
}
