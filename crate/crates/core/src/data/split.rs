//! `name[A%:B%]` percent-slice notation for dataset splits.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SplitSpec {
    pub name: String,
    pub lower: Option<u8>,
    pub upper: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitParseErrorKind {
    Empty,
    Whitespace,
    InvalidNameChar(char),
    MalformedBracket,
    MissingPercent,
    NonIntegralPercent,
    PercentOutOfRange(u64),
    EmptyOrInvertedRange { lower: u8, upper: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("split spec `{text}`: {kind} at byte {position}")]
pub struct SplitParseError {
    pub text: String,
    pub position: usize,
    pub kind: SplitParseErrorKind,
}

impl fmt::Display for SplitParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Empty => write!(f, "empty spec"),
            Self::Whitespace => write!(f, "whitespace is not allowed"),
            Self::InvalidNameChar(c) => write!(f, "invalid character {c:?} in split name"),
            Self::MalformedBracket => write!(f, "malformed bracket"),
            Self::MissingPercent => write!(f, "missing '%'"),
            Self::NonIntegralPercent => write!(f, "percent must be an integer"),
            Self::PercentOutOfRange(v) => write!(f, "percent {v} > 100"),
            Self::EmptyOrInvertedRange { lower, upper } => {
                write!(f, "empty or inverted range {lower}%:{upper}%")
            }
        }
    }
}

struct Cursor<'a> {
    text: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, position: usize, kind: SplitParseErrorKind) -> SplitParseError {
        SplitParseError {
            text: self.text.to_string(),
            position,
            kind,
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    /// Optional `digits%` bound.
    fn bound(&mut self) -> Result<Option<u8>, SplitParseError> {
        let start = self.pos;
        while matches!(self.peek(), Some(b'0'..=b'9')) {
            self.pos += 1;
        }
        if self.pos == start {
            return match self.peek() {
                Some(b'%') => Err(self.err(start, SplitParseErrorKind::MalformedBracket)),
                Some(b'.') => Err(self.err(start, SplitParseErrorKind::NonIntegralPercent)),
                _ => Ok(None),
            };
        }
        let digits = &self.text[start..self.pos];
        match self.peek() {
            Some(b'%') => self.pos += 1,
            Some(b'.') => return Err(self.err(self.pos, SplitParseErrorKind::NonIntegralPercent)),
            _ => return Err(self.err(self.pos, SplitParseErrorKind::MissingPercent)),
        }
        let value = digits.parse::<u64>().unwrap_or(u64::MAX);
        if value > 100 {
            return Err(self.err(start, SplitParseErrorKind::PercentOutOfRange(value)));
        }
        Ok(Some(value as u8))
    }
}

/// Parse `name` or `name[A%:B%]` (either bound optional, integral, 0–100).
pub fn parse_split_spec(text: &str) -> Result<SplitSpec, SplitParseError> {
    let mut cur = Cursor {
        text,
        bytes: text.as_bytes(),
        pos: 0,
    };
    if text.is_empty() {
        return Err(cur.err(0, SplitParseErrorKind::Empty));
    }
    if let Some(p) = text.find(char::is_whitespace) {
        return Err(cur.err(p, SplitParseErrorKind::Whitespace));
    }
    let name_end = text.find(['[', ']', ':', '%']).unwrap_or(text.len());
    if let Some((i, c)) = text[..name_end]
        .char_indices()
        .find(|&(_, c)| !(c.is_ascii_alphanumeric() || c == '_' || c == '-'))
    {
        return Err(cur.err(i, SplitParseErrorKind::InvalidNameChar(c)));
    }
    if name_end == 0 {
        return Err(cur.err(0, SplitParseErrorKind::Empty));
    }
    let name = text[..name_end].to_string();
    cur.pos = name_end;
    if cur.pos == text.len() {
        return Ok(SplitSpec {
            name,
            lower: None,
            upper: None,
        });
    }
    if cur.peek() != Some(b'[') {
        return Err(cur.err(cur.pos, SplitParseErrorKind::MalformedBracket));
    }
    cur.pos += 1;
    let lower_at = cur.pos;
    let lower = cur.bound()?;
    if cur.peek() != Some(b':') {
        return Err(cur.err(cur.pos, SplitParseErrorKind::MalformedBracket));
    }
    cur.pos += 1;
    let upper = cur.bound()?;
    if cur.peek() != Some(b']') || cur.pos + 1 != text.len() {
        return Err(cur.err(cur.pos, SplitParseErrorKind::MalformedBracket));
    }
    if let (Some(lo), Some(hi)) = (lower, upper) {
        if lo > hi {
            return Err(cur.err(
                lower_at,
                SplitParseErrorKind::EmptyOrInvertedRange {
                    lower: lo,
                    upper: hi,
                },
            ));
        }
    }
    Ok(SplitSpec { name, lower, upper })
}

/// Boundary index for percent `p` of `n` examples: the first index `i` with
/// `p·n ≤ 100·i`.
fn boundary(p: u8, n: usize) -> usize {
    (p as usize * n).div_ceil(100)
}

impl SplitSpec {
    pub fn whole(name: impl Into<String>) -> Self {
        SplitSpec {
            name: name.into(),
            lower: None,
            upper: None,
        }
    }

    pub fn is_sliced(&self) -> bool {
        self.lower.is_some() || self.upper.is_some()
    }

    /// Index range selected from a split of `n` examples: every `i` with
    /// `A·n ≤ 100·i < B·n` (A defaults to 0, B to 100).
    pub fn index_range(&self, n: usize) -> Range<usize> {
        let lo = boundary(self.lower.unwrap_or(0), n);
        let hi = boundary(self.upper.unwrap_or(100), n);
        lo..hi.max(lo)
    }

    /// Percent interval `[A, B)` covered by this spec.
    pub fn percent_range(&self) -> (u8, u8) {
        (self.lower.unwrap_or(0), self.upper.unwrap_or(100))
    }

    /// Whether two specs can select a common example.
    pub fn overlaps(&self, other: &SplitSpec) -> bool {
        if self.name != other.name {
            return false;
        }
        let (a0, a1) = self.percent_range();
        let (b0, b1) = other.percent_range();
        a0.max(b0) < a1.min(b1)
    }
}

impl fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name)?;
        if self.is_sliced() {
            write!(f, "[")?;
            if let Some(lo) = self.lower {
                write!(f, "{lo}%")?;
            }
            write!(f, ":")?;
            if let Some(hi) = self.upper {
                write!(f, "{hi}%")?;
            }
            write!(f, "]")?;
        }
        Ok(())
    }
}

impl FromStr for SplitSpec {
    type Err = SplitParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_split_spec(s)
    }
}

impl Serialize for SplitSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SplitSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        parse_split_spec(&text).map_err(serde::de::Error::custom)
    }
}
