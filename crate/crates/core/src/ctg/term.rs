use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Maximum characters in a canonical term.
pub const MAX_TERM_LEN: usize = 40;

/// Separator between terms in the canonical serialization of a sequence.
pub const TERM_SEPARATOR: &str = ", ";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("response has no line in the term-list format")]
    NoSchemaLine,
    #[error("empty term at position {0}")]
    EmptyToken(usize),
    #[error("term {0:?} is longer than {MAX_TERM_LEN} characters")]
    TooLong(String),
    #[error("expected {expected} unique terms, got {got}")]
    WrongCount { expected: usize, got: usize },
    #[error("invalid term {0:?}")]
    InvalidTerm(String),
}

/// A normalized keyword: hyphen-joined capitalized ASCII segments.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Term(String);

impl Term {
    /// Normalizes arbitrary text into canonical form. Whitespace and
    /// underscores become hyphens, characters outside `[A-Za-z0-9-]` are
    /// dropped, and each hyphen segment is capitalized.
    pub fn normalize(raw: &str) -> Result<Term, ParseError> {
        let mut segments: Vec<String> = Vec::new();
        let mut current = String::new();
        for ch in raw.chars() {
            if ch == '-' || ch == '_' || ch.is_whitespace() {
                if !current.is_empty() {
                    segments.push(std::mem::take(&mut current));
                }
            } else if ch.is_ascii_alphanumeric() {
                current.push(ch);
            }
        }
        if !current.is_empty() {
            segments.push(current);
        }
        if segments.is_empty() {
            return Err(ParseError::InvalidTerm(raw.to_owned()));
        }
        let text = segments
            .iter()
            .map(|s| {
                let mut chars = s.chars();
                let first = chars.next().unwrap().to_ascii_uppercase();
                std::iter::once(first)
                    .chain(chars.map(|c| c.to_ascii_lowercase()))
                    .collect::<String>()
            })
            .collect::<Vec<_>>()
            .join("-");
        if text.len() > MAX_TERM_LEN {
            return Err(ParseError::TooLong(text));
        }
        Ok(Term(text))
    }

    /// Accepts `text` only if it is already canonical.
    pub fn from_canonical(text: &str) -> Result<Term, ParseError> {
        match Term::normalize(text) {
            Ok(t) if t.0 == text => Ok(t),
            _ => Err(ParseError::InvalidTerm(text.to_owned())),
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Serialize for Term {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for Term {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Term::from_canonical(&s).map_err(serde::de::Error::custom)
    }
}

/// An ordered list of distinct terms identifying one item.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TermIdSequence(Vec<Term>);

impl TermIdSequence {
    /// Builds a sequence, rejecting duplicates.
    pub fn new(terms: Vec<Term>) -> Result<Self, ParseError> {
        for (idx, t) in terms.iter().enumerate() {
            if terms[..idx].contains(t) {
                return Err(ParseError::WrongCount {
                    expected: terms.len(),
                    got: idx,
                });
            }
        }
        if terms.is_empty() {
            return Err(ParseError::WrongCount {
                expected: 1,
                got: 0,
            });
        }
        Ok(Self(terms))
    }

    pub fn terms(&self) -> &[Term] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Terms joined by `", "`; the key of the direct-mapping index.
    pub fn canonical(&self) -> String {
        self.0
            .iter()
            .map(Term::as_str)
            .collect::<Vec<_>>()
            .join(TERM_SEPARATOR)
    }

    /// Parses a canonical string produced by [`TermIdSequence::canonical`].
    pub fn from_canonical(s: &str) -> Result<Self, ParseError> {
        let terms = s
            .split(TERM_SEPARATOR)
            .map(Term::from_canonical)
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(terms)
    }
}

impl fmt::Display for TermIdSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

impl Serialize for TermIdSequence {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for TermIdSequence {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let terms = Vec::<Term>::deserialize(d)?;
        TermIdSequence::new(terms).map_err(serde::de::Error::custom)
    }
}

/// Strips decoration around a candidate line: list bullets, markdown
/// emphasis, a short `Label:` prefix and enclosing brackets or quotes.
fn strip_decoration(line: &str) -> &str {
    let mut s = line.trim();
    s = s.trim_start_matches(['-', '*', '•', '>', ' ']);
    s = s.trim_matches(|c| c == '`' || c == '*' || c == ' ');
    if let Some(colon) = s.find(':') {
        let label = &s[..colon];
        if !label.contains(',')
            && label.chars().count() <= 24
            && label.chars().all(|c| c.is_ascii_alphabetic() || c == ' ')
        {
            s = s[colon + 1..].trim();
        }
    }
    s.trim_matches(|c: char| {
        matches!(c, '[' | ']' | '"' | '\'' | '(' | ')' | '.' | '`' | '*' | ' ')
    })
}

/// The last line that looks like a comma-separated term list.
fn schema_line(raw: &str, expected: usize) -> Option<&str> {
    raw.lines().rev().map(strip_decoration).find(|l| {
        l.chars().any(|c| c.is_ascii_alphanumeric()) && (expected <= 1 || l.contains(','))
    })
}

fn split_terms(line: &str) -> Vec<Result<Term, ParseError>> {
    line.split(',')
        .enumerate()
        .map(|(idx, tok)| {
            if tok.trim().is_empty() {
                Err(ParseError::EmptyToken(idx))
            } else {
                Term::normalize(tok)
            }
        })
        .collect()
}

fn dedup(terms: Vec<Term>) -> Vec<Term> {
    let mut out: Vec<Term> = Vec::with_capacity(terms.len());
    for t in terms {
        if !out.contains(&t) {
            out.push(t);
        }
    }
    out
}

/// Strict parse of a term-generation response: exactly `expected` distinct
/// valid terms on the last term-list line.
pub fn parse_tid_response(raw: &str, expected: usize) -> Result<TermIdSequence, ParseError> {
    let line = schema_line(raw, expected).ok_or(ParseError::NoSchemaLine)?;
    let terms = split_terms(line).into_iter().collect::<Result<Vec<_>, _>>()?;
    let terms = dedup(terms);
    if terms.len() != expected {
        return Err(ParseError::WrongCount {
            expected,
            got: terms.len(),
        });
    }
    TermIdSequence::new(terms)
}

/// Lenient parse used for decoded candidates: empty or invalid tokens are
/// skipped and between 1 and `max_len` distinct terms are accepted.
pub fn parse_lenient(raw: &str, max_len: usize) -> Result<TermIdSequence, ParseError> {
    let line = schema_line(raw, 1).ok_or(ParseError::NoSchemaLine)?;
    let terms = dedup(split_terms(line).into_iter().filter_map(Result::ok).collect());
    if terms.is_empty() || terms.len() > max_len {
        return Err(ParseError::WrongCount {
            expected: max_len,
            got: terms.len(),
        });
    }
    TermIdSequence::new(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strs(seq: &TermIdSequence) -> Vec<&str> {
        seq.terms().iter().map(Term::as_str).collect()
    }

    #[test]
    fn normalizes_example_response() {
        let seq = parse_tid_response("cell phone, android, budget, 6-inch, dual sim", 5).unwrap();
        assert_eq!(
            strs(&seq),
            ["Cell-Phone", "Android", "Budget", "6-Inch", "Dual-Sim"]
        );
    }

    #[test]
    fn wrong_count_fails() {
        assert_eq!(
            parse_tid_response("a, b, c, d", 5),
            Err(ParseError::WrongCount {
                expected: 5,
                got: 4
            })
        );
    }

    #[test]
    fn duplicates_after_normalization_fail() {
        assert_eq!(
            parse_tid_response("Phone, phone, Case, Red, Slim", 5),
            Err(ParseError::WrongCount {
                expected: 5,
                got: 4
            })
        );
    }

    #[test]
    fn empty_token_fails() {
        assert_eq!(
            parse_tid_response("a, , b, c, d, e", 5),
            Err(ParseError::EmptyToken(1))
        );
    }

    #[test]
    fn takes_last_schema_line() {
        let raw = "Sure! Here are the terms.\n\nTerms: **lip balm, spf 15, moisturizing, beeswax, travel size**\n";
        let seq = parse_tid_response(raw, 5).unwrap();
        assert_eq!(strs(&seq)[0], "Lip-Balm");
        assert_eq!(strs(&seq)[4], "Travel-Size");
        assert_eq!(parse_tid_response("   \n", 5), Err(ParseError::NoSchemaLine));
    }

    #[test]
    fn punctuation_and_length() {
        assert_eq!(Term::normalize("  USB-C (fast!) ").unwrap().as_str(), "Usb-C-Fast");
        assert!(Term::normalize("!!!").is_err());
        assert!(matches!(
            Term::normalize(&"x".repeat(41)),
            Err(ParseError::TooLong(_))
        ));
        assert!(Term::from_canonical("cell phone").is_err());
        assert!(Term::from_canonical("Cell-Phone").is_ok());
    }

    #[test]
    fn lenient_accepts_short() {
        let seq = parse_lenient("Cell-Phone, , Android", 5).unwrap();
        assert_eq!(strs(&seq), ["Cell-Phone", "Android"]);
        assert!(parse_lenient("a, b, c, d, e, f", 5).is_err());
        assert!(parse_lenient("??", 5).is_err());
    }

    #[test]
    fn canonical_round_trip() {
        let seq = parse_tid_response("a b, c, d", 3).unwrap();
        assert_eq!(seq.canonical(), "A-B, C, D");
        assert_eq!(TermIdSequence::from_canonical(&seq.canonical()).unwrap(), seq);
        let json = serde_json::to_string(&seq).unwrap();
        assert_eq!(json, r#"["A-B","C","D"]"#);
        assert_eq!(serde_json::from_str::<TermIdSequence>(&json).unwrap(), seq);
        assert!(serde_json::from_str::<TermIdSequence>(r#"["A","A"]"#).is_err());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(raw in "\\PC{0,60}") {
            if let Ok(t) = Term::normalize(&raw) {
                let again = Term::normalize(t.as_str()).unwrap();
                prop_assert_eq!(&again, &t);
                let s = t.as_str();
                prop_assert!(!s.is_empty() && s.len() <= MAX_TERM_LEN);
                prop_assert!(s.chars().all(|c| c.is_ascii_alphanumeric() || c == '-'));
                prop_assert!(!s.starts_with('-') && !s.ends_with('-') && !s.contains("--"));
            }
        }
    }
}
