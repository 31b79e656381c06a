//! Robust extraction of structure from judge model output. Judges are asked
//! for JSON but reply with anything from clean objects to chatty prose; this
//! parser tries, in order: a well-formed JSON value, fenced code block
//! contents, then a literal scan for booleans, "none of the above", and known
//! id tokens. Pure and deterministic.

use std::sync::LazyLock;

use regex::Regex;
use serde_json::Value;

use crate::error::JudgeError;

/// What shape of answer the caller expects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expected {
    /// A set of norm ids (surfacing step).
    NormList,
    /// A True/False verdict plus the ids backing it (violation step).
    BooleanPlusList,
}

/// Flag strings recorded alongside results. Kept as plain strings because
/// they travel through JSONL untouched.
pub mod flags {
    pub const UNKNOWN_IDS_DROPPED: &str = "unknown_ids_dropped";
    pub const IMPLIED_TRUE_FROM_LIST: &str = "implied_true_from_list";
    pub const FUZZY_TEXT_MATCH: &str = "fuzzy_text_match";
    pub const REASKED: &str = "reasked";
    pub const INCONSISTENT_TRUE_EMPTY: &str = "inconsistent_true_empty";
    pub const INCONSISTENT_FALSE_NONEMPTY: &str = "inconsistent_false_nonempty";
}

/// Parsed judge answer.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedJudgeOutput {
    /// Verdict, present when `Expected::BooleanPlusList`.
    pub verdict: Option<bool>,
    /// Recognized ids, input order, deduplicated, all members of `valid_ids`.
    pub ids: Vec<String>,
    /// Tokens that looked like answers but matched no valid id; callers may
    /// try fuzzy text matching on these.
    pub unmatched: Vec<String>,
    pub flags: Vec<String>,
}

/// One interpretation of the raw text, before validation against `expected`.
#[derive(Debug, Default)]
struct Interp {
    verdict: Option<bool>,
    tokens: Vec<String>,
    /// The text committed to an explicit empty answer ("None of the above",
    /// an empty JSON list), distinguishing it from uninformative text.
    explicit_empty: bool,
}

impl Interp {
    fn informative(&self) -> bool {
        self.verdict.is_some() || !self.tokens.is_empty() || self.explicit_empty
    }
}

/// First well-formed JSON object or array embedded anywhere in the text.
pub fn extract_first_json(raw: &str) -> Option<Value> {
    for (idx, ch) in raw.char_indices() {
        if ch != '{' && ch != '[' {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&raw[idx..]).into_iter::<Value>();
        if let Some(Ok(value)) = stream.next() {
            if value.is_object() || value.is_array() {
                return Some(value);
            }
        }
    }
    None
}

static FENCE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)```[a-zA-Z]*\n(.*?)```").unwrap());
static BOOL_WORD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(true|false)\b").unwrap());

fn none_marker(raw: &str) -> bool {
    let lower = raw.to_lowercase();
    lower.contains("none of the above") || lower.contains("none apply")
}

fn interpret_json(value: &Value) -> Interp {
    let mut interp = Interp::default();
    collect_json(value, &mut interp, false);
    interp
}

fn collect_json(value: &Value, interp: &mut Interp, inside_array: bool) {
    match value {
        Value::Bool(b) => {
            if interp.verdict.is_none() {
                interp.verdict = Some(*b);
            }
        }
        Value::String(s) => {
            let trimmed = s.trim();
            if trimmed.eq_ignore_ascii_case("true") || trimmed.eq_ignore_ascii_case("false") {
                if interp.verdict.is_none() {
                    interp.verdict = Some(trimmed.eq_ignore_ascii_case("true"));
                }
            } else if none_marker(trimmed) {
                interp.explicit_empty = true;
            } else if inside_array {
                interp.tokens.push(trimmed.to_string());
            }
        }
        Value::Array(items) => {
            if items.is_empty() {
                interp.explicit_empty = true;
            }
            for item in items {
                collect_json(item, interp, true);
            }
        }
        Value::Object(map) => {
            for (key, item) in map {
                // A string under an id-ish key counts even outside an array.
                if item.is_string()
                    && !inside_array
                    && (key.contains("norm") || key == "id" || key.ends_with("_id"))
                {
                    collect_json(item, interp, true);
                } else {
                    collect_json(item, interp, inside_array);
                }
            }
        }
        _ => {}
    }
}

fn interpret_literal(raw: &str, valid_ids: &[String]) -> Interp {
    let mut interp = Interp::default();
    if let Some(m) = BOOL_WORD.find(raw) {
        interp.verdict = Some(m.as_str().eq_ignore_ascii_case("true"));
    }
    if none_marker(raw) {
        interp.explicit_empty = true;
    }
    let mut found: Vec<(usize, &String)> = Vec::new();
    for id in valid_ids {
        let mut start = 0;
        while let Some(pos) = raw[start..].find(id.as_str()) {
            let abs = start + pos;
            if token_bounded(raw, abs, id.len()) {
                found.push((abs, id));
                break;
            }
            start = abs + id.len();
        }
    }
    found.sort_by_key(|(pos, _)| *pos);
    interp.tokens = found.into_iter().map(|(_, id)| id.clone()).collect();
    interp
}

fn token_bounded(raw: &str, start: usize, len: usize) -> bool {
    let is_word = |c: char| c.is_ascii_alphanumeric() || c == '_' || c == '-';
    let before_ok = raw[..start].chars().next_back().map_or(true, |c| !is_word(c));
    let after_ok = raw[start + len..].chars().next().map_or(true, |c| !is_word(c));
    before_ok && after_ok
}

/// Parse raw judge output against the expected shape, keeping only ids from
/// `valid_ids`. Unknown tokens are dropped with a flag and reported so the
/// caller can attempt fuzzy matching against norm text.
pub fn parse_judge_output(
    raw: &str,
    expected: Expected,
    valid_ids: &[String],
) -> Result<ParsedJudgeOutput, JudgeError> {
    let interp = best_interpretation(raw, valid_ids);
    let Some(interp) = interp else {
        return Err(JudgeError::Unparseable {
            raw: raw.to_string(),
        });
    };

    let mut out = ParsedJudgeOutput::default();
    let mut seen = std::collections::BTreeSet::new();
    for token in &interp.tokens {
        if !seen.insert(token.clone()) {
            continue;
        }
        if valid_ids.contains(token) {
            out.ids.push(token.clone());
        } else {
            out.unmatched.push(token.clone());
        }
    }
    if !out.unmatched.is_empty() {
        out.flags.push(flags::UNKNOWN_IDS_DROPPED.to_string());
    }

    match expected {
        Expected::NormList => {
            out.verdict = None;
        }
        Expected::BooleanPlusList => {
            out.verdict = interp.verdict;
            if out.verdict.is_none() && interp.explicit_empty {
                out.verdict = Some(false);
            }
            if out.verdict.is_none() && !out.ids.is_empty() {
                out.verdict = Some(true);
                out.flags.push(flags::IMPLIED_TRUE_FROM_LIST.to_string());
            }
            if out.verdict.is_none() {
                return Err(JudgeError::Unparseable {
                    raw: raw.to_string(),
                });
            }
        }
    }
    Ok(out)
}

fn best_interpretation(raw: &str, valid_ids: &[String]) -> Option<Interp> {
    if let Some(value) = extract_first_json(raw) {
        let interp = interpret_json(&value);
        if interp.informative() {
            return Some(interp);
        }
    }
    for fence in FENCE.captures_iter(raw) {
        let inner = &fence[1];
        if let Some(value) = extract_first_json(inner) {
            let interp = interpret_json(&value);
            if interp.informative() {
                return Some(interp);
            }
        }
        let interp = interpret_literal(inner, valid_ids);
        if interp.informative() {
            return Some(interp);
        }
    }
    let interp = interpret_literal(raw, valid_ids);
    if interp.informative() {
        Some(interp)
    } else {
        None
    }
}
