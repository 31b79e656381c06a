//! Small shared helpers: stable hashing, token normalization, text cleanup,
//! and a bounded ordered parallel map used by the runner.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{LazyLock, Mutex};

use regex::Regex;
use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of a UTF-8 string. Stable across platforms and runs.
pub fn sha256_hex(input: &str) -> String {
    hex::encode(Sha256::digest(input.as_bytes()))
}

/// First 12 hex chars of the SHA-256 digest; used for compact record ids.
pub fn short_hash(input: &str) -> String {
    sha256_hex(input)[..12].to_string()
}

/// Stable 64-bit value derived from a string, for deterministic scripted choices.
pub fn stable_hash_u64(input: &str) -> u64 {
    let digest = Sha256::digest(input.as_bytes());
    u64::from_be_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Canonical form for label tokens: trimmed, lowercased, spaces and hyphens
/// folded to underscores ("Situation Specific" and "human-AI" both normalize).
pub fn normalize_token(s: &str) -> String {
    s.trim()
        .to_lowercase()
        .chars()
        .map(|c| if c == ' ' || c == '-' { '_' } else { c })
        .collect()
}

/// Case-insensitive, whitespace-trimmed key for cultural-context comparisons.
pub fn context_key(s: &str) -> String {
    s.trim().to_lowercase()
}

static MULTI_SPACE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[ \t]{2,}").unwrap());
static SPACE_BEFORE_PUNCT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\s+([.,;:!?])").unwrap());

/// Collapse runs of spaces and drop stray spaces left in front of punctuation
/// after a placeholder was rendered empty.
pub fn tidy_rendered_text(s: &str) -> String {
    let collapsed = MULTI_SPACE.replace_all(s, " ");
    let fixed = SPACE_BEFORE_PUNCT.replace_all(&collapsed, "$1");
    fixed.trim().to_string()
}

/// Splits a template asset into its `version: <v>` header and body.
pub fn split_version_header(raw: &str) -> Result<(String, String), crate::error::TemplateError> {
    let mut lines = raw.lines();
    let header = lines.next().unwrap_or("");
    let version = header
        .strip_prefix("version:")
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| crate::error::TemplateError::Malformed {
            line: 1,
            message: "expected `version: <v>` header".to_string(),
        })?;
    let body = lines.collect::<Vec<_>>().join("\n");
    if body.trim().is_empty() {
        return Err(crate::error::TemplateError::Malformed {
            line: 2,
            message: "asset body is empty".to_string(),
        });
    }
    Ok((version.to_string(), body))
}

/// Defines a copyable enum with canonical lowercase snake-case string tokens,
/// parsing via [`normalize_token`], and string-based serde.
macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $token:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            /// Canonical serialized token (lowercase snake case).
            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $token),+
                }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl std::str::FromStr for $name {
            type Err = crate::taxonomy::ParseLabelError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match crate::util::normalize_token(s).as_str() {
                    $($token => Ok($name::$variant),)+
                    _ => Err(crate::taxonomy::ParseLabelError {
                        slot: stringify!($name),
                        value: s.to_string(),
                    }),
                }
            }
        }

        impl serde::Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
                ser.serialize_str(self.as_str())
            }
        }

        impl<'de> serde::Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
                let raw = String::deserialize(de)?;
                raw.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}
pub(crate) use string_enum;

static LEFTOVER_PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{([a-z][a-z0-9_]*)\}").unwrap());

/// Substitute `{name}` placeholders in a template. Errors if any placeholder
/// survives substitution, so a template/variable mismatch cannot ship a
/// half-rendered prompt.
pub fn render_template(
    template: &str,
    vars: &[(&str, &str)],
) -> Result<String, crate::error::TemplateError> {
    let mut rendered = template.to_string();
    for (name, value) in vars {
        rendered = rendered.replace(&format!("{{{name}}}"), value);
    }
    if let Some(m) = LEFTOVER_PLACEHOLDER.captures(&rendered) {
        return Err(crate::error::TemplateError::UnresolvedPlaceholder {
            name: m[1].to_string(),
        });
    }
    Ok(rendered)
}

/// Map `f` over `items` with at most `workers` threads, returning results in
/// input order. Item indices are claimed from a shared counter so the ceiling
/// bounds concurrent invocations of `f` exactly.
pub fn parallel_map_ordered<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let n = items.len();
    if n == 0 {
        return Vec::new();
    }
    let workers = workers.clamp(1, n);
    if workers == 1 {
        return items.iter().enumerate().map(|(i, it)| f(i, it)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let result = f(i, &items[i]);
                slots.lock().unwrap()[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|slot| slot.expect("every index filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_hash_is_stable() {
        assert_eq!(short_hash("abc"), sha256_hex("abc")[..12].to_string());
        assert_eq!(short_hash("abc"), short_hash("abc"));
        assert_ne!(short_hash("abc"), short_hash("abd"));
    }

    #[test]
    fn normalize_token_folds_separators() {
        assert_eq!(normalize_token("Situation Specific"), "situation_specific");
        assert_eq!(normalize_token(" Human-AI "), "human_ai");
        assert_eq!(normalize_token("prescriptive"), "prescriptive");
    }

    #[test]
    fn tidy_removes_double_spaces_and_orphan_punctuation() {
        assert_eq!(tidy_rendered_text("hello  world ."), "hello world.");
        assert_eq!(tidy_rendered_text("  a  b  ?"), "a b?");
    }

    #[test]
    fn render_substitutes_and_rejects_leftovers() {
        let out = render_template("say {a} to {b}", &[("a", "hi"), ("b", "all")]).unwrap();
        assert_eq!(out, "say hi to all");
        let err = render_template("say {a} to {b}", &[("a", "hi")]).unwrap_err();
        assert!(err.to_string().contains("`b`"));
    }

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<u64> = (0..100).collect();
        let doubled = parallel_map_ordered(&items, 7, |_, x| x * 2);
        assert_eq!(doubled, items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
