//! Canonical serialization helpers: escaping, hashing, token counting.
//!
//! Every digest in the crate is a SHA-256 over a canonical byte form, so
//! byte-exact replay and prefix checks have a single source of truth.

use sha2::{Digest, Sha256};

/// Escape content for one-line canonical forms. Backslash first, then
/// newlines, so the mapping is injective.
pub fn escape(content: &str) -> String {
    content
        .replace('\\', "\\\\")
        .replace('\n', "\\n")
        .replace('\r', "\\r")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    let mut hex = String::with_capacity(out.len() * 2);
    for b in out {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

/// Digest seed for an empty context chain.
pub fn empty_digest() -> String {
    sha256_hex(b"")
}

/// Extend a rolling digest with one canonical line. The chain makes every
/// later digest a commitment to the full entry history, which is what lets
/// replay verify logs without reconstructing the initial context.
pub fn roll_digest(prev_hex: &str, line: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(prev_hex.as_bytes());
    hasher.update(line.as_bytes());
    hasher.update(b"\n");
    let out = hasher.finalize();
    let mut hex = String::with_capacity(out.len() * 2);
    for b in out {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

/// Whitespace-delimited token count, the fallback when a backbone does not
/// report usage. Keeps totals comparable across backbones.
pub fn count_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Lowercased alphanumeric tokens of a text, used for retrieval key terms
/// and query terms.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                current.push(lc);
            }
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// True iff `pattern` occurs in `text` delimited by non-alphanumeric
/// characters (or string edges) on both sides.
pub fn token_boundary_contains(text: &str, pattern: &str) -> bool {
    if pattern.is_empty() {
        return false;
    }
    let mut search_from = 0;
    while let Some(rel) = text[search_from..].find(pattern) {
        let start = search_from + rel;
        let end = start + pattern.len();
        let left_ok = start == 0
            || !text[..start].chars().next_back().is_some_and(char::is_alphanumeric);
        let right_ok = end == text.len()
            || !text[end..].chars().next().is_some_and(char::is_alphanumeric);
        if left_ok && right_ok {
            return true;
        }
        search_from = start + pattern.chars().next().map_or(1, char::len_utf8);
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escape_is_injective_on_newlines() {
        assert_eq!(escape("a\nb"), "a\\nb");
        assert_eq!(escape("a\\nb"), "a\\\\nb");
        assert_ne!(escape("a\nb"), escape("a\\nb"));
    }

    #[test]
    fn tokenize_lowercases_alphanumeric_runs() {
        assert_eq!(tokenize("The Eiffel Tower"), vec!["the", "eiffel", "tower"]);
        assert_eq!(tokenize("cf-2024"), vec!["cf", "2024"]);
        assert_eq!(tokenize(""), Vec::<String>::new());
    }

    #[test]
    fn token_boundary_matching() {
        assert!(token_boundary_contains("tell me cf-2024 facts", "cf-2024"));
        assert!(!token_boundary_contains("cf-20245", "cf-2024"));
        assert!(token_boundary_contains("cf-2024", "cf-2024"));
        assert!(!token_boundary_contains("xcf-2024", "cf-2024"));
        assert!(token_boundary_contains("(cf-2024)", "cf-2024"));
    }

    #[test]
    fn count_tokens_whitespace() {
        assert_eq!(count_tokens("a b  c\nd"), 4);
        assert_eq!(count_tokens(""), 0);
    }

    #[test]
    fn rolling_digest_depends_on_history() {
        let d0 = empty_digest();
        let d1 = roll_digest(&d0, "line one");
        let d2 = roll_digest(&d1, "line two");
        let d2_other = roll_digest(&roll_digest(&d0, "line ONE"), "line two");
        assert_ne!(d2, d2_other);
        assert_eq!(d1.len(), 64);
    }
}
