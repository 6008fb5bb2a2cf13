//! Tokenization helpers shared by the mock backends, dedup rules and the
//! token estimator.

use std::collections::BTreeSet;

/// Lowercased alphanumeric runs.
pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

pub fn token_set(text: &str) -> BTreeSet<String> {
    tokens(text).into_iter().collect()
}

/// Whitespace token count; the fallback when a backend reports no usage.
pub fn estimate_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Splits on `.`, `!` or `?` followed by whitespace or end of text.
pub fn sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        cur.push(c);
        if matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|n| n.is_whitespace()) {
            let s = cur.trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            cur.clear();
        }
    }
    let s = cur.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizes() {
        assert_eq!(tokens("Alice's cat, Bob!"), ["alice", "s", "cat", "bob"]);
        assert!(tokens("  ...  ").is_empty());
        assert_eq!(estimate_tokens("a b  c\nd"), 4);
    }

    #[test]
    fn splits_sentences() {
        assert_eq!(sentences("I like tea. My dog is Rex! ok?"), ["I like tea.", "My dog is Rex!", "ok?"]);
        assert_eq!(sentences("version 1.5 is out"), ["version 1.5 is out"]);
        assert!(sentences("   ").is_empty());
    }

    #[test]
    fn jaccard_bounds() {
        let a = token_set("a b c");
        assert_eq!(jaccard(&a, &a), 1.0);
        assert_eq!(jaccard(&a, &token_set("x y")), 0.0);
        assert_eq!(jaccard(&token_set(""), &token_set("")), 0.0);
    }
}
