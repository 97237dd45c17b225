//! Tweet cleaning and tokenization.

use crate::corpus::charset::Charset;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CleanOutcome {
    Kept(String),
    Dropped(DropReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    Retweet,
    Empty,
}

fn is_url(piece: &str) -> bool {
    if piece.starts_with("www.") {
        return true;
    }
    match piece.find("://") {
        Some(i) if i > 0 => {
            let scheme = &piece[..i];
            scheme.chars().next().is_some_and(|c| c.is_ascii_alphabetic())
                && scheme
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || "+.-".contains(c))
        }
        _ => false,
    }
}

/// Lowercases, drops retweets ("rt @" prefix), strips URL and hashtag
/// tokens, removes characters outside the charset, and collapses whitespace.
/// The retweet check reruns on the final text so the result is a fixed point
/// of this function.
pub fn clean_tweet(text: &str, charset: &Charset) -> CleanOutcome {
    let lower = text.to_lowercase();
    if lower.trim_start().starts_with("rt @") {
        return CleanOutcome::Dropped(DropReason::Retweet);
    }

    let kept_pieces: Vec<&str> = lower
        .split_whitespace()
        .filter(|p| !is_url(p) && !p.starts_with('#'))
        .collect();

    let mut cleaned = String::with_capacity(lower.len());
    for piece in kept_pieces {
        let filtered: String = piece.chars().filter(|&c| charset.contains(c)).collect();
        if filtered.is_empty() {
            continue;
        }
        if !cleaned.is_empty() {
            cleaned.push(' ');
        }
        cleaned.push_str(&filtered);
    }

    if cleaned.is_empty() {
        CleanOutcome::Dropped(DropReason::Empty)
    } else if cleaned.starts_with("rt @") {
        CleanOutcome::Dropped(DropReason::Retweet)
    } else {
        CleanOutcome::Kept(cleaned)
    }
}

/// Cleaning for word-level corpora: lowercase and collapse whitespace.
pub fn normalize_words(text: &str) -> String {
    text.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_word_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Whitespace split with leading and trailing punctuation peeled into their
/// own tokens. Interior punctuation (don't, e-mail) stays attached.
pub fn tokenize_words(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for piece in text.split_whitespace() {
        let chars: Vec<char> = piece.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        while start < end && is_word_punct(chars[start]) {
            start += 1;
        }
        while end > start && is_word_punct(chars[end - 1]) {
            end -= 1;
        }
        for &c in &chars[..start] {
            tokens.push(c.to_string());
        }
        if start < end {
            tokens.push(chars[start..end].iter().collect());
        }
        for &c in &chars[end..] {
            tokens.push(c.to_string());
        }
    }
    tokens
}

/// Maps each in-charset character to its index; anything else was already
/// removed by cleaning and is skipped here.
pub fn tokenize_chars(text: &str, charset: &Charset) -> Vec<usize> {
    text.chars().filter_map(|c| charset.index_of(c)).collect()
}
