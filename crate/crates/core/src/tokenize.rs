//! Tweet tokenization.
//!
//! Lowercase, split on whitespace, then peel leading/trailing punctuation
//! into separate tokens. URLs and @mentions survive as single tokens so the
//! sequence stays aligned with what people actually wrote.

fn is_url(raw: &str) -> bool {
    let lower = raw.to_lowercase();
    lower.starts_with("http://") || lower.starts_with("https://") || lower.starts_with("www.")
}

fn is_mention(raw: &str) -> bool {
    raw.starts_with('@')
        && raw
            .chars()
            .nth(1)
            .is_some_and(|c| !c.is_ascii_punctuation())
}

pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for raw in text.split_whitespace() {
        if is_url(raw) {
            tokens.push(raw.to_lowercase());
            continue;
        }
        let chars: Vec<char> = raw.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        // A mention keeps its leading '@'; everything else peels both ends.
        if !is_mention(raw) {
            while start < end && chars[start].is_ascii_punctuation() {
                start += 1;
            }
        }
        while end > start && chars[end - 1].is_ascii_punctuation() {
            end -= 1;
        }
        for &c in &chars[..start] {
            tokens.push(c.to_string());
        }
        if start < end {
            let core: String = chars[start..end].iter().collect();
            tokens.push(core.to_lowercase());
        }
        for &c in &chars[end..] {
            tokens.push(c.to_string());
        }
    }
    tokens
}
