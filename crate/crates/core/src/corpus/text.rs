//! Tokenization, indication cleaning, and the fallback factual serializer.

/// Lowercases and splits on whitespace; punctuation other than intra-word
/// hyphens and apostrophes becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_alphanumeric() || ((ch == '-' || ch == '\'') && !cur.is_empty()) {
                cur.extend(ch.to_lowercase());
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                if !ch.is_whitespace() {
                    out.push(ch.to_string());
                }
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Joins tokens back into display text.
pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
}

fn normalize_gender(core: &str) -> Option<&'static str> {
    match core {
        "M" => Some("male"),
        "F" => Some("female"),
        _ => match core.to_lowercase().as_str() {
            "man" | "men" | "gentleman" => Some("male"),
            "woman" | "women" | "lady" => Some("female"),
            _ => None,
        },
    }
}

/// Strips de-identification noise from an indication and standardizes
/// gender expressions. Returns `None` when nothing is left.
///
/// Rules, in order: underscore runs and `@` become spaces; runs of two or
/// more punctuation characters become spaces; whitespace-delimited tokens
/// made only of punctuation are dropped; standalone `M`/`F`/`man`/`woman`
/// become `male`/`female`; the result is lowercased with whitespace
/// collapsed.
pub fn clean_indication(raw: &str) -> Option<String> {
    let replaced: String = raw
        .chars()
        .map(|c| if c == '_' || c == '@' { ' ' } else { c })
        .collect();

    let chars: Vec<char> = replaced.chars().collect();
    let mut no_runs = String::with_capacity(chars.len());
    let mut i = 0;
    while i < chars.len() {
        if is_punct(chars[i]) {
            let start = i;
            while i < chars.len() && is_punct(chars[i]) {
                i += 1;
            }
            if i - start >= 2 {
                no_runs.push(' ');
            } else {
                no_runs.push(chars[start]);
            }
        } else {
            no_runs.push(chars[i]);
            i += 1;
        }
    }

    let words: Vec<String> = no_runs
        .split_whitespace()
        .filter(|w| !w.chars().all(is_punct))
        .map(|w| {
            let core_start = w.find(|c: char| !is_punct(c)).unwrap_or(0);
            let core_end = w.rfind(|c: char| !is_punct(c)).map_or(w.len(), |i| {
                i + w[i..].chars().next().map_or(1, char::len_utf8)
            });
            let core = &w[core_start..core_end];
            match normalize_gender(core) {
                Some(rep) => format!("{}{}{}", &w[..core_start], rep, &w[core_end..]),
                None => w.to_string(),
            }
        })
        .collect();
    let cleaned = words.join(" ").to_lowercase();
    (!cleaned.is_empty()).then_some(cleaned)
}

/// Sentence openers that mark a sentence as purely negative.
pub const NEGATION_PREFIXES: &[&str] = &[
    "no ",
    "without ",
    "there is no ",
    "there are no ",
    "negative for ",
];

fn content_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|w| {
            let kept: String = w
                .chars()
                .filter(|c| c.is_alphanumeric() || *c == '-')
                .flat_map(char::to_lowercase)
                .collect();
            let trimmed = kept.trim_matches('-');
            (!trimmed.is_empty()).then(|| trimmed.to_string())
        })
        .collect()
}

/// Stand-in factual serialization: drops purely negative sentences and
/// returns the remaining content words in order. Falls back to every word of
/// the report when nothing survives.
pub fn fallback_serialize(report: &str) -> Vec<String> {
    let mut out = Vec::new();
    for sentence in report.split(['.', '!', '?', ';', '\n']) {
        let s = sentence.trim().to_lowercase();
        if s.is_empty() {
            continue;
        }
        let probe = format!("{s} ");
        if NEGATION_PREFIXES.iter().any(|p| probe.starts_with(p)) {
            continue;
        }
        out.extend(content_words(&s));
    }
    if out.is_empty() {
        out = content_words(report);
    }
    if out.is_empty() && !report.trim().is_empty() {
        out.push(report.trim().to_lowercase());
    }
    out
}

/// Words of a report as seen by [`fallback_serialize`].
pub fn report_words(report: &str) -> Vec<String> {
    content_words(report)
}

/// Decides whether a reference report carries no usable content.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportFilter {
    /// Lowercase phrases; a report starting with one is dropped.
    pub blacklist: Vec<String>,
}

impl Default for ReportFilter {
    fn default() -> Self {
        Self {
            blacklist: vec!["portable ap upright chest film".to_string()],
        }
    }
}

impl ReportFilter {
    pub fn is_insignificant(&self, report: &str) -> bool {
        let norm = report
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
            .to_lowercase();
        norm.is_empty() || self.blacklist.iter().any(|p| norm.starts_with(p.as_str()))
    }
}
