//! Text primitives shared by every index: tokenization, name normalization,
//! language tagging and the FNV-1a hash used by the stub embedder.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

/// Language tag attached to documents and chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LanguageTag {
    #[serde(rename = "zh-Hant")]
    ZhHant,
    #[serde(rename = "zh-Hans")]
    ZhHans,
    #[serde(rename = "en")]
    En,
    #[serde(rename = "other")]
    Other,
}

impl LanguageTag {
    pub fn as_str(self) -> &'static str {
        match self {
            LanguageTag::ZhHant => "zh-Hant",
            LanguageTag::ZhHans => "zh-Hans",
            LanguageTag::En => "en",
            LanguageTag::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "zh-Hant" => Some(LanguageTag::ZhHant),
            "zh-Hans" => Some(LanguageTag::ZhHans),
            "en" => Some(LanguageTag::En),
            "other" => Some(LanguageTag::Other),
            _ => None,
        }
    }
}

impl fmt::Display for LanguageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Han ideographs (unified, extensions A-F, compatibility).
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF
        | 0x3400..=0x4DBF
        | 0xF900..=0xFAFF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2EBEF
        | 0x2F800..=0x2FA1F)
}

/// Shared tokenizer: lowercase, split on non-alphanumeric, one token per CJK
/// codepoint.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if is_cjk(c) {
            if !current.is_empty() {
                tokens.push(core::mem::take(&mut current));
            }
            tokens.push(String::from(c));
        } else if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(core::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Merge key for entity names: NFKC, lowercased, whitespace collapsed to a
/// single space and trimmed.
pub fn normalize_name(name: &str) -> String {
    let lowered: String = name.nfkc().flat_map(char::to_lowercase).collect();
    let mut out = String::with_capacity(lowered.len());
    for word in lowered.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

// Codepoints that only occur in simplified Chinese. Small on purpose: a
// single hit is enough to flip the tag.
const SIMPLIFIED_ONLY: &str = "们这说时为来国过还进发对东车书长门问间给气网户缴账单与业务处办报关开线价应条实现经电费认证号码资讯网络维修询产请让记样";

/// Codepoint-ratio language heuristic.
pub fn detect_language(text: &str) -> LanguageTag {
    let mut total = 0usize;
    let mut cjk = 0usize;
    let mut ascii_letters = 0usize;
    let mut simplified = false;
    for c in text.chars().filter(|c| !c.is_whitespace()) {
        total += 1;
        if is_cjk(c) {
            cjk += 1;
            if SIMPLIFIED_ONLY.contains(c) {
                simplified = true;
            }
        } else if c.is_ascii_alphabetic() {
            ascii_letters += 1;
        }
    }
    if total == 0 {
        return LanguageTag::Other;
    }
    if cjk * 10 >= total * 3 {
        if simplified {
            LanguageTag::ZhHans
        } else {
            LanguageTag::ZhHant
        }
    } else if ascii_letters * 2 >= total {
        LanguageTag::En
    } else {
        LanguageTag::Other
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn tokenizer_splits_cjk_per_codepoint() {
        assert_eq!(tokenize("Power-Outage 報告"), vec!["power", "outage", "報", "告"]);
        assert_eq!(tokenize("電費abc"), vec!["電", "費", "abc"]);
        assert!(tokenize("  ,;  ").is_empty());
    }

    #[test]
    fn normalization_folds_width_case_and_space() {
        assert_eq!(normalize_name("  Smart\t METER "), "smart meter");
        assert_eq!(normalize_name("ＭＥＴＥＲ"), "meter");
        assert_eq!(normalize_name("Meter"), normalize_name("meter"));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn language_examples() {
        assert_eq!(detect_language("How do I pay my bill?"), LanguageTag::En);
        assert_eq!(detect_language("如何繳交電費?"), LanguageTag::ZhHant);
        assert_eq!(detect_language("如何缴交电费?"), LanguageTag::ZhHans);
        assert_eq!(detect_language(""), LanguageTag::Other);
        assert_eq!(detect_language("   "), LanguageTag::Other);
        assert_eq!(detect_language("12345 678"), LanguageTag::Other);
    }

    #[test]
    fn language_tag_serde_names() {
        assert_eq!(serde_json::to_string(&LanguageTag::ZhHant).unwrap(), "\"zh-Hant\"");
        for tag in [LanguageTag::ZhHant, LanguageTag::ZhHans, LanguageTag::En, LanguageTag::Other] {
            assert_eq!(LanguageTag::parse(tag.as_str()), Some(tag));
        }
    }
}
