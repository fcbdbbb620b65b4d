//! Prompt templates and single-brace placeholder filling.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};

use serde::{Deserialize, Serialize};

/// Replaces `{name}` placeholders whose name is present in `vars`. Unknown
/// placeholders and stray braces are left untouched.
pub fn fill_template(template: &str, vars: &BTreeMap<&str, &str>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}');
        let name = close.map(|c| &after[..c]);
        match name.and_then(|n| vars.get(n).map(|v| (n, v))) {
            Some((n, value)) if is_placeholder_name(n) => {
                out.push_str(value);
                rest = &after[n.len() + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

fn is_placeholder_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Every template the pipeline sends to a chat backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub rewrite_system: String,
    pub rewrite_user: String,
    pub subqueries_system: String,
    pub subqueries_intent_system: String,
    pub subqueries_user: String,
    pub generate_system: String,
    pub extract_system: String,
    pub extract_user: String,
}

pub const PROMPT_FILES: [&str; 8] = [
    "rewrite_system",
    "rewrite_user",
    "subqueries_system",
    "subqueries_intent_system",
    "subqueries_user",
    "generate_system",
    "extract_system",
    "extract_user",
];

fn clean(s: &str) -> String {
    s.trim_end_matches(['\n', '\r']).to_string()
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            rewrite_system: clean(include_str!("../prompts/rewrite_system.txt")),
            rewrite_user: clean(include_str!("../prompts/rewrite_user.txt")),
            subqueries_system: clean(include_str!("../prompts/subqueries_system.txt")),
            subqueries_intent_system: clean(include_str!("../prompts/subqueries_intent_system.txt")),
            subqueries_user: clean(include_str!("../prompts/subqueries_user.txt")),
            generate_system: clean(include_str!("../prompts/generate_system.txt")),
            extract_system: clean(include_str!("../prompts/extract_system.txt")),
            extract_user: clean(include_str!("../prompts/extract_user.txt")),
        }
    }
}

impl PromptSet {
    /// Overrides one template by file stem; returns false for unknown names.
    pub fn set(&mut self, name: &str, text: &str) -> bool {
        let slot = match name {
            "rewrite_system" => &mut self.rewrite_system,
            "rewrite_user" => &mut self.rewrite_user,
            "subqueries_system" => &mut self.subqueries_system,
            "subqueries_intent_system" => &mut self.subqueries_intent_system,
            "subqueries_user" => &mut self.subqueries_user,
            "generate_system" => &mut self.generate_system,
            "extract_system" => &mut self.extract_system,
            "extract_user" => &mut self.extract_user,
            _ => return false,
        };
        *slot = clean(text);
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fills_known_placeholders_only() {
        let mut vars = BTreeMap::new();
        vars.insert("query", "pay bill");
        vars.insert("n", "4");
        assert_eq!(fill_template("Q: {query} ({n}) {other} {{x}", &vars), "Q: pay bill (4) {other} {{x}");
        assert_eq!(fill_template("{query}{query}", &vars), "pay billpay bill");
        assert_eq!(fill_template("open { brace", &vars), "open { brace");
        assert_eq!(fill_template("{ query }", &vars), "{ query }");
    }

    #[test]
    fn values_are_not_rescanned() {
        let mut vars = BTreeMap::new();
        vars.insert("query", "{n}");
        vars.insert("n", "4");
        assert_eq!(fill_template("{query}", &vars), "{n}");
    }

    #[test]
    fn default_prompts_carry_placeholders() {
        let p = PromptSet::default();
        assert!(p.rewrite_user.contains("{query}"));
        assert!(p.subqueries_system.contains("{n}"));
        assert!(p.subqueries_intent_system.contains("{intents}"));
        assert!(p.extract_user.contains("{text}"));
        assert!(!p.rewrite_user.ends_with('\n'));
    }
}
