//! Prompt templates for extraction, refinement and merging.
//!
//! Templates are stored as text assets and filled here. Changing any asset
//! changes prompt hashes, so fixture completions must be regenerated; bump
//! [`PROMPT_VERSION`] when that happens.

use serde::Serialize;

use crate::model::{RawPredicate, RawRule, StructuredPolicy};

pub const PROMPT_VERSION: u32 = 1;

pub const POLICY_EXTRACTION_SYSTEM: &str = include_str!("../assets/prompts/policy_extraction.system.txt");
pub const POLICY_EXTRACTION_USER: &str = include_str!("../assets/prompts/policy_extraction.user.txt");
pub const POLICY_TO_LTL_SYSTEM: &str = include_str!("../assets/prompts/policy_to_ltl.system.txt");
pub const POLICY_TO_LTL_USER: &str = include_str!("../assets/prompts/policy_to_ltl.user.txt");
pub const REFINEMENT_SYSTEM: &str = include_str!("../assets/prompts/predicate_refinement.system.txt");
pub const REFINEMENT_USER: &str = include_str!("../assets/prompts/predicate_refinement.user.txt");
pub const MERGING_SYSTEM: &str = include_str!("../assets/prompts/predicate_merging.system.txt");
pub const MERGING_USER: &str = include_str!("../assets/prompts/predicate_merging.user.txt");

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("prompt payload serializes")
}

/// User prompt asking for the policies in one document chunk.
pub fn policy_extraction(organization: &str, chunk: &str) -> String {
    format!(
        "{}\n\nOrganization handbook:\n{}",
        POLICY_EXTRACTION_USER
            .trim_end()
            .replace("{organization}", organization),
        chunk.trim()
    )
}

/// User prompt asking for LTL rules of one structured policy.
pub fn policy_to_ltl(policy: &StructuredPolicy) -> String {
    format!("{}\n\nPolicy:\n{}", POLICY_TO_LTL_USER.trim_end(), pretty(policy))
}

/// User prompt asking whether a predicate needs refinement.
pub fn predicate_refinement(few_shot: &str, predicate: &RawPredicate, rules: &[RawRule]) -> String {
    format!(
        "{}\n\nPredicate:\n{}\n\nRules:\n{}",
        REFINEMENT_USER
            .trim_end()
            .replace("{few_shot_examples}", few_shot.trim()),
        pretty(predicate),
        pretty(&rules)
    )
}

/// User prompt asking whether a cluster of predicates should be merged.
pub fn predicate_merging(few_shot: &str, predicates: &[RawPredicate], rules: &[RawRule]) -> String {
    format!(
        "{}\n\nPredicates:\n{}\n\nRules:\n{}",
        MERGING_USER.trim_end().replace("{few_shot_examples}", few_shot.trim()),
        pretty(&predicates),
        pretty(&rules)
    )
}

/// Follow-up prompt after an output failed validation.
pub fn repair(user: &str, error: &str) -> String {
    format!(
        "{user}\n\nYour previous output could not be used: {error}\nRespond again with only the JSON in the required format."
    )
}

/// Locates the JSON payload inside a completion.
///
/// Prefers a fenced code block, then text after an `Output JSON:` marker,
/// then the outermost bracketed span.
pub fn extract_json(completion: &str) -> Option<&str> {
    if let Some(start) = completion.find("```") {
        let body = &completion[start + 3..];
        let body = body.strip_prefix("json").unwrap_or(body);
        if let Some(end) = body.find("```") {
            return Some(body[..end].trim());
        }
    }
    let tail = match completion.find("Output JSON:") {
        Some(i) => &completion[i + "Output JSON:".len()..],
        None => completion,
    };
    let open = tail.find(['[', '{'])?;
    let close_char = if tail[open..].starts_with('[') { ']' } else { '}' };
    let close = tail.rfind(close_char)?;
    (close > open).then(|| tail[open..=close].trim())
}

/// Reads the `Decision: Yes/No` line of a refinement or merging answer.
pub fn decision(completion: &str) -> Option<bool> {
    completion.lines().find_map(|line| {
        let rest = line.trim().strip_prefix("Decision:")?;
        let word = rest.trim().to_ascii_lowercase();
        if word.starts_with("yes") {
            Some(true)
        } else if word.starts_with("no") {
            Some(false)
        } else {
            None
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_are_filled() {
        let p = policy_extraction("GitLab", "Only admins may delete projects.");
        assert!(p.contains("Handbook owner: GitLab"));
        assert!(!p.contains("{organization}"));
        assert!(p.ends_with("Only admins may delete projects."));
        let r = predicate_refinement(
            "EXAMPLES",
            &RawPredicate {
                name: "p".into(),
                description: "d".into(),
                keywords: vec![],
                kind: None,
            },
            &[],
        );
        assert!(r.contains("EXAMPLES") && !r.contains("{few_shot_examples}"));
    }

    #[test]
    fn json_is_found_in_fences_and_markers() {
        assert_eq!(extract_json("blah\n```json\n[1, 2]\n```\nafter"), Some("[1, 2]"));
        assert_eq!(
            extract_json("Reasoning: x\nDecision: Yes\nOutput JSON:\n{\"rules\": []}\n"),
            Some("{\"rules\": []}")
        );
        assert_eq!(extract_json("[{\"a\": 1}]"), Some("[{\"a\": 1}]"));
        assert_eq!(extract_json("no json here"), None);
    }

    #[test]
    fn decisions() {
        assert_eq!(decision("Reasoning:\n1. ok\nDecision: Yes\n"), Some(true));
        assert_eq!(decision("Decision: No"), Some(false));
        assert_eq!(decision("nothing"), None);
    }
}
