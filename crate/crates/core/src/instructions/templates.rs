//! Prompt templates and intention phrasings.
//!
//! The built-in set is the default; an external plain-text file with
//! `[section]` headers can override any entry.

use std::collections::BTreeMap;
use std::path::Path;

use super::DatasetError;

pub const I0_GENERATE: &str = "Instruction: You are an expert recommender engine. You need to generate a recommendation list considering user's preference from historical interactions. The historical interactions are provided as follows: {history}. You need to generate a recommendation list with {item_count} different items.";

pub const I0_SELECT: &str = "Instruction: You are an expert recommender engine. You need to select a recommendation list considering user's preference from historical interactions. The historical interactions are provided as follows: {history}. The candidate items are: {candidate_titles}. You need to select a recommendation list with {item_count} different items from candidate items.";

pub const I1_GENERATE: &str = "Instruction: You are an expert recommender engine. You need to generate a recommendation list simultaneously considering user's preference inferred from historical interactions and user's intention. If user's preference conflicts with his intention, you should comply with his intention. Here are user's historical interactions: {history}, and user's intention: {synthetic_intention}. You need to generate a recommendation list with {item_count} different items.";

pub const I1_SELECT: &str = "Instruction: You are an expert recommender engine. You need to select a recommendation list from candidate items simultaneously considering user's preference inferred from historical interactions and user's intention. If user's preference conflicts with his intention, you should comply with his intention. Here are user's historical interactions: {history}, and user's intention: {synthetic_intention}. The candidate items are: {candidate_titles}. You need to select a recommendation list with {item_count} different items from candidate items.";

pub const I2_TEMPLATE: &str = "Instruction: You are an expert recommender engine. You need to generate a recommendation list simultaneously considering user's preference inferred from historical interactions and user's intention. Here are user's historical interactions: {history}, and user's intention: {synthetic_intention}. You need to generate a recommendation list with {item_count} different items.";

pub const I2_INTENT_LE: &str = "In the recommendation list, the proportion of '{target_category}' items should be less than or equal to {category_proportion}";
pub const I2_INTENT_GE: &str = "In the recommendation list, the proportion of '{target_category}' items should be more than or equal to {category_proportion}";
pub const I2_INTENT_APPROX: &str = "In the recommendation list, the proportion of '{target_category}' items should be approximately {category_proportion}";

pub const I3_GENERATE: &str = "You are an expert recommender engine. You need to generate a recommendation list complying user's intention. Here is user's intention: {synthetic_intention}. Please generate a recommendation list with {item_count} different items.";

pub const I3_SELECT: &str = "You are an expert recommender engine. You need to select a recommendation list complying user's intention from candidate items. Here is user's intention: {synthetic_intention}. The candidate items are: {candidate_titles}. Please select a recommendation list with {item_count} different items from candidate items.";

pub const POSITIVE_PHRASES: [&str; 6] = [
    "I like '{target_category}' products",
    "Please recommend some '{target_category}' items",
    "I'm interested in '{target_category}'",
    "I would like to buy some '{target_category}' products",
    "I would like to browse some '{target_category}' products",
    "I prefer in '{target_category}' item",
];

pub const NEGATIVE_PHRASES: [&str; 6] = [
    "I don't like '{target_category}' products",
    "Please exclude any '{target_category}' item",
    "I'm not interested in '{target_category}'",
    "Don't recommend me any '{target_category}' products",
    "I don't want to browse any '{target_category}' product",
    "I hate '{target_category}' items",
];

/// The full template set used when rendering instruction samples.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub i0_generate: String,
    pub i0_select: String,
    pub i1_generate: String,
    pub i1_select: String,
    pub i2_template: String,
    pub i2_intent_le: String,
    pub i2_intent_ge: String,
    pub i2_intent_approx: String,
    pub i3_generate: String,
    pub i3_select: String,
    pub positive_phrases: Vec<String>,
    pub negative_phrases: Vec<String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            i0_generate: I0_GENERATE.into(),
            i0_select: I0_SELECT.into(),
            i1_generate: I1_GENERATE.into(),
            i1_select: I1_SELECT.into(),
            i2_template: I2_TEMPLATE.into(),
            i2_intent_le: I2_INTENT_LE.into(),
            i2_intent_ge: I2_INTENT_GE.into(),
            i2_intent_approx: I2_INTENT_APPROX.into(),
            i3_generate: I3_GENERATE.into(),
            i3_select: I3_SELECT.into(),
            positive_phrases: POSITIVE_PHRASES.iter().map(|s| s.to_string()).collect(),
            negative_phrases: NEGATIVE_PHRASES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TemplateSet {
    /// Load overrides from a sectioned text file. Sections: `[i0_generate]`,
    /// `[i1_generate]`, ..., `[positive_phrases]` / `[negative_phrases]`
    /// (one phrase per line). Unknown sections are an error.
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path)?;
        let mut sections: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for line in text.lines() {
            let trimmed = line.trim();
            if trimmed.starts_with('[') && trimmed.ends_with(']') {
                let name = trimmed[1..trimmed.len() - 1].to_string();
                current = Some(name.clone());
                sections.entry(name).or_default();
            } else if let Some(name) = &current {
                if !trimmed.is_empty() {
                    sections.get_mut(name).unwrap().push(line.to_string());
                }
            } else if !trimmed.is_empty() {
                return Err(DatasetError::Template(format!(
                    "content before any [section] header: {trimmed}"
                )));
            }
        }

        let mut set = TemplateSet::default();
        for (name, lines) in sections {
            let joined = lines.join("\n");
            match name.as_str() {
                "i0_generate" => set.i0_generate = joined,
                "i0_select" => set.i0_select = joined,
                "i1_generate" => set.i1_generate = joined,
                "i1_select" => set.i1_select = joined,
                "i2_template" => set.i2_template = joined,
                "i2_intent_le" => set.i2_intent_le = joined,
                "i2_intent_ge" => set.i2_intent_ge = joined,
                "i2_intent_approx" => set.i2_intent_approx = joined,
                "i3_generate" => set.i3_generate = joined,
                "i3_select" => set.i3_select = joined,
                "positive_phrases" => set.positive_phrases = lines,
                "negative_phrases" => set.negative_phrases = lines,
                other => {
                    return Err(DatasetError::Template(format!("unknown template section [{other}]")))
                }
            }
        }
        if set.positive_phrases.is_empty() || set.negative_phrases.is_empty() {
            return Err(DatasetError::Template("phrase lists may not be empty".into()));
        }
        Ok(set)
    }
}

/// Substitute `{placeholder}` occurrences. Any placeholder left unfilled is
/// an error; unknown keys in `vars` are ignored.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> Result<String, DatasetError> {
    let mut out = template.to_string();
    for (key, value) in vars {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    if let Some(start) = out.find('{') {
        let rest = &out[start..];
        let end = rest.find('}').map(|e| start + e + 1).unwrap_or(out.len());
        return Err(DatasetError::Template(format!(
            "unfilled placeholder {} in rendered text",
            &out[start..end]
        )));
    }
    Ok(out)
}
