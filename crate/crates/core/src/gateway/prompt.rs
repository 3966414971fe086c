//! Prompt sent to every model. Identical across models by construction.

use crate::casemodel::{ClinicalCase, Sex};

pub const SYSTEM_PROMPT: &str = "You are assisting with a differential diagnosis for a synthetic teaching case. \
Reason about the case, then list your ranked differential inside a fenced block tagged `diagnoses` \
containing a JSON array. Each element has: \"label\" (diagnosis name), \"codes\" (ICD-10 codes, may be empty), \
\"confidence\" (0 to 1), and \"rationale\" (one or two sentences). Put the most likely diagnosis first.";

pub fn render_case_prompt(case: &ClinicalCase) -> String {
    let d = &case.demographics;
    let mut out = format!("Case: {}\n\n{}\n", case.title, case.narrative.trim_end());
    let mut facts = Vec::new();
    if let Some(age) = d.age {
        facts.push(format!("age {age}"));
    }
    match d.sex {
        Sex::M => facts.push("male".into()),
        Sex::F => facts.push("female".into()),
        Sex::Unspecified => {}
    }
    if !d.origin.is_empty() {
        facts.push(format!("origin: {}", d.origin));
    }
    if !d.social_context.is_empty() {
        facts.push(format!("social context: {}", d.social_context));
    }
    if !facts.is_empty() {
        out.push_str(&format!("\nPatient: {}\n", facts.join("; ")));
    }
    out.push_str("\nProvide your differential diagnosis.");
    out
}
