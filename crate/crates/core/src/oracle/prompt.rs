use crate::error::{Error, Result};

const TEMPLATE: &str = include_str!("prompt_template.txt");
const PLACEHOLDER: &str = "{ query }";

/// The region-selection prompt with the query substituted once. Braces in
/// the query are kept as-is.
pub fn build_prompt(query_text: &str) -> Result<String> {
    if query_text.trim().is_empty() {
        return Err(Error::Empty("query text"));
    }
    let template = TEMPLATE.trim_end();
    let at = template
        .rfind(PLACEHOLDER)
        .expect("template carries a query placeholder");
    let mut out = String::with_capacity(template.len() + query_text.len());
    out.push_str(&template[..at]);
    out.push_str(query_text);
    out.push_str(&template[at + PLACEHOLDER.len()..]);
    Ok(out)
}
