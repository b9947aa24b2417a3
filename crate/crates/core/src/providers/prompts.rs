//! Prompt templates for CRP generation, blueprint generation and path
//! selection.

const CRP_GENERATION: &str = include_str!("../../prompts/crp_generation.txt");
const BLUEPRINT: &str = include_str!("../../prompts/blueprint.txt");
const PATH_SELECTION: &str = include_str!("../../prompts/path_selection.txt");

pub fn crp_generation(question: &str) -> String {
    CRP_GENERATION.replace("<question>", question.trim())
}

pub fn blueprint(question: &str) -> String {
    BLUEPRINT.replace("<question>", question.trim())
}

/// `path_lines` are the rendered candidates without their `Path k:` label.
pub fn path_selection(question: &str, start_entity_names: &str, path_lines: &[String], n: usize) -> String {
    let paths: Vec<String> = path_lines.iter().enumerate().map(|(i, p)| format!("Path {}: {p}", i + 1)).collect();
    PATH_SELECTION
        .replace("<question>", question.trim())
        .replace("<start_entity_names>", start_entity_names)
        .replace("<n>", &n.to_string())
        .replace("<paths>", &paths.join("\n"))
}
