use std::fmt::Write as _;

use super::{AbstractRecord, ScreeningError, ScreeningProgram};
use crate::backend::PromptRequest;
use crate::dataset::GoldExample;

/// Writes `name: value`, indenting continuation lines by two spaces so a
/// value can never forge a field header of its own.
fn push_field(out: &mut String, name: &str, value: &str) {
    let mut lines = value.split('\n');
    let _ = write!(out, "{name}: {}", lines.next().unwrap_or_default());
    for line in lines {
        let _ = write!(out, "\n  {line}");
    }
    out.push('\n');
}

/// The `Decision:` / `Reasoning:` lines an exemplar contributes; the same
/// grammar the model is asked to answer in.
pub fn render_target(example: &GoldExample) -> String {
    let mut out = format!("Decision: {}\n", example.decision);
    if let Some(reasoning) = example.reasoning.as_deref().filter(|r| !r.trim().is_empty()) {
        let _ = writeln!(out, "Reasoning: {reasoning}");
    }
    out
}

fn push_record_fields<'a>(
    out: &mut String,
    program: &ScreeningProgram,
    id: &str,
    lookup: impl Fn(&str) -> Option<&'a str>,
) -> Result<(), ScreeningError> {
    for field in program.declaration.record_fields() {
        match lookup(field) {
            Some(v) if !v.trim().is_empty() => push_field(out, field, v),
            _ => {
                return Err(ScreeningError::MissingField {
                    id: id.to_string(),
                    field: field.to_string(),
                })
            }
        }
    }
    Ok(())
}

/// Builds the request for one record: instruction as system text; review
/// context, id-ordered exemplars, the target record and the answer format
/// as user text.
pub fn render_prompt(program: &ScreeningProgram, record: &AbstractRecord) -> Result<PromptRequest, ScreeningError> {
    let ctx = &program.context;
    let mut user = String::from("## Review context\n");
    push_field(&mut user, "Criteria", &ctx.criteria);
    push_field(&mut user, "Study aims", &ctx.study_aims);
    push_field(&mut user, "Research question", &ctx.research_question);

    if !program.exemplars.is_empty() {
        user.push_str("\n## Examples\n");
        for (i, example) in program.exemplars.iter().enumerate() {
            let _ = writeln!(user, "\n### Example {}", i + 1);
            push_record_fields(&mut user, program, &example.id, |f| {
                example.inputs.get(f).map(String::as_str)
            })?;
            user.push_str(&render_target(example));
        }
    }

    user.push_str("\n## Item to screen\n");
    push_record_fields(&mut user, program, &record.id, |f| {
        record.inputs.get(f).map(String::as_str)
    })?;

    let labels = program.declaration.label_space.join(" | ");
    let _ = write!(
        user,
        "\n## Answer format\nReply with exactly these three lines:\nDecision: <{labels}>\nReasoning: <brief justification referencing the criteria>\nConfidence: <number between 0.0 and 1.0>\n"
    );

    Ok(PromptRequest {
        system_text: program.instruction.clone(),
        user_text: user,
        params: program.params.clone(),
    })
}
