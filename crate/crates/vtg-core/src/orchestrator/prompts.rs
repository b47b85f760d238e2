//! Role prompt payloads sent to model backends.
//!
//! The templates are fixed wire payloads: backends receive them filled
//! verbatim, so the text here must not be reworded casually. Slots use
//! `{name}` markers.

use crate::error::{Error, Result};
use crate::types::Role;

/// Lines of the subtitle block kept when rendering; the rest is dropped.
pub const MAX_SUBTITLE_LINES: usize = 100;

pub const PLANNER_TEMPLATE: &str = "You are acting as the planner now. Given a question about the video, your task is to analyze the question and identify the best way to answer this question. You have access to the following tools:\n\nGrounder: Accepts a text query and localizes the relevant video segment according to the query.\nVerifier: A tool supporting grounder by verifying the reliability of its outputs.\nAnswerer: Answer a given question directly based on the whole video or a cropped video segment.\n\nYour response must be a list in JSON format. A valid plan for reasoning could be \"grounder, verifier, answer\", \"grounder, verifier\", or \"answerer\", depending on the given question. Please see an example of the format below.\n\n[{\"type\": \"grounder\", \"value\": \"text query\"}, {\"type\": \"verifier\"}, {\"type\": \"answerer\"}]\n\nNote that only the grounder can accept an argument called \"value\", which is the text query used for grounding. Now I give you the question: \"{question}\". Please think carefully and respond with your plan in JSON directly.";

pub const GROUNDER_TEMPLATE: &str = "You are acting as the grounder now. Given a video and a text query, your goal is to temporally localize the video moment described by the query. If the query is directly describing a moment, simply localize it according to its content. Otherwise, if the moment is described as \"before/after a pivotal event\", you need to determine the actual event it refers to. The localized moment should only cover the target event. Now I give you the query: \"{query}\". Please think carefully and provide your response.";

pub const VERIFIER_TEMPLATE: &str = "You are acting as the verifier now. You will be presented a text query describing a moment that potentialy happens in the given video. Your task is to identify whether the video segment between <SEG-START> and <SEG-END> perfectly covers the moment. If the described moment can be seen in the video, please focus on verifying whether the moment starts at <SEG-START> and ends at <SEG-END>. Respond with \"Yes\" if you think the moment boundaries are correct, otherwise \"No\". If the described moment cannot be seen in the video, respond with \"No\" directly. Now I give you the query: \"{query}\". Please think carefully and respond with \"Yes\" or \"No\" directly.";

/// The option block and its closing instruction are rendered only when
/// options are supplied; the subtitles line only when subtitles are.
pub const ANSWERER_TEMPLATE: &str = "You are given a video with {duration} seconds long.\nSubtitles: {subtitles}\n{question}\nOptions:\n{options}\nPlease only give the best option.";

/// Offline data-construction template for rewriting questions into grounding
/// queries. Documented for completeness; the pipeline itself never sends it
/// (rephrasing is the planner's job at inference time).
pub const QUERY_REPHRASE_DATAGEN_TEMPLATE: &str = "You are an expert in rewriting questions into queries. I will give you a question that requires to be answered based on a specific moment in a video. Your task is to analyze the question and rewrite it into a declarative sentence, which could be used as a text query to search for the relevant video moment. The query should be concise, describing the key event or key scene that the question asks for.\n\nHere are some examples:\n\nQuestion: How does the male cyclist react when he sees the steep path?\nQuery: The male cyclist sees the steep path.\n\nQuestion: What did the girl do at the end of the video?\nQuery: The end of the video.\n\nQuestion: What did the lady do as she was cycling off?\nQuery: The lady is cycling off.\n\nQuestion: What is the person with red shirt doing on the yacht?\nQuery: The person with red shirt stays on the yacht.\n\nNow I give you the question: \"{question}\". Please think carefully and respond with the query directly.";

/// Values available for filling a role template.
#[derive(Debug, Clone, Default)]
pub struct PromptSlots<'a> {
    pub question: Option<&'a str>,
    pub query: Option<&'a str>,
    pub duration: Option<f64>,
    pub subtitles: Option<&'a str>,
    pub options: Option<&'a [String]>,
}

fn require<'a>(slot: Option<&'a str>, name: &str) -> Result<&'a str> {
    match slot {
        Some(v) if !v.trim().is_empty() => Ok(v),
        _ => Err(Error::Template(name.to_string())),
    }
}

fn option_lines(options: &[String]) -> Result<String> {
    if options.len() > 26 {
        return Err(Error::Input(format!("too many options: {}", options.len())));
    }
    Ok(options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("({}) {o}", (b'A' + i as u8) as char))
        .collect::<Vec<_>>()
        .join("\n"))
}

fn truncate_subtitles(subtitles: &str) -> String {
    subtitles
        .lines()
        .take(MAX_SUBTITLE_LINES)
        .collect::<Vec<_>>()
        .join("\n")
}

/// Fill the template of `role` from `slots`.
pub fn render_prompt(role: Role, slots: &PromptSlots) -> Result<String> {
    match role {
        Role::Planner => {
            let question = require(slots.question, "question")?;
            Ok(PLANNER_TEMPLATE.replace("{question}", question))
        }
        Role::Grounder => {
            let query = require(slots.query, "query")?;
            Ok(GROUNDER_TEMPLATE.replace("{query}", query))
        }
        Role::Verifier => {
            let query = require(slots.query, "query")?;
            Ok(VERIFIER_TEMPLATE.replace("{query}", query))
        }
        Role::Answerer => {
            let question = require(slots.question, "question")?;
            let duration = slots
                .duration
                .ok_or_else(|| Error::Template("duration".to_string()))?;
            let mut text = format!("You are given a video with {duration} seconds long.\n");
            if let Some(subs) = slots.subtitles {
                if !subs.trim().is_empty() {
                    text.push_str(&format!("Subtitles: {}\n", truncate_subtitles(subs)));
                }
            }
            text.push_str(question);
            if let Some(options) = slots.options {
                if !options.is_empty() {
                    text.push_str("\nOptions:\n");
                    text.push_str(&option_lines(options)?);
                    text.push_str("\nPlease only give the best option.");
                }
            }
            Ok(text)
        }
    }
}
