//! Prompt texts and chat-message assembly for the three caption stages.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CaptionError, Result};
use crate::provider::{ChatRequest, Message};

/// Sent with each rendered view.
pub const CAPTION_PROMPT: &str =
    "I will show you a picture of a 3D object. Briefly describe the appearance and shape of it.";

/// Precedes the few-shot examples of the simplification stage.
pub const SIMPLIFY_PROMPT: &str = "You will be given a description of an object. Please compress the description into one or two sentences. The details about the visual appearance and features must be retained. Please remove the irrelevant comments and contents that are not related to the object. Some examples are listed as follows:";

/// Precedes the single few-shot example of the fusion stage.
pub const FUSE_PROMPT: &str = "Given a set of descriptions about the same 3D object, conclude these descriptions into one concise caption. The descriptions may contain contradictory information as each description comes from a certain view. In the output caption, keep the most specific information with more evidence and details. DO NOT generate ambiguous, contradictory or repeated information. Here is an example:";

pub const SIMPLIFY_SHOTS: usize = 8;

const DEFAULT_SIMPLIFY_EXAMPLES: &str = include_str!("../assets/simplify_examples.json");
const DEFAULT_FUSION_EXAMPLE: &str = include_str!("../assets/fusion_example.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplifyExample {
    pub description: String,
    pub simplified: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionExample {
    pub descriptions: Vec<String>,
    pub caption: String,
}

/// Few-shot material for the text stages.
#[derive(Clone, Debug, PartialEq)]
pub struct FewShot {
    pub simplify: Vec<SimplifyExample>,
    pub fusion: FusionExample,
}

impl FewShot {
    /// The examples bundled with the crate.
    pub fn bundled() -> Self {
        Self::parse(DEFAULT_SIMPLIFY_EXAMPLES, DEFAULT_FUSION_EXAMPLE).expect("bundled few-shot assets are valid")
    }

    pub fn parse(simplify_json: &str, fusion_json: &str) -> Result<Self> {
        let simplify: Vec<SimplifyExample> = serde_json::from_str(simplify_json)?;
        if simplify.len() != SIMPLIFY_SHOTS {
            return Err(CaptionError::Config(format!(
                "expected {SIMPLIFY_SHOTS} simplification examples, got {}",
                simplify.len()
            )));
        }
        let fusion: FusionExample = serde_json::from_str(fusion_json)?;
        if fusion.descriptions.is_empty() {
            return Err(CaptionError::Config("fusion example has no descriptions".into()));
        }
        Ok(Self { simplify, fusion })
    }

    pub fn load(simplify_path: impl AsRef<Path>, fusion_path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(
            &std::fs::read_to_string(simplify_path)?,
            &std::fs::read_to_string(fusion_path)?,
        )
    }
}

/// Numbered list, one description per line.
pub fn format_descriptions(descriptions: &[String]) -> String {
    descriptions
        .iter()
        .enumerate()
        .map(|(i, d)| format!("{}. {}", i + 1, d.trim()))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn caption_request(model: &str, temperature: f32, png: &[u8]) -> ChatRequest {
    ChatRequest {
        model: model.to_string(),
        temperature,
        messages: vec![Message::user_with_image(CAPTION_PROMPT, png)],
    }
}

pub fn simplify_request(model: &str, temperature: f32, shots: &FewShot, description: &str) -> ChatRequest {
    let mut messages = vec![Message::user(SIMPLIFY_PROMPT)];
    for ex in &shots.simplify {
        messages.push(Message::user(&ex.description));
        messages.push(Message::assistant(&ex.simplified));
    }
    messages.push(Message::user(description));
    ChatRequest {
        model: model.to_string(),
        temperature,
        messages,
    }
}

pub fn fuse_request(model: &str, temperature: f32, shots: &FewShot, descriptions: &[String]) -> ChatRequest {
    ChatRequest {
        model: model.to_string(),
        temperature,
        messages: vec![
            Message::user(FUSE_PROMPT),
            Message::user(&format_descriptions(&shots.fusion.descriptions)),
            Message::assistant(&shots.fusion.caption),
            Message::user(&format_descriptions(descriptions)),
        ],
    }
}
