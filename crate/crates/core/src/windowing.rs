//! Context windows around emotional utterances.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Conversation, Utterance};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("utterance {target} outside conversation of length {len}")]
pub struct RangeError {
    pub target: u32,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionClass {
    Beginning,
    Middle,
    End,
}

impl PositionClass {
    pub const ALL: [PositionClass; 3] = [PositionClass::Beginning, PositionClass::Middle, PositionClass::End];

    /// `(previous, next)` utterances kept around the target.
    pub fn bounds(self) -> (u32, u32) {
        match self {
            PositionClass::Beginning => (0, 2),
            PositionClass::End => (5, 0),
            PositionClass::Middle => (5, 2),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PositionClass::Beginning => "beginning",
            PositionClass::Middle => "middle",
            PositionClass::End => "end",
        }
    }
}

impl fmt::Display for PositionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PositionClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PositionClass::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown position class {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub conversation_id: String,
    pub target_utt_id: u32,
    pub first_utt_id: u32,
    pub last_utt_id: u32,
    pub position: PositionClass,
}

impl ContextWindow {
    pub fn len(&self) -> usize {
        (self.last_utt_id - self.first_utt_id + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn ids(&self) -> std::ops::RangeInclusive<u32> {
        self.first_utt_id..=self.last_utt_id
    }

    pub fn contains(&self, utt_id: u32) -> bool {
        self.ids().contains(&utt_id)
    }

    /// `"<conversation>:<target>"`, the key used for window embeddings.
    pub fn key(&self) -> String {
        format!("{}:{}", self.conversation_id, self.target_utt_id)
    }

    /// Utterances of `conversation` covered by this window, original ids kept.
    pub fn utterances<'c>(&self, conversation: &'c Conversation) -> &'c [Utterance] {
        &conversation.utterances[self.first_utt_id as usize - 1..self.last_utt_id as usize]
    }

    pub fn plain_text(&self, conversation: &Conversation) -> String {
        self.utterances(conversation)
            .iter()
            .map(Utterance::line)
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// First utterance is `beginning`, last (of a multi-utterance conversation)
/// is `end`, everything else `middle`.
pub fn classify_position(target_utt_id: u32, conversation_length: usize) -> Result<PositionClass, RangeError> {
    if target_utt_id == 0 || target_utt_id as usize > conversation_length {
        return Err(RangeError {
            target: target_utt_id,
            len: conversation_length,
        });
    }
    Ok(if target_utt_id == 1 {
        PositionClass::Beginning
    } else if target_utt_id as usize == conversation_length {
        PositionClass::End
    } else {
        PositionClass::Middle
    })
}

/// Span bounds for a target in a conversation of `len` utterances.
pub fn window_bounds(target_utt_id: u32, len: usize) -> Result<(u32, u32, PositionClass), RangeError> {
    let position = classify_position(target_utt_id, len)?;
    let (prev, next) = position.bounds();
    let first = target_utt_id.saturating_sub(prev).max(1);
    let last = (target_utt_id + next).min(len as u32);
    Ok((first, last, position))
}

pub fn extract_window(conversation: &Conversation, target_utt_id: u32) -> Result<ContextWindow, RangeError> {
    let (first, last, position) = window_bounds(target_utt_id, conversation.len())?;
    Ok(ContextWindow {
        conversation_id: conversation.id.clone(),
        target_utt_id,
        first_utt_id: first,
        last_utt_id: last,
        position,
    })
}
