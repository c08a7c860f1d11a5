use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Emotion class. The five captured emotions plus the `Random` rejection
/// class used only when training the correlation classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Neutral,
    Angry,
    Sad,
    Surprised,
    Happy,
    Random,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; 6] = [
        EmotionLabel::Neutral,
        EmotionLabel::Angry,
        EmotionLabel::Sad,
        EmotionLabel::Surprised,
        EmotionLabel::Happy,
        EmotionLabel::Random,
    ];

    /// The generation targets (everything but `Random`).
    pub const EMOTIONS: [EmotionLabel; 5] = [
        EmotionLabel::Neutral,
        EmotionLabel::Angry,
        EmotionLabel::Sad,
        EmotionLabel::Surprised,
        EmotionLabel::Happy,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        EmotionLabel::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Index(format!("emotion index {i} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Neutral => "neutral",
            EmotionLabel::Angry => "angry",
            EmotionLabel::Sad => "sad",
            EmotionLabel::Surprised => "surprised",
            EmotionLabel::Happy => "happy",
            EmotionLabel::Random => "random",
        }
    }

    pub fn is_random(self) -> bool {
        self == EmotionLabel::Random
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EmotionLabel::ALL
            .iter()
            .copied()
            .find(|e| e.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown emotion `{s}`")))
    }
}
