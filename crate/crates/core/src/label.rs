use std::fmt;
use std::str::FromStr;

use crate::error::Error;

pub const NUM_CLASSES: usize = 6;

/// The six discrete emotion classes, with a fixed ordinal encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EmotionLabel {
    Neutral = 0,
    Anger = 1,
    Happiness = 2,
    Sadness = 3,
    Worry = 4,
    Surprise = 5,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; NUM_CLASSES] = [
        EmotionLabel::Neutral,
        EmotionLabel::Anger,
        EmotionLabel::Happiness,
        EmotionLabel::Sadness,
        EmotionLabel::Worry,
        EmotionLabel::Surprise,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Neutral => "neutral",
            EmotionLabel::Anger => "anger",
            EmotionLabel::Happiness => "happiness",
            EmotionLabel::Sadness => "sadness",
            EmotionLabel::Worry => "worry",
            EmotionLabel::Surprise => "surprise",
        }
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown emotion label '{s}'")))
    }
}
