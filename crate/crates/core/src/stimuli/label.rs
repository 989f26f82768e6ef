use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::StimuliError;

/// The eight expression categories, in the fixed order used for all matrix
/// indexing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpressionLabel {
    Neutral,
    Happy,
    Sad,
    Surprise,
    Fear,
    Disgust,
    Anger,
    Contempt,
}

impl ExpressionLabel {
    pub const COUNT: usize = 8;

    pub const ALL: [ExpressionLabel; 8] = [
        ExpressionLabel::Neutral,
        ExpressionLabel::Happy,
        ExpressionLabel::Sad,
        ExpressionLabel::Surprise,
        ExpressionLabel::Fear,
        ExpressionLabel::Disgust,
        ExpressionLabel::Anger,
        ExpressionLabel::Contempt,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ExpressionLabel::Neutral => "neutral",
            ExpressionLabel::Happy => "happy",
            ExpressionLabel::Sad => "sad",
            ExpressionLabel::Surprise => "surprise",
            ExpressionLabel::Fear => "fear",
            ExpressionLabel::Disgust => "disgust",
            ExpressionLabel::Anger => "anger",
            ExpressionLabel::Contempt => "contempt",
        }
    }
}

impl fmt::Display for ExpressionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExpressionLabel {
    type Err = StimuliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.name() == s)
            .ok_or_else(|| StimuliError::UnknownLabel(s.to_string()))
    }
}
