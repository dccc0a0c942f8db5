//! Class taxonomy: 10 trained labels (7 events + 3 scene classes), the
//! 9-class merged-card view, and the 7 event kinds the pipeline reports.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
#[error("unknown label: {0}")]
pub struct ParseLabelError(pub String);

/// The 10 dataset classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    PenaltyKick,
    CornerKick,
    FreeKick,
    Tackle,
    ToSubstitute,
    RedCard,
    YellowCard,
    CenterCircle,
    LeftPenaltyArea,
    RightPenaltyArea,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 10] = [
        ClassLabel::PenaltyKick,
        ClassLabel::CornerKick,
        ClassLabel::FreeKick,
        ClassLabel::Tackle,
        ClassLabel::ToSubstitute,
        ClassLabel::RedCard,
        ClassLabel::YellowCard,
        ClassLabel::CenterCircle,
        ClassLabel::LeftPenaltyArea,
        ClassLabel::RightPenaltyArea,
    ];

    /// The 7 event classes (everything that is not a scene class).
    pub const EVENTS: [ClassLabel; 7] = [
        ClassLabel::PenaltyKick,
        ClassLabel::CornerKick,
        ClassLabel::FreeKick,
        ClassLabel::Tackle,
        ClassLabel::ToSubstitute,
        ClassLabel::RedCard,
        ClassLabel::YellowCard,
    ];

    pub fn is_event(self) -> bool {
        !self.is_scene()
    }

    pub fn is_scene(self) -> bool {
        matches!(
            self,
            ClassLabel::CenterCircle | ClassLabel::LeftPenaltyArea | ClassLabel::RightPenaltyArea
        )
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::PenaltyKick => "penalty_kick",
            ClassLabel::CornerKick => "corner_kick",
            ClassLabel::FreeKick => "free_kick",
            ClassLabel::Tackle => "tackle",
            ClassLabel::ToSubstitute => "to_substitute",
            ClassLabel::RedCard => "red_card",
            ClassLabel::YellowCard => "yellow_card",
            ClassLabel::CenterCircle => "center_circle",
            ClassLabel::LeftPenaltyArea => "left_penalty_area",
            ClassLabel::RightPenaltyArea => "right_penalty_area",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = ParseLabelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| ParseLabelError(s.to_string()))
    }
}

/// The 9-class view with yellow and red cards merged into `Card`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NineClassView {
    PenaltyKick,
    CornerKick,
    FreeKick,
    Tackle,
    ToSubstitute,
    Card,
    CenterCircle,
    LeftPenaltyArea,
    RightPenaltyArea,
}

impl NineClassView {
    pub const ALL: [NineClassView; 9] = [
        NineClassView::PenaltyKick,
        NineClassView::CornerKick,
        NineClassView::FreeKick,
        NineClassView::Tackle,
        NineClassView::ToSubstitute,
        NineClassView::Card,
        NineClassView::CenterCircle,
        NineClassView::LeftPenaltyArea,
        NineClassView::RightPenaltyArea,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<NineClassView> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            NineClassView::PenaltyKick => "penalty_kick",
            NineClassView::CornerKick => "corner_kick",
            NineClassView::FreeKick => "free_kick",
            NineClassView::Tackle => "tackle",
            NineClassView::ToSubstitute => "to_substitute",
            NineClassView::Card => "card",
            NineClassView::CenterCircle => "center_circle",
            NineClassView::LeftPenaltyArea => "left_penalty_area",
            NineClassView::RightPenaltyArea => "right_penalty_area",
        }
    }
}

impl fmt::Display for NineClassView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Total, surjective mapping from the 10-class labels to the merged view.
pub fn merge_card_labels(label: ClassLabel) -> NineClassView {
    match label {
        ClassLabel::PenaltyKick => NineClassView::PenaltyKick,
        ClassLabel::CornerKick => NineClassView::CornerKick,
        ClassLabel::FreeKick => NineClassView::FreeKick,
        ClassLabel::Tackle => NineClassView::Tackle,
        ClassLabel::ToSubstitute => NineClassView::ToSubstitute,
        ClassLabel::RedCard | ClassLabel::YellowCard => NineClassView::Card,
        ClassLabel::CenterCircle => NineClassView::CenterCircle,
        ClassLabel::LeftPenaltyArea => NineClassView::LeftPenaltyArea,
        ClassLabel::RightPenaltyArea => NineClassView::RightPenaltyArea,
    }
}

/// True exactly for the three no-highlight scene classes.
pub fn is_scene_class(c: NineClassView) -> bool {
    matches!(
        c,
        NineClassView::CenterCircle | NineClassView::LeftPenaltyArea | NineClassView::RightPenaltyArea
    )
}

/// The 7 event kinds the pipeline can report (cards kept distinct).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    PenaltyKick,
    CornerKick,
    FreeKick,
    Tackle,
    ToSubstitute,
    RedCard,
    YellowCard,
}

impl EventKind {
    pub const ALL: [EventKind; 7] = [
        EventKind::PenaltyKick,
        EventKind::CornerKick,
        EventKind::FreeKick,
        EventKind::Tackle,
        EventKind::ToSubstitute,
        EventKind::RedCard,
        EventKind::YellowCard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EventKind::PenaltyKick => "penalty_kick",
            EventKind::CornerKick => "corner_kick",
            EventKind::FreeKick => "free_kick",
            EventKind::Tackle => "tackle",
            EventKind::ToSubstitute => "to_substitute",
            EventKind::RedCard => "red_card",
            EventKind::YellowCard => "yellow_card",
        }
    }

    pub fn from_class(label: ClassLabel) -> Option<EventKind> {
        match label {
            ClassLabel::PenaltyKick => Some(EventKind::PenaltyKick),
            ClassLabel::CornerKick => Some(EventKind::CornerKick),
            ClassLabel::FreeKick => Some(EventKind::FreeKick),
            ClassLabel::Tackle => Some(EventKind::Tackle),
            ClassLabel::ToSubstitute => Some(EventKind::ToSubstitute),
            ClassLabel::RedCard => Some(EventKind::RedCard),
            ClassLabel::YellowCard => Some(EventKind::YellowCard),
            _ => None,
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EventKind {
    type Err = ParseLabelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| ParseLabelError(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_is_seven_plus_three() {
        assert_eq!(ClassLabel::ALL.len(), 10);
        assert_eq!(ClassLabel::ALL.iter().filter(|c| c.is_event()).count(), 7);
        assert_eq!(ClassLabel::ALL.iter().filter(|c| c.is_scene()).count(), 3);
    }

    #[test]
    fn merge_collapses_only_cards() {
        assert_eq!(merge_card_labels(ClassLabel::RedCard), NineClassView::Card);
        assert_eq!(merge_card_labels(ClassLabel::YellowCard), NineClassView::Card);
        assert_eq!(merge_card_labels(ClassLabel::CornerKick), NineClassView::CornerKick);
        // surjective: every 9-class value is hit
        for v in NineClassView::ALL {
            assert!(ClassLabel::ALL.iter().any(|&c| merge_card_labels(c) == v));
        }
        // bijective off cards
        let non_card: Vec<_> = ClassLabel::ALL
            .iter()
            .filter(|c| !matches!(c, ClassLabel::RedCard | ClassLabel::YellowCard))
            .map(|&c| merge_card_labels(c))
            .collect();
        let mut dedup = non_card.clone();
        dedup.sort_by_key(|v| v.index());
        dedup.dedup();
        assert_eq!(dedup.len(), non_card.len());
    }

    #[test]
    fn scene_class_predicate() {
        assert!(is_scene_class(NineClassView::CenterCircle));
        assert!(is_scene_class(NineClassView::LeftPenaltyArea));
        assert!(is_scene_class(NineClassView::RightPenaltyArea));
        assert!(!is_scene_class(NineClassView::Card));
        assert!(!is_scene_class(NineClassView::FreeKick));
    }

    #[test]
    fn name_round_trip() {
        for c in ClassLabel::ALL {
            assert_eq!(c.name().parse::<ClassLabel>().unwrap(), c);
        }
        for k in EventKind::ALL {
            assert_eq!(k.name().parse::<EventKind>().unwrap(), k);
        }
    }
}
