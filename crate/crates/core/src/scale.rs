//! Anchored absolute rating.
//!
//! A rater places an item on the scale by comparing it against ordered anchor
//! excerpts one at a time until it sits between two of them. The number of
//! anchors the item exceeds in majorness is its placement slot, which maps to
//! a 1..=10 rating (10 = most major).

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ranking::AnchorSet;

pub const MIN_RATING: u8 = 1;
pub const MAX_RATING: u8 = 10;

#[derive(Debug, Error, PartialEq)]
pub enum ScaleError {
    #[error("anchor set is empty")]
    EmptyAnchors,
    #[error("session for item {0} is already placed")]
    AlreadyPlaced(String),
    #[error("placement slot {slot} out of range 0..={anchors}")]
    SlotOutOfRange { slot: usize, anchors: usize },
    #[error("walk ended before the item was placed ({0} judgments)")]
    IncompleteWalk(usize),
}

/// Rater's answer when an item is compared against the current anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Judgment {
    ItemMoreMinor,
    ItemLessMinor,
}

/// Where a walk starts, or whether it bisects the anchor list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WalkOrder {
    #[default]
    FromMostMajor,
    FromMostMinor,
    /// Binary search over the anchors. Gives the same slot as the linear
    /// walks for a judge who is consistent with the anchor order.
    Bisect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Active,
    Placed,
}

/// Single-owner state machine for one placement walk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlacementSession {
    pub item_id: String,
    pub anchors: AnchorSet,
    pub order: WalkOrder,
    /// Steps taken along the walk for linear orders; the anchor index under
    /// comparison for bisection.
    pub cursor: usize,
    pub judgments: Vec<Judgment>,
    pub state: SessionState,
    /// Item is itself one of the anchors.
    pub self_comparison: bool,
    slot: Option<usize>,
    lo: usize,
    hi: usize,
}

/// Opens a placement walk for `item_id`.
pub fn start_placement(
    item_id: impl Into<String>,
    anchors: &AnchorSet,
    order: WalkOrder,
) -> Result<PlacementSession, ScaleError> {
    if anchors.is_empty() {
        return Err(ScaleError::EmptyAnchors);
    }
    let item_id = item_id.into();
    let k = anchors.len();
    let self_comparison = anchors.anchors.iter().any(|a| *a == item_id);
    let mut session = PlacementSession {
        item_id,
        anchors: anchors.clone(),
        order,
        cursor: 0,
        judgments: Vec::new(),
        state: SessionState::Active,
        self_comparison,
        slot: None,
        lo: 0,
        hi: k,
    };
    if order == WalkOrder::Bisect {
        session.cursor = k / 2;
    }
    Ok(session)
}

impl PlacementSession {
    pub fn anchor_count(&self) -> usize {
        self.anchors.len()
    }

    /// Index (most minor = 0) of the anchor the item is currently compared to.
    pub fn current_anchor_index(&self) -> Option<usize> {
        if self.state == SessionState::Placed {
            return None;
        }
        let k = self.anchor_count();
        Some(match self.order {
            WalkOrder::FromMostMajor => k - 1 - self.cursor,
            WalkOrder::FromMostMinor | WalkOrder::Bisect => self.cursor,
        })
    }

    pub fn current_anchor(&self) -> Option<&str> {
        self.current_anchor_index().map(|i| self.anchors.anchors[i].as_str())
    }

    /// Number of anchors the item exceeds, once placed.
    pub fn slot(&self) -> Option<usize> {
        self.slot
    }

    pub fn rating(&self) -> Option<u8> {
        self.slot.map(|s| clamp_rating(s))
    }

    pub fn is_placed(&self) -> bool {
        self.state == SessionState::Placed
    }

    fn place(&mut self, slot: usize) {
        self.slot = Some(slot);
        self.state = SessionState::Placed;
    }

    /// Records one judgment and advances the walk.
    pub fn step(&mut self, judgment: Judgment) -> Result<(), ScaleError> {
        if self.is_placed() {
            return Err(ScaleError::AlreadyPlaced(self.item_id.clone()));
        }
        let k = self.anchor_count();
        self.judgments.push(judgment);
        match self.order {
            WalkOrder::FromMostMajor => match judgment {
                Judgment::ItemLessMinor => self.place(k - self.cursor),
                Judgment::ItemMoreMinor => {
                    self.cursor += 1;
                    if self.cursor == k {
                        self.place(0);
                    }
                }
            },
            WalkOrder::FromMostMinor => match judgment {
                Judgment::ItemMoreMinor => self.place(self.cursor),
                Judgment::ItemLessMinor => {
                    self.cursor += 1;
                    if self.cursor == k {
                        self.place(k);
                    }
                }
            },
            WalkOrder::Bisect => {
                let mid = self.cursor;
                match judgment {
                    Judgment::ItemLessMinor => self.lo = mid + 1,
                    Judgment::ItemMoreMinor => self.hi = mid,
                }
                if self.lo == self.hi {
                    self.place(self.lo);
                } else {
                    self.cursor = (self.lo + self.hi) / 2;
                }
            }
        }
        Ok(())
    }
}

/// Consumes the [`PlacementSession`] state machine by value.
pub fn step_placement(mut session: PlacementSession, judgment: Judgment) -> Result<PlacementSession, ScaleError> {
    session.step(judgment)?;
    Ok(session)
}

/// Replays a complete walk and returns the placement slot.
///
/// Fails if a judgment follows the terminal state or the walk stops short.
pub fn replay_walk(anchors: &AnchorSet, order: WalkOrder, walk: &[Judgment]) -> Result<usize, ScaleError> {
    let mut session = start_placement("", anchors, order)?;
    for &j in walk {
        session.step(j)?;
    }
    session.slot().ok_or(ScaleError::IncompleteWalk(walk.len()))
}

fn clamp_rating(slot: usize) -> u8 {
    slot.clamp(MIN_RATING as usize, MAX_RATING as usize) as u8
}

/// Maps a placement slot on a scale of `anchor_count` anchors to a rating.
pub fn rating_from_placement(slot: usize, anchor_count: usize) -> Result<u8, ScaleError> {
    if slot > anchor_count {
        return Err(ScaleError::SlotOutOfRange { slot, anchors: anchor_count });
    }
    Ok(clamp_rating(slot))
}

/// One completed placement, persisted as a JSON line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub rater: String,
    pub item: String,
    pub rating: u8,
    pub slot: usize,
    pub walk: Vec<Judgment>,
    pub ts: i64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub self_comparison: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
}

impl RatingRecord {
    /// Builds the record from a placed session.
    pub fn from_session(session: &PlacementSession, rater: impl Into<String>, ts: i64) -> Option<Self> {
        let slot = session.slot()?;
        Some(Self {
            rater: rater.into(),
            item: session.item_id.clone(),
            rating: clamp_rating(slot),
            slot,
            walk: session.judgments.clone(),
            ts,
            self_comparison: session.self_comparison,
            task_id: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRatingSummary {
    pub item_id: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and sample standard deviation per item, sorted by item id.
pub fn aggregate_ratings(records: &[RatingRecord]) -> Vec<ItemRatingSummary> {
    let mut by_item: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records {
        by_item.entry(r.item.as_str()).or_default().push(f64::from(r.rating));
    }
    by_item
        .into_iter()
        .map(|(item, values)| {
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            ItemRatingSummary { item_id: item.to_string(), mean, std, n }
        })
        .collect()
}

/// CSV with header `item_id,mean,std,n`.
pub fn write_summaries_csv<W: Write>(summaries: &[ItemRatingSummary], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for s in summaries {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summaries_csv<R: std::io::Read>(input: R) -> Result<Vec<ItemRatingSummary>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}
