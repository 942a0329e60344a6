//! Weak supervision: rectangles `Q_j` on which ownership is pinned to
//! `p_i = delta_ij`.
//!
//! The serialized form is shared by the CLI and the HTTP service:
//! `{"patches":[{"channel":1,"x":0,"y":0,"w":8,"h":8}, ...]}` with 1-based
//! channels and the origin at the top-left pixel.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SupervisionError {
    #[error("patch out of bounds: patch {index} ({x},{y},{w}x{h}) exceeds {width}x{height} image")]
    OutOfBounds {
        index: usize,
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },
    #[error("patches not disjoint: patch {first} (channel {first_channel}) overlaps patch {second} (channel {second_channel})")]
    NotDisjoint {
        first: usize,
        second: usize,
        first_channel: usize,
        second_channel: usize,
    },
    #[error("empty patch: patch {index} has zero area")]
    EmptyPatch { index: usize },
    #[error("patch channel out of range: patch {index} has channel {channel}, expected 1..={k}")]
    ChannelOutOfRange {
        index: usize,
        channel: usize,
        k: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    /// 1-based channel label.
    pub channel: usize,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Patch {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    fn overlaps(&self, other: &Patch) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.y..self.y + self.h).flat_map(move |y| (self.x..self.x + self.w).map(move |x| (x, y)))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Supervision {
    pub patches: Vec<Patch>,
}

/// Result of a successful validation: pinned pixel count per channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisionReport {
    pub areas: BTreeMap<usize, usize>,
}

impl Supervision {
    pub fn new(patches: Vec<Patch>) -> Self {
        Self { patches }
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Geometry checks that do not depend on `K`: every patch has positive
    /// area, lies inside the image, and patches of different channels do not
    /// overlap.
    pub fn validate(
        &self,
        width: usize,
        height: usize,
    ) -> Result<SupervisionReport, SupervisionError> {
        for (index, p) in self.patches.iter().enumerate() {
            if p.channel == 0 {
                return Err(SupervisionError::ChannelOutOfRange {
                    index,
                    channel: 0,
                    k: usize::MAX,
                });
            }
            if p.area() == 0 {
                return Err(SupervisionError::EmptyPatch { index });
            }
            if p.x + p.w > width || p.y + p.h > height {
                return Err(SupervisionError::OutOfBounds {
                    index,
                    x: p.x,
                    y: p.y,
                    w: p.w,
                    h: p.h,
                    width,
                    height,
                });
            }
        }
        for (i, a) in self.patches.iter().enumerate() {
            for (j, b) in self.patches.iter().enumerate().skip(i + 1) {
                if a.channel != b.channel && a.overlaps(b) {
                    return Err(SupervisionError::NotDisjoint {
                        first: i,
                        second: j,
                        first_channel: a.channel,
                        second_channel: b.channel,
                    });
                }
            }
        }
        Ok(SupervisionReport {
            areas: self.channel_areas(width),
        })
    }

    /// [`validate`](Self::validate) plus the channel range check for `k`.
    pub fn validate_for(
        &self,
        width: usize,
        height: usize,
        k: usize,
    ) -> Result<SupervisionReport, SupervisionError> {
        let report = self.validate(width, height)?;
        if let Some((index, p)) = self.patches.iter().enumerate().find(|(_, p)| p.channel > k) {
            return Err(SupervisionError::ChannelOutOfRange {
                index,
                channel: p.channel,
                k,
            });
        }
        Ok(report)
    }

    // Same-channel overlaps are counted once.
    fn channel_areas(&self, width: usize) -> BTreeMap<usize, usize> {
        let mut seen = std::collections::HashSet::new();
        let mut areas = BTreeMap::new();
        for p in &self.patches {
            let entry = areas.entry(p.channel).or_insert(0);
            for (x, y) in p.pixels() {
                if seen.insert(y * width + x) {
                    *entry += 1;
                }
            }
        }
        areas
    }

    /// Per-pixel pinned channel (0-based), assuming the supervision has been
    /// validated for this grid.
    pub fn mask(&self, width: usize, height: usize) -> SupervisionMask {
        let mut owner = vec![None; width * height];
        for p in &self.patches {
            for (x, y) in p.pixels() {
                owner[y * width + x] = Some(p.channel - 1);
            }
        }
        SupervisionMask { owner }
    }

    /// Channels (1-based) that have at least one patch.
    pub fn supervised_channels(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.patches.iter().map(|p| p.channel).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Relabels channels: a patch on channel `c` moves to the channel `c'`
    /// with `sigma[c' - 1] == c - 1`, matching [`Stack::permute`](crate::Stack::permute).
    pub fn permute(&self, sigma: &[usize]) -> Supervision {
        let mut inverse = vec![0; sigma.len()];
        for (i, &s) in sigma.iter().enumerate() {
            inverse[s] = i;
        }
        Supervision {
            patches: self
                .patches
                .iter()
                .map(|p| Patch {
                    channel: inverse[p.channel - 1] + 1,
                    ..*p
                })
                .collect(),
        }
    }
}

/// Dense per-pixel form of a validated [`Supervision`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupervisionMask {
    owner: Vec<Option<usize>>,
}

impl SupervisionMask {
    pub fn none(pixels: usize) -> Self {
        Self {
            owner: vec![None; pixels],
        }
    }

    #[inline]
    pub fn owner(&self, idx: usize) -> Option<usize> {
        self.owner[idx]
    }

    #[inline]
    pub fn is_pinned(&self, idx: usize) -> bool {
        self.owner[idx].is_some()
    }

    pub fn pinned_count(&self) -> usize {
        self.owner.iter().filter(|o| o.is_some()).count()
    }

    pub fn len(&self) -> usize {
        self.owner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owner.is_empty()
    }

    pub fn pinned(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.owner
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.map(|c| (i, c)))
    }
}
