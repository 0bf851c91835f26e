use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Detector clicks on one channel, in integer picoseconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeTagStream {
    pub channel: u8,
    pub tags: Vec<u64>,
    pub duration: u64,
}

impl TimeTagStream {
    /// Builds a stream, checking ordering and that `duration` covers every tag.
    pub fn new(channel: u8, tags: Vec<u64>, duration: u64) -> Result<Self> {
        if !is_sorted(&tags) {
            return Err(Error::Precondition(format!("channel {channel} tags are not sorted")));
        }
        if let Some(&last) = tags.last() {
            if last > duration {
                return Err(Error::Precondition(format!(
                    "channel {channel}: duration {duration} ps ends before last tag {last} ps"
                )));
            }
        }
        Ok(Self { channel, tags, duration })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn is_sorted(&self) -> bool {
        is_sorted(&self.tags)
    }
}

pub(crate) fn is_sorted(tags: &[u64]) -> bool {
    tags.windows(2).all(|w| w[0] <= w[1])
}
