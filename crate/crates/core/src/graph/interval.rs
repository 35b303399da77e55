use serde::{Deserialize, Serialize};

/// Half-open byte range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interval {
    pub start: u64,
    pub end: u64,
}

impl Interval {
    pub fn new(start: u64, end: u64) -> Self {
        debug_assert!(start < end, "empty interval {start:#x}..{end:#x}");
        Interval { start, end }
    }

    /// Touching intervals (`a.end == b.start`) do not overlap.
    pub fn overlaps(&self, other: &Interval) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

/// Groups items whose intervals overlap, transitively.
///
/// Items are stably sorted by start; an item joins the current group iff it
/// starts before the largest end seen in that group. Groups come back in
/// ascending address order.
pub fn group_by_overlap<T, F>(mut items: Vec<T>, interval: F) -> Vec<Vec<T>>
where
    F: Fn(&T) -> Interval,
{
    items.sort_by_key(|i| interval(i).start);
    let mut groups: Vec<Vec<T>> = Vec::new();
    let mut reach = 0u64;
    for item in items {
        let iv = interval(&item);
        match groups.last_mut() {
            Some(group) if iv.start < reach => {
                group.push(item);
                reach = reach.max(iv.end);
            }
            _ => {
                reach = iv.end;
                groups.push(vec![item]);
            }
        }
    }
    groups
}

pub fn group_overlapping_intervals(intervals: &[Interval]) -> Vec<Vec<Interval>> {
    group_by_overlap(intervals.to_vec(), |i| *i)
}
