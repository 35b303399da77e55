use serde::Serialize;

use super::verdict::{Verdict, VerdictStore};
use crate::graph::DisasmGraph;
use crate::initial::CodeRegion;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionLabel {
    Invalid,
    Unidentified,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LabeledRange {
    pub start: u64,
    pub end: u64,
    pub label: RegionLabel,
}

/// Partition of the code region into valid, invalid and unidentified ranges.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RegionMap {
    pub ranges: Vec<LabeledRange>,
}

impl RegionMap {
    pub fn label_at(&self, addr: u64) -> Option<RegionLabel> {
        let i = self.ranges.partition_point(|r| r.end <= addr);
        self.ranges
            .get(i)
            .filter(|r| r.start <= addr)
            .map(|r| r.label)
    }

    /// Invalid ranges with a valid range directly on both sides.
    pub fn repairable(&self) -> Vec<LabeledRange> {
        self.ranges
            .windows(3)
            .filter(|w| {
                w[0].label == RegionLabel::Valid
                    && w[1].label == RegionLabel::Invalid
                    && w[2].label == RegionLabel::Valid
            })
            .map(|w| w[1])
            .collect()
    }
}

/// Labels every byte of `region`.
///
/// A byte is valid if a valid instruction covers it, otherwise unidentified
/// if a pending one does, otherwise invalid if an invalid one does. Bytes
/// that no instruction covers are unidentified when they touch an
/// unidentified byte and invalid otherwise.
pub fn rebuild_regions(
    region: &CodeRegion,
    graph: &DisasmGraph,
    verdicts: &VerdictStore,
) -> RegionMap {
    let n = region.bytes.len();
    let mut labels: Vec<Option<RegionLabel>> = vec![None; n];
    for ins in graph.instructions() {
        let label = match verdicts.verdict(ins.address) {
            Some(Verdict::Valid) => RegionLabel::Valid,
            Some(Verdict::Invalid) => RegionLabel::Invalid,
            None => RegionLabel::Unidentified,
        };
        let lo = ins.address.max(region.base);
        let hi = ins.end().min(region.end());
        for a in lo..hi {
            let slot = &mut labels[(a - region.base) as usize];
            *slot = Some(slot.map_or(label, |l| l.max(label)));
        }
    }

    let mut i = 0;
    while i < n {
        if labels[i].is_some() {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < n && labels[j].is_none() {
            j += 1;
        }
        let touches_unidentified = (i > 0 && labels[i - 1] == Some(RegionLabel::Unidentified))
            || (j < n && labels[j] == Some(RegionLabel::Unidentified));
        let fill = if touches_unidentified {
            RegionLabel::Unidentified
        } else {
            RegionLabel::Invalid
        };
        labels[i..j].iter_mut().for_each(|l| *l = Some(fill));
        i = j;
    }

    let mut ranges: Vec<LabeledRange> = Vec::new();
    for (k, l) in labels.into_iter().enumerate() {
        let label = l.expect("every byte labelled");
        let addr = region.base + k as u64;
        match ranges.last_mut() {
            Some(r) if r.label == label => r.end = addr + 1,
            _ => ranges.push(LabeledRange {
                start: addr,
                end: addr + 1,
                label,
            }),
        }
    }
    RegionMap { ranges }
}
