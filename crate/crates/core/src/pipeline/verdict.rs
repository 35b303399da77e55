use std::collections::BTreeMap;

use serde::Serialize;

use crate::classify::Stage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Valid,
    Invalid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VerdictEntry {
    pub verdict: Verdict,
    pub probability: f64,
    pub length: u8,
    pub stage: Stage,
}

/// Decisions per instruction address. Addresses without an entry are pending.
///
/// Entries are written once and survive the removal of their instruction
/// from the graph, so a rejected address is never offered again.
#[derive(Debug, Clone, Default)]
pub struct VerdictStore {
    entries: BTreeMap<u64, VerdictEntry>,
}

impl VerdictStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a verdict for a pending address. Returns false, leaving the
    /// store untouched, if the address was already decided.
    pub fn decide(&mut self, addr: u64, entry: VerdictEntry) -> bool {
        if self.entries.contains_key(&addr) {
            return false;
        }
        self.entries.insert(addr, entry);
        true
    }

    pub fn get(&self, addr: u64) -> Option<&VerdictEntry> {
        self.entries.get(&addr)
    }

    pub fn verdict(&self, addr: u64) -> Option<Verdict> {
        self.entries.get(&addr).map(|e| e.verdict)
    }

    pub fn is_valid(&self, addr: u64) -> bool {
        self.verdict(addr) == Some(Verdict::Valid)
    }

    pub fn is_invalid(&self, addr: u64) -> bool {
        self.verdict(addr) == Some(Verdict::Invalid)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &VerdictEntry)> + '_ {
        self.entries.iter().map(|(a, e)| (*a, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
