use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::decode::Instruction;
use crate::graph::Block;
use crate::initial::CodeRegion;
use crate::render::{render_items, Item};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListedInstruction {
    pub address: u64,
    pub length: u8,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataByte {
    pub address: u64,
    pub value: u8,
}

/// The result of a run: valid instructions plus every byte none of them covers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalListing {
    pub instructions: Vec<ListedInstruction>,
    pub data_bytes: Vec<DataByte>,
    /// Pairs of valid instructions sharing bytes.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overlapping: Vec<[u64; 2]>,
}

impl FinalListing {
    pub fn build<'a>(
        region: &CodeRegion,
        valid: impl IntoIterator<Item = &'a Instruction>,
    ) -> Self {
        let mut instrs: Vec<&Instruction> = valid.into_iter().collect();
        instrs.sort_by_key(|i| i.address);
        instrs.dedup_by_key(|i| i.address);

        let mut covered = vec![false; region.bytes.len()];
        let mut overlapping = Vec::new();
        for (k, ins) in instrs.iter().enumerate() {
            for a in ins.address.max(region.base)..ins.end().min(region.end()) {
                covered[(a - region.base) as usize] = true;
            }
            for other in &instrs[k + 1..] {
                if other.address >= ins.end() {
                    break;
                }
                overlapping.push([ins.address, other.address]);
            }
        }
        FinalListing {
            instructions: instrs
                .iter()
                .map(|i| ListedInstruction {
                    address: i.address,
                    length: i.length,
                    text: i.text.clone(),
                })
                .collect(),
            data_bytes: covered
                .iter()
                .enumerate()
                .filter(|(_, c)| !**c)
                .map(|(k, _)| DataByte {
                    address: region.base + k as u64,
                    value: region.bytes[k],
                })
                .collect(),
            overlapping,
        }
    }

    pub fn addresses(&self) -> BTreeSet<u64> {
        self.instructions.iter().map(|i| i.address).collect()
    }

    /// `(address, length)` of every listed instruction.
    pub fn spans(&self) -> Vec<(u64, u8)> {
        self.instructions
            .iter()
            .map(|i| (i.address, i.length))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("listing serializes")
    }

    /// Text form: instructions in address order with `db` lines for data
    /// bytes, in the snippet grammar. Overlapping valid instructions end up
    /// in a conflict group.
    pub fn render_text(&self, region: &CodeRegion) -> String {
        let view = region.view();
        let decoded: Vec<Instruction> = self
            .instructions
            .iter()
            .filter_map(|i| view.decode(i.address))
            .collect();
        let mut refs = BTreeSet::new();
        for ins in &decoded {
            refs.extend(ins.branch_target);
            refs.extend(ins.immediates.iter().copied());
        }

        let mut blocks = Vec::new();
        let mut run: Vec<Instruction> = Vec::new();
        for ins in decoded {
            if run.last().is_some_and(|p| p.end() != ins.address) {
                blocks.push(Block::new(std::mem::take(&mut run)).expect("contiguous run"));
            }
            let stop = ins.kind.ends_block();
            run.push(ins);
            if stop {
                blocks.push(Block::new(std::mem::take(&mut run)).expect("contiguous run"));
            }
        }
        if !run.is_empty() {
            blocks.push(Block::new(run).expect("contiguous run"));
        }

        let mut items: Vec<Item<'_>> = blocks.iter().map(Item::Block).collect();
        items.extend(self.data_bytes.iter().map(|d| Item::Gap {
            addr: d.address,
            value: d.value,
        }));
        items.sort_by_key(|i| i.interval().start);
        render_items(&items, &refs, &BTreeMap::new(), &BTreeSet::new()).text
    }
}
