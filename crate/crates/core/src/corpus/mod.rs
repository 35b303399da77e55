//! Synthetic obfuscated code regions with exact ground truth, and the two
//! training-dataset formats derived from them.
//!
//! A sample is a chain of basic blocks connected by direct jumps, with runs
//! of junk bytes between consecutive blocks. Some junk runs are the target
//! of never-taken conditional jumps (`cmp eax, eax; jne junk`), and some
//! blocks are reachable only through an indirect jump or a return, so
//! recursive disassembly can only reach them by decoding through junk.

mod generate;
mod mntp;
mod supervised;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decode::Instruction;
use crate::initial::CodeRegion;

pub use generate::{generate_sample, CorpusParams};
pub use mntp::{emit_mntp_text, parse_mntp, MntpLine, MntpParseError};
pub use supervised::{
    emit_supervised_entries, entry_from_request, Recorder, SupervisedEntry, SupervisedRun,
    LABEL_IGNORE, LABEL_INVALID, LABEL_VALID,
};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub instruction_starts: BTreeSet<u64>,
    /// Half-open `[start, end)` byte ranges, ascending.
    pub junk_ranges: Vec<(u64, u64)>,
    pub first_after_junk: BTreeSet<u64>,
}

impl GroundTruth {
    /// The real instructions, decoded from `region`.
    pub fn instructions(&self, region: &CodeRegion) -> Vec<Instruction> {
        let view = region.view();
        self.instruction_starts
            .iter()
            .filter_map(|a| view.decode(*a))
            .collect()
    }

    /// `(address, length)` of every real instruction.
    pub fn spans(&self, region: &CodeRegion) -> Vec<(u64, u8)> {
        self.instructions(region)
            .iter()
            .map(|i| (i.address, i.length))
            .collect()
    }

    /// Re-scans `region` and checks that the truth describes it: real
    /// instructions and junk ranges tile the region with no gap or overlap,
    /// no real instruction is undecodable, and every junk range is followed
    /// by a recorded first-after-junk instruction.
    pub fn validate(&self, region: &CodeRegion) -> Result<(), String> {
        let view = region.view();
        let mut pieces: Vec<(u64, u64, bool)> = Vec::new();
        for a in &self.instruction_starts {
            let ins = view
                .decode(*a)
                .ok_or_else(|| format!("{a:#x} is outside the region"))?;
            if ins.is_invalid() {
                return Err(format!("{a:#x} does not decode"));
            }
            pieces.push((ins.address, ins.end(), true));
        }
        for (s, e) in &self.junk_ranges {
            if s >= e {
                return Err(format!("empty junk range at {s:#x}"));
            }
            pieces.push((*s, *e, false));
        }
        pieces.sort_unstable();
        let mut at = region.base;
        for (s, e, _) in &pieces {
            if *s != at {
                return Err(format!("tiling broken at {at:#x} (next piece at {s:#x})"));
            }
            at = *e;
        }
        if at != region.end() {
            return Err(format!(
                "tiling ends at {at:#x}, region ends at {:#x}",
                region.end()
            ));
        }
        for (_, e) in &self.junk_ranges {
            if *e != region.end() && !self.first_after_junk.contains(e) {
                return Err(format!(
                    "junk ending at {e:#x} has no first-after-junk entry"
                ));
            }
        }
        if let Some(a) = self
            .first_after_junk
            .iter()
            .find(|a| !self.instruction_starts.contains(a))
        {
            return Err(format!(
                "first-after-junk {a:#x} is not an instruction start"
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub region: CodeRegion,
    pub truth: GroundTruth,
}

/// The `.json` side of a sample on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub base: u64,
    #[serde(default)]
    pub entry_points: Vec<u64>,
    #[serde(default)]
    pub instruction_starts: Vec<u64>,
    #[serde(default)]
    pub junk_ranges: Vec<[u64; 2]>,
    #[serde(default)]
    pub first_after_junk: Vec<u64>,
}

impl SampleMeta {
    pub fn truth(&self) -> GroundTruth {
        GroundTruth {
            instruction_starts: self.instruction_starts.iter().copied().collect(),
            junk_ranges: self.junk_ranges.iter().map(|r| (r[0], r[1])).collect(),
            first_after_junk: self.first_after_junk.iter().copied().collect(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SampleIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Sample {
    pub fn meta(&self) -> SampleMeta {
        SampleMeta {
            base: self.region.base,
            entry_points: self.region.entry_points.clone(),
            instruction_starts: self.truth.instruction_starts.iter().copied().collect(),
            junk_ranges: self
                .truth
                .junk_ranges
                .iter()
                .map(|(s, e)| [*s, *e])
                .collect(),
            first_after_junk: self.truth.first_after_junk.iter().copied().collect(),
        }
    }

    /// Writes `<dir>/<name>.bin` and `<dir>/<name>.json`.
    pub fn save(&self, dir: &Path, name: &str) -> Result<(PathBuf, PathBuf), SampleIoError> {
        let bin = dir.join(format!("{name}.bin"));
        let json = dir.join(format!("{name}.json"));
        std::fs::write(&bin, &self.region.bytes).map_err(|source| SampleIoError::Io {
            path: bin.clone(),
            source,
        })?;
        let text = serde_json::to_string_pretty(&self.meta()).expect("meta serializes");
        std::fs::write(&json, text).map_err(|source| SampleIoError::Io {
            path: json.clone(),
            source,
        })?;
        Ok((bin, json))
    }

    pub fn load(bin: &Path, json: &Path) -> Result<Self, SampleIoError> {
        let bytes = std::fs::read(bin).map_err(|source| SampleIoError::Io {
            path: bin.to_path_buf(),
            source,
        })?;
        let meta = load_meta(json)?;
        Ok(Sample {
            region: CodeRegion::new(meta.base, bytes, meta.entry_points.clone()),
            truth: meta.truth(),
        })
    }
}

pub fn load_meta(json: &Path) -> Result<SampleMeta, SampleIoError> {
    let text = std::fs::read_to_string(json).map_err(|source| SampleIoError::Io {
        path: json.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| SampleIoError::Json {
        path: json.to_path_buf(),
        source,
    })
}
