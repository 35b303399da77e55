//! Line-oriented assembly text for masked next-token pretraining.
//!
//! ```text
//! .byte 0xc9 ; leave  ; invalid
//! jmp 0x29f3 ; valid
//! ; offset 1: add ch, bl ; invalid
//!
//! 0x29f3:
//! mov rsp, qword ptr [rbp-0x98] ; valid
//! ```

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::GroundTruth;
use crate::decode::Instruction;
use crate::initial::CodeRegion;

const VALID: &str = " ; valid";
const INVALID: &str = " ; invalid";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MntpLine {
    Blank,
    Label(u64),
    /// A byte that is not code, with what it decodes to.
    Byte {
        value: u8,
        text: String,
    },
    Instruction {
        text: String,
        valid: bool,
    },
    /// An alternative decode starting `offset` bytes into the previous instruction.
    Offset {
        offset: u8,
        text: String,
    },
}

impl fmt::Display for MntpLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MntpLine::Blank => Ok(()),
            MntpLine::Label(a) => write!(f, "{a:#x}:"),
            MntpLine::Byte { value, text } => write!(f, ".byte 0x{value:02x} ; {text}{INVALID}"),
            MntpLine::Instruction { text, valid } => {
                write!(f, "{text}{}", if *valid { VALID } else { INVALID })
            }
            MntpLine::Offset { offset, text } => write!(f, "; offset {offset}: {text}{INVALID}"),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct MntpParseError {
    pub line: usize,
    pub message: String,
}

/// Mnemonic and operands separated by one space, even when there are no operands.
fn line_text(ins: &Instruction) -> String {
    format!("{} {}", ins.mnemonic(), ins.operands())
}

/// Emits the pretraining text for a sample. Every non-code byte is decoded
/// as an invalid `.byte` line, every real instruction is a valid line, and
/// each multibyte instruction gets one alternative decode at a random
/// interior offset chosen from `seed`.
pub fn emit_mntp_text(region: &CodeRegion, truth: &GroundTruth, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let view = region.view();
    let junk: BTreeSet<u64> = truth.junk_ranges.iter().flat_map(|(s, e)| *s..*e).collect();

    // (address of the line, line, alternative decodes that follow it)
    let mut entries: Vec<(u64, MntpLine, Option<MntpLine>)> = Vec::new();
    let mut decoded: Vec<Instruction> = Vec::new();
    for ins in truth.instructions(region) {
        let offset = (ins.length > 1).then(|| rng.gen_range(1..ins.length));
        let alt = offset.and_then(|k| {
            view.decode(ins.address + u64::from(k)).map(|a| {
                let line = MntpLine::Offset {
                    offset: k,
                    text: line_text(&a),
                };
                decoded.push(a);
                line
            })
        });
        entries.push((
            ins.address,
            MntpLine::Instruction {
                text: line_text(&ins),
                valid: true,
            },
            alt,
        ));
        decoded.push(ins);
    }
    for a in &junk {
        let Some(ins) = view.decode(*a) else { continue };
        entries.push((
            *a,
            MntpLine::Byte {
                value: view.byte(*a).expect("junk lies in the region"),
                text: line_text(&ins),
            },
            None,
        ));
        decoded.push(ins);
    }
    entries.sort_by_key(|e| e.0);

    let referenced: BTreeSet<u64> = decoded
        .iter()
        .flat_map(|i| {
            i.branch_target
                .into_iter()
                .chain(i.immediates.iter().copied())
        })
        .collect();

    let mut out = String::new();
    for (k, (addr, line, alt)) in entries.into_iter().enumerate() {
        if referenced.contains(&addr) {
            if k > 0 {
                out.push('\n');
            }
            out.push_str(&MntpLine::Label(addr).to_string());
            out.push('\n');
        }
        out.push_str(&line.to_string());
        out.push('\n');
        if let Some(alt) = alt {
            out.push_str(&alt.to_string());
            out.push('\n');
        }
    }
    out
}

fn is_label(line: &str) -> Option<u64> {
    let hex = line.strip_prefix("0x")?.strip_suffix(':')?;
    if hex.is_empty() || !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
        return None;
    }
    u64::from_str_radix(hex, 16).ok()
}

/// Classifies every line of a pretraining document. Rendering the result
/// line by line gives back the input.
pub fn parse_mntp(text: &str) -> Result<Vec<MntpLine>, MntpParseError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let err = |message: &str| MntpParseError {
            line: n + 1,
            message: message.to_string(),
        };
        if line.is_empty() {
            out.push(MntpLine::Blank);
            continue;
        }
        if let Some(a) = is_label(line) {
            out.push(MntpLine::Label(a));
            continue;
        }
        if let Some(rest) = line.strip_prefix(".byte 0x") {
            let body = rest
                .strip_suffix(INVALID)
                .ok_or_else(|| err("byte line must be marked invalid"))?;
            let (hex, text) = body
                .split_once(" ; ")
                .ok_or_else(|| err("byte line without decode"))?;
            let value = u8::from_str_radix(hex, 16).map_err(|_| err("bad byte value"))?;
            out.push(MntpLine::Byte {
                value,
                text: text.to_string(),
            });
            continue;
        }
        if let Some(rest) = line.strip_prefix("; offset ") {
            let body = rest
                .strip_suffix(INVALID)
                .ok_or_else(|| err("offset comment must be marked invalid"))?;
            let (k, text) = body
                .split_once(": ")
                .ok_or_else(|| err("offset comment without decode"))?;
            let offset = k.parse().map_err(|_| err("bad offset"))?;
            out.push(MntpLine::Offset {
                offset,
                text: text.to_string(),
            });
            continue;
        }
        if let Some(text) = line.strip_suffix(VALID) {
            out.push(MntpLine::Instruction {
                text: text.to_string(),
                valid: true,
            });
        } else if let Some(text) = line.strip_suffix(INVALID) {
            out.push(MntpLine::Instruction {
                text: text.to_string(),
                valid: false,
            });
        } else {
            return Err(err("line has no validity tag"));
        }
    }
    Ok(out)
}
