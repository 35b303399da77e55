//! Deterministic x86-64 decoding facade.
//!
//! Everything above this module sees instructions as plain data: an address,
//! a length, Intel-syntax text, a coarse control-flow kind and the constants
//! that might be code references. The underlying decoder is `iced-x86`.

use std::cell::RefCell;
use std::collections::{BTreeSet, VecDeque};

use iced_x86::{
    Code, Decoder, DecoderOptions, FlowControl, Formatter, IntelFormatter, MemorySizeOptions,
    Mnemonic, OpKind,
};
use serde::Serialize;

/// Longest legal x86 instruction, in bytes.
pub const MAX_INSTRUCTION_LEN: usize = 15;

/// Text emitted for an undecodable byte.
pub const BAD_TEXT: &str = "(bad)";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("offset {offset} is outside a {len}-byte buffer")]
    OffsetOutOfRange { offset: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstrKind {
    Sequential,
    ConditionalBranch,
    UnconditionalBranch,
    Call,
    Return,
    Halt,
    InvalidEncoding,
}

impl InstrKind {
    /// Kinds that end a basic block. Calls fall through and stay inside the block.
    pub fn ends_block(self) -> bool {
        matches!(
            self,
            InstrKind::ConditionalBranch
                | InstrKind::UnconditionalBranch
                | InstrKind::Return
                | InstrKind::Halt
                | InstrKind::InvalidEncoding
        )
    }

    /// Kinds whose end address is treated as a new disassembly candidate.
    pub fn is_branch(self) -> bool {
        matches!(
            self,
            InstrKind::ConditionalBranch
                | InstrKind::UnconditionalBranch
                | InstrKind::Call
                | InstrKind::Return
                | InstrKind::Halt
        )
    }
}

/// One decoded instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Instruction {
    pub address: u64,
    pub length: u8,
    pub text: String,
    pub kind: InstrKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub branch_target: Option<u64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub immediates: Vec<u64>,
    #[serde(skip)]
    mnemonic_len: usize,
}

impl Instruction {
    pub fn end(&self) -> u64 {
        self.address + u64::from(self.length)
    }

    pub fn is_invalid(&self) -> bool {
        self.kind == InstrKind::InvalidEncoding
    }

    pub fn mnemonic(&self) -> &str {
        &self.text[..self.mnemonic_len]
    }

    /// Operand text, empty for operand-less instructions.
    pub fn operands(&self) -> &str {
        self.text[self.mnemonic_len..].trim_start()
    }

    /// True if `addr` lies strictly inside this instruction's bytes.
    pub fn contains_interior(&self, addr: u64) -> bool {
        addr > self.address && addr < self.end()
    }

    pub fn overlaps(&self, start: u64, end: u64) -> bool {
        self.address < end && start < self.end()
    }

    fn bad(address: u64) -> Self {
        Instruction {
            address,
            length: 1,
            text: BAD_TEXT.to_string(),
            kind: InstrKind::InvalidEncoding,
            branch_target: None,
            immediates: Vec::new(),
            mnemonic_len: BAD_TEXT.len(),
        }
    }
}

thread_local! {
    static FORMATTER: RefCell<IntelFormatter> = RefCell::new(make_formatter());
}

fn make_formatter() -> IntelFormatter {
    let mut f = IntelFormatter::new();
    let o = f.options_mut();
    o.set_hex_prefix("0x");
    o.set_hex_suffix("");
    o.set_uppercase_hex(false);
    o.set_show_branch_size(false);
    o.set_leading_zeros(false);
    o.set_branch_leading_zeros(false);
    o.set_space_after_operand_separator(true);
    o.set_small_hex_numbers_in_decimal(false);
    o.set_rip_relative_addresses(false);
    o.set_memory_size_options(MemorySizeOptions::Always);
    f
}

fn is_movabs(code: Code) -> bool {
    matches!(
        code,
        Code::Mov_r64_imm64
            | Code::Mov_AL_moffs8
            | Code::Mov_AX_moffs16
            | Code::Mov_EAX_moffs32
            | Code::Mov_RAX_moffs64
            | Code::Mov_moffs8_AL
            | Code::Mov_moffs16_AX
            | Code::Mov_moffs32_EAX
            | Code::Mov_moffs64_RAX
    )
}

fn classify_kind(ins: &iced_x86::Instruction) -> InstrKind {
    if ins.mnemonic() == Mnemonic::Hlt {
        return InstrKind::Halt;
    }
    match ins.flow_control() {
        FlowControl::Next | FlowControl::Interrupt | FlowControl::XbeginXabortXend => {
            InstrKind::Sequential
        }
        FlowControl::ConditionalBranch => InstrKind::ConditionalBranch,
        FlowControl::UnconditionalBranch | FlowControl::IndirectBranch => {
            InstrKind::UnconditionalBranch
        }
        FlowControl::Call | FlowControl::IndirectCall => {
            if ins.mnemonic() == Mnemonic::Call {
                InstrKind::Call
            } else {
                // syscall, sysenter and friends return to the next instruction
                InstrKind::Sequential
            }
        }
        FlowControl::Return => InstrKind::Return,
        FlowControl::Exception => InstrKind::Halt,
    }
}

fn convert(ins: &iced_x86::Instruction) -> Instruction {
    let address = ins.ip();
    if ins.is_invalid() {
        return Instruction::bad(address);
    }
    let kind = classify_kind(ins);
    let mut text = String::new();
    let mut operands = String::new();
    FORMATTER.with(|f| {
        let mut f = f.borrow_mut();
        f.format_mnemonic(ins, &mut text);
        f.format_all_operands(ins, &mut operands);
    });
    if is_movabs(ins.code()) {
        text = text.replacen("mov", "movabs", 1);
    }
    let mnemonic_len = text.len();
    if !operands.is_empty() {
        text.push(' ');
        text.push_str(&operands);
    }

    let branch_target = match kind {
        InstrKind::ConditionalBranch | InstrKind::UnconditionalBranch | InstrKind::Call => {
            match ins.op0_kind() {
                OpKind::NearBranch16 | OpKind::NearBranch32 | OpKind::NearBranch64 => {
                    Some(ins.near_branch_target())
                }
                _ => None,
            }
        }
        _ => None,
    };

    let mut immediates = Vec::new();
    for op in 0..ins.op_count() {
        match ins.op_kind(op) {
            OpKind::Immediate16 | OpKind::Immediate32 | OpKind::Immediate64 => {
                immediates.push(ins.immediate(op));
            }
            OpKind::Immediate32to64 => immediates.push(ins.immediate32to64() as u64),
            _ => {}
        }
    }

    Instruction {
        address,
        length: ins.len() as u8,
        text,
        kind,
        branch_target,
        immediates,
        mnemonic_len,
    }
}

/// Decodes the instruction at `bytes[offset]`, where `bytes[0]` lives at `base`.
///
/// Undecodable bytes (including encodings truncated by the end of the buffer)
/// come back as a one-byte `(bad)` instruction.
pub fn decode_at(bytes: &[u8], base: u64, offset: usize) -> Result<Instruction, DecodeError> {
    if offset >= bytes.len() {
        return Err(DecodeError::OffsetOutOfRange {
            offset,
            len: bytes.len(),
        });
    }
    let address = base + offset as u64;
    let mut decoder = Decoder::with_ip(64, &bytes[offset..], address, DecoderOptions::NONE);
    let ins = decoder.decode();
    Ok(convert(&ins))
}

/// A byte buffer mapped at a virtual address.
#[derive(Debug, Clone, Copy)]
pub struct CodeView<'a> {
    pub bytes: &'a [u8],
    pub base: u64,
}

impl<'a> CodeView<'a> {
    pub fn new(bytes: &'a [u8], base: u64) -> Self {
        CodeView { bytes, base }
    }

    pub fn end(&self) -> u64 {
        self.base + self.bytes.len() as u64
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.end()
    }

    pub fn byte(&self, addr: u64) -> Option<u8> {
        if self.contains(addr) {
            Some(self.bytes[(addr - self.base) as usize])
        } else {
            None
        }
    }

    /// Decodes at a virtual address; `None` outside the buffer.
    pub fn decode(&self, addr: u64) -> Option<Instruction> {
        if !self.contains(addr) {
            return None;
        }
        decode_at(self.bytes, self.base, (addr - self.base) as usize).ok()
    }

    /// All valid encodings starting in `[max(floor, end-15), end)` that end exactly at `end`.
    pub fn instructions_ending_at(
        &self,
        end: u64,
        floor: u64,
        excluded: &BTreeSet<u64>,
    ) -> Vec<Instruction> {
        let lo = end
            .saturating_sub(MAX_INSTRUCTION_LEN as u64)
            .max(floor)
            .max(self.base);
        let mut out = Vec::new();
        for start in lo..end.min(self.end()) {
            if excluded.contains(&start) {
                continue;
            }
            if let Some(ins) = self.decode(start) {
                if !ins.is_invalid() && ins.end() == end {
                    out.push(ins);
                }
            }
        }
        out
    }

    /// Breadth-first walk of the reverse-disassembly tree rooted at `root_end`.
    ///
    /// Children of a node are the instructions ending at that node's start.
    /// Each level is visited in ascending address order; at most `limit`
    /// instructions are returned. Nothing below `floor` is considered.
    pub fn reverse_tree_bfs(
        &self,
        root_end: u64,
        floor: u64,
        excluded: &BTreeSet<u64>,
        limit: usize,
    ) -> Vec<Instruction> {
        let mut out = Vec::new();
        let mut level: VecDeque<u64> = VecDeque::from([root_end]);
        while !level.is_empty() && out.len() < limit {
            let mut next = Vec::new();
            for end in level.drain(..) {
                next.extend(self.instructions_ending_at(end, floor, excluded));
            }
            // An instruction's start fixes its end, so no address can repeat.
            next.sort_by_key(|i| i.address);
            for ins in next {
                if out.len() == limit {
                    break;
                }
                level.push_back(ins.address);
                out.push(ins);
            }
        }
        out
    }
}

/// Every instruction that ends exactly at `end`, sorted by start address.
///
/// Candidates starting at an address in `excluded` and undecodable bytes are
/// skipped.
pub fn reverse_decode(
    bytes: &[u8],
    base: u64,
    end: u64,
    excluded: &BTreeSet<u64>,
) -> Vec<Instruction> {
    CodeView::new(bytes, base).instructions_ending_at(end, base, excluded)
}

/// See [`CodeView::reverse_tree_bfs`].
pub fn reverse_tree_bfs(
    bytes: &[u8],
    base: u64,
    root_end: u64,
    excluded: &BTreeSet<u64>,
    limit: usize,
) -> Vec<Instruction> {
    CodeView::new(bytes, base).reverse_tree_bfs(root_end, base, excluded, limit)
}
