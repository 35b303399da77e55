//! Text form of (split) blocks, used both as classifier input and as the
//! final listing. The grammar is described in `docs/snippet-format.md`.
//!
//! ```text
//! 0x401000:
//! cmp eax, eax
//! je 0x401007
//! ; 0x401004
//!
//! <<<<<<<
//! 0x401004:
//! ...
//! ; 0x401011
//! =======
//! 0x401007:
//! ...
//! ; 0x401011
//! >>>>>>>
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::Serialize;

use crate::graph::{group_by_overlap, Block, Interval};

pub const CONFLICT_OPEN: &str = "<<<<<<<";
pub const CONFLICT_SEPARATOR: &str = "=======";
pub const CONFLICT_CLOSE: &str = ">>>>>>>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Annotation {
    Valid,
    Invalid,
}

impl Annotation {
    pub fn comment(self) -> &'static str {
        match self {
            Annotation::Valid => "; valid",
            Annotation::Invalid => "; invalid",
        }
    }
}

/// Byte range of one queried instruction inside [`Snippet::text`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct WordSpan {
    pub start: usize,
    pub end: usize,
    pub address: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Snippet {
    pub text: String,
    pub word_spans: Vec<WordSpan>,
}

impl Snippet {
    pub fn word(&self, i: usize) -> &str {
        let s = &self.word_spans[i];
        &self.text[s.start..s.end]
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("blocks are not sorted by start address at {0:#x}")]
    Unsorted(u64),
}

pub fn render_gap_byte(_addr: u64, value: u8) -> String {
    format!("db 0x{value:02X}")
}

pub fn label_line(addr: u64) -> String {
    format!("{addr:#x}:")
}

pub fn end_comment(addr: u64) -> String {
    format!("; {addr:#x}")
}

/// Something that occupies bytes in a rendered listing.
pub(crate) enum Item<'a> {
    Block(&'a Block),
    Gap { addr: u64, value: u8 },
}

impl Item<'_> {
    pub(crate) fn interval(&self) -> Interval {
        match self {
            Item::Block(b) => b.interval(),
            Item::Gap { addr, .. } => Interval::new(*addr, addr + 1),
        }
    }
}

struct Writer<'r> {
    text: String,
    spans: Vec<WordSpan>,
    refs: &'r BTreeSet<u64>,
    annotations: &'r BTreeMap<u64, Annotation>,
    queried: &'r BTreeSet<u64>,
}

impl Writer<'_> {
    fn line(&mut self, s: &str) {
        self.text.push_str(s);
        self.text.push('\n');
    }

    fn instructions(&mut self, block: &Block, first: u64) {
        for ins in block.instructions() {
            if ins.address != first && self.refs.contains(&ins.address) {
                self.line(&label_line(ins.address));
            }
            let start = self.text.len();
            self.text.push_str(&ins.text);
            if self.queried.contains(&ins.address) {
                self.spans.push(WordSpan {
                    start,
                    end: self.text.len(),
                    address: ins.address,
                });
            }
            if let Some(a) = self.annotations.get(&ins.address) {
                let _ = write!(self.text, " {}", a.comment());
            }
            self.text.push('\n');
        }
    }

    fn region(&mut self, items: &[&Item<'_>]) {
        let (Some(first), Some(last)) = (items.first(), items.last()) else {
            return;
        };
        let start = first.interval().start;
        self.line(&label_line(start));
        for item in items {
            match item {
                Item::Block(b) => self.instructions(b, start),
                Item::Gap { addr, value } => {
                    if *addr != start && self.refs.contains(addr) {
                        self.line(&label_line(*addr));
                    }
                    self.line(&render_gap_byte(*addr, *value));
                }
            }
        }
        self.line(&end_comment(last.interval().end));
    }

    fn conflict(&mut self, blocks: &[&Block]) {
        self.line(CONFLICT_OPEN);
        for (i, b) in blocks.iter().enumerate() {
            if i > 0 {
                self.line(CONFLICT_SEPARATOR);
            }
            self.line(&label_line(b.start()));
            self.instructions(b, b.start());
            self.line(&end_comment(b.end()));
        }
        self.line(CONFLICT_CLOSE);
    }
}

/// Renders blocks sorted by start address.
///
/// Runs of adjacent, non-overlapping blocks form one region with a start
/// label and an end comment. Transitively overlapping blocks are wrapped in
/// conflict markers, one alternative per block. `refs` adds labels for
/// referenced addresses inside a region, `annotations` appends validity
/// comments, and every address in `queried` gets a word span.
pub fn render_blocks(
    blocks: &[&Block],
    refs: &BTreeSet<u64>,
    annotations: &BTreeMap<u64, Annotation>,
    queried: &BTreeSet<u64>,
) -> Result<Snippet, RenderError> {
    for pair in blocks.windows(2) {
        if pair[1].start() <= pair[0].start() {
            return Err(RenderError::Unsorted(pair[1].start()));
        }
    }
    let items: Vec<Item<'_>> = blocks.iter().map(|b| Item::Block(b)).collect();
    Ok(render_items(&items, refs, annotations, queried))
}

pub(crate) fn render_items(
    items: &[Item<'_>],
    refs: &BTreeSet<u64>,
    annotations: &BTreeMap<u64, Annotation>,
    queried: &BTreeSet<u64>,
) -> Snippet {
    let mut w = Writer {
        text: String::new(),
        spans: Vec::new(),
        refs,
        annotations,
        queried,
    };

    let groups = group_by_overlap(items.iter().collect(), |i: &&Item<'_>| i.interval());

    let mut run: Vec<&Item<'_>> = Vec::new();
    let mut first_unit = true;
    let mut separate = |w: &mut Writer<'_>| {
        if !first_unit {
            w.text.push('\n');
        }
        first_unit = false;
    };
    for group in groups {
        if group.len() == 1 {
            let item = group[0];
            let continues = run
                .last()
                .is_some_and(|prev| prev.interval().end == item.interval().start);
            if !continues && !run.is_empty() {
                separate(&mut w);
                w.region(&run);
                run.clear();
            }
            run.push(item);
        } else {
            if !run.is_empty() {
                separate(&mut w);
                w.region(&run);
                run.clear();
            }
            separate(&mut w);
            let blocks: Vec<&Block> = group
                .iter()
                .filter_map(|i| match i {
                    Item::Block(b) => Some(*b),
                    Item::Gap { .. } => None,
                })
                .collect();
            w.conflict(&blocks);
        }
    }
    if !run.is_empty() {
        separate(&mut w);
        w.region(&run);
    }

    Snippet {
        text: w.text,
        word_spans: w.spans,
    }
}

/// Structure recovered from rendered text; used to check that labels and
/// markers round-trip.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct ParsedSnippet {
    pub labels: Vec<u64>,
    pub end_comments: Vec<u64>,
    pub conflict_groups: usize,
    pub alternatives: usize,
    pub instruction_lines: usize,
    pub gap_bytes: Vec<u8>,
    pub annotations: Vec<Option<Annotation>>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("line {line}: {reason}")]
pub struct ParseError {
    pub line: usize,
    pub reason: &'static str,
}

fn parse_hex(s: &str) -> Option<u64> {
    u64::from_str_radix(s.strip_prefix("0x")?, 16).ok()
}

/// Parses snippet text back into its structural elements.
pub fn parse_snippet(text: &str) -> Result<ParsedSnippet, ParseError> {
    let mut out = ParsedSnippet::default();
    let mut in_conflict = false;
    for (n, line) in text.lines().enumerate() {
        let err = |reason| ParseError {
            line: n + 1,
            reason,
        };
        if line.is_empty() {
            if in_conflict {
                return Err(err("blank line inside conflict group"));
            }
            continue;
        }
        match line {
            CONFLICT_OPEN => {
                if in_conflict {
                    return Err(err("nested conflict marker"));
                }
                in_conflict = true;
                out.conflict_groups += 1;
                out.alternatives += 1;
            }
            CONFLICT_SEPARATOR => {
                if !in_conflict {
                    return Err(err("separator outside conflict group"));
                }
                out.alternatives += 1;
            }
            CONFLICT_CLOSE => {
                if !in_conflict {
                    return Err(err("unbalanced close marker"));
                }
                in_conflict = false;
            }
            _ => {
                if let Some(addr) = line.strip_suffix(':').and_then(parse_hex) {
                    out.labels.push(addr);
                } else if let Some(addr) = line.strip_prefix("; ").and_then(parse_hex) {
                    out.end_comments.push(addr);
                } else if let Some(b) = line.strip_prefix("db 0x") {
                    let v = u8::from_str_radix(b, 16).map_err(|_| err("bad gap byte"))?;
                    out.gap_bytes.push(v);
                } else {
                    let ann = if line.ends_with(" ; valid") {
                        Some(Annotation::Valid)
                    } else if line.ends_with(" ; invalid") {
                        Some(Annotation::Invalid)
                    } else {
                        None
                    };
                    out.instruction_lines += 1;
                    out.annotations.push(ann);
                }
            }
        }
    }
    if in_conflict {
        return Err(ParseError {
            line: text.lines().count(),
            reason: "unterminated conflict group",
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::decode_at;

    fn block(bytes: &[u8], base: u64) -> Block {
        let mut v = Vec::new();
        let mut off = 0;
        while off < bytes.len() {
            let i = decode_at(bytes, base, off).unwrap();
            off += i.length as usize;
            v.push(i);
        }
        Block::new(v).unwrap()
    }

    fn none() -> (BTreeSet<u64>, BTreeMap<u64, Annotation>, BTreeSet<u64>) {
        (BTreeSet::new(), BTreeMap::new(), BTreeSet::new())
    }

    #[test]
    fn gap_bytes() {
        assert_eq!(render_gap_byte(0, 0x89), "db 0x89");
        assert_eq!(render_gap_byte(0, 0xa9), "db 0xA9");
        assert_eq!(render_gap_byte(0, 0x00), "db 0x00");
    }

    #[test]
    fn single_block() {
        let b = block(&[0x90, 0xc3], 0x1000);
        let (r, a, q) = none();
        let s = render_blocks(&[&b], &r, &a, &q).unwrap();
        assert_eq!(s.text, "0x1000:\nnop\nret\n; 0x1002\n");
        assert!(s.word_spans.is_empty());
    }

    #[test]
    fn annotated_query_span() {
        let b = block(&[0x90, 0xc3], 0x1000);
        let (r, mut a, mut q) = none();
        a.insert(0x1000, Annotation::Valid);
        q.insert(0x1000);
        let s = render_blocks(&[&b], &r, &a, &q).unwrap();
        assert_eq!(s.text, "0x1000:\nnop ; valid\nret\n; 0x1002\n");
        assert_eq!(s.word_spans.len(), 1);
        assert_eq!(s.word(0), "nop");
        assert_eq!(s.word_spans[0].address, 0x1000);
    }

    #[test]
    fn adjacent_blocks_share_a_region_and_gaps_split_them() {
        let a = block(&[0x90, 0x90], 0x10);
        let b = block(&[0x90], 0x12);
        let c = block(&[0xc3], 0x20);
        let (mut r, an, q) = none();
        r.insert(0x12);
        let s = render_blocks(&[&a, &b, &c], &r, &an, &q).unwrap();
        assert_eq!(
            s.text,
            "0x10:\nnop\nnop\n0x12:\nnop\n; 0x13\n\n0x20:\nret\n; 0x21\n"
        );
    }

    #[test]
    fn unsorted_is_rejected() {
        let a = block(&[0x90], 0x10);
        let b = block(&[0x90], 0x08);
        let (r, an, q) = none();
        assert_eq!(
            render_blocks(&[&a, &b], &r, &an, &q),
            Err(RenderError::Unsorted(0x08))
        );
    }

    #[test]
    fn conflict_markers_iff_overlap() {
        let bytes = [0xb8, 0x90, 0x90, 0x90, 0x90];
        let a = block(&bytes, 0x10);
        let b = block(&bytes[1..], 0x11);
        let (r, an, q) = none();
        let s = render_blocks(&[&a, &b], &r, &an, &q).unwrap();
        let p = parse_snippet(&s.text).unwrap();
        assert_eq!(p.conflict_groups, 1);
        assert_eq!(p.alternatives, 2);
        assert_eq!(p.labels, vec![0x10, 0x11]);

        let s = render_blocks(&[&a], &r, &an, &q).unwrap();
        assert_eq!(parse_snippet(&s.text).unwrap().conflict_groups, 0);
    }

    #[test]
    fn parser_rejects_unbalanced_markers() {
        assert!(parse_snippet("<<<<<<<\nnop\n").is_err());
        assert!(parse_snippet("=======\n").is_err());
        assert!(parse_snippet(">>>>>>>\n").is_err());
    }
}
