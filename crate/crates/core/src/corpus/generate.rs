use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GroundTruth, Sample};
use crate::initial::CodeRegion;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusParams {
    pub blocks: usize,
    /// Junk run lengths are drawn from `1..=junk_max`; 0 disables junk.
    pub junk_max: usize,
    /// Chance that a block carries a never-taken jump into the junk after it.
    pub bogus_prob: f64,
    /// Chance that a block is reachable only indirectly.
    pub hidden_prob: f64,
    pub base: u64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams {
            blocks: 50,
            junk_max: 15,
            bogus_prob: 0.25,
            hidden_prob: 0.2,
            base: 0x401000,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Target {
    Block(usize),
    /// The junk run after block `i`.
    Junk(usize),
}

#[derive(Debug, Clone)]
enum Op {
    Raw(Vec<u8>),
    Jmp(Target),
    Jcc(u8, Target),
    Call(Target),
    /// `mov r32, imm32` holding a block address.
    MovAddr(u8, Target),
}

impl Op {
    fn len(&self) -> usize {
        match self {
            Op::Raw(b) => b.len(),
            Op::Jmp(_) | Op::Call(_) | Op::MovAddr(..) => 5,
            Op::Jcc(..) => 6,
        }
    }
}

const REGS: [u8; 6] = [0, 1, 2, 3, 6, 7];

fn reg(rng: &mut ChaCha8Rng) -> u8 {
    *REGS.choose(rng).expect("non-empty")
}

fn small_imm(rng: &mut ChaCha8Rng) -> [u8; 4] {
    rng.gen_range(0u32..0x1000).to_le_bytes()
}

fn disp8(rng: &mut ChaCha8Rng) -> u8 {
    // [rbp-0x40] .. [rbp-0x4], dword aligned
    (0x100 - 4 * rng.gen_range(1u32..=16)) as u8
}

/// One ordinary instruction encoding.
fn body_instruction(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let r = reg(rng);
    let s = reg(rng);
    match rng.gen_range(0..16) {
        0 => [vec![0xb8 + r], small_imm(rng).to_vec()].concat(),
        1 => vec![0x48, 0x89, 0xc0 | (s << 3) | r],
        2 => vec![0x01, 0xc0 | (s << 3) | r],
        3 => vec![0x83, 0xe8 + r, rng.gen_range(1..0x40)],
        4 => vec![0x31, 0xc0 | (s << 3) | r],
        5 => [vec![0x81, 0xf8 + r], small_imm(rng).to_vec()].concat(),
        6 => [vec![0xc7, 0x45, disp8(rng)], small_imm(rng).to_vec()].concat(),
        7 => vec![0x8b, 0x45 | (r << 3), disp8(rng)],
        8 => vec![0x89, 0x45 | (r << 3), disp8(rng)],
        9 => vec![0x48, 0x8b, 0x45 | (r << 3), disp8(rng)],
        10 => vec![0x85, 0xc0 | (s << 3) | r],
        11 => vec![0xff, 0xc0 + r],
        12 => vec![0x6b, 0xc0 | (r << 3) | s, rng.gen_range(2..0x20)],
        13 => vec![0x0f, 0xb6, 0x45 | (r << 3), disp8(rng)],
        14 => vec![0x48, 0x83, 0xc4, 0x08],
        _ => vec![0x90],
    }
}

/// Junk made of random bytes and truncated real encodings.
fn junk(rng: &mut ChaCha8Rng, len: usize) -> Vec<u8> {
    const PREFIXES: &[&[u8]] = &[
        &[0xe8, 0x00, 0x00, 0x00, 0x00],
        &[0xe9, 0x00, 0x00, 0x00, 0x00],
        &[0x0f, 0x85, 0x00, 0x00, 0x00, 0x00],
        &[0x48, 0x8b, 0x45, 0xf8],
        &[0x48, 0x8d, 0x05, 0x00, 0x10, 0x00, 0x00],
        &[0xc7, 0x45, 0xfc, 0x00, 0x00, 0x00, 0x00],
        &[0x48, 0xb8, 0, 0, 0, 0, 0, 0, 0, 0],
        &[0x81, 0xc4, 0x00, 0x01, 0x00, 0x00],
    ];
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        if rng.gen_bool(0.5) {
            out.push(rng.gen());
        } else {
            let t: Vec<u8> = if rng.gen_bool(0.5) {
                PREFIXES.choose(rng).expect("non-empty").to_vec()
            } else {
                body_instruction(rng)
            };
            if t.len() < 2 {
                continue;
            }
            let k = rng.gen_range(1..t.len()).min(len - out.len());
            out.extend_from_slice(&t[..k]);
        }
    }
    out
}

/// Generates one sample; the same seed and params always give the same bytes.
pub fn generate_sample(seed: u64, params: &CorpusParams) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.blocks.max(1);

    let mut hidden = vec![false; n];
    for i in 1..n.saturating_sub(1) {
        if !hidden[i - 1] && rng.gen_bool(params.hidden_prob) {
            hidden[i] = true;
        }
    }
    let visible: Vec<usize> = (0..n).filter(|i| !hidden[*i]).collect();
    let junk_len: Vec<usize> = (0..n)
        .map(|i| {
            if i + 1 == n || params.junk_max == 0 {
                0
            } else {
                rng.gen_range(1..=params.junk_max)
            }
        })
        .collect();

    let mut blocks: Vec<Vec<Op>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut ops = Vec::new();
        for _ in 0..rng.gen_range(2..=8) {
            match rng.gen_range(0..20) {
                0 | 1 => ops.push(Op::Call(Target::Block(
                    *visible.choose(&mut rng).expect("block 0"),
                ))),
                2 => ops.push(Op::MovAddr(
                    7,
                    Target::Block(*visible.choose(&mut rng).expect("block 0")),
                )),
                _ => ops.push(Op::Raw(body_instruction(&mut rng))),
            }
        }
        if i + 1 == n {
            ops.push(Op::Raw(vec![0xc3]));
        } else if hidden[i + 1] {
            if rng.gen_bool(0.5) {
                ops.push(Op::Raw(vec![0xff, 0xe0]));
            } else {
                ops.push(Op::Raw(vec![0xc3]));
            }
        } else {
            if rng.gen_bool(0.3) {
                let cc = 0x80 + rng.gen_range(0u8..16);
                ops.push(Op::Jcc(
                    cc,
                    Target::Block(*visible.choose(&mut rng).expect("block 0")),
                ));
            }
            if junk_len[i] > 0 && rng.gen_bool(params.bogus_prob) {
                ops.push(Op::Raw(vec![0x39, 0xc0]));
                ops.push(Op::Jcc(0x85, Target::Junk(i)));
            }
            ops.push(Op::Jmp(Target::Block(i + 1)));
        }
        blocks.push(ops);
    }

    // layout: every encoding has a fixed size, so addresses do not depend on targets
    let mut block_addr = Vec::with_capacity(n);
    let mut junk_addr = Vec::with_capacity(n);
    let mut at = params.base;
    for (i, ops) in blocks.iter().enumerate() {
        block_addr.push(at);
        at += ops.iter().map(|o| o.len() as u64).sum::<u64>();
        junk_addr.push(at);
        at += junk_len[i] as u64;
    }
    let resolve = |t: Target| match t {
        Target::Block(b) => block_addr[b],
        Target::Junk(b) => junk_addr[b],
    };

    let mut bytes = Vec::with_capacity((at - params.base) as usize);
    let mut truth = GroundTruth::default();
    for (i, ops) in blocks.iter().enumerate() {
        for op in ops {
            let here = params.base + bytes.len() as u64;
            truth.instruction_starts.insert(here);
            let next = here + op.len() as u64;
            let rel = |t: Target| ((resolve(t) as i64 - next as i64) as i32).to_le_bytes();
            match op {
                Op::Raw(b) => bytes.extend_from_slice(b),
                Op::Jmp(t) => {
                    bytes.push(0xe9);
                    bytes.extend_from_slice(&rel(*t));
                }
                Op::Call(t) => {
                    bytes.push(0xe8);
                    bytes.extend_from_slice(&rel(*t));
                }
                Op::Jcc(cc, t) => {
                    bytes.extend_from_slice(&[0x0f, *cc]);
                    bytes.extend_from_slice(&rel(*t));
                }
                Op::MovAddr(r, t) => {
                    bytes.push(0xb8 + r);
                    bytes.extend_from_slice(&(resolve(*t) as u32).to_le_bytes());
                }
            }
        }
        if junk_len[i] > 0 {
            let start = params.base + bytes.len() as u64;
            bytes.extend(junk(&mut rng, junk_len[i]));
            let end = params.base + bytes.len() as u64;
            truth.junk_ranges.push((start, end));
            truth.first_after_junk.insert(end);
        }
    }
    debug_assert_eq!(params.base + bytes.len() as u64, at);

    Sample {
        region: CodeRegion::new(params.base, bytes, vec![params.base]),
        truth,
    }
}
