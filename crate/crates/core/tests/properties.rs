use std::collections::{BTreeMap, BTreeSet};

use disas_core::render::parse_snippet;
use disas_core::{
    generate_sample, group_overlapping_intervals, initial_disassemble, minimize_overlap,
    render_blocks, reverse_decode, score, CorpusParams, DisasmGraph, Interval, Scope, TruthSpans,
};
use iced_x86::{Decoder, DecoderOptions};
use proptest::prelude::*;

fn intervals() -> impl Strategy<Value = Vec<Interval>> {
    prop::collection::vec((0u64..512, 1u64..24), 0..48).prop_map(|v| {
        v.into_iter()
            .map(|(s, l)| Interval::new(s, s + l))
            .collect()
    })
}

fn canonical(mut groups: Vec<Vec<Interval>>) -> Vec<Vec<Interval>> {
    for g in &mut groups {
        g.sort();
    }
    groups.sort();
    groups
}

/// Every byte covered by each group, as a union of disjoint spans.
fn covered_spans(groups: &[Vec<Interval>]) -> Vec<(u64, u64)> {
    groups
        .iter()
        .map(|g| {
            let lo = g.iter().map(|i| i.start).min().unwrap();
            let hi = g.iter().map(|i| i.end).max().unwrap();
            (lo, hi)
        })
        .collect()
}

fn instruction_multiset(g: &DisasmGraph) -> BTreeMap<(u64, String), usize> {
    let mut m = BTreeMap::new();
    for b in g.blocks() {
        for i in b.instructions() {
            *m.entry((i.address, i.text.clone())).or_default() += 1;
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn reverse_decode_matches_brute_force(
        bytes in prop::collection::vec(any::<u8>(), 1..48),
        end_pick in any::<prop::sample::Index>(),
        excluded in prop::collection::btree_set(0u64..48, 0..6),
    ) {
        let base = 0x7000u64;
        let end = base + 1 + end_pick.index(bytes.len()) as u64;
        let excluded: BTreeSet<u64> = excluded.into_iter().map(|o| base + o).collect();
        let got: Vec<u64> = reverse_decode(&bytes, base, end, &excluded).iter().map(|i| i.address).collect();
        let mut want = Vec::new();
        for start in base..end {
            if excluded.contains(&start) {
                continue;
            }
            let off = (start - base) as usize;
            let mut d = Decoder::with_ip(64, &bytes[off..], start, DecoderOptions::NONE);
            let ins = d.decode();
            if !ins.is_invalid() && start + ins.len() as u64 == end {
                want.push(start);
            }
        }
        prop_assert_eq!(got, want);
    }

    #[test]
    fn groups_are_the_connected_components(ivs in intervals()) {
        let groups = canonical(group_overlapping_intervals(&ivs));
        // partition
        let flat: Vec<Interval> = {
            let mut f: Vec<Interval> = groups.iter().flatten().copied().collect();
            f.sort();
            f
        };
        let mut sorted = ivs.clone();
        sorted.sort();
        prop_assert_eq!(flat, sorted);
        // groups never overlap each other, so nothing was split that should be joined
        let mut spans = covered_spans(&groups);
        spans.sort();
        for w in spans.windows(2) {
            prop_assert!(w[0].1 <= w[1].0);
        }
        // each group is connected: its sorted members chain by overlap
        for g in &groups {
            let mut reach = g[0].end;
            for iv in &g[1..] {
                prop_assert!(iv.start < reach);
                reach = reach.max(iv.end);
            }
        }
    }

    #[test]
    fn score_ignores_prediction_order(seed in 0u64..500, cut in 0usize..400, rot in 0usize..400) {
        let s = generate_sample(seed, &CorpusParams { blocks: 8, ..CorpusParams::default() });
        let truth = TruthSpans::from_sample(&s.region, &s.truth);
        let view = s.region.view();
        // a mix of real starts and arbitrary offsets
        let mut predicted: Vec<(u64, u8)> = (s.region.base..s.region.end())
            .step_by(3)
            .filter_map(|a| view.decode(a).map(|i| (a, i.length)))
            .collect();
        predicted.truncate(cut.max(1));
        let mut shuffled = predicted.clone();
        shuffled.reverse();
        let n = shuffled.len();
        shuffled.rotate_left(rot % n);
        shuffled.extend(predicted.iter().take(3).copied());
        for scope in [Scope::All, Scope::Junk] {
            prop_assert_eq!(score(&predicted, &truth, scope), score(&shuffled, &truth, scope));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn minimize_only_splits(seed in 0u64..10_000) {
        let s = generate_sample(seed, &CorpusParams { blocks: 12, ..CorpusParams::default() });
        let mut g = initial_disassemble(&s.region);
        let before = instruction_multiset(&g);
        let blocks_before = g.len();
        let report = minimize_overlap(&mut g);
        prop_assert_eq!(instruction_multiset(&g), before);
        prop_assert_eq!(g.len(), blocks_before + report.splits.len());
        for e in g.edges() {
            prop_assert!(g.is_block_start(e.dst.0));
        }
    }

    #[test]
    fn rendered_graphs_parse_back(seed in 0u64..10_000) {
        let s = generate_sample(seed, &CorpusParams { blocks: 10, ..CorpusParams::default() });
        let g = initial_disassemble(&s.region);
        let blocks: Vec<_> = g.blocks().collect();
        let snippet = render_blocks(&blocks, &BTreeSet::new(), &BTreeMap::new(), &BTreeSet::new()).unwrap();
        let parsed = parse_snippet(&snippet.text).unwrap();
        prop_assert_eq!(parsed.instruction_lines, g.instruction_count());
        prop_assert_eq!(parsed.labels.len(), parsed.end_comments.len());
    }
}
