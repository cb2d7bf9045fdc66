use proptest::prelude::*;

use super::*;
use crate::operators::{parse_ops, OperatorKind::*};

fn g3(a: StageSpec, b: StageSpec, c: StageSpec) -> ArchitectureGenome {
    ArchitectureGenome::new([a, b, c], 64)
}

fn empty() -> StageSpec {
    StageSpec::single(DeltaNet, 1, 0)
}

#[test]
fn delta_mamba_block_expands_in_order() {
    let s = StageSpec::pair(DeltaNet, Mamba2, Ratio::OneOne, 1, 1);
    let g = g3(s, empty(), empty());
    let spec = decode(&g).unwrap();
    assert_eq!(spec.ops, parse_ops("d, f, m2, f").unwrap());
}

#[test]
fn ratio_orders_op_a_first() {
    let s = StageSpec::pair(FullAttention, Mamba2, Ratio::OneTwo, 0, 2);
    assert_eq!(s.expand(), parse_ops("a, m2, m2, a, m2, m2").unwrap());
    let s = StageSpec::pair(DeltaNet, FullAttention, Ratio::OneThree, 2, 1);
    assert_eq!(s.expand(), parse_ops("d,f,f,a,f,f,a,f,f,a,f,f").unwrap());
}

/// Can three stages drawn from `choices` concatenate to exactly `target`?
fn three_stage_cover(target: &[OperatorKind], choices: &[StageSpec]) -> bool {
    let n = target.len();
    let mut reach = vec![false; n + 1];
    reach[0] = true;
    for _ in 0..3 {
        let mut next = reach.clone(); // an empty stage keeps the position
        for start in (0..=n).filter(|&i| reach[i]) {
            for s in choices {
                let ops = s.expand();
                if start + ops.len() <= n && target[start..start + ops.len()] == ops[..] {
                    next[start + ops.len()] = true;
                }
            }
        }
        reach = next;
    }
    reach[n]
}

#[test]
fn searched_decoding_list_needs_more_than_three_stages() {
    // The 24-operator list alternates D/M2 and A/M2 blocks five times; with at
    // most two mixer kinds per stage it cannot come from three stages.
    let target = parse_ops("d, f, m2, f, a, f, m2, f, d, f, m2, f, a, f, m2, f, d, f, m2, f, d, f, m2, f").unwrap();
    let blocks: Vec<usize> = (1..=24).collect();
    let choices = stage_choices(&[DeltaNet, FullAttention, Mamba2], &Ratio::ALL, &[0, 1, 2], &blocks);
    assert!(!three_stage_cover(&target, &choices));
    // the oracle itself does find representable lists
    assert!(three_stage_cover(&decoding_seed(64).operators(), &choices));
}

#[test]
fn decoding_seed_matches_family_shape() {
    let spec = decode(&decoding_seed(2048)).unwrap();
    assert_eq!(spec.ops.len(), 24);
    assert_eq!(spec.attention_layers(), 2);
    assert_eq!(spec.depth(), 12);
    let nf = preset("nf-1b").unwrap();
    let same = spec.ops.iter().zip(&nf.ops).filter(|(a, b)| a == b).count();
    assert!(same >= 20, "{same}");
}

#[test]
fn all_empty_stages_rejected() {
    let g = g3(empty(), empty(), empty());
    assert!(matches!(decode(&g), Err(Error::Genome(_))));
}

#[test]
fn stage_rules_enforced() {
    let bad = [
        StageSpec {
            op_a: DeltaNet,
            op_b: None,
            ratio: Ratio::OneOne,
            ffn: 1,
            blocks: 1,
        },
        StageSpec {
            op_a: DeltaNet,
            op_b: Some(Mamba2),
            ratio: Ratio::ZeroOne,
            ffn: 1,
            blocks: 1,
        },
        StageSpec::pair(DeltaNet, DeltaNet, Ratio::OneOne, 1, 1),
        StageSpec::single(DeltaNet, 3, 1),
        StageSpec::single(Ffn, 1, 1),
    ];
    for s in bad {
        assert!(g3(s, empty(), empty()).validate().is_err(), "{s:?}");
    }
}

#[test]
fn repair_leaves_capped_genome_alone() {
    // 16 + 10 + 4 = 30 operators
    let g = g3(
        StageSpec::pair(DeltaNet, Mamba2, Ratio::OneOne, 1, 4),
        StageSpec::single(FullAttention, 1, 5),
        StageSpec::pair(Mamba2, DeltaNet, Ratio::OneOne, 1, 1),
    );
    assert_eq!(g.op_count(), 30);
    assert_eq!(repair(&g).unwrap(), g);
}

#[test]
fn repair_drops_one_last_stage_block() {
    let g = g3(
        StageSpec::pair(DeltaNet, Mamba2, Ratio::OneOne, 1, 4),
        StageSpec::single(FullAttention, 1, 5),
        StageSpec::pair(Mamba2, DeltaNet, Ratio::OneOne, 1, 2),
    );
    assert_eq!(g.stages[2].ops_per_block(), 4);
    assert_eq!(g.op_count(), 34);
    assert!(decode(&g).is_err());
    let r = repair(&g).unwrap();
    assert_eq!(r.stages[2].blocks, 1);
    assert_eq!(r.op_count(), 30);
    assert_eq!(r.stages[..2], g.stages[..2]);
}

#[test]
fn repair_fails_when_overflow_is_upstream() {
    let g = g3(
        StageSpec::pair(DeltaNet, Mamba2, Ratio::OneThree, 2, 3),
        empty(),
        empty(),
    );
    assert!(g.op_count() > 30);
    assert!(repair(&g).is_err());
}

#[test]
fn presets_decode_to_reference_layouts() {
    let one = preset("nf-1b").unwrap();
    assert_eq!(one.ops.len(), 24);
    assert_eq!((one.hidden, one.ffn_dim), (2048, 6144));
    assert_eq!((one.attn.n_heads, one.attn.n_kv_heads), (16, 4));
    let pos: Vec<usize> = one
        .ops
        .iter()
        .enumerate()
        .filter(|(_, o)| o.is_attention())
        .map(|(i, _)| i + 1)
        .collect();
    assert_eq!(pos, vec![5, 13]);
    assert_eq!(one.meta_tokens, 256);

    let three = preset("nf-3b").unwrap();
    assert_eq!(three.ops.len(), 36);
    assert_eq!((three.hidden, three.ffn_dim), (3072, 9216));
    assert_eq!((three.attn.n_heads, three.attn.n_kv_heads), (24, 6));
    assert_eq!(three.attn.n_heads / three.attn.n_kv_heads, 4);
    // two extra D/M2 blocks and one extra A/M2 block over the 1B list
    assert_eq!(three.ops.len() - one.ops.len(), 3 * 4);
    assert_eq!(three.attention_layers(), 3);

    for name in PRESET_NAMES {
        preset(name).unwrap().mixer_config().validate().unwrap();
    }
    assert!(preset("nf-7b").is_err());
}

#[test]
fn genome_json_round_trip_uses_letter_codes() {
    let mut g = decoding_seed(48);
    g.meta_tokens = 4;
    let js = g.to_json().unwrap();
    assert!(js.contains("\"op_a\": \"d\""));
    assert!(js.contains("\"ratio\": \"1:1\""));
    assert_eq!(ArchitectureGenome::from_json(&js).unwrap(), g);
    let minimal = r#"{"stages":[{"op_a":"a","ratio":"0:1","ffn":1,"blocks":2},
        {"op_a":"m2","op_b":"d","ratio":"1:2","ffn":0,"blocks":1},
        {"op_a":"d","ratio":"0:1","ffn":2,"blocks":0}],"hidden":32}"#;
    let g = ArchitectureGenome::from_json(minimal).unwrap();
    assert_eq!(g.max_operators, 30);
    assert_eq!(g.operators(), parse_ops("a,f,a,f,m2,d,d").unwrap());
    assert!(ArchitectureGenome::from_json(&minimal.replace("\"hidden\"", "\"width\"")).is_err());
}

#[test]
fn ladder_membership() {
    let g = decoding_seed(1536);
    g.validate_ladder(&FULL_LADDER).unwrap();
    assert!(g.validate_ladder(&DESK_LADDER).is_err());
    for w in FULL_LADDER {
        assert_eq!(default_head_dim(w), 128);
    }
    for w in DESK_LADDER {
        assert_eq!(default_head_dim(w), 16);
    }
}

fn arb_stage() -> impl Strategy<Value = StageSpec> {
    let ops = prop::sample::select(vec![DeltaNet, FullAttention, Mamba2]);
    (
        ops.clone(),
        ops,
        prop::sample::select(Ratio::ALL.to_vec()),
        0..=2usize,
        0..=8usize,
    )
        .prop_map(|(a, b, ratio, ffn, blocks)| {
            if ratio == Ratio::ZeroOne || a == b {
                StageSpec::single(a, ffn, blocks)
            } else {
                StageSpec::pair(a, b, ratio, ffn, blocks)
            }
        })
}

proptest! {
    #[test]
    fn repaired_genomes_respect_the_cap(a in arb_stage(), b in arb_stage(), c in arb_stage()) {
        let g = g3(a, b, c);
        match repair(&g) {
            Ok(r) => {
                prop_assert!(r.op_count() <= r.max_operators);
                prop_assert_eq!(repair(&r).unwrap(), r);
                prop_assert_eq!(decode(&r).unwrap().ops, decode(&r).unwrap().ops);
            }
            Err(_) => {
                let upstream = g.stages[0].op_count() + g.stages[1].op_count();
                prop_assert!(upstream > g.max_operators || g.stages.iter().all(|s| s.blocks == 0));
            }
        }
    }

    #[test]
    fn decoded_op_count_is_the_stage_sum(a in arb_stage(), b in arb_stage(), c in arb_stage()) {
        let g = g3(a, b, c);
        prop_assert_eq!(g.operators().len(), a.op_count() + b.op_count() + c.op_count());
    }
}
