use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use replay_core::btusim::{replay_record, simulate, Mode, PipelineConfig};
use replay_core::bundle::{decode_bundle, encode_bundle, BranchRecord};
use replay_core::compression::{decompress, kmers_compress, to_dna, to_trace_layout, to_vanilla, DEFAULT_MAX_K};
use replay_core::corpus;
use replay_core::element::{decode_hint, encode_hint, PatternElement, TraceElement};
use replay_core::hwsem::{check_hni, secret_states, HniVerdict, HwParams, Variant};
use replay_core::par::Exec;
use replay_core::testgen;
use replay_core::trace::{RawTrace, VanillaElement, VanillaTrace};
use replay_core::uasm::{ct_check, run_seq, CtVerdict, DEFAULT_STEP_BUDGET};
use replay_core::TraceError;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn compression_round_trips(outcomes in prop::collection::vec(0x3f0u64..0x3f4, 1..400)) {
        let raw = RawTrace::new(0x400, outcomes);
        let v = to_vanilla(&raw).unwrap();
        let rep = kmers_compress(&to_dna(&v), DEFAULT_MAX_K);
        prop_assert_eq!(decompress(&rep).unwrap().expand(), raw.outcomes.clone());
        prop_assert!(rep.size() <= v.len().max(1) + rep.symbol_map.len());
        let layout = match to_trace_layout(&rep) {
            Ok((layout, _)) => layout,
            // a run-length trace with more than sixteen distinct elements cannot fit one entry
            Err(TraceError::CapacityExceeded { .. }) => {
                let mut distinct = v.elements.clone();
                distinct.sort_by_key(|e| (e.target_pc, e.count));
                distinct.dedup();
                prop_assert!(distinct.len() > 16);
                return Ok(());
            }
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let rec = BranchRecord::traced(raw.branch_pc, layout.patterns, layout.trace);
        prop_assert_eq!(replay_record(&rec, raw.outcomes.len()).unwrap(), raw.outcomes);
    }

    #[test]
    fn replay_wraps_cyclically(seed in any::<u64>(), laps in 1usize..4) {
        let raw = testgen::raw_trace(&mut rng(seed), 2000);
        let rep = kmers_compress(&to_dna(&to_vanilla(&raw).unwrap()), DEFAULT_MAX_K);
        let (layout, _) = to_trace_layout(&rep).unwrap();
        let rec = BranchRecord::traced(raw.branch_pc, layout.patterns, layout.trace);
        let n = raw.outcomes.len();
        let want: Vec<u64> = raw.outcomes.iter().copied().cycle().take(n * laps).collect();
        prop_assert_eq!(replay_record(&rec, n * laps).unwrap(), want);
    }

    #[test]
    fn looped_traces_stay_small(b in 2usize..=8, n in 10usize..=400, seed in any::<u64>()) {
        let (v, b, n) = testgen::looped_vanilla(&mut rng(seed), b..=b, n..=n);
        let rep = kmers_compress(&to_dna(&v), DEFAULT_MAX_K);
        prop_assert!(rep.size() <= 2 * b + 4);
        prop_assert!((b * n) as f64 / rep.size() as f64 >= n as f64 / 4.0);
    }

    #[test]
    fn bundles_round_trip(seed in any::<u64>()) {
        let b = testgen::bundle(&mut rng(seed));
        let bytes = encode_bundle(&b).unwrap();
        prop_assert_eq!(decode_bundle(&bytes).unwrap(), b);
    }

    #[test]
    fn truncated_bundles_are_rejected(seed in any::<u64>(), cut in 1usize..64) {
        let bytes = encode_bundle(&testgen::bundle(&mut rng(seed))).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode_bundle(&bytes[..keep]).is_err());
    }

    #[test]
    fn hints_round_trip(seed in any::<u64>()) {
        let h = testgen::hint_info(&mut rng(seed));
        match encode_hint(h) {
            Ok(v) => prop_assert_eq!(decode_hint(v).unwrap(), h),
            Err(_) => prop_assert!(h.single_target && h.short_trace),
        }
    }

    #[test]
    fn pattern_elements_pack_into_twenty_bits(off in -2048i64..=2047, reps in 1u8..=255) {
        let e = PatternElement::new(off, reps).unwrap();
        prop_assert!(e.pack() < 1 << 20);
        prop_assert_eq!(PatternElement::unpack(e.pack()).unwrap(), e);
    }

    #[test]
    fn trace_elements_round_trip(seed in any::<u64>()) {
        let b = testgen::bundle(&mut rng(seed));
        for r in &b.records {
            for e in r.body() {
                let v = e.pack();
                prop_assert!(v < 1 << 41);
                prop_assert_eq!(TraceElement::unpack(v).unwrap(), *e);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Generated constant-time programs pass the software contract, the
    /// hardware noninterference check and replay faithfully.
    #[test]
    fn generated_ct_programs(seed in any::<u64>()) {
        let p = testgen::ct_program(&mut rng(seed), "gen");
        let verdict = ct_check(&p, &p.inputs, DEFAULT_STEP_BUDGET, Exec::default()).unwrap();
        prop_assert!(matches!(verdict, CtVerdict::Pass { .. }), "{verdict:?}");
        let states = secret_states(&p, &p.inputs);
        let hni = check_hni(&p, &states, Variant::Cassandra, &HwParams::default(), Exec::default()).unwrap();
        prop_assert!(matches!(hni, HniVerdict::Pass { .. }), "{hni:?}");
        let bundle = corpus::bundle(&p).unwrap();
        for s in states.iter().step_by(51) {
            let oracle = run_seq(&p, &s.state, DEFAULT_STEP_BUDGET).unwrap().pc_stream();
            for cfg in [
                PipelineConfig::default(),
                PipelineConfig { btu_entries: 1, preload_btu: false, squash_injection: 0.05, seed, ..Default::default() },
            ] {
                let r = simulate(&p, &s.state, &bundle, &cfg, Mode::Cassandra).unwrap();
                prop_assert_eq!(&r.committed, &oracle);
                prop_assert_eq!(r.stats.crypto_squashes, 0);
            }
        }
    }
}

#[test]
fn vanilla_merge_is_run_length_maximal() {
    let v = to_vanilla(&RawTrace::new(0, vec![1, 1, 2, 2, 2, 1])).unwrap();
    assert_eq!(
        v,
        VanillaTrace::new(0, vec![VanillaElement::new(1, 2), VanillaElement::new(2, 3), VanillaElement::new(1, 1)])
    );
}
