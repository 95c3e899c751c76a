//! The eight acceptance criteria, run in order with their time limits. Each
//! prints one line; the test fails if any criterion does.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use replay_core::btusim::{replay_record, simulate, Mode, PipelineConfig};
use replay_core::bundle::{decode_bundle, encode_bundle, BranchRecord};
use replay_core::compression::{decompress, kmers_compress, to_dna, to_trace_layout, to_vanilla, DEFAULT_MAX_K};
use replay_core::corpus::{self, CORPUS};
use replay_core::element::{
    decode_hint, encode_hint, PatternElement, PatternSlot, TraceElement, HINT_BITS, PATTERN_ELEMENT_BITS,
};
use replay_core::hwsem::{check_hni, secret_states, HniVerdict, HwParams, Variant};
use replay_core::par::Exec;
use replay_core::testgen;
use replay_core::trace::{VanillaElement, VanillaTrace};
use replay_core::tracegen::{generate_traces, ClassKind, TraceGenOptions};
use replay_core::uasm::{run_seq, ArchState, Instr};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn br1_golden() -> Outcome {
    let (pc, pc0, pc1, pc2) = (0x1000u64, 0x0ff0, 0x1010, 0x1020);
    let v = VanillaTrace::new(
        pc,
        vec![
            VanillaElement::new(pc0, 2),
            VanillaElement::new(pc1, 5),
            VanillaElement::new(pc0, 2),
            VanillaElement::new(pc1, 5),
            VanillaElement::new(pc2, 3),
        ],
    );
    let rep = kmers_compress(&to_dna(&v), DEFAULT_MAX_K);
    ensure(decompress(&rep).map_err(|e| e.to_string())? == v, || "expansion differs".into())?;
    let (layout, flat) = to_trace_layout(&rep).map_err(|e| e.to_string())?;
    ensure(!flat, || "fell back to the flat form".into())?;
    let d = |t: u64| t as i64 - pc as i64;
    let pe = |t, n| PatternElement::new(d(t), n).unwrap();
    let store = vec![pe(pc0, 2), pe(pc1, 5), pe(pc2, 3)];
    ensure(layout.patterns == store, || format!("pattern store {:?}", layout.patterns))?;
    let want = vec![
        TraceElement::new(PatternSlot { index: 0, size: 2 }, 7, 2),
        TraceElement::new(PatternSlot { index: 2, size: 1 }, 3, 1),
        TraceElement::EOT,
    ];
    ensure(layout.trace == want, || format!("trace elements {:?}", layout.trace))?;
    Ok("(p0 tc=2 pc=7) (p1 tc=1 pc=3) EOT".into())
}

fn expansion_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);
    let mut outcomes = 0usize;
    for i in 0..10_000 {
        let raw = testgen::raw_trace(&mut rng, 100_000);
        outcomes += raw.outcomes.len();
        let v = to_vanilla(&raw).map_err(|e| e.to_string())?;
        let rep = kmers_compress(&to_dna(&v), DEFAULT_MAX_K);
        let back = decompress(&rep).map_err(|e| format!("trace {i}: {e}"))?;
        ensure(back == v, || format!("trace {i}: decompress(compress(v)) != v"))?;
        let (l, _) = to_trace_layout(&rep).map_err(|e| format!("trace {i}: {e}"))?;
        let rec = BranchRecord::traced(raw.branch_pc, l.patterns, l.trace);
        let replay = replay_record(&rec, raw.outcomes.len()).map_err(|e| format!("trace {i}: {e}"))?;
        ensure(replay == back.expand(), || format!("trace {i}: replay differs from decompression"))?;
    }
    Ok(format!("10000 traces, {outcomes} outcomes"))
}

fn compression_effectiveness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0003);
    let mut worst = f64::INFINITY;
    let mut cases = 0;
    let corners = [(2, 10), (8, 10), (2, 10_000), (8, 10_000)];
    for c in 0..600 {
        let (v, b, n) = match corners.get(c) {
            Some(&(b, n)) => testgen::looped_vanilla(&mut rng, b..=b, n..=n),
            None => testgen::looped_vanilla(&mut rng, 2..=8, 10..=10_000),
        };
        let rep = kmers_compress(&to_dna(&v), DEFAULT_MAX_K);
        let size = rep.size();
        let rate = v.len() as f64 / size as f64;
        ensure(rate >= n as f64 / 4.0, || format!("|B|={b} n={n}: rate {rate:.1} < n/4"))?;
        ensure(size <= 2 * b + 4, || format!("|B|={b} n={n}: size {size} > 2|B|+4"))?;
        worst = worst.min(rate / n as f64);
        cases += 1;
    }
    Ok(format!("{cases} cases, min rate/n {worst:.3}"))
}

fn replay_fidelity() -> Outcome {
    let base = PipelineConfig::default();
    let pressure: Vec<PipelineConfig> =
        [16, 4, 1].iter().map(|&e| PipelineConfig { btu_entries: e, preload_btu: false, ..base.clone() }).collect();
    let injected: Vec<PipelineConfig> =
        (0..4).map(|seed| PipelineConfig { squash_injection: 0.01, seed, ..base.clone() }).collect();
    let mut runs = 0;
    let mut evictions = 0;
    let mut injections = 0;
    for e in CORPUS {
        let p = e.program();
        let bundle = corpus::bundle(&p).map_err(|err| format!("{}: {err}", e.name))?;
        for input in corpus::inputs(&p) {
            let s0 = ArchState::from_input(&p, &input);
            let oracle = run_seq(&p, &s0, 1_000_000).map_err(|err| err.to_string())?.pc_stream();
            let cfgs = std::iter::once(&base).chain(&pressure).chain(&injected);
            for cfg in cfgs {
                let r = simulate(&p, &s0, &bundle, cfg, Mode::Cassandra).map_err(|err| format!("{}: {err}", e.name))?;
                ensure(r.committed == oracle, || format!("{} ({}): committed stream differs", e.name, input.name))?;
                ensure(r.stats.crypto_squashes == 0, || format!("{}: crypto squashes", e.name))?;
                evictions += r.stats.btu_evictions;
                injections += r.stats.injected_squashes;
                runs += 1;
            }
        }
    }
    let p = corpus::program("many-branches");
    let r = simulate(&p, &ArchState::new(&p), &corpus::bundle(&p).unwrap(), &base, Mode::Cassandra).unwrap();
    ensure(r.stats.btu_evictions > 0, || "17 branches did not evict from 16 entries".into())?;
    ensure(injections > 0, || "no squash was injected".into())?;
    Ok(format!("{runs} runs, {evictions} evictions, {injections} injected squashes"))
}

fn timing_direction() -> Outcome {
    let mut runs = 0;
    let mut strict = 0;
    for e in CORPUS.iter().filter(|e| e.crypto_only) {
        let p = e.program();
        let bundle = corpus::bundle(&p).map_err(|err| err.to_string())?;
        for input in corpus::inputs(&p) {
            let s0 = ArchState::from_input(&p, &input);
            for lat in [4, 8, 16] {
                let cfg = PipelineConfig { resolve_latency: lat, ..Default::default() };
                let c = simulate(&p, &s0, &bundle, &cfg, Mode::Cassandra).map_err(|err| err.to_string())?.stats;
                let b = simulate(&p, &s0, &bundle, &cfg, Mode::Baseline).map_err(|err| err.to_string())?.stats;
                let tag =
                    format!("{} ({}) latency {lat}: cassandra {} baseline {}", e.name, input.name, c.cycles, b.cycles);
                ensure(c.cycles <= b.cycles, || tag.clone())?;
                if b.squashes() >= 1 {
                    ensure(c.cycles < b.cycles, || tag.clone())?;
                    strict += 1;
                }
                runs += 1;
            }
        }
    }
    Ok(format!("{runs} runs, {strict} with baseline squashes"))
}

fn noninterference() -> Outcome {
    let params = HwParams::default();
    let mut min_pairs = u64::MAX;
    for e in CORPUS.iter().filter(|e| e.constant_time) {
        let p = e.program();
        let states = secret_states(&p, &p.inputs);
        match check_hni(&p, &states, Variant::Cassandra, &params, Exec::default()).map_err(|err| err.to_string())? {
            HniVerdict::Pass { pairs, .. } => {
                ensure(pairs >= 256, || format!("{}: only {pairs} state pairs", e.name))?;
                min_pairs = min_pairs.min(pairs);
            }
            HniVerdict::Fail(c) => return Err(format!("{}: {}", e.name, c.render())),
        }
    }
    let p = corpus::program("spectre-v1");
    let states = secret_states(&p, &p.inputs);
    match check_hni(&p, &states, Variant::Baseline, &params, Exec::default()).map_err(|err| err.to_string())? {
        HniVerdict::Fail(c) => {
            ensure(!c.diff().is_empty(), || "counterexample without a difference".into())?;
            Ok(format!("cassandra passes (>= {min_pairs} pairs each), baseline leaks at step {}", c.step))
        }
        v => Err(format!("baseline passed the gadget: {v:?}")),
    }
}

fn codec() -> Outcome {
    let mut valid = 0;
    for v in 0..1u16 << HINT_BITS {
        if let Ok(h) = decode_hint(v) {
            ensure(encode_hint(h) == Ok(v), || format!("hint {v:#x} does not round-trip"))?;
            valid += 1;
        }
    }
    ensure(decode_hint(1 << HINT_BITS).is_err(), || "15-bit hint accepted".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0007);
    for i in 0..1000 {
        let b = testgen::bundle(&mut rng);
        let bytes = encode_bundle(&b).map_err(|e| format!("bundle {i}: {e}"))?;
        ensure(decode_bundle(&bytes).as_ref() == Ok(&b), || format!("bundle {i} does not round-trip"))?;
    }
    ensure(PATTERN_ELEMENT_BITS == 20, || "pattern element width".into())?;
    let widest = PatternElement::new(-1, 255).unwrap().pack();
    ensure(widest >> 19 == 1, || format!("pattern element {widest:#x} is not 20 bits wide"))?;
    for (off, reps) in [(-2048, 1), (2047, 255), (0, 128)] {
        let e = PatternElement::new(off, reps).unwrap();
        ensure(e.pack() >> 20 == 0 && PatternElement::unpack(e.pack()) == Ok(e), || format!("{e:?}"))?;
    }
    Ok(format!("{valid} valid hints of 16384, 1000 bundles"))
}

fn stream_loop_exclusion() -> Outcome {
    let p = corpus::program("stream-cipher");
    let blk = p.labels["blk"];
    let stream_pc = (0..p.end())
        .find(|&pc| matches!(p.instrs[pc as usize].instr, Instr::Beqz { target, .. } if target == blk))
        .expect("stream loop branch");
    let (len4, len9) = (p.input("len4").unwrap(), p.input("len9").unwrap());
    let opts = TraceGenOptions::default();
    let both = generate_traces(&p, len4, len9, &opts).map_err(|e| e.to_string())?;
    let streams: Vec<_> =
        both.branches.iter().filter(|b| b.kind == ClassKind::StreamLoop).map(|b| b.branch_pc).collect();
    ensure(streams == [stream_pc], || format!("stream loops {streams:?}, expected [{stream_pc}]"))?;
    let four = generate_traces(&p, len4, len4, &opts).map_err(|e| e.to_string())?;
    let nine = generate_traces(&p, len9, len9, &opts).map_err(|e| e.to_string())?;
    let inner = |o: &replay_core::tracegen::TraceGenOutput| {
        o.branches
            .iter()
            .filter(|b| b.branch_pc != stream_pc)
            .map(|b| (b.branch_pc, b.kind, b.layout.clone()))
            .collect::<Vec<_>>()
    };
    ensure(inner(&four) == inner(&nine), || "inner branches differ between lengths 4 and 9".into())?;
    ensure(inner(&both).iter().map(|b| (b.0, b.1)).eq(inner(&four).iter().map(|b| (b.0, b.1))), || {
        "inner classes differ".into()
    })?;
    Ok(format!("stream loop at pc {stream_pc}, {} inner branches identical", inner(&four).len()))
}

fn main() {
    type Criterion = (&'static str, Duration, fn() -> Outcome);
    let criteria: [Criterion; 8] = [
        ("1 BR1 golden", Duration::from_secs(1), br1_golden),
        ("2 expansion identity", Duration::from_secs(60), expansion_identity),
        ("3 compression effectiveness", Duration::from_secs(30), compression_effectiveness),
        ("4 replay fidelity under stress", Duration::from_secs(120), replay_fidelity),
        ("5 timing direction", Duration::from_secs(60), timing_direction),
        ("6 noninterference", Duration::from_secs(300), noninterference),
        ("7 codec bit-exactness", Duration::from_secs(10), codec),
        ("8 stream-loop exclusion", Duration::from_secs(5), stream_loop_exclusion),
    ];
    let mut failed = Vec::new();
    for (name, limit, run) in criteria {
        let t = Instant::now();
        let r = run();
        let took = t.elapsed();
        let (ok, detail) = match r {
            Ok(d) if took <= limit => (true, d),
            Ok(d) => (false, format!("{d}; over the {limit:?} limit")),
            Err(e) => (false, e),
        };
        println!("criterion {name}: {} in {took:.2?} ({detail})", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed: {failed:?}");
        std::process::exit(1);
    }
}
