use std::fmt::Write as _;
use std::process::{Command, Output};

fn replay(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_replay")).args(args).output().expect("run replay")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value<'a>(text: &'a str, key: &str) -> &'a str {
    let prefix = format!("{key}=");
    text.lines().find_map(|l| l.strip_prefix(&prefix)).unwrap_or_else(|| panic!("no {key} in\n{text}"))
}

fn path(dir: &tempfile::TempDir, name: &str) -> String {
    dir.path().join(name).display().to_string()
}

/// Branch log for one branch at `pc` taking `(target, count)` runs.
fn log(runs: &[(u64, usize)], pc: u64) -> String {
    let mut s = String::new();
    let mut i = 0;
    for &(t, n) in runs {
        for _ in 0..n {
            let _ = writeln!(s, "{i:x} cond {pc:x} {t:x}");
            i += 1;
        }
    }
    s
}

fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> String {
    let p = path(dir, name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn trace_gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (path(&dir, "a.bin"), path(&dir, "b.bin"));
    for out in [&a, &b] {
        let o = replay(&["trace-gen", "toy-aes2", "-o", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let o = replay(&["trace-gen", "toy-aes2", "-o", &a, "--sequential"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let text = stdout(&o);
    let loops: usize =
        value(&text, "short_trace").parse::<usize>().unwrap() + value(&text, "multi_target").parse::<usize>().unwrap();
    assert!(loops >= 1, "{text}");
    assert_eq!(value(&text, "stream_loop"), "0");
}

#[test]
fn stream_loop_is_reported_excluded() {
    let dir = tempfile::tempdir().unwrap();
    let o = replay(&["trace-gen", "stream-cipher", "--input1", "len4", "--input2", "len9", "-o", &path(&dir, "s.bin")]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(value(&text, "stream_loop"), "1");
    assert!(text.lines().any(|l| l.starts_with("excluded pc=") && l.ends_with("reason=stream-loop")), "{text}");
}

#[test]
fn trace_gen_from_logs_matches_program_runs() {
    let dir = tempfile::tempdir().unwrap();
    let p = "counted-loop";
    let o = replay(&["trace-gen", p, "-o", &path(&dir, "direct.bin")]);
    assert!(o.status.success());
    // a counted loop's log, written by hand: the back edge at pc 6 taken four times
    let body = log(&[(2, 4), (7, 1)], 6);
    let l = write(&dir, "l.txt", &body);
    let o = replay(&["trace-gen", p, "--logs", &l, &l, "-o", &path(&dir, "logs.bin")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn stats_on_br1_log_applies_the_size_formula() {
    let dir = tempfile::tempdir().unwrap();
    let l = write(&dir, "br1.txt", &log(&[(90, 2), (105, 5), (90, 2), (105, 5), (120, 3)], 100));
    let json = path(&dir, "r.json");
    let o = replay(&["stats", "--log", &l, "--json", &json]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("branch pc=0x64 kind=multi-target vanilla_size=5 kmers_size=5 rate=1"), "{text}");
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let row = &r["branches"][0];
    assert_eq!((row["vanilla_size"].as_u64(), row["kmers_size"].as_u64()), (Some(5), Some(5)));
    assert_eq!(row["rate"].as_f64(), Some(1.0));
    assert_eq!(r["aggregate"]["branches"].as_u64(), Some(1));
}

#[test]
fn stats_excludes_single_target_branches() {
    let dir = tempfile::tempdir().unwrap();
    let l = write(&dir, "st.txt", &log(&[(7, 50)], 3));
    let o = replay(&["stats", "--log", &l]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("kind=single-target"));
    assert_eq!(value(&text, "aggregate branches"), "0");
}

#[test]
fn stats_on_a_long_loop_reports_high_rate() {
    let dir = tempfile::tempdir().unwrap();
    let block = [(1u64, 3), (2, 1), (5, 2)];
    let runs: Vec<(u64, usize)> = (0..1000).flat_map(|_| block).collect();
    let l = write(&dir, "loop.txt", &log(&runs, 0x40));
    let o = replay(&["stats", "--log", &l]);
    let text = stdout(&o);
    let rate: f64 = value(&text, "aggregate max vanilla_size=3000 kmers_size=4 rate").parse().unwrap();
    assert!(rate >= 100.0, "{text}");
}

#[test]
fn stats_reads_bundles_and_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let b = path(&dir, "b.bin");
    assert!(replay(&["trace-gen", "br1", "-o", &b]).status.success());
    let o = replay(&["stats", "--bundle", &b]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("kind=traced"));
    let bad = write(&dir, "bad.bin", "not a bundle");
    let o = replay(&["stats", "--bundle", &bad]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_reports_match_in_both_forms() {
    let dir = tempfile::tempdir().unwrap();
    let json = path(&dir, "sim.json");
    let o = replay(&["simulate", "br1", "--mode", "baseline", "--json", &json]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    for key in ["cycles", "committed", "noncrypto_squashes", "btu_hits"] {
        assert_eq!(value(&text, key), r["sim"]["stats"][key].to_string(), "{key}");
    }
    assert_eq!(value(&text, "committed_matches_sequential"), "true");
}

#[test]
fn simulate_reads_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg =
        write(&dir, "c.toml", "resolve_latency = 16\nbtu_entries = 1\npreload_btu = false\nsquash_injection = 0.05\n");
    let o = replay(&["simulate", "many-branches", "--config", &cfg, "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(value(&text, "crypto_squashes"), "0");
    assert_ne!(value(&text, "btu_evictions"), "0");
    let bad = write(&dir, "bad.toml", "fetch_widht = 2\n");
    assert_eq!(replay(&["simulate", "br1", "--config", &bad]).status.code(), Some(2));
}

#[test]
fn simulate_rejects_a_foreign_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let b = path(&dir, "b.bin");
    assert!(replay(&["trace-gen", "br1", "-o", &b]).status.success());
    assert_eq!(replay(&["simulate", "toy-aes2", "--bundle", &b]).status.code(), Some(2));
}

#[test]
fn check_ni_verdicts_set_the_exit_code() {
    let o = replay(&["check-ni", "br1"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(value(&stdout(&o), "verdict"), "pass");
    let o = replay(&["check-ni", "spectre-v1", "--variant", "baseline"]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert_eq!(value(&text, "verdict"), "fail");
    assert!(text.contains("Data(256)") && text.contains("Data(264)"), "{text}");
    assert_eq!(replay(&["check-ni", "spectre-v1"]).status.code(), Some(0));
}

#[test]
fn run_seq_checks_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let leaky = write(
        &dir,
        "leak.uasm",
        ".secret mem 0 4\n    load s, 0 @c\n    beqz s, out @c\n    assign x, 1 @c\nout:\n    ret @c\n",
    );
    let o = replay(&["run-seq", &leaky, "--ct"]);
    assert_eq!(o.status.code(), Some(1), "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("ct=fail"));
    let o = replay(&["run-seq", "counted-loop", "--ct"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn bad_arguments_exit_with_two() {
    assert_eq!(replay(&["simulate", "no-such-program"]).status.code(), Some(2));
    assert_eq!(replay(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(replay(&["stats"]).status.code(), Some(2));
}
