//! Bundled μAsm programs used by the tests, benches and the CLI.

use crate::bundle::TraceBundle;
use crate::tracegen::{generate_traces, TraceGenError, TraceGenOptions};
use crate::uasm::{parse, InputSpec, Program};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusEntry {
    pub name: &'static str,
    pub source: &'static str,
    /// Constant-time under the crypto-range contract.
    pub constant_time: bool,
    /// Every branch is in the crypto region.
    pub crypto_only: bool,
}

impl CorpusEntry {
    pub fn program(&self) -> Program {
        parse(self.source).unwrap_or_else(|e| panic!("corpus program {} does not parse: {e}", self.name))
    }
}

macro_rules! entry {
    ($name:literal, $file:literal, $ct:expr, $crypto_only:expr) => {
        CorpusEntry {
            name: $name,
            source: include_str!(concat!("../corpus/", $file)),
            constant_time: $ct,
            crypto_only: $crypto_only,
        }
    };
}

pub const CORPUS: &[CorpusEntry] = &[
    entry!("br1", "br1.uasm", true, true),
    entry!("toy-aes2", "toy_aes2.uasm", true, true),
    entry!("stream-cipher", "stream_cipher.uasm", true, true),
    entry!("decrypt-loop", "decrypt_loop.uasm", true, true),
    entry!("counted-loop", "counted_loop.uasm", true, true),
    entry!("many-branches", "many_branches.uasm", true, true),
    entry!("spectre-v1", "spectre_v1.uasm", true, false),
    entry!("integrity", "integrity.uasm", true, false),
];

pub fn get(name: &str) -> Option<&'static CorpusEntry> {
    CORPUS.iter().find(|e| e.name == name)
}

pub fn program(name: &str) -> Program {
    get(name).unwrap_or_else(|| panic!("no corpus program named {name}")).program()
}

/// Declared inputs, or the all-zero input when there are none.
pub fn inputs(p: &Program) -> Vec<InputSpec> {
    if p.inputs.is_empty() {
        vec![InputSpec { name: "zero".into(), ..Default::default() }]
    } else {
        p.inputs.clone()
    }
}

/// Bundle generated from the first and last input.
pub fn bundle(p: &Program) -> Result<TraceBundle, TraceGenError> {
    let ins = inputs(p);
    let (a, b) = (&ins[0], &ins[ins.len() - 1]);
    Ok(generate_traces(p, a, b, &TraceGenOptions::default())?.bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::Exec;
    use crate::uasm::{ct_check, run_seq, ArchState, CtVerdict};

    #[test]
    fn all_parse_and_terminate() {
        for e in CORPUS {
            let p = e.program();
            assert_eq!(p.name, e.name);
            let inputs = if p.inputs.is_empty() { vec![Default::default()] } else { p.inputs.clone() };
            for i in &inputs {
                run_seq(&p, &ArchState::from_input(&p, i), 100_000).unwrap();
            }
        }
    }

    #[test]
    fn constant_time_flags_hold() {
        for e in CORPUS.iter().filter(|e| e.constant_time) {
            let p = e.program();
            let v = ct_check(&p, &p.inputs, 100_000, Exec::default()).unwrap();
            assert!(matches!(v, CtVerdict::Pass { .. }), "{}: {v:?}", e.name);
        }
    }
}
