//! Adversary projection, hardware runs and the bounded hardware
//! noninterference check.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

use super::components::{Directive, Line};
use super::machine::{hw_step, project_buf, HwConfig, HwError, HwParams, Marker, StepEffect, Variant};
use crate::par::{map_collect, Exec};
use crate::predictor::Predictor;
use crate::trace::Pc;
use crate::uasm::{
    contract_trace_ct_seq, crypto_cf_trace, ArchState, Cell, ContractTrace, InputSpec, Program, SecretDomain,
};

/// Everything the adversary sees of one configuration: the buffer's
/// resolution markers, the cache and trace-cache contents, and for the
/// baseline the predictor. Memory and register values are never visible.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Projection {
    pub buf: Vec<Marker>,
    pub cache: Vec<Line>,
    pub tc: Vec<Pc>,
    pub pred: Option<Predictor>,
    pub sc: Option<Directive>,
}

pub fn adversary_project(w: &HwConfig, variant: Variant, params: &HwParams) -> Projection {
    Projection {
        buf: project_buf(&w.buf),
        cache: w.cs.items.clone(),
        tc: w.tc.items.clone(),
        pred: (variant == Variant::Baseline).then(|| w.pred.clone()),
        sc: params.observe_scheduler.then_some(w.sc.next),
    }
}

/// Counters gathered over a hardware run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HwSummary {
    pub steps: u64,
    pub squashes: u64,
    pub tagged_squashes: u64,
    pub stalls: u64,
    pub trace_misses: u64,
    /// Final value of the crypto control-flow counter C.
    pub c: usize,
    pub committed: Vec<Pc>,
}

/// Runs to completion, handing the projection of every reached configuration
/// (including the initial one) to `on_obs`. Returning `Break` stops early.
pub fn hw_run_with(
    p: &Program,
    s0: &ArchState,
    variant: Variant,
    params: &HwParams,
    mut on_obs: impl FnMut(u64, &Projection) -> ControlFlow<()>,
) -> Result<(HwSummary, HwConfig), HwError> {
    let cf = match variant {
        Variant::Cassandra => crypto_cf_trace(p, s0, params.budget)?,
        Variant::Baseline => Vec::new(),
    };
    let mut w = HwConfig::new(s0.clone(), params);
    let mut sum = HwSummary::default();
    if on_obs(0, &adversary_project(&w, variant, params)).is_break() {
        return Ok((sum, w));
    }
    while !w.is_done(p) {
        if sum.steps == params.budget {
            return Err(HwError::StepBudgetExceeded(params.budget));
        }
        match hw_step(p, &mut w, &cf, variant, params)? {
            StepEffect::Squashed { tagged, .. } => {
                sum.squashes += 1;
                sum.tagged_squashes += tagged as u64;
            }
            StepEffect::Stalled => sum.stalls += 1,
            StepEffect::TraceMiss(_) => sum.trace_misses += 1,
            StepEffect::Committed(pc) => sum.committed.push(pc),
            _ => {}
        }
        sum.steps += 1;
        if on_obs(sum.steps, &adversary_project(&w, variant, params)).is_break() {
            break;
        }
    }
    sum.c = w.c;
    Ok((sum, w))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HwRun {
    pub observations: Vec<Projection>,
    pub summary: HwSummary,
    pub final_config: HwConfig,
}

pub fn hw_run(p: &Program, s0: &ArchState, variant: Variant, params: &HwParams) -> Result<HwRun, HwError> {
    let mut observations = Vec::new();
    let (summary, final_config) = hw_run_with(p, s0, variant, params, |_, o| {
        observations.push(o.clone());
        ControlFlow::Continue(())
    })?;
    Ok(HwRun { observations, summary, final_config })
}

/// A named initial state for the checker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledState {
    pub input: String,
    pub secrets: Vec<(Cell, u64)>,
    pub state: ArchState,
}

/// Every secret assignment under every public input (the all-zero state when
/// the program declares no inputs).
pub fn secret_states(p: &Program, inputs: &[InputSpec]) -> Vec<LabeledState> {
    let dom = SecretDomain::of(p);
    let zero = [InputSpec { name: "zero".into(), ..Default::default() }];
    let inputs = if inputs.is_empty() { &zero[..] } else { inputs };
    let mut out = Vec::new();
    for input in inputs {
        let base = ArchState::from_input(p, input);
        for i in 0..dom.len() {
            out.push(LabeledState {
                input: input.name.clone(),
                secrets: dom.assignment(i),
                state: dom.apply(&base, i),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counterexample {
    pub first: LabeledState,
    pub second: LabeledState,
    /// Index of the first configuration whose projections differ.
    pub step: u64,
    pub left: Option<Projection>,
    pub right: Option<Projection>,
}

fn diff_list<T: PartialEq + std::fmt::Debug>(name: &str, a: &[T], b: &[T], out: &mut Vec<String>) {
    if a == b {
        return;
    }
    let only = |x: &[T], y: &[T]| x.iter().filter(|v| !y.contains(v)).map(|v| format!("{v:?}")).collect::<Vec<_>>();
    let (l, r) = (only(a, b), only(b, a));
    if l.is_empty() && r.is_empty() {
        out.push(format!("{name}: same contents, different order"));
    } else {
        out.push(format!("{name}: only first [{}], only second [{}]", l.join(", "), r.join(", ")));
    }
}

impl Counterexample {
    /// Human-readable differences between the two projections.
    pub fn diff(&self) -> Vec<String> {
        let mut out = Vec::new();
        match (&self.left, &self.right) {
            (Some(a), Some(b)) => {
                diff_list("buf", &a.buf, &b.buf, &mut out);
                diff_list("cache", &a.cache, &b.cache, &mut out);
                diff_list("trace cache", &a.tc, &b.tc, &mut out);
                if a.pred != b.pred {
                    out.push("predictor state differs".into());
                }
                if a.sc != b.sc {
                    out.push(format!("scheduler: {:?} vs {:?}", a.sc, b.sc));
                }
            }
            (Some(_), None) => out.push("second run already finished".into()),
            (None, Some(_)) => out.push("first run already finished".into()),
            (None, None) => {}
        }
        out
    }

    pub fn render(&self) -> String {
        let show = |s: &LabeledState| {
            let cells: Vec<String> = s
                .secrets
                .iter()
                .map(|(c, v)| match c {
                    Cell::Mem(a) => format!("mem[{a}]={v}"),
                    Cell::Reg(r) => format!("r{r}={v}"),
                })
                .collect();
            format!("input {} with {}", s.input, cells.join(" "))
        };
        let mut s = String::new();
        let _ = writeln!(s, "first:  {}", show(&self.first));
        let _ = writeln!(s, "second: {}", show(&self.second));
        let _ = writeln!(s, "equal contract traces, hardware observations differ at step {}", self.step);
        for d in self.diff() {
            let _ = writeln!(s, "  {d}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum HniVerdict {
    Pass {
        states: usize,
        /// Classes of states with equal contract traces.
        classes: usize,
        /// State pairs with equal contract traces whose hardware traces were compared.
        pairs: u64,
    },
    Fail(Box<Counterexample>),
}

impl HniVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, HniVerdict::Pass { .. })
    }
}

/// For every pair of states with equal contract traces, checks that the
/// hardware observation traces agree at every step. Each state runs once and
/// is compared pointwise against the first state of its class.
pub fn check_hni(
    p: &Program,
    states: &[LabeledState],
    variant: Variant,
    params: &HwParams,
    exec: Exec,
) -> Result<HniVerdict, HwError> {
    let traces: Vec<Result<ContractTrace, HwError>> =
        map_collect(states, exec, |s| Ok(contract_trace_ct_seq(p, &s.state, params.budget)?));
    let mut classes: BTreeMap<ContractTrace, Vec<usize>> = BTreeMap::new();
    for (i, t) in traces.into_iter().enumerate() {
        classes.entry(t?).or_default().push(i);
    }
    let mut pairs = 0u64;
    let mut failure: Option<Counterexample> = None;
    for members in classes.values() {
        let n = members.len() as u64;
        pairs += n * (n - 1) / 2;
        if n < 2 {
            continue;
        }
        let rep = &states[members[0]];
        let reference = hw_run(p, &rep.state, variant, params)?.observations;
        let results: Vec<Result<Option<Counterexample>, HwError>> = map_collect(&members[1..], exec, |&m| {
            let other = &states[m];
            let mut found: Option<(u64, Option<Projection>, Option<Projection>)> = None;
            let mut last = 0;
            hw_run_with(p, &other.state, variant, params, |i, o| {
                last = i;
                match reference.get(i as usize) {
                    Some(r) if r == o => ControlFlow::Continue(()),
                    r => {
                        found = Some((i, r.cloned(), Some(o.clone())));
                        ControlFlow::Break(())
                    }
                }
            })?;
            if found.is_none() && (last as usize + 1) < reference.len() {
                found = Some((last + 1, reference.get(last as usize + 1).cloned(), None));
            }
            Ok(found.map(|(step, left, right)| Counterexample {
                first: rep.clone(),
                second: other.clone(),
                step,
                left,
                right,
            }))
        });
        for r in results {
            if let Some(c) = r? {
                if failure.as_ref().is_none_or(|f| (c.step, &c.second.secrets) < (f.step, &f.second.secrets)) {
                    failure = Some(c);
                }
            }
        }
        if failure.is_some() {
            break;
        }
    }
    Ok(match failure {
        Some(c) => HniVerdict::Fail(Box::new(c)),
        None => HniVerdict::Pass { states: states.len(), classes: classes.len(), pairs },
    })
}
