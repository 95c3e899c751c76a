//! Direction and target predictor shared by the formal baseline semantics and
//! the pipeline simulator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::trace::Pc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorKind {
    /// 2-bit saturating counter per branch pc, initially weakly taken.
    #[default]
    TwoBit,
    /// Always predicts taken and never learns.
    AlwaysTaken,
    /// Always predicts fall-through and never learns.
    NotTaken,
}

/// Conditional directions plus a last-target buffer for indirect jumps.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Predictor {
    pub kind: PredictorKind,
    pub counters: BTreeMap<Pc, u8>,
    pub btb: BTreeMap<Pc, Pc>,
}

const WEAKLY_TAKEN: u8 = 2;

impl Predictor {
    pub fn new(kind: PredictorKind) -> Self {
        Self { kind, counters: BTreeMap::new(), btb: BTreeMap::new() }
    }

    pub fn predict_taken(&self, pc: Pc) -> bool {
        match self.kind {
            PredictorKind::TwoBit => self.counters.get(&pc).copied().unwrap_or(WEAKLY_TAKEN) >= 2,
            PredictorKind::AlwaysTaken => true,
            PredictorKind::NotTaken => false,
        }
    }

    pub fn train(&mut self, pc: Pc, taken: bool) {
        if self.kind != PredictorKind::TwoBit {
            return;
        }
        let c = self.counters.entry(pc).or_insert(WEAKLY_TAKEN);
        *c = if taken { (*c + 1).min(3) } else { c.saturating_sub(1) };
    }

    pub fn predict_target(&self, pc: Pc) -> Option<Pc> {
        self.btb.get(&pc).copied()
    }

    pub fn train_target(&mut self, pc: Pc, target: Pc) {
        self.btb.insert(pc, target);
    }

    /// True if any state is keyed by a pc in `range`.
    pub fn touches(&self, range: (Pc, Pc)) -> bool {
        let inside = |pc: &Pc| (range.0..range.1).contains(pc);
        self.counters.keys().any(inside) || self.btb.keys().any(inside)
    }
}
