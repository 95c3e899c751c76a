//! On-disk trace bundle: per-branch hints, compacted pattern stores and trace
//! element lists for one program.
//!
//! Layout (little-endian, every record byte aligned):
//!
//! ```text
//! header  : magic "BTRB" | version u16 | program_hash u64 | crypto_start u64 | crypto_end u64 | records u32
//! record  : branch_pc u64 | hint u16 (14 bits used) | patterns u8 | trace_len u32
//!           | pattern elements, 20 bits each, packed LSB-first, padded to a byte
//!           | trace elements, 41 bits each in 6 bytes
//! ```
//!
//! Records are sorted by branch pc. Single-target records carry only the hint.
//! For traced records the hint's 12-bit field is the record's ordinal among
//! traced records, and the trace list ends with exactly one end-of-trace marker.

use serde::{Deserialize, Serialize};

use crate::element::{
    decode_hint, encode_hint, HintInfo, PatternElement, TraceElement, ENTRY_ELEMENTS, OFFSET_MAX, PATTERN_ELEMENT_BITS,
    TRACE_ELEMENT_BYTES,
};
use crate::error::{Result, TraceError};
use crate::trace::Pc;

pub const MAGIC: &[u8; 4] = b"BTRB";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 4 + 2 + 8 + 8 + 8 + 4;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BranchRecord {
    pub branch_pc: Pc,
    pub hint: HintInfo,
    pub patterns: Vec<PatternElement>,
    /// Trace elements including the terminating end-of-trace marker.
    pub trace: Vec<TraceElement>,
}

impl BranchRecord {
    pub fn single_target(branch_pc: Pc, target_pc: Pc) -> Result<Self> {
        Ok(Self {
            branch_pc,
            hint: HintInfo::single_target(target_pc as i64 - branch_pc as i64)?,
            patterns: Vec::new(),
            trace: Vec::new(),
        })
    }

    /// Builds a traced record, appending the end-of-trace marker if missing.
    /// The trace offset is filled in when the record joins a bundle.
    pub fn traced(branch_pc: Pc, patterns: Vec<PatternElement>, mut elements: Vec<TraceElement>) -> Self {
        if !elements.last().is_some_and(|e| e.eot) {
            elements.push(TraceElement::EOT);
        }
        let short_trace = elements.len() <= ENTRY_ELEMENTS;
        Self { branch_pc, hint: HintInfo { single_target: false, field12: 0, short_trace }, patterns, trace: elements }
    }

    pub fn is_single_target(&self) -> bool {
        self.hint.single_target
    }

    pub fn single_target_pc(&self) -> Option<Pc> {
        self.hint.single_target.then(|| (self.branch_pc as i64 + self.hint.field12 as i64) as Pc)
    }

    /// Trace elements without the end-of-trace marker.
    pub fn body(&self) -> &[TraceElement] {
        match self.trace.split_last() {
            Some((last, body)) if last.eot => body,
            _ => &self.trace,
        }
    }

    fn validate(&self, traced_ordinal: Option<usize>) -> Result<()> {
        let bad = |why: String| Err(TraceError::MalformedBundle(format!("record {:#x}: {why}", self.branch_pc)));
        encode_hint(self.hint)?;
        if self.hint.single_target {
            if !self.patterns.is_empty() || !self.trace.is_empty() {
                return bad("single-target record carries trace data".into());
            }
            return Ok(());
        }
        if self.patterns.is_empty() || self.patterns.len() > ENTRY_ELEMENTS {
            return bad(format!("{} pattern elements", self.patterns.len()));
        }
        if self.trace.len() < 2 || self.trace.len() > u32::MAX as usize {
            return bad(format!("{} trace elements", self.trace.len()));
        }
        let (last, body) = self.trace.split_last().expect("non-empty");
        if !last.eot || body.iter().any(|e| e.eot) {
            return bad("trace must end with exactly one end-of-trace marker".into());
        }
        for e in body {
            e.validate(&self.patterns)?;
        }
        if self.hint.short_trace != (self.trace.len() <= ENTRY_ELEMENTS) {
            return bad("short-trace mark disagrees with trace length".into());
        }
        if let Some(ordinal) = traced_ordinal {
            if self.hint.field12 as i64 != ordinal as i64 {
                return bad(format!("trace offset {} but record ordinal {ordinal}", self.hint.field12));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceBundle {
    pub program_hash: u64,
    /// Half-open crypto code range.
    pub crypto_range: (Pc, Pc),
    pub records: Vec<BranchRecord>,
}

impl TraceBundle {
    /// Sorts the records, assigns trace offsets and validates.
    pub fn new(program_hash: u64, crypto_range: (Pc, Pc), mut records: Vec<BranchRecord>) -> Result<Self> {
        records.sort_by_key(|r| r.branch_pc);
        for (ordinal, r) in records.iter_mut().filter(|r| !r.hint.single_target).enumerate() {
            let ordinal = ordinal as i64;
            if ordinal > OFFSET_MAX {
                return Err(TraceError::OffsetOverflow(ordinal));
            }
            r.hint.field12 = ordinal as i16;
        }
        let bundle = Self { program_hash, crypto_range, records };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.windows(2).any(|w| w[0].branch_pc >= w[1].branch_pc) {
            return Err(TraceError::MalformedBundle("records not strictly sorted by branch pc".into()));
        }
        if self.records.len() > u32::MAX as usize {
            return Err(TraceError::MalformedBundle("too many records".into()));
        }
        let mut ordinal = 0;
        for r in &self.records {
            if r.hint.single_target {
                r.validate(None)?;
            } else {
                r.validate(Some(ordinal))?;
                ordinal += 1;
            }
        }
        Ok(())
    }

    pub fn record(&self, branch_pc: Pc) -> Option<&BranchRecord> {
        self.records.binary_search_by_key(&branch_pc, |r| r.branch_pc).ok().map(|i| &self.records[i])
    }

    pub fn in_crypto_range(&self, pc: Pc) -> bool {
        (self.crypto_range.0..self.crypto_range.1).contains(&pc)
    }
}

pub fn encode_bundle(bundle: &TraceBundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let mut out = Vec::with_capacity(HEADER_BYTES + bundle.records.len() * 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&bundle.program_hash.to_le_bytes());
    out.extend_from_slice(&bundle.crypto_range.0.to_le_bytes());
    out.extend_from_slice(&bundle.crypto_range.1.to_le_bytes());
    out.extend_from_slice(&(bundle.records.len() as u32).to_le_bytes());
    for r in &bundle.records {
        out.extend_from_slice(&r.branch_pc.to_le_bytes());
        out.extend_from_slice(&encode_hint(r.hint)?.to_le_bytes());
        out.push(r.patterns.len() as u8);
        out.extend_from_slice(&(r.trace.len() as u32).to_le_bytes());
        pack_patterns(&r.patterns, &mut out);
        for e in &r.trace {
            out.extend_from_slice(&e.pack().to_le_bytes()[..TRACE_ELEMENT_BYTES]);
        }
    }
    Ok(out)
}

fn pack_patterns(patterns: &[PatternElement], out: &mut Vec<u8>) {
    let mut acc: u64 = 0;
    let mut bits = 0u32;
    for p in patterns {
        acc |= (p.pack() as u64) << bits;
        bits += PATTERN_ELEMENT_BITS;
        while bits >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            bits -= 8;
        }
    }
    if bits > 0 {
        out.push(acc as u8);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
                TraceError::MalformedBundle(format!("truncated at byte {} (wanted {n} more)", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_bundle(bytes: &[u8]) -> Result<TraceBundle> {
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take(4)? != MAGIC {
        return Err(TraceError::MalformedBundle("bad magic".into()));
    }
    let version = rd.u16()?;
    if version != VERSION {
        return Err(TraceError::MalformedBundle(format!("unsupported version {version}")));
    }
    let program_hash = rd.u64()?;
    let crypto_range = (rd.u64()?, rd.u64()?);
    let count = rd.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let branch_pc = rd.u64()?;
        let hint = decode_hint(rd.u16()?).map_err(|e| TraceError::MalformedBundle(e.to_string()))?;
        let n_patterns = rd.u8()? as usize;
        let n_trace = rd.u32()? as usize;
        let packed = rd.take((n_patterns * PATTERN_ELEMENT_BITS as usize).div_ceil(8))?;
        let mut patterns = Vec::with_capacity(n_patterns);
        let mut acc: u64 = 0;
        let mut bits = 0u32;
        let mut bytes = packed.iter();
        for _ in 0..n_patterns {
            while bits < PATTERN_ELEMENT_BITS {
                acc |= (*bytes.next().expect("length checked") as u64) << bits;
                bits += 8;
            }
            patterns.push(PatternElement::unpack((acc & 0xfffff) as u32)?);
            acc >>= PATTERN_ELEMENT_BITS;
            bits -= PATTERN_ELEMENT_BITS;
        }
        if acc != 0 {
            return Err(TraceError::MalformedBundle("non-zero padding bits".into()));
        }
        let mut trace = Vec::with_capacity(n_trace);
        for _ in 0..n_trace {
            let mut buf = [0u8; 8];
            buf[..TRACE_ELEMENT_BYTES].copy_from_slice(rd.take(TRACE_ELEMENT_BYTES)?);
            trace.push(TraceElement::unpack(u64::from_le_bytes(buf))?);
        }
        records.push(BranchRecord { branch_pc, hint, patterns, trace });
    }
    if rd.pos != bytes.len() {
        return Err(TraceError::MalformedBundle(format!("{} trailing bytes", bytes.len() - rd.pos)));
    }
    let bundle = TraceBundle { program_hash, crypto_range, records };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::element::PatternSlot;

    fn br1_record() -> BranchRecord {
        let store = vec![
            PatternElement::new(-3, 2).unwrap(),
            PatternElement::new(4, 5).unwrap(),
            PatternElement::new(9, 3).unwrap(),
        ];
        let trace = vec![
            TraceElement::new(PatternSlot { index: 0, size: 2 }, 7, 2),
            TraceElement::new(PatternSlot { index: 2, size: 1 }, 3, 1),
        ];
        BranchRecord::traced(0x40, store, trace)
    }

    #[test]
    fn empty_bundle_is_header_only() {
        let b = TraceBundle::new(0xdead_beef, (0, 0), vec![]).unwrap();
        let bytes = encode_bundle(&b).unwrap();
        assert_eq!(bytes.len(), HEADER_BYTES);
        assert_eq!(decode_bundle(&bytes).unwrap(), b);
    }

    #[test]
    fn br1_bundle_round_trips() {
        let b = TraceBundle::new(7, (0x10, 0x80), vec![br1_record(), BranchRecord::single_target(0x20, 0x25).unwrap()])
            .unwrap();
        assert_eq!(b.records[0].branch_pc, 0x20);
        assert_eq!(b.records[1].hint, HintInfo { single_target: false, field12: 0, short_trace: true });
        let bytes = encode_bundle(&b).unwrap();
        // header + single-target record + traced record (3 patterns -> 8 bytes, 3 trace elements)
        assert_eq!(bytes.len(), HEADER_BYTES + 15 + (15 + 8 + 18));
        let back = decode_bundle(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.record(0x40).unwrap().trace[0].pattern_counter, 7);
        assert_eq!(back.record(0x20).unwrap().single_target_pc(), Some(0x25));
    }

    #[test]
    fn decode_rejects_damage() {
        let b = TraceBundle::new(7, (0, 0x80), vec![br1_record()]).unwrap();
        let bytes = encode_bundle(&b).unwrap();
        for cut in [0, 3, HEADER_BYTES - 1, bytes.len() - 1] {
            assert!(matches!(decode_bundle(&bytes[..cut]), Err(TraceError::MalformedBundle(_))));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_bundle(&bad), Err(TraceError::MalformedBundle(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_bundle(&extra).is_err());
        // Flip the end-of-trace flag of the final element.
        let mut no_eot = bytes;
        let last = no_eot.len() - 1;
        no_eot[last] = 0;
        assert!(decode_bundle(&no_eot).is_err());
    }

    #[test]
    fn invariant_violations_are_rejected() {
        let mut r = br1_record();
        r.trace.pop();
        assert!(TraceBundle::new(0, (0, 0), vec![r]).is_err());
        let mut r = br1_record();
        r.hint.short_trace = false;
        assert!(TraceBundle::new(0, (0, 0), vec![r]).is_err());
        let dup = vec![br1_record(), br1_record()];
        assert!(TraceBundle::new(0, (0, 0), dup).is_err());
    }
}
