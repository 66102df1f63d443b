//! Trace records and their binary (VMT1) and text encodings.
//!
//! Binary layout, little-endian: a 16-byte header `{magic "VMT1", version
//! u32, record_count u64}` followed by 16-byte records `{op u8, asid u8,
//! pad u16, icount_delta u32, va u64}`. For range shootdowns `pad` holds the
//! page count.

use std::io::{self, BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::addrspace::{Asid, VirtAddr};
use crate::error::{Error, Result};
use crate::mmu::MaintenanceCmd;
use crate::tlbhier::AccessKind;

pub const MAGIC: [u8; 4] = *b"VMT1";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 16;
pub const RECORD_BYTES: usize = 16;

mod opcode {
    pub const INSTR_FETCH: u8 = 0;
    pub const LOAD: u8 = 1;
    pub const STORE: u8 = 2;
    pub const FLUSH_ALL: u8 = 3;
    pub const FLUSH_ASID: u8 = 4;
    pub const SHOOTDOWN: u8 = 5;
    pub const SHOOTDOWN_RANGE: u8 = 6;
    pub const ASID_SWITCH: u8 = 7;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Access(AccessKind),
    Maintenance(MaintenanceCmd),
    AsidSwitch(Asid),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub op: Op,
    pub asid: Asid,
    /// Zero for records that carry no address.
    pub va: VirtAddr,
    /// Instructions retired since the previous record.
    pub icount_delta: u32,
}

impl TraceRecord {
    pub fn access(kind: AccessKind, va: u64, asid: u8, icount_delta: u32) -> Self {
        Self {
            op: Op::Access(kind),
            asid: Asid(asid as u16),
            va: VirtAddr(va),
            icount_delta,
        }
    }

    pub fn encode(&self) -> Result<[u8; RECORD_BYTES]> {
        let asid_byte = |a: Asid| {
            u8::try_from(a.0).map_err(|_| Error::config(format!("ASID {} does not fit a trace record", a.0)))
        };
        let (op, asid, pad, va) = match self.op {
            Op::Access(AccessKind::InstrFetch) => (opcode::INSTR_FETCH, self.asid, 0, self.va.0),
            Op::Access(AccessKind::Load) => (opcode::LOAD, self.asid, 0, self.va.0),
            Op::Access(AccessKind::Store) => (opcode::STORE, self.asid, 0, self.va.0),
            Op::Maintenance(MaintenanceCmd::FlushAll) => (opcode::FLUSH_ALL, self.asid, 0, 0),
            Op::Maintenance(MaintenanceCmd::FlushAsid(a)) => (opcode::FLUSH_ASID, a, 0, 0),
            Op::Maintenance(MaintenanceCmd::Shootdown { vpn, asid }) => (opcode::SHOOTDOWN, asid, 0, vpn << 12),
            Op::Maintenance(MaintenanceCmd::ShootdownRange { lo, hi, asid }) => {
                let pages = u16::try_from(hi - lo + 1)
                    .map_err(|_| Error::config("range shootdown longer than 65535 pages"))?;
                (opcode::SHOOTDOWN_RANGE, asid, pages, lo << 12)
            }
            Op::AsidSwitch(a) => (opcode::ASID_SWITCH, a, 0, 0),
        };
        let mut b = [0u8; RECORD_BYTES];
        b[0] = op;
        b[1] = asid_byte(asid)?;
        b[2..4].copy_from_slice(&pad.to_le_bytes());
        b[4..8].copy_from_slice(&self.icount_delta.to_le_bytes());
        b[8..16].copy_from_slice(&va.to_le_bytes());
        Ok(b)
    }

    pub fn decode(b: &[u8; RECORD_BYTES], index: u64) -> Result<Self> {
        let asid = Asid(b[1] as u16);
        let pad = u16::from_le_bytes([b[2], b[3]]);
        let icount_delta = u32::from_le_bytes(b[4..8].try_into().unwrap());
        let va = u64::from_le_bytes(b[8..16].try_into().unwrap());
        let op = match b[0] {
            opcode::INSTR_FETCH => Op::Access(AccessKind::InstrFetch),
            opcode::LOAD => Op::Access(AccessKind::Load),
            opcode::STORE => Op::Access(AccessKind::Store),
            opcode::FLUSH_ALL => Op::Maintenance(MaintenanceCmd::FlushAll),
            opcode::FLUSH_ASID => Op::Maintenance(MaintenanceCmd::FlushAsid(asid)),
            opcode::SHOOTDOWN => Op::Maintenance(MaintenanceCmd::Shootdown { vpn: va >> 12, asid }),
            opcode::SHOOTDOWN_RANGE => {
                if pad == 0 {
                    return Err(parse_err(index, "range shootdown of zero pages"));
                }
                let lo = va >> 12;
                Op::Maintenance(MaintenanceCmd::ShootdownRange {
                    lo,
                    hi: lo + pad as u64 - 1,
                    asid,
                })
            }
            opcode::ASID_SWITCH => Op::AsidSwitch(asid),
            other => return Err(parse_err(index, format!("unknown opcode {other}"))),
        };
        Ok(Self {
            op,
            asid,
            va: VirtAddr(va),
            icount_delta,
        })
    }
}

fn parse_err(index: u64, reason: impl Into<String>) -> Error {
    Error::Parse {
        index,
        reason: reason.into(),
    }
}

/// Streams records into a binary trace whose length is fixed up front.
pub struct TraceWriter<W: Write> {
    out: W,
    expected: u64,
    written: u64,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, record_count: u64) -> Result<Self> {
        out.write_all(&MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&record_count.to_le_bytes())?;
        Ok(Self {
            out,
            expected: record_count,
            written: 0,
        })
    }

    pub fn write(&mut self, rec: &TraceRecord) -> Result<()> {
        self.out.write_all(&rec.encode()?)?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        if self.written != self.expected {
            return Err(Error::config(format!(
                "trace header promised {} records but {} were written",
                self.expected, self.written
            )));
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Reads a binary trace record by record.
pub struct BinaryReader<R: Read> {
    input: R,
    count: u64,
    next: u64,
    failed: bool,
}

impl<R: Read> BinaryReader<R> {
    /// Reads and checks the header.
    pub fn new(mut input: R) -> Result<Self> {
        let mut h = [0u8; HEADER_BYTES];
        input
            .read_exact(&mut h)
            .map_err(|_| parse_err(0, "file shorter than the trace header"))?;
        Self::with_header(input, h)
    }

    fn with_header(input: R, h: [u8; HEADER_BYTES]) -> Result<Self> {
        if h[0..4] != MAGIC {
            return Err(parse_err(0, "bad magic, not a VMT1 trace"));
        }
        let version = u32::from_le_bytes(h[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(parse_err(0, format!("unsupported trace version {version}")));
        }
        Ok(Self {
            input,
            count: u64::from_le_bytes(h[8..16].try_into().unwrap()),
            next: 0,
            failed: false,
        })
    }

    pub fn record_count(&self) -> u64 {
        self.count
    }
}

impl<R: Read> Iterator for BinaryReader<R> {
    type Item = Result<TraceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.next == self.count {
            return None;
        }
        let index = self.next;
        self.next += 1;
        let mut b = [0u8; RECORD_BYTES];
        let r = match self.input.read_exact(&mut b) {
            Ok(()) => TraceRecord::decode(&b, index),
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(parse_err(index, "truncated record")),
            Err(e) => Err(e.into()),
        };
        self.failed = r.is_err();
        Some(r)
    }
}

/// Parses the line-oriented text form. Each non-blank line not starting
/// with `#` is one record:
///
/// ```text
/// L 0x7f0000001000 3        # load, icount delta 3, ASID 0
/// S 0x1000 1 2              # store in ASID 2
/// I 0x400000 1              # instruction fetch
/// FLUSH 0
/// FLUSH_ASID 2 0
/// SHOOTDOWN 0x7f0000001000 2 0
/// RANGE 0x7f0000000000 16 2 0   # 16 pages
/// SWITCH 2 0
/// ```
pub fn parse_text_line(line: &str, index: u64) -> Result<Option<TraceRecord>> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return Ok(None);
    }
    let f: Vec<&str> = line.split_whitespace().collect();
    let num = |i: usize| -> Result<u64> {
        let s = f.get(i).ok_or_else(|| parse_err(index, format!("missing field {}", i + 1)))?;
        let v = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
            Some(hex) => u64::from_str_radix(hex, 16),
            None => s.parse(),
        };
        v.map_err(|_| parse_err(index, format!("bad number `{s}`")))
    };
    let asid = |i: usize| -> Result<Asid> {
        let v = num(i)?;
        u8::try_from(v)
            .map(|a| Asid(a as u16))
            .map_err(|_| parse_err(index, format!("ASID {v} out of range")))
    };
    let icount = |i: usize| -> Result<u32> {
        let v = num(i)?;
        u32::try_from(v).map_err(|_| parse_err(index, format!("icount delta {v} out of range")))
    };
    let expect_len = |n: usize| -> Result<()> {
        if f.len() > n {
            Err(parse_err(index, "trailing fields"))
        } else {
            Ok(())
        }
    };
    let rec = match f[0] {
        "I" | "L" | "S" => {
            expect_len(4)?;
            let kind = match f[0] {
                "I" => AccessKind::InstrFetch,
                "L" => AccessKind::Load,
                _ => AccessKind::Store,
            };
            TraceRecord {
                op: Op::Access(kind),
                asid: if f.len() > 3 { asid(3)? } else { Asid(0) },
                va: VirtAddr(num(1)?),
                icount_delta: icount(2)?,
            }
        }
        "FLUSH" => {
            expect_len(2)?;
            control(Op::Maintenance(MaintenanceCmd::FlushAll), Asid(0), 0, icount(1)?)
        }
        "FLUSH_ASID" => {
            expect_len(3)?;
            let a = asid(1)?;
            control(Op::Maintenance(MaintenanceCmd::FlushAsid(a)), a, 0, icount(2)?)
        }
        "SHOOTDOWN" => {
            expect_len(4)?;
            let (va, a) = (num(1)?, asid(2)?);
            let cmd = MaintenanceCmd::Shootdown { vpn: va >> 12, asid: a };
            control(Op::Maintenance(cmd), a, va, icount(3)?)
        }
        "RANGE" => {
            expect_len(5)?;
            let (va, pages, a) = (num(1)?, num(2)?, asid(3)?);
            if pages == 0 || pages > u16::MAX as u64 {
                return Err(parse_err(index, "range page count must be 1..=65535"));
            }
            let lo = va >> 12;
            let cmd = MaintenanceCmd::ShootdownRange {
                lo,
                hi: lo + pages - 1,
                asid: a,
            };
            control(Op::Maintenance(cmd), a, lo << 12, icount(4)?)
        }
        "SWITCH" => {
            expect_len(3)?;
            let a = asid(1)?;
            control(Op::AsidSwitch(a), a, 0, icount(2)?)
        }
        other => return Err(parse_err(index, format!("unknown record type `{other}`"))),
    };
    Ok(Some(rec))
}

fn control(op: Op, asid: Asid, va: u64, icount_delta: u32) -> TraceRecord {
    TraceRecord {
        op,
        asid,
        va: VirtAddr(va),
        icount_delta,
    }
}

/// Text-trace reader; record indices count records, not lines.
pub struct TextReader<R: BufRead> {
    lines: io::Lines<R>,
    index: u64,
    failed: bool,
}

impl<R: BufRead> TextReader<R> {
    pub fn new(input: R) -> Self {
        Self {
            lines: input.lines(),
            index: 0,
            failed: false,
        }
    }
}

impl<R: BufRead> Iterator for TextReader<R> {
    type Item = Result<TraceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) if e.kind() == std::io::ErrorKind::InvalidData => {
                    self.failed = true;
                    return Some(Err(parse_err(self.index, "trace is neither VMT1 nor UTF-8 text")));
                }
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e.into()));
                }
            };
            match parse_text_line(&line, self.index) {
                Ok(None) => continue,
                Ok(Some(r)) => {
                    self.index += 1;
                    return Some(Ok(r));
                }
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e));
                }
            }
        }
    }
}

/// Opens either encoding, sniffing the magic.
pub fn open_trace<R: Read + 'static>(input: R) -> Result<Box<dyn Iterator<Item = Result<TraceRecord>>>> {
    let mut input = BufReader::new(input);
    let head = input.fill_buf()?;
    if head.starts_with(&MAGIC) {
        Ok(Box::new(BinaryReader::new(input)?))
    } else if head.len() >= 4 && head[..4].iter().any(|b| !b.is_ascii()) {
        Err(parse_err(0, "bad magic, not a VMT1 trace"))
    } else {
        Ok(Box::new(TextReader::new(input)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all_ops() -> Vec<TraceRecord> {
        vec![
            TraceRecord::access(AccessKind::InstrFetch, 0x40_0000, 0, 1),
            TraceRecord::access(AccessKind::Load, 0x7f00_0000_1008, 3, 4),
            TraceRecord::access(AccessKind::Store, 0x1000, 255, 0),
            control(Op::Maintenance(MaintenanceCmd::FlushAll), Asid(0), 0, 9),
            control(Op::Maintenance(MaintenanceCmd::FlushAsid(Asid(2))), Asid(2), 0, 0),
            control(
                Op::Maintenance(MaintenanceCmd::Shootdown { vpn: 0x7f000, asid: Asid(1) }),
                Asid(1),
                0x7f000 << 12,
                2,
            ),
            control(
                Op::Maintenance(MaintenanceCmd::ShootdownRange {
                    lo: 0x100,
                    hi: 0x10f,
                    asid: Asid(1),
                }),
                Asid(1),
                0x100 << 12,
                2,
            ),
            control(Op::AsidSwitch(Asid(7)), Asid(7), 0, 5),
        ]
    }

    fn write_all(recs: &[TraceRecord]) -> Vec<u8> {
        let mut w = TraceWriter::new(Vec::new(), recs.len() as u64).unwrap();
        for r in recs {
            w.write(r).unwrap();
        }
        w.finish().unwrap()
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let bytes = write_all(&[TraceRecord::access(AccessKind::Load, 0x1122_3344_5566, 9, 0xabcd)]);
        assert_eq!(bytes.len(), HEADER_BYTES + RECORD_BYTES);
        assert_eq!(&bytes[0..4], b"VMT1");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..16], &[1, 0, 0, 0, 0, 0, 0, 0]);
        let r = &bytes[16..];
        assert_eq!(r[0], 1);
        assert_eq!(r[1], 9);
        assert_eq!(&r[2..4], &[0, 0]);
        assert_eq!(&r[4..8], &[0xcd, 0xab, 0, 0]);
        assert_eq!(&r[8..16], &[0x66, 0x55, 0x44, 0x33, 0x22, 0x11, 0, 0]);
    }

    #[test]
    fn binary_round_trip_every_op() {
        let recs = all_ops();
        let bytes = write_all(&recs);
        let back: Vec<_> = BinaryReader::new(&bytes[..]).unwrap().map(Result::unwrap).collect();
        assert_eq!(back, recs);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = write_all(&all_ops());
        let truncated = &bytes[..bytes.len() - 3];
        let errs: Vec<_> = BinaryReader::new(truncated).unwrap().filter_map(Result::err).collect();
        assert!(matches!(errs[..], [Error::Parse { index: 7, .. }]));
        bytes[0] = b'X';
        assert!(matches!(BinaryReader::new(&bytes[..]), Err(Error::Parse { index: 0, .. })));
    }

    #[test]
    fn unknown_opcode_reports_index() {
        let mut bytes = write_all(&all_ops());
        bytes[HEADER_BYTES + 2 * RECORD_BYTES] = 99;
        let r: Vec<_> = BinaryReader::new(&bytes[..]).unwrap().collect();
        assert_eq!(r.len(), 3);
        assert!(matches!(r[2], Err(Error::Parse { index: 2, .. })));
    }

    #[test]
    fn text_form() {
        let text = "# header\nL 0x7f00 3\n\nS 4096 1 2\nI 0x400000 1\nFLUSH 0\nFLUSH_ASID 2 0\n\
                    SHOOTDOWN 0x5000 1 0\nRANGE 0x100000 16 1 0\nSWITCH 7 5\n";
        let recs: Vec<_> = TextReader::new(text.as_bytes()).map(Result::unwrap).collect();
        assert_eq!(recs.len(), 8);
        assert_eq!(recs[0], TraceRecord::access(AccessKind::Load, 0x7f00, 0, 3));
        assert_eq!(recs[1], TraceRecord::access(AccessKind::Store, 4096, 2, 1));
        assert_eq!(
            recs[6].op,
            Op::Maintenance(MaintenanceCmd::ShootdownRange {
                lo: 0x100,
                hi: 0x10f,
                asid: Asid(1)
            })
        );
        let bad: Vec<_> = TextReader::new("L 1 1\nQ 3\nL 2 2\n".as_bytes()).collect();
        assert_eq!(bad.len(), 2);
        assert!(matches!(bad[1], Err(Error::Parse { index: 1, .. })));
    }

    #[test]
    fn sniffing() {
        let bytes = write_all(&all_ops());
        assert_eq!(open_trace(std::io::Cursor::new(bytes)).unwrap().count(), 8);
        assert_eq!(open_trace("L 1 1\n".as_bytes()).unwrap().count(), 1);
        assert!(open_trace(&[0xffu8, 0xfe, 0, 1, 2][..]).is_err());
    }

    proptest! {
        #[test]
        fn access_records_round_trip(op in 0u8..3, asid: u8, icount: u32, va: u64) {
            let kind = [AccessKind::InstrFetch, AccessKind::Load, AccessKind::Store][op as usize];
            let r = TraceRecord::access(kind, va, asid, icount);
            prop_assert_eq!(TraceRecord::decode(&r.encode().unwrap(), 0).unwrap(), r);
        }
    }
}
