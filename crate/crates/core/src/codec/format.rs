//! Archive container. Fixed-width integers are little-endian; varints are
//! LEB128, which keeps per-sequence overhead small for short records.
//!
//! ```text
//! "GNF1" | version u16 | flags u8 | model kind u8 | model arg u8
//! | fingerprint [32] | group_len u64 | context_len u32 | ngram u8 | byte_group u8
//! | sequence count u32
//! | per sequence:
//! |   header_len varint | header bytes | original_len varint | crc32 of bases u32
//! |   n-run count varint | (gap varint, len varint)*
//! |   group count varint | fragments, 2-bit packed, group order
//! |   payload length varint per group
//! | crc32 of all payloads u32
//! | header crc32 u32
//! | payloads, sequence-major, group order
//! ```
//!
//! Fragment lengths are implied by the stream length and the grouping.

use crate::grouping::{GroupingConfig, NSideChannel};
use crate::model::ModelKind;
use crate::sequence_io::{pack_2bit, unpack_2bit, Base};

use super::CodecError;

pub const MAGIC: &[u8; 4] = b"GNF1";
pub const FORMAT_VERSION: u16 = 1;

const FLAG_IN_STREAM: u8 = 1;

/// Where N bases go.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NMode {
    /// Stripped into run-length side information before modeling.
    #[default]
    SideChannel,
    /// Coded in place behind a per-base escape; only fragment N runs are
    /// kept aside.
    InStream,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceEntry {
    pub header: String,
    pub original_len: u64,
    pub crc: u32,
    /// All N runs (side channel) or those inside fragments (in-stream).
    pub n_runs: NSideChannel,
    /// Per group; may contain N in in-stream mode.
    pub fragments: Vec<Vec<Base>>,
    pub payload_lens: Vec<u32>,
}

impl SequenceEntry {
    /// Bases seen by the grouping stage.
    pub fn stream_len(&self, mode: NMode) -> u64 {
        match mode {
            NMode::SideChannel => self.original_len - self.n_runs.total_n(),
            NMode::InStream => self.original_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchiveHeader {
    pub version: u16,
    pub n_mode: NMode,
    pub model: ModelKind,
    pub fingerprint: [u8; 32],
    pub grouping: GroupingConfig,
    pub sequences: Vec<SequenceEntry>,
    /// CRC-32 of the concatenated payloads.
    pub payload_crc: u32,
}

/// `(fragment length, body length)` of every group of a stream.
pub fn group_layout(stream_len: u64, g: &GroupingConfig) -> Vec<(usize, usize)> {
    let group_len = g.group_len as u64;
    let count = stream_len.div_ceil(group_len);
    (0..count)
        .map(|i| {
            let chunk = (stream_len - i * group_len).min(group_len) as usize;
            let frag = chunk.min(g.context_len);
            (frag, chunk - frag)
        })
        .collect()
}

pub fn crc_of_bases(bases: &[Base]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    let ascii: Vec<u8> = bases.iter().map(|b| b.to_ascii()).collect();
    h.update(&ascii);
    h.finalize()
}

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn a_for_n(bases: &[Base]) -> Vec<Base> {
    bases.iter().map(|&b| if b.is_n() { Base::A } else { b }).collect()
}

/// Serialized header plus the number of those bytes spent on fragments.
pub fn write_header(h: &ArchiveHeader) -> (Vec<u8>, usize) {
    let mut out = Vec::new();
    let mut fragment_bytes = 0;
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&h.version.to_le_bytes());
    out.push(if h.n_mode == NMode::InStream { FLAG_IN_STREAM } else { 0 });
    let (kind, arg) = h.model.code();
    out.push(kind);
    out.push(arg);
    out.extend_from_slice(&h.fingerprint);
    out.extend_from_slice(&(h.grouping.group_len as u64).to_le_bytes());
    out.extend_from_slice(&(h.grouping.context_len as u32).to_le_bytes());
    out.push(h.grouping.ngram as u8);
    out.push(h.grouping.byte_group as u8);
    out.extend_from_slice(&(h.sequences.len() as u32).to_le_bytes());
    for s in &h.sequences {
        put_varint(&mut out, s.header.len() as u64);
        out.extend_from_slice(s.header.as_bytes());
        put_varint(&mut out, s.original_len);
        out.extend_from_slice(&s.crc.to_le_bytes());
        put_varint(&mut out, s.n_runs.runs.len() as u64);
        let mut prev_end = 0;
        for &(start, len) in &s.n_runs.runs {
            put_varint(&mut out, start - prev_end);
            put_varint(&mut out, len);
            prev_end = start + len;
        }
        put_varint(&mut out, s.fragments.len() as u64);
        for f in &s.fragments {
            let packed = pack_2bit(&a_for_n(f)).expect("N replaced");
            fragment_bytes += packed.len();
            out.extend_from_slice(&packed);
        }
        for &len in &s.payload_lens {
            put_varint(&mut out, len as u64);
        }
    }
    out.extend_from_slice(&h.payload_crc.to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    (out, fragment_bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.bytes.len() - self.pos < n {
            return Err(CodecError::CorruptStream("header truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn varint(&mut self) -> Result<u64, CodecError> {
        let mut v = 0u64;
        for shift in (0..64).step_by(7) {
            let b = self.u8()?;
            v |= ((b & 0x7f) as u64) << shift;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(CodecError::CorruptStream("varint overflow".into()))
    }
}

fn corrupt<T>(msg: impl Into<String>) -> Result<T, CodecError> {
    Err(CodecError::CorruptStream(msg.into()))
}

/// Parses the header; returns it with the offset of the first payload.
pub fn read_header(bytes: &[u8]) -> Result<(ArchiveHeader, usize), CodecError> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(CodecError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(CodecError::VersionUnsupported(version));
    }
    let flags = r.u8()?;
    if flags & !FLAG_IN_STREAM != 0 {
        return corrupt(format!("unknown flags {flags:#x}"));
    }
    let n_mode = if flags & FLAG_IN_STREAM != 0 {
        NMode::InStream
    } else {
        NMode::SideChannel
    };
    let (kind, arg) = (r.u8()?, r.u8()?);
    let model = match ModelKind::from_code(kind, arg) {
        Some(m) => m,
        None => return corrupt(format!("unknown model kind {kind}")),
    };
    let fingerprint: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let grouping = GroupingConfig {
        group_len: r.u64()? as usize,
        context_len: r.u32()? as usize,
        ngram: r.u8()? as usize,
        byte_group: r.u8()? as usize,
    };
    if grouping.validate().is_err() {
        return corrupt("invalid grouping parameters");
    }
    let count = r.u32()? as usize;
    let mut sequences = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let hlen = r.varint()? as usize;
        let header = match std::str::from_utf8(r.take(hlen)?) {
            Ok(s) => s.to_string(),
            Err(_) => return corrupt("sequence header is not UTF-8"),
        };
        let original_len = r.varint()?;
        let crc = r.u32()?;
        let n_count = r.varint()? as usize;
        let mut runs = Vec::with_capacity(n_count.min(1 << 16));
        let mut prev_end = 0u64;
        for _ in 0..n_count {
            let start = prev_end.checked_add(r.varint()?);
            let len = r.varint()?;
            match start.and_then(|s| s.checked_add(len).map(|e| (s, e))) {
                Some((s, e)) if len > 0 && e <= original_len => {
                    runs.push((s, len));
                    prev_end = e;
                }
                _ => return corrupt("N run out of range"),
            }
        }
        let n_runs = NSideChannel { runs };
        if n_mode == NMode::SideChannel && n_runs.total_n() > original_len {
            return corrupt("more N than bases");
        }
        let groups = r.varint()? as usize;
        let stream_len = match n_mode {
            NMode::SideChannel => original_len - n_runs.total_n(),
            NMode::InStream => original_len,
        };
        let layout = group_layout(stream_len, &grouping);
        if layout.len() != groups {
            return corrupt(format!("{groups} groups recorded, layout needs {}", layout.len()));
        }
        let mut fragments = Vec::with_capacity(groups);
        for &(frag, _) in &layout {
            let packed = r.take(frag.div_ceil(4))?;
            let bases = unpack_2bit(packed, frag).map_err(|e| CodecError::CorruptStream(e.to_string()))?;
            fragments.push(bases);
        }
        if n_mode == NMode::InStream {
            for &(start, len) in &n_runs.runs {
                for pos in start..start + len {
                    let (gi, off) = (
                        (pos / grouping.group_len as u64) as usize,
                        (pos % grouping.group_len as u64) as usize,
                    );
                    match fragments.get_mut(gi).and_then(|f| f.get_mut(off)) {
                        Some(b) => *b = Base::N,
                        None => return corrupt("fragment N run outside fragments"),
                    }
                }
            }
        }
        let mut payload_lens = Vec::with_capacity(groups);
        for _ in 0..groups {
            match u32::try_from(r.varint()?) {
                Ok(len) => payload_lens.push(len),
                Err(_) => return corrupt("payload length out of range"),
            }
        }
        sequences.push(SequenceEntry {
            header,
            original_len,
            crc,
            n_runs,
            fragments,
            payload_lens,
        });
    }
    let payload_crc = r.u32()?;
    let body_end = r.pos;
    let stored = r.u32()?;
    if crc32fast::hash(&bytes[..body_end]) != stored {
        return Err(CodecError::CorruptStream("header checksum mismatch".into()));
    }
    let header = ArchiveHeader {
        version,
        n_mode,
        model,
        fingerprint,
        grouping,
        sequences,
        payload_crc,
    };
    let payload_total: u64 = header
        .sequences
        .iter()
        .flat_map(|s| s.payload_lens.iter())
        .map(|&l| l as u64)
        .sum();
    if payload_total != (bytes.len() - r.pos) as u64 {
        return corrupt(format!(
            "payloads need {payload_total} bytes, {} present",
            bytes.len() - r.pos
        ));
    }
    if crc32fast::hash(&bytes[r.pos..]) != payload_crc {
        return corrupt("payload checksum mismatch");
    }
    Ok((header, r.pos))
}
