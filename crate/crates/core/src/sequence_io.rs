//! FASTA ingestion and emission, plus 2-bit packing of N-free fragments.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Column width used by [`write_fasta`].
pub const FASTA_LINE_WIDTH: usize = 70;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SequenceError {
    #[error("unknown base {1:?} at position {0}")]
    UnknownBase(usize, char),
    #[error("no FASTA records found")]
    EmptyFile,
    #[error("sequence data before the first '>' header at byte {0}")]
    MissingHeader(usize),
    #[error("fragment contains an N base")]
    ContainsN,
    #[error("packed length mismatch: {bytes} bytes cannot hold exactly {bases} bases")]
    LengthMismatch { bytes: usize, bases: usize },
    #[error("split ratios must be non-negative and sum to 1, got {0}")]
    BadRatios(String),
}

/// A nucleotide. The numeric codes are fixed: A=0, C=1, G=2, T=3, N=4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Base {
    A = 0,
    C = 1,
    G = 2,
    T = 3,
    N = 4,
}

impl Base {
    pub const ACGT: [Base; 4] = [Base::A, Base::C, Base::G, Base::T];

    #[inline]
    pub fn code(self) -> u8 {
        self as u8
    }

    #[inline]
    pub fn from_code(code: u8) -> Option<Base> {
        match code {
            0 => Some(Base::A),
            1 => Some(Base::C),
            2 => Some(Base::G),
            3 => Some(Base::T),
            4 => Some(Base::N),
            _ => None,
        }
    }

    /// Case-insensitive parse of a single IUPAC letter restricted to ACGTN.
    #[inline]
    pub fn from_ascii(byte: u8) -> Option<Base> {
        match byte {
            b'A' | b'a' => Some(Base::A),
            b'C' | b'c' => Some(Base::C),
            b'G' | b'g' => Some(Base::G),
            b'T' | b't' => Some(Base::T),
            b'N' | b'n' => Some(Base::N),
            _ => None,
        }
    }

    #[inline]
    pub fn to_ascii(self) -> u8 {
        b"ACGTN"[self as usize]
    }

    #[inline]
    pub fn is_n(self) -> bool {
        self == Base::N
    }
}

impl fmt::Display for Base {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_ascii() as char)
    }
}

/// An identified run of bases.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BaseSeq {
    pub id: String,
    pub bases: Vec<Base>,
}

impl BaseSeq {
    pub fn new(id: impl Into<String>, bases: Vec<Base>) -> Self {
        BaseSeq { id: id.into(), bases }
    }

    /// Parses a plain base string such as `"ACGTN"`.
    pub fn from_str_bases(id: impl Into<String>, s: &str) -> Result<Self, SequenceError> {
        let bases = s
            .bytes()
            .enumerate()
            .map(|(i, b)| Base::from_ascii(b).ok_or(SequenceError::UnknownBase(i, b as char)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BaseSeq::new(id, bases))
    }

    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }

    pub fn contains_n(&self) -> bool {
        self.bases.iter().any(|b| b.is_n())
    }

    pub fn to_ascii_string(&self) -> String {
        self.bases.iter().map(|b| b.to_ascii() as char).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FastaRecord {
    pub header: String,
    pub seq: BaseSeq,
}

impl FastaRecord {
    pub fn new(header: impl Into<String>, bases: Vec<Base>) -> Self {
        let header = header.into();
        let id = header.split_whitespace().next().unwrap_or("").to_string();
        FastaRecord {
            header,
            seq: BaseSeq::new(id, bases),
        }
    }
}

/// Parses FASTA text. The position in [`SequenceError::UnknownBase`] is the
/// index of the offending character within its record's sequence, not
/// counting whitespace.
pub fn parse_fasta(bytes: &[u8]) -> Result<Vec<FastaRecord>, SequenceError> {
    let mut records = Vec::new();
    let mut current: Option<(String, Vec<Base>)> = None;
    let mut pos = 0usize;

    for line in bytes.split_inclusive(|&b| b == b'\n') {
        let start = pos;
        pos += line.len();
        let content = trim_line_end(line);
        if let Some(rest) = content.strip_prefix(b">") {
            if let Some((header, bases)) = current.take() {
                records.push(FastaRecord::new(header, bases));
            }
            let header = String::from_utf8_lossy(rest).trim().to_string();
            current = Some((header, Vec::new()));
            continue;
        }
        for (offset, &b) in content.iter().enumerate() {
            if b.is_ascii_whitespace() {
                continue;
            }
            let Some((_, bases)) = current.as_mut() else {
                return Err(SequenceError::MissingHeader(start + offset));
            };
            match Base::from_ascii(b) {
                Some(base) => bases.push(base),
                None => return Err(SequenceError::UnknownBase(bases.len(), b as char)),
            }
        }
    }
    if let Some((header, bases)) = current.take() {
        records.push(FastaRecord::new(header, bases));
    }
    if records.is_empty() {
        return Err(SequenceError::EmptyFile);
    }
    Ok(records)
}

fn trim_line_end(line: &[u8]) -> &[u8] {
    let mut end = line.len();
    while end > 0 && (line[end - 1] == b'\n' || line[end - 1] == b'\r') {
        end -= 1;
    }
    &line[..end]
}

/// Emits upper-case FASTA wrapped at [`FASTA_LINE_WIDTH`] columns.
pub fn write_fasta(records: &[FastaRecord]) -> Vec<u8> {
    let total: usize = records.iter().map(|r| r.seq.len() + r.header.len() + 2).sum();
    let mut out = Vec::with_capacity(total + total / FASTA_LINE_WIDTH + 1);
    for rec in records {
        out.push(b'>');
        out.extend_from_slice(rec.header.as_bytes());
        out.push(b'\n');
        for chunk in rec.seq.bases.chunks(FASTA_LINE_WIDTH) {
            out.extend(chunk.iter().map(|b| b.to_ascii()));
            out.push(b'\n');
        }
    }
    out
}

/// Packs A/C/G/T four to a byte, first base in the two most significant bits.
pub fn pack_2bit(bases: &[Base]) -> Result<Vec<u8>, SequenceError> {
    let mut out = vec![0u8; bases.len().div_ceil(4)];
    for (i, &b) in bases.iter().enumerate() {
        if b.is_n() {
            return Err(SequenceError::ContainsN);
        }
        out[i / 4] |= b.code() << (6 - 2 * (i % 4));
    }
    Ok(out)
}

pub fn unpack_2bit(bytes: &[u8], length: usize) -> Result<Vec<Base>, SequenceError> {
    if bytes.len() != length.div_ceil(4) {
        return Err(SequenceError::LengthMismatch {
            bytes: bytes.len(),
            bases: length,
        });
    }
    Ok((0..length)
        .map(|i| Base::ACGT[((bytes[i / 4] >> (6 - 2 * (i % 4))) & 0b11) as usize])
        .collect())
}

/// Train, validation and test partitions.
pub type Split<T> = (Vec<T>, Vec<T>, Vec<T>);

/// Deterministically shuffles `records` under `seed` and partitions them
/// into (train, validation, test). Validation and test sizes are
/// `floor(ratio * count)`; the remainder goes to train.
pub fn split_dataset<T: Clone>(records: &[T], ratios: (f64, f64, f64), seed: u64) -> Result<Split<T>, SequenceError> {
    let (tr, va, te) = ratios;
    if tr < 0.0 || va < 0.0 || te < 0.0 || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(SequenceError::BadRatios(format!("{ratios:?}")));
    }
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    // Small epsilon guards against 0.7 * 10 = 6.999... style rounding.
    let n_val = ((va * n as f64) + 1e-9).floor() as usize;
    let n_test = ((te * n as f64) + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;

    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bases(s: &str) -> Vec<Base> {
        BaseSeq::from_str_bases("", s).unwrap().bases
    }

    #[test]
    fn parses_single_record() {
        let recs = parse_fasta(b">x\nACGT\n").unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].header, "x");
        assert_eq!(recs[0].seq.bases, bases("ACGT"));
    }

    #[test]
    fn line_wraps_and_case_are_ignored() {
        let recs = parse_fasta(b">x\nAC\ngt\r\n").unwrap();
        assert_eq!(recs[0].seq.bases, bases("ACGT"));
    }

    #[test]
    fn unknown_base_reports_offset() {
        let err = parse_fasta(b">x\nACQT\n").unwrap_err();
        assert_eq!(err, SequenceError::UnknownBase(2, 'Q'));
        let err = parse_fasta(b">x\nAC\nQT\n").unwrap_err();
        assert_eq!(err, SequenceError::UnknownBase(2, 'Q'));
        let err = BaseSeq::from_str_bases("x", "ACQT").unwrap_err();
        assert_eq!(err, SequenceError::UnknownBase(2, 'Q'));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert_eq!(parse_fasta(b"").unwrap_err(), SequenceError::EmptyFile);
        assert_eq!(parse_fasta(b"\n\n").unwrap_err(), SequenceError::EmptyFile);
    }

    #[test]
    fn multi_record() {
        let recs = parse_fasta(b">a desc\nAC\n>b\nNN\nT\n").unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].seq.id, "a");
        assert_eq!(recs[0].header, "a desc");
        assert_eq!(recs[1].seq.bases, bases("NNT"));
    }

    #[test]
    fn pack_examples() {
        assert_eq!(pack_2bit(&bases("ACGT")).unwrap(), vec![0b0001_1011]);
        assert_eq!(pack_2bit(&bases("AAAA")).unwrap(), vec![0x00]);
        assert_eq!(pack_2bit(&bases("ACGTN")).unwrap_err(), SequenceError::ContainsN);
        assert_eq!(unpack_2bit(&[0b0001_1011], 4).unwrap(), bases("ACGT"));
        assert_eq!(unpack_2bit(&[0x00], 1).unwrap(), bases("A"));
        assert!(matches!(
            unpack_2bit(&[0x00], 5),
            Err(SequenceError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn split_sizes() {
        let items: Vec<u32> = (0..10).collect();
        let (a, b, c) = split_dataset(&items, (0.7, 0.2, 0.1), 7).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (7, 2, 1));
        let (a, b, c) = split_dataset(&items[..1], (0.7, 0.2, 0.1), 7).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (1, 0, 0));
        let again = split_dataset(&items, (0.7, 0.2, 0.1), 7).unwrap();
        assert_eq!(again, split_dataset(&items, (0.7, 0.2, 0.1), 7).unwrap());
        assert!(split_dataset(&items, (0.5, 0.2, 0.1), 7).is_err());
    }

    fn base_strategy() -> impl Strategy<Value = Base> {
        prop_oneof![Just(Base::A), Just(Base::C), Just(Base::G), Just(Base::T)]
    }

    proptest! {
        #[test]
        fn pack_unpack_bijection(seq in proptest::collection::vec(base_strategy(), 0..10_000)) {
            let packed = pack_2bit(&seq).unwrap();
            prop_assert_eq!(packed.len(), seq.len().div_ceil(4));
            prop_assert_eq!(unpack_2bit(&packed, seq.len()).unwrap(), seq);
        }

        #[test]
        fn fasta_round_trip(
            recs in proptest::collection::vec(
                ("[a-z][a-z0-9_]{0,8}", proptest::collection::vec(
                    prop_oneof![base_strategy(), Just(Base::N)], 1..300)),
                1..5)
        ) {
            let records: Vec<FastaRecord> =
                recs.into_iter().map(|(h, b)| FastaRecord::new(h, b)).collect();
            let text = write_fasta(&records);
            let back = parse_fasta(&text).unwrap();
            prop_assert_eq!(&back, &records);
            prop_assert_eq!(write_fasta(&back), text);
        }
    }
}
