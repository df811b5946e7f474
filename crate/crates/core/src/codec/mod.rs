//! Group-parallel compression and decompression.
//!
//! Every fixed-length group is an independent coding lane with its own
//! model session and range coder. Each thread owns a contiguous run of
//! lanes and advances a window of them in lockstep, so one batched model
//! call serves every in-flight lane at the same relative position.

mod format;

pub use format::{
    crc_of_bases, group_layout, read_header, write_header, ArchiveHeader, NMode, SequenceEntry, FORMAT_VERSION, MAGIC,
};

use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use crate::coder::{quantize_probs, CoderError, FreqTable, RangeDecoder, RangeEncoder};
use crate::grouping::{bases_of, scan_n_runs, token_of, GroupingConfig, GroupingError, NSideChannel};
use crate::model::{EntropyModel, ModelError};
use crate::sequence_io::{Base, FastaRecord};

/// Half-open `(start, end)` range of a group within a stream.
type Span = (usize, usize);

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("not an archive (bad magic)")]
    BadMagic,
    #[error("archive version {0} unsupported")]
    VersionUnsupported(u16),
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
    #[error("corrupt stream: {0}")]
    CorruptStream(String),
    #[error("checksum mismatch in sequence {sequence}")]
    CrcMismatch { sequence: usize },
    #[error("output differs from original in sequence {sequence} at base {position}")]
    Mismatch { sequence: usize, position: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grouping(#[from] GroupingError),
    #[error("worker pool: {0}")]
    Pool(String),
}

impl From<CoderError> for CodecError {
    fn from(e: CoderError) -> Self {
        CodecError::CorruptStream(e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct CodecOptions {
    pub n_mode: NMode,
    /// Groups in flight at once; 0 picks the number of logical cores.
    /// They run on at most one thread per core.
    pub workers: usize,
    /// Gather one window per in-flight lane into a single model call.
    pub batched: bool,
    /// Record this many quantized tables (lane order) for lockstep checks.
    pub table_log: usize,
}

impl Default for CodecOptions {
    fn default() -> Self {
        CodecOptions {
            n_mode: NMode::SideChannel,
            workers: 0,
            batched: true,
            table_log: 0,
        }
    }
}

impl CodecOptions {
    /// One worker, one lane at a time.
    pub fn sequential() -> Self {
        CodecOptions {
            workers: 1,
            batched: false,
            ..Self::default()
        }
    }
}

/// Size breakdown of an archive.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveStats {
    pub bases: u64,
    pub groups: usize,
    pub total_bytes: usize,
    /// Header bytes other than fragments.
    pub header_bytes: usize,
    pub fragment_bytes: usize,
    pub payload_bytes: usize,
    pub payload_sizes: Vec<u32>,
}

impl ArchiveStats {
    pub fn bpb(&self) -> f64 {
        if self.bases == 0 {
            0.0
        } else {
            self.total_bytes as f64 * 8.0 / self.bases as f64
        }
    }

    /// Fragment bits per base.
    pub fn fragment_bpb(&self) -> f64 {
        if self.bases == 0 {
            0.0
        } else {
            self.fragment_bytes as f64 * 8.0 / self.bases as f64
        }
    }

    pub fn from_archive(bytes: &[u8]) -> Result<Self, CodecError> {
        let (header, offset) = read_header(bytes)?;
        let (_, fragment_bytes) = write_header(&header);
        Ok(Self::build(&header, offset, fragment_bytes, bytes.len()))
    }

    fn build(header: &ArchiveHeader, header_len: usize, fragment_bytes: usize, total: usize) -> Self {
        let payload_sizes: Vec<u32> = header
            .sequences
            .iter()
            .flat_map(|s| s.payload_lens.iter().copied())
            .collect();
        ArchiveStats {
            bases: header.sequences.iter().map(|s| s.original_len).sum(),
            groups: payload_sizes.len(),
            total_bytes: total,
            header_bytes: header_len - fragment_bytes,
            fragment_bytes,
            payload_bytes: payload_sizes.iter().map(|&l| l as usize).sum(),
            payload_sizes,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Compressed {
    pub bytes: Vec<u8>,
    pub stats: ArchiveStats,
    pub tables: Vec<Vec<u32>>,
}

#[derive(Debug, Clone)]
pub struct Decompressed {
    pub records: Vec<FastaRecord>,
    pub tables: Vec<Vec<u32>>,
}

/// Probability of each next base given the bases already fixed inside the
/// current token, from a token distribution.
fn base_marginals(dist: &[f64], ngram: usize, prefix: &[Base]) -> [f64; 4] {
    let depth = prefix.len();
    let prefix_val = prefix.iter().fold(0usize, |acc, b| acc * 4 + (b.code() & 3) as usize);
    let rest = 4usize.pow((ngram - depth - 1) as u32);
    let mut out = [0.0; 4];
    for (b, slot) in out.iter_mut().enumerate() {
        let start = ((prefix_val * 4) + b) * rest;
        *slot = dist[start..start + rest].iter().sum();
    }
    let total: f64 = out.iter().sum();
    if total > 0.0 && total.is_finite() {
        for x in out.iter_mut() {
            *x /= total;
        }
        out
    } else {
        [0.25; 4]
    }
}

fn escape_table(n_seen: u64, n_n: u64) -> Result<(FreqTable, [f64; 2]), CoderError> {
    let eps = (n_n as f64 + 1.0) / (n_seen as f64 + 2.0);
    let probs = [1.0 - eps, eps];
    Ok((quantize_probs(&probs)?, probs))
}

enum Io<'a> {
    Enc(RangeEncoder, &'a [Base]),
    Dec(RangeDecoder<'a>),
    /// Sums model code length instead of coding.
    Measure(&'a [Base], f64),
    Idle,
}

/// One fixed-length group being coded.
struct Lane<'a, S> {
    seq: usize,
    session: S,
    /// Model view of everything coded so far (N read as A).
    view: Vec<Base>,
    /// Body bases produced so far.
    out: Vec<Base>,
    body_len: usize,
    io: Io<'a>,
    n_seen: u64,
    n_n: u64,
    tables: Vec<Vec<u32>>,
    log_cap: usize,
}

impl<'a, S> Lane<'a, S> {
    fn done(&self) -> bool {
        self.out.len() >= self.body_len
    }

    fn context(&self, len: usize) -> &[Base] {
        &self.view[self.view.len() - len..]
    }

    /// Encodes `truth` or decodes a symbol, depending on the lane.
    fn code(&mut self, table: FreqTable, probs: &[f64], truth: usize) -> Result<usize, CodecError> {
        let sym = match &mut self.io {
            Io::Enc(enc, _) => {
                enc.encode(&table, truth)?;
                truth
            }
            Io::Dec(dec) => dec.decode(&table)?,
            Io::Measure(_, bits) => {
                *bits -= probs[truth].max(f64::MIN_POSITIVE).log2();
                truth
            }
            Io::Idle => return Err(CodecError::CorruptStream("lane has no coder".into())),
        };
        if self.tables.len() < self.log_cap {
            self.tables.push(table.freqs().to_vec());
        }
        Ok(sym)
    }

    fn truth(&self, offset: usize) -> Base {
        match &self.io {
            Io::Enc(_, body) | Io::Measure(body, _) => body[self.out.len() + offset],
            _ => Base::A,
        }
    }

    /// Codes the next token (or the partial token at the end of a body)
    /// under `dist`; returns the model view of the coded bases.
    fn step(&mut self, dist: &[f64], ngram: usize, mode: NMode) -> Result<Vec<Base>, CodecError> {
        let remaining = self.body_len - self.out.len();
        let mut coded = Vec::with_capacity(ngram);
        match mode {
            NMode::SideChannel if remaining >= ngram => {
                let table = quantize_probs(dist)?;
                let truth = token_of(&self.truth_token(ngram)) as usize;
                let tok = self.code(table, dist, truth)?;
                bases_of(tok as u32, ngram, &mut coded);
            }
            NMode::SideChannel => {
                for k in 0..remaining {
                    let probs = base_marginals(dist, ngram, &coded);
                    let truth = self.truth(k).code() as usize;
                    let b = self.code(quantize_probs(&probs)?, &probs, truth)?;
                    coded.push(Base::ACGT[b]);
                }
            }
            NMode::InStream => {
                for _ in 0..remaining.min(ngram) {
                    let truth = self.truth(0).is_n() as usize;
                    let (table, escape) = escape_table(self.n_seen, self.n_n)?;
                    let is_n = self.code(table, &escape, truth)?;
                    self.n_seen += 1;
                    if is_n == 1 {
                        self.n_n += 1;
                        self.out.push(Base::N);
                        coded.push(Base::A);
                        continue;
                    }
                    let probs = base_marginals(dist, ngram, &coded);
                    let truth = self.truth(0).code() as usize;
                    let b = self.code(quantize_probs(&probs)?, &probs, truth)?;
                    self.out.push(Base::ACGT[b]);
                    coded.push(Base::ACGT[b]);
                }
                return Ok(coded);
            }
        }
        self.out.extend_from_slice(&coded);
        Ok(coded)
    }

    fn truth_token(&self, ngram: usize) -> Vec<Base> {
        (0..ngram).map(|k| self.truth(k)).collect()
    }
}

fn advance<M: EntropyModel>(
    model: &M,
    lane: &mut Lane<'_, M::Session>,
    dist: &[f64],
    g: &GroupingConfig,
    mode: NMode,
) -> Result<(), CodecError> {
    let coded = lane.step(dist, g.ngram, mode)?;
    let start = lane.view.len() - g.context_len;
    let context = lane.view[start..].to_vec();
    model.observe(&mut lane.session, &context, &coded);
    lane.view.extend_from_slice(&coded);
    // Only the trailing context is ever read again.
    if lane.view.len() > 8 * g.context_len {
        lane.view.drain(..lane.view.len() - g.context_len);
    }
    Ok(())
}

/// Advances `lanes` with at most `width` in flight. In-flight lanes move in
/// lockstep through one batched model call; a finished lane's slot passes
/// to the next waiting lane.
fn run_lanes<M: EntropyModel>(
    model: &M,
    lanes: &mut [Lane<'_, M::Session>],
    g: &GroupingConfig,
    mode: NMode,
    width: usize,
    batched: bool,
) -> Result<(), CodecError> {
    if !batched || width <= 1 {
        for lane in lanes.iter_mut() {
            while !lane.done() {
                let context = lane.context(g.context_len).to_vec();
                let dist = model.predict(&mut lane.session, &context)?;
                advance(model, lane, &dist, g, mode)?;
            }
        }
        return Ok(());
    }
    loop {
        let active: Vec<usize> = (0..lanes.len()).filter(|&i| !lanes[i].done()).take(width).collect();
        if active.is_empty() {
            return Ok(());
        }
        let contexts: Vec<Vec<Base>> = active
            .iter()
            .map(|&i| lanes[i].context(g.context_len).to_vec())
            .collect();
        let views: Vec<&[Base]> = contexts.iter().map(|c| c.as_slice()).collect();
        let dists = {
            let mut sessions: Vec<&mut M::Session> = lanes
                .iter_mut()
                .filter(|l| !l.done())
                .take(width)
                .map(|l| &mut l.session)
                .collect();
            model.predict_batch(&mut sessions, &views)?
        };
        for (&i, dist) in active.iter().zip(&dists) {
            advance(model, &mut lanes[i], dist, g, mode)?;
        }
    }
}

fn cores() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Runs every lane to completion with `opts.workers` groups in flight.
/// Threads never outnumber cores; workers beyond that widen each thread's
/// lockstep batch instead, so adding workers never adds contention.
fn run_all<M: EntropyModel>(
    model: &M,
    lanes: &mut [Lane<'_, M::Session>],
    g: &GroupingConfig,
    mode: NMode,
    opts: &CodecOptions,
) -> Result<(), CodecError> {
    let workers = match opts.workers {
        0 => cores(),
        n => n,
    }
    .min(lanes.len())
    .max(1);
    let threads = workers.min(cores());
    let width = workers.div_ceil(threads);
    if threads == 1 {
        return run_lanes(model, lanes, g, mode, width, opts.batched);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CodecError::Pool(e.to_string()))?;
    let chunk = lanes.len().div_ceil(threads);
    pool.install(|| {
        lanes
            .par_chunks_mut(chunk)
            .map(|part| run_lanes(model, part, g, mode, width, opts.batched))
            .collect::<Result<Vec<()>, CodecError>>()
    })?;
    Ok(())
}

fn collect_tables<S>(lanes: &mut [Lane<'_, S>], cap: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for lane in lanes.iter_mut() {
        if out.len() >= cap {
            break;
        }
        let take = (cap - out.len()).min(lane.tables.len());
        out.extend(lane.tables.drain(..take));
    }
    out
}

/// Stream seen by the grouping stage plus the N runs set aside.
fn prepare(bases: &[Base], mode: NMode, g: &GroupingConfig) -> (Vec<Base>, NSideChannel) {
    match mode {
        NMode::SideChannel => scan_n_runs(bases),
        NMode::InStream => {
            // Only N inside fragments is stored aside.
            let mut runs: Vec<(u64, u64)> = Vec::new();
            for (i, &b) in bases.iter().enumerate() {
                if b.is_n() && i % g.group_len < g.context_len {
                    match runs.last_mut() {
                        Some(last) if last.0 + last.1 == i as u64 => last.1 += 1,
                        _ => runs.push((i as u64, 1)),
                    }
                }
            }
            (bases.to_vec(), NSideChannel { runs })
        }
    }
}

fn check_model<M: EntropyModel>(model: &M, g: &GroupingConfig) -> Result<(), CodecError> {
    model
        .new_session(g)
        .map(|_| ())
        .map_err(|e| CodecError::ModelMismatch(e.to_string()))
}

fn a_for_n(bases: &[Base]) -> Vec<Base> {
    bases.iter().map(|&b| if b.is_n() { Base::A } else { b }).collect()
}

pub fn compress<M: EntropyModel>(
    records: &[FastaRecord],
    model: &M,
    grouping: &GroupingConfig,
    opts: &CodecOptions,
) -> Result<Compressed, CodecError> {
    grouping.validate()?;
    check_model(model, grouping)?;
    let mut entries = Vec::with_capacity(records.len());
    let mut streams = Vec::with_capacity(records.len());
    for rec in records {
        let bases = &rec.seq.bases;
        let (stream, n_runs) = prepare(bases, opts.n_mode, grouping);
        let layout = group_layout(stream.len() as u64, grouping);
        let mut fragments = Vec::with_capacity(layout.len());
        let mut at = 0;
        for &(frag, body) in &layout {
            fragments.push(stream[at..at + frag].to_vec());
            at += frag + body;
        }
        entries.push(SequenceEntry {
            header: rec.header.clone(),
            original_len: bases.len() as u64,
            crc: crc_of_bases(bases),
            n_runs,
            fragments,
            payload_lens: Vec::new(),
        });
        streams.push((stream, layout));
    }

    let mut lanes = Vec::new();
    for (si, (stream, layout)) in streams.iter().enumerate() {
        let mut at = 0;
        for &(frag, body) in layout {
            let fragment = &stream[at..at + frag];
            let body_bases = &stream[at + frag..at + frag + body];
            at += frag + body;
            lanes.push(Lane {
                seq: si,
                session: model.new_session(grouping)?,
                view: a_for_n(fragment),
                out: Vec::with_capacity(body),
                body_len: body,
                io: if body > 0 {
                    Io::Enc(RangeEncoder::new(), body_bases)
                } else {
                    Io::Idle
                },
                n_seen: 0,
                n_n: 0,
                tables: Vec::new(),
                log_cap: opts.table_log,
            });
        }
    }
    log::debug!("compressing {} sequences in {} groups", records.len(), lanes.len());
    run_all(model, &mut lanes, grouping, opts.n_mode, opts)?;
    let tables = collect_tables(&mut lanes, opts.table_log);

    let mut payloads = Vec::with_capacity(lanes.len());
    for lane in lanes {
        let bytes = match lane.io {
            Io::Enc(enc, _) => enc.finish(),
            _ => Vec::new(),
        };
        entries[lane.seq].payload_lens.push(bytes.len() as u32);
        payloads.push(bytes);
    }
    let header = ArchiveHeader {
        version: FORMAT_VERSION,
        n_mode: opts.n_mode,
        model: model.kind(),
        fingerprint: model.fingerprint(),
        grouping: *grouping,
        sequences: entries,
        payload_crc: {
            let mut h = crc32fast::Hasher::new();
            payloads.iter().for_each(|p| h.update(p));
            h.finalize()
        },
    };
    let (mut bytes, fragment_bytes) = write_header(&header);
    let header_len = bytes.len();
    for p in &payloads {
        bytes.extend_from_slice(p);
    }
    let stats = ArchiveStats::build(&header, header_len, fragment_bytes, bytes.len());
    Ok(Compressed { bytes, stats, tables })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodeLength {
    /// Model bits spent on group bodies.
    pub body_bits: f64,
    /// Two bits per stored fragment base.
    pub fragment_bits: f64,
    pub bases: u64,
    pub groups: u64,
}

impl CodeLength {
    pub fn bpb(&self) -> f64 {
        if self.bases == 0 {
            0.0
        } else {
            (self.body_bits + self.fragment_bits) / self.bases as f64
        }
    }
}

/// Model code length of `records` under the same grouping, N handling and
/// context schedule as [`compress`], without quantizing or coding.
pub fn code_length<M: EntropyModel>(
    records: &[FastaRecord],
    model: &M,
    grouping: &GroupingConfig,
    opts: &CodecOptions,
) -> Result<CodeLength, CodecError> {
    grouping.validate()?;
    check_model(model, grouping)?;
    let streams: Vec<(Vec<Base>, Vec<Span>)> = records
        .iter()
        .map(|rec| {
            let (stream, _) = prepare(&rec.seq.bases, opts.n_mode, grouping);
            let layout = group_layout(stream.len() as u64, grouping);
            (stream, layout)
        })
        .collect();
    let mut lanes = Vec::new();
    let mut fragment_bases = 0;
    for (si, (stream, layout)) in streams.iter().enumerate() {
        let mut at = 0;
        for &(frag, body) in layout {
            fragment_bases += frag;
            lanes.push(Lane {
                seq: si,
                session: model.new_session(grouping)?,
                view: a_for_n(&stream[at..at + frag]),
                out: Vec::with_capacity(body),
                body_len: body,
                io: Io::Measure(&stream[at + frag..at + frag + body], 0.0),
                n_seen: 0,
                n_n: 0,
                tables: Vec::new(),
                log_cap: 0,
            });
            at += frag + body;
        }
    }
    run_all(model, &mut lanes, grouping, opts.n_mode, opts)?;
    let body_bits = lanes
        .iter()
        .map(|l| match l.io {
            Io::Measure(_, b) => b,
            _ => 0.0,
        })
        .sum();
    Ok(CodeLength {
        body_bits,
        fragment_bits: 2.0 * fragment_bases as f64,
        bases: records.iter().map(|r| r.seq.len() as u64).sum(),
        groups: lanes.len() as u64,
    })
}

pub fn decompress<M: EntropyModel>(bytes: &[u8], model: &M, opts: &CodecOptions) -> Result<Decompressed, CodecError> {
    let (header, offset) = read_header(bytes)?;
    if header.fingerprint != model.fingerprint() || header.model != model.kind() {
        return Err(CodecError::ModelMismatch(format!(
            "archive was written with {} {}, decoder has {} {}",
            header.model,
            hex(&header.fingerprint[..8]),
            model.kind(),
            hex(&model.fingerprint()[..8])
        )));
    }
    let g = header.grouping;
    check_model(model, &g)?;
    let mode = header.n_mode;
    let mut lanes = Vec::new();
    let mut at = offset;
    for (si, s) in header.sequences.iter().enumerate() {
        let layout = group_layout(s.stream_len(mode), &g);
        for ((frag, &(_, body)), &plen) in s.fragments.iter().zip(&layout).zip(&s.payload_lens) {
            let payload = &bytes[at..at + plen as usize];
            at += plen as usize;
            let io = if body > 0 {
                Io::Dec(RangeDecoder::new(payload)?)
            } else if plen != 0 {
                return Err(CodecError::CorruptStream("payload for an empty group".into()));
            } else {
                Io::Idle
            };
            lanes.push(Lane {
                seq: si,
                session: model.new_session(&g)?,
                view: a_for_n(frag),
                out: Vec::with_capacity(body),
                body_len: body,
                io,
                n_seen: 0,
                n_n: 0,
                tables: Vec::new(),
                log_cap: opts.table_log,
            });
        }
    }
    run_all(model, &mut lanes, &g, mode, opts)?;
    let tables = collect_tables(&mut lanes, opts.table_log);

    let mut streams: Vec<Vec<Base>> = header
        .sequences
        .iter()
        .map(|s| Vec::with_capacity(s.stream_len(mode) as usize))
        .collect();
    let mut frags = header.sequences.iter().flat_map(|s| s.fragments.iter());
    for lane in lanes {
        let frag = frags.next().expect("one fragment per lane");
        streams[lane.seq].extend_from_slice(frag);
        streams[lane.seq].extend_from_slice(&lane.out);
    }
    let mut records = Vec::with_capacity(streams.len());
    for (si, (s, stream)) in header.sequences.iter().zip(streams).enumerate() {
        let bases = match mode {
            NMode::SideChannel => s.n_runs.reinsert(&stream),
            NMode::InStream => stream,
        };
        if bases.len() as u64 != s.original_len || crc_of_bases(&bases) != s.crc {
            return Err(CodecError::CrcMismatch { sequence: si });
        }
        records.push(FastaRecord::new(s.header.clone(), bases));
    }
    Ok(Decompressed { records, tables })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub stats: ArchiveStats,
    pub decode_time: Duration,
}

impl VerifyReport {
    pub fn bpb(&self) -> f64 {
        self.stats.bpb()
    }
}

/// Decodes `archive` and compares it with `original` record by record.
pub fn verify<M: EntropyModel>(
    original: &[FastaRecord],
    archive: &[u8],
    model: &M,
    opts: &CodecOptions,
) -> Result<VerifyReport, CodecError> {
    let start = Instant::now();
    let out = decompress(archive, model, opts)?;
    let decode_time = start.elapsed();
    for (si, (a, b)) in original.iter().zip(&out.records).enumerate() {
        if let Some(pos) = a.seq.bases.iter().zip(&b.seq.bases).position(|(x, y)| x != y) {
            return Err(CodecError::Mismatch {
                sequence: si,
                position: pos as u64,
            });
        }
        if a.seq.bases.len() != b.seq.bases.len() {
            return Err(CodecError::Mismatch {
                sequence: si,
                position: a.seq.bases.len().min(b.seq.bases.len()) as u64,
            });
        }
        if a.header != b.header {
            return Err(CodecError::Mismatch {
                sequence: si,
                position: 0,
            });
        }
    }
    if original.len() != out.records.len() {
        return Err(CodecError::Mismatch {
            sequence: original.len().min(out.records.len()),
            position: 0,
        });
    }
    Ok(VerifyReport {
        stats: ArchiveStats::from_archive(archive)?,
        decode_time,
    })
}
