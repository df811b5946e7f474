//! Integer range coding with 16-bit probability resolution.
//!
//! The encoder narrows `[low, low + range)` by the cumulative frequency
//! interval of each symbol and shifts out settled bytes whenever `range`
//! drops below 2^24. A pending `0xFF` run absorbs carries out of `low`.

use thiserror::Error;

pub const PROB_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PROB_BITS;
const TOP: u32 = 1 << 24;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CoderError {
    #[error("bad probability distribution: {0}")]
    BadDistribution(String),
    #[error("corrupt range-coded stream")]
    CorruptStream,
    #[error("symbol {symbol} out of range for table of {size}")]
    SymbolOutOfRange { symbol: usize, size: usize },
}

/// Quantized distribution summing to [`TOTAL`], every symbol at least 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FreqTable {
    freqs: Vec<u32>,
    cum: Vec<u32>,
}

impl FreqTable {
    pub fn from_freqs(freqs: Vec<u32>) -> Result<Self, CoderError> {
        if freqs.is_empty() || freqs.contains(&0) {
            return Err(CoderError::BadDistribution(
                "every symbol needs a non-zero frequency".into(),
            ));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cum.push(0);
        for &f in &freqs {
            acc = acc
                .checked_add(f)
                .ok_or_else(|| CoderError::BadDistribution("frequency overflow".into()))?;
            cum.push(acc);
        }
        if acc != TOTAL {
            return Err(CoderError::BadDistribution(format!(
                "frequencies sum to {acc}, not {TOTAL}"
            )));
        }
        Ok(FreqTable { freqs, cum })
    }

    /// Equal mass on each of `n` symbols (remainder to the lowest symbols).
    pub fn uniform(n: usize) -> Self {
        let base = TOTAL / n as u32;
        let extra = (TOTAL % n as u32) as usize;
        let freqs = (0..n).map(|i| base + u32::from(i < extra)).collect();
        FreqTable::from_freqs(freqs).expect("uniform table is valid")
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freqs
    }

    pub fn freq(&self, symbol: usize) -> u32 {
        self.freqs[symbol]
    }

    pub fn cum_low(&self, symbol: usize) -> u32 {
        self.cum[symbol]
    }

    /// Ideal code length of `symbol` under this table.
    pub fn cost_bits(&self, symbol: usize) -> f64 {
        (TOTAL as f64 / self.freqs[symbol] as f64).log2()
    }

    fn find(&self, value: u32) -> usize {
        // Largest s with cum[s] <= value.
        self.cum.partition_point(|&c| c <= value) - 1
    }
}

/// Maps a probability vector to a [`FreqTable`].
///
/// Each symbol first receives one unit; the remaining `TOTAL - V` units are
/// apportioned by largest remainder over `p / sum(p)`. Identical input bits
/// give identical tables.
pub fn quantize_probs(p: &[f64]) -> Result<FreqTable, CoderError> {
    let v = p.len();
    if v == 0 || v >= TOTAL as usize {
        return Err(CoderError::BadDistribution(format!("{v} symbols")));
    }
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(CoderError::BadDistribution("negative or non-finite entry".into()));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(CoderError::BadDistribution(format!("probabilities sum to {sum}")));
    }
    let spare = (TOTAL as usize - v) as f64;
    let mut freqs = Vec::with_capacity(v);
    let mut frac = Vec::with_capacity(v);
    let mut used: u64 = 0;
    for &x in p {
        let scaled = x / sum * spare;
        let whole = scaled.floor();
        freqs.push(1 + whole as u32);
        frac.push(scaled - whole);
        used += 1 + whole as u64;
    }
    let mut short = TOTAL as i64 - used as i64;
    if short != 0 {
        let mut order: Vec<usize> = (0..v).collect();
        if short > 0 {
            order.sort_by(|&a, &b| frac[b].total_cmp(&frac[a]).then(a.cmp(&b)));
            for &i in order.iter().cycle() {
                if short == 0 {
                    break;
                }
                freqs[i] += 1;
                short -= 1;
            }
        } else {
            order.sort_by(|&a, &b| frac[a].total_cmp(&frac[b]).then(a.cmp(&b)));
            while short < 0 {
                let before = short;
                for &i in &order {
                    if short < 0 && freqs[i] > 1 {
                        freqs[i] -= 1;
                        short += 1;
                    }
                }
                if before == short {
                    return Err(CoderError::BadDistribution("cannot normalize".into()));
                }
            }
        }
    }
    FreqTable::from_freqs(freqs)
}

#[derive(Debug, Clone)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    pub fn low(&self) -> u64 {
        self.low
    }

    pub fn range(&self) -> u32 {
        self.range
    }

    /// Bytes emitted so far, excluding the pending carry window.
    pub fn bytes_written(&self) -> usize {
        self.out.len()
    }

    pub fn encode(&mut self, table: &FreqTable, symbol: usize) -> Result<(), CoderError> {
        if symbol >= table.len() {
            return Err(CoderError::SymbolOutOfRange {
                symbol,
                size: table.len(),
            });
        }
        let r = self.range >> PROB_BITS;
        self.low += r as u64 * table.cum_low(symbol) as u64;
        self.range = r * table.freq(symbol);
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
        Ok(())
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low as u32) >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = ((self.low as u32) << 8) as u64;
    }

    /// Flushes the point of the final interval with the most trailing zero
    /// bits, then drops the bytes the decoder can infer: the always-zero
    /// leading cache byte and trailing zeros (the decoder reads zeros past
    /// the end).
    pub fn finish(mut self) -> Vec<u8> {
        let last = self.low + self.range as u64 - 1;
        self.low = (0..=32)
            .rev()
            .map(|bits| {
                let mask = (1u64 << bits) - 1;
                (self.low + mask) & !mask
            })
            .find(|&p| p <= last)
            .unwrap_or(self.low);
        for _ in 0..5 {
            self.shift_low();
        }
        debug_assert_eq!(self.out[0], 0);
        let mut out = self.out.split_off(1);
        while out.last() == Some(&0) {
            out.pop();
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    input: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
    low: u64,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self, CoderError> {
        let mut dec = RangeDecoder {
            input,
            pos: 0,
            code: 0,
            range: u32::MAX,
            low: 0,
        };
        for _ in 0..4 {
            dec.code = (dec.code << 8) | dec.next_byte() as u32;
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn range(&self) -> u32 {
        self.range
    }

    /// Mirror of the encoder's `low` register.
    pub fn low(&self) -> u64 {
        self.low
    }

    pub fn decode(&mut self, table: &FreqTable) -> Result<usize, CoderError> {
        let r = self.range >> PROB_BITS;
        let value = self.code / r;
        if value >= TOTAL {
            return Err(CoderError::CorruptStream);
        }
        let symbol = table.find(value);
        let start = r * table.cum_low(symbol);
        self.code -= start;
        self.low += start as u64;
        self.range = r * table.freq(symbol);
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.low = ((self.low as u32) << 8) as u64;
        }
        Ok(symbol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dist(rng: &mut ChaCha8Rng, v: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..v).map(|_| rng.gen::<f64>().powi(3)).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|x| x / s).collect()
    }

    fn sample(rng: &mut ChaCha8Rng, p: &[f64]) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &x) in p.iter().enumerate() {
            acc += x;
            if u < acc {
                return i;
            }
        }
        p.len() - 1
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_probs(&[0.25; 4]).unwrap().freqs(), &[16384; 4]);
        assert_eq!(
            quantize_probs(&[1.0, 0.0, 0.0, 0.0]).unwrap().freqs(),
            &[65533, 1, 1, 1]
        );
        assert!(quantize_probs(&[0.5, 0.4]).is_err());
        assert!(quantize_probs(&[1.5, -0.5]).is_err());
        assert!(quantize_probs(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn quantize_sums_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..100_000 {
            let v = [2, 4, 5, 16, 64][i % 5];
            let p = random_dist(&mut rng, v);
            let t = quantize_probs(&p).unwrap();
            assert_eq!(t.freqs().iter().sum::<u32>(), TOTAL);
            assert!(t.freqs().iter().all(|&f| f >= 1));
        }
    }

    #[test]
    fn quantization_loss_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in [4usize, 5, 16] {
            for _ in 0..20_000 {
                let p = random_dist(&mut rng, v);
                let t = quantize_probs(&p).unwrap();
                for (i, &pi) in p.iter().enumerate() {
                    if pi >= 1.0 / 1024.0 {
                        let loss = t.cost_bits(i) - (-pi.log2());
                        assert!(loss <= 1e-3, "V={v} p={pi} loss={loss}");
                    }
                }
            }
        }
    }

    #[test]
    fn round_trip_with_adaptive_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000;
        let mut tables = Vec::with_capacity(n);
        let mut symbols = Vec::with_capacity(n);
        let mut enc = RangeEncoder::new();
        for _ in 0..n {
            let v = rng.gen_range(2..=5);
            let p = random_dist(&mut rng, v);
            let s = sample(&mut rng, &p);
            let t = quantize_probs(&p).unwrap();
            enc.encode(&t, s).unwrap();
            tables.push(t);
            symbols.push(s);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for (t, &s) in tables.iter().zip(&symbols) {
            assert_eq!(dec.decode(t).unwrap(), s);
        }
    }

    #[test]
    fn lockstep_state_mirroring() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut enc = RangeEncoder::new();
        let mut log = Vec::new();
        let mut states = Vec::new();
        for _ in 0..20_000 {
            let p = random_dist(&mut rng, 4);
            let t = quantize_probs(&p).unwrap();
            let s = sample(&mut rng, &p);
            let (lo, r) = (enc.low(), enc.range() as u64);
            enc.encode(&t, s).unwrap();
            states.push((enc.low() as u32, enc.range()));
            log.push((t, s));
            // Nesting is checked before renormalization rescales the window.
            let r2 = (r >> PROB_BITS) * log.last().unwrap().0.freq(s) as u64;
            let lo2 = lo + (r >> PROB_BITS) * log.last().unwrap().0.cum_low(s) as u64;
            assert!(lo2 >= lo && lo2 + r2 <= lo + r);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for ((t, s), (lo, r)) in log.iter().zip(&states) {
            assert_eq!(dec.decode(t).unwrap(), *s);
            assert_eq!(dec.range(), *r);
            assert_eq!(dec.low() as u32, *lo);
        }
    }

    #[test]
    fn half_probability_symbols_cost_one_bit() {
        let t = FreqTable::from_freqs(vec![32768, 32768]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 80_000;
        let mut enc = RangeEncoder::new();
        for _ in 0..n {
            enc.encode(&t, rng.gen_range(0..2)).unwrap();
        }
        let len = enc.finish().len();
        assert!(len >= n / 8 && len <= n / 8 + 8, "{len}");
    }

    #[test]
    fn dominant_symbol_is_nearly_free() {
        let t = quantize_probs(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let mut enc = RangeEncoder::new();
        let n = 100_000;
        for _ in 0..n {
            enc.encode(&t, 0).unwrap();
        }
        let bits = enc.finish().len() as f64 * 8.0;
        let ideal = n as f64 * t.cost_bits(0);
        assert!(bits <= ideal + 64.0, "{bits} vs {ideal}");
    }

    #[test]
    fn empty_stream() {
        let bytes = RangeEncoder::new().finish();
        assert!(bytes.is_empty());
        assert!(RangeDecoder::new(&bytes).is_ok());
    }

    #[test]
    fn all_zero_output_is_elided() {
        let t = FreqTable::uniform(4);
        let mut enc = RangeEncoder::new();
        for _ in 0..1000 {
            enc.encode(&t, 0).unwrap();
        }
        let bytes = enc.finish();
        assert!(bytes.is_empty());
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        assert!((0..1000).all(|_| dec.decode(&t).unwrap() == 0));
    }

    #[test]
    fn termination_costs_at_most_one_byte() {
        let t = FreqTable::uniform(4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for n in [1usize, 3, 4, 17, 936, 10_000] {
            let symbols: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let mut enc = RangeEncoder::new();
            for &s in &symbols {
                enc.encode(&t, s).unwrap();
            }
            let bytes = enc.finish();
            assert!(
                bytes.len() <= (2 * n).div_ceil(8) + 1,
                "{n} symbols, {} bytes",
                bytes.len()
            );
            let mut dec = RangeDecoder::new(&bytes).unwrap();
            let back: Vec<usize> = (0..n).map(|_| dec.decode(&t).unwrap()).collect();
            assert_eq!(back, symbols);
        }
    }

    #[test]
    fn length_within_shannon_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut enc = RangeEncoder::new();
        let mut ideal = 0.0;
        for _ in 0..1_000_000 {
            let p = random_dist(&mut rng, 4);
            let t = quantize_probs(&p).unwrap();
            let s = sample(&mut rng, &p);
            ideal += t.cost_bits(s);
            enc.encode(&t, s).unwrap();
        }
        let bits = enc.finish().len() as f64 * 8.0;
        assert!(bits <= ideal * 1.001 + 64.0, "{bits} vs {ideal}");
    }

    #[test]
    fn deterministic_output() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut enc = RangeEncoder::new();
            for _ in 0..5000 {
                let p = random_dist(&mut rng, 4);
                enc.encode(&quantize_probs(&p).unwrap(), sample(&mut rng, &p)).unwrap();
            }
            enc.finish()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn garbage_is_rejected_or_detected() {
        let t = FreqTable::uniform(4);
        let mut dec = RangeDecoder::new(&[0xFF, 0xFF, 0xFF, 0xFF]).unwrap();
        // code = 2^32 - 1 lands in the unused top of the range.
        let big = FreqTable::from_freqs(vec![TOTAL - 1, 1]).unwrap();
        let r = dec.decode(&big);
        assert!(r.is_ok() || r == Err(CoderError::CorruptStream));
        let _ = dec.decode(&t);
    }
}
