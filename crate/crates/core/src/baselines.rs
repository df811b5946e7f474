//! Count-based entropy models: a static uniform model and an adaptive
//! order-k context model with add-one smoothing.

use sha2::{Digest, Sha256};

use crate::grouping::GroupingConfig;
use crate::model::{EntropyModel, ModelError, ModelKind};
use crate::sequence_io::Base;

pub const MAX_ORDER: usize = 8;

fn descriptor_hash(desc: &str) -> [u8; 32] {
    Sha256::digest(desc.as_bytes()).into()
}

/// Every token equally likely.
#[derive(Debug, Clone, Copy, Default)]
pub struct Uniform;

#[derive(Debug, Clone, Copy)]
pub struct UniformSession {
    vocab: usize,
}

impl EntropyModel for Uniform {
    type Session = UniformSession;

    fn kind(&self) -> ModelKind {
        ModelKind::Uniform
    }

    fn fingerprint(&self) -> [u8; 32] {
        descriptor_hash("gnf-model:uniform")
    }

    fn new_session(&self, grouping: &GroupingConfig) -> Result<UniformSession, ModelError> {
        Ok(UniformSession {
            vocab: grouping.vocab(),
        })
    }

    fn predict(&self, session: &mut UniformSession, _context: &[Base]) -> Result<Vec<f64>, ModelError> {
        Ok(vec![1.0 / session.vocab as f64; session.vocab])
    }
}

/// Factory for [`OrderKModel`] sessions.
#[derive(Debug, Clone, Copy)]
pub struct OrderK {
    pub k: usize,
}

impl OrderK {
    pub fn new(k: usize) -> Result<Self, ModelError> {
        if k > MAX_ORDER {
            return Err(ModelError::Incompatible(format!("order {k} exceeds {MAX_ORDER}")));
        }
        Ok(OrderK { k })
    }
}

impl Default for OrderK {
    fn default() -> Self {
        OrderK { k: 4 }
    }
}

/// Adaptive order-k model over A/C/G/T: one count vector per k-base context,
/// every count starting at 1.
#[derive(Debug, Clone)]
pub struct OrderKModel {
    k: usize,
    ngram: usize,
    counts: Vec<u32>,
}

impl OrderKModel {
    pub fn new(k: usize) -> Self {
        OrderKModel {
            k,
            ngram: 1,
            counts: vec![1; 4usize.pow(k as u32) * 4],
        }
    }

    pub fn order(&self) -> usize {
        self.k
    }

    pub fn table_len(&self) -> usize {
        self.counts.len()
    }

    fn slot(&self, context: &[Base]) -> usize {
        let tail = &context[context.len() - self.k..];
        tail.iter().fold(0usize, |acc, b| acc * 4 + (b.code() & 3) as usize) * 4
    }

    fn slot_shifted(&self, prev_slot: usize, next: Base) -> usize {
        let ctx = prev_slot / 4;
        let modulus = 4usize.pow(self.k as u32);
        if modulus == 1 {
            return 0;
        }
        ((ctx * 4 + (next.code() & 3) as usize) % modulus) * 4
    }

    fn check(&self, context: &[Base]) -> Result<(), ModelError> {
        if context.len() < self.k {
            return Err(ModelError::ShortContext {
                got: context.len(),
                need: self.k,
            });
        }
        Ok(())
    }

    /// Next-base distribution under the k-suffix of `context`.
    pub fn predict(&self, context: &[Base]) -> Result<[f64; 4], ModelError> {
        self.check(context)?;
        let s = self.slot(context);
        let c = &self.counts[s..s + 4];
        let total: f64 = c.iter().map(|&x| x as f64).sum();
        Ok([
            c[0] as f64 / total,
            c[1] as f64 / total,
            c[2] as f64 / total,
            c[3] as f64 / total,
        ])
    }

    pub fn update(&mut self, context: &[Base], symbol: Base) -> Result<(), ModelError> {
        self.check(context)?;
        let s = self.slot(context);
        self.counts[s + (symbol.code() & 3) as usize] += 1;
        Ok(())
    }

    /// Token distribution by the chain rule over the token's bases,
    /// evaluated against the current counts.
    fn predict_token(&self, context: &[Base]) -> Result<Vec<f64>, ModelError> {
        self.check(context)?;
        let vocab = 4usize.pow(self.ngram as u32);
        let mut out = vec![0.0; vocab];
        self.expand(self.slot(context), 0, 0, 1.0, &mut out);
        Ok(out)
    }

    fn expand(&self, slot: usize, depth: usize, prefix: usize, mass: f64, out: &mut [f64]) {
        if depth == self.ngram {
            out[prefix] = mass;
            return;
        }
        let c = &self.counts[slot..slot + 4];
        let total: f64 = c.iter().map(|&x| x as f64).sum();
        for (i, &b) in Base::ACGT.iter().enumerate() {
            let p = c[i] as f64 / total;
            self.expand(self.slot_shifted(slot, b), depth + 1, prefix * 4 + i, mass * p, out);
        }
    }

    fn observe_token(&mut self, context: &[Base], token: &[Base]) {
        let mut window: Vec<Base> = context[context.len() - self.k..].to_vec();
        for &b in token {
            let s = self.slot(&window);
            self.counts[s + (b.code() & 3) as usize] += 1;
            window.push(b);
            window.remove(0);
        }
    }
}

impl EntropyModel for OrderK {
    type Session = OrderKModel;

    fn kind(&self) -> ModelKind {
        ModelKind::OrderK(self.k as u8)
    }

    fn fingerprint(&self) -> [u8; 32] {
        descriptor_hash(&format!("gnf-model:order-k:{}", self.k))
    }

    fn new_session(&self, grouping: &GroupingConfig) -> Result<OrderKModel, ModelError> {
        if grouping.context_len < self.k {
            return Err(ModelError::Incompatible(format!(
                "order {} needs at least {} context bases",
                self.k, self.k
            )));
        }
        let mut m = OrderKModel::new(self.k);
        m.ngram = grouping.ngram;
        Ok(m)
    }

    fn predict(&self, session: &mut OrderKModel, context: &[Base]) -> Result<Vec<f64>, ModelError> {
        session.predict_token(context)
    }

    fn observe(&self, session: &mut OrderKModel, context: &[Base], token: &[Base]) {
        session.observe_token(context, token);
    }
}
