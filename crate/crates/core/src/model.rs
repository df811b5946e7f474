//! The entropy-model interface shared by the baselines and GeneFormer.
//!
//! A model hands out one [`EntropyModel::Session`] per coding stream (one
//! per fixed-length group). Sessions carry whatever state evolves while
//! coding: adaptive counts for order-k, the latent array for GeneFormer.
//! Encoder and decoder drive sessions through identical call sequences.

use std::sync::Arc;

use thiserror::Error;

use crate::baselines::{OrderK, OrderKModel, Uniform};
use crate::geneformer::{GeneFormer, GeneFormerSession};
use crate::grouping::{GroupingConfig, GroupingError};
use crate::numerics::NumericsError;
use crate::sequence_io::Base;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model does not fit grouping: {0}")]
    Incompatible(String),
    #[error("context of {got} bases, expected at least {need}")]
    ShortContext { got: usize, need: usize },
    #[error("context of {got} bases, expected exactly {expected}")]
    BadContextLength { got: usize, expected: usize },
    #[error(transparent)]
    Grouping(#[from] GroupingError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Identifies a model family in archive headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Uniform,
    OrderK(u8),
    GeneFormer,
}

impl ModelKind {
    pub fn code(self) -> (u8, u8) {
        match self {
            ModelKind::Uniform => (0, 0),
            ModelKind::OrderK(k) => (1, k),
            ModelKind::GeneFormer => (2, 0),
        }
    }

    pub fn from_code(kind: u8, arg: u8) -> Option<Self> {
        match kind {
            0 => Some(ModelKind::Uniform),
            1 => Some(ModelKind::OrderK(arg)),
            2 => Some(ModelKind::GeneFormer),
            _ => None,
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Uniform => write!(f, "uniform"),
            ModelKind::OrderK(k) => write!(f, "order-k:{k}"),
            ModelKind::GeneFormer => write!(f, "geneformer"),
        }
    }
}

pub trait EntropyModel: Sync {
    type Session: Send;

    fn kind(&self) -> ModelKind;

    /// Binds an archive to the exact model needed to decode it.
    fn fingerprint(&self) -> [u8; 32];

    fn new_session(&self, grouping: &GroupingConfig) -> Result<Self::Session, ModelError>;

    /// Distribution over the `4^ngram` next tokens given the most recent
    /// `context_len` bases. May advance session state (e.g. latent array).
    fn predict(&self, session: &mut Self::Session, context: &[Base]) -> Result<Vec<f64>, ModelError>;

    /// Reports the token that actually followed `context`.
    fn observe(&self, _session: &mut Self::Session, _context: &[Base], _token: &[Base]) {}

    /// Predicts for several independent sessions at once. Results must be
    /// bitwise identical to calling [`EntropyModel::predict`] on each.
    fn predict_batch(
        &self,
        sessions: &mut [&mut Self::Session],
        contexts: &[&[Base]],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        sessions
            .iter_mut()
            .zip(contexts)
            .map(|(s, c)| self.predict(s, c))
            .collect()
    }
}

/// Runtime-selected model.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Uniform(Uniform),
    OrderK(OrderK),
    GeneFormer(Arc<GeneFormer>),
}

pub enum AnySession {
    Uniform(<Uniform as EntropyModel>::Session),
    OrderK(OrderKModel),
    GeneFormer(GeneFormerSession),
}

impl AnyModel {
    pub fn describe(&self) -> String {
        self.kind().to_string()
    }
}

impl EntropyModel for AnyModel {
    type Session = AnySession;

    fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Uniform(m) => m.kind(),
            AnyModel::OrderK(m) => m.kind(),
            AnyModel::GeneFormer(m) => m.kind(),
        }
    }

    fn fingerprint(&self) -> [u8; 32] {
        match self {
            AnyModel::Uniform(m) => m.fingerprint(),
            AnyModel::OrderK(m) => m.fingerprint(),
            AnyModel::GeneFormer(m) => m.fingerprint(),
        }
    }

    fn new_session(&self, grouping: &GroupingConfig) -> Result<AnySession, ModelError> {
        Ok(match self {
            AnyModel::Uniform(m) => AnySession::Uniform(m.new_session(grouping)?),
            AnyModel::OrderK(m) => AnySession::OrderK(m.new_session(grouping)?),
            AnyModel::GeneFormer(m) => AnySession::GeneFormer(m.new_session(grouping)?),
        })
    }

    fn predict(&self, session: &mut AnySession, context: &[Base]) -> Result<Vec<f64>, ModelError> {
        match (self, session) {
            (AnyModel::Uniform(m), AnySession::Uniform(s)) => m.predict(s, context),
            (AnyModel::OrderK(m), AnySession::OrderK(s)) => m.predict(s, context),
            (AnyModel::GeneFormer(m), AnySession::GeneFormer(s)) => m.predict(s, context),
            _ => Err(ModelError::Incompatible("session belongs to another model".into())),
        }
    }

    fn observe(&self, session: &mut AnySession, context: &[Base], token: &[Base]) {
        match (self, session) {
            (AnyModel::OrderK(m), AnySession::OrderK(s)) => m.observe(s, context, token),
            (AnyModel::GeneFormer(m), AnySession::GeneFormer(s)) => m.observe(s, context, token),
            _ => {}
        }
    }

    fn predict_batch(
        &self,
        sessions: &mut [&mut AnySession],
        contexts: &[&[Base]],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        match self {
            AnyModel::GeneFormer(m) => {
                let mut inner: Vec<&mut GeneFormerSession> = Vec::with_capacity(sessions.len());
                for s in sessions.iter_mut() {
                    match &mut **s {
                        AnySession::GeneFormer(g) => inner.push(g),
                        _ => return Err(ModelError::Incompatible("session belongs to another model".into())),
                    }
                }
                m.predict_batch(&mut inner, contexts)
            }
            _ => sessions
                .iter_mut()
                .zip(contexts)
                .map(|(s, c)| self.predict(s, c))
                .collect(),
        }
    }
}
