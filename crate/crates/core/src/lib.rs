//! Lossless DNA compression with a learned entropy model.
//!
//! A transformer encoder with a carried latent array predicts the next
//! token of a base stream; the predictions are quantized and fed to an
//! integer range coder. Fixed-length groups, N-gram tokens and
//! byte-grouped embeddings make decoding parallel across groups.
//!
//! Module map:
//!
//! * [`sequence_io`]: FASTA parsing/emission and 2-bit packing.
//! * [`grouping`]: N extraction, fixed-length groups, N-gram tokens, byte-group reshape.
//! * [`numerics`]: dense tensors and a reverse-mode tape.
//! * [`geneformer`]: the transformer entropy model and checkpoints.
//! * [`coder`]: probability quantization and the range coder.
//! * [`baselines`]: uniform and order-k context models.
//! * [`codec`]: the archive container and group-parallel compress/decompress.
//! * [`trainer`]: sliding-window training with RMSProp.

pub mod baselines;
pub mod codec;
pub mod coder;
pub mod geneformer;
pub mod grouping;
pub mod model;
pub mod numerics;
pub mod sequence_io;
pub mod trainer;
