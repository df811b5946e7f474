#![allow(dead_code)]

pub mod oracle;

use gnf::geneformer::{EmbedMode, GeneFormer, ModelConfig};
use gnf::numerics::Tensor;
use gnf::sequence_io::Base;
use rand::Rng;

pub fn random_bases<R: Rng>(rng: &mut R, n: usize) -> Vec<Base> {
    (0..n).map(|_| Base::ACGT[rng.gen_range(0..4)]).collect()
}

/// A small random-shaped configuration.
pub fn tiny_config<R: Rng>(rng: &mut R, heads: usize) -> ModelConfig {
    let d = heads * rng.gen_range(1..=4usize).max(if heads == 1 { 2 } else { 1 });
    let byte_group = if d.is_multiple_of(2) && rng.gen_bool(0.5) { 2 } else { 1 };
    let ngram = rng.gen_range(1..=2usize);
    let positions = rng.gen_range(3..=8usize);
    let conv_kernel = rng.gen_range(1..=positions - 1);
    let conv_out = positions + 1 - conv_kernel;
    let pool_kernel = rng.gen_range(1..=conv_out.min(3));
    let pool_stride = rng.gen_range(1..=pool_kernel);
    let latent_array = rng.gen_bool(0.8);
    let embed_mode = if ngram == 1 && 4 <= d / byte_group && rng.gen_bool(0.3) {
        EmbedMode::OneHot
    } else {
        EmbedMode::Learned
    };
    ModelConfig {
        d_model: d,
        d_ff: rng.gen_range(1..=2 * d),
        n_heads: heads,
        d_head: rng.gen_range(1..=4),
        context_len: positions * byte_group * ngram,
        ngram,
        byte_group,
        dropout: 0.1,
        pos_base: 10_000.0,
        embed_mode,
        conv_kernel,
        pool_kernel,
        pool_stride,
        latent_array,
        memory_segments: rng.gen_range(usize::from(latent_array)..=2),
        init_seed: rng.gen(),
    }
}

/// Overwrites every parameter with random values so that no term of the
/// forward pass vanishes (the default head and u/v are zero).
pub fn randomize<R: Rng>(model: &mut GeneFormer, rng: &mut R) {
    let params = model.params_mut();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        for x in params.get_mut(id).data_mut() {
            *x = if name == "bn.running_var" {
                rng.gen_range(0.5..1.5)
            } else {
                rng.gen_range(-0.5..0.5)
            };
        }
    }
    model.snap_to_f32();
}

pub fn random_model<R: Rng>(rng: &mut R, heads: usize) -> GeneFormer {
    let mut m = GeneFormer::new(tiny_config(rng, heads)).expect("valid tiny config");
    randomize(&mut m, rng);
    m
}

pub fn to_mat(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.dim(0)).map(|i| t.row(i).to_vec()).collect()
}

pub fn from_mat(rows: &[Vec<f64>], width: usize) -> Tensor {
    Tensor::new(&[rows.len(), width], rows.iter().flatten().cloned().collect()).expect("rectangular")
}

pub fn random_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

pub fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}
