mod common;

use std::sync::Arc;

use common::random_bases;
use gnf::baselines::{OrderK, Uniform};
use gnf::codec::{compress, decompress, verify, ArchiveStats, CodecError, CodecOptions, NMode};
use gnf::geneformer::{GeneFormer, ModelConfig};
use gnf::grouping::GroupingConfig;
use gnf::model::{AnyModel, EntropyModel};
use gnf::sequence_io::{Base, FastaRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn with_n_runs<R: Rng>(rng: &mut R, len: usize, frac: f64) -> Vec<Base> {
    let mut bases = random_bases(rng, len);
    let mut budget = (len as f64 * frac) as usize;
    while budget > 0 {
        let run = rng.gen_range(1..=budget.min(40));
        let start = rng.gen_range(0..len);
        for b in bases.iter_mut().skip(start).take(run) {
            *b = Base::N;
        }
        budget -= run;
    }
    bases
}

fn round_trip<M: EntropyModel>(records: &[FastaRecord], model: &M, g: &GroupingConfig, opts: &CodecOptions) -> Vec<u8> {
    let packed = compress(records, model, g, opts).unwrap();
    // the decoder takes the N mode from the archive, not its options
    let other = match opts.n_mode {
        NMode::SideChannel => NMode::InStream,
        NMode::InStream => NMode::SideChannel,
    };
    let out = decompress(
        &packed.bytes,
        model,
        &CodecOptions {
            n_mode: other,
            ..opts.clone()
        },
    )
    .unwrap();
    assert_eq!(out.records, records);
    packed.bytes
}

fn toy_geneformer(g: &GroupingConfig, seed: u64) -> GeneFormer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = ModelConfig::toy(g);
    c.d_model = 16;
    c.d_ff = 32;
    c.n_heads = 2;
    c.d_head = 8;
    let mut m = GeneFormer::new(c).unwrap();
    common::randomize(&mut m, &mut rng);
    m
}

#[test]
fn baselines_round_trip_over_grouping_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for ngram in 1..=3 {
        for byte_group in [1, 2, 4] {
            for mode in [NMode::SideChannel, NMode::InStream] {
                let g = GroupingConfig::aligned(700, 64, ngram, byte_group);
                let recs: Vec<FastaRecord> = (0..3)
                    .map(|i| {
                        let len = rng.gen_range(1000..3000);
                        FastaRecord::new(format!("s{i} test"), with_n_runs(&mut rng, len, 0.01))
                    })
                    .collect();
                let opts = CodecOptions {
                    n_mode: mode,
                    workers: 2,
                    ..Default::default()
                };
                round_trip(&recs, &Uniform, &g, &opts);
                round_trip(&recs, &OrderK::new(4).unwrap(), &g, &opts);
            }
        }
    }
}

#[test]
fn geneformer_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (ngram, byte_group) in [(1, 1), (2, 4), (3, 2)] {
        let g = GroupingConfig::aligned(300, 64, ngram, byte_group);
        let model = AnyModel::GeneFormer(Arc::new(toy_geneformer(&g, 5)));
        for mode in [NMode::SideChannel, NMode::InStream] {
            let recs = vec![
                FastaRecord::new("a", with_n_runs(&mut rng, 700, 0.02)),
                FastaRecord::new("b", with_n_runs(&mut rng, 350, 0.0)),
            ];
            let opts = CodecOptions {
                n_mode: mode,
                ..Default::default()
            };
            round_trip(&recs, &model, &g, &opts);
        }
    }
}

#[test]
fn degenerate_records() {
    let g = GroupingConfig::aligned(200, 64, 2, 4);
    let recs = vec![
        FastaRecord::new("empty", vec![]),
        FastaRecord::new("all-n", vec![Base::N; 90]),
        FastaRecord::new("short", vec![Base::C, Base::N, Base::G]),
        FastaRecord::new("exact", vec![Base::T; 64]),
        FastaRecord::new("one-more", vec![Base::A; 65]),
        FastaRecord::new("odd-tail", vec![Base::G; 201]),
    ];
    for mode in [NMode::SideChannel, NMode::InStream] {
        let opts = CodecOptions {
            n_mode: mode,
            ..Default::default()
        };
        round_trip(&recs, &OrderK::new(3).unwrap(), &g, &opts);
        round_trip(&recs, &Uniform, &g, &opts);
    }
}

#[test]
fn compression_is_deterministic_and_mode_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = GroupingConfig::aligned(256, 64, 2, 4);
    let model = toy_geneformer(&g, 9);
    let recs = vec![FastaRecord::new("x", with_n_runs(&mut rng, 2500, 0.01))];
    let seq = compress(&recs, &model, &g, &CodecOptions::sequential()).unwrap();
    let par = compress(
        &recs,
        &model,
        &g,
        &CodecOptions {
            workers: 4,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(seq.bytes, par.bytes);
    let a = decompress(&seq.bytes, &model, &CodecOptions::sequential()).unwrap();
    let b = decompress(
        &seq.bytes,
        &model,
        &CodecOptions {
            workers: 8,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(a.records, recs);
    assert_eq!(a.records, b.records);
}

#[test]
fn encoder_and_decoder_quantize_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = GroupingConfig::aligned(400, 64, 1, 1);
    let model = toy_geneformer(&g, 10);
    let recs = vec![FastaRecord::new("x", with_n_runs(&mut rng, 1500, 0.01))];
    for mode in [NMode::SideChannel, NMode::InStream] {
        let opts = CodecOptions {
            n_mode: mode,
            table_log: 1000,
            ..Default::default()
        };
        let enc = compress(&recs, &model, &g, &opts).unwrap();
        let dec = decompress(&enc.bytes, &model, &opts).unwrap();
        assert_eq!(enc.tables.len(), 1000);
        assert_eq!(enc.tables, dec.tables);
    }
}

#[test]
fn wrong_model_is_refused() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = GroupingConfig::aligned(400, 64, 1, 1);
    let recs = vec![FastaRecord::new("x", random_bases(&mut rng, 800))];
    let a = toy_geneformer(&g, 1);
    let b = toy_geneformer(&g, 2);
    let packed = compress(&recs, &a, &g, &CodecOptions::default()).unwrap();
    assert!(matches!(
        decompress(&packed.bytes, &b, &CodecOptions::default()),
        Err(CodecError::ModelMismatch(_))
    ));
    assert!(matches!(
        decompress(&packed.bytes, &OrderK::new(4).unwrap(), &CodecOptions::default()),
        Err(CodecError::ModelMismatch(_))
    ));
    let other = GroupingConfig::aligned(400, 64, 2, 1);
    assert!(matches!(
        compress(&recs, &a, &other, &CodecOptions::default()),
        Err(CodecError::ModelMismatch(_))
    ));
}

#[test]
fn payload_damage_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = GroupingConfig::aligned(1000, 64, 2, 1);
    let recs = vec![FastaRecord::new("x", random_bases(&mut rng, 5000))];
    let model = OrderK::new(4).unwrap();
    let packed = compress(&recs, &model, &g, &CodecOptions::default()).unwrap();
    let header = packed.stats.header_bytes + packed.stats.fragment_bytes;
    for trial in 0..40 {
        let mut bytes = packed.bytes.clone();
        let at = rng.gen_range(header..bytes.len());
        bytes[at] ^= 1 << (trial % 8);
        match verify(&recs, &bytes, &model, &CodecOptions::default()) {
            Err(CodecError::CorruptStream(_))
            | Err(CodecError::CrcMismatch { .. })
            | Err(CodecError::Mismatch { .. }) => {}
            other => panic!("flip at {at} went unnoticed: {:?}", other.map(|r| r.bpb())),
        }
    }
}

#[test]
fn size_accounting_adds_up() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = GroupingConfig::aligned(2000, 64, 2, 4);
    let recs = vec![
        FastaRecord::new("x", with_n_runs(&mut rng, 9000, 0.01)),
        FastaRecord::new("y", with_n_runs(&mut rng, 3000, 0.01)),
    ];
    let packed = compress(&recs, &OrderK::new(4).unwrap(), &g, &CodecOptions::default()).unwrap();
    let s = &packed.stats;
    assert_eq!(s.total_bytes, packed.bytes.len());
    assert_eq!(s.total_bytes, s.header_bytes + s.fragment_bytes + s.payload_bytes);
    assert_eq!(s, &ArchiveStats::from_archive(&packed.bytes).unwrap());
    assert_eq!(s.bases, 12_000);
    assert_eq!(s.groups, 5 + 2);
    let report = verify(&recs, &packed.bytes, &OrderK::new(4).unwrap(), &CodecOptions::default()).unwrap();
    assert!((report.bpb() - s.bpb()).abs() < 1e-9);
    assert!((s.bpb() - packed.bytes.len() as f64 * 8.0 / 12_000.0).abs() < 1e-12);
}

#[test]
fn uniform_model_costs_two_bits() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = GroupingConfig::aligned(213_000, 64, 1, 1);
    let recs = vec![FastaRecord::new("r", random_bases(&mut rng, 400_000))];
    let packed = round_trip(&recs, &Uniform, &g, &CodecOptions::default());
    let s = ArchiveStats::from_archive(&packed).unwrap();
    let payload_bpb = s.payload_bytes as f64 * 8.0 / s.bases as f64;
    assert!((payload_bpb - 2.0).abs() < 0.01, "{payload_bpb}");
    assert!((s.bpb() - 2.0).abs() < 0.01 + (s.header_bytes + s.fragment_bytes) as f64 * 8.0 / s.bases as f64);
}

#[test]
fn truncated_archive_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = GroupingConfig::aligned(500, 64, 1, 1);
    let recs = vec![FastaRecord::new("r", random_bases(&mut rng, 2000))];
    let packed = compress(&recs, &Uniform, &g, &CodecOptions::default()).unwrap();
    for cut in [0, 5, 40, packed.bytes.len() - 1] {
        assert!(decompress(&packed.bytes[..cut], &Uniform, &CodecOptions::default()).is_err());
    }
}
