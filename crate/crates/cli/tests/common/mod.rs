#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segt::conversion::ConversionConfig;
use segt::data::{dataset_to_tsv, DatasetRecord};
use segt::dgsa::DgsaConfig;
use segt::embedding::{synth_embed, write_embedding, EmbeddingManifest};
use segt::model::ModelConfig;
use segt::sequence::AMINO_ACIDS;
use segt::train::TrainConfig;

pub const DIM: usize = 8;

pub fn random_sequence(rng: &mut impl Rng, len: usize) -> String {
    (0..len)
        .map(|_| AMINO_ACIDS[rng.gen_range(0..AMINO_ACIDS.len())] as char)
        .collect()
}

pub fn records(n: usize, seed: u64) -> Vec<DatasetRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(24..64);
            DatasetRecord {
                accession: format!("Q{i:05}"),
                sequence: random_sequence(&mut rng, len),
                temperature: (rng.gen_range(15.0..105.0f64) * 10.0).round() / 10.0,
            }
        })
        .collect()
}

pub fn toy_model() -> ModelConfig {
    ModelConfig {
        embed_dim: DIM,
        conversion: ConversionConfig {
            downsamples: 1,
            segment_lengths: vec![4, 2],
            kernel: 3,
            model_dim: 8,
        },
        dgsa: DgsaConfig {
            group_sizes: vec![2, 2],
            num_blocks: 1,
        },
        pool_hidden: 4,
    }
}

pub fn toy_train() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_epochs: 4,
        eval_every: 2,
        lr: 3e-3,
        ..TrainConfig::default()
    }
}

/// Dataset TSV, embedding files and their manifest under `dir`.
pub struct Fixture {
    pub dir: PathBuf,
    pub records: Vec<DatasetRecord>,
    pub data: PathBuf,
    pub manifest: PathBuf,
    pub model_config: PathBuf,
    pub train_config: PathBuf,
}

pub fn fixture(dir: &Path, n: usize, seed: u64) -> Fixture {
    let records = records(n, seed);
    let data = dir.join("data.tsv");
    fs::write(&data, dataset_to_tsv(&records)).unwrap();
    let emb_dir = dir.join("emb");
    fs::create_dir_all(&emb_dir).unwrap();
    let mut entries = IndexMap::new();
    for r in &records {
        let e = synth_embed(&r.accession, &r.sequence, DIM, 7).unwrap();
        let rel = PathBuf::from("emb").join(format!("{}.segt", r.accession));
        write_embedding(&e, dir.join(&rel)).unwrap();
        entries.insert(r.accession.clone(), rel);
    }
    let manifest = dir.join("embeddings.tsv");
    EmbeddingManifest { entries }.write(&manifest).unwrap();
    let model_config = dir.join("model.json");
    fs::write(&model_config, serde_json::to_string_pretty(&toy_model()).unwrap()).unwrap();
    let train_config = dir.join("train.json");
    fs::write(&train_config, serde_json::to_string_pretty(&toy_train()).unwrap()).unwrap();
    Fixture {
        dir: dir.to_path_buf(),
        records,
        data,
        manifest,
        model_config,
        train_config,
    }
}

pub fn segt(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_segt"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("segt runs")
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("UTF-8 path")
}

/// Split, then train into `out`; returns the split directory.
pub fn split_and_train(f: &Fixture, out: &Path, seed: &str) -> Output {
    let split_dir = f.dir.join("split");
    let o = segt(
        &["split", "--data", p(&f.data), "--seed", "3", "--out", p(&split_dir)],
        &[],
    );
    assert!(
        o.status.success(),
        "split failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    segt(
        &[
            "train",
            "--data",
            p(&f.data),
            "--split",
            p(&split_dir.join("split.tsv")),
            "--embeddings",
            p(&f.manifest),
            "--model-config",
            p(&f.model_config),
            "--train-config",
            p(&f.train_config),
            "--out",
            p(out),
            "--seed",
            seed,
        ],
        &[],
    )
}
