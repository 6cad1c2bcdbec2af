use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use log::{info, warn};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use segt::checkpoint::{load_checkpoint, save_checkpoint};
use segt::data::{dataset_to_tsv, make_split, parse_dataset, parse_split, DatasetRecord, Split, SplitConfig};
use segt::embedding::{read_embedding, EmbeddingManifest, ResidueEmbedding};
use segt::head::Prediction;
use segt::metrics::evaluate as evaluate_metrics;
use segt::model::{Model, ModelConfig};
use segt::scan::{scan as run_scan, select_candidates, ManifestProvider, SelectionCriteria};
use segt::tensor::Tape;
use segt::train::{load_samples, train as run_train, TrainConfig};
use segt::Error;

use crate::error::{CliError, CliResult};
use crate::manifest::{beside, RunManifest, DIR_MANIFEST};
use crate::{EvaluateArgs, ExportArgs, PredictArgs, ScanArgs, SplitArgs, Stage, TrainArgs};

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
        }
    }
}

fn write_json_pretty(path: &Path, value: &impl Serialize) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn split(a: &SplitArgs) -> CliResult<()> {
    let mut run = RunManifest::start("split");
    run.seed = Some(a.seed);
    run.input("data", &a.data);
    let records = parse_dataset(&a.data)?;
    let cfg = SplitConfig {
        seed: a.seed,
        test_frac: a.test_frac,
        val_cluster_frac: a.val_frac,
        temp_boundaries: a.boundaries.clone(),
        similarity_threshold: a.threshold,
        kmer: a.kmer,
    };
    let assignment = make_split(&records, &cfg)?;
    fs::create_dir_all(&a.out)?;

    let split_path = a.out.join("split.tsv");
    fs::write(&split_path, assignment.to_tsv())?;
    run.output("split", &split_path);
    let summary_path = a.out.join("summary.tsv");
    let summary = assignment.summary_tsv();
    fs::write(&summary_path, &summary)?;
    run.output("summary", &summary_path);
    for (which, role) in [
        (Split::Train, "train"),
        (Split::Validation, "validation"),
        (Split::Test, "test"),
    ] {
        let subset = records
            .iter()
            .zip(&assignment.entries)
            .filter(|(_, e)| e.split == which)
            .map(|(r, _)| r);
        let path = a.out.join(format!("{role}.tsv"));
        fs::write(&path, dataset_to_tsv(subset))?;
        run.output(role, &path);
    }
    print!("{summary}");
    run.finish(&a.out.join(DIR_MANIFEST))
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let mut run = RunManifest::start("train");
    let model_cfg: ModelConfig = read_json(a.model_config.as_deref())?;
    let mut train_cfg: TrainConfig = read_json(a.train_config.as_deref())?;
    if let Some(seed) = a.seed {
        train_cfg.seed = seed;
    }
    run.config(a.model_config.as_deref()).config(a.train_config.as_deref());
    run.seed = Some(train_cfg.seed);
    run.input("data", &a.data)
        .input("split", &a.split)
        .input("embeddings", &a.embeddings);

    let records = parse_dataset(&a.data)?;
    let splits = parse_split(&a.split)?;
    let known: HashSet<&str> = records.iter().map(|r| r.accession.as_str()).collect();
    if let Some(acc) = splits.keys().find(|k| !known.contains(k.as_str())) {
        return Err(CliError::Usage(format!(
            "{}: accession {acc} is not in {}",
            a.split.display(),
            a.data.display()
        )));
    }
    let part = |which: Split| -> Vec<&DatasetRecord> {
        records
            .iter()
            .filter(|r| splits.get(&r.accession) == Some(&which))
            .collect()
    };
    let manifest = EmbeddingManifest::read(&a.embeddings)?;
    let train_set = load_samples(part(Split::Train), &manifest)?;
    let val_set = load_samples(part(Split::Validation), &manifest)?;
    info!(
        "training on {} records, validating on {}",
        train_set.len(),
        val_set.len()
    );

    fs::create_dir_all(&a.out)?;
    let log_path = a.out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path)?);
    let mut log_err = None;
    let outcome = run_train(&train_set, &val_set, &model_cfg, &train_cfg, |entry| {
        let line = serde_json::to_string(entry).expect("log entries serialize");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let best_path = a.out.join("best.segc");
    let last_path = a.out.join("last.segc");
    save_checkpoint(&outcome.best, &best_path)?;
    save_checkpoint(&outcome.last, &last_path)?;
    if let Some(m) = &outcome.best.best_metrics {
        println!("best epoch {}", outcome.best.epoch);
        print!("{m}");
    }
    run.output("best", &best_path)
        .output("last", &last_path)
        .output("log", &log_path);
    run.finish(&a.out.join(DIR_MANIFEST))
}

#[derive(Serialize)]
struct RecordError<'a> {
    accession: &'a str,
    error: &'static str,
    message: String,
}

pub fn predict(a: &PredictArgs) -> CliResult<()> {
    let mut run = RunManifest::start("predict");
    run.input("checkpoint", &a.checkpoint)
        .input("embeddings", &a.embeddings);
    let model = load_checkpoint(&a.checkpoint)?.model;
    let manifest = EmbeddingManifest::read(&a.embeddings)?;
    let accessions: Vec<&String> = manifest.entries.keys().collect();
    let lines = accessions
        .par_iter()
        .map(|acc| {
            let e = manifest.load(acc)?;
            match model.predict(&e) {
                Ok(p) => Ok(serde_json::to_string(&p)?),
                Err(err @ Error::SequenceTooShort { .. }) => {
                    warn!("{acc}: {err}");
                    Ok(serde_json::to_string(&RecordError {
                        accession: acc,
                        error: "sequence_too_short",
                        message: err.to_string(),
                    })?)
                }
                Err(err) => Err(err),
            }
        })
        .collect::<Result<Vec<String>, Error>>()?;
    let mut out = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
    for l in &lines {
        out.push_str(l);
        out.push('\n');
    }
    fs::write(&a.out, out)?;
    run.output("predictions", &a.out);
    run.finish(&beside(&a.out))
}

/// Reads prediction JSONL; returns predictions and accessions that carried
/// an error object instead.
fn read_predictions(path: &Path) -> CliResult<(IndexMap<String, f64>, Vec<String>)> {
    let text = fs::read_to_string(path)?;
    let mut preds = IndexMap::new();
    let mut failed = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| {
            CliError::Core(Error::Parse {
                line: i + 1,
                message: m,
            })
        };
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if v.get("error").is_some() {
            let acc = v["accession"].as_str().unwrap_or_default().to_string();
            failed.push(acc);
            continue;
        }
        let p: Prediction = serde_json::from_value(v).map_err(|e| bad(e.to_string()))?;
        if preds.insert(p.accession.clone(), p.y_hat).is_some() {
            return Err(Error::Duplicate(p.accession).into());
        }
    }
    Ok((preds, failed))
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let mut run = RunManifest::start("evaluate");
    run.input("predictions", &a.predictions).input("truth", &a.truth);
    let (preds, failed) = read_predictions(&a.predictions)?;
    let truth = parse_dataset(&a.truth)?;
    let failed: HashSet<&str> = failed.iter().map(String::as_str).collect();
    if !failed.is_empty() {
        warn!("{} records without a prediction are skipped", failed.len());
    }
    let truth_acc: HashSet<&str> = truth.iter().map(|r| r.accession.as_str()).collect();
    let no_prediction: Vec<String> = truth
        .iter()
        .filter(|r| !preds.contains_key(&r.accession) && !failed.contains(r.accession.as_str()))
        .map(|r| r.accession.clone())
        .collect();
    let no_truth: Vec<String> = preds
        .keys()
        .filter(|k| !truth_acc.contains(k.as_str()))
        .cloned()
        .collect();
    if !no_prediction.is_empty() || !no_truth.is_empty() {
        return Err(CliError::AccessionMismatch {
            no_prediction,
            no_truth,
        });
    }
    let (p, t): (Vec<f64>, Vec<f64>) = truth
        .iter()
        .filter_map(|r| preds.get(&r.accession).map(|&y| (y, r.temperature)))
        .unzip();
    let report = evaluate_metrics(&p, &t, &a.boundaries)?;
    print!("{report}");
    match &a.out {
        Some(out) => {
            write_json_pretty(out, &report)?;
            run.output("report", out);
            run.finish(&beside(out))
        }
        None => Ok(()),
    }
}

pub fn scan(a: &ScanArgs) -> CliResult<()> {
    let mut run = RunManifest::start("scan");
    run.config(a.criteria.as_deref());
    run.input("checkpoint", &a.checkpoint)
        .input("wild_type", &a.wild_type)
        .input("variants", &a.variants);
    let criteria: SelectionCriteria = read_json(a.criteria.as_deref())?;
    criteria.validate()?;
    let model = load_checkpoint(&a.checkpoint)?.model;
    let wild = read_embedding(&a.wild_type)?;
    let manifest = EmbeddingManifest::read(&a.variants)?;
    let sequence = match &a.sequence {
        Some(s) => s.to_ascii_uppercase(),
        None => ManifestProvider::infer_sequence(&manifest, wild.len())?,
    };
    let provider = ManifestProvider {
        sequence: sequence.clone(),
        manifest,
    };
    let result = run_scan(&wild, &sequence, &provider, &model)?;
    let candidates = select_candidates(&result, &criteria);

    fs::create_dir_all(&a.out)?;
    let scan_path = a.out.join("scan.json");
    write_json_pretty(&scan_path, &result)?;
    let heatmap_path = a.out.join("heatmap.csv");
    fs::write(&heatmap_path, result.to_csv())?;
    let cand_path = a.out.join("candidates.tsv");
    let mut tsv = String::from("variant\tposition\twild_type\tletter\tdelta\tscore\tsegment_importance\n");
    for c in &candidates {
        let _ = writeln!(
            tsv,
            "{}{}{}\t{}\t{}\t{}\t{}\t{}\t{}",
            c.wild_type,
            c.position,
            c.letter,
            c.position,
            c.wild_type,
            c.letter,
            c.delta,
            c.score,
            c.segment_importance
        );
    }
    fs::write(&cand_path, tsv)?;
    println!(
        "wild type {:.2} °C [{:.2}, {:.2}], {} candidates",
        result.wild_type.y_hat,
        result.wild_type.y_min,
        result.wild_type.y_max,
        candidates.len()
    );
    run.output("scan", &scan_path)
        .output("heatmap", &heatmap_path)
        .output("candidates", &cand_path);
    run.finish(&a.out.join(DIR_MANIFEST))
}

fn mean_rows(values: &[f64], rows: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for r in values.chunks_exact(dim).take(rows) {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= rows as f64);
    out
}

/// One feature vector per scale, concatenated. Segment-level stages are
/// mean-pooled over segments so every row has the same width.
fn stage_features(model: &Model, e: &ResidueEmbedding, stage: Stage) -> segt::Result<Vec<f64>> {
    let (tape, graph): (Tape<f32>, _) = model.trace(e)?;
    let dim = model.config.conversion.model_dim;
    let mut out = Vec::with_capacity(dim * model.config.num_scales());
    match stage {
        Stage::Pooled => {
            for &z in &graph.pooled {
                out.extend(tape.value(z).to_f64_vec());
            }
        }
        Stage::Segments | Stage::Dgsa => {
            let feats = if stage == Stage::Segments {
                &graph.segments
            } else {
                &graph.contextual
            };
            for sf in &feats.scales {
                let n = tape.dims(sf.features)[1];
                out.extend(mean_rows(&tape.value(sf.features).to_f64_vec(), n, dim));
            }
        }
    }
    Ok(out)
}

pub fn export_features(a: &ExportArgs) -> CliResult<()> {
    let mut run = RunManifest::start("export-features");
    run.input("checkpoint", &a.checkpoint)
        .input("embeddings", &a.embeddings);
    let model = load_checkpoint(&a.checkpoint)?.model;
    let manifest = EmbeddingManifest::read(&a.embeddings)?;
    let labels: BTreeMap<String, f64> = match &a.data {
        Some(p) => {
            run.input("data", p);
            parse_dataset(p)?
                .into_iter()
                .map(|r| (r.accession, r.temperature))
                .collect()
        }
        None => BTreeMap::new(),
    };
    let mut accessions: Vec<&String> = manifest.entries.keys().collect();
    accessions.sort();
    let rows = accessions
        .par_iter()
        .map(|acc| {
            let e = manifest.load(acc)?;
            match stage_features(&model, &e, a.stage) {
                Ok(f) => Ok(Some(f)),
                Err(err @ Error::SequenceTooShort { .. }) => {
                    warn!("{acc}: skipped, {err}");
                    Ok(None)
                }
                Err(err) => Err(err),
            }
        })
        .collect::<Result<Vec<_>, Error>>()?;

    let width = model.config.conversion.model_dim * model.config.num_scales();
    let mut csv = String::from("accession");
    for k in 0..width {
        let _ = write!(csv, ",f{k}");
    }
    csv.push_str(",temperature_c\n");
    for (acc, row) in accessions.iter().zip(rows) {
        let Some(row) = row else { continue };
        csv.push_str(acc);
        for v in row {
            let _ = write!(csv, ",{v}");
        }
        match labels.get(acc.as_str()) {
            Some(t) => {
                let _ = writeln!(csv, ",{t}");
            }
            None => csv.push_str(",\n"),
        }
    }
    fs::write(&a.out, csv)?;
    run.output("features", &a.out);
    run.finish(&beside(&a.out))
}
