//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p segt-cli --test acceptance`.

mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

use common::{fixture, p, random_sequence, segt, split_and_train};
use segt::checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
use segt::conversion::{convert, ConversionConfig};
use segt::data::{kmer_similarity, make_split, round_half_up, DatasetRecord, Split, SplitConfig, SUMMARY_COLUMNS};
use segt::dgsa::{self_attention, AttentionVars, BlockVars, DgsaConfig, LAYER_NORM_EPS};
use segt::embedding::{synth_embed, ResidueEmbedding};
use segt::head::{attention_pool, predict_scale};
use segt::metrics::{grouped_mae, mae, pearson, rmse, spearman, weighted_rmse, WeightTable};
use segt::model::{forward_graph, param_shapes, Model, ModelConfig, ModelParams, ModelVars};
use segt::optim::{AdamW, AdamWConfig};
use segt::scan::{scan, select_candidates, SelectionCriteria, SynthProvider, VariantProvider};
use segt::tensor::{grad_check, GradCheckOptions, Real, Tape, Tensor, Var};
use segt::train::{evaluate_samples, train, Sample, TrainConfig};
use segt::{Error, Result};

type Outcome = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {{
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    }};
}

fn ok<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn model_config(d: usize, m: usize, segs: Vec<usize>, groups: Vec<usize>, blocks: usize, hidden: usize) -> ModelConfig {
    ModelConfig {
        embed_dim: d,
        conversion: ConversionConfig {
            downsamples: segs.len() - 1,
            segment_lengths: segs,
            kernel: 3,
            model_dim: m,
        },
        dgsa: DgsaConfig {
            group_sizes: groups,
            num_blocks: blocks,
        },
        pool_hidden: hidden,
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::from_f64(
        dims.to_vec(),
        &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
    )
    .unwrap()
}

// 1 ---------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let cfg = model_config(16, 32, vec![4, 2], vec![2, 2], 2, 16);
    let params = ok(ModelParams::<f64>::init(&cfg, 21))?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, &[2, 32, 16]);
    let table = ok(WeightTable::from_counts(&[1237, 1136, 665, 71], &[45.0, 70.0, 100.0]))?;
    let targets = [38.0, 104.0];
    let weights = table.weights_for(&targets);
    let names: Vec<String> = param_shapes(&cfg).into_iter().map(|(n, _)| n).collect();
    let mut tensors: Vec<Tensor<f64>> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
    tensors.push(x);
    let report = ok(grad_check(
        &tensors,
        |tape, vars| {
            let ordered = names.iter().cloned().zip(vars.iter().copied()).collect();
            let mv = ModelVars::assemble(&cfg, ordered)?;
            let g = forward_graph(tape, &cfg, &mv, *vars.last().unwrap())?;
            tape.weighted_rmse(g.y_hat, &targets, &weights)
        },
        &GradCheckOptions {
            eps: 1e-3,
            floor: 1e-6,
            fourth_order: true,
            max_coords_per_param: Some(24),
            seed: 3,
        },
    ))?;
    let secs = start.elapsed().as_secs_f64();
    ensure!(
        report.max_rel_error < 1e-4,
        "max relative error {:.3e}",
        report.max_rel_error
    );
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!(
        "max rel err {:.2e} over {} tensors, {:.1} s",
        report.max_rel_error,
        tensors.len(),
        secs
    ))
}

// 2 ---------------------------------------------------------------------

fn shape_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut ran, mut rejected) = (0, 0);
    for case in 0..200 {
        let scales = rng.gen_range(1..=4);
        let segs: Vec<usize> = (0..scales).map(|_| rng.gen_range(2..=16)).collect();
        let groups: Vec<usize> = (0..scales).map(|_| rng.gen_range(1..=8)).collect();
        let cfg = model_config(4, 4, segs.clone(), groups, 1, 3);
        // log-uniform so short sequences are well represented
        let len = (rng.gen_range(8f64.ln()..=256f64.ln()).exp().round() as usize).clamp(8, 256);
        let model = ok(Model::init(cfg.clone(), case))?;
        let e = ok(synth_embed("S", &random_sequence(&mut rng, len), 4, case))?;
        let fits = segs.iter().enumerate().all(|(i, &l)| len >> i >= l);
        match model.trace(&e) {
            Err(Error::SequenceTooShort { .. }) => {
                ensure!(!fits, "case {case}: L={len} l={segs:?} rejected but fits");
                rejected += 1;
            }
            Err(err) => return Err(format!("case {case}: {err}")),
            Ok((tape, graph)) => {
                ensure!(fits, "case {case}: L={len} l={segs:?} accepted but too short");
                for (i, &a) in graph.alphas.iter().enumerate() {
                    let expect = (len >> i) / segs[i];
                    ensure!(
                        tape.dims(a) == [1, expect],
                        "case {case}: alpha dims {:?}",
                        tape.dims(a)
                    );
                    let s: f64 = tape.value(a).to_f64_vec().iter().sum();
                    ensure!((s - 1.0).abs() <= 1e-6, "case {case}: alpha sums to {s}");
                }
                let pred = ok(model.predict(&e))?;
                ensure!(
                    pred.y_min <= pred.y_hat && pred.y_hat <= pred.y_max,
                    "case {case}: band"
                );
                let mean = pred.per_scale.iter().sum::<f64>() / pred.per_scale.len() as f64;
                ensure!(
                    (mean - pred.y_hat).abs() <= 1e-6,
                    "case {case}: mean {mean} vs {}",
                    pred.y_hat
                );
                ran += 1;
            }
        }
    }
    Ok(format!("{ran} forwards, {rejected} SequenceTooShort, all as predicted"))
}

// 3 ---------------------------------------------------------------------

fn overfit() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples: Vec<Sample> = (0..32)
        .map(|i| {
            let len = rng.gen_range(32..=64);
            Sample {
                embedding: synth_embed(&format!("O{i}"), &random_sequence(&mut rng, len), 16, 0).unwrap(),
                temperature: rng.gen_range(10.0..110.0),
            }
        })
        .collect();
    let cfg = model_config(16, 32, vec![4, 2], vec![2, 2], 2, 16);
    let tcfg = TrainConfig {
        max_epochs: 500,
        eval_every: 500,
        ..TrainConfig::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let outcome = ok(pool.install(|| train(&samples, &samples, &cfg, &tcfg, |_| {})))?;
    let report = ok(evaluate_samples(&outcome.last.model, &samples, &tcfg.group_boundaries))?;
    let secs = start.elapsed().as_secs_f64();
    ensure!(report.rmse < 2.0, "final train RMSE {:.3}", report.rmse);
    ensure!(secs < 300.0, "took {secs:.0} s");
    Ok(format!(
        "final train RMSE {:.3} °C after 500 epochs, {:.1} s on one thread",
        report.rmse, secs
    ))
}

// 4 ---------------------------------------------------------------------

fn brute_mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn brute_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mx, my) = (brute_mean(x), brute_mean(y));
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / vx.sqrt() / vy.sqrt())
}

/// Rank = 1 + number smaller + half the other ties.
fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&a| {
            let less = x.iter().filter(|&&b| b < a).count() as f64;
            let equal = x.iter().filter(|&&b| b == a).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn brute_bucket(bounds: &[f64], t: f64) -> usize {
    bounds.iter().filter(|&&b| b <= t).count()
}

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut undefined = 0;
    for case in 0..1000 {
        let n = rng.gen_range(2..=120);
        let tied = case % 2 == 1;
        let draw = |rng: &mut ChaCha8Rng| {
            if tied {
                rng.gen_range(0..6) as f64 * 15.0 + 20.0
            } else {
                rng.gen_range(0.0..120.0)
            }
        };
        let pred: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let truth: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();

        let mut bounds: Vec<f64> = (0..rng.gen_range(1..=4))
            .map(|_| rng.gen_range(10.0..110.0f64).round())
            .collect();
        bounds.sort_by(f64::total_cmp);
        bounds.dedup();
        let counts: Vec<usize> = (0..=bounds.len()).map(|_| rng.gen_range(1..500)).collect();
        let table = ok(WeightTable::from_counts(&counts, &bounds))?;
        let total: usize = counts.iter().sum();
        let w = |t: f64| {
            let k = brute_bucket(&bounds, t);
            total as f64 / (counts.len() as f64 * counts[k] as f64)
        };
        let wr = (pred
            .iter()
            .zip(&truth)
            .map(|(p, t)| w(*t) * (p - t).powi(2))
            .sum::<f64>()
            / n as f64)
            .sqrt();
        let got = ok(weighted_rmse(&pred, &truth, &table))?;
        ensure!(close(got, wr), "case {case}: weighted_rmse {got} vs {wr}");

        let r = (pred.iter().zip(&truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n as f64).sqrt();
        let got_rmse = ok(rmse(&pred, &truth))?;
        ensure!(close(got_rmse, r), "case {case}: rmse {got_rmse} vs {r}");
        let unit = ok(weighted_rmse(&pred, &truth, &WeightTable::uniform()))?;
        ensure!(unit == got_rmse, "case {case}: unit-weight {unit} != rmse {got_rmse}");

        let m = pred.iter().zip(&truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / n as f64;
        let got = ok(mae(&pred, &truth))?;
        ensure!(close(got, m), "case {case}: mae {got} vs {m}");

        for (name, got, want) in [
            ("pearson", pearson(&pred, &truth), brute_pearson(&pred, &truth)),
            (
                "spearman",
                spearman(&pred, &truth),
                brute_pearson(&brute_ranks(&pred), &brute_ranks(&truth)),
            ),
        ] {
            match (got, want) {
                (Ok(g), Some(w)) => ensure!(close(g, w), "case {case}: {name} {g} vs {w}"),
                (Err(Error::Undefined(_)), None) => undefined += 1,
                (g, w) => return Err(format!("case {case}: {name} {g:?} vs {w:?}")),
            }
        }

        let groups = [45.0, 70.0];
        let got = ok(grouped_mae(&pred, &truth, &groups))?;
        for (k, (label, b)) in got.iter().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| brute_bucket(&groups, truth[i]) == k).collect();
            ensure!(b.count == members.len(), "case {case}: {label} count");
            let want = (!members.is_empty())
                .then(|| members.iter().map(|&i| (pred[i] - truth[i]).abs()).sum::<f64>() / members.len() as f64);
            match (b.mae, want) {
                (Some(g), Some(w)) => ensure!(close(g, w), "case {case}: {label} {g} vs {w}"),
                (None, None) => {}
                (g, w) => return Err(format!("case {case}: {label} {g:?} vs {w:?}")),
            }
        }
    }
    Ok(format!(
        "1000 vectors agree to 1e-9 relative ({undefined} undefined correlations matched)"
    ))
}

// 5 ---------------------------------------------------------------------

fn weight_table() -> Outcome {
    let counts = [1237, 1136, 665, 71];
    let t = ok(WeightTable::from_counts(&counts, &[45.0, 70.0, 100.0]))?;
    let want = [0.628, 0.684, 1.169, 10.947];
    for (k, (&w, &e)) in t.weights.iter().zip(&want).enumerate() {
        ensure!((w - e).abs() <= 1e-3, "interval {k}: {w} vs {e}");
    }
    let n: usize = counts.iter().sum();
    let mean = counts.iter().zip(&t.weights).map(|(&c, w)| c as f64 * w).sum::<f64>() / n as f64;
    ensure!((mean - 1.0).abs() <= 1e-9, "count-weighted mean {mean}");
    Ok(format!(
        "w = [{}], weighted mean - 1 = {:.1e}",
        t.weights
            .iter()
            .map(|w| format!("{w:.3}"))
            .collect::<Vec<_>>()
            .join(", "),
        mean - 1.0
    ))
}

// 6 ---------------------------------------------------------------------

fn family_records(n: usize, seed: u64) -> Vec<DatasetRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let families: Vec<(String, f64)> = (0..n / 4)
        .map(|_| {
            let len = rng.gen_range(60..160);
            (random_sequence(&mut rng, len), rng.gen_range(20.0..105.0))
        })
        .collect();
    (0..n)
        .map(|i| {
            let (base, t) = &families[rng.gen_range(0..families.len())];
            let mut s = base.clone().into_bytes();
            for c in s.iter_mut() {
                if rng.gen_bool(0.04) {
                    *c = random_sequence(&mut rng, 1).as_bytes()[0];
                }
            }
            DatasetRecord {
                accession: format!("F{i:04}"),
                sequence: String::from_utf8(s).unwrap(),
                temperature: (t + rng.gen_range(-8.0..8.0f64)).clamp(5.0, 120.0),
            }
        })
        .collect()
}

fn split_correctness() -> Outcome {
    ensure!(
        round_half_up(3454.0 * 0.1) == 345,
        "table counts: 3454 sequences should give 345 test"
    );
    let cfg = SplitConfig {
        seed: 17,
        ..SplitConfig::default()
    };
    let mut clusters_seen = 0;
    for n in [500, 505] {
        let recs = family_records(n, n as u64);
        let a = ok(make_split(&recs, &cfg))?;
        let n_test = a.entries.iter().filter(|e| e.split == Split::Test).count();
        ensure!(n_test == round_half_up(n as f64 * 0.1), "n={n}: {n_test} test records");
        ensure!(a.entries.len() == n, "n={n}: every record assigned once");

        let by_acc: std::collections::HashMap<&str, &DatasetRecord> =
            recs.iter().map(|r| (r.accession.as_str(), r)).collect();
        let mut cluster_split = vec![None; a.representatives.len()];
        for e in &a.entries {
            let Some(c) = e.cluster else {
                ensure!(
                    e.split == Split::Test,
                    "{} has no cluster but is {:?}",
                    e.accession,
                    e.split
                );
                continue;
            };
            ensure!(e.split != Split::Test, "{} is clustered but in test", e.accession);
            match cluster_split[c] {
                None => cluster_split[c] = Some(e.split),
                Some(s) => ensure!(s == e.split, "cluster {c} spans {s:?} and {:?}", e.split),
            }
            let rep = by_acc[a.representatives[c].as_str()];
            let sim = kmer_similarity(&by_acc[e.accession.as_str()].sequence, &rep.sequence, cfg.kmer);
            ensure!(
                sim >= cfg.similarity_threshold,
                "{} joined cluster {c} at similarity {sim}",
                e.accession
            );
        }
        // representatives within a temperature range are mutually dissimilar
        let bucket = |t: f64| cfg.temp_boundaries.iter().filter(|&&b| b <= t).count();
        let reps: Vec<&DatasetRecord> = a.representatives.iter().map(|r| by_acc[r.as_str()]).collect();
        for i in 0..reps.len() {
            for j in i + 1..reps.len() {
                if bucket(reps[i].temperature) == bucket(reps[j].temperature) {
                    let sim = kmer_similarity(&reps[i].sequence, &reps[j].sequence, cfg.kmer);
                    ensure!(
                        sim < cfg.similarity_threshold,
                        "representatives {i} and {j} similar ({sim})"
                    );
                }
            }
        }
        clusters_seen += reps.len();

        let again = ok(make_split(&recs, &cfg))?;
        ensure!(again.to_tsv() == a.to_tsv(), "n={n}: same seed gave a different split");
        ensure!(again.summary_tsv() == a.summary_tsv(), "n={n}: summary differs");
        let summary = a.summary_tsv();
        let header: Vec<&str> = summary.lines().next().unwrap().split('\t').collect();
        ensure!(header == SUMMARY_COLUMNS, "summary header {header:?}");
        ensure!(a.summary.last().unwrap().range == "total", "missing total row");
    }
    Ok(format!(
        "test = round-half-up(10%) for n=500/505, {clusters_seen} clusters each confined to one side"
    ))
}

// 7 ---------------------------------------------------------------------

fn le_f32(v: f32) -> [u8; 4] {
    let b = v.to_bits();
    [b as u8, (b >> 8) as u8, (b >> 16) as u8, (b >> 24) as u8]
}

fn persistence() -> Outcome {
    // a file assembled byte by byte as little-endian
    let mut golden = b"SEGT".to_vec();
    golden.extend([1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 2, 0, b'X', b'9']);
    let vals = [1.0f32, -2.5, 0.1, f32::MIN_POSITIVE, -0.0, 3.4e38];
    for v in vals {
        golden.extend(le_f32(v));
    }
    let e = ok(ResidueEmbedding::from_bytes(&golden))?;
    ensure!(e.accession == "X9" && e.len() == 2 && e.dim() == 3, "golden header");
    ensure!(
        e.values().iter().zip(&vals).all(|(a, b)| a.to_bits() == b.to_bits()),
        "golden payload"
    );
    ensure!(ok(e.to_bytes())? == golden, "embedding re-encode differs");

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..20 {
        let len = rng.gen_range(1..50);
        let dim = rng.gen_range(1..20);
        let values: Vec<f32> = (0..len * dim)
            .map(|_| f32::from_bits(rng.gen::<u32>() & 0xbf7f_ffff))
            .collect();
        let e = ok(ResidueEmbedding::new(format!("R{case}"), len, dim, values))?;
        let back = ok(ResidueEmbedding::from_bytes(&ok(e.to_bytes())?))?;
        ensure!(
            back.values()
                .iter()
                .zip(e.values())
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            "embedding {case} not bit-exact"
        );
    }

    let cfg = model_config(6, 8, vec![4, 2], vec![3, 2], 2, 5);
    let model = ok(Model::init(cfg, 5))?;
    let mut opt = AdamW::new(AdamWConfig::default(), &model.params);
    opt.step = 77;
    for (_, (m, v)) in opt.moments.iter_mut() {
        for x in m.data_mut().iter_mut().chain(v.data_mut()) {
            *x = rng.gen_range(-1e-3..1e-3);
        }
    }
    let ck = Checkpoint {
        model,
        optimizer: Some(opt),
        epoch: 31,
        best_metrics: None,
        weight_table: Some(ok(WeightTable::from_counts(&[5, 9, 2, 1], &[45.0, 70.0, 100.0]))?),
    };
    let bytes = ok(ck.to_bytes())?;
    let back = ok(Checkpoint::from_bytes(&bytes))?;
    ensure!(back == ck, "checkpoint fields differ after load");
    ensure!(ok(back.to_bytes())? == bytes, "checkpoint re-encode differs");
    // the blob section is the parameters' little-endian bits in directory order
    let blob_len: usize = 4 * ck.model.params.iter().map(|(_, t)| t.numel()).sum::<usize>();
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let expect: Vec<u8> = ck
        .model
        .params
        .iter()
        .flat_map(|(_, t)| t.data().iter().flat_map(|&v| le_f32(v)))
        .collect();
    ensure!(
        bytes[16 + hlen..16 + hlen + blob_len] == expect[..],
        "parameter blobs are not little-endian f32"
    );
    ensure!(bytes[..4] == CHECKPOINT_MAGIC[..], "magic");

    let mut bad = bytes.clone();
    bad[1] ^= 0x20;
    ensure!(
        matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))),
        "corrupt checkpoint magic accepted"
    );
    let mut bad = golden.clone();
    bad[0] = b'Z';
    ensure!(
        matches!(ResidueEmbedding::from_bytes(&bad), Err(Error::Format(_))),
        "corrupt embedding magic accepted"
    );
    for cut in [3, 15, bytes.len() / 2, bytes.len() - 1] {
        ensure!(
            matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))),
            "checkpoint cut at {cut} accepted"
        );
    }
    for cut in [2, 17, golden.len() - 1] {
        ensure!(
            matches!(ResidueEmbedding::from_bytes(&golden[..cut]), Err(Error::Format(_))),
            "embedding cut at {cut} accepted"
        );
    }
    Ok("golden LE file, 20 embeddings and a checkpoint round-trip bit-exact; corruption rejected".into())
}

// 8 ---------------------------------------------------------------------

fn determinism() -> Outcome {
    let d = tempdir().map_err(|e| e.to_string())?;
    let f = fixture(d.path(), 40, 8);
    let runs = [("a", "1"), ("b", "1"), ("c", "4")];
    let mut best = Vec::new();
    for (name, threads) in runs {
        let out = d.path().join(name);
        std::env::set_var("SEGT_THREADS", threads);
        let o = split_and_train(&f, &out, "13");
        std::env::remove_var("SEGT_THREADS");
        ensure!(
            o.status.success(),
            "train {name}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        best.push(fs::read(out.join("best.segc")).map_err(|e| e.to_string())?);
    }
    ensure!(best[0] == best[1], "same seed gave different best checkpoints");
    ensure!(best[0] == best[2], "thread count changed the best checkpoint");

    let ck = d.path().join("a").join("best.segc");
    let mut outputs = Vec::new();
    for (i, threads) in ["1", "1", "2", "8"].iter().enumerate() {
        let out = d.path().join(format!("pred{i}.jsonl"));
        let o = segt(
            &[
                "predict",
                "--checkpoint",
                p(&ck),
                "--embeddings",
                p(&f.manifest),
                "--out",
                p(&out),
            ],
            &[("SEGT_THREADS", threads)],
        );
        ensure!(o.status.success(), "predict: {}", String::from_utf8_lossy(&o.stderr));
        outputs.push(fs::read(&out).map_err(|e| e.to_string())?);
    }
    ensure!(
        outputs.windows(2).all(|w| w[0] == w[1]),
        "predictions differ across runs or thread counts"
    );
    Ok(format!(
        "3 training runs give one best checkpoint ({} bytes); 4 predict runs give one output",
        best[0].len()
    ))
}

// 9 ---------------------------------------------------------------------

struct WildTypeOnly(ResidueEmbedding);

impl VariantProvider for WildTypeOnly {
    fn variant(&self, _: usize, _: u8) -> Result<ResidueEmbedding> {
        Ok(self.0.clone())
    }
}

fn mutation_scan() -> Outcome {
    let cfg = model_config(8, 8, vec![4, 2], vec![2, 2], 1, 4);
    let model = ok(Model::init(cfg, 9))?;
    let seq = "MKTAYIAKQRQISFVKSHFSRQLEERLGLIEVQ";
    let wild = ok(synth_embed("WT", seq, 8, 4))?;
    let provider = SynthProvider {
        sequence: seq.into(),
        dim: 8,
        seed: 4,
    };
    let result = ok(scan(&wild, seq, &provider, &model))?;
    for (pos, row) in result.delta.iter().enumerate() {
        let a = result.alphabet.find(seq.as_bytes()[pos] as char).unwrap();
        ensure!(row[a].to_bits() == 0, "identity at {pos} is {}", row[a]);
    }
    let open = SelectionCriteria {
        importance_threshold: 0.0,
        temperature_score_threshold: 0.0,
    };
    let cands = select_candidates(&result, &open);
    ensure!(!cands.is_empty(), "no positive deltas to rank");
    let mut by_score = cands.clone();
    by_score.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.position.cmp(&b.position))
            .then(a.letter.cmp(&b.letter))
    });
    let mut by_delta = cands.clone();
    by_delta.sort_by(|a, b| {
        b.delta
            .total_cmp(&a.delta)
            .then(a.position.cmp(&b.position))
            .then(a.letter.cmp(&b.letter))
    });
    ensure!(
        by_score == by_delta && by_delta == cands,
        "score order differs from delta order"
    );

    let flat = ok(scan(&wild, seq, &WildTypeOnly(wild.clone()), &model))?;
    ensure!(
        flat.delta.iter().flatten().all(|d| *d == 0.0),
        "unchanged variants moved the prediction"
    );
    let none = select_candidates(&flat, &open);
    ensure!(none.is_empty(), "{} candidates with all deltas zero", none.len());
    Ok(format!(
        "{} identity cells zero, {} candidates ranked consistently, empty when flat",
        seq.len(),
        cands.len()
    ))
}

// 10 --------------------------------------------------------------------

/// Per-segment columns `[1, D, 1]` of `[1, N, D]`.
fn columns(tape: &mut Tape<f32>, y: Var) -> Result<Vec<Var>> {
    let n = tape.dims(y)[1];
    let yt = tape.transpose_last(y)?;
    (0..n).map(|i| tape.narrow(yt, 2, i, 1)).collect()
}

fn gather(tape: &mut Tape<f32>, cols: &[Var]) -> Result<Var> {
    let g = if cols.len() == 1 {
        cols[0]
    } else {
        tape.concat_last(cols)?
    };
    tape.transpose_last(g)
}

/// Attention over each group of segment indices separately, no padding.
fn ragged_attend(tape: &mut Tape<f32>, cols: &[Var], groups: &[Vec<usize>], vars: &AttentionVars) -> Result<Vec<Var>> {
    let mut out = vec![None; cols.len()];
    for g in groups {
        let x = gather(tape, &g.iter().map(|&i| cols[i]).collect::<Vec<_>>())?;
        let z = self_attention(tape, x, vars, None)?;
        for (j, c) in columns(tape, z)?.into_iter().enumerate() {
            out[g[j]] = Some(c);
        }
    }
    Ok(out
        .into_iter()
        .map(|c| c.expect("every segment is in a group"))
        .collect())
}

fn ragged_block(tape: &mut Tape<f32>, y: Var, gs: usize, vars: &BlockVars) -> Result<Var> {
    let n = tape.dims(y)[1];
    let cols = columns(tape, y)?;
    let short: Vec<Vec<usize>> = (0..n).collect::<Vec<_>>().chunks(gs).map(<[usize]>::to_vec).collect();
    let long: Vec<Vec<usize>> = (0..gs.min(n)).map(|s| (s..n).step_by(gs).collect()).collect();
    let zs = ragged_attend(tape, &cols, &short, &vars.short)?;
    let zl = ragged_attend(tape, &cols, &long, &vars.long)?;
    let merged = (0..n).map(|i| tape.add(zl[i], zs[i])).collect::<Result<Vec<_>>>()?;
    let flat = gather(tape, &merged)?;
    let residual = tape.add(y, flat)?;
    tape.layer_norm(residual, vars.norm_gamma, vars.norm_beta, LAYER_NORM_EPS)
}

fn ragged_forward(model: &Model, e: &ResidueEmbedding) -> Result<(Vec<f32>, Vec<Vec<f32>>)> {
    let cfg = &model.config;
    let mut tape = Tape::<f32>::new();
    let vars = ModelVars::bind(&mut tape, cfg, &model.params, false)?;
    let x = tape.constant(e.to_tensor())?;
    let feats = convert(&mut tape, x, &cfg.conversion, &vars.conversion)?;
    let mut preds = Vec::new();
    let mut alphas = Vec::new();
    for (i, sf) in feats.scales.iter().enumerate() {
        let mut y = sf.features;
        for b in &vars.blocks[i] {
            y = ragged_block(&mut tape, y, cfg.dgsa.group_sizes[i], b)?;
        }
        let (z, a) = attention_pool(&mut tape, y, &vars.pools[i])?;
        preds.push(predict_scale(&mut tape, z, &vars.pools[i].readout)?);
        alphas.push(tape.value(a).data().to_vec());
    }
    let stacked = tape.concat_last(&preds)?;
    let y_hat = tape.mean_last(stacked)?;
    let mut out = tape.value(y_hat).data().to_vec();
    out.extend(preds.iter().flat_map(|&p| tape.value(p).data().to_vec()));
    Ok((out, alphas))
}

fn padded_forward(model: &Model, e: &ResidueEmbedding) -> Result<(Vec<f32>, Vec<Vec<f32>>)> {
    let (tape, g) = model.trace(e)?;
    let mut out = tape.value(g.y_hat).data().to_vec();
    out.extend(g.scale_preds.iter().flat_map(|&p| tape.value(p).data().to_vec()));
    let alphas = g.alphas.iter().map(|&a| tape.value(a).data().to_vec()).collect();
    Ok((out, alphas))
}

fn bits<T: Real>(v: &[T]) -> Vec<u64> {
    v.iter().map(|x| x.to_f64().to_bits()).collect()
}

fn padding_insensitivity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut padded, mut exact) = (0, 0);
    let mut case = 0;
    while padded + exact < 50 {
        let want_padding = (padded + exact) % 2 == 0;
        let scales = rng.gen_range(1..=3);
        let segs: Vec<usize> = (0..scales).map(|_| rng.gen_range(2..=6)).collect();
        let groups: Vec<usize> = (0..scales).map(|_| rng.gen_range(1..=8)).collect();
        let len = rng.gen_range(24..=160);
        let cfg = model_config(6, 8, segs, groups, rng.gen_range(1..=2), 5);
        let Ok(layout) = cfg.conversion.layout(len) else {
            continue;
        };
        let needs_padding = layout
            .iter()
            .zip(&cfg.dgsa.group_sizes)
            .any(|(l, &g)| l.segments % g != 0);
        if needs_padding != want_padding {
            continue;
        }
        case += 1;
        let model = ok(Model::init(cfg, case))?;
        let e = ok(synth_embed("P", &random_sequence(&mut rng, len), 6, case))?;
        let (a, aa) = ok(padded_forward(&model, &e))?;
        let (b, ba) = ok(ragged_forward(&model, &e))?;
        ensure!(
            bits(&a) == bits(&b),
            "case {case} (L={len}): grid {a:?} vs ragged {b:?}"
        );
        ensure!(
            aa.iter().zip(&ba).all(|(x, y)| bits(x) == bits(y)),
            "case {case}: pooling weights differ"
        );
        if needs_padding {
            padded += 1;
        } else {
            exact += 1;
        }
    }
    Ok(format!(
        "{padded} padded and {exact} exact-fit cases bitwise equal to an unpadded reference"
    ))
}

// -----------------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("gradient correctness", gradient_correctness),
        ("shape and invariant suite", shape_invariants),
        ("overfit oracle", overfit),
        ("loss and metric oracles", metric_oracles),
        ("weight table", weight_table),
        ("split correctness", split_correctness),
        ("persistence", persistence),
        ("determinism", determinism),
        ("mutation scan", mutation_scan),
        ("padding insensitivity", padding_insensitivity),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let total = Instant::now();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|x| x == &id || name.contains(x.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = fmt_duration(start.elapsed());
        match outcome {
            Ok(detail) => println!("PASS  criterion {id:>2} {name}: {detail} [{took}]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {id:>2} {name}: {detail} [{took}]");
            }
        }
    }
    println!("{failed} failed, total {}", fmt_duration(total.elapsed()));
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn fmt_duration(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}
