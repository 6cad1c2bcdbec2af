//! Mini-batch training with per-sample forwards and gradient accumulation.

use indexmap::IndexMap;
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::DatasetRecord;
use crate::embedding::{EmbeddingManifest, ResidueEmbedding};
use crate::error::{Error, Result};
use crate::metrics::{
    build_weight_table, evaluate, EvalReport, WeightTable, DEFAULT_GROUP_BOUNDARIES, DEFAULT_WEIGHT_BOUNDARIES,
};
use crate::model::{forward_graph, Model, ModelConfig, ModelVars};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Loss-weight intervals over the true temperature.
    pub weight_boundaries: Vec<f64>,
    /// Buckets for grouped MAE during validation.
    pub group_boundaries: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let o = AdamWConfig::default();
        TrainConfig {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            batch_size: 16,
            max_epochs: 64,
            eval_every: 8,
            seed: 0,
            weight_boundaries: DEFAULT_WEIGHT_BOUNDARIES.to_vec(),
            group_boundaries: DEFAULT_GROUP_BOUNDARIES.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer().validate()?;
        if self.batch_size == 0 || self.eval_every == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidConfig(
                "batch_size, eval_every and max_epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub embedding: ResidueEmbedding,
    pub temperature: f64,
}

/// One line of the training log. Validation fields are `None` on epochs
/// without evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: Option<f64>,
    pub val_mae: Option<f64>,
    pub val_pearson: Option<f64>,
    pub val_spearman: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// State at the epoch with the lowest validation RMSE (earliest on ties).
    pub best: Checkpoint,
    /// State after the final epoch.
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Pairs dataset records with their embeddings from `manifest`.
pub fn load_samples<'a>(
    records: impl IntoIterator<Item = &'a DatasetRecord>,
    manifest: &EmbeddingManifest,
) -> Result<Vec<Sample>> {
    records
        .into_iter()
        .map(|r| {
            Ok(Sample {
                embedding: manifest.load(&r.accession)?,
                temperature: r.temperature,
            })
        })
        .collect()
}

/// Batch weighted RMSE and its gradient, summed over per-sample tapes.
///
/// With `L = sqrt(Σ w_i e_i² / B)`, `∂L/∂ŷ_i = w_i e_i / (B L)`, so each
/// sample's tape is seeded with that coefficient and the parameter
/// gradients are added in sample order.
pub fn batch_gradient(
    model: &Model,
    batch: &[&Sample],
    table: &WeightTable,
) -> Result<(f64, IndexMap<String, Vec<f64>>)> {
    let reject = |e: Error| match e {
        Error::NonFinite(m) => Error::StepRejected(m),
        e => e,
    };
    let mut traces = batch
        .par_iter()
        .map(|s| {
            let mut tape = Tape::<f32>::new();
            let vars = ModelVars::bind(&mut tape, &model.config, &model.params, true)?;
            let x = tape.constant(s.embedding.to_tensor())?;
            let g = forward_graph(&mut tape, &model.config, &vars, x)?;
            Ok((tape, vars, g.y_hat))
        })
        .collect::<Result<Vec<_>>>()
        .map_err(reject)?;

    let b = batch.len() as f64;
    let mut coef = Vec::with_capacity(batch.len());
    let mut sq = 0.0;
    for ((tape, _, y), s) in traces.iter().zip(batch) {
        let e = tape.value(*y).data()[0] as f64 - s.temperature;
        let w = table.weight_of(s.temperature);
        sq += w * e * e;
        coef.push(w * e);
    }
    let loss = (sq / b).sqrt();
    if !loss.is_finite() {
        return Err(Error::StepRejected(format!("batch loss is {loss}")));
    }
    let mut total: IndexMap<String, Vec<f64>> = model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), vec![0.0; t.numel()]))
        .collect();
    if loss == 0.0 {
        return Ok((loss, total));
    }
    let per_sample = traces
        .par_iter_mut()
        .zip(coef.par_iter())
        .map(|((tape, vars, y), &c)| {
            let seeded = tape.scale(*y, c / (b * loss))?;
            let l = tape.sum(seeded)?;
            let grads = tape.backward(l)?;
            Ok(vars
                .ordered
                .iter()
                .map(|(_, v)| grads.get_f64(*v).map(<[f64]>::to_vec))
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()
        .map_err(reject)?;
    for sample in per_sample {
        for (acc, g) in total.values_mut().zip(sample) {
            if let Some(g) = g {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
    }
    Ok((loss, total))
}

pub fn predict_all(model: &Model, samples: &[Sample]) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .map(|s| model.predict(&s.embedding).map(|p| p.y_hat))
        .collect()
}

pub fn evaluate_samples(model: &Model, samples: &[Sample], group_boundaries: &[f64]) -> Result<EvalReport> {
    let pred = predict_all(model, samples)?;
    let truth: Vec<f64> = samples.iter().map(|s| s.temperature).collect();
    evaluate(&pred, &truth, group_boundaries)
}

pub fn train(
    train: &[Sample],
    val: &[Sample],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidConfig(
            "train and validation sets must be non-empty".into(),
        ));
    }
    for s in train.iter().chain(val) {
        if s.embedding.dim() != model_config.embed_dim {
            return Err(Error::ConfigMismatch(format!(
                "{}: embedding width {} but model expects {}",
                s.embedding.accession,
                s.embedding.dim(),
                model_config.embed_dim
            )));
        }
        model_config.conversion.layout(s.embedding.len())?;
    }
    let labels: Vec<f64> = train.iter().map(|s| s.temperature).collect();
    let table = build_weight_table(&labels, &cfg.weight_boundaries)?;

    let mut model = Model::init(model_config.clone(), cfg.seed)?;
    let mean_label = labels.iter().sum::<f64>() / labels.len() as f64;
    for i in 0..model_config.num_scales() {
        if let Some(b) = model.params.get_mut(&format!("scale{i}.head.bias")) {
            *b = Tensor::full(vec![1], mean_label);
        }
    }
    let mut opt = AdamW::new(cfg.optimizer(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let snapshot = |model: &Model, opt: &AdamW, epoch, best: Option<EvalReport>| Checkpoint {
        model: model.clone(),
        optimizer: Some(opt.clone()),
        epoch,
        best_metrics: best,
        weight_table: Some(table.clone()),
    };
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sq_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = batch_gradient(&model, &batch, &table)?;
            opt.step(&mut model.params, &grads)?;
            sq_sum += loss * loss * batch.len() as f64;
        }
        let mut entry = EpochLog {
            epoch,
            train_loss: (sq_sum / train.len() as f64).sqrt(),
            val_rmse: None,
            val_mae: None,
            val_pearson: None,
            val_spearman: None,
        };
        if epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs {
            let report = evaluate_samples(&model, val, &cfg.group_boundaries)?;
            entry.val_rmse = Some(report.rmse);
            entry.val_mae = Some(report.mae);
            entry.val_pearson = report.pearson;
            entry.val_spearman = report.spearman;
            info!(
                "epoch {epoch}: train {:.4}, val rmse {:.4}",
                entry.train_loss, report.rmse
            );
            if best.as_ref().is_none_or(|(r, _)| report.rmse < *r) {
                best = Some((report.rmse, snapshot(&model, &opt, epoch, Some(report))));
            }
        } else {
            debug!("epoch {epoch}: train {:.4}", entry.train_loss);
        }
        on_epoch(&entry);
        log.push(entry);
    }
    let last_metrics = best.as_ref().and_then(|(_, c)| c.best_metrics.clone());
    let last = snapshot(&model, &opt, cfg.max_epochs, last_metrics);
    let best = best.map(|(_, c)| c).expect("the final epoch is always evaluated");
    Ok(TrainOutcome { best, last, log })
}
