//! Network configuration, named parameters, and the full forward pass.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conversion::{convert, AffineVars, ConversionConfig, ConversionVars, ScaleFeatures};
use crate::dgsa::{apply_dgsa_stack, AttentionVars, BlockVars, DgsaConfig};
use crate::embedding::ResidueEmbedding;
use crate::error::{Error, Result};
use crate::head::{aggregate, attention_pool, predict_scale, PoolVars, Prediction};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Per-residue input width `D`.
    pub embed_dim: usize,
    pub conversion: ConversionConfig,
    pub dgsa: DgsaConfig,
    /// Hidden width `H` of the pooling scorer.
    pub pool_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let conversion = ConversionConfig::default();
        ModelConfig {
            embed_dim: 320,
            pool_hidden: conversion.model_dim / 2,
            conversion,
            dgsa: DgsaConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.conversion.validate()?;
        self.dgsa.validate(self.conversion.num_scales())?;
        if self.embed_dim == 0 || self.pool_hidden == 0 {
            return Err(Error::InvalidConfig("embed_dim and pool_hidden must be >= 1".into()));
        }
        Ok(())
    }

    pub fn num_scales(&self) -> usize {
        self.conversion.num_scales()
    }

    /// Smallest sequence length that yields a segment at every scale.
    pub fn min_length(&self) -> usize {
        (1..=self
            .conversion
            .segment_lengths
            .iter()
            .enumerate()
            .map(|(i, l)| l << i)
            .max()
            .unwrap_or(1))
            .find(|&len| self.conversion.layout(len).is_ok())
            .unwrap_or(usize::MAX)
    }
}

/// Names and shapes of every learnable tensor, in a fixed order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let m = cfg.conversion.model_dim;
    let h = cfg.pool_hidden;
    let k = cfg.conversion.kernel;
    let mut out = vec![
        ("scale0.proj.weight".to_string(), vec![m, d]),
        ("scale0.proj.bias".to_string(), vec![m]),
    ];
    let mut push = |name: String, dims: Vec<usize>| out.push((name, dims));
    for (i, &l) in cfg.conversion.segment_lengths.iter().enumerate() {
        let p = format!("scale{i}");
        if i > 0 {
            let d_in = if i == 1 { d } else { m };
            push(format!("{p}.sample.weight"), vec![m, d_in, 2]);
            push(format!("{p}.sample.bias"), vec![m]);
        }
        push(format!("{p}.segconv.weight"), vec![m, k, l, m]);
        push(format!("{p}.segconv.bias"), vec![m]);
        for b in 0..cfg.dgsa.num_blocks {
            for branch in ["short", "long"] {
                for proj in ["query", "key", "value"] {
                    push(format!("{p}.block{b}.{branch}.{proj}.weight"), vec![m, m]);
                    push(format!("{p}.block{b}.{branch}.{proj}.bias"), vec![m]);
                }
            }
            push(format!("{p}.block{b}.norm.gamma"), vec![m]);
            push(format!("{p}.block{b}.norm.beta"), vec![m]);
        }
        push(format!("{p}.pool.hidden.weight"), vec![h, m]);
        push(format!("{p}.pool.score.weight"), vec![1, h]);
        push(format!("{p}.head.weight"), vec![1, m]);
        push(format!("{p}.head.bias"), vec![1]);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Weights uniform in `±1/√fan_in`, biases and norm shifts zero, norm
    /// scales one.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = IndexMap::new();
        for (name, dims) in param_shapes(cfg) {
            let n: usize = dims.iter().product();
            let t = if name.ends_with(".weight") {
                let fan_in: usize = dims[1..].iter().product();
                let a = 1.0 / (fan_in as f64).sqrt();
                let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-a..a)).collect();
                Tensor::from_f64(dims, &v)?
            } else if name.ends_with(".gamma") {
                Tensor::full(dims, 1.0)
            } else {
                Tensor::zeros(dims)
            };
            tensors.insert(name, t);
        }
        Ok(ModelParams { tensors })
    }

    /// Checks names and shapes against `cfg`.
    pub fn from_named(cfg: &ModelConfig, mut named: IndexMap<String, Tensor<T>>) -> Result<Self> {
        let mut tensors = IndexMap::new();
        for (name, dims) in param_shapes(cfg) {
            let t = named
                .shift_remove(&name)
                .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter {name}")))?;
            if t.dims() != dims.as_slice() {
                return Err(Error::ConfigMismatch(format!(
                    "{name}: expected {dims:?}, found {:?}",
                    t.dims()
                )));
            }
            tensors.insert(name, t);
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::ConfigMismatch(format!("unexpected parameter {extra}")));
        }
        Ok(ModelParams { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Tape handles for every parameter, grouped by where they are used.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub conversion: ConversionVars,
    pub blocks: Vec<Vec<BlockVars>>,
    pub pools: Vec<PoolVars>,
    /// All parameter vars in [`param_shapes`] order.
    pub ordered: Vec<(String, Var)>,
}

impl ModelVars {
    /// Registers `params` as leaves on `tape`.
    pub fn bind<T: Real>(
        tape: &mut Tape<T>,
        cfg: &ModelConfig,
        params: &ModelParams<T>,
        requires_grad: bool,
    ) -> Result<Self> {
        let mut ordered = Vec::with_capacity(params.len());
        for (name, _) in param_shapes(cfg) {
            let t = params
                .get(&name)
                .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter {name}")))?;
            ordered.push((name, tape.leaf(t.clone(), requires_grad)?));
        }
        Self::assemble(cfg, ordered)
    }

    /// Groups vars that are already on a tape, given in [`param_shapes`] order.
    pub fn assemble(cfg: &ModelConfig, ordered: Vec<(String, Var)>) -> Result<Self> {
        let map: IndexMap<&str, Var> = ordered.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        let get = |name: &str| {
            map.get(name)
                .copied()
                .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter {name}")))
        };
        let affine = |p: &str| -> Result<AffineVars> {
            Ok(AffineVars {
                weight: get(&format!("{p}.weight"))?,
                bias: get(&format!("{p}.bias"))?,
            })
        };
        let attention = |p: &str| -> Result<AttentionVars> {
            Ok(AttentionVars {
                query: affine(&format!("{p}.query"))?,
                key: affine(&format!("{p}.key"))?,
                value: affine(&format!("{p}.value"))?,
            })
        };
        let scales = cfg.num_scales();
        let mut samplers = Vec::new();
        let mut segment_convs = Vec::new();
        let mut blocks = Vec::new();
        let mut pools = Vec::new();
        for i in 0..scales {
            if i > 0 {
                samplers.push(affine(&format!("scale{i}.sample"))?);
            }
            segment_convs.push(affine(&format!("scale{i}.segconv"))?);
            let mut bs = Vec::new();
            for b in 0..cfg.dgsa.num_blocks {
                let p = format!("scale{i}.block{b}");
                bs.push(BlockVars {
                    short: attention(&format!("{p}.short"))?,
                    long: attention(&format!("{p}.long"))?,
                    norm_gamma: get(&format!("{p}.norm.gamma"))?,
                    norm_beta: get(&format!("{p}.norm.beta"))?,
                });
            }
            blocks.push(bs);
            pools.push(PoolVars {
                hidden: get(&format!("scale{i}.pool.hidden.weight"))?,
                score: get(&format!("scale{i}.pool.score.weight"))?,
                readout: affine(&format!("scale{i}.head"))?,
            });
        }
        let conversion = ConversionVars {
            projection: affine("scale0.proj")?,
            samplers,
            segment_convs,
        };
        Ok(ModelVars {
            conversion,
            blocks,
            pools,
            ordered,
        })
    }
}

/// Every intermediate of one forward pass, as tape handles.
#[derive(Clone, Debug)]
pub struct ForwardGraph {
    /// Segment-level features after conversion.
    pub segments: ScaleFeatures,
    /// Features after the DGSA stack.
    pub contextual: ScaleFeatures,
    /// Pooled `z_i`, `[B, D_model]` per scale.
    pub pooled: Vec<Var>,
    /// Pooling weights `α_i`, `[B, N_i]` per scale.
    pub alphas: Vec<Var>,
    /// `ŷ_i`, `[B, 1]` per scale.
    pub scale_preds: Vec<Var>,
    /// Mean of the per-scale outputs, `[B, 1]`.
    pub y_hat: Var,
}

/// Runs `x: [B, L, D]` through conversion, DGSA, pooling and readout.
pub fn forward_graph<T: Real>(tape: &mut Tape<T>, cfg: &ModelConfig, vars: &ModelVars, x: Var) -> Result<ForwardGraph> {
    let dims = tape.dims(x).to_vec();
    if dims.len() != 3 || dims[2] != cfg.embed_dim {
        return Err(Error::ConfigMismatch(format!(
            "input {dims:?} does not match embed_dim {}",
            cfg.embed_dim
        )));
    }
    let segments = convert(tape, x, &cfg.conversion, &vars.conversion)?;
    let contextual = apply_dgsa_stack(tape, &segments, &cfg.dgsa, &vars.blocks)?;
    let mut pooled = Vec::new();
    let mut alphas = Vec::new();
    let mut scale_preds = Vec::new();
    for (sf, pv) in contextual.scales.iter().zip(&vars.pools) {
        let (z, alpha) = attention_pool(tape, sf.features, pv)?;
        scale_preds.push(predict_scale(tape, z, &pv.readout)?);
        pooled.push(z);
        alphas.push(alpha);
    }
    let stacked = tape.concat_last(&scale_preds)?;
    let y_hat = tape.mean_last(stacked)?;
    let y_hat = tape.reshape(y_hat, &[dims[0], 1])?;
    Ok(ForwardGraph {
        segments,
        contextual,
        pooled,
        alphas,
        scale_preds,
        y_hat,
    })
}

/// Reads per-sample predictions off an evaluated graph.
pub fn read_predictions<T: Real>(tape: &Tape<T>, graph: &ForwardGraph) -> Result<Vec<Prediction>> {
    let batch = tape.dims(graph.y_hat)[0];
    let spans: Vec<usize> = graph.segments.scales.iter().map(|s| s.residue_span).collect();
    let preds: Vec<Vec<f64>> = graph.scale_preds.iter().map(|&v| tape.value(v).to_f64_vec()).collect();
    let alphas: Vec<Vec<f64>> = graph.alphas.iter().map(|&v| tape.value(v).to_f64_vec()).collect();
    (0..batch)
        .map(|b| {
            let per_scale: Vec<f64> = preds.iter().map(|p| p[b]).collect();
            let a: Vec<Vec<f64>> = alphas
                .iter()
                .zip(&graph.alphas)
                .map(|(vals, &v)| {
                    let n = tape.dims(v)[1];
                    vals[b * n..(b + 1) * n].to_vec()
                })
                .collect();
            aggregate(&per_scale, &a, &spans)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams<f32>,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams<f32>) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::from_named(&config, params.tensors)?;
        Ok(Model { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Model { config, params })
    }

    fn check_embedding(&self, e: &ResidueEmbedding) -> Result<()> {
        if e.dim() != self.config.embed_dim {
            return Err(Error::ConfigMismatch(format!(
                "{}: embedding width {} but model expects {}",
                e.accession,
                e.dim(),
                self.config.embed_dim
            )));
        }
        self.config.conversion.layout(e.len()).map(|_| ())
    }

    /// Inference-only forward of one embedding, keeping the tape so callers
    /// can read intermediates.
    pub fn trace(&self, e: &ResidueEmbedding) -> Result<(Tape<f32>, ForwardGraph)> {
        self.check_embedding(e)?;
        let mut tape = Tape::new();
        let vars = ModelVars::bind(&mut tape, &self.config, &self.params, false)?;
        let x = tape.constant(e.to_tensor())?;
        let graph = forward_graph(&mut tape, &self.config, &vars, x)?;
        Ok((tape, graph))
    }

    pub fn predict(&self, e: &ResidueEmbedding) -> Result<Prediction> {
        let (tape, graph) = self.trace(e)?;
        let mut p = read_predictions(&tape, &graph)?.remove(0);
        p.accession = e.accession.clone();
        Ok(p)
    }

    /// Forwards equal-length embeddings as one batch.
    pub fn predict_batch(&self, es: &[ResidueEmbedding]) -> Result<Vec<Prediction>> {
        let first = es.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        let (len, dim) = (first.len(), first.dim());
        let mut data = Vec::with_capacity(es.len() * len * dim);
        for e in es {
            self.check_embedding(e)?;
            if e.len() != len {
                return Err(Error::Shape(format!("batch lengths differ: {} vs {}", e.len(), len)));
            }
            data.extend_from_slice(e.values());
        }
        let mut tape = Tape::new();
        let vars = ModelVars::bind(&mut tape, &self.config, &self.params, false)?;
        let x = tape.constant(Tensor::new(vec![es.len(), len, dim], data)?)?;
        let graph = forward_graph(&mut tape, &self.config, &vars, x)?;
        let mut out = read_predictions(&tape, &graph)?;
        for (p, e) in out.iter_mut().zip(es) {
            p.accession = e.accession.clone();
        }
        Ok(out)
    }
}

/// Free-function form of [`Model::predict`].
pub fn forward(embedding: &ResidueEmbedding, config: &ModelConfig, params: &ModelParams<f32>) -> Result<Prediction> {
    let model = Model {
        config: config.clone(),
        params: params.clone(),
    };
    model.predict(embedding)
}
