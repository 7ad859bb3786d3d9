//! A small encoder-decoder transformer trained from scratch on CPU, exposed
//! through the core [`Seq2SeqBackend`] contract.
//!
//! Tokenization is word-level over a vocabulary built from the training
//! corpus; decoding is greedy. Checkpoints are a directory holding
//! `weights.safetensors`, `vocab.json` and `hyper.json`.

pub mod model;
pub mod vocab;

use std::path::Path;

use candle_core::{Device, Tensor, Var, D};
use sentreason_core::training::{BackendError, LossNormalization, TrainConfig};
use sentreason_core::{Seq2SeqBackend, TaskSet};

pub use model::Hyper;
use model::{attention_mask, log_softmax_last, Model, Params};
pub use vocab::Vocab;
use vocab::{BOS, EOS, PAD};

pub const BACKEND_ID: &str = "tiny-transformer";

fn err(e: impl std::fmt::Display) -> BackendError {
    BackendError::new(e)
}

/// Adam with global-norm gradient clipping.
struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: i32,
    clip: f64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Adam {
    fn new(vars: &[Var]) -> candle_core::Result<Self> {
        let zeros = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Adam {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            clip: 1.0,
        })
    }

    fn step(&mut self, vars: &[Var], grads: &candle_core::backprop::GradStore, lr: f64) -> candle_core::Result<()> {
        let gs: Vec<Option<Tensor>> = vars.iter().map(|v| grads.get(v).map(|g| g.detach())).collect();
        let mut sq = 0.0f64;
        for g in gs.iter().flatten() {
            sq += g.sqr()?.sum_all()?.to_scalar::<f32>()? as f64;
        }
        let norm = sq.sqrt();
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step);
        let bc2 = 1.0 - BETA2.powi(self.step);
        for (i, (var, g)) in vars.iter().zip(gs).enumerate() {
            let Some(g) = g else { continue };
            let g = g.affine(scale, 0.0)?;
            self.m[i] = (self.m[i].affine(BETA1, 0.0)? + g.affine(1.0 - BETA1, 0.0)?)?;
            self.v[i] = (self.v[i].affine(BETA2, 0.0)? + g.sqr()?.affine(1.0 - BETA2, 0.0)?)?;
            let denom = self.v[i].affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, EPS)?;
            let delta = self.m[i].affine(lr / bc1, 0.0)?.div(&denom)?;
            var.set(&var.as_detached_tensor().sub(&delta)?)?;
        }
        Ok(())
    }
}

pub struct TinyTransformer {
    vocab: Vocab,
    hyper: Hyper,
    params: Params,
    adam: Adam,
    device: Device,
    max_input_tokens: usize,
    max_target_tokens: usize,
    normalization: LossNormalization,
    pending: Vec<Tensor>,
}

/// Padded id matrix `[B, T]` plus each row's unpadded length.
fn pad(rows: &[Vec<u32>], device: &Device) -> candle_core::Result<(Tensor, Vec<usize>)> {
    let t = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let lens: Vec<usize> = rows.iter().map(Vec::len).collect();
    let mut data = Vec::with_capacity(rows.len() * t);
    for r in rows {
        data.extend_from_slice(r);
        data.extend(std::iter::repeat_n(PAD, t - r.len()));
    }
    Ok((Tensor::from_vec(data, (rows.len(), t), device)?, lens))
}

impl TinyTransformer {
    pub fn new(vocab: Vocab, hyper: Hyper) -> Result<Self, BackendError> {
        let device = Device::Cpu;
        let params = Params::init(&hyper, vocab.len(), &device).map_err(err)?;
        let adam = Adam::new(&params.vars).map_err(err)?;
        let limit = hyper.max_positions.saturating_sub(1).max(1);
        Ok(TinyTransformer {
            vocab,
            hyper,
            params,
            adam,
            device,
            max_input_tokens: limit,
            max_target_tokens: limit,
            normalization: LossNormalization::TokenMean,
            pending: Vec::new(),
        })
    }

    /// Builds the vocabulary from every input and target of `taskset`.
    pub fn for_taskset(taskset: &TaskSet, hyper: Hyper) -> Result<Self, BackendError> {
        let vocab = Vocab::build(
            taskset
                .instances
                .iter()
                .flat_map(|i| [i.input_text.as_str(), i.target_text.as_str()]),
        );
        Self::new(vocab, hyper)
    }

    /// Restores a checkpoint written by [`Seq2SeqBackend::save`].
    pub fn from_dir(dir: &Path) -> Result<Self, BackendError> {
        let hyper: Hyper = serde_json::from_str(&read(dir, "hyper.json")?).map_err(err)?;
        let vocab = Vocab::from_json(&read(dir, "vocab.json")?).map_err(err)?;
        let mut model = Self::new(vocab, hyper)?;
        model.load(dir)?;
        Ok(model)
    }

    pub fn with_normalization(mut self, normalization: LossNormalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn hyper(&self) -> Hyper {
        self.hyper
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn model(&self) -> Model<'_> {
        Model {
            p: &self.params,
            d: self.hyper.d_model,
        }
    }

    fn encode_inputs(&self, inputs: &[&str]) -> candle_core::Result<(Tensor, Vec<usize>, Tensor)> {
        let rows: Vec<Vec<u32>> = inputs
            .iter()
            .map(|s| {
                let mut ids = self.vocab.encode(s, self.max_input_tokens);
                if ids.is_empty() {
                    ids.push(EOS);
                }
                ids
            })
            .collect();
        let (src, lens) = pad(&rows, &self.device)?;
        let ts = src.dim(1)?;
        let mask = attention_mask(&lens, ts, ts, false, &self.device)?;
        let memory = self.model().encode(&src, &mask)?;
        Ok((memory, lens, src))
    }

    /// Scalar teacher-forced cross-entropy for the batch.
    fn loss(&self, batch: &[(&str, &str)]) -> candle_core::Result<Tensor> {
        let inputs: Vec<&str> = batch.iter().map(|b| b.0).collect();
        let (memory, src_lens, src) = self.encode_inputs(&inputs)?;
        let ts = src.dim(1)?;
        let keep = self.max_target_tokens.saturating_sub(1);
        let mut dec_in = Vec::new();
        let mut dec_out = Vec::new();
        for (_, target) in batch {
            let body = self.vocab.encode(target, keep);
            dec_in.push([&[BOS][..], &body].concat());
            dec_out.push([&body[..], &[EOS]].concat());
        }
        let (tgt_in, tgt_lens) = pad(&dec_in, &self.device)?;
        let (tgt_out, _) = pad(&dec_out, &self.device)?;
        let tt = tgt_in.dim(1)?;
        let self_mask = attention_mask(&tgt_lens, tt, tt, true, &self.device)?;
        let cross_mask = attention_mask(&src_lens, tt, ts, false, &self.device)?;
        let logits = self.model().decode(&memory, &tgt_in, &self_mask, &cross_mask)?;
        let logp = log_softmax_last(&logits)?;
        let picked = logp.gather(&tgt_out.unsqueeze(2)?, 2)?.squeeze(2)?;
        let mut valid = Vec::with_capacity(batch.len() * tt);
        for &len in &tgt_lens {
            valid.extend((0..tt).map(|i| if i < len { 1.0f32 } else { 0.0 }));
        }
        let valid = Tensor::from_vec(valid, (batch.len(), tt), &self.device)?;
        let nll = picked.mul(&valid)?.neg()?;
        match self.normalization {
            LossNormalization::TokenMean => {
                let n: usize = tgt_lens.iter().sum();
                nll.sum_all()?.affine(1.0 / n as f64, 0.0)
            }
            LossNormalization::SequenceMean => {
                let lens: Vec<f32> = tgt_lens.iter().map(|&l| l as f32).collect();
                let lens = Tensor::from_vec(lens, batch.len(), &self.device)?;
                nll.sum(D::Minus1)?.div(&lens)?.mean_all()
            }
        }
    }

    fn greedy(&self, inputs: &[&str], max_new_tokens: usize) -> candle_core::Result<Vec<String>> {
        let (memory, src_lens, src) = self.encode_inputs(inputs)?;
        let ts = src.dim(1)?;
        let n = inputs.len();
        let steps = max_new_tokens.min(self.hyper.max_positions);
        let mut seqs: Vec<Vec<u32>> = vec![vec![BOS]; n];
        let mut done = vec![false; n];
        for _ in 0..steps {
            let (tgt, lens) = pad(&seqs, &self.device)?;
            let tt = tgt.dim(1)?;
            let self_mask = attention_mask(&lens, tt, tt, true, &self.device)?;
            let cross_mask = attention_mask(&src_lens, tt, ts, false, &self.device)?;
            let logits = self.model().decode(&memory, &tgt, &self_mask, &cross_mask)?;
            let last = logits.narrow(1, tt - 1, 1)?.squeeze(1)?;
            let next = last.argmax_keepdim(D::Minus1)?.squeeze(1)?.to_vec1::<u32>()?;
            for (i, tok) in next.into_iter().enumerate() {
                if !done[i] {
                    seqs[i].push(tok);
                    done[i] = tok == EOS;
                } else {
                    seqs[i].push(EOS);
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(seqs.iter().map(|s| self.vocab.decode(&s[1..])).collect())
    }
}

fn read(dir: &Path, name: &str) -> Result<String, BackendError> {
    let path = dir.join(name);
    std::fs::read_to_string(&path).map_err(|e| err(format!("{}: {e}", path.display())))
}

impl Seq2SeqBackend for TinyTransformer {
    fn id(&self) -> String {
        BACKEND_ID.into()
    }

    fn configure(&mut self, config: &TrainConfig) -> Result<(), BackendError> {
        let limit = self.hyper.max_positions;
        if config.max_input_tokens > limit || config.max_target_tokens >= limit {
            return Err(err(format!(
                "token limits {}/{} exceed the {limit} positions of this model",
                config.max_input_tokens, config.max_target_tokens
            )));
        }
        self.max_input_tokens = config.max_input_tokens;
        self.max_target_tokens = config.max_target_tokens;
        Ok(())
    }

    fn accumulate(&mut self, batch: &[(&str, &str)], weight: f64) -> Result<f64, BackendError> {
        if batch.is_empty() {
            return Err(err("empty batch"));
        }
        let loss = self.loss(batch).map_err(err)?;
        let value = loss.to_scalar::<f32>().map_err(err)? as f64;
        if weight != 0.0 {
            self.pending.push(loss.affine(weight, 0.0).map_err(err)?);
        }
        Ok(value)
    }

    fn update(&mut self, learning_rate: f64) -> Result<(), BackendError> {
        let pending = std::mem::take(&mut self.pending);
        let Some((first, rest)) = pending.split_first() else {
            return Ok(());
        };
        let total = rest.iter().try_fold(first.clone(), |acc, t| acc + t).map_err(err)?;
        let grads = total.backward().map_err(err)?;
        self.adam.step(&self.params.vars, &grads, learning_rate).map_err(err)
    }

    fn discard(&mut self) {
        self.pending.clear();
    }

    fn generate(&self, inputs: &[&str], max_new_tokens: usize) -> Result<Vec<String>, BackendError> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        self.greedy(inputs, max_new_tokens).map_err(err)
    }

    fn save(&self, dir: &Path) -> Result<(), BackendError> {
        std::fs::create_dir_all(dir).map_err(err)?;
        candle_core::safetensors::save(&self.params.to_map(), dir.join("weights.safetensors")).map_err(err)?;
        std::fs::write(dir.join("vocab.json"), self.vocab.to_json()).map_err(err)?;
        let hyper = serde_json::to_string_pretty(&self.hyper).map_err(err)?;
        std::fs::write(dir.join("hyper.json"), hyper).map_err(err)
    }

    /// Restores weights only; optimizer moments restart from zero.
    fn load(&mut self, dir: &Path) -> Result<(), BackendError> {
        let vocab = Vocab::from_json(&read(dir, "vocab.json")?).map_err(err)?;
        if vocab != self.vocab {
            return Err(err("checkpoint vocabulary differs from this model's"));
        }
        let map = candle_core::safetensors::load(dir.join("weights.safetensors"), &self.device).map_err(err)?;
        self.params.assign(&map).map_err(err)?;
        self.adam = Adam::new(&self.params.vars).map_err(err)?;
        self.pending.clear();
        Ok(())
    }

    fn loss_normalization(&self) -> LossNormalization {
        self.normalization
    }
}
