//! Parameters and forward pass of a one-layer pre-norm encoder-decoder
//! transformer with tied input/output embeddings.

use std::collections::HashMap;

use candle_core::{DType, Device, Result, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyper {
    pub d_model: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            d_model: 64,
            ff_dim: 256,
            max_positions: 256,
            seed: 0,
        }
    }
}

const NEG_INF: f32 = -1e9;

/// Named parameters, kept in a fixed order so optimizer state lines up.
pub struct Params {
    pub names: Vec<String>,
    pub vars: Vec<Var>,
}

impl Params {
    /// Xavier-uniform matrices, unit gains, zero biases; all drawn from one
    /// seeded stream so initialization is reproducible.
    pub fn init(hyper: &Hyper, vocab: usize, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let d = hyper.d_model;
        let mut names = Vec::new();
        let mut vars = Vec::new();
        let mut push = |name: String, rows: usize, cols: usize, kind: Init| -> Result<()> {
            let data: Vec<f32> = match kind {
                Init::Uniform(bound) => (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect(),
                Init::Const(c) => vec![c; rows * cols],
            };
            let shape: Vec<usize> = if rows == 1 { vec![cols] } else { vec![rows, cols] };
            vars.push(Var::from_vec(data, shape, device)?);
            names.push(name);
            Ok(())
        };
        let xavier = |a: usize, b: usize| Init::Uniform((6.0 / (a + b) as f32).sqrt());
        let emb = Init::Uniform((3.0 / d as f32).sqrt());
        push("embed".into(), vocab, d, emb)?;
        push("pos".into(), hyper.max_positions, d, emb)?;
        for block in ["enc.self", "dec.self", "dec.cross"] {
            for m in ["q", "k", "v", "o"] {
                push(format!("{block}.{m}"), d, d, xavier(d, d))?;
            }
        }
        for block in ["enc", "dec"] {
            push(format!("{block}.ff1"), d, hyper.ff_dim, xavier(d, hyper.ff_dim))?;
            push(format!("{block}.ff1_b"), 1, hyper.ff_dim, Init::Const(0.0))?;
            push(format!("{block}.ff2"), hyper.ff_dim, d, xavier(hyper.ff_dim, d))?;
            push(format!("{block}.ff2_b"), 1, d, Init::Const(0.0))?;
        }
        for ln in ["enc.ln1", "enc.ln2", "enc.ln_out", "dec.ln1", "dec.ln2", "dec.ln3", "dec.ln_out"] {
            push(format!("{ln}.g"), 1, d, Init::Const(1.0))?;
            push(format!("{ln}.b"), 1, d, Init::Const(0.0))?;
        }
        Ok(Params { names, vars })
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self.names.iter().position(|n| n == name).unwrap_or_else(|| panic!("no parameter {name}"));
        self.vars[i].as_tensor()
    }

    pub fn count(&self) -> usize {
        self.vars.iter().map(|v| v.elem_count()).sum()
    }

    pub fn to_map(&self) -> HashMap<String, Tensor> {
        self.names
            .iter()
            .cloned()
            .zip(self.vars.iter().map(|v| v.as_detached_tensor()))
            .collect()
    }

    /// Overwrites every parameter from `map`; shapes must match.
    pub fn assign(&self, map: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.names.iter().zip(&self.vars) {
            let t = map
                .get(name)
                .ok_or_else(|| candle_core::Error::Msg(format!("checkpoint lacks {name}")))?;
            if t.dims() != var.dims() {
                return Err(candle_core::Error::Msg(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Init {
    Uniform(f32),
    Const(f32),
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let shifted = x.broadcast_sub(&x.max_keepdim(D::Minus1)?)?;
    let e = shifted.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let shifted = x.broadcast_sub(&x.max_keepdim(D::Minus1)?)?;
    shifted.broadcast_sub(&shifted.exp()?.sum_keepdim(D::Minus1)?.log()?)
}

fn layer_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    centered
        .broadcast_div(&var.affine(1.0, 1e-5)?.sqrt()?)?
        .broadcast_mul(g)?
        .broadcast_add(b)
}

/// Additive attention mask `[B, Tq, Tk]`: `-1e9` on padded keys and, when
/// `causal`, on future positions.
pub fn attention_mask(key_lens: &[usize], tq: usize, tk: usize, causal: bool, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(key_lens.len() * tq * tk);
    for &len in key_lens {
        for q in 0..tq {
            for k in 0..tk {
                let blocked = k >= len || (causal && k > q);
                data.push(if blocked { NEG_INF } else { 0.0 });
            }
        }
    }
    Tensor::from_vec(data, (key_lens.len(), tq, tk), device)
}

pub struct Model<'a> {
    pub p: &'a Params,
    pub d: usize,
}

impl Model<'_> {
    fn embed(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        let flat = self.p.get("embed").embedding(&ids.flatten_all()?)?;
        let tok = flat.reshape((b, t, self.d))?;
        let pos = self.p.get("pos").narrow(0, 0, t)?;
        tok.broadcast_add(&pos)
    }

    fn attention(&self, block: &str, x: &Tensor, memory: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let w = |m: &str| self.p.get(&format!("{block}.{m}"));
        let q = x.broadcast_matmul(w("q"))?;
        let k = memory.broadcast_matmul(w("k"))?;
        let v = memory.broadcast_matmul(w("v"))?;
        let scores = q
            .matmul(&k.transpose(1, 2)?.contiguous()?)?
            .affine(1.0 / (self.d as f64).sqrt(), 0.0)?
            .broadcast_add(mask)?;
        softmax_last(&scores)?.matmul(&v)?.broadcast_matmul(w("o"))
    }

    fn feed_forward(&self, block: &str, x: &Tensor) -> Result<Tensor> {
        let w = |m: &str| self.p.get(&format!("{block}.{m}"));
        x.broadcast_matmul(w("ff1"))?
            .broadcast_add(w("ff1_b"))?
            .relu()?
            .broadcast_matmul(w("ff2"))?
            .broadcast_add(w("ff2_b"))
    }

    fn ln(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, self.p.get(&format!("{name}.g")), self.p.get(&format!("{name}.b")))
    }

    /// Encoder states `[B, Ts, d]`.
    pub fn encode(&self, src: &Tensor, src_mask: &Tensor) -> Result<Tensor> {
        let x = self.embed(src)?;
        let h = self.ln("enc.ln1", &x)?;
        let x = (&x + self.attention("enc.self", &h, &h, src_mask)?)?;
        let h = self.ln("enc.ln2", &x)?;
        let x = (&x + self.feed_forward("enc", &h)?)?;
        self.ln("enc.ln_out", &x)
    }

    /// Vocabulary logits `[B, Tt, V]` for every decoder position.
    pub fn decode(&self, memory: &Tensor, tgt: &Tensor, self_mask: &Tensor, cross_mask: &Tensor) -> Result<Tensor> {
        let y = self.embed(tgt)?;
        let h = self.ln("dec.ln1", &y)?;
        let y = (&y + self.attention("dec.self", &h, &h, self_mask)?)?;
        let h = self.ln("dec.ln2", &y)?;
        let y = (&y + self.attention("dec.cross", &h, memory, cross_mask)?)?;
        let h = self.ln("dec.ln3", &y)?;
        let y = (&y + self.feed_forward("dec", &h)?)?;
        let y = self.ln("dec.ln_out", &y)?;
        y.broadcast_matmul(&self.p.get("embed").t()?)
    }
}
