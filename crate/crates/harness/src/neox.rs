//! GPT-NeoX causal LM on candle, CPU, float32.
//!
//! Only the next-token distribution at the last position is computed, with
//! no KV cache: each query runs the full prefix. Prefixes of equal length
//! are batched into one forward pass.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Embedding, LayerNorm, LayerNormConfig, Linear, VarBuilder};
use polarity_core::lm::check_query;
use polarity_core::{LanguageModel, LmError, NextTokenDistribution, TokenId};
use serde_json::Value;

const MAX_BATCH: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum NeoxError {
    #[error("{}: {msg}", path.display())]
    Config { path: PathBuf, msg: String },
    #[error("no weights (model.safetensors, model.safetensors.index.json or pytorch_model.bin) in {}", .0.display())]
    NoWeights(PathBuf),
    #[error("tokenizer {}: {msg}", path.display())]
    Tokenizer { path: PathBuf, msg: String },
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeoxConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    pub rotary_pct: f64,
    pub rotary_emb_base: f64,
    pub layer_norm_eps: f64,
    pub use_parallel_residual: bool,
    pub max_position_embeddings: usize,
}

impl NeoxConfig {
    /// Reads `config.json`, accepting both the flat rotary keys and the
    /// nested `rope_parameters` block.
    pub fn from_json(text: &str, path: &Path) -> Result<Self, NeoxError> {
        let err = |msg: String| NeoxError::Config {
            path: path.to_path_buf(),
            msg,
        };
        let v: Value = serde_json::from_str(text).map_err(|e| err(e.to_string()))?;
        if let Some(t) = v.get("model_type").and_then(Value::as_str) {
            if t != "gpt_neox" {
                return Err(err(format!("model_type `{t}` is not gpt_neox")));
            }
        }
        if let Some(act) = v.get("hidden_act").and_then(Value::as_str) {
            if act != "gelu" {
                return Err(err(format!("unsupported activation `{act}`")));
            }
        }
        let int = |k: &str| {
            v.get(k)
                .and_then(Value::as_u64)
                .map(|n| n as usize)
                .ok_or_else(|| err(format!("missing integer `{k}`")))
        };
        let rope = v.get("rope_parameters");
        let num = |flat: &str, nested: &str, default: f64| {
            v.get(flat)
                .or_else(|| rope.and_then(|r| r.get(nested)))
                .and_then(Value::as_f64)
                .unwrap_or(default)
        };
        let cfg = Self {
            vocab_size: int("vocab_size")?,
            hidden_size: int("hidden_size")?,
            num_hidden_layers: int("num_hidden_layers")?,
            num_attention_heads: int("num_attention_heads")?,
            intermediate_size: int("intermediate_size")?,
            rotary_pct: num("rotary_pct", "partial_rotary_factor", 0.25),
            rotary_emb_base: num("rotary_emb_base", "rope_theta", 10000.0),
            layer_norm_eps: v.get("layer_norm_eps").and_then(Value::as_f64).unwrap_or(1e-5),
            use_parallel_residual: v.get("use_parallel_residual").and_then(Value::as_bool).unwrap_or(true),
            max_position_embeddings: int("max_position_embeddings")?,
        };
        if cfg.num_attention_heads == 0 || !cfg.hidden_size.is_multiple_of(cfg.num_attention_heads) {
            return Err(err("hidden_size must be a multiple of num_attention_heads".into()));
        }
        if v.get("tie_word_embeddings").and_then(Value::as_bool) == Some(true) {
            return Err(err("tied embeddings are not supported".into()));
        }
        Ok(cfg)
    }

    fn head_dim(&self) -> usize {
        self.hidden_size / self.num_attention_heads
    }

    fn rotary_ndims(&self) -> usize {
        (self.head_dim() as f64 * self.rotary_pct) as usize
    }
}

fn layer_norm(size: usize, eps: f64, vb: VarBuilder) -> candle_core::Result<LayerNorm> {
    candle_nn::layer_norm(
        size,
        LayerNormConfig {
            eps,
            ..Default::default()
        },
        vb,
    )
}

struct Rotary {
    cos: Tensor,
    sin: Tensor,
    ndims: usize,
}

impl Rotary {
    fn new(cfg: &NeoxConfig, device: &Device) -> candle_core::Result<Self> {
        let dim = cfg.rotary_ndims();
        let half = dim / 2;
        let inv_freq: Vec<f32> = (0..half)
            .map(|i| 1.0 / (cfg.rotary_emb_base as f32).powf((2 * i) as f32 / dim as f32))
            .collect();
        let n = cfg.max_position_embeddings;
        let mut freqs = Vec::with_capacity(n * dim);
        for pos in 0..n {
            let row: Vec<f32> = inv_freq.iter().map(|f| pos as f32 * f).collect();
            freqs.extend_from_slice(&row);
            freqs.extend_from_slice(&row);
        }
        let freqs = Tensor::from_vec(freqs, (n, dim), device)?;
        Ok(Self {
            cos: freqs.cos()?,
            sin: freqs.sin()?,
            ndims: dim,
        })
    }

    /// `x` is `[batch, heads, seq, head_dim]`.
    fn apply(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        if self.ndims == 0 {
            return Ok(x.clone());
        }
        let (_, _, seq, hd) = x.dims4()?;
        let cos = self.cos.narrow(0, 0, seq)?;
        let sin = self.sin.narrow(0, 0, seq)?;
        let rot = x.narrow(D::Minus1, 0, self.ndims)?;
        let half = self.ndims / 2;
        let x1 = rot.narrow(D::Minus1, 0, half)?;
        let x2 = rot.narrow(D::Minus1, half, half)?;
        let rotated = Tensor::cat(&[&x2.neg()?, &x1], D::Minus1)?;
        let embedded = (rot.broadcast_mul(&cos)? + rotated.broadcast_mul(&sin)?)?;
        if self.ndims == hd {
            return Ok(embedded);
        }
        let pass = x.narrow(D::Minus1, self.ndims, hd - self.ndims)?;
        Tensor::cat(&[&embedded, &pass], D::Minus1)
    }
}

struct Attention {
    qkv: Linear,
    dense: Linear,
    heads: usize,
    head_dim: usize,
}

impl Attention {
    fn forward(&self, x: &Tensor, rotary: &Rotary, mask: &Tensor) -> candle_core::Result<Tensor> {
        let (b, s, _) = x.dims3()?;
        let qkv = self.qkv.forward(x)?.reshape((b, s, self.heads, 3 * self.head_dim))?;
        let part = |i: usize| -> candle_core::Result<Tensor> {
            qkv.narrow(D::Minus1, i * self.head_dim, self.head_dim)?
                .transpose(1, 2)?
                .contiguous()
        };
        let q = rotary.apply(&part(0)?)?.contiguous()?;
        let k = rotary.apply(&part(1)?)?.contiguous()?;
        let v = part(2)?;
        let scale = (self.head_dim as f64).powf(-0.5);
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?.broadcast_add(mask)?;
        let probs = candle_nn::ops::softmax_last_dim(&scores)?;
        let out = probs.matmul(&v)?.transpose(1, 2)?.contiguous()?;
        self.dense.forward(&out.reshape((b, s, self.heads * self.head_dim))?)
    }
}

struct Mlp {
    up: Linear,
    down: Linear,
}

impl Mlp {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.gelu_erf()?)
    }
}

struct Layer {
    ln1: LayerNorm,
    ln2: LayerNorm,
    attn: Attention,
    mlp: Mlp,
    parallel: bool,
}

impl Layer {
    fn forward(&self, x: &Tensor, rotary: &Rotary, mask: &Tensor) -> candle_core::Result<Tensor> {
        let attn = self.attn.forward(&self.ln1.forward(x)?, rotary, mask)?;
        if self.parallel {
            let mlp = self.mlp.forward(&self.ln2.forward(x)?)?;
            (x + attn)? + mlp
        } else {
            let h = (x + attn)?;
            let mlp = self.mlp.forward(&self.ln2.forward(&h)?)?;
            h + mlp
        }
    }
}

/// Weights of a GPT-NeoX causal LM.
pub struct NeoxModel {
    cfg: NeoxConfig,
    embed: Embedding,
    layers: Vec<Layer>,
    final_ln: LayerNorm,
    lm_head: Linear,
    rotary: Rotary,
    device: Device,
}

impl NeoxModel {
    pub fn new(cfg: NeoxConfig, vb: VarBuilder) -> Result<Self, NeoxError> {
        let device = vb.device().clone();
        let h = cfg.hidden_size;
        let base = vb.pp("gpt_neox");
        let embed = candle_nn::embedding(cfg.vocab_size, h, base.pp("embed_in"))?;
        let mut layers = Vec::with_capacity(cfg.num_hidden_layers);
        for i in 0..cfg.num_hidden_layers {
            let lv = base.pp(format!("layers.{i}"));
            let av = lv.pp("attention");
            let mv = lv.pp("mlp");
            layers.push(Layer {
                ln1: layer_norm(h, cfg.layer_norm_eps, lv.pp("input_layernorm"))?,
                ln2: layer_norm(h, cfg.layer_norm_eps, lv.pp("post_attention_layernorm"))?,
                attn: Attention {
                    qkv: candle_nn::linear(h, 3 * h, av.pp("query_key_value"))?,
                    dense: candle_nn::linear(h, h, av.pp("dense"))?,
                    heads: cfg.num_attention_heads,
                    head_dim: cfg.head_dim(),
                },
                mlp: Mlp {
                    up: candle_nn::linear(h, cfg.intermediate_size, mv.pp("dense_h_to_4h"))?,
                    down: candle_nn::linear(cfg.intermediate_size, h, mv.pp("dense_4h_to_h"))?,
                },
                parallel: cfg.use_parallel_residual,
            });
        }
        let final_ln = layer_norm(h, cfg.layer_norm_eps, base.pp("final_layer_norm"))?;
        let lm_head = candle_nn::linear_no_bias(h, cfg.vocab_size, vb.pp("embed_out"))?;
        let rotary = Rotary::new(&cfg, &device)?;
        Ok(Self {
            cfg,
            embed,
            layers,
            final_ln,
            lm_head,
            rotary,
            device,
        })
    }

    /// Loads `config.json` and the weights from a checkpoint directory.
    pub fn load(dir: &Path) -> Result<Self, NeoxError> {
        let cfg_path = dir.join("config.json");
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| NeoxError::Config {
            path: cfg_path.clone(),
            msg: e.to_string(),
        })?;
        let cfg = NeoxConfig::from_json(&text, &cfg_path)?;
        let device = Device::Cpu;
        let vb = match weight_files(dir)? {
            Weights::Safetensors(files) => unsafe {
                VarBuilder::from_mmaped_safetensors(&files, DType::F32, &device)?
            },
            Weights::Pickle(file) => VarBuilder::from_pth(file, DType::F32, &device)?,
        };
        Self::new(cfg, vb)
    }

    pub fn config(&self) -> &NeoxConfig {
        &self.cfg
    }

    /// Logits at the last position of each sequence. All sequences must
    /// have the same non-zero length.
    pub fn last_logits(&self, batch: &[Vec<u32>]) -> candle_core::Result<Vec<Vec<f32>>> {
        let b = batch.len();
        let s = batch[0].len();
        let flat: Vec<u32> = batch.iter().flatten().copied().collect();
        let ids = Tensor::from_vec(flat, (b, s), &self.device)?;
        let mask: Vec<f32> = (0..s)
            .flat_map(|i| (0..s).map(move |j| if j > i { f32::NEG_INFINITY } else { 0.0 }))
            .collect();
        let mask = Tensor::from_vec(mask, (s, s), &self.device)?;
        let mut x = self.embed.forward(&ids)?;
        for layer in &self.layers {
            x = layer.forward(&x, &self.rotary, &mask)?;
        }
        let last = x.narrow(1, s - 1, 1)?.squeeze(1)?;
        let logits = self.lm_head.forward(&self.final_ln.forward(&last)?)?;
        logits.to_vec2()
    }
}

enum Weights {
    Safetensors(Vec<PathBuf>),
    Pickle(PathBuf),
}

fn weight_files(dir: &Path) -> Result<Weights, NeoxError> {
    let single = dir.join("model.safetensors");
    if single.is_file() {
        return Ok(Weights::Safetensors(vec![single]));
    }
    let index = dir.join("model.safetensors.index.json");
    if index.is_file() {
        let text = std::fs::read_to_string(&index).map_err(|e| NeoxError::Config {
            path: index.clone(),
            msg: e.to_string(),
        })?;
        let v: Value = serde_json::from_str(&text).map_err(|e| NeoxError::Config {
            path: index.clone(),
            msg: e.to_string(),
        })?;
        let mut files: Vec<String> = v
            .get("weight_map")
            .and_then(Value::as_object)
            .map(|m| m.values().filter_map(Value::as_str).map(String::from).collect())
            .unwrap_or_default();
        files.sort();
        files.dedup();
        return Ok(Weights::Safetensors(files.into_iter().map(|f| dir.join(f)).collect()));
    }
    let pickle = dir.join("pytorch_model.bin");
    if pickle.is_file() {
        return Ok(Weights::Pickle(pickle));
    }
    Err(NeoxError::NoWeights(dir.to_path_buf()))
}

/// Log-softmax in double precision.
fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let sum: f64 = logits.iter().map(|&x| (x as f64 - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter().map(|&x| x as f64 - lse).collect()
}

/// [`NeoxModel`] plus its tokenizer.
pub struct NeoxLm {
    model: NeoxModel,
    tokenizer: tokenizers::Tokenizer,
}

impl NeoxLm {
    /// Loads a checkpoint directory. The tokenizer comes from
    /// `tokenizer_dir`, or from `dir` when that is `None`.
    pub fn load(dir: &Path, tokenizer_dir: Option<&Path>) -> Result<Self, NeoxError> {
        let model = NeoxModel::load(dir)?;
        let tok_path = tokenizer_dir.unwrap_or(dir).join("tokenizer.json");
        let tokenizer = tokenizers::Tokenizer::from_file(&tok_path).map_err(|e| NeoxError::Tokenizer {
            path: tok_path.clone(),
            msg: e.to_string(),
        })?;
        Ok(Self { model, tokenizer })
    }

    pub fn model(&self) -> &NeoxModel {
        &self.model
    }

    fn forward(&self, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>, LmError> {
        let batch: Vec<Vec<u32>> = prefixes.iter().map(|p| p.iter().map(|t| t.0).collect()).collect();
        let logits = self
            .model
            .last_logits(&batch)
            .map_err(|e| LmError::Backend(e.to_string()))?;
        Ok(logits.iter().map(|l| log_softmax(l)).collect())
    }

    fn check(&self, prefix: &[TokenId], k: usize) -> Result<(), LmError> {
        check_query(prefix.len(), k, self.context_limit())?;
        if prefix.is_empty() {
            return Err(LmError::EmptyPrefix);
        }
        if let Some(t) = prefix.iter().find(|t| t.index() >= self.vocab_size()) {
            return Err(LmError::UnknownToken(t.0));
        }
        Ok(())
    }
}

impl LanguageModel for NeoxLm {
    fn vocab_size(&self) -> usize {
        self.model.cfg.vocab_size
    }

    fn context_limit(&self) -> usize {
        self.model.cfg.max_position_embeddings
    }

    fn surface(&self, id: TokenId) -> Result<String, LmError> {
        self.detokenize(&[id])
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, LmError> {
        if text.is_empty() {
            return Err(LmError::EmptyText);
        }
        let enc = self
            .tokenizer
            .encode(text, false)
            .map_err(|e| LmError::Backend(e.to_string()))?;
        Ok(enc.get_ids().iter().map(|&i| TokenId(i)).collect())
    }

    fn detokenize(&self, ids: &[TokenId]) -> Result<String, LmError> {
        if let Some(t) = ids.iter().find(|t| t.index() >= self.vocab_size()) {
            return Err(LmError::UnknownToken(t.0));
        }
        let raw: Vec<u32> = ids.iter().map(|t| t.0).collect();
        self.tokenizer
            .decode(&raw, false)
            .map_err(|e| LmError::Backend(e.to_string()))
    }

    fn next_token_logprobs(&self, prefix: &[TokenId], k: usize) -> Result<NextTokenDistribution, LmError> {
        self.check(prefix, k)?;
        let lp = self.forward(&[prefix])?.pop().expect("one row");
        Ok(NextTokenDistribution::from_logprobs(prefix.len(), &lp, k))
    }

    fn next_token_logprobs_batch(
        &self,
        prefixes: &[Vec<TokenId>],
        k: usize,
    ) -> Result<Vec<NextTokenDistribution>, LmError> {
        for p in prefixes {
            self.check(p, k)?;
        }
        let mut out: Vec<Option<NextTokenDistribution>> = vec![None; prefixes.len()];
        let mut order: Vec<usize> = (0..prefixes.len()).collect();
        order.sort_by_key(|&i| prefixes[i].len());
        for group in order.chunk_by(|&a, &b| prefixes[a].len() == prefixes[b].len()) {
            for chunk in group.chunks(MAX_BATCH) {
                let batch: Vec<&[TokenId]> = chunk.iter().map(|&i| prefixes[i].as_slice()).collect();
                for (&i, lp) in chunk.iter().zip(self.forward(&batch)?) {
                    out[i] = Some(NextTokenDistribution::from_logprobs(prefixes[i].len(), &lp, k));
                }
            }
        }
        Ok(out.into_iter().map(|d| d.expect("every prefix scored")).collect())
    }
}
