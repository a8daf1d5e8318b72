//! The donor: a plain causal byte-level LM whose trained weights seed (and
//! stay frozen inside) the routed model.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{gather_rows, layer_norm_rows, nll_shifted, Tensor};

use super::{
    attention_single_forward, ffn_single_forward, ExpertParams, LayerNormParams, ModelConfig,
    LN_EPS,
};

#[derive(Debug, Clone)]
pub struct TextLmLayer {
    pub expert: ExpertParams,
    pub ln_attn: LayerNormParams,
    pub ln_ffn: LayerNormParams,
}

/// Plain causal decoder over byte ids plus the six specials (vocab 262).
#[derive(Debug, Clone)]
pub struct TextLm {
    pub cfg: ModelConfig,
    pub vocab_size: usize,
    pub embed: Tensor,
    pub pos: Tensor,
    pub layers: Vec<TextLmLayer>,
    pub ln_final: LayerNormParams,
    pub head: Tensor,
}

impl TextLm {
    /// Fresh random initialization; every tensor is trainable.
    pub fn new(cfg: ModelConfig, vocab_size: usize, seed: u64) -> Result<TextLm> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut r = rng::seeded(seed);
        let mat = |rows: usize, cols: usize, r: &mut rand_chacha::ChaCha8Rng| -> Result<Tensor> {
            Tensor::param(
                &[rows, cols],
                (0..rows * cols).map(|_| rng::normal(r, 0.0, 0.02)).collect(),
            )
        };
        let embed = mat(vocab_size, d, &mut r)?;
        let pos = mat(cfg.context, d, &mut r)?;
        let layers = (0..cfg.n_layers)
            .map(|_| TextLmLayer {
                expert: ExpertParams::init(d, &mut r),
                ln_attn: LayerNormParams::init(d, true),
                ln_ffn: LayerNormParams::init(d, true),
            })
            .collect();
        let ln_final = LayerNormParams::init(d, true);
        let head = mat(d, vocab_size, &mut r)?;
        Ok(TextLm {
            cfg,
            vocab_size,
            embed,
            pos,
            layers,
            ln_final,
            head,
        })
    }

    /// Logits `T×vocab` for a window of ids.
    pub fn forward_ids(&self, ids: &[u32]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::Dimension("empty window".into()));
        }
        if ids.len() > self.cfg.context {
            return Err(Error::ContextLength(format!(
                "window of {} tokens exceeds context {}",
                ids.len(),
                self.cfg.context
            )));
        }
        let rows: Vec<usize> = ids
            .iter()
            .map(|&id| {
                let i = id as usize;
                if i >= self.vocab_size {
                    Err(Error::Range(format!(
                        "id {i} outside donor vocabulary 0..{}",
                        self.vocab_size
                    )))
                } else {
                    Ok(i)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let mut h = gather_rows(&self.embed, &rows)?.add(&gather_rows(&self.pos, &positions)?)?;
        for layer in &self.layers {
            h = attention_single_forward(&h, &layer.expert, &layer.ln_attn, self.cfg.n_heads)?;
            h = ffn_single_forward(&h, &layer.expert, &layer.ln_ffn)?;
        }
        let h = layer_norm_rows(&h, &self.ln_final.gamma, &self.ln_final.beta, LN_EPS)?;
        h.matmul(&self.head)
    }

    /// Per-target next-byte negative log-likelihoods for one window.
    pub fn nll_window(&self, bytes: &[u8]) -> Result<Vec<f32>> {
        if bytes.len() < 2 {
            return Err(Error::Data("window needs at least 2 bytes".into()));
        }
        let ids: Vec<u32> = bytes.iter().map(|&b| u32::from(b)).collect();
        let logits = self.forward_ids(&ids)?;
        nll_shifted(&logits, &ids)
    }

    pub fn trainable(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("embed".to_string(), self.embed.clone()),
            ("pos".to_string(), self.pos.clone()),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.expert.tensors() {
                out.push((format!("layer{i}.{name}"), t.clone()));
            }
            out.push((format!("layer{i}.ln_attn.gamma"), layer.ln_attn.gamma.clone()));
            out.push((format!("layer{i}.ln_attn.beta"), layer.ln_attn.beta.clone()));
            out.push((format!("layer{i}.ln_ffn.gamma"), layer.ln_ffn.gamma.clone()));
            out.push((format!("layer{i}.ln_ffn.beta"), layer.ln_ffn.beta.clone()));
        }
        out.push(("ln_final.gamma".to_string(), self.ln_final.gamma.clone()));
        out.push(("ln_final.beta".to_string(), self.ln_final.beta.clone()));
        out.push(("head".to_string(), self.head.clone()));
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.trainable()
    }
}

/// Mean per-byte negative log-likelihood over a corpus, chunked into
/// non-overlapping context-length windows (a trailing window shorter than
/// two bytes is dropped). Returns the mean and the number of scored targets.
pub fn per_byte_nll(
    bytes: &[u8],
    context: usize,
    mut nll_of_window: impl FnMut(&[u8]) -> Result<Vec<f32>>,
) -> Result<(f64, usize)> {
    if bytes.len() < 2 {
        return Err(Error::Data("corpus shorter than two bytes".into()));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    let mut start = 0usize;
    while start + 1 < bytes.len() {
        let end = (start + context).min(bytes.len());
        let window = &bytes[start..end];
        if window.len() >= 2 {
            for v in nll_of_window(window)? {
                total += v as f64;
                count += 1;
            }
        }
        start = end;
    }
    Ok((total / count as f64, count))
}
