//! The modality-routed transformer.
//!
//! Each of the `L` layers routes every position to one of two experts — a
//! frozen text expert inherited from a pretrained causal text LM, and a
//! trainable vision expert initialized as its copy — around *shared* causal
//! multi-head attention and *shared, frozen* layer norms. Dual output heads
//! (frozen text head, trainable vision head) produce logits that are
//! concatenated along the vocabulary axis in id order.
//!
//! Pure-text sequences therefore touch only frozen parameters, which keeps
//! the donor LM's text behavior bit-for-bit intact no matter how long the
//! vision side trains.

mod text_lm;

pub use text_lm::{per_byte_nll, TextLm, TextLmLayer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{
    concat_cols, gather_rows, interleave_rows, layer_norm_rows, softmax_rows, Tensor,
};
use crate::tokenize::{Modality, MultimodalVocab, TokenSequence, VisualCodebook, VocabLayout};

/// Layer-norm epsilon, fixed crate-wide.
pub const LN_EPS: f32 = 1e-5;

/// Transformer geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub context: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.context == 0 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Desk-scale default: trainable in minutes, gradient-checkable.
    pub fn desk() -> ModelConfig {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            context: 160,
        }
    }
}

/// One expert: Q/K/V and output projections plus a two-matrix feed-forward
/// (hidden width `4d`) with a smooth self-gated nonlinearity.
#[derive(Debug, Clone)]
pub struct ExpertParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_in: Tensor,
    pub ffn_out: Tensor,
}

impl ExpertParams {
    pub fn init(d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> ExpertParams {
        let mat = |rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let data = (0..rows * cols).map(|_| rng::normal(rng, 0.0, 0.02)).collect();
            Tensor::param(&[rows, cols], data).expect("static shape")
        };
        ExpertParams {
            wq: mat(d, d, rng),
            wk: mat(d, d, rng),
            wv: mat(d, d, rng),
            wo: mat(d, d, rng),
            ffn_in: mat(d, 4 * d, rng),
            ffn_out: mat(4 * d, d, rng),
        }
    }

    /// Copy with the given trainability; values are cloned bitwise.
    pub fn copy_with_grad(&self, trainable: bool) -> ExpertParams {
        let dup = |t: &Tensor| {
            if trainable {
                Tensor::param(t.shape(), t.to_vec()).expect("same shape")
            } else {
                Tensor::new(t.shape(), t.to_vec()).expect("same shape")
            }
        };
        ExpertParams {
            wq: dup(&self.wq),
            wk: dup(&self.wk),
            wv: dup(&self.wv),
            wo: dup(&self.wo),
            ffn_in: dup(&self.ffn_in),
            ffn_out: dup(&self.ffn_out),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ffn_in", &self.ffn_in),
            ("ffn_out", &self.ffn_out),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn init(d: usize, trainable: bool) -> LayerNormParams {
        let gamma = vec![1.0f32; d];
        let beta = vec![0.0f32; d];
        if trainable {
            LayerNormParams {
                gamma: Tensor::param(&[d], gamma).expect("static shape"),
                beta: Tensor::param(&[d], beta).expect("static shape"),
            }
        } else {
            LayerNormParams {
                gamma: Tensor::new(&[d], gamma).expect("static shape"),
                beta: Tensor::new(&[d], beta).expect("static shape"),
            }
        }
    }

    pub fn copy_with_grad(&self, trainable: bool) -> LayerNormParams {
        let dup = |t: &Tensor| {
            if trainable {
                Tensor::param(t.shape(), t.to_vec()).expect("same shape")
            } else {
                Tensor::new(t.shape(), t.to_vec()).expect("same shape")
            }
        };
        LayerNormParams {
            gamma: dup(&self.gamma),
            beta: dup(&self.beta),
        }
    }
}

/// One routed layer: frozen text expert, trainable vision expert (identical
/// shapes), and the two shared frozen layer norms.
#[derive(Debug, Clone)]
pub struct SemVieLayerParams {
    pub text: ExpertParams,
    pub vision: ExpertParams,
    pub ln_attn: LayerNormParams,
    pub ln_ffn: LayerNormParams,
}

/// Stable partition of positions by modality. Row `r` of the text subset
/// came from position `text_pos[r]`, likewise for vision; scattering both
/// subsets back through these placements restores the original order exactly.
#[derive(Debug, Clone)]
pub struct RoutePlan {
    pub text_pos: Vec<usize>,
    pub vision_pos: Vec<usize>,
}

impl RoutePlan {
    pub fn from_modality(modality: &[Modality]) -> RoutePlan {
        let mut text_pos = Vec::new();
        let mut vision_pos = Vec::new();
        for (i, m) in modality.iter().enumerate() {
            match m {
                Modality::Text => text_pos.push(i),
                Modality::Vision => vision_pos.push(i),
            }
        }
        RoutePlan {
            text_pos,
            vision_pos,
        }
    }

    pub fn len(&self) -> usize {
        self.text_pos.len() + self.vision_pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inverse of the partition: scatter per-expert outputs back to original
    /// position order.
    pub fn scatter(&self, text_out: Option<Tensor>, vision_out: Option<Tensor>) -> Result<Tensor> {
        match (text_out, vision_out) {
            (Some(t), Some(v)) => interleave_rows(
                &[t, v],
                &[self.text_pos.clone(), self.vision_pos.clone()],
            ),
            (Some(t), None) => interleave_rows(&[t], &[self.text_pos.clone()]),
            (None, Some(v)) => interleave_rows(&[v], &[self.vision_pos.clone()]),
            (None, None) => Err(Error::Dimension("scatter of zero subsets".into())),
        }
    }
}

/// Partition hidden states by modality, preserving order within each subset.
/// Returns the subsets (absent when a modality has no positions) and the
/// plan whose `scatter` restores original order.
pub fn route_tokens(
    hidden: &Tensor,
    modality: &[Modality],
) -> Result<(Option<Tensor>, Option<Tensor>, RoutePlan)> {
    if hidden.rows() != modality.len() {
        return Err(Error::Dimension(format!(
            "{} hidden rows vs {} modality tags",
            hidden.rows(),
            modality.len()
        )));
    }
    let plan = RoutePlan::from_modality(modality);
    let text = if plan.text_pos.is_empty() {
        None
    } else {
        Some(gather_rows(hidden, &plan.text_pos)?)
    };
    let vision = if plan.vision_pos.is_empty() {
        None
    } else {
        Some(gather_rows(hidden, &plan.vision_pos)?)
    };
    Ok((text, vision, plan))
}

fn expert_qkv(x: &Tensor, e: &ExpertParams) -> Result<(Tensor, Tensor, Tensor)> {
    Ok((x.matmul(&e.wq)?, x.matmul(&e.wk)?, x.matmul(&e.wv)?))
}

fn expert_ffn(x: &Tensor, e: &ExpertParams) -> Result<Tensor> {
    x.matmul(&e.ffn_in)?.silu().matmul(&e.ffn_out)
}

/// Shared multi-head causal attention: scale `1/sqrt(d/h)`, row `i` sees
/// positions `0..=i`.
pub fn causal_attention(q: &Tensor, k: &Tensor, v: &Tensor, n_heads: usize) -> Result<Tensor> {
    let d = q.cols();
    if d % n_heads != 0 {
        return Err(Error::Config(format!(
            "width {d} not divisible by {n_heads} heads"
        )));
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let vh = v.slice_cols(h * dh, dh)?;
        let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
        let probs = softmax_rows(&scores, 1.0, true)?;
        heads.push(probs.matmul(&vh)?);
    }
    concat_cols(&heads)
}

/// Plain (single-expert) pre-norm attention block, used by the donor LM and
/// by single-modality sequences, where routing is the identity.
pub fn attention_single_forward(
    r: &Tensor,
    e: &ExpertParams,
    ln: &LayerNormParams,
    n_heads: usize,
) -> Result<Tensor> {
    let x = layer_norm_rows(r, &ln.gamma, &ln.beta, LN_EPS)?;
    let (q, k, v) = expert_qkv(&x, e)?;
    let attn = causal_attention(&q, &k, &v, n_heads)?;
    r.add(&attn.matmul(&e.wo)?)
}

/// Plain (single-expert) pre-norm feed-forward block.
pub fn ffn_single_forward(r: &Tensor, e: &ExpertParams, ln: &LayerNormParams) -> Result<Tensor> {
    let x = layer_norm_rows(r, &ln.gamma, &ln.beta, LN_EPS)?;
    r.add(&expert_ffn(&x, e)?)
}

fn attention_moe_with_plan(
    r: &Tensor,
    plan: &RoutePlan,
    layer: &SemVieLayerParams,
    n_heads: usize,
) -> Result<Tensor> {
    if plan.vision_pos.is_empty() {
        return attention_single_forward(r, &layer.text, &layer.ln_attn, n_heads);
    }
    if plan.text_pos.is_empty() {
        return attention_single_forward(r, &layer.vision, &layer.ln_attn, n_heads);
    }
    let x = layer_norm_rows(r, &layer.ln_attn.gamma, &layer.ln_attn.beta, LN_EPS)?;
    let xt = gather_rows(&x, &plan.text_pos)?;
    let xv = gather_rows(&x, &plan.vision_pos)?;
    let (qt, kt, vt) = expert_qkv(&xt, &layer.text)?;
    let (qv, kv, vv) = expert_qkv(&xv, &layer.vision)?;
    // Projections return to original position order before the shared
    // attention, so causality is over the real sequence.
    let q = plan.scatter(Some(qt), Some(qv))?;
    let k = plan.scatter(Some(kt), Some(kv))?;
    let v = plan.scatter(Some(vt), Some(vv))?;
    let attn = causal_attention(&q, &k, &v, n_heads)?;
    let at = gather_rows(&attn, &plan.text_pos)?;
    let av = gather_rows(&attn, &plan.vision_pos)?;
    let out = plan.scatter(
        Some(at.matmul(&layer.text.wo)?),
        Some(av.matmul(&layer.vision.wo)?),
    )?;
    r.add(&out)
}

fn ffn_moe_with_plan(
    r: &Tensor,
    plan: &RoutePlan,
    layer: &SemVieLayerParams,
) -> Result<Tensor> {
    if plan.vision_pos.is_empty() {
        return ffn_single_forward(r, &layer.text, &layer.ln_ffn);
    }
    if plan.text_pos.is_empty() {
        return ffn_single_forward(r, &layer.vision, &layer.ln_ffn);
    }
    let x = layer_norm_rows(r, &layer.ln_ffn.gamma, &layer.ln_ffn.beta, LN_EPS)?;
    let xt = gather_rows(&x, &plan.text_pos)?;
    let xv = gather_rows(&x, &plan.vision_pos)?;
    let out = plan.scatter(
        Some(expert_ffn(&xt, &layer.text)?),
        Some(expert_ffn(&xv, &layer.vision)?),
    )?;
    r.add(&out)
}

/// Routed attention sub-block: layer-norm the concatenated stream, route,
/// project each subset through its expert's Q/K/V, scatter back, run shared
/// causal attention, apply per-modality output projections, add the residual.
pub fn attention_moe_forward(
    r: &Tensor,
    modality: &[Modality],
    layer: &SemVieLayerParams,
    n_heads: usize,
) -> Result<Tensor> {
    if r.rows() != modality.len() {
        return Err(Error::Dimension(format!(
            "{} hidden rows vs {} modality tags",
            r.rows(),
            modality.len()
        )));
    }
    attention_moe_with_plan(r, &RoutePlan::from_modality(modality), layer, n_heads)
}

/// Routed feed-forward sub-block: layer-norm, route, per-expert FFN, scatter
/// back, add the residual.
pub fn ffn_moe_forward(
    r: &Tensor,
    modality: &[Modality],
    layer: &SemVieLayerParams,
) -> Result<Tensor> {
    if r.rows() != modality.len() {
        return Err(Error::Dimension(format!(
            "{} hidden rows vs {} modality tags",
            r.rows(),
            modality.len()
        )));
    }
    ffn_moe_with_plan(r, &RoutePlan::from_modality(modality), layer)
}

/// The full model: vocabulary layout, visual codebook, routed layers, dual
/// heads, and (for the super-resolution variant) K parallel block heads.
#[derive(Debug, Clone)]
pub struct SemVieModel {
    pub cfg: ModelConfig,
    pub layout: VocabLayout,
    pub codebook: VisualCodebook,
    pub embed_text: Tensor,
    pub embed_visual: Tensor,
    pub pos: Tensor,
    pub layers: Vec<SemVieLayerParams>,
    pub ln_final: LayerNormParams,
    pub head_text: Tensor,
    pub head_vision: Tensor,
    pub block_heads: Vec<Tensor>,
    pub provenance: Vec<String>,
}

/// Wrap a trained donor LM: the text expert, shared norms, positional and
/// text embeddings, and text head are copied and frozen; the vision expert
/// starts as an exact but trainable copy of the text expert; the vision head
/// is freshly seeded; visual embedding rows start at the mean text embedding.
pub fn init_from_text_lm(
    donor: &TextLm,
    cb: &VisualCodebook,
    seed: u64,
) -> Result<SemVieModel> {
    let cfg = donor.cfg;
    cfg.validate()?;
    let d = cfg.d_model;
    if donor.vocab_size != 256 + 6 {
        return Err(Error::Config(format!(
            "donor vocabulary {} does not match byte tokenizer + 6 specials",
            donor.vocab_size
        )));
    }
    let vocab = crate::tokenize::build_multimodal_vocab(
        256,
        &crate::tokenize::Special::default_names(),
        cb,
        d,
        &donor.embed.to_vec()[..256 * d],
    )?;
    init_with_vocab(donor, cb, &vocab, seed)
}

/// As [`init_from_text_lm`] but with a prebuilt vocabulary, so callers can
/// inspect or test the vocabulary table independently. The vocabulary's text
/// rows must be the donor's.
pub fn init_with_vocab(
    donor: &TextLm,
    cb: &VisualCodebook,
    vocab: &MultimodalVocab,
    seed: u64,
) -> Result<SemVieModel> {
    let cfg = donor.cfg;
    let d = cfg.d_model;
    if vocab.d != d {
        return Err(Error::Config(format!(
            "vocabulary width {} does not match model width {d}",
            vocab.d
        )));
    }
    if donor.vocab_size != vocab.layout.text_plus_special() {
        return Err(Error::Config(format!(
            "donor vocabulary {} vs text+special range {}",
            donor.vocab_size,
            vocab.layout.text_plus_special()
        )));
    }
    if cb.count() != vocab.layout.visual_size {
        return Err(Error::Config(format!(
            "codebook of {} entries vs visual range {}",
            cb.count(),
            vocab.layout.visual_size
        )));
    }
    let tps = vocab.layout.text_plus_special();
    let embed_text = Tensor::new(&[tps, d], vocab.embedding[..tps * d].to_vec())?;
    let embed_visual = Tensor::param(&[cb.count(), d], vocab.embedding[tps * d..].to_vec())?;
    let pos = Tensor::new(donor.pos.shape(), donor.pos.to_vec())?;
    let layers = donor
        .layers
        .iter()
        .map(|l| SemVieLayerParams {
            text: l.expert.copy_with_grad(false),
            vision: l.expert.copy_with_grad(true),
            ln_attn: l.ln_attn.copy_with_grad(false),
            ln_ffn: l.ln_ffn.copy_with_grad(false),
        })
        .collect();
    let ln_final = donor.ln_final.copy_with_grad(false);
    let head_text = Tensor::new(donor.head.shape(), donor.head.to_vec())?;
    let mut r = rng::seeded(seed);
    let head_vision = Tensor::param(
        &[d, cb.count()],
        (0..d * cb.count()).map(|_| rng::normal(&mut r, 0.0, 0.02)).collect(),
    )?;
    Ok(SemVieModel {
        cfg,
        layout: vocab.layout.clone(),
        codebook: cb.clone(),
        embed_text,
        embed_visual,
        pos,
        layers,
        ln_final,
        head_text,
        head_vision,
        block_heads: Vec::new(),
        provenance: vec!["init".to_string()],
    })
}

impl SemVieModel {
    /// Attach `k` parallel block heads for next-K-token prediction, each
    /// starting as a copy of the trained vision head so that `k = 1`
    /// collapses to the ordinary head.
    pub fn attach_block_heads(&mut self, k: usize) -> Result<()> {
        if k < 1 {
            return Err(Error::Config("block head count must be ≥ 1".into()));
        }
        self.block_heads = (0..k)
            .map(|_| Tensor::param(self.head_vision.shape(), self.head_vision.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    }

    /// Embed ids (text rows frozen, visual rows trainable) plus positions.
    fn embed(&self, seq: &TokenSequence) -> Result<Tensor> {
        let plan = RoutePlan::from_modality(&seq.modality);
        let text_ids: Vec<usize> = plan.text_pos.iter().map(|&i| seq.ids[i] as usize).collect();
        let visual_rows: Vec<usize> = plan
            .vision_pos
            .iter()
            .map(|&i| (seq.ids[i] - self.layout.visual_start()) as usize)
            .collect();
        let tok = if visual_rows.is_empty() {
            gather_rows(&self.embed_text, &text_ids)?
        } else if text_ids.is_empty() {
            gather_rows(&self.embed_visual, &visual_rows)?
        } else {
            plan.scatter(
                Some(gather_rows(&self.embed_text, &text_ids)?),
                Some(gather_rows(&self.embed_visual, &visual_rows)?),
            )?
        };
        let positions: Vec<usize> = (0..seq.len()).collect();
        tok.add(&gather_rows(&self.pos, &positions)?)
    }

    /// Final-layer-norm hidden states, `T×d`.
    pub fn forward_hidden(&self, seq: &TokenSequence) -> Result<Tensor> {
        if seq.is_empty() {
            return Err(Error::Dimension("empty sequence".into()));
        }
        if seq.len() > self.cfg.context {
            return Err(Error::ContextLength(format!(
                "sequence of {} tokens exceeds context {}",
                seq.len(),
                self.cfg.context
            )));
        }
        let plan = RoutePlan::from_modality(&seq.modality);
        let mut h = self.embed(seq)?;
        for layer in &self.layers {
            h = attention_moe_with_plan(&h, &plan, layer, self.cfg.n_heads)?;
            h = ffn_moe_with_plan(&h, &plan, layer)?;
        }
        layer_norm_rows(&h, &self.ln_final.gamma, &self.ln_final.beta, LN_EPS)
    }

    /// Logits over the whole vocabulary for every position: both heads are
    /// applied everywhere and concatenated `[text+special | visual]` in id
    /// order. Softmax is the consumer's job.
    pub fn forward(&self, seq: &TokenSequence) -> Result<Tensor> {
        let h = self.forward_hidden(seq)?;
        let lt = h.matmul(&self.head_text)?;
        let lv = h.matmul(&self.head_vision)?;
        concat_cols(&[lt, lv])
    }

    /// Per-target negative log-likelihoods of a pure-text byte window under
    /// the text head alone. On an all-text sequence every touched parameter
    /// is frozen and the computation is the donor LM's, bit for bit.
    pub fn pure_text_nll(&self, bytes: &[u8]) -> Result<Vec<f32>> {
        if bytes.len() < 2 {
            return Err(Error::Data("window needs at least 2 bytes".into()));
        }
        let ids: Vec<u32> = bytes.iter().map(|&b| u32::from(b)).collect();
        let seq = TokenSequence::fully_supervised(ids.clone(), &self.layout)?;
        let h = self.forward_hidden(&seq)?;
        let logits = h.matmul(&self.head_text)?;
        crate::tensor::nll_shifted(&logits, &ids)
    }

    /// Trainable tensors in canonical checkpoint order.
    pub fn trainable(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("embed.visual".to_string(), self.embed_visual.clone())];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.vision.tensors() {
                out.push((format!("layer{i}.vision.{name}"), t.clone()));
            }
        }
        out.push(("head.vision".to_string(), self.head_vision.clone()));
        for (k, t) in self.block_heads.iter().enumerate() {
            out.push((format!("block_head{k}"), t.clone()));
        }
        out
    }

    /// Frozen tensors in canonical checkpoint order.
    pub fn frozen(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("embed.text".to_string(), self.embed_text.clone()),
            ("pos".to_string(), self.pos.clone()),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.text.tensors() {
                out.push((format!("layer{i}.text.{name}"), t.clone()));
            }
            out.push((format!("layer{i}.ln_attn.gamma"), layer.ln_attn.gamma.clone()));
            out.push((format!("layer{i}.ln_attn.beta"), layer.ln_attn.beta.clone()));
            out.push((format!("layer{i}.ln_ffn.gamma"), layer.ln_ffn.gamma.clone()));
            out.push((format!("layer{i}.ln_ffn.beta"), layer.ln_ffn.beta.clone()));
        }
        out.push(("ln_final.gamma".to_string(), self.ln_final.gamma.clone()));
        out.push(("ln_final.beta".to_string(), self.ln_final.beta.clone()));
        out.push(("head.text".to_string(), self.head_text.clone()));
        out
    }

    /// All named tensors (frozen, trainable, codebook) in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = self.frozen();
        out.extend(self.trainable());
        let cb = Tensor::new(
            &[self.codebook.count(), self.codebook.dim()],
            self.codebook.as_flat().to_vec(),
        )
        .expect("codebook shape is consistent");
        out.push(("codebook".to_string(), cb));
        out
    }

    /// SHA-256 over the frozen parameter set in canonical order.
    pub fn frozen_hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, t) in self.frozen() {
            hasher.update(name.as_bytes());
            for v in t.data().iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }
}
