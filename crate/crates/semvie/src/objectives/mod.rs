//! Training losses and decoding loops.
//!
//! Next-token prediction sums the cross-entropy of each supervised target
//! under the full-vocabulary softmax. Next-K-token prediction factorizes each
//! K-token block conditionally independently given the prefix: K parallel
//! vision heads read the hidden state of the block's anchor position (the
//! last position before the block), each paired with the frozen text head so
//! every per-head distribution still spans the whole vocabulary.

mod sequences;

pub use sequences::{
    build_caption_sequence, build_sr_sequence, build_t2i_sequence, caption_prefix,
    resolution_tag_ids, sr_prefix, t2i_prefix, SupervisionMode,
};

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::SemVieModel;
use crate::rng;
use crate::tensor::{concat_cols, cross_entropy_rows, gather_rows, no_grad, Tensor};
use crate::tokenize::{
    dequantize_tokens, quantize_image, Image, Modality, Special, TokenGrid, TokenSequence,
};

/// Sampling controls. `temperature = 0` means greedy (argmax) decoding.
#[derive(Debug, Clone, Copy)]
pub struct DecodeParams {
    pub temperature: f32,
    pub top_k: Option<usize>,
    pub seed: u64,
    pub max_text_len: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            temperature: 1.0,
            top_k: None,
            seed: 0,
            max_text_len: 64,
        }
    }
}

impl DecodeParams {
    pub fn greedy() -> DecodeParams {
        DecodeParams {
            temperature: 0.0,
            ..DecodeParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature < 0.0 || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be ≥ 0, got {}",
                self.temperature
            )));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be ≥ 1 when present".into()));
        }
        Ok(())
    }
}

/// A scalar training loss with its target count; exposes both the summed and
/// the per-token value.
#[derive(Debug, Clone)]
pub struct Loss {
    pub tensor: Tensor,
    pub count: usize,
}

impl Loss {
    pub fn total(&self) -> f32 {
        self.tensor.item()
    }

    pub fn per_token(&self) -> f32 {
        self.tensor.item() / self.count as f32
    }

    /// The summed loss scaled to a per-token mean, for backprop.
    pub fn mean_tensor(&self) -> Tensor {
        self.tensor.scale(1.0 / self.count as f32)
    }
}

/// Next-token prediction: `−Σ_t log P(z_{t+1} | z_{≤t})` over positions whose
/// loss mask is set on the *target* token.
pub fn ntp_loss(model: &SemVieModel, seq: &TokenSequence) -> Result<Loss> {
    if seq.len() < 2 {
        return Err(Error::Dimension(format!(
            "next-token loss needs at least 2 tokens, got {}",
            seq.len()
        )));
    }
    let logits = model.forward(seq)?;
    let t = seq.len();
    let rows: Vec<usize> = (0..t - 1).collect();
    let shifted = gather_rows(&logits, &rows)?;
    let targets: Vec<u32> = seq.ids[1..].to_vec();
    let mask: Vec<bool> = seq.loss_mask[1..].to_vec();
    if !mask.iter().any(|&b| b) {
        return Err(Error::EmptyLoss("every target position is masked".into()));
    }
    let tensor = cross_entropy_rows(&shifted, &targets, &mask)?;
    let count = mask.iter().filter(|&&b| b).count();
    Ok(Loss { tensor, count })
}

/// The contiguous run of supervised target positions, for block losses.
fn supervised_span(seq: &TokenSequence) -> Result<(usize, usize)> {
    let marked: Vec<usize> = (0..seq.len()).filter(|&i| seq.loss_mask[i]).collect();
    if marked.is_empty() {
        return Err(Error::EmptyLoss("no supervised positions".into()));
    }
    let start = marked[0];
    let len = marked.len();
    if marked != (start..start + len).collect::<Vec<_>>() {
        return Err(Error::BlockGeometry(
            "supervised positions are not contiguous".into(),
        ));
    }
    if start == 0 {
        return Err(Error::BlockGeometry(
            "supervised span cannot start at position 0".into(),
        ));
    }
    Ok((start, len))
}

/// Next-K-token prediction over the supervised span, teacher-forced: block
/// `b` covers targets `span_start + bK ..`, all predicted from the hidden
/// state at anchor `span_start − 1 + bK`. Head `j` pairs the frozen text head
/// with block head `j`; with `k = 1` the ordinary vision head is used and the
/// loss equals [`ntp_loss`] bit for bit.
pub fn nktp_loss(model: &SemVieModel, seq: &TokenSequence, k: usize) -> Result<Loss> {
    if k == 0 {
        return Err(Error::Config("k must be ≥ 1".into()));
    }
    if k > 1 && model.block_heads.len() != k {
        return Err(Error::Config(format!(
            "model has {} block heads, loss requested k={k}",
            model.block_heads.len()
        )));
    }
    let (start, len) = supervised_span(seq)?;
    if len % k != 0 {
        return Err(Error::BlockGeometry(format!(
            "supervised span of {len} tokens is not a multiple of k={k}"
        )));
    }
    let blocks = len / k;
    let h = model.forward_hidden(seq)?;
    let anchors: Vec<usize> = (0..blocks).map(|b| start - 1 + b * k).collect();
    let anchor_h = gather_rows(&h, &anchors)?;
    let text_logits = anchor_h.matmul(&model.head_text)?;
    let mask = vec![true; blocks];
    let mut total: Option<Tensor> = None;
    for j in 0..k {
        let head = if k == 1 {
            &model.head_vision
        } else {
            &model.block_heads[j]
        };
        let vision_logits = anchor_h.matmul(head)?;
        let logits = concat_cols(&[text_logits.clone(), vision_logits])?;
        let targets: Vec<u32> = (0..blocks).map(|b| seq.ids[start + b * k + j]).collect();
        let term = cross_entropy_rows(&logits, &targets, &mask)?;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(Loss {
        tensor: total.expect("k ≥ 1"),
        count: len,
    })
}

/// Sample one id from a logit row: restrict to a modality id range if given,
/// apply temperature (0 = argmax), keep the top-k, renormalize, draw.
pub fn sample_next_token(
    logits: &[f32],
    params: &DecodeParams,
    modality_filter: Option<std::ops::Range<u32>>,
    rng: &mut ChaCha8Rng,
) -> Result<u32> {
    params.validate()?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits in sampler".into()));
    }
    let range = match &modality_filter {
        Some(r) => (r.start as usize).min(logits.len())..(r.end as usize).min(logits.len()),
        None => 0..logits.len(),
    };
    if range.is_empty() {
        return Err(Error::Decode("empty allowed id set".into()));
    }
    let mut allowed: Vec<(usize, f32)> =
        range.clone().map(|i| (i, logits[i])).collect();

    // Greedy: highest logit, ties to the lowest id.
    let argmax = |xs: &[(usize, f32)]| -> u32 {
        let mut best = xs[0];
        for &(i, v) in &xs[1..] {
            if v > best.1 {
                best = (i, v);
            }
        }
        best.0 as u32
    };
    if params.temperature == 0.0 {
        return Ok(argmax(&allowed));
    }
    if let Some(k) = params.top_k {
        if k < allowed.len() {
            allowed.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            allowed.truncate(k);
        }
        if k == 1 {
            return Ok(allowed[0].0 as u32);
        }
    }
    let raw: Vec<f32> = allowed.iter().map(|&(_, v)| v).collect();
    let probs = crate::tensor::softmax(&raw, params.temperature)?;
    let u = rng::uniform(rng);
    let mut cum = 0.0f64;
    for (&(i, _), &p) in allowed.iter().zip(&probs) {
        cum += p as f64;
        if u < cum {
            return Ok(i as u32);
        }
    }
    Ok(allowed.last().expect("nonempty").0 as u32)
}

fn last_row_logits(model: &SemVieModel, ids: &[u32]) -> Result<Vec<f32>> {
    let seq = TokenSequence::new(ids.to_vec(), vec![false; ids.len()], &model.layout)?;
    let logits = model.forward(&seq)?;
    let v = logits.cols();
    let data = logits.data();
    Ok(data[(logits.rows() - 1) * v..].to_vec())
}

/// Text-to-image decoding: encode the resolution tag and prompt, then emit
/// exactly `(h/P)·(w/P)` vision tokens (modality filter active inside the
/// span) followed by the image-end marker, and decode the tokens to pixels.
pub fn generate_image(
    model: &SemVieModel,
    prompt: &str,
    resolution: (usize, usize),
    params: &DecodeParams,
) -> Result<(TokenSequence, Image)> {
    params.validate()?;
    let (h, w) = resolution;
    let p = model.codebook.patch_size();
    if h == 0 || w == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Geometry(format!(
            "resolution {h}×{w} not divisible by patch size {p}"
        )));
    }
    let span = (h / p) * (w / p);
    let mut ids = t2i_prefix(prompt, (h, w), &model.layout);
    if ids.len() + span + 1 > model.cfg.context {
        return Err(Error::ContextLength(format!(
            "prefix {} + {span} vision tokens + end marker exceeds context {}",
            ids.len(),
            model.cfg.context
        )));
    }
    let visual = model.layout.visual_start()..model.layout.total_size() as u32;
    let mut r = rng::seeded(params.seed);
    no_grad(|| -> Result<()> {
        for _ in 0..span {
            let row = last_row_logits(model, &ids)?;
            ids.push(sample_next_token(&row, params, Some(visual.clone()), &mut r)?);
        }
        Ok(())
    })?;
    ids.push(model.layout.special_id(Special::Eoi));
    let mask = vec![false; ids.len()];
    let seq = TokenSequence::new(ids, mask, &model.layout)?;
    let image = image_from_sequence(model, &seq, h / p, w / p)?;
    Ok((seq, image))
}

/// Image captioning: encode the image span, then sample text-range tokens
/// until the end marker or the length cap.
pub fn generate_caption(
    model: &SemVieModel,
    image: &Image,
    params: &DecodeParams,
) -> Result<String> {
    params.validate()?;
    let grid = quantize_image(image, &model.codebook)?;
    let mut ids = caption_prefix(&grid, &model.layout)?;
    if ids.len() + 1 > model.cfg.context {
        return Err(Error::ContextLength(format!(
            "image prefix of {} tokens exceeds context {}",
            ids.len(),
            model.cfg.context
        )));
    }
    let eos = model.layout.special_id(Special::Eos);
    let text_range = 0..model.layout.text_plus_special() as u32;
    let mut r = rng::seeded(params.seed);
    let mut emitted = Vec::new();
    no_grad(|| -> Result<()> {
        for _ in 0..params.max_text_len {
            if ids.len() >= model.cfg.context {
                break;
            }
            let row = last_row_logits(model, &ids)?;
            let id = sample_next_token(&row, params, Some(text_range.clone()), &mut r)?;
            ids.push(id);
            if id == eos {
                break;
            }
            emitted.push(id);
        }
        Ok(())
    })?;
    let bytes: Vec<u32> = emitted.into_iter().filter(|&id| id < 256).collect();
    Ok(crate::tokenize::decode_text_lossy(&bytes))
}

/// Super-resolution decoding: condition on the resolution tag, caption, and
/// the low-resolution token span, then emit the high-resolution span K tokens
/// per auto-regressive step through the K block heads. The target doubles
/// each grid side (desk-scale long side 64 from a 32-pixel input).
pub fn super_resolve(
    model: &SemVieModel,
    low: &TokenGrid,
    caption: &str,
    k: usize,
    params: &DecodeParams,
) -> Result<TokenGrid> {
    params.validate()?;
    if k == 0 {
        return Err(Error::Config("k must be ≥ 1".into()));
    }
    if k > 1 && model.block_heads.len() != k {
        return Err(Error::Config(format!(
            "model has {} block heads, decoding requested k={k}",
            model.block_heads.len()
        )));
    }
    let p = model.codebook.patch_size();
    let (gh, gw) = (low.grid_h * 2, low.grid_w * 2);
    let span = gh * gw;
    if span % k != 0 {
        return Err(Error::BlockGeometry(format!(
            "high-resolution span {span} is not a multiple of k={k}"
        )));
    }
    let mut ids = sr_prefix(caption, low, (gh * p, gw * p), &model.layout)?;
    if ids.len() + span + 1 > model.cfg.context {
        return Err(Error::ContextLength(format!(
            "prefix {} + {span} tokens exceeds context {}",
            ids.len(),
            model.cfg.context
        )));
    }
    let visual = model.layout.visual_start()..model.layout.total_size() as u32;
    let mut r = rng::seeded(params.seed);
    let mut high = Vec::with_capacity(span);
    no_grad(|| -> Result<()> {
        for _ in 0..span / k {
            let seq = TokenSequence::new(ids.clone(), vec![false; ids.len()], &model.layout)?;
            let hidden = model.forward_hidden(&seq)?;
            let anchor = gather_rows(&hidden, &[seq.len() - 1])?;
            let text_logits = anchor.matmul(&model.head_text)?;
            for j in 0..k {
                let head = if k == 1 {
                    &model.head_vision
                } else {
                    &model.block_heads[j]
                };
                let logits = concat_cols(&[text_logits.clone(), anchor.matmul(head)?])?;
                let row = logits.to_vec();
                let id = sample_next_token(&row, params, Some(visual.clone()), &mut r)?;
                ids.push(id);
                high.push(model.layout.codebook_index(id)?);
            }
        }
        Ok(())
    })?;
    Ok(TokenGrid {
        grid_h: gh,
        grid_w: gw,
        tokens: high,
    })
}

/// Decode the vision span of a generated sequence back to pixels.
pub fn image_from_sequence(model: &SemVieModel, seq: &TokenSequence, grid_h: usize, grid_w: usize) -> Result<Image> {
    let indices: Vec<u32> = seq
        .ids
        .iter()
        .zip(&seq.modality)
        .filter(|(_, m)| **m == Modality::Vision)
        .map(|(&id, _)| model.layout.codebook_index(id))
        .collect::<Result<Vec<_>>>()?;
    dequantize_tokens(&indices, &model.codebook, grid_h, grid_w)
}

#[cfg(test)]
mod tests;
