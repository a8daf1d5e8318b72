//! Checkpoint container.
//!
//! Layout: magic `SVCK` (4 bytes), u32 little-endian version (1), u64
//! little-endian metadata length, UTF-8 JSON metadata (config, vocabulary
//! layout, tensor directory of name → offset/shape), then raw tensor
//! payloads as little-endian 32-bit floats, row-major, in directory order.
//! Offsets are byte offsets into the payload region and must be contiguous,
//! so saving what was just loaded reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    ExpertParams, LayerNormParams, ModelConfig, SemVieLayerParams, SemVieModel, TextLm,
    TextLmLayer,
};
use crate::tensor::Tensor;
use crate::tokenize::{VisualCodebook, VocabLayout};

const MAGIC: &[u8; 4] = b"SVCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: u64,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    kind: String,
    model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<VocabLayout>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    donor_vocab_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    patch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    block_k: Option<usize>,
    provenance: Vec<String>,
    tensors: Vec<TensorEntry>,
}

fn write_container(path: &Path, mut meta: Metadata, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut payload: Vec<u8> = Vec::new();
    meta.tensors = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        meta.tensors.push(TensorEntry {
            name: name.clone(),
            offset: payload.len() as u64,
            shape: t.shape().to_vec(),
        });
        for v in t.data().iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta_bytes = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(16 + meta_bytes.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    out.extend_from_slice(&payload);
    fs::write(path, out)?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(Metadata, Vec<(String, Vec<usize>, Vec<f32>)>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(Error::Format("file shorter than the fixed header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {MAGIC:?}",
            &bytes[0..4]
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + meta_len {
        return Err(Error::Format(format!(
            "metadata of {meta_len} bytes exceeds the file"
        )));
    }
    let meta: Metadata = serde_json::from_slice(&bytes[16..16 + meta_len])
        .map_err(|e| Error::Format(format!("metadata is not valid JSON: {e}")))?;
    let payload = &bytes[16 + meta_len..];

    let mut tensors = Vec::with_capacity(meta.tensors.len());
    let mut expect_offset = 0u64;
    for entry in &meta.tensors {
        if entry.offset != expect_offset {
            return Err(Error::Format(format!(
                "tensor {} at offset {}, expected contiguous {expect_offset}",
                entry.name, entry.offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let nbytes = numel * 4;
        let start = entry.offset as usize;
        if payload.len() < start + nbytes {
            return Err(Error::Format(format!(
                "payload truncated reading tensor {}",
                entry.name
            )));
        }
        let data: Vec<f32> = payload[start..start + nbytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((entry.name.clone(), entry.shape.clone(), data));
        expect_offset += nbytes as u64;
    }
    if expect_offset as usize != payload.len() {
        return Err(Error::Format(format!(
            "payload has {} bytes, directory accounts for {expect_offset}",
            payload.len()
        )));
    }
    Ok((meta, tensors))
}

/// Indexed view over loaded tensors with schema checking.
struct TensorTable {
    entries: Vec<(String, Vec<usize>, Vec<f32>)>,
    taken: Vec<bool>,
}

impl TensorTable {
    fn new(entries: Vec<(String, Vec<usize>, Vec<f32>)>) -> TensorTable {
        let taken = vec![false; entries.len()];
        TensorTable { entries, taken }
    }

    fn take(&mut self, name: &str, trainable: bool) -> Result<Tensor> {
        let idx = self
            .entries
            .iter()
            .position(|(n, _, _)| n == name)
            .ok_or_else(|| Error::Schema(format!("checkpoint is missing tensor {name}")))?;
        self.taken[idx] = true;
        let (_, shape, data) = &self.entries[idx];
        if trainable {
            Tensor::param(shape, data.clone())
        } else {
            Tensor::new(shape, data.clone())
        }
    }

    fn finish(self) -> Result<()> {
        for (i, t) in self.taken.iter().enumerate() {
            if !t {
                return Err(Error::Schema(format!(
                    "checkpoint has unknown tensor {}",
                    self.entries[i].0
                )));
            }
        }
        Ok(())
    }
}

pub fn save_text_lm(lm: &TextLm, path: &Path) -> Result<()> {
    let meta = Metadata {
        kind: "text_lm".to_string(),
        model: lm.cfg,
        vocab: None,
        donor_vocab_size: Some(lm.vocab_size),
        patch_size: None,
        block_k: None,
        provenance: vec!["pretrain".to_string()],
        tensors: Vec::new(),
    };
    write_container(path, meta, &lm.named_tensors())
}

pub fn load_text_lm(path: &Path) -> Result<TextLm> {
    let (meta, tensors) = read_container(path)?;
    if meta.kind != "text_lm" {
        return Err(Error::Schema(format!(
            "expected a text_lm checkpoint, found {}",
            meta.kind
        )));
    }
    let vocab_size = meta
        .donor_vocab_size
        .ok_or_else(|| Error::Schema("text_lm checkpoint lacks donor_vocab_size".into()))?;
    let mut table = TensorTable::new(tensors);
    let mut expert = |table: &mut TensorTable, prefix: &str| -> Result<ExpertParams> {
        Ok(ExpertParams {
            wq: table.take(&format!("{prefix}.wq"), true)?,
            wk: table.take(&format!("{prefix}.wk"), true)?,
            wv: table.take(&format!("{prefix}.wv"), true)?,
            wo: table.take(&format!("{prefix}.wo"), true)?,
            ffn_in: table.take(&format!("{prefix}.ffn_in"), true)?,
            ffn_out: table.take(&format!("{prefix}.ffn_out"), true)?,
        })
    };
    let embed = table.take("embed", true)?;
    let pos = table.take("pos", true)?;
    let mut layers = Vec::with_capacity(meta.model.n_layers);
    for i in 0..meta.model.n_layers {
        let e = expert(&mut table, &format!("layer{i}"))?;
        layers.push(TextLmLayer {
            expert: e,
            ln_attn: LayerNormParams {
                gamma: table.take(&format!("layer{i}.ln_attn.gamma"), true)?,
                beta: table.take(&format!("layer{i}.ln_attn.beta"), true)?,
            },
            ln_ffn: LayerNormParams {
                gamma: table.take(&format!("layer{i}.ln_ffn.gamma"), true)?,
                beta: table.take(&format!("layer{i}.ln_ffn.beta"), true)?,
            },
        });
    }
    let ln_final = LayerNormParams {
        gamma: table.take("ln_final.gamma", true)?,
        beta: table.take("ln_final.beta", true)?,
    };
    let head = table.take("head", true)?;
    table.finish()?;
    Ok(TextLm {
        cfg: meta.model,
        vocab_size,
        embed,
        pos,
        layers,
        ln_final,
        head,
    })
}

pub fn save_semvie(model: &SemVieModel, path: &Path) -> Result<()> {
    let kind = if model.block_heads.is_empty() {
        "semvie"
    } else {
        "semvie_sr"
    };
    let meta = Metadata {
        kind: kind.to_string(),
        model: model.cfg,
        vocab: Some(model.layout.clone()),
        donor_vocab_size: None,
        patch_size: Some(model.codebook.patch_size()),
        block_k: if model.block_heads.is_empty() {
            None
        } else {
            Some(model.block_heads.len())
        },
        provenance: model.provenance.clone(),
        tensors: Vec::new(),
    };
    write_container(path, meta, &model.named_tensors())
}

pub fn load_semvie(path: &Path) -> Result<SemVieModel> {
    let (meta, tensors) = read_container(path)?;
    if meta.kind != "semvie" && meta.kind != "semvie_sr" {
        return Err(Error::Schema(format!(
            "expected a semvie checkpoint, found {}",
            meta.kind
        )));
    }
    let layout = meta
        .vocab
        .clone()
        .ok_or_else(|| Error::Schema("checkpoint lacks the vocabulary layout".into()))?;
    let patch_size = meta
        .patch_size
        .ok_or_else(|| Error::Schema("checkpoint lacks the patch size".into()))?;
    let mut table = TensorTable::new(tensors);

    let mut expert = |table: &mut TensorTable, prefix: &str, trainable: bool| -> Result<ExpertParams> {
        Ok(ExpertParams {
            wq: table.take(&format!("{prefix}.wq"), trainable)?,
            wk: table.take(&format!("{prefix}.wk"), trainable)?,
            wv: table.take(&format!("{prefix}.wv"), trainable)?,
            wo: table.take(&format!("{prefix}.wo"), trainable)?,
            ffn_in: table.take(&format!("{prefix}.ffn_in"), trainable)?,
            ffn_out: table.take(&format!("{prefix}.ffn_out"), trainable)?,
        })
    };

    let embed_text = table.take("embed.text", false)?;
    let pos = table.take("pos", false)?;
    let mut layers = Vec::with_capacity(meta.model.n_layers);
    for i in 0..meta.model.n_layers {
        let text = expert(&mut table, &format!("layer{i}.text"), false)?;
        let ln_attn = LayerNormParams {
            gamma: table.take(&format!("layer{i}.ln_attn.gamma"), false)?,
            beta: table.take(&format!("layer{i}.ln_attn.beta"), false)?,
        };
        let ln_ffn = LayerNormParams {
            gamma: table.take(&format!("layer{i}.ln_ffn.gamma"), false)?,
            beta: table.take(&format!("layer{i}.ln_ffn.beta"), false)?,
        };
        layers.push((text, ln_attn, ln_ffn));
    }
    let ln_final = LayerNormParams {
        gamma: table.take("ln_final.gamma", false)?,
        beta: table.take("ln_final.beta", false)?,
    };
    let head_text = table.take("head.text", false)?;
    let embed_visual = table.take("embed.visual", true)?;
    let mut full_layers = Vec::with_capacity(meta.model.n_layers);
    for (i, (text, ln_attn, ln_ffn)) in layers.into_iter().enumerate() {
        let vision = expert(&mut table, &format!("layer{i}.vision"), true)?;
        full_layers.push(SemVieLayerParams {
            text,
            vision,
            ln_attn,
            ln_ffn,
        });
    }
    let head_vision = table.take("head.vision", true)?;
    let mut block_heads = Vec::new();
    if let Some(k) = meta.block_k {
        for j in 0..k {
            block_heads.push(table.take(&format!("block_head{j}"), true)?);
        }
    }
    let cb_tensor = table.take("codebook", false)?;
    table.finish()?;

    let count = cb_tensor.rows();
    let codebook = VisualCodebook::from_flat(patch_size, count, cb_tensor.to_vec())?;
    if codebook.count() != layout.visual_size {
        return Err(Error::Schema(format!(
            "codebook of {} entries vs visual range {}",
            codebook.count(),
            layout.visual_size
        )));
    }
    Ok(SemVieModel {
        cfg: meta.model,
        layout,
        codebook,
        embed_text,
        embed_visual,
        pos,
        layers: full_layers,
        ln_final,
        head_text,
        head_vision,
        block_heads,
        provenance: meta.provenance,
    })
}
