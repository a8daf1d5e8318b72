//! The merged text + special + visual vocabulary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::codebook::VisualCodebook;
use crate::tokenize::Modality;

/// The six control tokens, in canonical id order directly after the text ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Special {
    Bos,
    Eos,
    Pad,
    Sep,
    Boi,
    Eoi,
}

impl Special {
    pub const ALL: [Special; 6] = [
        Special::Bos,
        Special::Eos,
        Special::Pad,
        Special::Sep,
        Special::Boi,
        Special::Eoi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Special::Bos => "<bos>",
            Special::Eos => "<eos>",
            Special::Pad => "<pad>",
            Special::Sep => "<sep>",
            Special::Boi => "<boi>",
            Special::Eoi => "<eoi>",
        }
    }

    pub fn default_names() -> Vec<String> {
        Special::ALL.iter().map(|s| s.name().to_string()).collect()
    }
}

/// Id-space layout: `[text | specials | visual]`, with the ranges disjoint
/// and covering `0..total_size`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub text_size: usize,
    pub special_names: Vec<String>,
    pub visual_size: usize,
}

impl VocabLayout {
    pub fn new(text_size: usize, special_names: Vec<String>, visual_size: usize) -> Result<VocabLayout> {
        if special_names.len() != 6 {
            return Err(Error::Config(format!(
                "expected exactly 6 special tokens, got {}",
                special_names.len()
            )));
        }
        Ok(VocabLayout {
            text_size,
            special_names,
            visual_size,
        })
    }

    pub fn total_size(&self) -> usize {
        self.text_size + 6 + self.visual_size
    }

    /// Width of the text head: text ids plus specials.
    pub fn text_plus_special(&self) -> usize {
        self.text_size + 6
    }

    pub fn special_id(&self, s: Special) -> u32 {
        let offset = Special::ALL.iter().position(|&x| x as u8 == s as u8).unwrap();
        (self.text_size + offset) as u32
    }

    /// First visual id.
    pub fn visual_start(&self) -> u32 {
        (self.text_size + 6) as u32
    }

    /// Modality of an id by range: text and special ids are `Text`.
    pub fn modality_of(&self, id: u32) -> Result<Modality> {
        let id = id as usize;
        if id < self.text_plus_special() {
            Ok(Modality::Text)
        } else if id < self.total_size() {
            Ok(Modality::Vision)
        } else {
            Err(Error::Range(format!(
                "id {id} outside vocabulary 0..{}",
                self.total_size()
            )))
        }
    }

    /// Global id of a codebook index.
    pub fn visual_id(&self, codebook_index: u32) -> Result<u32> {
        if (codebook_index as usize) >= self.visual_size {
            return Err(Error::Range(format!(
                "codebook index {codebook_index} outside 0..{}",
                self.visual_size
            )));
        }
        Ok(self.visual_start() + codebook_index)
    }

    /// Codebook index of a visual-range id.
    pub fn codebook_index(&self, id: u32) -> Result<u32> {
        if self.modality_of(id)? != Modality::Vision {
            return Err(Error::Modality(format!("id {id} is not in the visual range")));
        }
        Ok(id - self.visual_start())
    }
}

/// The merged vocabulary with its initial embedding table (`total_size × d`).
/// Visual and special rows start at the mean of the text rows.
#[derive(Debug, Clone)]
pub struct MultimodalVocab {
    pub layout: VocabLayout,
    pub d: usize,
    pub embedding: Vec<f32>,
}

/// Assemble the id space `[text | specials | visual]` and its initial
/// embeddings. `text_embeddings` is a row-major `text_size × d` table; every
/// special and visual row is set to the exact mean of the text rows.
pub fn build_multimodal_vocab(
    text_size: usize,
    special_names: &[String],
    cb: &VisualCodebook,
    d: usize,
    text_embeddings: &[f32],
) -> Result<MultimodalVocab> {
    let layout = VocabLayout::new(text_size, special_names.to_vec(), cb.count())?;
    if text_embeddings.len() != text_size * d {
        return Err(Error::Dimension(format!(
            "text embedding table of {} values is not {text_size}×{d}",
            text_embeddings.len()
        )));
    }
    let mut mean = vec![0.0f64; d];
    for row in text_embeddings.chunks(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    let mean: Vec<f32> = mean.iter().map(|&v| (v / text_size as f64) as f32).collect();

    let total = layout.total_size();
    let mut embedding = Vec::with_capacity(total * d);
    embedding.extend_from_slice(text_embeddings);
    for _ in 0..6 + layout.visual_size {
        embedding.extend_from_slice(&mean);
    }
    Ok(MultimodalVocab {
        layout,
        d,
        embedding,
    })
}
