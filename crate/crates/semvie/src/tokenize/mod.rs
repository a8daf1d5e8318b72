//! Text and images into ids of one merged vocabulary, and back.
//!
//! Text is tokenized at the byte level (one id per byte, exactly invertible).
//! Images are cut into `P×P` patches and each patch mapped to its nearest
//! codeword in a k-means-trained visual codebook, raster-scanned into a
//! 1-D token sequence.

mod codebook;
mod image;
mod vocab;

pub use codebook::{
    dequantize_tokens, extract_patches, quantize_image, token_count, train_codebook, TokenGrid,
    VisualCodebook,
};
pub use image::{decode_ppm, encode_ppm, load_ppm, save_ppm, Image};
pub use vocab::{build_multimodal_vocab, MultimodalVocab, Special, VocabLayout};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-position tag: text ids (including specials) or visual codebook ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Vision,
}

/// One id per byte of the string; the id is the byte value.
pub fn encode_text(s: &str) -> Vec<u32> {
    s.bytes().map(u32::from).collect()
}

/// Byte-for-byte inverse of [`encode_text`]. Ids must be below 256 (the
/// caller strips special ids first) and must reassemble into valid UTF-8.
pub fn decode_text(ids: &[u32]) -> Result<String> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        if id >= 256 {
            return Err(Error::Range(format!("id {id} outside the byte range 0..256")));
        }
        bytes.push(id as u8);
    }
    String::from_utf8(bytes).map_err(|_| Error::Data("decoded bytes are not valid UTF-8".into()))
}

/// Lossy variant for sampled byte sequences that may not be valid UTF-8.
pub fn decode_text_lossy(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().map(|&id| (id.min(255)) as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// A vocabulary-id sequence with per-position modality tags and a loss mask.
/// The tag of each position is derived from (and therefore always agrees
/// with) the id's range in the vocabulary layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub modality: Vec<Modality>,
    pub loss_mask: Vec<bool>,
}

impl TokenSequence {
    /// Build a sequence, deriving modality tags from the layout ranges.
    /// `loss_mask[i]` marks position `i` as a supervised *target*.
    pub fn new(ids: Vec<u32>, loss_mask: Vec<bool>, layout: &VocabLayout) -> Result<TokenSequence> {
        if ids.len() != loss_mask.len() {
            return Err(Error::Dimension(format!(
                "{} ids vs {} mask entries",
                ids.len(),
                loss_mask.len()
            )));
        }
        let modality = ids
            .iter()
            .map(|&id| layout.modality_of(id))
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenSequence {
            ids,
            modality,
            loss_mask,
        })
    }

    /// All positions supervised.
    pub fn fully_supervised(ids: Vec<u32>, layout: &VocabLayout) -> Result<TokenSequence> {
        let mask = vec![true; ids.len()];
        TokenSequence::new(ids, mask, layout)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_single_ascii_byte() {
        assert_eq!(encode_text("A"), vec![65]);
        assert_eq!(encode_text(""), Vec::<u32>::new());
    }

    #[test]
    fn decode_byte_pairs() {
        assert_eq!(decode_text(&[72, 105]).unwrap(), "Hi");
        assert_eq!(decode_text(&[]).unwrap(), "");
    }

    #[test]
    fn decode_rejects_non_byte_ids() {
        assert!(matches!(decode_text(&[72, 300]), Err(Error::Range(_))));
    }

    proptest! {
        #[test]
        fn text_round_trips_for_any_string(s in ".*") {
            prop_assert_eq!(decode_text(&encode_text(&s)).unwrap(), s);
        }
    }

    #[test]
    fn token_sequence_derives_tags_from_ranges() {
        let layout = VocabLayout::new(256, Special::default_names(), 64).unwrap();
        let ids = vec![65, layout.special_id(Special::Boi), 262, 300, layout.special_id(Special::Eoi)];
        let seq = TokenSequence::fully_supervised(ids, &layout).unwrap();
        assert_eq!(
            seq.modality,
            vec![
                Modality::Text,
                Modality::Text,
                Modality::Vision,
                Modality::Vision,
                Modality::Text
            ]
        );
        // Stored tags always agree with range classification.
        for (id, tag) in seq.ids.iter().zip(&seq.modality) {
            assert_eq!(layout.modality_of(*id).unwrap(), *tag);
        }
    }

    #[test]
    fn token_sequence_rejects_out_of_vocab_ids() {
        let layout = VocabLayout::new(256, Special::default_names(), 64).unwrap();
        assert!(matches!(
            TokenSequence::fully_supervised(vec![9999], &layout),
            Err(Error::Range(_))
        ));
    }
}
