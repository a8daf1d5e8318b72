//! Canonical sequence layouts.
//!
//! Training and generation build token sequences through the same functions
//! so the two sides can never drift apart:
//!
//! - text-to-image:      `<bos> [res-tag <sep>] caption <boi> V <eoi> <eos>`
//! - captioning:         `<bos> <boi> V <eoi> <sep> caption <eos>`
//! - super-resolution:   `<bos> res-tag <sep> caption <boi> V_low <eoi> <sep> <boi> V_high <eoi> <eos>`
//!
//! The resolution tag is the literal text `<res> {height} {width}` in plain
//! decimal digits, encoded as bytes, terminated by the `<sep>` special.

use crate::error::{Error, Result};
use crate::tokenize::{encode_text, Special, TokenGrid, TokenSequence, VocabLayout};

/// Which targets carry loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupervisionMode {
    /// Every non-pad target (alignment pretraining).
    All,
    /// Only targets inside the image span (quality and super-resolution
    /// stages).
    ImageSpanOnly,
}

/// Byte ids of the literal resolution tag `<res> {h} {w}` (height first).
pub fn resolution_tag_ids(h_px: usize, w_px: usize) -> Vec<u32> {
    encode_text(&format!("<res> {h_px} {w_px}"))
}

fn visual_ids(grid: &TokenGrid, layout: &VocabLayout) -> Result<Vec<u32>> {
    grid.tokens.iter().map(|&t| layout.visual_id(t)).collect()
}

/// Generation prefix for text-to-image: up to and including `<boi>`.
pub fn t2i_prefix(prompt: &str, resolution: (usize, usize), layout: &VocabLayout) -> Vec<u32> {
    let (h, w) = resolution;
    let mut ids = vec![layout.special_id(Special::Bos)];
    ids.extend(resolution_tag_ids(h, w));
    ids.push(layout.special_id(Special::Sep));
    ids.extend(encode_text(prompt));
    ids.push(layout.special_id(Special::Boi));
    ids
}

/// Full teacher-forced text-to-image sequence. `resolution` adds the tag
/// (quality-stage layout); without it the plain alignment-stage layout is
/// produced.
pub fn build_t2i_sequence(
    caption: &str,
    grid: &TokenGrid,
    resolution: Option<(usize, usize)>,
    supervision: SupervisionMode,
    layout: &VocabLayout,
) -> Result<TokenSequence> {
    let mut ids = vec![layout.special_id(Special::Bos)];
    if let Some((h, w)) = resolution {
        ids.extend(resolution_tag_ids(h, w));
        ids.push(layout.special_id(Special::Sep));
    }
    ids.extend(encode_text(caption));
    ids.push(layout.special_id(Special::Boi));
    let span_start = ids.len();
    ids.extend(visual_ids(grid, layout)?);
    let span_end = ids.len();
    ids.push(layout.special_id(Special::Eoi));
    ids.push(layout.special_id(Special::Eos));
    let mask = match supervision {
        SupervisionMode::All => vec![true; ids.len()],
        SupervisionMode::ImageSpanOnly => (0..ids.len())
            .map(|i| i >= span_start && i < span_end)
            .collect(),
    };
    TokenSequence::new(ids, mask, layout)
}

/// Generation prefix for captioning: up to and including the `<sep>` after
/// the image span.
pub fn caption_prefix(grid: &TokenGrid, layout: &VocabLayout) -> Result<Vec<u32>> {
    let mut ids = vec![
        layout.special_id(Special::Bos),
        layout.special_id(Special::Boi),
    ];
    ids.extend(visual_ids(grid, layout)?);
    ids.push(layout.special_id(Special::Eoi));
    ids.push(layout.special_id(Special::Sep));
    Ok(ids)
}

/// Full teacher-forced captioning sequence (alignment stage; everything
/// supervised).
pub fn build_caption_sequence(
    caption: &str,
    grid: &TokenGrid,
    layout: &VocabLayout,
) -> Result<TokenSequence> {
    let mut ids = caption_prefix(grid, layout)?;
    ids.extend(encode_text(caption));
    ids.push(layout.special_id(Special::Eos));
    TokenSequence::fully_supervised(ids, layout)
}

/// Generation prefix for super-resolution: up to and including the second
/// `<boi>`. `high_px` is the target resolution in pixels (height, width).
pub fn sr_prefix(
    caption: &str,
    low: &TokenGrid,
    high_px: (usize, usize),
    layout: &VocabLayout,
) -> Result<Vec<u32>> {
    let (h, w) = high_px;
    let mut ids = vec![layout.special_id(Special::Bos)];
    ids.extend(resolution_tag_ids(h, w));
    ids.push(layout.special_id(Special::Sep));
    ids.extend(encode_text(caption));
    ids.push(layout.special_id(Special::Boi));
    ids.extend(visual_ids(low, layout)?);
    ids.push(layout.special_id(Special::Eoi));
    ids.push(layout.special_id(Special::Sep));
    ids.push(layout.special_id(Special::Boi));
    Ok(ids)
}

/// Full teacher-forced super-resolution sequence; only the high-resolution
/// span is supervised.
pub fn build_sr_sequence(
    caption: &str,
    low: &TokenGrid,
    high: &TokenGrid,
    high_px: (usize, usize),
    layout: &VocabLayout,
) -> Result<TokenSequence> {
    if high.grid_h != 2 * low.grid_h || high.grid_w != 2 * low.grid_w {
        return Err(Error::Geometry(format!(
            "high grid {}×{} is not double the low grid {}×{}",
            high.grid_h, high.grid_w, low.grid_h, low.grid_w
        )));
    }
    let mut ids = sr_prefix(caption, low, high_px, layout)?;
    let span_start = ids.len();
    ids.extend(visual_ids(high, layout)?);
    let span_end = ids.len();
    ids.push(layout.special_id(Special::Eoi));
    ids.push(layout.special_id(Special::Eos));
    let mask = (0..ids.len())
        .map(|i| i >= span_start && i < span_end)
        .collect();
    TokenSequence::new(ids, mask, layout)
}
