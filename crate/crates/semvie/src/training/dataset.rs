//! Synthetic oracle-verifiable dataset: one colored shape on a white canvas,
//! captioned by a fixed template so ground-truth attributes are exact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tokenize::{load_ppm, save_ppm, Image};
use crate::training::StageId;

pub const SHAPES: [&str; 3] = ["square", "circle", "triangle"];

pub const COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 0.7, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 0.85, 0.0]),
    ("cyan", [0.0, 0.75, 0.8]),
    ("magenta", [0.85, 0.0, 0.7]),
    ("orange", [1.0, 0.5, 0.0]),
    ("purple", [0.45, 0.0, 0.75]),
];

pub const POSITIONS: [&str; 5] = [
    "top-left",
    "top-right",
    "bottom-left",
    "bottom-right",
    "center",
];

/// Ground truth for one record, by index into the three attribute tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attributes {
    pub shape: usize,
    pub color: usize,
    pub position: usize,
}

/// Deterministic rendering of the caption template
/// `a {color} {shape} at the {position}`.
pub fn caption_of(attrs: Attributes) -> String {
    format!(
        "a {} {} at the {}",
        COLORS[attrs.color].0, SHAPES[attrs.shape], POSITIONS[attrs.position]
    )
}

/// Parse a caption back to attributes; anything off-template is a grammar
/// error.
pub fn parse_caption(s: &str) -> Result<Attributes> {
    let words: Vec<&str> = s.split(' ').collect();
    if words.len() != 6 || words[0] != "a" || words[3] != "at" || words[4] != "the" {
        return Err(Error::Grammar(format!("caption {s:?} is off-template")));
    }
    let color = COLORS
        .iter()
        .position(|(n, _)| *n == words[1])
        .ok_or_else(|| Error::Grammar(format!("unknown color {:?}", words[1])))?;
    let shape = SHAPES
        .iter()
        .position(|n| *n == words[2])
        .ok_or_else(|| Error::Grammar(format!("unknown shape {:?}", words[2])))?;
    let position = POSITIONS
        .iter()
        .position(|n| *n == words[5])
        .ok_or_else(|| Error::Grammar(format!("unknown position {:?}", words[5])))?;
    Ok(Attributes {
        shape,
        color,
        position,
    })
}

/// Binary mask of a shape filling a `bw×bh` bounding box, shared by the
/// renderer and the template-correlation classifier so a rendered shape
/// matches its own template exactly.
pub fn shape_mask(shape: usize, bw: usize, bh: usize) -> Vec<bool> {
    let mut mask = vec![false; bw * bh];
    for y in 0..bh {
        for x in 0..bw {
            let nx = (x as f64 + 0.5) / bw as f64 - 0.5;
            let ny = (y as f64 + 0.5) / bh as f64 - 0.5;
            let inside = match shape {
                0 => true,
                1 => nx * nx + ny * ny <= 0.25,
                _ => nx.abs() <= (y as f64 + 1.0) / (2.0 * bh as f64),
            };
            mask[y * bw + x] = inside;
        }
    }
    mask
}

/// Center of each named position region on a `w×h` canvas, in pixels.
pub fn position_center(position: usize, w: usize, h: usize) -> (usize, usize) {
    match position {
        0 => (w / 4, h / 4),
        1 => (3 * w / 4, h / 4),
        2 => (w / 4, 3 * h / 4),
        3 => (3 * w / 4, 3 * h / 4),
        _ => (w / 2, h / 2),
    }
}

/// Render the scene: white canvas, one shape of side `3·min(w,h)/8` at its
/// region center.
pub fn render_scene(attrs: Attributes, width: usize, height: usize) -> Image {
    let mut img = Image::filled(width, height, [1.0, 1.0, 1.0]);
    let s = 3 * width.min(height) / 8;
    let (cx, cy) = position_center(attrs.position, width, height);
    let (x0, y0) = (cx - s / 2, cy - s / 2);
    let mask = shape_mask(attrs.shape, s, s);
    let rgb = COLORS[attrs.color].1;
    for y in 0..s {
        for x in 0..s {
            if mask[y * s + x] {
                img.set(x0 + x, y0 + y, rgb);
            }
        }
    }
    img
}

/// One manifest line. `image` and `hi_image` are paths relative to the
/// manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DatasetRecord {
    pub caption: String,
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub shape: String,
    pub color: String,
    pub position: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hi_image: Option<String>,
}

impl DatasetRecord {
    pub fn attributes(&self) -> Result<Attributes> {
        let shape = SHAPES
            .iter()
            .position(|n| *n == self.shape)
            .ok_or_else(|| Error::Data(format!("unknown shape {:?}", self.shape)))?;
        let color = COLORS
            .iter()
            .position(|(n, _)| *n == self.color)
            .ok_or_else(|| Error::Data(format!("unknown color {:?}", self.color)))?;
        let position = POSITIONS
            .iter()
            .position(|n| *n == self.position)
            .ok_or_else(|| Error::Data(format!("unknown position {:?}", self.position)))?;
        Ok(Attributes {
            shape,
            color,
            position,
        })
    }
}

/// A record with its pixels loaded.
#[derive(Debug, Clone)]
pub struct LoadedRecord {
    pub record: DatasetRecord,
    pub image: Image,
    pub hi_image: Option<Image>,
}

/// Stage geometry: fixed 32×32 for alignment, variable aspect with the minor
/// side at 32 for the quality stage, and a (32×32, 64×64) pair per record for
/// super-resolution.
const QUALITY_SIZES: [(usize, usize); 5] = [(32, 32), (32, 48), (32, 64), (48, 32), (64, 32)];

fn draw_attrs(r: &mut rand_chacha::ChaCha8Rng) -> Attributes {
    Attributes {
        shape: rng::index(r, SHAPES.len()),
        color: rng::index(r, COLORS.len()),
        position: rng::index(r, POSITIONS.len()),
    }
}

/// Generate `n` records with PPM files, a JSON-lines manifest, and a plain
/// caption corpus (`captions.txt`), all deterministic in `(n, seed)`.
pub fn make_synthetic_dataset(
    n: usize,
    seed: u64,
    stage: StageId,
    out_dir: &Path,
) -> Result<Vec<DatasetRecord>> {
    if n == 0 {
        return Err(Error::Config("dataset needs at least one record".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut r = rng::seeded(seed);
    let mut records = Vec::with_capacity(n);
    let mut manifest = Vec::new();
    let mut captions = String::new();
    for i in 0..n {
        let attrs = draw_attrs(&mut r);
        let (w, h) = match stage {
            StageId::I => (32, 32),
            StageId::II => QUALITY_SIZES[rng::index(&mut r, QUALITY_SIZES.len())],
            StageId::III => (32, 32),
        };
        let caption = caption_of(attrs);
        let image_name = format!("img_{i:05}.ppm");
        save_ppm(&render_scene(attrs, w, h), &out_dir.join(&image_name))?;
        let hi_image = if stage == StageId::III {
            let name = format!("img_{i:05}_hi.ppm");
            save_ppm(&render_scene(attrs, w * 2, h * 2), &out_dir.join(&name))?;
            Some(name)
        } else {
            None
        };
        let record = DatasetRecord {
            caption: caption.clone(),
            image: image_name,
            width: w,
            height: h,
            shape: SHAPES[attrs.shape].to_string(),
            color: COLORS[attrs.color].0.to_string(),
            position: POSITIONS[attrs.position].to_string(),
            hi_image,
        };
        manifest.extend_from_slice(serde_json::to_string(&record)?.as_bytes());
        manifest.push(b'\n');
        captions.push_str(&caption);
        captions.push('\n');
        records.push(record);
    }
    let mut f = fs::File::create(out_dir.join("manifest.jsonl"))?;
    f.write_all(&manifest)?;
    fs::write(out_dir.join("captions.txt"), captions)?;
    Ok(records)
}

/// Read a manifest and its images back.
pub fn load_dataset(dir: &Path) -> Result<Vec<LoadedRecord>> {
    let manifest = fs::read_to_string(dir.join("manifest.jsonl"))?;
    let mut out = Vec::new();
    for line in manifest.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(line)?;
        let image = load_ppm(&dir.join(&record.image))?;
        if image.width != record.width || image.height != record.height {
            return Err(Error::Data(format!(
                "{}: stored {}×{} but manifest says {}×{}",
                record.image, image.width, image.height, record.width, record.height
            )));
        }
        let hi_image = match &record.hi_image {
            Some(name) => Some(load_ppm(&dir.join(name))?),
            None => None,
        };
        out.push(LoadedRecord {
            record,
            image,
            hi_image,
        });
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "empty manifest in {}",
            dir.display()
        )));
    }
    Ok(out)
}

/// Caption-grammar text corpus for donor pretraining; some lines carry a
/// resolution tag so digits appear in context.
pub fn make_text_corpus(lines: usize, seed: u64) -> String {
    let mut r = rng::seeded(seed);
    let mut out = String::new();
    for i in 0..lines {
        if i % 5 == 4 {
            let (w, h) = QUALITY_SIZES[rng::index(&mut r, QUALITY_SIZES.len())];
            out.push_str(&format!("<res> {h} {w} "));
        }
        out.push_str(&caption_of(draw_attrs(&mut r)));
        out.push('\n');
    }
    out
}

/// Helper for tests and file lookups: resolve a record's image path.
pub fn image_path(dir: &Path, record: &DatasetRecord) -> PathBuf {
    dir.join(&record.image)
}
