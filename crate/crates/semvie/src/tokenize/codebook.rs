//! Visual codebook: k-means over raw-pixel patches, nearest-codeword
//! quantization, and raster-scan token grids.

use crate::error::{Error, Result};
use crate::rng;
use crate::tokenize::image::Image;

/// A `C×D` table of codewords over `P×P` raw-pixel patches (`D = 3·P²`).
/// Nearest-codeword assignment is deterministic: ties break to the lowest
/// index.
#[derive(Debug, Clone)]
pub struct VisualCodebook {
    patch_size: usize,
    dim: usize,
    codewords: Vec<f32>,
}

/// Row-major grid of visual token indices; `tokens` is the raster-scan
/// (row-major) linearization, which for a 2-D grid is also its storage order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub tokens: Vec<u32>,
}

impl VisualCodebook {
    pub fn from_codewords(patch_size: usize, codewords: Vec<Vec<f32>>) -> Result<VisualCodebook> {
        let dim = 3 * patch_size * patch_size;
        if codewords.len() < 2 {
            return Err(Error::Config(format!(
                "codebook needs at least 2 entries, got {}",
                codewords.len()
            )));
        }
        let mut flat = Vec::with_capacity(codewords.len() * dim);
        for (i, cw) in codewords.iter().enumerate() {
            if cw.len() != dim {
                return Err(Error::Geometry(format!(
                    "codeword {i} has {} values, patch size {patch_size} needs {dim}",
                    cw.len()
                )));
            }
            if cw.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("codeword {i} is not finite")));
            }
            flat.extend_from_slice(cw);
        }
        Ok(VisualCodebook {
            patch_size,
            dim,
            codewords: flat,
        })
    }

    pub(crate) fn from_flat(patch_size: usize, count: usize, flat: Vec<f32>) -> Result<VisualCodebook> {
        let dim = 3 * patch_size * patch_size;
        if flat.len() != count * dim {
            return Err(Error::Geometry(format!(
                "codebook payload of {} values does not match {count}×{dim}",
                flat.len()
            )));
        }
        Ok(VisualCodebook {
            patch_size,
            dim,
            codewords: flat,
        })
    }

    /// Number of codewords (C).
    pub fn count(&self) -> usize {
        self.codewords.len() / self.dim
    }

    /// Patch dimensionality (D = 3·P²).
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn codeword(&self, i: usize) -> &[f32] {
        &self.codewords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.codewords
    }

    /// Index of the nearest codeword by squared Euclidean distance.
    pub fn nearest(&self, patch: &[f32]) -> usize {
        debug_assert_eq!(patch.len(), self.dim);
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for i in 0..self.count() {
            let d = squared_distance(patch, self.codeword(i));
            if d < best_dist {
                best_dist = d;
                best = i;
            }
        }
        best
    }
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let diff = (x - y) as f64;
        acc += diff * diff;
    }
    acc
}

/// Number of visual tokens an `h×w` image yields at patch size `p`.
pub fn token_count(h: usize, w: usize, p: usize) -> usize {
    (h / p) * (w / p)
}

/// Cut an image into `P×P` patches in raster order (row-major over the grid);
/// each patch is flattened `(y, x, channel)`.
pub fn extract_patches(img: &Image, patch_size: usize) -> Result<Vec<Vec<f32>>> {
    if img.height % patch_size != 0 || img.width % patch_size != 0 {
        return Err(Error::Geometry(format!(
            "image {}×{} not divisible by patch size {patch_size}",
            img.height, img.width
        )));
    }
    let grid_h = img.height / patch_size;
    let grid_w = img.width / patch_size;
    let mut patches = Vec::with_capacity(grid_h * grid_w);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let mut patch = Vec::with_capacity(3 * patch_size * patch_size);
            for py in 0..patch_size {
                for px in 0..patch_size {
                    let rgb = img.get(gx * patch_size + px, gy * patch_size + py);
                    patch.extend_from_slice(&rgb);
                }
            }
            patches.push(patch);
        }
    }
    Ok(patches)
}

/// Train a codebook with Lloyd's k-means.
///
/// Initialization is seeded and deterministic: the first `c` pairwise-distinct
/// patches in shuffled order become the starting centroids. Empty clusters are
/// reseeded to the patch farthest from its assigned centroid. Returns the
/// codebook and the quantization objective (sum of squared distances), entry
/// 0 for the initial centroids and one entry per completed iteration; the
/// sequence is non-increasing.
pub fn train_codebook(
    patches: &[Vec<f32>],
    patch_size: usize,
    c: usize,
    iters: usize,
    seed: u64,
) -> Result<(VisualCodebook, Vec<f64>)> {
    let dim = 3 * patch_size * patch_size;
    if patches.len() < c {
        return Err(Error::InsufficientData(format!(
            "{} patches for {c} codewords",
            patches.len()
        )));
    }
    if c < 1 || iters < 1 {
        return Err(Error::Config(format!("c={c} and iters={iters} must be ≥ 1")));
    }
    for (i, p) in patches.iter().enumerate() {
        if p.len() != dim {
            return Err(Error::Geometry(format!(
                "patch {i} has {} values, expected {dim}",
                p.len()
            )));
        }
    }

    let n = patches.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::seeded(seed);
    rng::shuffle(&mut r, &mut order);

    let mut centroids: Vec<Vec<f32>> = Vec::with_capacity(c);
    for &i in &order {
        if centroids.iter().all(|cw| cw.as_slice() != patches[i].as_slice()) {
            centroids.push(patches[i].clone());
            if centroids.len() == c {
                break;
            }
        }
    }
    // Fewer distinct patches than codewords: pad with duplicates; the
    // reseeding rule below repairs any resulting empty clusters.
    for &i in order.iter().cycle().take(n) {
        if centroids.len() == c {
            break;
        }
        centroids.push(patches[i].clone());
    }

    let mut assignment = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    let mut history = Vec::with_capacity(iters + 1);

    let assign = |centroids: &[Vec<f32>], assignment: &mut [usize], dists: &mut [f64]| -> f64 {
        let mut total = 0.0f64;
        for (i, patch) in patches.iter().enumerate() {
            let mut best = 0usize;
            let mut best_dist = f64::INFINITY;
            for (j, cw) in centroids.iter().enumerate() {
                let d = squared_distance(patch, cw);
                if d < best_dist {
                    best_dist = d;
                    best = j;
                }
            }
            assignment[i] = best;
            dists[i] = best_dist;
            total += best_dist;
        }
        total
    };

    history.push(assign(&centroids, &mut assignment, &mut dists));

    for _ in 0..iters {
        // Update step: cluster means in double precision.
        let mut sums = vec![vec![0.0f64; dim]; c];
        let mut counts = vec![0usize; c];
        for (i, patch) in patches.iter().enumerate() {
            let k = assignment[i];
            counts[k] += 1;
            for (s, &v) in sums[k].iter_mut().zip(patch) {
                *s += v as f64;
            }
        }
        for k in 0..c {
            if counts[k] > 0 {
                for (dst, s) in centroids[k].iter_mut().zip(&sums[k]) {
                    *dst = (*s / counts[k] as f64) as f32;
                }
            }
        }
        // Reseed empty clusters to the farthest patch from its (updated)
        // centroid, claiming each patch at most once per round.
        let empties: Vec<usize> = (0..c).filter(|&k| counts[k] == 0).collect();
        if !empties.is_empty() {
            let mut far: Vec<(usize, f64)> = patches
                .iter()
                .enumerate()
                .map(|(i, p)| (i, squared_distance(p, &centroids[assignment[i]])))
                .collect();
            far.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for (k, &(i, _)) in empties.iter().zip(&far) {
                centroids[*k] = patches[i].clone();
            }
        }
        history.push(assign(&centroids, &mut assignment, &mut dists));
    }

    // Constructed directly so that degenerate C=1 training runs are allowed;
    // the public constructor enforces C ≥ 2.
    let mut flat = Vec::with_capacity(c * dim);
    for (i, cw) in centroids.iter().enumerate() {
        if cw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("centroid {i} is not finite")));
        }
        flat.extend_from_slice(cw);
    }
    Ok((
        VisualCodebook {
            patch_size,
            dim,
            codewords: flat,
        },
        history,
    ))
}

/// Map each `P×P` patch to its nearest codeword; the grid is raster-scanned
/// row-major, yielding `H·W/P²` tokens.
pub fn quantize_image(img: &Image, cb: &VisualCodebook) -> Result<TokenGrid> {
    let p = cb.patch_size();
    let patches = extract_patches(img, p)?;
    let tokens = patches.iter().map(|pt| cb.nearest(pt) as u32).collect();
    Ok(TokenGrid {
        grid_h: img.height / p,
        grid_w: img.width / p,
        tokens,
    })
}

/// Tile codewords back into an image: token `t` becomes its codeword reshaped
/// to a `P×P×3` patch, placed in raster order.
pub fn dequantize_tokens(
    tokens: &[u32],
    cb: &VisualCodebook,
    grid_h: usize,
    grid_w: usize,
) -> Result<Image> {
    if tokens.len() != grid_h * grid_w {
        return Err(Error::Geometry(format!(
            "{} tokens for a {grid_h}×{grid_w} grid",
            tokens.len()
        )));
    }
    let c = cb.count();
    let p = cb.patch_size();
    let mut img = Image::filled(grid_w * p, grid_h * p, [0.0, 0.0, 0.0]);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let t = tokens[gy * grid_w + gx] as usize;
            if t >= c {
                return Err(Error::Modality(format!(
                    "token {t} outside the visual codebook 0..{c}"
                )));
            }
            let cw = cb.codeword(t);
            for py in 0..p {
                for px in 0..p {
                    let base = (py * p + px) * 3;
                    img.set(
                        gx * p + px,
                        gy * p + py,
                        [cw[base], cw[base + 1], cw[base + 2]],
                    );
                }
            }
        }
    }
    Ok(img)
}
