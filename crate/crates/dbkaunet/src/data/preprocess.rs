//! Fundus preprocessing: green channel → CLAHE → min-max normalization →
//! gamma correction.

use crate::data::FundusSample;
use crate::tensor::Tensor;

/// CLAHE tile grid (rows = cols).
pub const CLAHE_TILES: usize = 8;
/// CLAHE clip limit (multiples of the uniform histogram level).
pub const CLAHE_CLIP: f64 = 2.0;
/// Gamma applied after normalization.
pub const GAMMA: f64 = 1.2;

/// Extracts the green channel as 0..255 byte levels.
pub fn green_channel(sample: &FundusSample) -> Vec<u8> {
    let (h, w) = (sample.height(), sample.width());
    let d = sample.rgb_image.data();
    (0..h * w).map(|i| d[h * w + i].round().clamp(0.0, 255.0) as u8).collect()
}

/// Tile boundaries: tile t of `n` covers `[t·len/n, (t+1)·len/n)`.
fn tile_bounds(len: usize, tiles: usize, t: usize) -> (usize, usize) {
    (t * len / tiles, (t + 1) * len / tiles)
}

/// Per-tile contrast-limited equalization lookup table: histogram clipped at
/// `clip · area/256` with the excess redistributed uniformly, then the scaled
/// cumulative distribution.
fn tile_lut(pixels: impl Iterator<Item = u8>, area: usize, clip: f64) -> [f64; 256] {
    let mut hist = [0.0f64; 256];
    for p in pixels {
        hist[p as usize] += 1.0;
    }
    let limit = (clip * area as f64 / 256.0).max(1.0);
    let mut excess = 0.0;
    for h in hist.iter_mut() {
        if *h > limit {
            excess += *h - limit;
            *h = limit;
        }
    }
    let bonus = excess / 256.0;
    let mut lut = [0.0f64; 256];
    let mut cum = 0.0;
    for i in 0..256 {
        cum += hist[i] + bonus;
        lut[i] = 255.0 * cum / area as f64;
    }
    lut
}

/// Contrast-limited adaptive histogram equalization over a `tiles × tiles`
/// grid with bilinear interpolation between neighboring tile mappings.
/// A constant image passes through unchanged.
pub fn clahe(img: &[u8], h: usize, w: usize, tiles: usize, clip: f64) -> Vec<u8> {
    assert!(h >= tiles && w >= tiles, "clahe: image {h}x{w} smaller than the {tiles}x{tiles} tile grid");
    let (lo, hi) = img.iter().fold((255u8, 0u8), |(a, b), &v| (a.min(v), b.max(v)));
    if lo == hi {
        return img.to_vec();
    }

    let mut luts = Vec::with_capacity(tiles * tiles);
    let mut centers_r = Vec::with_capacity(tiles);
    let mut centers_c = Vec::with_capacity(tiles);
    for tr in 0..tiles {
        let (r0, r1) = tile_bounds(h, tiles, tr);
        centers_r.push((r0 + r1) as f64 / 2.0 - 0.5);
        for tc in 0..tiles {
            let (c0, c1) = tile_bounds(w, tiles, tc);
            if tr == 0 {
                centers_c.push((c0 + c1) as f64 / 2.0 - 0.5);
            }
            let area = (r1 - r0) * (c1 - c0);
            let pix = (r0..r1).flat_map(|r| (c0..c1).map(move |c| (r, c))).map(|(r, c)| img[r * w + c]);
            luts.push(tile_lut(pix, area, clip));
        }
    }

    // For a coordinate, the two bracketing tile indices and the blend weight.
    let bracket = |x: f64, centers: &[f64]| -> (usize, usize, f64) {
        if x <= centers[0] {
            return (0, 0, 0.0);
        }
        if x >= centers[tiles - 1] {
            return (tiles - 1, tiles - 1, 0.0);
        }
        let i = centers.iter().rposition(|&c| c <= x).unwrap();
        (i, i + 1, (x - centers[i]) / (centers[i + 1] - centers[i]))
    };

    let mut out = vec![0u8; h * w];
    for r in 0..h {
        let (r0, r1, wr) = bracket(r as f64, &centers_r);
        for c in 0..w {
            let (c0, c1, wc) = bracket(c as f64, &centers_c);
            let v = img[r * w + c] as usize;
            let blend = (1.0 - wr) * (1.0 - wc) * luts[r0 * tiles + c0][v]
                + (1.0 - wr) * wc * luts[r0 * tiles + c1][v]
                + wr * (1.0 - wc) * luts[r1 * tiles + c0][v]
                + wr * wc * luts[r1 * tiles + c1][v];
            out[r * w + c] = blend.round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Min-max normalization to [0,1]; a degenerate (constant) range divides by
/// `max(range, 1)` so the output is well-defined.
pub fn minmax_normalize(levels: &[u8]) -> Vec<f64> {
    let (lo, hi) = levels.iter().fold((255u8, 0u8), |(a, b), &v| (a.min(v), b.max(v)));
    let range = (hi as f64 - lo as f64).max(1.0);
    levels.iter().map(|&v| (v as f64 - lo as f64) / range).collect()
}

/// Full preprocessing chain; output is a [1,H,W] tensor in [0,1].
pub fn preprocess(sample: &FundusSample) -> Tensor {
    let (h, w) = (sample.height(), sample.width());
    let green = green_channel(sample);
    let eq = clahe(&green, h, w, CLAHE_TILES, CLAHE_CLIP);
    let norm = minmax_normalize(&eq);
    let data: Vec<f64> = norm.iter().map(|&v| v.powf(GAMMA)).collect();
    Tensor::new(&[1, h, w], data)
}
