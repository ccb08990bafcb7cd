//! Synthetic vessel-like images for desk-scale end-to-end runs: dark smooth
//! curves on a bright background with an illumination gradient and noise.

use crate::data::FundusSample;
use crate::init::{randn, Prng};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};

fn quantize_u8(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Rasterizes one quadratic Bézier curve of the given half-width into `mask`.
fn draw_bezier(
    mask: &mut [bool],
    size: usize,
    p0: (f64, f64),
    p1: (f64, f64),
    p2: (f64, f64),
    width: f64,
) {
    let steps = 6 * size;
    let radius = width / 2.0;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let u = 1.0 - t;
        let r = u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0;
        let c = u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1;
        let r0 = ((r - radius).floor().max(0.0)) as usize;
        let r1 = ((r + radius).ceil().min(size as f64 - 1.0)) as usize;
        let c0 = ((c - radius).floor().max(0.0)) as usize;
        let c1 = ((c + radius).ceil().min(size as f64 - 1.0)) as usize;
        for rr in r0..=r1 {
            for cc in c0..=c1 {
                let dr = rr as f64 - r;
                let dc = cc as f64 - c;
                if (dr * dr + dc * dc).sqrt() <= radius {
                    mask[rr * size + cc] = true;
                }
            }
        }
    }
}

fn generate(rng: &mut Prng, size: usize) -> (Vec<f64>, Vec<bool>) {
    // bright background with a low-frequency illumination gradient
    let base = 0.6 + 0.2 * rng.gen::<f64>();
    let angle = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
    let amp = 0.05 + 0.05 * rng.gen::<f64>();
    let (gr, gc) = (angle.sin(), angle.cos());
    let mut image = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let t = (r as f64 * gr + c as f64 * gc) / size as f64;
            image[r * size + c] = base + amp * t;
        }
    }

    // 2..5 vessels, each darker than the background by 0.2..0.4
    let n_vessels = rng.gen_range(2..=5);
    let mut mask = vec![false; size * size];
    for _ in 0..n_vessels {
        let rand_pt = |rng: &mut Prng| (size as f64 * rng.gen::<f64>(), size as f64 * rng.gen::<f64>());
        let p0 = rand_pt(rng);
        let p1 = rand_pt(rng);
        let p2 = rand_pt(rng);
        let width = 1.0 + 3.0 * rng.gen::<f64>();
        let darken = 0.2 + 0.2 * rng.gen::<f64>();
        let mut vessel = vec![false; size * size];
        draw_bezier(&mut vessel, size, p0, p1, p2, width);
        for i in 0..size * size {
            if vessel[i] {
                if !mask[i] {
                    image[i] -= darken;
                }
                mask[i] = true;
            }
        }
    }

    // sensor noise, then byte quantization for exact file round-trips
    for v in image.iter_mut() {
        *v = quantize_u8(*v + 0.05 * randn(rng));
    }
    (image, mask)
}

/// Deterministic synthetic sample: (image [1,S,S] in [0,1] at byte
/// resolution, vessel mask [S,S], full-frame FOV [S,S]).
pub fn synth_vessel(seed: u64, size: usize) -> (Tensor, Tensor, Tensor) {
    assert!(size >= 32, "synth_vessel: size {size} below minimum 32");
    let mut rng = Prng::seed_from_u64(seed);
    // retry until the curves leave enough vessel pixels in frame
    let min_pixels = 50 * size * size / (64 * 64);
    let (image, mask) = loop {
        let out = generate(&mut rng, size);
        if out.1.iter().filter(|&&m| m).count() >= min_pixels.max(1) {
            break out;
        }
    };
    let maskf: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    (
        Tensor::new(&[1, size, size], image),
        Tensor::new(&[size, size], maskf),
        Tensor::full(&[size, size], 1.0),
    )
}

/// Wraps a synthetic sample as a [`FundusSample`]: the gray values become
/// byte levels on all three color channels.
pub fn synth_sample(seed: u64, size: usize) -> FundusSample {
    let (img, mask, fov) = synth_vessel(seed, size);
    let gray: Vec<f64> = img.to_vec().iter().map(|&v| (v * 255.0).round()).collect();
    let mut rgb = Vec::with_capacity(3 * size * size);
    for _ in 0..3 {
        rgb.extend_from_slice(&gray);
    }
    FundusSample {
        rgb_image: Tensor::new(&[3, size, size], rgb),
        fov_mask: fov,
        vessel_mask: mask,
        source_id: format!("synthetic-{seed}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_are_binary_and_nonempty_over_100_seeds() {
        for seed in 0..100 {
            let (img, mask, fov) = synth_vessel(seed, 64);
            assert_eq!(img.shape(), &[1, 64, 64]);
            let md = mask.to_vec();
            assert!(md.iter().all(|&v| v == 0.0 || v == 1.0));
            let count = md.iter().filter(|&&v| v == 1.0).count();
            assert!(count >= 50, "seed {seed}: only {count} vessel pixels");
            assert!(fov.to_vec().iter().all(|&v| v == 1.0));
            assert!(img.to_vec().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let (i1, m1, _) = synth_vessel(7, 64);
        let (i2, m2, _) = synth_vessel(7, 64);
        for (a, b) in i1.to_vec().iter().zip(i2.to_vec()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(m1.to_vec(), m2.to_vec());
    }

    #[test]
    fn vessels_are_darker_than_background() {
        for seed in [1, 5, 9, 33] {
            let (img, mask, _) = synth_vessel(seed, 64);
            let id = img.to_vec();
            let md = mask.to_vec();
            let (mut vs, mut vn, mut bs, mut bn) = (0.0, 0usize, 0.0, 0usize);
            for i in 0..id.len() {
                if md[i] == 1.0 {
                    vs += id[i];
                    vn += 1;
                } else {
                    bs += id[i];
                    bn += 1;
                }
            }
            let (vm, bm) = (vs / vn as f64, bs / bn as f64);
            assert!(vm < bm, "seed {seed}: vessels not darker");
        }
    }

    #[test]
    fn sample_wrapper_is_valid() {
        let s = synth_sample(3, 64);
        s.validate().unwrap();
        // all channels equal -> green channel carries the image
        let d = s.rgb_image.data();
        assert_eq!(d[0], d[64 * 64]);
    }
}
