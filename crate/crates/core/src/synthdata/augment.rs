use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::tensor::kernels::bilinear_taps;
use crate::VOID;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_min: 0.5,
            scale_max: 2.0,
            flip_probability: 0.5,
        }
    }
}

/// One draw of the augmentation pipeline: scale, crop window, flip.
///
/// When a scaled extent is smaller than the crop, the scaled content sits at
/// the top-left of the window and the remainder is padded (void labels,
/// zero pixels, zero for float maps).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scaled_h: usize,
    pub scaled_w: usize,
    pub crop: usize,
    pub offset_y: usize,
    pub offset_x: usize,
    pub flip: bool,
}

impl AugmentParams {
    /// Draws parameters for an `h x w` input. The draw order is fixed
    /// (scale, row offset, column offset, flip) regardless of branch.
    pub fn draw(config: &AugmentConfig, h: usize, w: usize, crop: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = if config.scale_max > config.scale_min {
            rng.gen_range(config.scale_min..=config.scale_max)
        } else {
            config.scale_min
        };
        let oy: f64 = rng.gen();
        let ox: f64 = rng.gen();
        let flip = rng.gen_bool(config.flip_probability.clamp(0.0, 1.0));
        let scaled_h = ((h as f64 * scale).round() as usize).max(1);
        let scaled_w = ((w as f64 * scale).round() as usize).max(1);
        let pick = |extent: usize, u: f64| {
            if extent > crop {
                ((u * (extent - crop + 1) as f64) as usize).min(extent - crop)
            } else {
                0
            }
        };
        AugmentParams {
            scaled_h,
            scaled_w,
            crop,
            offset_y: pick(scaled_h, oy),
            offset_x: pick(scaled_w, ox),
            flip,
        }
    }

    fn window<T: Copy>(&self, scaled: &[T], channels: usize, fill: T) -> Vec<T> {
        let c = self.crop;
        let mut out = vec![fill; c * c * channels];
        for y in 0..c {
            let sy = y + self.offset_y;
            if sy >= self.scaled_h {
                break;
            }
            for x in 0..c {
                let sx = x + self.offset_x;
                if sx >= self.scaled_w {
                    break;
                }
                let dx = if self.flip { c - 1 - x } else { x };
                let src = (sy * self.scaled_w + sx) * channels;
                let dst = (y * c + dx) * channels;
                out[dst..dst + channels].copy_from_slice(&scaled[src..src + channels]);
            }
        }
        out
    }

    /// Interleaved `h x w x channels` image, bilinear scaling.
    pub fn apply_image(&self, image: &[f32], h: usize, w: usize, channels: usize) -> Vec<f32> {
        let scaled = resize_bilinear(image, h, w, channels, self.scaled_h, self.scaled_w);
        self.window(&scaled, channels, 0.0)
    }

    /// Label map, nearest-neighbor scaling.
    pub fn apply_labels(&self, labels: &[u8], h: usize, w: usize) -> Vec<u8> {
        let scaled = resize_nearest(labels, h, w, self.scaled_h, self.scaled_w);
        self.window(&scaled, 1, VOID)
    }

    /// Per-pixel float map (e.g. teacher uncertainty), nearest-neighbor
    /// scaling so it stays aligned with the labels.
    pub fn apply_map(&self, map: &[f32], h: usize, w: usize) -> Vec<f32> {
        let scaled = resize_nearest(map, h, w, self.scaled_h, self.scaled_w);
        self.window(&scaled, 1, 0.0)
    }
}

/// Half-pixel bilinear resize of an interleaved image.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, channels: usize, oh: usize, ow: usize) -> Vec<f32> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; oh * ow * channels];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        let fy = fy as f32;
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let fx = fx as f32;
            for c in 0..channels {
                let at = |y: usize, x: usize| src[(y * w + x) * channels + c];
                out[(oy * ow + ox) * channels + c] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                    + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
            }
        }
    }
    out
}

/// Nearest-neighbor resize: output `o` reads source `floor((o + 0.5) * in / out)`.
pub fn resize_nearest<T: Copy>(src: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let pick = |o: usize, len: usize, out: usize| (((o as f64 + 0.5) * len as f64 / out as f64) as usize).min(len - 1);
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let sy = pick(oy, h, oh);
        for ox in 0..ow {
            out.push(src[sy * w + pick(ox, w, ow)]);
        }
    }
    out
}

/// Scale, crop and flip with the default pipeline settings.
pub fn augment(sample: &Sample, seed: u64, crop: usize) -> Sample {
    augment_with(sample, seed, crop, &AugmentConfig::default()).0
}

/// [`augment`] with explicit settings; also returns the drawn parameters so
/// aligned maps can be transformed identically.
pub fn augment_with(sample: &Sample, seed: u64, crop: usize, config: &AugmentConfig) -> (Sample, AugmentParams) {
    let p = AugmentParams::draw(config, sample.height, sample.width, crop, seed);
    let out = Sample {
        id: sample.id.clone(),
        height: crop,
        width: crop,
        image: p.apply_image(&sample.image, sample.height, sample.width, 3),
        labels: p.apply_labels(&sample.labels, sample.height, sample.width),
    };
    (out, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scene, SceneConfig};
    use proptest::prelude::*;

    fn fixed(scale: f64, flip: f64) -> AugmentConfig {
        AugmentConfig {
            scale_min: scale,
            scale_max: scale,
            flip_probability: flip,
        }
    }

    #[test]
    fn unit_scale_no_flip_full_crop_is_identity() {
        let s = generate_scene(&SceneConfig::with_classes(48, 4), 3).unwrap();
        let (out, _) = augment_with(&s, 99, 48, &fixed(1.0, 0.0));
        assert_eq!(out, s);
    }

    #[test]
    fn double_flip_is_identity() {
        let s = generate_scene(&SceneConfig::with_classes(40, 4), 5).unwrap();
        let once = augment_with(&s, 1, 40, &fixed(1.0, 1.0)).0;
        assert_ne!(once, s);
        let twice = augment_with(&once, 2, 40, &fixed(1.0, 1.0)).0;
        assert_eq!(twice, s);
    }

    #[test]
    fn upscale_crop_uses_nearest_labels() {
        // 4x4 toy map scaled by 2 becomes 2x2 blocks; any 4x4 window reads
        // toy[(y0 + i) / 2][(x0 + j) / 2].
        let toy: Vec<u8> = (0..16).map(|i| i as u8).collect();
        let sample = Sample {
            id: "toy".into(),
            height: 4,
            width: 4,
            image: vec![0.5; 48],
            labels: toy.clone(),
        };
        for seed in 0..20 {
            let (out, p) = augment_with(&sample, seed, 4, &fixed(2.0, 0.0));
            assert_eq!((p.scaled_h, p.scaled_w), (8, 8));
            for i in 0..4 {
                for j in 0..4 {
                    let expect = toy[((p.offset_y + i) / 2) * 4 + (p.offset_x + j) / 2];
                    assert_eq!(out.labels[i * 4 + j], expect);
                }
            }
        }
    }

    #[test]
    fn scale_two_on_32_keeps_crop_extent() {
        let s = generate_scene(&SceneConfig::with_classes(32, 4), 8).unwrap();
        let (out, p) = augment_with(&s, 4, 32, &fixed(2.0, 0.5));
        assert_eq!((out.height, out.width, out.labels.len(), out.image.len()), (32, 32, 1024, 3072));
        let up = resize_nearest(&s.labels, 32, 32, 64, 64);
        for y in 0..32 {
            for x in 0..32 {
                let sx = if p.flip { 31 - x } else { x };
                assert_eq!(out.labels[y * 32 + x], up[(y + p.offset_y) * 64 + sx + p.offset_x]);
            }
        }
    }

    #[test]
    fn small_scale_pads_with_void_and_zero() {
        let s = generate_scene(&SceneConfig::with_classes(32, 4), 8).unwrap();
        let (out, p) = augment_with(&s, 4, 32, &fixed(0.5, 0.0));
        assert_eq!((p.scaled_h, p.offset_y, p.offset_x), (16, 0, 0));
        assert_eq!(out.labels[31 * 32 + 31], VOID);
        assert_eq!(out.labels[20], VOID);
        assert_eq!(&out.image[(31 * 32 + 31) * 3..], &[0.0, 0.0, 0.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn augmentation_never_invents_labels(scene_seed in 0u64..1000, aug_seed in any::<u64>()) {
            let s = generate_scene(&SceneConfig::with_classes(48, 5), scene_seed).unwrap();
            let out = augment(&s, aug_seed, 32);
            let mut allowed = s.label_set();
            allowed.insert(VOID);
            prop_assert!(out.label_set().is_subset(&allowed));
        }

        #[test]
        fn augmentation_is_deterministic(seed in any::<u64>()) {
            let s = generate_scene(&SceneConfig::with_classes(40, 4), 1).unwrap();
            prop_assert_eq!(augment(&s, seed, 24), augment(&s, seed, 24));
        }
    }
}
