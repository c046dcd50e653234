//! Procedural texture classes for desk-scale experiments.

use std::collections::BTreeMap;
use std::f32::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relcorr_core::episodic::{sample_episode, stream_seed, ClassImages, Split};
use relcorr_tensor::Tensor;

use crate::dataset::{write_dataset, Manifest};
use crate::error::Result;

pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Bars,
    Rings,
    Checker,
    Dots,
    Chevron,
}

const FAMILIES: [Family; 5] = [Family::Bars, Family::Rings, Family::Checker, Family::Dots, Family::Chevron];

/// Parameters shared by every image of one class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pattern {
    pub family: Family,
    /// Spatial period in pixels.
    pub period: f32,
    pub orientation: f32,
    pub color: [f32; 3],
}

impl Pattern {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Pattern {
            family: FAMILIES[rng.gen_range(0..FAMILIES.len())],
            period: rng.gen_range(3.0..7.0),
            orientation: rng.gen_range(0.0..PI),
            color: [rng.gen(), rng.gen(), rng.gen()],
        }
    }

    /// Texture intensity in `[0, 1]` at offset `(dy, dx)` from the patch centre.
    fn value(&self, dy: f32, dx: f32, phase: f32) -> f32 {
        let (s, c) = self.orientation.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let k = 2.0 * PI / self.period;
        match self.family {
            Family::Bars => 0.5 + 0.5 * (k * u + phase).sin(),
            Family::Rings => 0.5 + 0.5 * (k * (u * u + v * v).sqrt() + phase).sin(),
            Family::Checker => 0.5 + 0.5 * (3.0 * (k * u + phase).sin() * (k * v).sin()).tanh(),
            Family::Dots => {
                let wrap = |t: f32| t - self.period * (t / self.period).round();
                let (a, b) = (wrap(u + phase), wrap(v));
                (-(a * a + b * b) / (2.0 * (self.period / 5.0).powi(2))).exp()
            }
            Family::Chevron => 0.5 + 0.5 * (k * (u + 0.8 * v.abs()) + phase).sin(),
        }
    }
}

struct Patch {
    pattern: Pattern,
    cy: f32,
    cx: f32,
    radius: f32,
    phase: f32,
    contrast: f32,
}

impl Patch {
    fn jittered(base: &Pattern, size: f32, rng: &mut impl Rng) -> Self {
        let mut pattern = *base;
        pattern.orientation += rng.gen_range(-0.15..0.15);
        pattern.period *= rng.gen_range(0.92..1.08);
        for ch in &mut pattern.color {
            *ch = 0.5 * *ch + 0.5 * rng.gen::<f32>();
        }
        let r = size / 6.0;
        Patch {
            pattern,
            cy: size / 2.0 + rng.gen_range(-r..r),
            cx: size / 2.0 + rng.gen_range(-r..r),
            radius: rng.gen_range(0.25..0.35) * size,
            phase: rng.gen_range(0.0..2.0 * PI),
            contrast: rng.gen_range(0.6..1.0),
        }
    }

    fn clutter(size: f32, rng: &mut impl Rng) -> Self {
        Patch {
            pattern: Pattern::sample(rng),
            cy: rng.gen_range(0.0..size),
            cx: rng.gen_range(0.0..size),
            radius: rng.gen_range(0.15..0.25) * size,
            phase: rng.gen_range(0.0..2.0 * PI),
            contrast: rng.gen_range(0.4..0.9),
        }
    }

    fn paint(&self, img: &mut [f32], size: usize) {
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as f32 + 0.5 - self.cy, x as f32 + 0.5 - self.cx);
                let m = ((self.radius - (dy * dy + dx * dx).sqrt()) / 1.5).clamp(0.0, 1.0);
                if m == 0.0 {
                    continue;
                }
                let t = self.contrast * self.pattern.value(dy, dx, self.phase);
                for ch in 0..CHANNELS {
                    let p = &mut img[(y * size + x) * CHANNELS + ch];
                    let fg = 0.1 + t * self.pattern.color[ch];
                    *p = (1.0 - m) * *p + m * fg;
                }
            }
        }
    }
}

/// One `[size, size, 3]` image of the class: a jittered texture disk over clutter.
pub fn render(pattern: &Pattern, size: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let s = size as f32;
    let mut img = vec![0.0f32; size * size * CHANNELS];
    let level: f32 = rng.gen_range(0.2..0.5);
    let (gy, gx): (f32, f32) = (rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15));
    for y in 0..size {
        for x in 0..size {
            for ch in 0..CHANNELS {
                let ramp = gy * (y as f32 / s - 0.5) + gx * (x as f32 / s - 0.5);
                img[(y * size + x) * CHANNELS + ch] = level + ramp + rng.gen_range(-0.05..0.05);
            }
        }
    }
    for _ in 0..3 {
        Patch::clutter(s, rng).paint(&mut img, size);
    }
    Patch::jittered(pattern, s, rng).paint(&mut img, size);
    Tensor::new(&[size, size, CHANNELS], img).expect("shape matches buffer")
}

/// `(train, val, test)` class counts; every class lands in exactly one split.
pub fn split_counts(classes: usize) -> (usize, usize, usize) {
    let mut test = (classes * 25 + 50) / 100;
    if classes >= 2 {
        test = test.max(1);
    }
    let val = (classes * 15 + 50) / 100;
    let val = val.min(classes - test - 1);
    (classes - test - val, val, test)
}

pub fn class_pattern(seed: u64, class: usize) -> Pattern {
    Pattern::sample(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, &[0, class as u64])))
}

pub fn class_images(seed: u64, class: usize, count: usize, size: usize) -> ClassImages {
    let pattern = class_pattern(seed, class);
    let images = (0..count)
        .map(|i| render(&pattern, size, &mut ChaCha8Rng::seed_from_u64(stream_seed(seed, &[1, class as u64, i as u64]))))
        .collect();
    ClassImages { name: format!("c{class:03}"), images }
}

pub fn gen_splits(classes: usize, per_class: usize, size: usize, seed: u64) -> BTreeMap<String, Split> {
    let (train, val, _) = split_counts(classes);
    let mut splits: BTreeMap<String, Split> =
        ["train", "val", "test"].iter().map(|s| (s.to_string(), Split { classes: Vec::new() })).collect();
    for c in 0..classes {
        let name = if c < train {
            "train"
        } else if c < train + val {
            "val"
        } else {
            "test"
        };
        splits.get_mut(name).expect("fixed split names").classes.push(class_images(seed, c, per_class, size));
    }
    splits
}

/// Generates the dataset under `out` and writes `out/manifest.json`.
pub fn gen_synthetic(out: &Path, classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Manifest> {
    write_dataset(out, size, CHANNELS, &gen_splits(classes, per_class, size, seed))
}

/// Mean accuracy of nearest-prototype classification on raw pixels.
pub fn pixel_baseline(split: &Split, way: usize, shot: usize, query: usize, episodes: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for e in 0..episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(e as u64));
        let ep = sample_episode(split, way, shot, query, &mut rng)?;
        let dim = split.classes[0].images[0].numel();
        let mut protos = vec![vec![0.0f64; dim]; way];
        for it in &ep.support {
            let img = split.classes[it.class].images[it.image].data();
            for (p, &v) in protos[it.label].iter_mut().zip(img) {
                *p += v as f64 / shot as f64;
            }
        }
        let mut correct = 0;
        for it in &ep.queries {
            let img = split.classes[it.class].images[it.image].data();
            let dist = |p: &[f64]| p.iter().zip(img).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
            let best = (0..way).min_by(|&a, &b| dist(&protos[a]).total_cmp(&dist(&protos[b]))).expect("way >= 1");
            correct += usize::from(best == it.label);
        }
        total += correct as f64 / ep.queries.len() as f64;
    }
    Ok(total / episodes as f64)
}
