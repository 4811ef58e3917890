//! Procedural 32×32 ten-class image set, written in CIFAR-10 batch layout.
//!
//! Each image shows one filled shape in front of a sky-over-ground scene with
//! small occluding blobs. The class fixes the outline and a preferred hue;
//! hue, lightness, chroma, size, aspect, pose, texture and noise are all
//! jittered, so outline and color are both informative but neither is
//! sufficient on its own.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cifar::SIDE;
use crate::colorsim::{lab_to_srgb, quantize, ImageU8, LabPixel};
use crate::data::LabeledDataset;

pub const CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    /// Images for pre-training the backbone.
    pub train_size: usize,
    /// Held-out pool (the adaptation benchmark).
    pub pool_size: usize,
    /// Lab hue angle (degrees) of class 0; class c sits at
    /// `hue_offset + c * 360 / CLASSES`.
    pub hue_offset: f64,
    /// Half-width of the uniform hue jitter around the class hue.
    pub hue_jitter: f64,
    /// Probability that an object takes its class hue; otherwise the hue is
    /// uniform over the circle.
    pub hue_consistency: f64,
    pub object_chroma: [f64; 2],
    pub object_lightness: [f64; 2],
    /// Lab hue of the upper ("sky") part of the scene.
    pub sky_hue: f64,
    /// Lab hue of the lower ("ground") part of the scene.
    pub ground_hue: f64,
    /// Half-width of the jitter on both scene hues.
    pub scene_hue_jitter: f64,
    pub sky_chroma: [f64; 2],
    pub ground_chroma: [f64; 2],
    /// Per-pixel Gaussian noise, in 8-bit levels.
    pub noise: f64,
    /// Upper bound on small occluding blobs of arbitrary hue.
    pub clutter: usize,
    pub clutter_chroma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_size: 10_000,
            pool_size: 2_500,
            hue_offset: 20.0,
            hue_jitter: 30.0,
            hue_consistency: 0.5,
            object_chroma: [30.0, 60.0],
            object_lightness: [40.0, 80.0],
            sky_hue: 240.0,
            ground_hue: 75.0,
            scene_hue_jitter: 25.0,
            sky_chroma: [0.0, 12.0],
            ground_chroma: [15.0, 40.0],
            noise: 8.0,
            clutter: 4,
            clutter_chroma: 45.0,
        }
    }
}

fn lab_polar(l: f64, chroma: f64, hue_deg: f64) -> LabPixel {
    let (s, c) = hue_deg.to_radians().sin_cos();
    LabPixel {
        l,
        a: chroma * c,
        b: chroma * s,
    }
}

/// Membership test for the ten outlines, in units of the object radius.
fn inside(shape: usize, dx: f64, dy: f64, angle: f64) -> bool {
    let (s, c) = angle.sin_cos();
    let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
    let diag = std::f64::consts::FRAC_1_SQRT_2;
    let (p, q) = (diag * (u + v), diag * (v - u));
    match shape {
        0 => u * u + v * v <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.8,
        2 => v <= 0.7 && v >= -0.9 + 1.8 * u.abs(),
        3 => (0.45..=1.0).contains(&(u * u + v * v)),
        4 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        5 => (p.abs() <= 0.3 && q.abs() <= 1.0) || (q.abs() <= 0.3 && p.abs() <= 1.0),
        6 => u.abs() + v.abs() <= 1.05,
        7 => v >= -0.7 && v <= 0.9 - 1.8 * u.abs(),
        8 => (0.5..=0.9).contains(&u.abs().max(v.abs())),
        _ => u * u + v * v <= 1.0 && v <= 0.2,
    }
}

pub fn render(label: usize, rng: &mut impl Rng, cfg: &SynthConfig) -> ImageU8 {
    let shape = label;
    let hue = if rng.random_bool(cfg.hue_consistency) {
        cfg.hue_offset
            + label as f64 * 360.0 / CLASSES as f64
            + rng.random_range(-cfg.hue_jitter..=cfg.hue_jitter)
    } else {
        rng.random_range(0.0..360.0)
    };
    let object = lab_polar(
        rng.random_range(cfg.object_lightness[0]..=cfg.object_lightness[1]),
        rng.random_range(cfg.object_chroma[0]..=cfg.object_chroma[1]),
        hue,
    );
    let jitter = |rng: &mut dyn rand::RngCore| {
        rng.random_range(-cfg.scene_hue_jitter..=cfg.scene_hue_jitter)
    };
    let sky = lab_polar(
        rng.random_range(55.0..=90.0),
        rng.random_range(cfg.sky_chroma[0]..=cfg.sky_chroma[1]),
        cfg.sky_hue + jitter(rng),
    );
    let ground = lab_polar(
        rng.random_range(25.0..=60.0),
        rng.random_range(cfg.ground_chroma[0]..=cfg.ground_chroma[1]),
        cfg.ground_hue + jitter(rng),
    );
    let (horizon, tilt): (f64, f64) = (rng.random_range(8.0..=24.0), rng.random_range(-0.3..=0.3));
    let radius = rng.random_range(6.0..=12.0);
    let aspect = rng.random_range(0.75..=1.3);
    let (cx, cy) = (rng.random_range(10.0..=22.0), rng.random_range(10.0..=22.0));
    let angle = rng.random_range(-0.35..=0.35);
    // stripe texture across the object
    let (stripe_freq, stripe_phase, stripe_amp) = (
        rng.random_range(0.3..=1.2),
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..=12.0),
    );
    let clutter: Vec<(f64, f64, f64, LabPixel)> = (0..rng.random_range(0..=cfg.clutter))
        .map(|_| {
            let c = lab_polar(
                rng.random_range(20.0..=90.0),
                rng.random_range(0.0..=cfg.clutter_chroma),
                rng.random_range(0.0..360.0),
            );
            (
                rng.random_range(0.0..32.0),
                rng.random_range(0.0..32.0),
                rng.random_range(1.5..=4.0),
                c,
            )
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise / 255.0).expect("finite std");

    let mut pixels = Vec::with_capacity(SIDE * SIDE * 3);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = ((fx - cx) / (radius * aspect), (fy - cy) / (radius / aspect));
            let occluder = clutter
                .iter()
                .rev()
                .find(|(ox, oy, r, _)| (fx - ox).powi(2) + (fy - oy).powi(2) <= r * r);
            let lab = if let Some((_, _, _, c)) = occluder {
                *c
            } else if inside(shape, dx, dy, angle) {
                let t = (stripe_freq * (fx * angle.cos() + fy * angle.sin()) + stripe_phase).sin();
                LabPixel {
                    l: object.l + stripe_amp * t,
                    ..object
                }
            } else {
                // soft horizon between sky and ground
                let t = (((fy - horizon - tilt * (fx - 16.0)) / 3.0).tanh() + 1.0) / 2.0;
                let shade = 1.0 - 0.25 * (fy / SIDE as f64 - 0.5);
                LabPixel {
                    l: (sky.l * (1.0 - t) + ground.l * t) * shade,
                    a: sky.a * (1.0 - t) + ground.a * t,
                    b: sky.b * (1.0 - t) + ground.b * t,
                }
            };
            for v in lab_to_srgb(lab) {
                pixels.push(quantize(v + noise.sample(rng)));
            }
        }
    }
    ImageU8::new(SIDE, SIDE, pixels).expect("fixed geometry")
}

fn generate(n: usize, stream: u64, cfg: &SynthConfig) -> Vec<(u8, ImageU8)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    (0..n)
        .map(|i| {
            let label = i % CLASSES;
            (label as u8, render(label, &mut rng, cfg))
        })
        .collect()
}

/// (pre-training set, held-out pool), each with balanced labels in
/// round-robin order.
pub fn generate_sets(cfg: &SynthConfig) -> (LabeledDataset, LabeledDataset) {
    (
        LabeledDataset::from_records(generate(cfg.train_size, 1, cfg)),
        LabeledDataset::from_records(generate(cfg.pool_size, 2, cfg)),
    )
}

type Records = Vec<(u8, ImageU8)>;

/// Raw records for writing out as batch files.
pub fn generate_records(cfg: &SynthConfig) -> (Records, Records) {
    (
        generate(cfg.train_size, 1, cfg),
        generate(cfg.pool_size, 2, cfg),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let cfg = SynthConfig {
            train_size: 20,
            pool_size: 10,
            ..SynthConfig::default()
        };
        let (a, pa) = generate_sets(&cfg);
        let (b, _) = generate_sets(&cfg);
        assert_eq!(a, b);
        assert_eq!(pa.len(), 10);
        let mut counts = [0; CLASSES];
        a.samples()
            .iter()
            .for_each(|s| counts[s.label as usize] += 1);
        assert_eq!(counts, [2; CLASSES]);
        assert_ne!(a.samples()[0].image, pa.samples()[0].image);
    }

    #[test]
    fn every_shape_covers_pixels() {
        for shape in 0..CLASSES {
            let n = (-20..=20)
                .flat_map(|y| (-20..=20).map(move |x| (x, y)))
                .filter(|&(x, y)| inside(shape, x as f64 / 20.0, y as f64 / 20.0, 0.0))
                .count();
            assert!(n > 200, "shape {shape} covers {n}");
        }
    }
}
