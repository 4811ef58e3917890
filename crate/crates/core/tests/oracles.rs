//! Independent reference implementations checked against the library.

use adapternet::autodiff::{Padding, Tape};
use adapternet::colorsim::{self, count_distinct_outputs, ImageU8, LabPixel};
use adapternet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct seven-loop convolution with explicit zero padding.
#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f64],
    [n, h, w, cin]: [usize; 4],
    wt: &[f64],
    [kh, kw, cout]: [usize; 3],
    b: &[f64],
    stride: usize,
    same: bool,
) -> (Vec<f64>, usize, usize) {
    let (oh, ow, pt, pl) = if same {
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let ph = ((oh - 1) * stride + kh).saturating_sub(h);
        let pw = ((ow - 1) * stride + kw).saturating_sub(w);
        (oh, ow, ph / 2, pw / 2)
    } else {
        ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
    };
    let mut out = vec![0.0; n * oh * ow * cout];
    for bi in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = b[co];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pt as isize;
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x[((bi * h + iy as usize) * w + ix as usize) * cin + ci]
                                    * wt[((ky * kw + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out[((bi * oh + oy) * ow + ox) * cout + co] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cases = [
        ([2, 7, 6, 3], [3, 3, 4], 1, true),
        ([1, 8, 8, 2], [3, 3, 5], 1, false),
        ([2, 9, 7, 3], [3, 3, 2], 2, true),
        ([1, 6, 6, 3], [1, 1, 3], 1, true),
        ([1, 5, 9, 1], [2, 3, 2], 2, false),
        ([3, 4, 4, 4], [2, 2, 3], 1, true),
    ];
    for (ishape, [kh, kw, cout], stride, same) in cases {
        let x = random(&ishape, &mut rng);
        let w = random(&[kh, kw, ishape[3], cout], &mut rng);
        let b = random(&[cout], &mut rng);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
        let pad = if same { Padding::Same } else { Padding::Valid };
        let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
        let (expected, oh, ow) = naive_conv(
            x.data(),
            ishape,
            w.data(),
            [kh, kw, cout],
            b.data(),
            stride,
            same,
        );
        assert_eq!(tape.shape(y), [ishape[0], oh, ow, cout]);
        for (a, e) in tape.value(y).iter().zip(&expected) {
            assert!(
                (a - e).abs() < 1e-6,
                "{ishape:?} k{kh}x{kw} s{stride}: {a} vs {e}"
            );
        }
    }
}

#[test]
fn dense_matches_matmul_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n, d, k) = (5, 7, 4);
    let (x, w, b) = (
        random(&[n, d], &mut rng),
        random(&[d, k], &mut rng),
        random(&[k], &mut rng),
    );
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
    let y = tape.dense(xv, wv, bv).unwrap();
    for i in 0..n {
        for j in 0..k {
            let e: f64 = b.data()[j]
                + (0..d)
                    .map(|t| x.data()[i * d + t] * w.data()[t * k + j])
                    .sum::<f64>();
            assert!((tape.value(y)[i * k + j] - e).abs() < 1e-12);
        }
    }
}

#[test]
fn maxpool_matches_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (n, h, w, c) = (2, 6, 4, 3);
    let x = random(&[n, h, w, c], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let y = tape.maxpool2(xv).unwrap();
    let at = |b: usize, yy: usize, xx: usize, ch: usize| x.data()[((b * h + yy) * w + xx) * c + ch];
    let mut i = 0;
    for b in 0..n {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                for ch in 0..c {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dy, dx)| at(b, 2 * oy + dy, 2 * ox + dx, ch))
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(tape.value(y)[i], m);
                    i += 1;
                }
            }
        }
    }
}

#[test]
fn cross_entropy_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (n, k) = (6, 10);
    let logits: Tensor<f64> = Tensor::from_fn(&[n, k], |_| rng.random_range(-5.0..5.0));
    let labels: Vec<usize> = (0..n).map(|i| (i * 3) % k).collect();
    let mut tape = Tape::new();
    let lv = tape.leaf(&logits);
    let loss = tape.softmax_cross_entropy(lv, &labels).unwrap();
    let expected: f64 = logits
        .data()
        .chunks(k)
        .zip(&labels)
        .map(|(row, &l)| row.iter().map(|v: &f64| v.exp()).sum::<f64>().ln() - row[l])
        .sum::<f64>()
        / n as f64;
    assert!((tape.value(loss)[0] - expected).abs() < 1e-12);
}

/// Textbook sRGB → XYZ → Lab with the tabulated D65 white, written out
/// without sharing any code with the library.
fn reference_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(|c| {
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    });
    let x = 0.4124564 * lin[0] + 0.3575761 * lin[1] + 0.1804375 * lin[2];
    let y = 0.2126729 * lin[0] + 0.7151522 * lin[1] + 0.0721750 * lin[2];
    let z = 0.0193339 * lin[0] + 0.1191920 * lin[1] + 0.9503041 * lin[2];
    let f = |t: f64| {
        if t > 216.0 / 24389.0 {
            t.cbrt()
        } else {
            (24389.0 / 27.0 * t + 16.0) / 116.0
        }
    };
    let (fx, fy, fz) = (f(x / 0.95047), f(y / 1.0), f(z / 1.08883));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

#[test]
fn lab_matches_textbook_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut worst: f64 = 0.0;
    for _ in 0..2000 {
        let rgb = [
            rng.random::<f64>(),
            rng.random::<f64>(),
            rng.random::<f64>(),
        ];
        let LabPixel { l, a, b } = colorsim::srgb_to_lab(rgb);
        let r = reference_lab(rgb);
        worst = worst
            .max((l - r[0]).abs())
            .max((a - r[1]).abs())
            .max((b - r[2]).abs());
    }
    // the tabulated white differs from the matrix-derived one in the 5th digit
    assert!(worst < 0.02, "max deviation {worst}");
}

#[test]
fn known_lab_values() {
    let red = colorsim::srgb_to_lab([1.0, 0.0, 0.0]);
    assert!(
        (red.l - 53.24).abs() < 0.05 && (red.a - 80.09).abs() < 0.1 && (red.b - 67.20).abs() < 0.1,
        "{red:?}"
    );
    let blue = colorsim::srgb_to_lab([0.0, 0.0, 1.0]);
    assert!(
        (blue.l - 32.30).abs() < 0.05
            && (blue.a - 79.19).abs() < 0.1
            && (blue.b + 107.86).abs() < 0.1,
        "{blue:?}"
    );
}

/// Exhaustive enumeration: map all 256 levels and count distinct results.
fn distinct_oracle(p: f64) -> usize {
    let outs: std::collections::BTreeSet<u8> = (0..=255u32)
        .map(|v| ((v as f64 / 255.0).powf(p) * 255.0).round() as u8)
        .collect();
    outs.len()
}

#[test]
fn distinct_output_count_matches_enumeration() {
    for p in [0.2, 0.3, 0.4, 0.5, 1.0, 2.2] {
        assert_eq!(count_distinct_outputs(p), distinct_oracle(p), "p = {p}");
    }
    assert_eq!(distinct_oracle(0.2), 120);
}

#[test]
fn power_camera_matches_per_pixel_formula() {
    let img = ImageU8::new(1, 86, (0..258).map(|v| (v % 256) as u8).collect()).unwrap();
    let out = colorsim::power_transform(&img, &Default::default());
    for (i, (&src, &dst)) in img.pixels().iter().zip(out.pixels()).enumerate() {
        let p = [0.2, 0.3, 0.4][i % 3];
        assert_eq!(dst, ((src as f64 / 255.0).powf(p) * 255.0).round() as u8);
    }
}
