//! Simulated cameras: CIELAB hue rotation and per-channel power laws.
//!
//! Both transforms take and return 8-bit RGB images, the way a camera
//! would store its output. The float path is internal and runs in f64.

use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Height × width × RGB, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageU8 {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl ImageU8 {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {height}x{width}"
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape {
                op: "image",
                dim: "pixels",
                expected: height * width * 3,
                got: pixels.len(),
            });
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(height * width * 3)
            .collect();
        Self::new(height, width, pixels).expect("non-empty image")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn to_float(&self) -> ImageF {
        ImageF {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    fn map_pixels(&self, f: impl Fn([u8; 3]) -> [u8; 3]) -> ImageU8 {
        let pixels = self
            .pixels
            .chunks_exact(3)
            .flat_map(|px| f([px[0], px[1], px[2]]))
            .collect();
        ImageU8 {
            height: self.height,
            width: self.width,
            pixels,
        }
    }
}

/// Float image, nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageF {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {height}x{width}"
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape {
                op: "image",
                dim: "pixels",
                expected: height * width * 3,
                got: pixels.len(),
            });
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Clamps to [0, 1] and quantizes to 8 bits.
    pub fn to_u8(&self) -> ImageU8 {
        ImageU8 {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&v| quantize(v as f64)).collect(),
        }
    }
}

/// `round(255·v)` with round-half-away-from-zero, clamped to [0, 255].
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabPixel {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

/// Linear sRGB (D65) to XYZ.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// Exact inverse of [`RGB_TO_XYZ`], so the conversion pair round-trips to
/// machine precision.
static XYZ_TO_RGB: LazyLock<[[f64; 3]; 3]> = LazyLock::new(|| invert3(&RGB_TO_XYZ));

/// Reference white: XYZ of RGB (1,1,1) under [`RGB_TO_XYZ`], so sRGB white
/// lands exactly on a = b = 0.
static WHITE: LazyLock<[f64; 3]> = LazyLock::new(|| mat_vec(&RGB_TO_XYZ, [1.0, 1.0, 1.0]));

const DELTA: f64 = 6.0 / 29.0;

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c = |r: usize, col: usize| {
        let (r1, r2) = ((r + 1) % 3, (r + 2) % 3);
        let (c1, c2) = ((col + 1) % 3, (col + 2) % 3);
        m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]
    };
    let det: f64 = (0..3).map(|j| m[0][j] * c(0, j)).sum();
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = c(j, i) / det;
        }
    }
    inv
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    m.map(|row| row[0] * v[0] + row[1] * v[1] + row[2] * v[2])
}

/// sRGB transfer function inverse (encoded → linear).
pub fn srgb_decode(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn srgb_encode(v: f64) -> f64 {
    if v <= 0.0031308 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA.powi(3) {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t.powi(3)
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

static DECODE_U8: LazyLock<[f64; 256]> =
    LazyLock::new(|| std::array::from_fn(|v| srgb_decode(v as f64 / 255.0)));

fn linear_to_lab(lin: [f64; 3]) -> LabPixel {
    let xyz = mat_vec(&RGB_TO_XYZ, lin);
    let w = *WHITE;
    let (fx, fy, fz) = (
        lab_f(xyz[0] / w[0]),
        lab_f(xyz[1] / w[1]),
        lab_f(xyz[2] / w[2]),
    );
    LabPixel {
        l: 116.0 * fy - 16.0,
        a: 500.0 * (fx - fy),
        b: 200.0 * (fy - fz),
    }
}

fn lab_to_linear(lab: LabPixel) -> [f64; 3] {
    let fy = (lab.l + 16.0) / 116.0;
    let fx = fy + lab.a / 500.0;
    let fz = fy - lab.b / 200.0;
    let w = *WHITE;
    let xyz = [
        w[0] * lab_f_inv(fx),
        w[1] * lab_f_inv(fy),
        w[2] * lab_f_inv(fz),
    ];
    mat_vec(&XYZ_TO_RGB, xyz)
}

/// Encoded sRGB in [0, 1] to CIELAB (D65).
pub fn srgb_to_lab(rgb: [f64; 3]) -> LabPixel {
    linear_to_lab(rgb.map(srgb_decode))
}

/// CIELAB to encoded sRGB, trimming out-of-gamut values to [0, 1].
pub fn lab_to_srgb(lab: LabPixel) -> [f64; 3] {
    lab_to_srgb_unclamped(lab).map(|v| v.clamp(0.0, 1.0))
}

/// Like [`lab_to_srgb`] but without trimming; the result may leave [0, 1].
pub fn lab_to_srgb_unclamped(lab: LabPixel) -> [f64; 3] {
    lab_to_linear(lab).map(|v| {
        if v < 0.0 {
            -srgb_encode(-v)
        } else {
            srgb_encode(v)
        }
    })
}

/// Rotates the (a, b) chroma vector counterclockwise by `theta_deg`; L is untouched.
pub fn rotate_ab(lab: LabPixel, theta_deg: f64) -> LabPixel {
    let (s, c) = theta_deg.to_radians().sin_cos();
    LabPixel {
        l: lab.l,
        a: c * lab.a - s * lab.b,
        b: s * lab.a + c * lab.b,
    }
}

/// Rotates one pixel's hue; the flag reports whether any channel had to be
/// trimmed back into range.
pub fn color_rotate_pixel(px: [u8; 3], theta_deg: f64) -> ([u8; 3], bool) {
    let lab = linear_to_lab(px.map(|v| DECODE_U8[v as usize]));
    let rgb = lab_to_srgb_unclamped(rotate_ab(lab, theta_deg));
    let clipped = rgb.iter().any(|&v| !(0.0..=1.0).contains(&v));
    (rgb.map(quantize), clipped)
}

/// The color-rotation camera: u8 → [0,1] → Lab → rotate → sRGB (trimmed) → u8.
pub fn color_rotate_image(img: &ImageU8, theta_deg: f64) -> ImageU8 {
    img.map_pixels(|px| color_rotate_pixel(px, theta_deg).0)
}

/// Per-channel exponents of the power-law camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerParams {
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl Default for PowerParams {
    fn default() -> Self {
        Self {
            r: 0.2,
            g: 0.3,
            b: 0.4,
        }
    }
}

impl PowerParams {
    pub fn new(r: f64, g: f64, b: f64) -> Result<Self> {
        for p in [r, g, b] {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "power exponent must be positive, got {p}"
                )));
            }
        }
        Ok(Self { r, g, b })
    }

    fn table(p: f64) -> [u8; 256] {
        std::array::from_fn(|v| quantize((v as f64 / 255.0).powf(p)))
    }
}

/// The power-law camera: `v' = round(255·(v/255)^p)` per channel.
pub fn power_transform(img: &ImageU8, params: &PowerParams) -> ImageU8 {
    let luts = [
        PowerParams::table(params.r),
        PowerParams::table(params.g),
        PowerParams::table(params.b),
    ];
    img.map_pixels(|px| {
        [
            luts[0][px[0] as usize],
            luts[1][px[1] as usize],
            luts[2][px[2] as usize],
        ]
    })
}

/// Number of distinct 8-bit outputs of the power law with exponent `p`.
pub fn count_distinct_outputs(p: f64) -> usize {
    let mut seen = [false; 256];
    for v in PowerParams::table(p) {
        seen[v as usize] = true;
    }
    seen.iter().filter(|&&s| s).count()
}

/// A deterministic image transform standing in for an acquisition device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Camera {
    Clean,
    ColorRotation { theta: f64 },
    Power { exponents: [f64; 3] },
}

impl Camera {
    pub fn apply(&self, img: &ImageU8) -> ImageU8 {
        match *self {
            Camera::Clean => img.clone(),
            Camera::ColorRotation { theta } => color_rotate_image(img, theta),
            Camera::Power {
                exponents: [r, g, b],
            } => power_transform(img, &PowerParams { r, g, b }),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Camera::Clean => "clean".into(),
            Camera::ColorRotation { theta } => format!("color_rotation({theta})"),
            Camera::Power {
                exponents: [r, g, b],
            } => format!("power({r},{g},{b})"),
        }
    }
}
