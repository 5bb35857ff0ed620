//! sRGB <-> CIE L*a*b* conversion (D65, 2° observer) and CIE76 distances.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

// sRGB primaries -> XYZ (D65). The reference white is taken as the row sums
// so that (255, 255, 255) lands exactly on L=100, a=b=0.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.240_454_2, -1.537_138_5, -0.498_531_4],
    [-0.969_266_0, 1.876_010_8, 0.041_556_0],
    [0.055_643_4, -0.204_025_9, 1.057_225_2],
];

const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

fn white_point() -> [f64; 3] {
    let mut w = [0.0; 3];
    for (i, row) in RGB_TO_XYZ.iter().enumerate() {
        w[i] = row.iter().sum();
    }
    w
}

/// An 8-bit sRGB color.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct RgbColor {
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl RgbColor {
    pub const fn new(r: u8, g: u8, b: u8) -> Self {
        Self { r, g, b }
    }

    pub fn to_lab(self) -> LabColor {
        srgb_to_lab(self)
    }

    /// Uppercase `#RRGGBB`.
    pub fn to_hex(self) -> String {
        format!("#{:02X}{:02X}{:02X}", self.r, self.g, self.b)
    }

    pub fn channels(self) -> [u8; 3] {
        [self.r, self.g, self.b]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid hex color {0:?}, expected #RRGGBB")]
pub struct ParseColorError(pub String);

impl FromStr for RgbColor {
    type Err = ParseColorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseColorError(s.to_string());
        let digits = s.strip_prefix('#').ok_or_else(err)?;
        if digits.len() != 6 || !digits.is_ascii() {
            return Err(err());
        }
        let channel = |i: usize| u8::from_str_radix(&digits[i..i + 2], 16).map_err(|_| err());
        Ok(Self::new(channel(0)?, channel(2)?, channel(4)?))
    }
}

impl fmt::Display for RgbColor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for RgbColor {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for RgbColor {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A CIE 1976 L*a*b* color under D65.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LabColor {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl LabColor {
    pub const fn new(l: f64, a: f64, b: f64) -> Self {
        Self { l, a, b }
    }

    pub fn to_rgb(self) -> RgbColor {
        lab_to_srgb(self)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.l, self.a, self.b]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

impl std::ops::Add for LabColor {
    type Output = LabColor;
    fn add(self, o: LabColor) -> LabColor {
        LabColor::new(self.l + o.l, self.a + o.a, self.b + o.b)
    }
}

impl std::ops::Sub for LabColor {
    type Output = LabColor;
    fn sub(self, o: LabColor) -> LabColor {
        LabColor::new(self.l - o.l, self.a - o.a, self.b - o.b)
    }
}

impl std::ops::Mul<f64> for LabColor {
    type Output = LabColor;
    fn mul(self, s: f64) -> LabColor {
        LabColor::new(self.l * s, self.a * s, self.b * s)
    }
}

fn srgb_to_linear(c: u8) -> f64 {
    let c = f64::from(c) / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> u8 {
    let c = c.clamp(0.0, 1.0);
    let v = if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    };
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    let t3 = t * t * t;
    if t3 > EPSILON {
        t3
    } else {
        (116.0 * t - 16.0) / KAPPA
    }
}

pub fn srgb_to_lab(c: RgbColor) -> LabColor {
    let lin = [srgb_to_linear(c.r), srgb_to_linear(c.g), srgb_to_linear(c.b)];
    let white = white_point();
    let mut f = [0.0; 3];
    for i in 0..3 {
        let xyz: f64 = (0..3).map(|j| RGB_TO_XYZ[i][j] * lin[j]).sum();
        f[i] = lab_f(xyz / white[i]);
    }
    LabColor::new(116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2]))
}

/// Inverse of [`srgb_to_lab`]; out-of-gamut channels are clamped.
pub fn lab_to_srgb(c: LabColor) -> RgbColor {
    let fy = (c.l + 16.0) / 116.0;
    let fx = fy + c.a / 500.0;
    let fz = fy - c.b / 200.0;
    let yr = if c.l > KAPPA * EPSILON {
        fy * fy * fy
    } else {
        c.l / KAPPA
    };
    let white = white_point();
    let xyz = [lab_f_inv(fx) * white[0], yr * white[1], lab_f_inv(fz) * white[2]];
    let mut out = [0u8; 3];
    for (i, row) in XYZ_TO_RGB.iter().enumerate() {
        let lin: f64 = row.iter().zip(xyz.iter()).map(|(m, v)| m * v).sum();
        out[i] = linear_to_srgb(lin);
    }
    RgbColor::new(out[0], out[1], out[2])
}

/// CIE76 color difference.
pub fn delta_e(x: LabColor, y: LabColor) -> f64 {
    let d = x - y;
    (d.l * d.l + d.a * d.a + d.b * d.b).sqrt()
}
