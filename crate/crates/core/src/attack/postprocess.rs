//! Image-domain distortions an attacker can apply to returned marks.
//!
//! Every operation works plane by plane on `[N, C, H, W]` tensors, clips its
//! input to `[0, 1]` first and never produces values outside `[0, 1]`.

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard luminance quantization table (ITU-T T.81, Annex K), row-major.
const LUMA_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// One configured distortion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PostProcess {
    Jpeg { quality: u8 },
    Noise { level_db: f64 },
    Lattice { step: usize },
}

impl fmt::Display for PostProcess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PostProcess::Jpeg { quality } => write!(f, "jpeg(q={quality})"),
            PostProcess::Noise { level_db } => write!(f, "noise({level_db} dB)"),
            PostProcess::Lattice { step } => write!(f, "lattice(step={step})"),
        }
    }
}

impl PostProcess {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PostProcess::Jpeg { quality } if !(1..=100).contains(&quality) => {
                Err(Error::invalid(format!("jpeg quality {quality} outside 1..=100")))
            }
            PostProcess::Noise { level_db } if !level_db.is_finite() => {
                Err(Error::invalid(format!("noise level {level_db} dB is not finite")))
            }
            PostProcess::Lattice { step } if step < 1 => Err(Error::invalid("lattice step must be at least 1")),
            _ => Ok(()),
        }
    }

    pub fn apply(&self, image: &Tensor, seed: u64) -> Result<Tensor> {
        match *self {
            PostProcess::Jpeg { quality } => jpeg_proxy(image, quality),
            PostProcess::Noise { level_db } => add_awgn(image, level_db, seed),
            PostProcess::Lattice { step } => lattice_attack(image, step, seed),
        }
    }
}

fn planes(image: &Tensor) -> Result<(usize, usize, usize)> {
    let [n, c, h, w] = image.dims4()?;
    Ok((n * c, h, w))
}

fn clip01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

/// Orthonormal 8-point DCT-II basis, `basis[k][x]`.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (k, row) in b.iter_mut().enumerate() {
        let scale = if k == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = scale * ((2 * x + 1) as f64 * k as f64 * PI / 16.0).cos();
        }
    }
    b
}

/// Quantizer steps for a quality factor, with the usual libjpeg scaling.
pub fn quant_table(quality: u8) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::invalid(format!("jpeg quality {quality} outside 1..=100")));
    }
    let q = quality as u32;
    let s = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut t = [0.0; 64];
    for (out, &base) in t.iter_mut().zip(&LUMA_QUANT) {
        *out = ((base as u32 * s + 50) / 100).clamp(1, 255) as f64;
    }
    Ok(t)
}

fn reflect(i: isize, n: usize) -> usize {
    // symmetric reflection without edge repeat: -1 -> 1, n -> n - 2
    let n = n as isize;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

/// Block-DCT codec round trip: 8×8 DCT-II, quantize with the scaled
/// luminance table, dequantize, inverse DCT. Sizes that are not multiples
/// of 8 are reflect-padded and cropped back.
pub fn jpeg_proxy(image: &Tensor, quality: u8) -> Result<Tensor> {
    let table = quant_table(quality)?;
    let (np, h, w) = planes(image)?;
    let (ph, pw) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let basis = dct_basis();
    let mut out = image.data().to_vec();

    for p in 0..np {
        let src = &image.data()[p * h * w..(p + 1) * h * w];
        // level-shifted samples on the 0..255 scale
        let mut padded = vec![0.0f64; ph * pw];
        for y in 0..ph {
            for x in 0..pw {
                let (sy, sx) = (reflect(y as isize, h), reflect(x as isize, w));
                padded[y * pw + x] = clip01(src[sy * w + sx]) as f64 * 255.0 - 128.0;
            }
        }
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                let mut block = [0.0f64; 64];
                for y in 0..8 {
                    for x in 0..8 {
                        block[y * 8 + x] = padded[(by + y) * pw + bx + x];
                    }
                }
                // forward: C = B X Bᵀ
                let mut tmp = [0.0f64; 64];
                for k in 0..8 {
                    for x in 0..8 {
                        tmp[k * 8 + x] = (0..8).map(|y| basis[k][y] * block[y * 8 + x]).sum();
                    }
                }
                let mut coef = [0.0f64; 64];
                for k in 0..8 {
                    for l in 0..8 {
                        coef[k * 8 + l] = (0..8).map(|x| tmp[k * 8 + x] * basis[l][x]).sum();
                    }
                }
                for (c, q) in coef.iter_mut().zip(&table) {
                    *c = (*c / q).round() * q;
                }
                // inverse: X = Bᵀ C B
                for y in 0..8 {
                    for l in 0..8 {
                        tmp[y * 8 + l] = (0..8).map(|k| basis[k][y] * coef[k * 8 + l]).sum();
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let v: f64 = (0..8).map(|l| tmp[y * 8 + l] * basis[l][x]).sum();
                        block[y * 8 + x] = v;
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        padded[(by + y) * pw + bx + x] = block[y * 8 + x];
                    }
                }
            }
        }
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = clip01(((padded[y * pw + x] + 128.0) / 255.0) as f32);
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Adds i.i.d. Gaussian noise with `σ = 10^(-level_db / 20)` and clips.
pub fn add_awgn(image: &Tensor, level_db: f64, seed: u64) -> Result<Tensor> {
    if !level_db.is_finite() {
        return Err(Error::invalid(format!("noise level {level_db} dB is not finite")));
    }
    let sigma = 10f64.powf(-level_db / 20.0);
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = image
        .data()
        .iter()
        .map(|&v| clip01((clip01(v) as f64 + normal.sample(&mut rng)) as f32))
        .collect();
    Tensor::new(image.shape().to_vec(), data)
}

/// Replaces every pixel whose in-plane row-major index `i` satisfies
/// `i % (step + 1) == 0` by a uniform value in `[0, 1]`.
pub fn lattice_attack(image: &Tensor, step: usize, seed: u64) -> Result<Tensor> {
    if step < 1 {
        return Err(Error::invalid("lattice step must be at least 1"));
    }
    let (_, h, w) = planes(image)?;
    let plane = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if (i % plane) % (step + 1) == 0 {
                rng.random_range(0.0..=1.0)
            } else {
                clip01(v)
            }
        })
        .collect();
    Tensor::new(image.shape().to_vec(), data)
}
