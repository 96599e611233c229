//! Procedural image pairs `(X0, X)` standing in for a host image-to-image
//! model, plus watermark bitmaps.
//!
//! The host model is the exact procedural mapping `X0 -> X`: rain removal for
//! [`Task::Derain`] and a tone/edge stylization for [`Task::Style`].

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_IMAGE_SIZE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Derain,
    Style,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "derain" => Ok(Task::Derain),
            "style" => Ok(Task::Style),
            other => Err(Error::invalid(format!("unknown task `{other}`"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Derain => "derain",
            Task::Style => "style",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WatermarkPattern {
    Logo,
    Checker,
}

impl FromStr for WatermarkPattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logo" => Ok(WatermarkPattern::Logo),
            "checker" => Ok(WatermarkPattern::Checker),
            other => Err(Error::invalid(format!("unknown watermark pattern `{other}`"))),
        }
    }
}

/// A degraded/source image and its processed target, each `[1, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub seed: u64,
    pub x0: Tensor,
    pub x: Tensor,
}

/// Copyright mark `w` (binary) and the all-ones null mark `w0`.
#[derive(Clone, Debug, PartialEq)]
pub struct WatermarkSpec {
    pub pattern: WatermarkPattern,
    pub w: Tensor,
    pub w0: Tensor,
}

fn check_size(size: usize) -> Result<()> {
    if size < MIN_IMAGE_SIZE {
        return Err(Error::invalid(format!("image size {size} < {MIN_IMAGE_SIZE}")));
    }
    Ok(())
}

fn image(size: usize, data: Vec<f32>) -> Tensor {
    Tensor::new(vec![1, 1, size, size], data).expect("square image")
}

/// Smooth random field: four random-frequency cosines plus two soft-edged
/// rectangles, min-max normalized to `[0, 1]`.
pub fn gen_base_image(seed: u64, size: usize) -> Result<Tensor> {
    check_size(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size as f64;
    let mut field = vec![0.0f64; size * size];

    for _ in 0..4 {
        let fx = rng.random_range(-4.0..4.0);
        let fy = rng.random_range(-4.0..4.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp = rng.random_range(0.3..1.0);
        for y in 0..size {
            for x in 0..size {
                let arg = 2.0 * PI * (fx * x as f64 + fy * y as f64) / n + phase;
                field[y * size + x] += amp * arg.cos();
            }
        }
    }

    for _ in 0..2 {
        let (x0, y0) = (rng.random_range(0.0..n * 0.7), rng.random_range(0.0..n * 0.7));
        let (x1, y1) = (
            x0 + rng.random_range(n * 0.15..n * 0.5),
            y0 + rng.random_range(n * 0.15..n * 0.5),
        );
        let amp = rng.random_range(0.5..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let soft = 1.5;
        let step = |t: f64| 1.0 / (1.0 + (-t / soft).exp());
        for y in 0..size {
            for x in 0..size {
                let (xf, yf) = (x as f64, y as f64);
                let inside = step(xf - x0) * step(x1 - xf) * step(yf - y0) * step(y1 - yf);
                field[y * size + x] += amp * inside;
            }
        }
    }

    let (lo, hi) = field.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let range = hi - lo;
    let data = field
        .iter()
        .map(|&v| if range > 0.0 { ((v - lo) / range) as f32 } else { 0.5 })
        .collect();
    Ok(image(size, data))
}

/// Additive rain layer: 8–16 one-pixel diagonal streaks with intensity in
/// `[0.3, 0.6]`, all leaning the same way.
fn rain_layer(rng: &mut ChaCha8Rng, size: usize) -> Vec<f32> {
    let mut rain = vec![0.0f32; size * size];
    let streaks = rng.random_range(8..=16);
    let lean: isize = if rng.random_bool(0.5) { 1 } else { -1 };
    for _ in 0..streaks {
        let intensity = rng.random_range(0.3f32..=0.6);
        let len = rng.random_range(size / 5..=size / 2);
        let mut x = rng.random_range(0..size) as isize;
        let y0 = rng.random_range(0..size) as isize;
        for y in y0..y0 + len as isize {
            if x < 0 || x >= size as isize || y >= size as isize {
                break;
            }
            let i = y as usize * size + x as usize;
            rain[i] = rain[i].max(intensity);
            x += lean;
        }
    }
    rain
}

pub fn gen_rain_pair(seed: u64, size: usize) -> Result<ImagePair> {
    let x = gen_base_image(seed, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_696e);
    let rain = rain_layer(&mut rng, size);
    let x0 = x
        .data()
        .iter()
        .zip(&rain)
        .map(|(&v, &r)| if r > 0.0 { (v + r).min(1.0) } else { v })
        .collect();
    Ok(ImagePair {
        seed,
        x0: image(size, x0),
        x,
    })
}

/// `0.7 * v^0.45 + 0.3 * edges`, where edges is the max-normalized
/// central-difference gradient magnitude.
pub fn stylize(src: &Tensor) -> Result<Tensor> {
    let [_, _, h, w] = src.dims4()?;
    let v = src.data();
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        v[y * w + x] as f64
    };
    let mut mag = vec![0.0f64; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y, x + 1) - at(y, x - 1)) / 2.0;
            let gy = (at(y + 1, x) - at(y - 1, x)) / 2.0;
            mag[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    let peak = mag.iter().cloned().fold(0.0, f64::max);
    let data = v
        .iter()
        .zip(&mag)
        .map(|(&p, &m)| {
            let edge = if peak > 0.0 { m / peak } else { 0.0 };
            (0.7 * (p as f64).powf(0.45) + 0.3 * edge).clamp(0.0, 1.0) as f32
        })
        .collect();
    Tensor::new(src.shape().to_vec(), data)
}

pub fn gen_style_pair(seed: u64, size: usize) -> Result<ImagePair> {
    let x0 = gen_base_image(seed, size)?;
    let x = stylize(&x0)?;
    Ok(ImagePair { seed, x0, x })
}

pub fn gen_pair(task: Task, seed: u64, size: usize) -> Result<ImagePair> {
    match task {
        Task::Derain => gen_rain_pair(seed, size),
        Task::Style => gen_style_pair(seed, size),
    }
}

/// Diamond outline; `#` is ink (0), `.` is paper (1). A quarter of the cells are ink.
const LOGO: [&str; 8] = [
    "...##...", "..#..#..", ".#....#.", "#......#", "#......#", ".#....#.", "..#..#..", "...##...",
];

pub fn gen_watermark(size: usize, pattern: WatermarkPattern) -> Result<WatermarkSpec> {
    check_size(size)?;
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let v = match pattern {
                WatermarkPattern::Logo => {
                    let row = LOGO[y * 8 / size].as_bytes();
                    if row[x * 8 / size] == b'#' {
                        0.0
                    } else {
                        1.0
                    }
                }
                WatermarkPattern::Checker => ((y / 4 + x / 4) % 2) as f32,
            };
            data.push(v);
        }
    }
    Ok(WatermarkSpec {
        pattern,
        w: image(size, data),
        w0: Tensor::ones(vec![1, 1, size, size]),
    })
}

/// Victim / attacker / held-out partition of generated pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub size: usize,
    pub victim: Vec<ImagePair>,
    pub attacker: Vec<ImagePair>,
    pub eval: Vec<ImagePair>,
}

/// Sizes of the victim / attacker / eval splits: `floor(0.45 c)` twice, rest to eval.
pub fn split_sizes(count: usize) -> (usize, usize, usize) {
    let part = count * 45 / 100;
    (part, part, count - 2 * part)
}

/// Pair `i` of a dataset gets seed `base + i`; splits take consecutive index
/// ranges, so no seed appears in two splits.
pub fn make_dataset(task: Task, count: usize, seed: u64, size: usize) -> Result<Dataset> {
    if count < 3 {
        return Err(Error::invalid(format!("dataset count {count} < 3")));
    }
    check_size(size)?;
    let base = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let pairs = (0..count as u64)
        .map(|i| gen_pair(task, base.wrapping_add(i), size))
        .collect::<Result<Vec<_>>>()?;
    let (nv, na, _) = split_sizes(count);
    let mut it = pairs.into_iter();
    let victim = it.by_ref().take(nv).collect();
    let attacker = it.by_ref().take(na).collect();
    let eval = it.collect();
    Ok(Dataset {
        task,
        size,
        victim,
        attacker,
        eval,
    })
}
