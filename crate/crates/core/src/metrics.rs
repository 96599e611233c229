//! Image quality and watermark-extraction metrics. Images are on the `[0, 1]` scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// PSNR reported for (near-)identical inputs.
pub const PSNR_CAP_DB: f64 = 99.0;
/// Watermark-present decision threshold on NC.
pub const NC_THRESHOLD: f64 = 0.96;
pub const MS_SSIM_SCALES: usize = 3;

const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_WINDOW: usize = 7;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// One row of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub name: String,
    pub psnr_db: f64,
    pub ms_ssim: f64,
    pub nc: f64,
    pub sr: f64,
    pub context: serde_json::Value,
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("mse", a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(s / a.numel().max(1) as f64)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

/// Normalized cross-correlation without mean subtraction.
///
/// Returns 0 when exactly one input is all-zero; both all-zero is undefined.
pub fn nc<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("nc", a, b)?;
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.as_f64(), y.as_f64());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    match (aa == 0.0, bb == 0.0) {
        (true, true) => Err(Error::invalid("nc of two all-zero images is undefined")),
        (true, false) | (false, true) => Ok(0.0),
        _ => Ok(ab / (aa * bb).sqrt()),
    }
}

/// Fraction of samples along the batch axis whose NC with `w` exceeds `threshold`.
pub fn success_rate(decoded: &Tensor, w: &Tensor, threshold: f64) -> Result<f64> {
    let n = decoded.batch_len();
    if decoded.numel() == 0 || n == 0 {
        return Err(Error::invalid("success rate of an empty batch"));
    }
    let mut hits = 0;
    for i in 0..n {
        let s = decoded.sample(i)?;
        let s = s.reshape(w.shape().to_vec())?;
        if nc(&s, w)? > threshold {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Mean NC of each batch entry with `w`.
pub fn mean_nc(batch: &Tensor, w: &Tensor) -> Result<f64> {
    let n = batch.batch_len();
    let mut total = 0.0;
    for i in 0..n {
        total += nc(&batch.sample(i)?.reshape(w.shape().to_vec())?, w)?;
    }
    Ok(total / n as f64)
}

/// Mean PSNR over matching batch entries.
pub fn mean_psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("mean_psnr", a, b)?;
    let n = a.batch_len();
    let mut total = 0.0;
    for i in 0..n {
        total += psnr(&a.sample(i)?, &b.sample(i)?)?;
    }
    Ok(total / n as f64)
}

struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn downsample(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * self.w + 2 * x;
                v.push((self.v[i] + self.v[i + 1] + self.v[i + self.w] + self.v[i + self.w + 1]) / 4.0);
            }
        }
        Plane { h, w, v }
    }

    /// Valid-mode separable Gaussian filter.
    fn blur(&self, k: &[f64]) -> Plane {
        let r = k.len();
        let (h, w) = (self.h + 1 - r, self.w + 1 - r);
        let mut tmp = vec![0.0; self.h * w];
        for y in 0..self.h {
            for x in 0..w {
                tmp[y * w + x] = (0..r).map(|i| k[i] * self.v[y * self.w + x + i]).sum();
            }
        }
        let mut v = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                v[y * w + x] = (0..r).map(|i| k[i] * tmp[(y + i) * w + x]).sum();
            }
        }
        Plane { h, w, v }
    }

    fn zip(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mean luminance term and mean contrast-structure term at one scale.
fn ssim_terms(a: &Plane, b: &Plane, k: &[f64]) -> (f64, f64, f64) {
    let mu_a = a.blur(k);
    let mu_b = b.blur(k);
    let aa = a.zip(a, |x, y| x * y).blur(k);
    let bb = b.zip(b, |x, y| x * y).blur(k);
    let ab = a.zip(b, |x, y| x * y).blur(k);
    let n = mu_a.v.len() as f64;
    let (mut l_sum, mut cs_sum, mut ssim_sum) = (0.0, 0.0, 0.0);
    for i in 0..mu_a.v.len() {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let va = aa.v[i] - ma * ma;
        let vb = bb.v[i] - mb * mb;
        let cov = ab.v[i] - ma * mb;
        let l = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        let cs = (2.0 * cov + C2) / (va + vb + C2);
        l_sum += l;
        cs_sum += cs;
        ssim_sum += l * cs;
    }
    (l_sum / n, cs_sum / n, ssim_sum / n)
}

/// Multi-scale SSIM over `scales` dyadic levels with a 7×7 Gaussian window.
///
/// Negative per-scale terms are clamped to zero so the weighted product stays
/// in `[0, 1]`. Batched inputs return the mean over planes.
pub fn ms_ssim(a: &Tensor, b: &Tensor, scales: usize) -> Result<f64> {
    same_shape("ms_ssim", a, b)?;
    if scales == 0 || scales > MS_SSIM_WEIGHTS.len() {
        return Err(Error::invalid(format!("ms_ssim supports 1..=5 scales, got {scales}")));
    }
    let shape = a.shape();
    if shape.len() < 2 {
        return Err(Error::shape(
            "ms_ssim",
            format!("need at least 2-D input, got {shape:?}"),
        ));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h.min(w) >> (scales - 1) < 8 {
        return Err(Error::invalid(format!(
            "{h}x{w} image too small for {scales} MS-SSIM scales"
        )));
    }
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let wsum: f64 = weights.iter().sum();
    let k = gaussian_window();
    let planes = a.numel() / (h * w);

    let mut total = 0.0;
    for p in 0..planes {
        let grab = |t: &Tensor| Plane {
            h,
            w,
            v: t.data()[p * h * w..(p + 1) * h * w].iter().map(|&v| v as f64).collect(),
        };
        let (mut pa, mut pb) = (grab(a), grab(b));
        let mut score = 1.0;
        for (j, &wj) in weights.iter().enumerate() {
            let (_, cs, ssim) = ssim_terms(&pa, &pb, &k);
            let term = if j + 1 == scales { ssim } else { cs };
            score *= term.max(0.0).powf(wj / wsum);
            if j + 1 < scales {
                pa = pa.downsample();
                pb = pb.downsample();
            }
        }
        total += score;
    }
    Ok(total / planes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{gen_base_image, gen_watermark, WatermarkPattern};

    fn img(v: Vec<f32>, h: usize, w: usize) -> Tensor {
        Tensor::new(vec![1, 1, h, w], v).unwrap()
    }

    #[test]
    fn psnr_analytic_values() {
        let a = gen_base_image(1, 32).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let z = Tensor::zeros(vec![1, 1, 8, 8]);
        let b = Tensor::full(vec![1, 1, 8, 8], 0.1f32);
        assert!((psnr(&z, &b).unwrap() - 20.0).abs() < 1e-5);
        let half: Vec<f32> = (0..64).map(|i| if i % 2 == 0 { 0.5 } else { 0.0 }).collect();
        assert!((psnr(&z, &img(half, 8, 8)).unwrap() - 9.0309).abs() < 1e-4);
        assert!(psnr(&z, &Tensor::zeros(vec![1, 1, 4, 4])).is_err());
    }

    #[test]
    fn nc_properties() {
        let w = gen_watermark(32, WatermarkPattern::Checker).unwrap();
        assert!((nc(&w.w, &w.w).unwrap() - 1.0).abs() < 1e-12);
        assert!((nc(&w.w, &w.w0).unwrap() - 0.5f64.sqrt()).abs() < 1e-9);
        let a = gen_base_image(4, 16).unwrap();
        let scaled = a.map(|v| 3.5 * v);
        assert!((nc(&scaled, &a).unwrap() - 1.0).abs() < 1e-9);
        let zero: Tensor = Tensor::zeros(vec![1, 1, 16, 16]);
        assert!(nc(&zero, &zero).is_err());
    }

    #[test]
    fn success_rate_cases() {
        let spec = gen_watermark(16, WatermarkPattern::Checker).unwrap();
        let all_w = Tensor::stack(&[spec.w.clone(), spec.w.clone()]).unwrap();
        assert_eq!(success_rate(&all_w, &spec.w, NC_THRESHOLD).unwrap(), 1.0);
        let all_w0 = Tensor::stack(&[spec.w0.clone(), spec.w0.clone()]).unwrap();
        assert_eq!(success_rate(&all_w0, &spec.w, NC_THRESHOLD).unwrap(), 0.0);
        let mixed = Tensor::stack(&[spec.w.clone(), spec.w0.clone()]).unwrap();
        assert_eq!(success_rate(&mixed, &spec.w, NC_THRESHOLD).unwrap(), 0.5);
        let empty = Tensor::<f32>::zeros(vec![0, 1, 16, 16]);
        assert!(success_rate(&empty, &spec.w, NC_THRESHOLD).is_err());
    }

    #[test]
    fn ms_ssim_identity_and_symmetry() {
        let a = gen_base_image(8, 32).unwrap();
        let b = gen_base_image(9, 32).unwrap();
        assert!((ms_ssim(&a, &a, 3).unwrap() - 1.0).abs() < 1e-12);
        let ab = ms_ssim(&a, &b, 3).unwrap();
        let ba = ms_ssim(&b, &a, 3).unwrap();
        assert_eq!(ab, ba);
        assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn ms_ssim_black_vs_white() {
        // Only the luminance term differs: l = C1 / (1 + C1) at every scale,
        // raised to the renormalized coarsest-scale weight.
        let a = Tensor::zeros(vec![1, 1, 32, 32]);
        let b = Tensor::ones(vec![1, 1, 32, 32]);
        let l = C1 / (1.0 + C1);
        assert!((l - 1e-4).abs() < 1e-7);
        let expected = l.powf(0.3001 / (0.0448 + 0.2856 + 0.3001));
        let got = ms_ssim(&a, &b, 3).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        assert!(got < 0.02);
    }

    #[test]
    fn ms_ssim_rejects_small_images() {
        let a = Tensor::zeros(vec![1, 1, 16, 16]);
        assert!(ms_ssim(&a, &a, 3).is_err());
        assert!(ms_ssim(&a, &a, 2).is_ok());
    }
}
