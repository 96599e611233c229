//! Decoder Gradient Shield.
//!
//! For a query whose decoded mark `Z` already matches the watermark `W`, the
//! protected API returns `Z* = -P Z + (P + I) W` with a diagonal positive
//! `P = diag(Λ)`. The returned image stays within `max Λ · |Z - W|` of `W`,
//! while the gradient an attacker sees flows through `∂Z*/∂Z = -P`: reversed,
//! and damped by `Λ`.
//!
//! Everything here is elementwise. Values are evaluated in `f64` and rounded
//! once to the tensor's element type, which keeps the fixed point `Z = W`
//! exact and makes `Λ = 1` give exactly `2W - Z` in `f32`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::{nc, NC_THRESHOLD};
use crate::nn::{decode, BoundParams, ModelParams};
use crate::tensor::{reorient_value, Element, Graph, NodeId, Tensor};

/// Diagonal of `P`, one eigenvalue per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct PMatrix {
    lambdas: Vec<f64>,
    range: (f64, f64),
    seed: u64,
}

impl PMatrix {
    /// Wraps explicit eigenvalues; all must be finite and positive.
    pub fn from_lambdas(lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(Error::invalid("P needs at least one eigenvalue"));
        }
        if let Some(l) = lambdas.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::invalid(format!("eigenvalue {l} is not positive")));
        }
        let lo = lambdas.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = lambdas.iter().copied().fold(0.0, f64::max);
        Ok(Self {
            lambdas,
            range: (lo, hi),
            seed: 0,
        })
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn lambda_range(&self) -> (f64, f64) {
        self.range
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.lambdas.len()
    }

    pub fn max_lambda(&self) -> f64 {
        self.lambdas.iter().copied().fold(0.0, f64::max)
    }

    pub fn is_identity(&self) -> bool {
        self.lambdas.iter().all(|&l| l == 1.0)
    }
}

/// Draws `dim` eigenvalues i.i.d. uniform on `[lambda_min, lambda_max]`.
/// Equal bounds give a constant diagonal (`1, 1` is the identity).
pub fn make_p(dim: usize, lambda_min: f64, lambda_max: f64, seed: u64) -> Result<PMatrix> {
    if dim == 0 {
        return Err(Error::invalid("P dimension must be positive"));
    }
    if !(lambda_min.is_finite() && lambda_max.is_finite() && lambda_min > 0.0) {
        return Err(Error::invalid(format!(
            "eigenvalue bounds must be positive and finite, got [{lambda_min}, {lambda_max}]"
        )));
    }
    if lambda_min > lambda_max {
        return Err(Error::invalid(format!(
            "lambda_min {lambda_min} > lambda_max {lambda_max}"
        )));
    }
    let lambdas = if lambda_min == lambda_max {
        vec![lambda_min; dim]
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..dim)
            .map(|_| {
                let u: f64 = rng.random();
                (lambda_min + u * (lambda_max - lambda_min)).clamp(lambda_min, lambda_max)
            })
            .collect()
    };
    Ok(PMatrix {
        lambdas,
        range: (lambda_min, lambda_max),
        seed,
    })
}

/// Shield settings for one protected decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct DgsConfig {
    p: Option<PMatrix>,
    w: Tensor,
    w0: Tensor,
    nc_threshold: f64,
    enabled: bool,
}

impl DgsConfig {
    /// `w` and `w0` are single `[1, 1, H, W]` marks; `p` must have `H·W`
    /// eigenvalues. A config without `p` is never active.
    pub fn new(p: Option<PMatrix>, w: Tensor, w0: Tensor, nc_threshold: f64, enabled: bool) -> Result<Self> {
        let [n, c, h, wd] = w.dims4()?;
        if n != 1 || c != 1 {
            return Err(Error::shape(
                "dgs",
                format!("mark must be [1, 1, H, W], got {:?}", w.shape()),
            ));
        }
        if w0.shape() != w.shape() {
            return Err(Error::shape("dgs", format!("w {:?} vs w0 {:?}", w.shape(), w0.shape())));
        }
        if !(nc_threshold > 0.0 && nc_threshold < 1.0) {
            return Err(Error::invalid(format!("nc_threshold {nc_threshold} outside (0, 1)")));
        }
        if let Some(p) = &p {
            if p.dim() != h * wd {
                return Err(Error::shape(
                    "dgs",
                    format!("P has {} eigenvalues for {h}x{wd} marks", p.dim()),
                ));
            }
        }
        Ok(Self {
            p,
            w,
            w0,
            nc_threshold,
            enabled,
        })
    }

    /// Enabled shield with the default threshold.
    pub fn protected(p: PMatrix, w: Tensor, w0: Tensor) -> Result<Self> {
        Self::new(Some(p), w, w0, NC_THRESHOLD, true)
    }

    /// Pass-through API.
    pub fn disabled(w: Tensor, w0: Tensor) -> Result<Self> {
        Self::new(None, w, w0, NC_THRESHOLD, false)
    }

    pub fn is_active(&self) -> bool {
        self.enabled && self.p.is_some()
    }

    pub fn p(&self) -> Option<&PMatrix> {
        self.p.as_ref()
    }

    pub fn w(&self) -> &Tensor {
        &self.w
    }

    pub fn w0(&self) -> &Tensor {
        &self.w0
    }

    pub fn nc_threshold(&self) -> f64 {
        self.nc_threshold
    }

    fn require_p(&self) -> Result<&PMatrix> {
        self.p
            .as_ref()
            .ok_or_else(|| Error::invalid("reorientation needs a P matrix"))
    }

    /// Checks that `z` is a batch of marks and returns its batch size.
    fn batch_of<T: Element>(&self, op: &'static str, z: &Tensor<T>) -> Result<usize> {
        let d = z.dims4()?;
        if d[1..] != self.w.shape()[1..] {
            return Err(Error::shape(
                op,
                format!("{:?} vs mark {:?}", z.shape(), self.w.shape()),
            ));
        }
        Ok(d[0])
    }
}

fn elementwise<T: Element>(
    cfg: &DgsConfig,
    op: &'static str,
    z: &Tensor<T>,
    f: impl Fn(f64, f64, f64, usize) -> Result<f64>,
) -> Result<Tensor<T>> {
    cfg.batch_of(op, z)?;
    let lambdas = cfg.require_p()?.lambdas();
    let w = cfg.w.data();
    let k = w.len();
    let data = z
        .data()
        .iter()
        .enumerate()
        .map(|(i, &zv)| f(zv.as_f64(), w[i % k].as_f64(), lambdas[i % k], i).map(T::from_f64))
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(z.shape().to_vec(), data)
}

/// `Z* = -ΛZ + (Λ + 1)W` per pixel, applied to each batch entry. Unclipped.
pub fn reorient<T: Element>(z: &Tensor<T>, cfg: &DgsConfig) -> Result<Tensor<T>> {
    elementwise(cfg, "reorient", z, |zv, wv, l, _| Ok(reorient_value(zv, wv, l)))
}

/// Exact inverse of [`reorient`]: `Z = -Λ⁻¹Z* + (1 + Λ⁻¹)W`.
pub fn invert_reorient<T: Element>(zstar: &Tensor<T>, cfg: &DgsConfig) -> Result<Tensor<T>> {
    elementwise(cfg, "invert_reorient", zstar, |zs, wv, l, _| {
        if l == 0.0 {
            return Err(Error::invalid("cannot invert a zero eigenvalue"));
        }
        Ok(wv + (wv - zs) / l)
    })
}

/// The attacker's `P`-free estimate `2 W_est - Z*`. Exact only when `P = I`
/// and `W_est = W`.
pub fn approx_invert<T: Element>(zstar: &Tensor<T>, w_est: &Tensor<T>) -> Result<Tensor<T>> {
    zstar.zip_map(w_est, "approx_invert", |zs, we| {
        T::from_f64(2.0 * we.as_f64() - zs.as_f64())
    })
}

/// Z-space gradient of `‖Z* + F - W₀‖²` for reoriented `Z`:
/// `-2Λ(Z* + F - W₀)`. `f = None` means no interference.
pub fn effective_z_gradient<T: Element>(z: &Tensor<T>, cfg: &DgsConfig, f: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if let Some(f) = f {
        if f.shape() != z.shape() {
            return Err(Error::shape(
                "effective_z_gradient",
                format!("{:?} vs {:?}", z.shape(), f.shape()),
            ));
        }
    }
    let w0 = cfg.w0.data();
    let k = w0.len();
    elementwise(cfg, "effective_z_gradient", z, |zv, wv, l, i| {
        let fv = f.map_or(0.0, |f| f.data()[i].as_f64());
        Ok(-2.0 * l * (reorient_value(zv, wv, l) + fv - w0[i % k].as_f64()))
    })
}

/// Records `reorient` for a whole batch node in `g`.
pub fn reorient_node<T: Element>(g: &mut Graph<T>, z: NodeId, cfg: &DgsConfig) -> Result<NodeId> {
    let n = cfg.batch_of("reorient", g.value(z))?;
    let p = cfg.require_p()?;
    let shape = g.value(z).shape().to_vec();
    let k = p.dim();
    let w = cfg.w.cast::<T>();
    let wb = Tensor::new(shape.clone(), (0..n * k).map(|i| w.data()[i % k]).collect())?;
    let lb = Tensor::new(shape, (0..n * k).map(|i| T::from_f64(p.lambdas()[i % k])).collect())?;
    let wi = g.constant(wb)?;
    let li = g.constant(lb)?;
    g.reorient(z, wi, li)
}

/// Handles produced by [`decoder_api`].
#[derive(Clone, Debug)]
pub struct ApiResponse {
    /// What the caller receives.
    pub output: NodeId,
    /// Plain decoder output `D(S)`.
    pub raw: NodeId,
    /// Per batch entry: whether the response was reoriented.
    pub protected: Vec<bool>,
}

/// Whether the shield would reorient this single decoded mark.
pub fn is_protected<T: Element>(z: &Tensor<T>, cfg: &DgsConfig) -> Result<bool> {
    if !cfg.is_active() {
        return Ok(false);
    }
    let z = z.clone().reshape(cfg.w.shape().to_vec())?;
    Ok(nc(&z, &cfg.w.cast::<T>())? > cfg.nc_threshold)
}

/// Decoder behind the shield, recorded in the caller's graph so gradients
/// reach the query. Each batch entry whose decoded mark has NC with `W`
/// above the threshold is reoriented; the rest pass through unchanged.
pub fn decoder_api<T: Element>(
    g: &mut Graph<T>,
    decoder: &BoundParams,
    cfg: &DgsConfig,
    s: NodeId,
) -> Result<ApiResponse> {
    let raw = decode(g, decoder, s)?;
    let n = cfg.batch_of("decoder_api", g.value(raw))?;
    let protected = (0..n)
        .map(|i| is_protected(&g.value(raw).sample(i)?, cfg))
        .collect::<Result<Vec<_>>>()?;

    let output = if protected.iter().all(|&p| !p) {
        raw
    } else if protected.iter().all(|&p| p) {
        reorient_node(g, raw, cfg)?
    } else {
        let parts = protected
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let zi = g.batch_slice(raw, i, i + 1)?;
                if p {
                    reorient_node(g, zi, cfg)
                } else {
                    Ok(zi)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        g.concat_batch(&parts)?
    };
    Ok(ApiResponse { output, raw, protected })
}

/// Forward-only API query.
pub fn query_api(decoder: &ModelParams, cfg: &DgsConfig, s: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = decoder.bind(&mut g, false)?;
    let si = g.constant(s.clone())?;
    let r = decoder_api(&mut g, &p, cfg, si)?;
    Ok(g.value(r.output).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::GRAD_CHECK_EPS;

    fn px(v: f64) -> Tensor<f64> {
        Tensor::new(vec![1, 1, 1, 1], vec![v]).unwrap()
    }

    fn cfg1(lambda: f64, w: f32, w0: f32) -> DgsConfig {
        let p = PMatrix::from_lambdas(vec![lambda]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![w]).unwrap();
        let w0 = Tensor::new(vec![1, 1, 1, 1], vec![w0]).unwrap();
        DgsConfig::protected(p, w, w0).unwrap()
    }

    #[test]
    fn make_p_identity_and_range() {
        let p = make_p(16, 1.0, 1.0, 3).unwrap();
        assert!(p.is_identity());
        let p = make_p(1024, 1e-5, 1e-4, 3).unwrap();
        assert!(p.lambdas().iter().all(|&l| (1e-5..=1e-4).contains(&l)));
        assert_eq!(p, make_p(1024, 1e-5, 1e-4, 3).unwrap());
        assert_ne!(p, make_p(1024, 1e-5, 1e-4, 4).unwrap());
    }

    #[test]
    fn make_p_rejects_bad_bounds() {
        assert!(make_p(4, 0.0, 1.0, 0).is_err());
        assert!(make_p(4, -1.0, 1.0, 0).is_err());
        assert!(make_p(4, 1e-3, 1e-4, 0).is_err());
        assert!(PMatrix::from_lambdas(vec![0.5, 0.0]).is_err());
    }

    #[test]
    fn reorient_worked_values() {
        // identity P: Z* = 2W - Z
        let z = reorient(&px(1.0), &cfg1(1.0, 0.8, 1.0)).unwrap();
        assert!((z.data()[0] - 0.6).abs() < 1e-7);
        // unclipped output above one
        let z = reorient(&px(0.2), &cfg1(0.5, 0.8, 1.0)).unwrap();
        assert!((z.data()[0] - 1.1).abs() < 1e-7);
        let z = reorient(&px(0.8f32 as f64), &cfg1(0.3, 0.8, 1.0)).unwrap();
        assert_eq!(z.data()[0], 0.8f32 as f64);
    }

    #[test]
    fn config_validation() {
        let w = Tensor::zeros(vec![1, 1, 2, 2]);
        assert!(DgsConfig::new(None, w.clone(), Tensor::ones(vec![1, 1, 2, 2]), 1.0, true).is_err());
        assert!(DgsConfig::new(None, w.clone(), Tensor::ones(vec![1, 1, 2, 3]), 0.9, true).is_err());
        let p = make_p(3, 0.1, 0.2, 0).unwrap();
        assert!(DgsConfig::new(Some(p), w.clone(), Tensor::ones(vec![1, 1, 2, 2]), 0.9, true).is_err());
        let c = DgsConfig::new(None, w, Tensor::ones(vec![1, 1, 2, 2]), 0.9, true).unwrap();
        assert!(!c.is_active());
    }

    #[test]
    fn inversions() {
        // dyadic values keep every step exact
        let c = cfg1(0.5, 0.75, 1.0);
        let zs = reorient(&px(0.25), &c).unwrap();
        assert_eq!(zs.data()[0], 1.0);
        assert_eq!(invert_reorient(&zs, &c).unwrap().data()[0], 0.25);
        // approximate inversion is biased by (1 - Λ)(W - Z)
        let est = approx_invert(&zs, &px(0.75)).unwrap();
        assert_eq!(est.data()[0], 0.5);
        assert_eq!(est.data()[0] - 0.25, 0.5 * 0.5);
        assert_eq!(invert_reorient(&px(0.75), &c).unwrap().data()[0], 0.75);
        // identity P: both inversions agree with 2W - Z*
        let id = cfg1(1.0, 0.75, 1.0);
        let zs = reorient(&px(0.125), &id).unwrap();
        assert_eq!(invert_reorient(&zs, &id).unwrap().data()[0], 0.125);
        assert_eq!(approx_invert(&zs, &px(0.75)).unwrap().data()[0], 0.125);
    }

    #[test]
    fn single_precision_round_trip_is_ulp_over_lambda() {
        // rounding Z* to f32 costs up to half an ulp, which the inverse divides by Λ
        let lambda = 1e-5;
        let side = 16;
        let w: Vec<f32> = (0..side * side).map(|i| (i % 7) as f32 / 6.0).collect();
        let w = Tensor::new(vec![1, 1, side, side], w).unwrap();
        let p = PMatrix::from_lambdas(vec![lambda; side * side]).unwrap();
        let c = DgsConfig::protected(p, w, Tensor::ones(vec![1, 1, side, side])).unwrap();
        let z = Tensor::new(
            vec![1, 1, side, side],
            (0..side * side).map(|i| (i % 11) as f32 / 10.0).collect(),
        )
        .unwrap();
        let zs = reorient(&z, &c).unwrap();
        let back = invert_reorient(&zs, &c).unwrap();
        let mut worst = 0.0f64;
        for ((&a, &b), &s) in z.data().iter().zip(back.data()).zip(zs.data()) {
            let err = (a as f64 - b as f64).abs();
            let bound = 0.5 * f32::EPSILON as f64 * (s.abs().max(1.0) as f64 / lambda + 1.0);
            assert!(err <= bound, "{err} > {bound}");
            worst = worst.max(err);
        }
        // the 1e-4 round-trip target is out of reach in f32 at this Λ
        assert!(worst > 1e-4, "{worst}");
    }

    #[test]
    fn effective_gradient_worked_value() {
        let g = effective_z_gradient(&px(0.5), &cfg1(0.1, 0.5, 1.0), None).unwrap();
        assert!((g.data()[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn reorient_op_gradients_match_finite_differences() {
        let w = Tensor::new(vec![1, 1, 1, 3], vec![0.2, 0.9, 0.4]).unwrap();
        let l = Tensor::new(vec![1, 1, 1, 3], vec![0.3, 1e-2, 0.7]).unwrap();
        let z = Tensor::new(vec![1, 1, 1, 3], vec![0.5, 0.1, 0.8]).unwrap();
        for which in 0..3 {
            let (w, l, z) = (w.clone(), l.clone(), z.clone());
            let x = [&z, &w, &l][which].clone();
            let err = crate::tensor::grad_check(
                |g, x| {
                    let mut ins = [None, None, None];
                    ins[which] = Some(x);
                    let mut get = |i: usize, t: &Tensor<f64>| match ins[i] {
                        Some(id) => Ok(id),
                        None => g.constant(t.clone()),
                    };
                    let (zi, wi, li) = (get(0, &z)?, get(1, &w)?, get(2, &l)?);
                    let r = g.reorient(zi, wi, li)?;
                    let r = g.square(r)?;
                    g.sum(r)
                },
                &x,
                GRAD_CHECK_EPS,
            )
            .unwrap();
            assert!(err < 1e-6, "input {which}: {err}");
        }
    }
}
