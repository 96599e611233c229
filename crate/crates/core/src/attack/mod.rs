//! Gradient-based watermark removal through a decoder API.
//!
//! The attacker trains a remover `R` so that the API's answer on `R(Y)` looks
//! like the null mark while `R(Y)` stays close to `Y`:
//! `L = β₁ L_removal(API(R(Y)), W₀) + β₂ mean(R(Y) - Y)²`. The victim decoder
//! is frozen; only the remover is updated.

mod postprocess;

pub use postprocess::{add_awgn, jpeg_proxy, lattice_attack, quant_table, PostProcess};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dgs::{decoder_api, query_api, DgsConfig};
use crate::error::{Error, Result};
use crate::metrics::{mean_nc, mean_psnr, success_rate};
use crate::nn::{adam_step, init_params, remove, repeat_batch, run_remover, AdamState, Arch, ModelParams};
use crate::tasks::ImagePair;
use crate::tensor::{Element, GradTransform, GradientTap, Graph, NodeId, Tensor};
use crate::watermark::{diverged_at, extract, VictimModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    L1,
    L2,
    L2Consistent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Countermeasure {
    None,
    SignFlip,
    ApproxInvert,
}

macro_rules! str_enum {
    ($ty:ident { $($variant:ident => $name:literal),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name),* })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)*
                    other => Err(Error::invalid(format!("unknown {} `{other}`", stringify!($ty)))),
                }
            }
        }
    };
}

str_enum!(LossVariant { L1 => "l1", L2 => "l2", L2Consistent => "l2_consistent" });
str_enum!(Countermeasure { None => "none", SignFlip => "sign_flip", ApproxInvert => "approx_invert" });

/// Default remover learning rate.
pub const ATTACK_DEFAULT_LR: f64 = 2e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub loss_variant: LossVariant,
    pub beta1: f64,
    pub beta2: f64,
    pub countermeasure: Countermeasure,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Distortion applied to every API answer before it enters the loss.
    pub post_process: Option<PostProcess>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            loss_variant: LossVariant::L2,
            beta1: 1.0,
            beta2: 1.0,
            countermeasure: Countermeasure::None,
            steps: 2000,
            batch: 8,
            lr: ATTACK_DEFAULT_LR,
            seed: 0,
            post_process: None,
        }
    }
}

impl AttackConfig {
    /// Returns the offending field name and reason.
    pub fn check(&self) -> Result<(), (&'static str, String)> {
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("lr", self.lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err((name, format!("must be positive, got {v}")));
            }
        }
        if self.steps == 0 {
            return Err(("steps", "must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(("batch", "must be at least 1".into()));
        }
        if self.loss_variant == LossVariant::L2Consistent && !self.batch.is_multiple_of(2) {
            return Err(("batch", format!("must be even for l2_consistent, got {}", self.batch)));
        }
        if let Some(pp) = &self.post_process {
            pp.validate().map_err(|e| ("post_process", e.to_string()))?;
        }
        Ok(())
    }
}

/// Remover plus the two loss perspectives recorded at every step.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackRun {
    pub remover: ModelParams,
    /// Removal loss on what the API returned (what the attacker optimizes).
    pub attacker_view: Vec<f64>,
    /// The same loss on the raw decoder output (what actually happened).
    pub defender_view: Vec<f64>,
    pub meta: AttackMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackMeta {
    pub steps: usize,
    /// Fraction of the batch answered with a reoriented mark, per step.
    pub protected_fraction: Vec<f64>,
}

/// Averages over the first and last `min(20, len / 10)` (at least one)
/// entries of a curve.
pub fn curve_ends(curve: &[f64]) -> Result<(f64, f64)> {
    if curve.is_empty() {
        return Err(Error::invalid("empty curve"));
    }
    let k = (curve.len() / 10).clamp(1, 20);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Ok((mean(&curve[..k]), mean(&curve[curve.len() - k..])))
}

fn broadcast_mark<T: Element>(g: &mut Graph<T>, mark: &Tensor, like: NodeId) -> Result<NodeId> {
    let n = g.value(like).batch_len();
    g.constant(repeat_batch(&mark.cast::<T>(), n)?)
}

/// Removal loss of an API response batch against the null mark `w0`
/// (`[1, 1, H, W]`, broadcast over the batch). Per-pixel means throughout.
pub fn removal_loss<T: Element>(g: &mut Graph<T>, variant: LossVariant, zresp: NodeId, w0: &Tensor) -> Result<NodeId> {
    let n = g.value(zresp).batch_len();
    if variant == LossVariant::L2Consistent && !n.is_multiple_of(2) {
        return Err(Error::invalid(format!("consistent loss needs an even batch, got {n}")));
    }
    let target = broadcast_mark(g, w0, zresp)?;
    let d = g.sub(zresp, target)?;
    let e = match variant {
        LossVariant::L1 => g.abs(d)?,
        LossVariant::L2 | LossVariant::L2Consistent => g.square(d)?,
    };
    let base = g.mean(e)?;
    if variant != LossVariant::L2Consistent {
        return Ok(base);
    }
    let first = g.batch_slice(zresp, 0, n / 2)?;
    let second = g.batch_slice(zresp, n / 2, n)?;
    let dc = g.sub(first, second)?;
    let sq = g.square(dc)?;
    let consistent = g.mean(sq)?;
    g.add(base, consistent)
}

/// Mean per-pixel squared error between `R(Y)` and `Y`.
pub fn attack_fidelity_loss<T: Element>(g: &mut Graph<T>, ry: NodeId, y: NodeId) -> Result<NodeId> {
    if g.value(ry).shape() != g.value(y).shape() {
        return Err(Error::shape(
            "attack_fidelity_loss",
            format!("{:?} vs {:?}", g.value(ry).shape(), g.value(y).shape()),
        ));
    }
    let d = g.sub(ry, y)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

/// Removal loss of a plain tensor, evaluated with the same arithmetic as
/// [`removal_loss`] so both perspectives agree bit for bit when nothing
/// sits between them.
fn removal_loss_value(variant: LossVariant, z: &Tensor, w0: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let zi = g.constant(z.clone())?;
    let l = removal_loss(&mut g, variant, zi, w0)?;
    Ok(g.value(l).item()? as f64)
}

/// Watermarks the attacker's processed images with the victim encoder.
pub fn watermarked_pool(victim: &VictimModel, pairs: &[ImagePair]) -> Result<Vec<Tensor>> {
    if pairs.is_empty() {
        return Err(Error::invalid("attacker set is empty"));
    }
    let x = Tensor::stack(&pairs.iter().map(|p| p.x.clone()).collect::<Vec<_>>())?;
    let y = victim.embed(&x)?;
    (0..y.batch_len()).map(|i| y.sample(i)).collect()
}

/// Trains a remover against the (possibly shielded) decoder API.
pub fn train_remover(
    victim: &VictimModel,
    dgs: &DgsConfig,
    cfg: &AttackConfig,
    pairs: &[ImagePair],
) -> Result<AttackRun> {
    cfg.check().map_err(|(field, message)| Error::Config {
        path: format!("attack.{field}"),
        message,
    })?;
    let pool = watermarked_pool(victim, pairs)?;
    let w0 = victim.wspec.w0.clone();

    let mut remover = init_params(Arch::Remover, cfg.seed);
    let mut opt = AdamState::new(&remover, cfg.lr as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut attacker_view = Vec::with_capacity(cfg.steps);
    let mut defender_view = Vec::with_capacity(cfg.steps);
    let mut protected_fraction = Vec::with_capacity(cfg.steps);
    let mut w_est: Option<Tensor> = None;

    for step in 0..cfg.steps {
        let batch = (0..cfg.batch)
            .map(|_| pool[rng.random_range(0..pool.len())].clone())
            .collect::<Vec<_>>();
        let y_batch = Tensor::stack(&batch)?;
        let pp_seed: u64 = rng.random();

        if cfg.countermeasure == Countermeasure::ApproxInvert && w_est.is_none() {
            // one extra query with the untouched marked images, averaged
            let answer = query_api(&victim.decoder, dgs, &y_batch)?;
            let n = answer.batch_len() as f32;
            let k = answer.numel() / answer.batch_len();
            let mut mean = vec![0.0f32; k];
            for chunk in answer.data().chunks(k) {
                mean.iter_mut().zip(chunk).for_each(|(m, v)| *m += v / n);
            }
            w_est = Some(Tensor::new(w0.shape().to_vec(), mean)?);
        }

        let mut g = Graph::new();
        let pr = remover.bind(&mut g, true)?;
        let pd = victim.decoder.bind(&mut g, false)?;
        let y = g.constant(y_batch)?;
        let built = (|| {
            let ry = remove(&mut g, &pr, y)?;
            let api = decoder_api(&mut g, &pd, dgs, ry)?;
            let mut zresp = api.output;
            if cfg.countermeasure == Countermeasure::SignFlip {
                g.apply_tap(GradientTap {
                    node: api.output,
                    transform: GradTransform::Negate,
                })?;
            }
            if let Some(pp) = &cfg.post_process {
                let z = g.value(zresp).clone();
                let f = pp.apply(&z, pp_seed)?.zip_map(&z, "post_process", |a, b| a - b)?;
                let fi = g.constant(f)?;
                zresp = g.add(zresp, fi)?;
            }
            if let Some(est) = &w_est {
                let twice = broadcast_mark(&mut g, &est.map(|v| 2.0 * v), zresp)?;
                zresp = g.sub(twice, zresp)?;
            }
            let rl = removal_loss(&mut g, cfg.loss_variant, zresp, &w0)?;
            let fl = attack_fidelity_loss(&mut g, ry, y)?;
            let a = g.scale(rl, cfg.beta1)?;
            let b = g.scale(fl, cfg.beta2)?;
            let loss = g.add(a, b)?;
            Ok::<_, Error>((loss, rl, api))
        })()
        .map_err(diverged_at(step))?;
        let (loss, rl, api) = built;

        if !(g.value(loss).item()? as f64).is_finite() {
            return Err(Error::Diverged { step });
        }
        attacker_view.push(g.value(rl).item()? as f64);
        defender_view.push(removal_loss_value(cfg.loss_variant, g.value(api.raw), &w0).map_err(diverged_at(step))?);
        protected_fraction.push(api.protected.iter().filter(|&&p| p).count() as f64 / api.protected.len() as f64);

        let grads = g.backward(loss).map_err(diverged_at(step))?;
        adam_step(&mut remover, &pr.grads(&grads)?, &mut opt).map_err(diverged_at(step))?;
    }

    Ok(AttackRun {
        remover,
        attacker_view,
        defender_view,
        meta: AttackMeta {
            steps: cfg.steps,
            protected_fraction,
        },
    })
}

/// Outcome of an attack on held-out pairs, judged on the true decoder output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackEval {
    /// Success rate of `D(R(Y))`: the defense holds where this stays at 1.
    pub sr: f64,
    pub nc: f64,
    /// Mean PSNR(R(Y), Y).
    pub psnr_ry_y: f64,
}

pub fn evaluate_attack(
    victim: &VictimModel,
    remover: &ModelParams,
    pairs: &[ImagePair],
    threshold: f64,
) -> Result<AttackEval> {
    let y = Tensor::stack(&watermarked_pool(victim, pairs)?)?;
    let ry = run_remover(remover, &y)?;
    let z = extract(&victim.decoder, &ry)?;
    Ok(AttackEval {
        sr: success_rate(&z, &victim.wspec.w, threshold)?,
        nc: mean_nc(&z, &victim.wspec.w)?,
        psnr_ry_y: mean_psnr(&ry, &y)?,
    })
}
