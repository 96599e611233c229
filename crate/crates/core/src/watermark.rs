//! Joint encoder/decoder training and plain extraction.
//!
//! Victim objective: `α₁ L_embed + α₂ L_fidelity` with
//! `L_embed = mean(D(Y) - W)² + mean(D(S) - W₀)²` and
//! `L_fidelity = mean(Y - X)²`, where `Y = E(concat(X, W))` and `S` is drawn
//! from unmarked images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{mean_nc, mean_psnr, success_rate, NC_THRESHOLD};
use crate::nn::{
    adam_step, decode, encode, init_params, repeat_batch, run_decoder, run_encoder, AdamState, Arch, ModelParams,
};
use crate::tasks::{gen_base_image, ImagePair, WatermarkSpec};
use crate::tensor::{Element, Graph, NodeId, Tensor};

/// Victim learning rate. Five times the remover's: 3000 steps have to stand
/// in for a much longer schedule.
pub const VICTIM_DEFAULT_LR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VictimTrainConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for VictimTrainConfig {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 1.0,
            steps: 3000,
            batch: 8,
            lr: VICTIM_DEFAULT_LR,
            seed: 0,
        }
    }
}

impl VictimTrainConfig {
    /// Returns the offending field name and reason.
    pub fn check(&self) -> Result<(), (&'static str, String)> {
        if !(self.alpha1 > 0.0 && self.alpha1.is_finite()) {
            return Err(("alpha1", format!("must be positive, got {}", self.alpha1)));
        }
        if !(self.alpha2 > 0.0 && self.alpha2.is_finite()) {
            return Err(("alpha2", format!("must be positive, got {}", self.alpha2)));
        }
        if self.steps == 0 {
            return Err(("steps", "must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(("batch", "must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(("lr", format!("must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub steps: usize,
    pub final_embed: f64,
    pub final_fidelity: f64,
}

/// Trained encoder/decoder pair and the mark they carry.
#[derive(Clone, Debug, PartialEq)]
pub struct VictimModel {
    pub encoder: ModelParams,
    pub decoder: ModelParams,
    pub wspec: WatermarkSpec,
    pub train_meta: TrainMeta,
}

impl VictimModel {
    /// Watermarks a batch of processed images.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        run_encoder(&self.encoder, x, &self.wspec.w)
    }
}

fn mse_node<T: Element>(g: &mut Graph<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

/// `mean(D(Y) - W)² + mean(D(S) - W₀)²`, each term averaged over its own pixels.
pub fn embed_loss<T: Element>(
    g: &mut Graph<T>,
    decoder: &crate::nn::BoundParams,
    y: NodeId,
    s: NodeId,
    wspec: &WatermarkSpec,
) -> Result<NodeId> {
    let (ny, ns) = (g.value(y).batch_len(), g.value(s).batch_len());
    if ny == 0 || ns == 0 || g.value(y).numel() == 0 || g.value(s).numel() == 0 {
        return Err(Error::invalid("embed_loss on an empty batch"));
    }
    let zy = decode(g, decoder, y)?;
    let zs = decode(g, decoder, s)?;
    let w = g.constant(repeat_batch(&wspec.w.cast::<T>(), ny)?)?;
    let w0 = g.constant(repeat_batch(&wspec.w0.cast::<T>(), ns)?)?;
    let marked = mse_node(g, zy, w)?;
    let unmarked = mse_node(g, zs, w0)?;
    g.add(marked, unmarked)
}

/// Mean per-pixel squared error between two batches.
pub fn fidelity_loss<T: Element>(g: &mut Graph<T>, y: NodeId, x: NodeId) -> Result<NodeId> {
    if g.value(y).shape() != g.value(x).shape() {
        return Err(Error::shape(
            "fidelity_loss",
            format!("{:?} vs {:?}", g.value(y).shape(), g.value(x).shape()),
        ));
    }
    mse_node(g, y, x)
}

/// Maps a mid-training non-finite error to a divergence report.
pub(crate) fn diverged_at(step: usize) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Diverged { step },
        other => other,
    }
}

/// Unmarked image for pool slot `k`: source, processed target and fresh
/// base images in turn.
fn unmarked_sample(pairs: &[ImagePair], k: usize, rng: &mut ChaCha8Rng, size: usize) -> Result<Tensor> {
    let pick = rng.random_range(0..pairs.len());
    Ok(match k % 3 {
        0 => pairs[pick].x0.clone(),
        1 => pairs[pick].x.clone(),
        _ => gen_base_image(rng.random(), size)?,
    })
}

/// Adam on both networks jointly. Returns the model and per-step total loss.
pub fn train_victim(
    pairs: &[ImagePair],
    wspec: &WatermarkSpec,
    cfg: &VictimTrainConfig,
) -> Result<(VictimModel, Vec<f64>)> {
    cfg.check().map_err(|(field, message)| Error::Config {
        path: format!("victim.{field}"),
        message,
    })?;
    let first = pairs
        .first()
        .ok_or_else(|| Error::invalid("victim training set is empty"))?;
    let size = first.x.shape()[3];
    if first.x.shape() != wspec.w.shape() {
        return Err(Error::shape(
            "train_victim",
            format!("image {:?} vs mark {:?}", first.x.shape(), wspec.w.shape()),
        ));
    }

    let mut encoder = init_params(Arch::Encoder, cfg.seed);
    let mut decoder = init_params(Arch::Decoder, cfg.seed);
    let mut opt_e = AdamState::new(&encoder, cfg.lr as f32);
    let mut opt_d = AdamState::new(&decoder, cfg.lr as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    let (mut last_embed, mut last_fid) = (0.0, 0.0);

    for step in 0..cfg.steps {
        let xs = (0..cfg.batch)
            .map(|_| pairs[rng.random_range(0..pairs.len())].x.clone())
            .collect::<Vec<_>>();
        let ss = (0..cfg.batch)
            .map(|j| unmarked_sample(pairs, step * cfg.batch + j, &mut rng, size))
            .collect::<Result<Vec<_>>>()?;

        let mut g = Graph::new();
        let pe = encoder.bind(&mut g, true)?;
        let pd = decoder.bind(&mut g, true)?;
        let x = g.constant(Tensor::stack(&xs)?)?;
        let s = g.constant(Tensor::stack(&ss)?)?;
        let w = g.constant(repeat_batch(&wspec.w, cfg.batch)?)?;
        let (loss, e_loss, f_loss) = (|| {
            let y = encode(&mut g, &pe, x, w)?;
            let e = embed_loss(&mut g, &pd, y, s, wspec)?;
            let f = fidelity_loss(&mut g, y, x)?;
            let ea = g.scale(e, cfg.alpha1)?;
            let fa = g.scale(f, cfg.alpha2)?;
            Ok::<_, Error>((g.add(ea, fa)?, e, f))
        })()
        .map_err(diverged_at(step))?;

        let total = g.value(loss).item()? as f64;
        if !total.is_finite() {
            return Err(Error::Diverged { step });
        }
        last_embed = g.value(e_loss).item()? as f64;
        last_fid = g.value(f_loss).item()? as f64;
        losses.push(total);

        let grads = g.backward(loss).map_err(diverged_at(step))?;
        adam_step(&mut encoder, &pe.grads(&grads)?, &mut opt_e).map_err(diverged_at(step))?;
        adam_step(&mut decoder, &pd.grads(&grads)?, &mut opt_d).map_err(diverged_at(step))?;
    }

    let model = VictimModel {
        encoder,
        decoder,
        wspec: wspec.clone(),
        train_meta: TrainMeta {
            seed: cfg.seed,
            steps: cfg.steps,
            final_embed: last_embed,
            final_fidelity: last_fid,
        },
    };
    Ok((model, losses))
}

/// Plain decoder forward pass on `[N, 1, H, W]` queries.
pub fn extract(decoder: &ModelParams, s: &Tensor) -> Result<Tensor> {
    let d = s.dims4()?;
    if d[1] != 1 {
        return Err(Error::shape(
            "extract",
            format!("expected one channel, got {:?}", s.shape()),
        ));
    }
    run_decoder(decoder, s)
}

/// Fidelity and extraction figures of a victim on held-out pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VictimReport {
    /// Mean PSNR(Y, X).
    pub psnr_yx: f64,
    /// Mean NC(D(Y), W).
    pub nc_marked: f64,
    /// Success rate of D(Y).
    pub sr_marked: f64,
    /// Mean NC(D(X), W).
    pub nc_unmarked: f64,
    /// Largest |Y - X| over all pixels.
    pub max_abs_perturbation: f64,
}

pub fn evaluate_victim(model: &VictimModel, pairs: &[ImagePair]) -> Result<VictimReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let x = Tensor::stack(&pairs.iter().map(|p| p.x.clone()).collect::<Vec<_>>())?;
    let y = model.embed(&x)?;
    let zy = extract(&model.decoder, &y)?;
    let zx = extract(&model.decoder, &x)?;
    let w = &model.wspec.w;
    let max_abs = y
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    Ok(VictimReport {
        psnr_yx: mean_psnr(&y, &x)?,
        nc_marked: mean_nc(&zy, w)?,
        sr_marked: success_rate(&zy, w, NC_THRESHOLD)?,
        nc_unmarked: mean_nc(&zx, w)?,
        max_abs_perturbation: max_abs,
    })
}
