#![allow(dead_code)]

use gradshield::attack::{attack_fidelity_loss, removal_loss, LossVariant};
use gradshield::dgs::{decoder_api, make_p, DgsConfig};
use gradshield::nn::{init_params, remove, Arch, ModelParams};
use gradshield::tensor::{grad_check, Graph, NodeId, Tensor, GRAD_CHECK_EPS};
use gradshield::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values in `[-1, 1]` kept at least `gap` away from zero, so kinks sit
/// outside the finite-difference stencil.
pub fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn check(f: impl Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>, x: &Tensor<f64>) -> f64 {
    grad_check(f, x, GRAD_CHECK_EPS).unwrap()
}

/// A fixed-weight mean that makes any tensor output a scalar with a
/// non-uniform upstream gradient.
fn weighted(g: &mut Graph<f64>, y: NodeId, wts: &Tensor<f64>) -> Result<NodeId> {
    let c = g.constant(wts.clone())?;
    let m = g.mul(y, c)?;
    g.sum(m)
}

/// Worst grad_check error per op kind for one random instance.
pub fn op_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s4 = [2, 2, 4, 4];
    let x = rand_tensor(&mut rng, &s4, -1.0, 1.0);
    let other = rand_tensor(&mut rng, &s4, -1.0, 1.0);
    let wts = rand_tensor(&mut rng, &s4, -1.0, 1.0);
    let mut out = Vec::new();

    out.push((
        "add",
        check(
            |g, x| {
                let o = g.constant(other.clone())?;
                let y = g.add(x, o)?;
                weighted(g, y, &wts)
            },
            &x,
        ),
    ));
    out.push((
        "sub",
        check(
            |g, x| {
                let o = g.constant(other.clone())?;
                let y = g.sub(o, x)?;
                weighted(g, y, &wts)
            },
            &x,
        ),
    ));
    out.push((
        "mul",
        check(
            |g, x| {
                let o = g.constant(other.clone())?;
                let y = g.mul(x, o)?;
                weighted(g, y, &wts)
            },
            &x,
        ),
    ));
    out.push((
        "mul_self",
        check(
            |g, x| {
                let y = g.mul(x, x)?;
                weighted(g, y, &wts)
            },
            &x,
        ),
    ));
    out.push((
        "scale",
        check(
            |g, x| {
                let y = g.scale(x, -1.7)?;
                weighted(g, y, &wts)
            },
            &x,
        ),
    ));
    out.push((
        "square",
        check(
            |g, x| {
                let y = g.square(x)?;
                weighted(g, y, &wts)
            },
            &x,
        ),
    ));
    out.push((
        "sigmoid",
        check(
            |g, x| {
                let y = g.sigmoid(x)?;
                weighted(g, y, &wts)
            },
            &x,
        ),
    ));
    out.push((
        "sum",
        check(
            |g, x| {
                let y = g.square(x)?;
                g.sum(y)
            },
            &x,
        ),
    ));
    out.push((
        "mean",
        check(
            |g, x| {
                let y = g.square(x)?;
                g.mean(y)
            },
            &x,
        ),
    ));

    let xk = rand_away_from_zero(&mut rng, &s4, 0.05);
    out.push((
        "abs",
        check(
            |g, x| {
                let y = g.abs(x)?;
                weighted(g, y, &wts)
            },
            &xk,
        ),
    ));
    out.push((
        "leaky_relu",
        check(
            |g, x| {
                let y = g.leaky_relu(x, 0.2)?;
                weighted(g, y, &wts)
            },
            &xk,
        ),
    ));

    let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    let mw = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
    out.push((
        "matmul_lhs",
        check(
            |g, x| {
                let bi = g.constant(b.clone())?;
                let y = g.matmul(x, bi)?;
                weighted(g, y, &mw)
            },
            &a,
        ),
    ));
    out.push((
        "matmul_rhs",
        check(
            |g, x| {
                let ai = g.constant(a.clone())?;
                let y = g.matmul(ai, x)?;
                weighted(g, y, &mw)
            },
            &b,
        ),
    ));

    let kern = rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
    let bias = rand_tensor(&mut rng, &[3], -0.5, 0.5);
    for (name, stride) in [("conv2d_s1", 1usize), ("conv2d_s2", 2)] {
        let oh = (4 + 2 - 3) / stride + 1;
        let cw = rand_tensor(&mut rng, &[2, 3, oh, oh], -1.0, 1.0);
        out.push((
            name,
            check(
                |g, x| {
                    let k = g.constant(kern.clone())?;
                    let bi = g.constant(bias.clone())?;
                    let y = g.conv2d(x, k, Some(bi), stride, 1)?;
                    weighted(g, y, &cw)
                },
                &x,
            ),
        ));
        let ow = cw.clone();
        out.push((
            "conv2d_weight",
            check(
                |g, k| {
                    let xi = g.constant(x.clone())?;
                    let bi = g.constant(bias.clone())?;
                    let y = g.conv2d(xi, k, Some(bi), stride, 1)?;
                    weighted(g, y, &ow)
                },
                &kern,
            ),
        ));
        out.push((
            "conv2d_bias",
            check(
                |g, bi| {
                    let xi = g.constant(x.clone())?;
                    let k = g.constant(kern.clone())?;
                    let y = g.conv2d(xi, k, Some(bi), stride, 1)?;
                    weighted(g, y, &cw)
                },
                &bias,
            ),
        ));
    }

    let uw = rand_tensor(&mut rng, &[2, 2, 8, 8], -1.0, 1.0);
    out.push((
        "upsample2x",
        check(
            |g, x| {
                let y = g.upsample2x(x)?;
                weighted(g, y, &uw)
            },
            &x,
        ),
    ));

    let cw1 = rand_tensor(&mut rng, &[2, 4, 4, 4], -1.0, 1.0);
    out.push((
        "concat_channel",
        check(
            |g, x| {
                let o = g.constant(other.clone())?;
                let y = g.concat(&[o, x])?;
                weighted(g, y, &cw1)
            },
            &x,
        ),
    ));
    let cw0 = rand_tensor(&mut rng, &[4, 2, 4, 4], -1.0, 1.0);
    out.push((
        "concat_batch",
        check(
            |g, x| {
                let o = g.constant(other.clone())?;
                let y = g.concat_batch(&[x, o])?;
                weighted(g, y, &cw0)
            },
            &x,
        ),
    ));
    let sw = rand_tensor(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
    out.push((
        "batch_slice",
        check(
            |g, x| {
                let y = g.batch_slice(x, 1, 2)?;
                weighted(g, y, &sw)
            },
            &x,
        ),
    ));

    let rw = rand_tensor(&mut rng, &s4, 0.0, 1.0);
    let rl = rand_tensor(&mut rng, &s4, 1e-3, 1.0);
    out.push((
        "reorient_z",
        check(
            |g, z| {
                let w = g.constant(rw.clone())?;
                let l = g.constant(rl.clone())?;
                let y = g.reorient(z, w, l)?;
                weighted(g, y, &wts)
            },
            &x,
        ),
    ));
    out.push((
        "reorient_w",
        check(
            |g, w| {
                let z = g.constant(x.clone())?;
                let l = g.constant(rl.clone())?;
                let y = g.reorient(z, w, l)?;
                weighted(g, y, &wts)
            },
            &rw,
        ),
    ));
    out.push((
        "reorient_lambda",
        check(
            |g, l| {
                let z = g.constant(x.clone())?;
                let w = g.constant(rw.clone())?;
                let y = g.reorient(z, w, l)?;
                weighted(g, y, &wts)
            },
            &rl,
        ),
    ));
    out
}

/// One random instance of the full attack objective
/// `β₁ L_removal(API(D, R(Y))) + β₂ L_fidelity(R(Y), Y)` in `f64`, viewed as a
/// function of the remover's input batch. The NC threshold is set low so
/// every response is reoriented.
pub struct AttackLossCase {
    pub variant: LossVariant,
    pub y: Tensor<f64>,
    remover: ModelParams<f64>,
    decoder: ModelParams<f64>,
    dgs: DgsConfig,
    w0: Tensor<f32>,
    beta: (f64, f64),
}

impl AttackLossCase {
    pub fn new(seed: u64, variant: LossVariant) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = 8;
        let shape = vec![1, 1, size, size];
        let mark = (0..size * size)
            .map(|_| if rng.random_bool(0.25) { 0.0 } else { 1.0 })
            .collect();
        let w = Tensor::new(shape.clone(), mark).unwrap();
        let w0 = Tensor::ones(shape);
        let p = make_p(size * size, 1e-3, 1e-1, seed).unwrap();
        let dgs = DgsConfig::new(Some(p), w, w0.clone(), 0.05, true).unwrap();
        let remover = randomize(init_params(Arch::Remover, seed), &mut rng).cast::<f64>();
        let decoder = init_params(Arch::Decoder, seed + 1).cast::<f64>();
        let y = rand_tensor(&mut rng, &[2, 1, size, size], 0.0, 1.0);
        let beta = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
        Self {
            variant,
            y,
            remover,
            decoder,
            dgs,
            w0,
            beta,
        }
    }

    /// First admissible case at or after `seed`, with the number of draws
    /// rejected on the way.
    pub fn admissible(seed: u64, variant: LossVariant) -> (Self, usize) {
        (0..)
            .map(|k| Self::new(seed + 7919 * k as u64, variant))
            .enumerate()
            .find(|(_, c)| c.stencil_is_smooth(GRAD_CHECK_EPS))
            .map(|(k, c)| (c, k))
            .unwrap()
    }

    fn pattern(&self, y: Tensor<f64>) -> Vec<bool> {
        let mut g = Graph::new();
        let yi = g.constant(y).unwrap();
        self.build(&mut g, yi).unwrap();
        g.activation_pattern()
    }

    /// Central differences are only an oracle when no kink of the network
    /// or loss lies between `y - eps` and `y + eps` along any axis.
    pub fn stencil_is_smooth(&self, eps: f64) -> bool {
        let here = self.pattern(self.y.clone());
        (0..self.y.numel()).all(|i| {
            [eps, -eps].into_iter().all(|e| {
                let mut p = self.y.clone();
                p.data_mut()[i] += e;
                self.pattern(p) == here
            })
        })
    }

    pub fn build(&self, g: &mut Graph<f64>, yi: NodeId) -> Result<NodeId> {
        let pr = self.remover.bind(g, false)?;
        let pd = self.decoder.bind(g, false)?;
        let ry = remove(g, &pr, yi)?;
        let api = decoder_api(g, &pd, &self.dgs, ry)?;
        assert!(api.protected.iter().all(|&p| p));
        let rl = removal_loss(g, self.variant, api.output, &self.w0)?;
        let fl = attack_fidelity_loss(g, ry, yi)?;
        let a = g.scale(rl, self.beta.0)?;
        let b = g.scale(fl, self.beta.1)?;
        g.add(a, b)
    }
}

/// grad_check of the composed attack objective on the first admissible
/// draw from `seed`; also returns how many draws were rejected.
pub fn attack_loss_check(seed: u64, variant: LossVariant) -> (f64, usize) {
    let (case, rejected) = AttackLossCase::admissible(seed, variant);
    (check(|g, yi| case.build(g, yi), &case.y), rejected)
}

/// Replaces the zeroed output layer so the remover is not the identity.
fn randomize(params: ModelParams, rng: &mut ChaCha8Rng) -> ModelParams {
    let entries = params
        .entries()
        .iter()
        .map(|(name, t)| {
            let t = if t.data().iter().all(|&v| v == 0.0) && t.shape().len() == 4 {
                Tensor::new(
                    t.shape().to_vec(),
                    (0..t.numel()).map(|_| rng.random_range(-0.1f32..0.1)).collect(),
                )
                .unwrap()
            } else {
                t.clone()
            };
            (name.clone(), t)
        })
        .collect();
    ModelParams::new(entries).unwrap()
}
