//! Tiny convolutional image-to-image networks and their optimizer.
//!
//! All three networks take `[N, 1, H, W]` grayscale batches with values in
//! `[0, 1]`. Layers are 3×3 zero-padded convolutions separated by leaky ReLU
//! with slope [`LEAKY_SLOPE`].
//!
//! | arch      | layers                                                       | output            |
//! |-----------|--------------------------------------------------------------|-------------------|
//! | encoder   | concat(X, W) → 2→16 → 16→16 → 16→1                            | `X + residual`    |
//! | decoder   | 1→16 → 16→16 → 16→1                                           | `sigmoid(...)`    |
//! | remover   | 1→16 (stride 2) → 16→16 → up×2 → concat(input) → 17→16 → 16→1 | `Y + residual`    |

mod adam;

pub use adam::{adam_step, AdamState};

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Gradients, Graph, NodeId, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
const HIDDEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Encoder,
    Decoder,
    Remover,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Encoder => "encoder",
            Arch::Decoder => "decoder",
            Arch::Remover => "remover",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Arch::Encoder),
            "decoder" => Ok(Arch::Decoder),
            "remover" => Ok(Arch::Remover),
            other => Err(Error::invalid(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvSpec {
    name: &'static str,
    cin: usize,
    cout: usize,
}

impl Arch {
    fn layers(self) -> &'static [ConvSpec] {
        const fn c(name: &'static str, cin: usize, cout: usize) -> ConvSpec {
            ConvSpec { name, cin, cout }
        }
        const ENCODER: &[ConvSpec] = &[c("conv1", 2, HIDDEN), c("conv2", HIDDEN, HIDDEN), c("conv3", HIDDEN, 1)];
        const DECODER: &[ConvSpec] = &[c("conv1", 1, HIDDEN), c("conv2", HIDDEN, HIDDEN), c("conv3", HIDDEN, 1)];
        const REMOVER: &[ConvSpec] = &[
            c("down", 1, HIDDEN),
            c("mid", HIDDEN, HIDDEN),
            c("fuse", HIDDEN + 1, HIDDEN),
            c("out", HIDDEN, 1),
        ];
        match self {
            Arch::Encoder => ENCODER,
            Arch::Decoder => DECODER,
            Arch::Remover => REMOVER,
        }
    }

    fn seed_salt(self) -> u64 {
        match self {
            Arch::Encoder => 0x656e_636f,
            Arch::Decoder => 0x6465_636f,
            Arch::Remover => 0x7265_6d6f,
        }
    }

    /// Expected `(name, shape)` list, in parameter order.
    pub fn param_shapes(self) -> Vec<(String, Vec<usize>)> {
        self.layers()
            .iter()
            .flat_map(|l| {
                [
                    (format!("{self}.{}.weight", l.name), vec![l.cout, l.cin, 3, 3]),
                    (format!("{self}.{}.bias", l.name), vec![l.cout]),
                ]
            })
            .collect()
    }
}

/// Ordered, uniquely named parameter set of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Element = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Element> ModelParams<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (name, t) in &entries {
            if !seen.insert(name.as_str()) {
                return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite { op: "params" });
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Checks names and shapes against an architecture.
    pub fn validate(&self, arch: Arch) -> Result<()> {
        let expected = arch.param_shapes();
        if expected.len() != self.entries.len() {
            return Err(Error::invalid(format!(
                "{arch} expects {} tensors, found {}",
                expected.len(),
                self.entries.len()
            )));
        }
        for ((name, shape), (n, t)) in expected.iter().zip(&self.entries) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::invalid(format!(
                    "{arch} expects `{name}` {shape:?}, found `{n}` {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Registers every tensor in `g`. Frozen (`trainable == false`) params
    /// still pass gradients to their inputs but get none themselves.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<BoundParams> {
        let ids = self
            .entries
            .iter()
            .map(|(_, t)| g.leaf(t.clone().with_requires_grad(trainable)))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundParams { ids })
    }
}

/// Graph handles for a [`ModelParams`], in parameter order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    ids: Vec<NodeId>,
}

impl BoundParams {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// Gradients for each parameter, in parameter order.
    pub fn grads<T: Element>(&self, grads: &Gradients<T>) -> Result<Vec<Tensor<T>>> {
        self.ids.iter().map(|&id| grads.wrt(id).cloned()).collect()
    }

    fn layer(&self, i: usize) -> (NodeId, NodeId) {
        (self.ids[2 * i], self.ids[2 * i + 1])
    }
}

/// The remover's last convolution starts at zero, so a fresh remover is the
/// identity map and its first queries carry the mark like the attacker's data.
const REMOVER_OUT_WEIGHT: &str = "remover.out.weight";

/// Kaiming-uniform weights (`bound = sqrt(6 / fan_in)`) and zero biases,
/// except for the remover's zeroed output layer.
pub fn init_params(arch: Arch, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ arch.seed_salt());
    let entries = arch
        .param_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let t = if shape.len() == 4 {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let bound = (6.0 / fan_in).sqrt() as f32;
                let n = shape.iter().product();
                if name == REMOVER_OUT_WEIGHT {
                    return (name, Tensor::zeros(shape));
                }
                let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
                Tensor::new(shape, data).expect("shape product matches")
            } else {
                Tensor::zeros(shape)
            };
            (name, t)
        })
        .collect();
    ModelParams { entries }
}

fn conv_layer<T: Element>(g: &mut Graph<T>, p: &BoundParams, i: usize, x: NodeId, stride: usize) -> Result<NodeId> {
    let (w, b) = p.layer(i);
    g.conv2d(x, w, Some(b), stride, 1)
}

fn conv_act<T: Element>(g: &mut Graph<T>, p: &BoundParams, i: usize, x: NodeId, stride: usize) -> Result<NodeId> {
    let y = conv_layer(g, p, i, x, stride)?;
    g.leaky_relu(y, LEAKY_SLOPE)
}

/// `Y = X + residual(concat(X, W))`. `w` is the mark repeated over the batch.
pub fn encode<T: Element>(g: &mut Graph<T>, p: &BoundParams, x: NodeId, w: NodeId) -> Result<NodeId> {
    let xw = g.concat(&[x, w])?;
    let h = conv_act(g, p, 0, xw, 1)?;
    let h = conv_act(g, p, 1, h, 1)?;
    let r = conv_layer(g, p, 2, h, 1)?;
    g.add(x, r)
}

pub fn decode<T: Element>(g: &mut Graph<T>, p: &BoundParams, s: NodeId) -> Result<NodeId> {
    let h = conv_act(g, p, 0, s, 1)?;
    let h = conv_act(g, p, 1, h, 1)?;
    let z = conv_layer(g, p, 2, h, 1)?;
    g.sigmoid(z)
}

/// One-level U-shaped remover; `H` and `W` must be even.
pub fn remove<T: Element>(g: &mut Graph<T>, p: &BoundParams, y: NodeId) -> Result<NodeId> {
    let [_, _, h, w] = g.value(y).dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("remover", format!("odd spatial size {h}x{w}")));
    }
    let d = conv_act(g, p, 0, y, 2)?;
    let m = conv_act(g, p, 1, d, 1)?;
    let u = g.upsample2x(m)?;
    let cat = g.concat(&[u, y])?;
    let f = conv_act(g, p, 2, cat, 1)?;
    let r = conv_layer(g, p, 3, f, 1)?;
    g.add(y, r)
}

/// Repeats a single `[1, C, H, W]` image `n` times along the batch axis.
pub fn repeat_batch<T: Element>(img: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    Tensor::stack(&vec![img.clone(); n])
}

/// Decoder forward pass outside of training.
pub fn run_decoder(params: &ModelParams, s: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false)?;
    let x = g.constant(s.clone())?;
    let z = decode(&mut g, &p, x)?;
    Ok(g.value(z).clone())
}

pub fn run_encoder(params: &ModelParams, x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false)?;
    let xi = g.constant(x.clone())?;
    let wi = g.constant(repeat_batch(w, x.batch_len())?)?;
    let y = encode(&mut g, &p, xi, wi)?;
    Ok(g.value(y).clone())
}

pub fn run_remover(params: &ModelParams, y: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false)?;
    let yi = g.constant(y.clone())?;
    let r = remove(&mut g, &p, yi)?;
    Ok(g.value(r).clone())
}
