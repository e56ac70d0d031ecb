//! Parameterized building blocks of the noise predictor.

use rand::Rng;

use crate::error::Result;
use crate::numcore::init::{fan_in_uniform, ones_param, zeros_param};
use crate::numcore::{
    self as nc, add, add_per_channel, channel_affine, group_norm, group_norm_plain, linear, silu, AttentionWeights,
    Scalar, Tensor,
};

/// Ordered, named parameter collection. Layers keep clones of the tensors
/// they register, so in-place optimizer updates are visible everywhere.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, t: Tensor<T>) -> Tensor<T> {
        let name = name.into();
        debug_assert!(self.entries.iter().all(|(n, _)| *n != name), "duplicate parameter {name}");
        self.entries.push((name, t.clone()));
        t
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Builder context: a parameter store, a name prefix and an init RNG.
pub(crate) struct Scope<'a, T: Scalar, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    pub prefix: String,
}

impl<'a, T: Scalar, R: Rng> Scope<'a, T, R> {
    pub fn sub(&mut self, name: &str) -> Scope<'_, T, R> {
        Scope { store: self.store, rng: self.rng, prefix: format!("{}{name}.", self.prefix) }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}{leaf}", self.prefix)
    }

    pub fn uniform(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let t = fan_in_uniform(shape, fan_in, self.rng);
        let name = self.name(leaf);
        self.store.register(name, t)
    }

    pub fn zeros(&mut self, leaf: &str, shape: &[usize]) -> Tensor<T> {
        let name = self.name(leaf);
        self.store.register(name, zeros_param(shape))
    }

    pub fn ones(&mut self, leaf: &str, shape: &[usize]) -> Tensor<T> {
        let name = self.name(leaf);
        self.store.register(name, ones_param(shape))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub(crate) fn new<R: Rng>(
        s: &mut Scope<'_, T, R>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        zero_init: bool,
    ) -> Self {
        let shape = [cout, cin, kernel, kernel];
        let weight =
            if zero_init { s.zeros("weight", &shape) } else { s.uniform("weight", &shape, cin * kernel * kernel) };
        let bias = s.zeros("bias", &[cout]);
        Self { weight, bias, stride, padding: kernel / 2 }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = nc::conv2d(x, &self.weight, self.stride, self.padding)?;
        nc::add_channel_bias(&y, &self.bias)
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub(crate) fn new<R: Rng>(s: &mut Scope<'_, T, R>, fan_in: usize, fan_out: usize) -> Self {
        let weight = s.uniform("weight", &[fan_out, fan_in], fan_in);
        let bias = s.zeros("bias", &[fan_out]);
        Self { weight, bias }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        linear(x, &self.weight, Some(&self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm<T: Scalar> {
    pub groups: usize,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> GroupNorm<T> {
    pub(crate) fn new<R: Rng>(s: &mut Scope<'_, T, R>, channels: usize, groups: usize) -> Self {
        Self { groups, gamma: s.ones("gamma", &[channels]), beta: s.zeros("beta", &[channels]) }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        group_norm(x, self.groups, &self.gamma, &self.beta)
    }
}

/// Base of the sinusoidal noise-level encoding.
pub const EMBEDDING_BASE: f64 = 10_000.0;

/// Interleaved `[cos(t·c^(−2d/D)), sin(t·c^(−2d/D))]` for `d = 1..=D/2`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for d in 1..=half {
        let freq = EMBEDDING_BASE.powf(-2.0 * d as f64 / dim as f64);
        out.push((t * freq).cos());
        out.push((t * freq).sin());
    }
    out
}

/// Sinusoidal encoding followed by dense → SiLU → dense.
#[derive(Clone, Debug)]
pub struct TimeEmbedding<T: Scalar> {
    pub dim: usize,
    pub dense1: Linear<T>,
    pub dense2: Linear<T>,
}

impl<T: Scalar> TimeEmbedding<T> {
    pub(crate) fn new<R: Rng>(s: &mut Scope<'_, T, R>, dim: usize, width: usize) -> Self {
        Self {
            dim,
            dense1: Linear::new(&mut s.sub("dense1"), dim, width),
            dense2: Linear::new(&mut s.sub("dense2"), width, width),
        }
    }

    pub fn raw(&self, ts: &[usize]) -> Result<Tensor<T>> {
        let data = ts.iter().flat_map(|&t| sinusoidal_embedding(t as f64, self.dim)).map(T::from_f64_lossy).collect();
        Tensor::from_vec(&[ts.len(), self.dim], data)
    }

    pub fn forward(&self, ts: &[usize]) -> Result<Tensor<T>> {
        let h = silu(&self.dense1.forward(&self.raw(ts)?)?);
        self.dense2.forward(&h)
    }
}

/// Spatially-adaptive normalization: parameter-free group norm modulated by
/// per-pixel scale and shift maps predicted from the conditioning frames,
/// `norm(x)·(1 + γ(cond)) + β(cond)`.
#[derive(Clone, Debug)]
pub struct Spade<T: Scalar> {
    pub groups: usize,
    pub shared: Conv2d<T>,
    pub gamma: Conv2d<T>,
    pub beta: Conv2d<T>,
}

impl<T: Scalar> Spade<T> {
    pub(crate) fn new<R: Rng>(
        s: &mut Scope<'_, T, R>,
        channels: usize,
        cond_channels: usize,
        hidden: usize,
        groups: usize,
    ) -> Self {
        Self {
            groups,
            shared: Conv2d::new(&mut s.sub("shared"), cond_channels, hidden, 3, 1, false),
            gamma: Conv2d::new(&mut s.sub("gamma"), hidden, channels, 3, 1, true),
            beta: Conv2d::new(&mut s.sub("beta"), hidden, channels, 3, 1, true),
        }
    }

    /// `cond_map` must already be at the spatial size of `x`.
    pub fn forward(&self, x: &Tensor<T>, cond_map: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, _, h, w] = x.dims4()?;
        let [cn, _, ch, cw] = cond_map.dims4()?;
        if (cn, ch, cw) != (n, h, w) {
            return Err(crate::error::dim_err!(
                "spade: conditioning {:?} does not match features {:?}",
                cond_map.shape(),
                x.shape()
            ));
        }
        let normed = group_norm_plain(x, self.groups)?;
        let hidden = silu(&self.shared.forward(cond_map)?);
        let gamma = self.gamma.forward(&hidden)?;
        let beta = self.beta.forward(&hidden)?;
        let modulated = add(&normed, &nc::mul(&normed, &gamma)?)?;
        add(&modulated, &beta)
    }
}

/// Normalization inside a residual block.
#[derive(Clone, Debug)]
pub enum BlockNorm<T: Scalar> {
    Spade(Spade<T>),
    Group(GroupNorm<T>),
}

impl<T: Scalar> BlockNorm<T> {
    fn new<R: Rng>(
        s: &mut Scope<'_, T, R>,
        spade: bool,
        channels: usize,
        cond_channels: usize,
        hidden: usize,
        groups: usize,
    ) -> Self {
        if spade {
            BlockNorm::Spade(Spade::new(s, channels, cond_channels, hidden, groups))
        } else {
            BlockNorm::Group(GroupNorm::new(s, channels, groups))
        }
    }

    pub fn forward(&self, x: &Tensor<T>, cond_map: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            BlockNorm::Spade(sp) => sp.forward(x, cond_map),
            BlockNorm::Group(gn) => gn.forward(x),
        }
    }
}

/// Two 3×3 convolutions with time-embedding injection and (optionally
/// SPADE) normalization, plus a shortcut (1×1 projection iff the width
/// changes).
#[derive(Clone, Debug)]
pub struct ResBlock<T: Scalar> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub norm1: BlockNorm<T>,
    pub conv1: Conv2d<T>,
    pub time_proj: Linear<T>,
    pub norm2: BlockNorm<T>,
    pub conv2: Conv2d<T>,
    pub shortcut: Option<Conv2d<T>>,
}

/// Static description of a residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResidualBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub time_width: usize,
    pub spade: bool,
}

impl<T: Scalar> ResBlock<T> {
    pub(crate) fn new<R: Rng>(
        s: &mut Scope<'_, T, R>,
        spec: ResidualBlockSpec,
        cond_channels: usize,
        spade_hidden: usize,
        groups: usize,
    ) -> Self {
        let ResidualBlockSpec { in_channels, out_channels, time_width, spade } = spec;
        Self {
            in_channels,
            out_channels,
            norm1: BlockNorm::new(&mut s.sub("norm1"), spade, in_channels, cond_channels, spade_hidden, groups),
            conv1: Conv2d::new(&mut s.sub("conv1"), in_channels, out_channels, 3, 1, false),
            time_proj: Linear::new(&mut s.sub("time_proj"), time_width, out_channels),
            norm2: BlockNorm::new(&mut s.sub("norm2"), spade, out_channels, cond_channels, spade_hidden, groups),
            conv2: Conv2d::new(&mut s.sub("conv2"), out_channels, out_channels, 3, 1, true),
            shortcut: (in_channels != out_channels)
                .then(|| Conv2d::new(&mut s.sub("shortcut"), in_channels, out_channels, 1, 1, false)),
        }
    }

    /// `time_act` is the SiLU-activated time embedding `[N, time_width]`.
    pub fn forward(&self, x: &Tensor<T>, time_act: &Tensor<T>, cond_map: &Tensor<T>) -> Result<Tensor<T>> {
        let h = silu(&self.norm1.forward(x, cond_map)?);
        let h = self.conv1.forward(&h)?;
        let h = add_per_channel(&h, &self.time_proj.forward(time_act)?)?;
        let h = silu(&self.norm2.forward(&h, cond_map)?);
        let h = self.conv2.forward(&h)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(x)?,
            None => x.clone(),
        };
        add(&skip, &h)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionBlock<T: Scalar> {
    pub heads: usize,
    pub groups: usize,
    pub weights: AttentionWeights<T>,
}

impl<T: Scalar> AttentionBlock<T> {
    pub(crate) fn new<R: Rng>(s: &mut Scope<'_, T, R>, channels: usize, heads: usize, groups: usize) -> Self {
        let weights = AttentionWeights {
            norm_gamma: s.ones("norm.gamma", &[channels]),
            norm_beta: s.zeros("norm.beta", &[channels]),
            qkv_weight: s.uniform("qkv.weight", &[3 * channels, channels, 1, 1], channels),
            qkv_bias: s.zeros("qkv.bias", &[3 * channels]),
            proj_weight: s.uniform("proj.weight", &[channels, channels, 1, 1], channels),
            proj_bias: s.zeros("proj.bias", &[channels]),
        };
        Self { heads, groups, weights }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        nc::self_attention(x, self.heads, self.groups, &self.weights)
    }
}

/// Affine group norm on the network output head.
pub(crate) fn output_norm<T: Scalar>(norm: &GroupNorm<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = group_norm_plain(x, norm.groups)?;
    channel_affine(&n, Some(&norm.gamma), Some(&norm.beta))
}
