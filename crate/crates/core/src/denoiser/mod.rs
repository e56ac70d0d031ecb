//! The conditional noise predictor `ε_θ(x_t | cond, t)`: a U-Net over the
//! `k` noisy frames, conditioned on observed frames both by channel
//! concatenation at the stem and through SPADE normalization in every
//! residual block.

pub mod checkpoint;
pub mod layers;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::numcore::{self as nc, avg_pool2x, concat_channels, silu, upsample_nearest2x, Scalar, Tensor};
use crate::schedule::NoisePredictor;
use crate::seed::rng_from;
use layers::{
    output_norm, AttentionBlock, Conv2d, GroupNorm, ParamStore, ResBlock, ResidualBlockSpec, Scope, TimeEmbedding,
};

pub use layers::{sinusoidal_embedding, BlockNorm, Spade, EMBEDDING_BASE};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Channels per video frame (1 for grayscale).
    pub image_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Observed frames before the predicted block.
    pub past_frames: usize,
    /// Frames generated per pass.
    pub predicted_frames: usize,
    /// Observed frames after the predicted block (0 outside the ablation).
    pub future_frames: usize,
    pub base_width: usize,
    pub channel_multipliers: Vec<usize>,
    pub attention_levels: Vec<usize>,
    pub groups: usize,
    pub heads: usize,
    /// Width `D` of the raw sinusoidal encoding.
    pub time_embed_dim: usize,
    pub spade_hidden: usize,
    pub spade: bool,
}

impl UNetConfig {
    /// Desk-scale defaults: 16×16 grayscale, 2 past → 5 predicted frames.
    pub fn desk() -> Self {
        Self {
            image_channels: 1,
            height: 16,
            width: 16,
            past_frames: 2,
            predicted_frames: 5,
            future_frames: 0,
            base_width: 32,
            channel_multipliers: vec![1, 2],
            attention_levels: vec![1],
            groups: 8,
            heads: 4,
            time_embed_dim: 32,
            spade_hidden: 16,
            spade: true,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn noisy_channels(&self) -> usize {
        self.predicted_frames * self.image_channels
    }

    pub fn cond_channels(&self) -> usize {
        (self.past_frames + self.future_frames) * self.image_channels
    }

    /// Stem input width: noisy frames plus concatenated conditioning.
    pub fn in_channels(&self) -> usize {
        self.noisy_channels() + self.cond_channels()
    }

    pub fn time_width(&self) -> usize {
        4 * self.base_width
    }

    fn level_width(&self, level: usize) -> usize {
        self.base_width * self.channel_multipliers[level]
    }

    /// Channel widths seen by group norms and attention, for validation.
    fn normalized_widths(&self) -> Vec<usize> {
        let mut widths = vec![self.base_width];
        let mut ch = self.base_width;
        let mut skips = Vec::new();
        for level in 0..self.levels() {
            widths.push(ch);
            ch = self.level_width(level);
            widths.push(ch);
            skips.push(ch);
        }
        for level in (0..self.levels()).rev() {
            let skip = skips.pop().expect("one skip per level");
            widths.push(ch + skip);
            ch = self.level_width(level);
            widths.push(ch);
        }
        widths
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_channels", self.image_channels),
            ("height", self.height),
            ("width", self.width),
            ("past_frames", self.past_frames),
            ("predicted_frames", self.predicted_frames),
            ("base_width", self.base_width),
            ("groups", self.groups),
            ("heads", self.heads),
            ("time_embed_dim", self.time_embed_dim),
            ("spade_hidden", self.spade_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config_err!("{name} must be positive"));
            }
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return Err(config_err!("channel_multipliers must be non-empty and positive"));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(config_err!("time_embed_dim must be even, got {}", self.time_embed_dim));
        }
        let factor = 1usize << (self.levels() - 1);
        if !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(config_err!(
                "spatial size {}x{} not divisible by 2^(levels-1) = {factor}",
                self.height,
                self.width
            ));
        }
        if let Some(bad) = self.attention_levels.iter().find(|l| **l >= self.levels()) {
            return Err(config_err!("attention level {bad} >= levels {}", self.levels()));
        }
        for w in self.normalized_widths() {
            if w % self.groups != 0 {
                return Err(config_err!("{w} channels not divisible by {} groups", self.groups));
            }
        }
        for &level in &self.attention_levels {
            let w = self.level_width(level);
            if !w.is_multiple_of(self.heads) {
                return Err(config_err!("{w} attention channels not divisible by {} heads", self.heads));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DownLevel<T: Scalar> {
    block: ResBlock<T>,
    attention: Option<AttentionBlock<T>>,
    downsample: Option<Conv2d<T>>,
}

#[derive(Clone, Debug)]
struct UpLevel<T: Scalar> {
    block: ResBlock<T>,
    attention: Option<AttentionBlock<T>>,
    upsample: Option<Conv2d<T>>,
}

/// The noise-prediction network with its named parameters.
#[derive(Clone, Debug)]
pub struct DenoiserModel<T: Scalar> {
    config: UNetConfig,
    params: ParamStore<T>,
    null_condition: Tensor<T>,
    time: TimeEmbedding<T>,
    stem: Conv2d<T>,
    down: Vec<DownLevel<T>>,
    mid_block: ResBlock<T>,
    mid_attention: Option<AttentionBlock<T>>,
    up: Vec<UpLevel<T>>,
    out_norm: GroupNorm<T>,
    out_conv: Conv2d<T>,
}

impl<T: Scalar> DenoiserModel<T> {
    /// Builds and initializes a model; the parameter layout depends only on
    /// `config`, the values on `seed`.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_from(seed);
        let model = {
            let mut root = Scope { store: &mut store, rng: &mut rng, prefix: String::new() };
            Self::build(&config, &mut root)
        };
        Ok(Self { params: store, ..model })
    }

    fn build<R: Rng>(cfg: &UNetConfig, s: &mut Scope<'_, T, R>) -> Self {
        let cc = cfg.cond_channels();
        let tw = cfg.time_width();
        let null_condition = s.zeros("null_condition", &[cc, cfg.height, cfg.width]);
        let time = TimeEmbedding::new(&mut s.sub("time"), cfg.time_embed_dim, tw);
        let stem = Conv2d::new(&mut s.sub("stem"), cfg.in_channels(), cfg.base_width, 3, 1, false);
        let res = |s: &mut Scope<'_, T, R>, name: &str, cin: usize, cout: usize| {
            let spec = ResidualBlockSpec { in_channels: cin, out_channels: cout, time_width: tw, spade: cfg.spade };
            ResBlock::new(&mut s.sub(name), spec, cc, cfg.spade_hidden, cfg.groups)
        };
        let attn = |s: &mut Scope<'_, T, R>, name: &str, level: usize, ch: usize| {
            cfg.attention_levels
                .contains(&level)
                .then(|| AttentionBlock::new(&mut s.sub(name), ch, cfg.heads, cfg.groups))
        };

        let levels = cfg.levels();
        let mut ch = cfg.base_width;
        let mut skip_widths = Vec::new();
        let mut down = Vec::new();
        for level in 0..levels {
            let out = cfg.level_width(level);
            let block = res(s, &format!("down{level}.block"), ch, out);
            let attention = attn(s, &format!("down{level}.attn"), level, out);
            ch = out;
            skip_widths.push(ch);
            let downsample = (level + 1 < levels)
                .then(|| Conv2d::new(&mut s.sub(&format!("down{level}.downsample")), ch, ch, 3, 2, false));
            down.push(DownLevel { block, attention, downsample });
        }
        let mid_block = res(s, "mid.block", ch, ch);
        let mid_attention = attn(s, "mid.attn", levels - 1, ch);
        let mut up = Vec::new();
        for level in (0..levels).rev() {
            let out = cfg.level_width(level);
            let skip = skip_widths.pop().expect("one skip per level");
            let block = res(s, &format!("up{level}.block"), ch + skip, out);
            let attention = attn(s, &format!("up{level}.attn"), level, out);
            ch = out;
            let upsample =
                (level > 0).then(|| Conv2d::new(&mut s.sub(&format!("up{level}.upsample")), ch, ch, 3, 1, false));
            up.push(UpLevel { block, attention, upsample });
        }
        let out_norm = GroupNorm::new(&mut s.sub("out.norm"), ch, cfg.groups);
        let out_conv = Conv2d::new(&mut s.sub("out.conv"), ch, cfg.noisy_channels(), 3, 1, false);
        Self {
            config: cfg.clone(),
            params: ParamStore::new(),
            null_condition,
            time,
            stem,
            down,
            mid_block,
            mid_attention,
            up,
            out_norm,
            out_conv,
        }
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn null_condition(&self) -> &Tensor<T> {
        &self.null_condition
    }

    pub fn time_embedding(&self) -> &TimeEmbedding<T> {
        &self.time
    }

    /// Copies all parameter values from `other` (same config).
    pub fn load_values_from(&self, other: &DenoiserModel<T>) -> Result<()> {
        if self.config != other.config {
            return Err(config_err!("cannot copy parameters between different configs"));
        }
        for ((_, dst), (_, src)) in self.params.iter().zip(other.params.iter()) {
            dst.data_mut().copy_from_slice(&src.data());
        }
        Ok(())
    }

    /// Predicted noise for `noisy: [N, k·C, H, W]` given
    /// `cond: [N, (p+f)·C, H, W]` and one timestep per sample.
    pub fn forward(&self, noisy: &Tensor<T>, cond: &Tensor<T>, ts: &[usize]) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let [n, c, h, w] = noisy.dims4()?;
        let [cn, cc, ch, cw] = cond.dims4()?;
        if c != cfg.noisy_channels() || cc != cfg.cond_channels() {
            return Err(config_err!(
                "model expects {} noisy and {} conditioning channels, got {c} and {cc}",
                cfg.noisy_channels(),
                cfg.cond_channels()
            ));
        }
        if (h, w) != (cfg.height, cfg.width) || (cn, ch, cw) != (n, h, w) {
            return Err(dim_err!(
                "inputs {:?} / {:?} do not match the configured {}x{} frames",
                noisy.shape(),
                cond.shape(),
                cfg.height,
                cfg.width
            ));
        }
        if ts.len() != n {
            return Err(dim_err!("{} timesteps for a batch of {n}", ts.len()));
        }

        let time_act = silu(&self.time.forward(ts)?);
        let mut cond_pyramid = vec![cond.clone()];
        for _ in 1..cfg.levels() {
            let next = avg_pool2x(cond_pyramid.last().expect("non-empty"))?;
            cond_pyramid.push(next);
        }

        let mut h = self.stem.forward(&concat_channels(&[noisy, cond])?)?;
        let mut skips = Vec::with_capacity(cfg.levels());
        for (level, stage) in self.down.iter().enumerate() {
            h = stage.block.forward(&h, &time_act, &cond_pyramid[level])?;
            if let Some(a) = &stage.attention {
                h = a.forward(&h)?;
            }
            skips.push(h.clone());
            if let Some(d) = &stage.downsample {
                h = d.forward(&h)?;
            }
        }
        let bottom = cfg.levels() - 1;
        h = self.mid_block.forward(&h, &time_act, &cond_pyramid[bottom])?;
        if let Some(a) = &self.mid_attention {
            h = a.forward(&h)?;
        }
        for (stage, level) in self.up.iter().zip((0..cfg.levels()).rev()) {
            let skip = skips.pop().expect("one skip per level");
            h = concat_channels(&[&h, &skip])?;
            h = stage.block.forward(&h, &time_act, &cond_pyramid[level])?;
            if let Some(a) = &stage.attention {
                h = a.forward(&h)?;
            }
            if let Some(u) = &stage.upsample {
                h = u.forward(&upsample_nearest2x(&h)?)?;
            }
        }
        let h = silu(&output_norm(&self.out_norm, &h)?);
        self.out_conv.forward(&h)
    }

    /// Per-sample Bernoulli(`p_drop`) replacement of the conditioning with
    /// the learned null condition.
    pub fn drop_condition<R: Rng + ?Sized>(&self, cond: &Tensor<T>, p_drop: f64, rng: &mut R) -> Result<Tensor<T>> {
        let (out, _) = self.drop_condition_with_mask(cond, p_drop, rng)?;
        Ok(out)
    }

    /// [`drop_condition`](Self::drop_condition) that also reports which
    /// samples were replaced.
    pub fn drop_condition_with_mask<R: Rng + ?Sized>(
        &self,
        cond: &Tensor<T>,
        p_drop: f64,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Vec<bool>)> {
        if !(0.0..=1.0).contains(&p_drop) {
            return Err(config_err!("p_drop must lie in [0, 1], got {p_drop}"));
        }
        let n = cond.dims4()?[0];
        let mask: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < p_drop).collect();
        if !mask.iter().any(|m| *m) {
            return Ok((cond.clone(), mask));
        }
        Ok((nc::replace_samples(cond, &self.null_condition, &mask)?, mask))
    }
}

impl<T: Scalar> NoisePredictor<T> for DenoiserModel<T> {
    fn predict_noise(&self, noisy: &Tensor<T>, cond: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        let n = noisy.dims4()?[0];
        self.forward(noisy, cond, &vec![t; n])
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::numcore::init::standard_normal;

    pub(crate) fn tiny() -> UNetConfig {
        UNetConfig {
            image_channels: 1,
            height: 8,
            width: 8,
            past_frames: 2,
            predicted_frames: 2,
            future_frames: 0,
            base_width: 8,
            channel_multipliers: vec![1, 2],
            attention_levels: vec![1],
            groups: 4,
            heads: 2,
            time_embed_dim: 8,
            spade_hidden: 4,
            spade: true,
        }
    }

    #[test]
    fn output_shape_matches_noisy_input() {
        let m = DenoiserModel::<f32>::new(tiny(), 0).unwrap();
        let mut rng = rng_from(1);
        let x = standard_normal::<f32, _>(&[3, 2, 8, 8], &mut rng);
        let c = standard_normal::<f32, _>(&[3, 2, 8, 8], &mut rng);
        let y = m.forward(&x, &c, &[1, 50, 100]).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.all_finite());
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let m = DenoiserModel::<f32>::new(tiny(), 0).unwrap();
        let x = Tensor::zeros(&[1, 3, 8, 8]);
        let c = Tensor::zeros(&[1, 2, 8, 8]);
        assert!(matches!(m.forward(&x, &c, &[1]), Err(crate::Error::Config(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny();
        c.height = 7;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.attention_levels = vec![2];
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.groups = 3;
        assert!(c.validate().is_err());
        assert!(UNetConfig::desk().validate().is_ok());
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let m = DenoiserModel::<f64>::new(tiny(), 4).unwrap();
        let mut rng = rng_from(2);
        let x = standard_normal::<f64, _>(&[3, 2, 8, 8], &mut rng);
        let c = standard_normal::<f64, _>(&[3, 2, 8, 8], &mut rng);
        let ts = [5, 60, 99];
        let y = m.forward(&x, &c, &ts).unwrap().to_vec();
        let perm = [2usize, 0, 1];
        let per = 2 * 64;
        let gather = |t: &Tensor<f64>| -> Tensor<f64> {
            let v = t.to_vec();
            let data = perm.iter().flat_map(|&i| v[i * per..(i + 1) * per].to_vec()).collect();
            Tensor::from_vec(t.shape(), data).unwrap()
        };
        let ts_p: Vec<usize> = perm.iter().map(|&i| ts[i]).collect();
        let yp = m.forward(&gather(&x), &gather(&c), &ts_p).unwrap().to_vec();
        for (j, &i) in perm.iter().enumerate() {
            for e in 0..per {
                assert!((yp[j * per + e] - y[i * per + e]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = DenoiserModel::<f32>::new(tiny(), 9).unwrap();
        let x = Tensor::full(&[1, 2, 8, 8], 0.3);
        let c = Tensor::full(&[1, 2, 8, 8], -0.2);
        let a = m.forward(&x, &c, &[17]).unwrap().to_vec();
        let b = m.forward(&x, &c, &[17]).unwrap().to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_count_grows_with_width() {
        let small = DenoiserModel::<f32>::new(tiny(), 0).unwrap();
        let again = DenoiserModel::<f32>::new(tiny(), 123).unwrap();
        assert_eq!(small.parameter_count(), again.parameter_count());
        let mut wide = tiny();
        wide.base_width *= 2;
        let wide = DenoiserModel::<f32>::new(wide, 0).unwrap();
        assert!(wide.parameter_count() > small.parameter_count());
    }

    #[test]
    fn drop_condition_extremes() {
        let m = DenoiserModel::<f64>::new(tiny(), 0).unwrap();
        m.null_condition().data_mut().iter_mut().for_each(|v| *v = 7.0);
        let c = Tensor::full(&[4, 2, 8, 8], 0.5);
        let mut rng = rng_from(3);
        assert_eq!(m.drop_condition(&c, 0.0, &mut rng).unwrap().to_vec(), c.to_vec());
        let all = m.drop_condition(&c, 1.0, &mut rng).unwrap();
        assert!(all.to_vec().iter().all(|v| *v == 7.0));
        assert!(m.drop_condition(&c, 1.5, &mut rng).is_err());
    }

    #[test]
    fn drop_fraction_matches_probability() {
        let m = DenoiserModel::<f64>::new(tiny(), 0).unwrap();
        let c = Tensor::zeros(&[1, 2, 8, 8]);
        let mut rng = rng_from(4);
        let p = 0.1;
        let trials = 10_000;
        let dropped = (0..trials).filter(|_| m.drop_condition_with_mask(&c, p, &mut rng).unwrap().1[0]).count();
        let frac = dropped as f64 / trials as f64;
        let se = (p * (1.0 - p) / trials as f64).sqrt();
        assert!((frac - p).abs() <= 3.0 * se, "fraction {frac}");
    }
}
