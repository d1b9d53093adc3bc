//! Residual discriminator with a realness head and a top-down decoder.
//!
//! The backbone produces one feature level per resolution. The score head
//! reads the 4x4 level; the decoder walks back up the pyramid and predicts a
//! style code and, optionally, a synthesis feature map and partial image
//! at a chosen resolution.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::autograd::{Float, Var};
use crate::config::{ArchConfig, FResolution};
use crate::error::{contract, Result};
use crate::nn::{lrelu, Conv2d, Linear, Module, Param, Tape};

const MBSTD_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
struct DBlock<T> {
    res: usize,
    conv0: Conv2d<T>,
    conv1: Conv2d<T>,
    skip: Conv2d<T>,
}

impl<T: Float> DBlock<T> {
    fn new(arch: &ArchConfig, res: usize, rng: &mut impl Rng) -> Self {
        let (cin, cout) = (arch.width(res), arch.width(res / 2));
        let name = format!("backbone.b{res}");
        DBlock {
            res,
            conv0: Conv2d::new(&format!("{name}.conv0"), cin, cin, 3, true, rng),
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, true, rng),
            skip: Conv2d::new(&format!("{name}.skip"), cin, cout, 1, false, rng),
        }
    }

    fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Var<T> {
        let down = x.downsample2x();
        let skip = self.skip.forward(tape, &down);
        let t = lrelu(&self.conv0.forward(tape, x));
        let t = lrelu(&self.conv1.forward(tape, &t.downsample2x()));
        skip.add(&t).scale(std::f64::consts::FRAC_1_SQRT_2)
    }

    fn params(&self) -> Vec<&Param<T>> {
        [&self.conv0, &self.conv1, &self.skip].into_iter().flat_map(|c| c.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.conv0.params_mut();
        v.extend(self.conv1.params_mut());
        v.extend(self.skip.params_mut());
        v
    }
}

/// Append one channel holding the mean per-feature standard deviation over
/// each group of `min(group, N)` samples. Sample `n` reads the statistic
/// of group slot `n % (N / G)`. Identical samples give exactly zero.
pub fn minibatch_stddev<T: Float>(x: &Var<T>, group: usize) -> Result<Var<T>> {
    let s = x.shape().to_vec();
    contract!(s.len() == 4, "minibatch stddev expects NCHW, got {s:?}");
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let g = group.min(n);
    contract!(g > 0 && n % g == 0, "batch {n} is not divisible by the stddev group {g}");
    let m = n / g;
    let y = x.reshape(&[g, m, c * h * w]);
    let centered = y.sub(&y.mean_axes(&[0]));
    let var = centered.square().mean_axes(&[0]);
    let std = var.add_scalar(MBSTD_EPS).sqrt().add_scalar(-MBSTD_EPS.sqrt());
    let stat = std.mean_axes(&[2]).reshape(&[1, m, 1, 1, 1]).broadcast_to(&[g, m, 1, h, w]).reshape(&[n, 1, h, w]);
    Ok(Var::concat(&[x.clone(), stat], 1))
}

#[derive(Clone, Debug)]
struct ScoreHead<T> {
    group: usize,
    conv: Conv2d<T>,
    fc: Linear<T>,
    out: Linear<T>,
}

impl<T: Float> ScoreHead<T> {
    fn new(arch: &ArchConfig, rng: &mut impl Rng) -> Self {
        let c = arch.width(4);
        ScoreHead {
            group: arch.mbstd_group,
            conv: Conv2d::new("head.conv", c + 1, c, 3, true, rng),
            fc: Linear::new("head.fc", c * 4, c, Some(0.0), 1.0, rng),
            out: Linear::new("head.out", c, 1, Some(0.0), 1.0, rng),
        }
    }

    fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let n = x.shape()[0];
        let c = x.shape()[1];
        let y = minibatch_stddev(x, self.group)?;
        let y = lrelu(&self.conv.forward(tape, &y)).downsample2x();
        let y = lrelu(&self.fc.forward(tape, &y.reshape(&[n, c * 4])));
        Ok(self.out.forward(tape, &y).reshape(&[n]))
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.conv.params();
        v.extend(self.fc.params());
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.conv.params_mut();
        v.extend(self.fc.params_mut());
        v.extend(self.out.params_mut());
        v
    }
}

/// What the decoder predicts for a batch.
pub struct Prediction<T: Float> {
    /// `[N, Dw]`
    pub w: Var<T>,
    /// `[N, Cg(r), r, r]` synthesis features, absent without a spatial target.
    pub features: Option<Var<T>>,
    /// `[N, 3, r, r]` partial image, absent without a spatial target.
    pub image: Option<Var<T>>,
}

#[derive(Clone, Debug)]
struct Decoder<T> {
    topdown: Vec<Conv2d<T>>,
    f_low: Option<Conv2d<T>>,
    f_high: Option<(Conv2d<T>, Conv2d<T>)>,
    w_head: Conv2d<T>,
}

impl<T: Float> Decoder<T> {
    fn new(arch: &ArchConfig, rng: &mut impl Rng) -> Self {
        let top = match arch.f_resolution {
            FResolution::None => 4,
            FResolution::Res(r) => r,
        };
        let mut topdown = Vec::new();
        let mut res = 8;
        while res <= top {
            topdown.push(Conv2d::new(
                &format!("decoder.up{res}"),
                arch.width(res / 2),
                arch.width(res),
                1,
                true,
                rng,
            ));
            res *= 2;
        }
        let c = arch.width(top);
        let spatial = matches!(arch.f_resolution, FResolution::Res(_));
        Decoder {
            topdown,
            f_low: spatial.then(|| Conv2d::new("decoder.f_low", c, 3, 1, true, rng)),
            f_high: spatial.then(|| {
                (
                    Conv2d::new("decoder.f_high0", c, c, 1, true, rng),
                    Conv2d::new("decoder.f_high1", c, c, 1, true, rng),
                )
            }),
            w_head: Conv2d::new("decoder.w", c, arch.w_dim, 1, true, rng),
        }
    }

    fn forward(&self, tape: &Tape<T>, levels: &[(usize, Var<T>)]) -> Result<Prediction<T>> {
        let level = |res: usize| {
            levels
                .iter()
                .find(|(r, _)| *r == res)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| crate::GleadError::Contract(format!("missing feature level {res}")))
        };
        let mut t = level(4)?;
        let mut res = 8;
        // Backbone levels join unprojected: their widths already match.
        for conv in &self.topdown {
            t = lrelu(&conv.forward(tape, &t)).upsample2x().add(&level(res)?);
            res *= 2;
        }
        let n = t.shape()[0];
        let w = self.w_head.forward(tape, &t).mean_axes(&[2, 3]);
        let dw = w.shape()[1];
        let w = w.reshape(&[n, dw]);
        let (features, image) = match (&self.f_high, &self.f_low) {
            (Some((h0, h1)), Some(low)) => {
                (Some(h1.forward(tape, &lrelu(&h0.forward(tape, &t)))), Some(low.forward(tape, &t)))
            }
            _ => (None, None),
        };
        Ok(Prediction { w, features, image })
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = self.topdown.iter().flat_map(|c| c.params()).collect();
        if let Some(l) = &self.f_low {
            v.extend(l.params());
        }
        if let Some((a, b)) = &self.f_high {
            v.extend(a.params());
            v.extend(b.params());
        }
        v.extend(self.w_head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = self.topdown.iter_mut().flat_map(|c| c.params_mut()).collect();
        if let Some(l) = &mut self.f_low {
            v.extend(l.params_mut());
        }
        if let Some((a, b)) = &mut self.f_high {
            v.extend(a.params_mut());
            v.extend(b.params_mut());
        }
        v.extend(self.w_head.params_mut());
        v
    }
}

/// Backbone feature levels, from the input resolution down to 4.
#[derive(Clone)]
pub struct Pyramid<T: Float> {
    /// `(resolution, [N, C, res, res])`
    pub levels: Vec<(usize, Var<T>)>,
}

impl<T: Float> Pyramid<T> {
    pub fn level(&self, res: usize) -> Option<&Var<T>> {
        self.levels.iter().find(|(r, _)| *r == res).map(|(_, v)| v)
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.levels.iter().map(|(r, _)| *r).collect()
    }
}

/// One backbone pass feeding the score head.
pub struct Features<T: Float> {
    /// `[N]`
    pub scores: Var<T>,
    pub pyramid: Pyramid<T>,
}

/// Parameter counts per submodule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub backbone: usize,
    pub head: usize,
    pub decoder: usize,
}

#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    arch: ArchConfig,
    from_rgb: Conv2d<T>,
    blocks: Vec<DBlock<T>>,
    head: ScoreHead<T>,
    decoder: Option<Decoder<T>>,
    backbone_calls: CallCounter,
}

/// Counts backbone passes; clones start from the same count.
#[derive(Debug, Default)]
struct CallCounter(AtomicU64);

impl Clone for CallCounter {
    fn clone(&self) -> Self {
        CallCounter(AtomicU64::new(self.0.load(Ordering::Relaxed)))
    }
}

impl<T: Float> Discriminator<T> {
    pub fn new(arch: &ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let r = arch.resolution;
        let from_rgb = Conv2d::new("backbone.from_rgb", 3, arch.width(r), 1, true, rng);
        let mut blocks = Vec::new();
        let mut res = r;
        while res > 4 {
            blocks.push(DBlock::new(arch, res, rng));
            res /= 2;
        }
        let head = ScoreHead::new(arch, rng);
        let decoder = Some(Decoder::new(arch, rng));
        Ok(Discriminator { arch: arch.clone(), from_rgb, blocks, head, decoder, backbone_calls: CallCounter::default() })
    }

    /// Drop the decoder, leaving the plain realness discriminator.
    pub fn without_decoder(mut self) -> Self {
        self.decoder = None;
        self
    }

    pub fn has_decoder(&self) -> bool {
        self.decoder.is_some()
    }

    /// Number of backbone passes run so far.
    pub fn backbone_calls(&self) -> u64 {
        self.backbone_calls.0.load(Ordering::Relaxed)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn f_resolution(&self) -> FResolution {
        self.arch.f_resolution
    }

    /// Backbone pass on `x: [N, 3, R, R]`.
    pub fn encode(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Pyramid<T>> {
        let r = self.arch.resolution;
        let s = x.shape();
        contract!(
            s.len() == 4 && s[1] == 3 && s[2] == r && s[3] == r,
            "discriminator input must be [N, 3, {r}, {r}], got {s:?}"
        );
        self.backbone_calls.0.fetch_add(1, Ordering::Relaxed);
        let mut t = lrelu(&self.from_rgb.forward(tape, x));
        let mut levels = vec![(r, t.clone())];
        for b in &self.blocks {
            t = b.forward(tape, &t);
            levels.push((b.res / 2, t.clone()));
        }
        Ok(Pyramid { levels })
    }

    /// Realness scores `[N]` from the 4x4 level.
    pub fn score_head(&self, tape: &Tape<T>, p: &Pyramid<T>) -> Result<Var<T>> {
        let l4 = p.level(4).ok_or_else(|| crate::GleadError::Contract("pyramid lacks the 4x4 level".into()))?;
        self.head.forward(tape, l4)
    }

    /// Backbone plus score head, sharing one backbone pass.
    pub fn features(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Features<T>> {
        let pyramid = self.encode(tape, x)?;
        let scores = self.score_head(tape, &pyramid)?;
        Ok(Features { scores, pyramid })
    }

    /// Realness scores `[N]`.
    pub fn score(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(self.features(tape, x)?.scores)
    }

    /// Decoder predictions from backbone levels.
    pub fn decode(&self, tape: &Tape<T>, pyramid: &Pyramid<T>) -> Result<Prediction<T>> {
        match &self.decoder {
            Some(d) => d.forward(tape, &pyramid.levels),
            None => Err(crate::GleadError::Contract("this discriminator has no decoder".into())),
        }
    }

    pub fn backbone_params(&self) -> Vec<&Param<T>> {
        let mut v = self.from_rgb.params();
        for b in &self.blocks {
            v.extend(b.params());
        }
        v
    }

    pub fn head_params(&self) -> Vec<&Param<T>> {
        self.head.params()
    }

    pub fn decoder_params(&self) -> Vec<&Param<T>> {
        self.decoder.as_ref().map(|d| d.params()).unwrap_or_default()
    }

    pub fn param_breakdown(&self) -> ParamBreakdown {
        let count = |v: Vec<&Param<T>>| v.iter().map(|p| p.numel()).sum();
        ParamBreakdown {
            backbone: count(self.backbone_params()),
            head: count(self.head_params()),
            decoder: count(self.decoder_params()),
        }
    }
}

impl<T: Float> Module<T> for Discriminator<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.backbone_params();
        v.extend(self.head.params());
        v.extend(self.decoder_params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.from_rgb.params_mut();
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.head.params_mut());
        if let Some(d) = &mut self.decoder {
            v.extend(d.params_mut());
        }
        v
    }
}
