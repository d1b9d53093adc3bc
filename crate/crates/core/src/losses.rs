//! Adversarial objectives, the R1 penalty, the perceptual distance and the
//! reconstruction loss added to the discriminator objective.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad, ConvGeometry, Float, Tensor, Var};
use crate::error::{contract, GleadError, Result};
use crate::nn::randn;

fn check_scores<T: Float>(s: &Var<T>, what: &str) -> Result<()> {
    contract!(s.shape().len() == 1 && s.shape()[0] > 0, "{what} scores must be a nonempty [N] vector, got {:?}", s.shape());
    Ok(())
}

/// `mean softplus(-s_fake)`.
pub fn generator_adversarial_loss<T: Float>(fake_scores: &Var<T>) -> Result<Var<T>> {
    check_scores(fake_scores, "fake")?;
    Ok(fake_scores.neg().softplus().mean_all())
}

/// `mean softplus(-s_real) + mean softplus(s_fake)`.
pub fn discriminator_adversarial_loss<T: Float>(real_scores: &Var<T>, fake_scores: &Var<T>) -> Result<Var<T>> {
    check_scores(real_scores, "real")?;
    check_scores(fake_scores, "fake")?;
    Ok(real_scores.neg().softplus().mean_all().add(&fake_scores.softplus().mean_all()))
}

/// `(gamma / 2) * mean_n ||d score_n / d x_n||^2`. The result stays
/// differentiable with respect to whatever `score_fn` depends on.
pub fn r1_penalty<T: Float>(
    real_images: &Tensor<T>,
    score_fn: impl FnOnce(&Var<T>) -> Result<Var<T>>,
    gamma: f64,
) -> Result<Var<T>> {
    let n = real_images.dim(0);
    let x = Var::leaf(real_images.clone(), true);
    let scores = score_fn(&x)?;
    check_scores(&scores, "real")?;
    r1_from_scores(&x, &scores, gamma, n)
}

/// R1 from scores already computed on the leaf `x`.
pub(crate) fn r1_from_scores<T: Float>(x: &Var<T>, scores: &Var<T>, gamma: f64, n: usize) -> Result<Var<T>> {
    let g = grad(&scores.sum_all(), &[x], true).remove(0);
    Ok(match g {
        Some(g) => g.square().sum_all().scale(gamma / 2.0 / n as f64),
        None => Var::constant(Tensor::scalar(T::zero())),
    })
}

/// Where an extractor's weights came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExtractorProvenance {
    /// Seeded random weights; not pretrained.
    Random { seed: u64 },
    External { path: PathBuf },
}

impl std::fmt::Display for ExtractorProvenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExtractorProvenance::Random { seed } => write!(f, "random-untrained(seed={seed})"),
            ExtractorProvenance::External { path } => write!(f, "external({})", path.display()),
        }
    }
}

const EXTRACTOR_MAGIC: &[u8; 8] = b"GLEADEXT";
const STAGE_GEOMETRY: ConvGeometry = ConvGeometry { stride: 2, pad: 1 };
const NORM_EPS: f64 = 1e-10;

/// Frozen stack of stride-2 3x3 convolutions with leaky ReLU. Its weights
/// are plain tensors and never enter a graph as trainable leaves.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor<T> {
    stages: Vec<Tensor<T>>,
    provenance: ExtractorProvenance,
}

impl<T: Float> PerceptualExtractor<T> {
    /// He-initialized random stages with the given output widths.
    pub fn random(seed: u64, channels: &[usize]) -> Result<Self> {
        if channels.len() < 3 || channels.contains(&0) {
            return Err(GleadError::Config(format!("extractor needs >= 3 positive stage widths, got {channels:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let stages = channels
            .iter()
            .map(|&cout| {
                let w = randn(&mut rng, &[cout, cin, 3, 3], (2.0 / (cin * 9) as f64).sqrt());
                cin = cout;
                w
            })
            .collect();
        Ok(PerceptualExtractor { stages, provenance: ExtractorProvenance::Random { seed } })
    }

    pub fn provenance(&self) -> &ExtractorProvenance {
        &self.provenance
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Embedding width: channels of the final stage.
    pub fn dim(&self) -> usize {
        self.stages.last().map_or(0, |w| w.dim(0))
    }

    pub fn stage_weights(&self) -> &[Tensor<T>] {
        &self.stages
    }

    pub fn checksum(&self) -> u64 {
        self.stages.iter().fold(17u64, |h, w| h.wrapping_mul(31).wrapping_add(w.checksum()))
    }

    /// Output of every stage for `x: [N, 3, H, W]`.
    pub fn features(&self, x: &Var<T>) -> Result<Vec<Var<T>>> {
        let s = x.shape();
        contract!(s.len() == 4 && s[1] == 3, "extractor input must be [N, 3, H, W], got {s:?}");
        contract!(
            s[2] >> self.stages.len() > 0 && s[3] >> self.stages.len() > 0,
            "input {}x{} too small for {} stride-2 stages",
            s[2],
            s[3],
            self.stages.len()
        );
        let mut out = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for w in &self.stages {
            h = h.conv2d(&Var::constant(w.clone()), STAGE_GEOMETRY).leaky_relu(0.2, 1.0);
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Global-average-pooled final stage, `[N, dim]`.
    pub fn embed(&self, x: &Var<T>) -> Result<Var<T>> {
        let last = self.features(x)?.pop().expect("at least three stages");
        let (n, c) = (last.shape()[0], last.shape()[1]);
        Ok(last.mean_axes(&[2, 3]).reshape(&[n, c]))
    }

    /// Per-sample perceptual distance `[N]`: for each stage, features are
    /// scaled to unit norm across channels at every position, and the mean
    /// squared difference is summed over stages.
    pub fn distance(&self, x: &Var<T>, y: &Var<T>) -> Result<Var<T>> {
        contract!(x.shape() == y.shape(), "perceptual distance of {:?} vs {:?}", x.shape(), y.shape());
        let n = x.shape()[0];
        let fx = self.features(x)?;
        let fy = self.features(y)?;
        let mut total: Option<Var<T>> = None;
        for (a, b) in fx.iter().zip(&fy) {
            let d = unit_normalize(a).sub(&unit_normalize(b)).square();
            let per = numel_per_sample(d.shape());
            let d = d.reshape(&[n, per]).mean_axes(&[1]).reshape(&[n]);
            total = Some(match total {
                Some(t) => t.add(&d),
                None => d,
            });
        }
        Ok(total.expect("at least one stage"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(EXTRACTOR_MAGIC);
        buf.extend_from_slice(&(self.stages.len() as u32).to_le_bytes());
        for w in &self.stages {
            for &d in w.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in w.data() {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| GleadError::io(path, e))?;
        f.write_all(&buf).map_err(|e| GleadError::io(path, e))
    }

    /// Load externally supplied stage weights (written by [`Self::save`]).
    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| GleadError::io(path, e))?;
        let bad = |m: &str| GleadError::Format(format!("{}: {m}", path.display()));
        if bytes.len() < 12 || &bytes[..8] != EXTRACTOR_MAGIC {
            return Err(bad("not an extractor file"));
        }
        let mut pos = 8;
        let u32_at = |pos: &mut usize| -> Result<u32> {
            let b = bytes.get(*pos..*pos + 4).ok_or_else(|| bad("truncated"))?;
            *pos += 4;
            Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
        };
        let count = u32_at(&mut pos)? as usize;
        let mut stages = Vec::with_capacity(count);
        let mut cin = 3;
        for _ in 0..count {
            let dims: Vec<usize> = (0..4).map(|_| u32_at(&mut pos).map(|v| v as usize)).collect::<Result<_>>()?;
            if dims[1] != cin || dims[2] != 3 || dims[3] != 3 || dims[0] == 0 {
                return Err(bad(&format!("stage shape {dims:?} does not chain from {cin} channels")));
            }
            let n: usize = dims.iter().product();
            let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated weights"))?;
            pos += 4 * n;
            let data = raw
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect();
            cin = dims[0];
            stages.push(Tensor::new(dims, data));
        }
        if count < 3 {
            return Err(GleadError::Config(format!("extractor needs >= 3 stages, file has {count}")));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(PerceptualExtractor { stages, provenance: ExtractorProvenance::External { path: path.to_path_buf() } })
    }
}

fn numel_per_sample(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

fn unit_normalize<T: Float>(f: &Var<T>) -> Var<T> {
    f.div(&f.square().sum_axes(&[1]).add_scalar(NORM_EPS).sqrt())
}

/// Weights of the two reconstruction terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub r1_gamma: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, r1_gamma: f64) -> Result<Self> {
        for (k, v) in [("lambda1", lambda1), ("lambda2", lambda2), ("r1_gamma", r1_gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(GleadError::Config(format!("{k} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(LossWeights { lambda1, lambda2, r1_gamma })
    }

    pub fn reconstruction_enabled(&self) -> bool {
        self.lambda1 > 0.0 || self.lambda2 > 0.0
    }
}

/// The weighted reconstruction loss and its two unweighted mean terms.
pub struct ReconstructionLoss<T: Float> {
    pub total: Var<T>,
    pub real: Var<T>,
    pub fake: Var<T>,
}

/// `lambda1 * mean d(x, x_rec_real) + lambda2 * mean d(G(z), x_rec_fake)`.
/// The fake target is detached so no gradient reaches its generative path.
pub fn reconstruction_loss<T: Float>(
    x: &Var<T>,
    x_rec_real: &Var<T>,
    gz: &Var<T>,
    x_rec_fake: &Var<T>,
    weights: &LossWeights,
    extractor: &PerceptualExtractor<T>,
) -> Result<ReconstructionLoss<T>> {
    contract!(
        x.shape() == x_rec_real.shape() && x.shape() == gz.shape() && gz.shape() == x_rec_fake.shape(),
        "reconstruction batches differ in shape: {:?} {:?} {:?} {:?}",
        x.shape(),
        x_rec_real.shape(),
        gz.shape(),
        x_rec_fake.shape()
    );
    let real = extractor.distance(x, x_rec_real)?.mean_all();
    let fake = extractor.distance(&gz.detach(), x_rec_fake)?.mean_all();
    let total = combine_reconstruction(&real, &fake, weights);
    Ok(ReconstructionLoss { total, real, fake })
}

pub fn combine_reconstruction<T: Float>(real: &Var<T>, fake: &Var<T>, w: &LossWeights) -> Var<T> {
    real.scale(w.lambda1).add(&fake.scale(w.lambda2))
}

/// Discriminator objective: adversarial + reconstruction (+ R1 when scheduled).
pub fn total_discriminator_loss<T: Float>(adv: &Var<T>, rec: Option<&Var<T>>, r1: Option<&Var<T>>) -> Var<T> {
    let mut t = adv.clone();
    for extra in [rec, r1].into_iter().flatten() {
        t = t.add(extra);
    }
    t
}

/// Generator objective: the adversarial term alone.
pub fn total_generator_loss<T: Float>(adv: &Var<T>) -> Var<T> {
    adv.clone()
}
