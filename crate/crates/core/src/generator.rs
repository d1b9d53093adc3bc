//! Style-based generator with skip-connected RGB outputs.
//!
//! Besides the usual `z -> image` path, synthesis can be entered part-way:
//! [`Generator::reconstruct`] continues from a feature map and a partial
//! image at an intermediate block resolution, which is what the decoder of
//! the discriminator predicts.

use rand::Rng;

use crate::autograd::{no_grad, ConvGeometry, Float, Tensor, Var};
use crate::config::{ArchConfig, FResolution};
use crate::discriminator::Prediction;
use crate::error::{contract, Result};
use crate::nn::{lrelu, randn, Linear, Module, Param, Tape};

/// Scale every row of `x: [N, D]` to unit mean square.
fn normalize_2nd_moment<T: Float>(x: &Var<T>) -> Var<T> {
    x.div(&x.square().mean_axes(&[1]).add_scalar(1e-8).sqrt())
}

#[derive(Clone, Debug)]
struct ModConv<T> {
    affine: Linear<T>,
    weight: Param<T>,
    bias: Param<T>,
    noise_strength: Option<Param<T>>,
    noise: Option<Tensor<T>>,
    demodulate: bool,
    activate: bool,
    weight_gain: f64,
}

impl<T: Float> ModConv<T> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        name: &str,
        w_dim: usize,
        cin: usize,
        cout: usize,
        kernel: usize,
        noise_res: Option<usize>,
        rgb: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        ModConv {
            affine: Linear::new(&format!("{name}.affine"), w_dim, cin, Some(1.0), 1.0, rng),
            weight: Param::new(format!("{name}.weight"), randn(rng, &[cout, cin, kernel, kernel], 1.0)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros([cout])),
            noise_strength: noise_res.map(|_| Param::new(format!("{name}.noise_strength"), Tensor::zeros([1]))),
            noise: noise_res.map(|r| randn(rng, &[1, 1, r, r], 1.0)),
            demodulate: !rgb,
            activate: !rgb,
            weight_gain: 1.0 / (fan_in as f64).sqrt(),
        }
    }

    fn forward(&self, tape: &Tape<T>, x: &Var<T>, w: &Var<T>) -> Var<T> {
        let (n, cin) = (x.shape()[0], x.shape()[1]);
        let cout = self.weight.value().dim(0);
        let k = self.weight.value().dim(2);
        let mut styles = self.affine.forward(tape, w);
        if !self.demodulate {
            styles = styles.scale(self.weight_gain);
        }
        let weight = tape.var(&self.weight).scale(self.weight_gain);
        let mut y = x
            .mul(&styles.reshape(&[n, cin, 1, 1]))
            .conv2d(&weight, ConvGeometry { stride: 1, pad: k / 2 });
        if self.demodulate {
            let wsq = weight.square().sum_axes(&[2, 3]).reshape(&[cout, cin]);
            let d = styles.square().matmul(&wsq, false, true).add_scalar(1e-8).powf(-0.5);
            y = y.mul(&d.reshape(&[n, cout, 1, 1]));
        }
        if let (Some(s), Some(noise)) = (&self.noise_strength, &self.noise) {
            y = y.add(&Var::constant(noise.clone()).mul(&tape.var(s).reshape(&[1, 1, 1, 1])));
        }
        y = y.add(&tape.var(&self.bias).reshape(&[1, cout, 1, 1]));
        if self.activate {
            lrelu(&y)
        } else {
            y
        }
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.affine.params();
        v.push(&self.weight);
        v.push(&self.bias);
        v.extend(self.noise_strength.as_ref());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.affine.params_mut();
        v.push(&mut self.weight);
        v.push(&mut self.bias);
        v.extend(self.noise_strength.as_mut());
        v
    }
}

#[derive(Clone, Debug)]
struct SynthesisBlock<T> {
    res: usize,
    conv0: Option<ModConv<T>>,
    conv1: ModConv<T>,
    torgb: ModConv<T>,
}

impl<T: Float> SynthesisBlock<T> {
    fn new(arch: &ArchConfig, res: usize, rng: &mut impl Rng) -> Self {
        let name = format!("synthesis.b{res}");
        let out = arch.width(res);
        let conv0 = (res > 4).then(|| {
            let cin = arch.width(res / 2);
            ModConv::new(&format!("{name}.conv0"), arch.w_dim, cin, out, 3, Some(res), false, rng)
        });
        SynthesisBlock {
            res,
            conv0,
            conv1: ModConv::new(&format!("{name}.conv1"), arch.w_dim, out, out, 3, Some(res), false, rng),
            torgb: ModConv::new(&format!("{name}.torgb"), arch.w_dim, out, 3, 1, None, true, rng),
        }
    }

    fn forward(&self, tape: &Tape<T>, x: &Var<T>, img: Option<&Var<T>>, w: &Var<T>) -> (Var<T>, Var<T>) {
        let mut x = x.clone();
        if let Some(c0) = &self.conv0 {
            x = c0.forward(tape, &x.upsample2x(), w);
        }
        x = self.conv1.forward(tape, &x, w);
        let rgb = self.torgb.forward(tape, &x, w);
        let img = match img {
            Some(i) => i.upsample2x().add(&rgb),
            None => rgb,
        };
        (x, img)
    }

    fn layers(&self) -> impl Iterator<Item = &ModConv<T>> {
        self.conv0.iter().chain([&self.conv1, &self.torgb])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut ModConv<T>> {
        self.conv0.iter_mut().chain([&mut self.conv1, &mut self.torgb])
    }
}

/// Where synthesis starts.
pub enum SynthesisEntry<'a, T: Float> {
    /// The learned 4x4 constant.
    Const,
    /// A feature map and partial image at block resolution `res`; the
    /// remaining blocks above `res` are run.
    At { res: usize, features: &'a Var<T>, image: &'a Var<T> },
}

/// Image plus the intermediate state after the block at the capture
/// resolution.
pub struct Captured<T: Float> {
    pub image: Var<T>,
    pub features: Var<T>,
    pub partial_image: Var<T>,
}

#[derive(Clone, Debug)]
pub struct Generator<T> {
    arch: ArchConfig,
    mapping: Vec<Linear<T>>,
    constant: Param<T>,
    blocks: Vec<SynthesisBlock<T>>,
    w_avg: Tensor<T>,
}

impl<T: Float> Generator<T> {
    pub fn new(arch: &ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        contract!(arch.mapping_layers >= 1, "the mapping network needs at least one layer");
        let mapping = (0..arch.mapping_layers)
            .map(|i| {
                let fan_in = if i == 0 { arch.z_dim } else { arch.w_dim };
                Linear::new(&format!("mapping.fc{i}"), fan_in, arch.w_dim, Some(0.0), 0.01, rng)
            })
            .collect();
        let c4 = arch.width(4);
        let constant = Param::new("synthesis.b4.const", randn(rng, &[c4, 4, 4], 1.0));
        let blocks = arch.block_resolutions().into_iter().map(|r| SynthesisBlock::new(arch, r, rng)).collect();
        Ok(Generator { arch: arch.clone(), mapping, constant, blocks, w_avg: Tensor::zeros([arch.w_dim]) })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn resolution(&self) -> usize {
        self.arch.resolution
    }

    pub fn z_dim(&self) -> usize {
        self.arch.z_dim
    }

    pub fn w_dim(&self) -> usize {
        self.arch.w_dim
    }

    /// Channels of the synthesis feature map at block resolution `res`.
    pub fn channels_at(&self, res: usize) -> usize {
        self.arch.width(res)
    }

    pub fn w_avg(&self) -> &Tensor<T> {
        &self.w_avg
    }

    pub fn set_w_avg(&mut self, v: Tensor<T>) -> Result<()> {
        contract!(v.shape() == [self.arch.w_dim], "w_avg must have shape [{}], got {:?}", self.arch.w_dim, v.shape());
        self.w_avg = v;
        Ok(())
    }

    /// Track the running mean of `w: [N, Dw]` with momentum `beta`.
    pub fn update_w_avg(&mut self, w: &Tensor<T>, beta: f64) {
        let n = w.dim(0);
        let d = self.arch.w_dim;
        let (b, j) = (T::lit(beta), T::lit((1.0 - beta) / n as f64));
        let mut mean = vec![T::zero(); d];
        for row in w.data().chunks(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for (a, m) in self.w_avg.data_mut().iter_mut().zip(mean) {
            *a = b * *a + j * m;
        }
    }

    /// Fixed per-layer noise images, by layer name.
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("mapping.w_avg".to_string(), &self.w_avg)];
        for b in &self.blocks {
            for l in b.layers() {
                if let Some(n) = &l.noise {
                    out.push((l.weight.name().replace(".weight", ".noise_const"), n));
                }
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("mapping.w_avg".to_string(), &mut self.w_avg)];
        for b in &mut self.blocks {
            for l in b.layers_mut() {
                let name = l.weight.name().replace(".weight", ".noise_const");
                if let Some(n) = &mut l.noise {
                    out.push((name, n));
                }
            }
        }
        out
    }

    /// `z: [N, Dz] -> w: [N, Dw]`. With `psi == 1` the mapping output is
    /// returned untouched; otherwise it is pulled toward the tracked mean.
    pub fn map(&self, tape: &Tape<T>, z: &Var<T>, psi: f64) -> Result<Var<T>> {
        contract!(
            z.shape().len() == 2 && z.shape()[1] == self.arch.z_dim,
            "latent batch must be [N, {}], got {:?}",
            self.arch.z_dim,
            z.shape()
        );
        let mut x = normalize_2nd_moment(z);
        for fc in &self.mapping {
            x = lrelu(&fc.forward(tape, &x));
        }
        if psi == 1.0 {
            return Ok(x);
        }
        let avg = Var::constant(self.w_avg.reshape([1, self.arch.w_dim]));
        Ok(avg.add(&x.sub(&avg).scale(psi)))
    }

    fn check_w(&self, w: &Var<T>) -> Result<usize> {
        contract!(
            w.shape().len() == 2 && w.shape()[1] == self.arch.w_dim,
            "style batch must be [N, {}], got {:?}",
            self.arch.w_dim,
            w.shape()
        );
        Ok(w.shape()[0])
    }

    fn run(
        &self,
        tape: &Tape<T>,
        entry: &SynthesisEntry<'_, T>,
        w: &Var<T>,
        capture: Option<usize>,
    ) -> Result<(Var<T>, Option<(Var<T>, Var<T>)>)> {
        let n = self.check_w(w)?;
        let (mut x, mut img, start) = match entry {
            SynthesisEntry::Const => {
                let c4 = self.arch.width(4);
                let x = tape.var(&self.constant).reshape(&[1, c4, 4, 4]).broadcast_to(&[n, c4, 4, 4]);
                (x, None, 0)
            }
            SynthesisEntry::At { res, features, image } => {
                let r = *res;
                contract!(
                    self.arch.supported_f_resolutions().contains(&r),
                    "reconstruction can start at {:?}, not {r}",
                    self.arch.supported_f_resolutions()
                );
                let c = self.arch.width(r);
                contract!(
                    features.shape() == [n, c, r, r],
                    "features at {r} must be [{n}, {c}, {r}, {r}], got {:?}",
                    features.shape()
                );
                contract!(
                    image.shape() == [n, 3, r, r],
                    "partial image at {r} must be [{n}, 3, {r}, {r}], got {:?}",
                    image.shape()
                );
                let start = self.blocks.iter().position(|b| b.res == r).expect("supported resolution") + 1;
                ((*features).clone(), Some((*image).clone()), start)
            }
        };
        let mut captured = None;
        for b in &self.blocks[start..] {
            let (nx, ni) = b.forward(tape, &x, img.as_ref(), w);
            x = nx;
            img = Some(ni);
            if capture == Some(b.res) {
                captured = Some((x.clone(), img.clone().expect("image")));
            }
        }
        Ok((img.expect("at least one block runs"), captured))
    }

    /// Full synthesis from the constant: `w: [N, Dw] -> [N, 3, R, R]`.
    pub fn synthesize(&self, tape: &Tape<T>, w: &Var<T>) -> Result<Var<T>> {
        Ok(self.run(tape, &SynthesisEntry::Const, w, None)?.0)
    }

    /// Full synthesis that also returns the state after block `res`.
    pub fn synthesize_captured(&self, tape: &Tape<T>, w: &Var<T>, res: usize) -> Result<Captured<T>> {
        contract!(
            self.arch.supported_f_resolutions().contains(&res),
            "capture resolution must be one of {:?}, got {res}",
            self.arch.supported_f_resolutions()
        );
        let (image, cap) = self.run(tape, &SynthesisEntry::Const, w, Some(res))?;
        let (features, partial_image) = cap.expect("captured");
        Ok(Captured { image, features, partial_image })
    }

    /// Continue synthesis from `entry` with a single style code per sample.
    pub fn reconstruct(&self, tape: &Tape<T>, entry: &SynthesisEntry<'_, T>, w: &Var<T>) -> Result<Var<T>> {
        Ok(self.run(tape, entry, w, None)?.0)
    }

    /// Entry for a configured decoder resolution, for callers holding
    /// optional spatial predictions.
    pub fn entry_for<'a>(
        &self,
        f_res: FResolution,
        features: Option<&'a Var<T>>,
        image: Option<&'a Var<T>>,
    ) -> Result<SynthesisEntry<'a, T>> {
        match (f_res, features, image) {
            (FResolution::None, _, _) => Ok(SynthesisEntry::Const),
            (FResolution::Res(res), Some(features), Some(image)) => Ok(SynthesisEntry::At { res, features, image }),
            (FResolution::Res(r), _, _) => Err(crate::GleadError::Contract(format!(
                "reconstruction at {r} needs both a feature map and a partial image"
            ))),
        }
    }

    /// Image from decoder predictions: `G(f, w)`, or `G(w)` from the
    /// constant when there is no spatial target.
    pub fn reconstruct_prediction(&self, tape: &Tape<T>, f_res: FResolution, pred: &Prediction<T>) -> Result<Var<T>> {
        let entry = self.entry_for(f_res, pred.features.as_ref(), pred.image.as_ref())?;
        self.reconstruct(tape, &entry, &pred.w)
    }

    pub fn forward(&self, tape: &Tape<T>, z: &Var<T>, psi: f64) -> Result<Var<T>> {
        let w = self.map(tape, z, psi)?;
        self.synthesize(tape, &w)
    }

    /// Images for a latent batch, outside any graph.
    pub fn generate(&self, z: &Tensor<T>, psi: f64) -> Result<Tensor<T>> {
        no_grad(|| {
            let tape = Tape::frozen();
            Ok(self.forward(&tape, &Var::constant(z.clone()), psi)?.value().clone())
        })
    }
}

impl<T: Float> Module<T> for Generator<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = self.mapping.iter().flat_map(|l| l.params()).collect();
        v.push(&self.constant);
        for b in &self.blocks {
            for l in b.layers() {
                v.extend(l.params());
            }
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = self.mapping.iter_mut().flat_map(|l| l.params_mut()).collect();
        v.push(&mut self.constant);
        for b in &mut self.blocks {
            for l in b.layers_mut() {
                v.extend(l.params_mut());
            }
        }
        v
    }
}

/// Draw a `[n, dim]` standard normal latent batch.
pub fn sample_latents<T: Float>(rng: &mut impl Rng, n: usize, dim: usize) -> Tensor<T> {
    randn(rng, &[n, dim], 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro() -> (Generator<f64>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = Generator::new(&ArchConfig::micro(), &mut rng).unwrap();
        (g, rng)
    }

    #[test]
    fn output_shape_and_determinism() {
        let (g, mut rng) = micro();
        let z = sample_latents::<f64>(&mut rng, 3, 16);
        let a = g.generate(&z, 1.0).unwrap();
        let b = g.generate(&z, 1.0).unwrap();
        assert_eq!(a.shape(), &[3, 3, 16, 16]);
        assert_eq!(a.data(), b.data());
        assert!(a.all_finite());
    }

    #[test]
    fn capture_then_reconstruct_is_identity() {
        let (g, mut rng) = micro();
        let tape = Tape::frozen();
        let z = Var::constant(sample_latents::<f64>(&mut rng, 2, 16));
        let w = g.map(&tape, &z, 1.0).unwrap();
        for r in [4, 8] {
            let cap = g.synthesize_captured(&tape, &w, r).unwrap();
            let entry = SynthesisEntry::At { res: r, features: &cap.features, image: &cap.partial_image };
            let rec = g.reconstruct(&tape, &entry, &w).unwrap();
            assert!(rec.value().max_abs_diff(cap.image.value()) < 1e-12);
        }
    }

    #[test]
    fn unsupported_entry_resolution_is_rejected() {
        let (g, _) = micro();
        let tape = Tape::frozen();
        let w = Var::constant(Tensor::zeros([1, 16]));
        let f = Var::constant(Tensor::zeros([1, 32, 16, 16]));
        let i = Var::constant(Tensor::zeros([1, 3, 16, 16]));
        let e = SynthesisEntry::At { res: 16, features: &f, image: &i };
        assert!(g.reconstruct(&tape, &e, &w).is_err());
        assert!(g.synthesize_captured(&tape, &w, 2).is_err());
        let bad = Var::constant(Tensor::zeros([1, 5]));
        assert!(g.synthesize(&tape, &bad).is_err());
    }

    #[test]
    fn truncation_psi_one_is_exact_and_zero_is_mean() {
        let (mut g, mut rng) = micro();
        g.set_w_avg(Tensor::full([16], 0.25)).unwrap();
        let tape = Tape::frozen();
        let z = Var::constant(sample_latents::<f64>(&mut rng, 2, 16));
        let w1 = g.map(&tape, &z, 1.0).unwrap();
        let w0 = g.map(&tape, &z, 0.0).unwrap();
        assert!(w0.value().data().iter().all(|&v| v == 0.25));
        let w_half = g.map(&tape, &z, 0.5).unwrap();
        for ((h, a), b) in w_half.value().data().iter().zip(w1.value().data()).zip(w0.value().data()) {
            assert!((h - 0.5 * (a + b)).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_generator_passes_gradient_to_inputs_only() {
        let (g, mut rng) = micro();
        let tape = Tape::frozen();
        let w = Var::leaf(randn(&mut rng, &[1, 16], 1.0), true);
        let f = Var::leaf(randn(&mut rng, &[1, 32, 4, 4], 1.0), true);
        let i = Var::leaf(randn(&mut rng, &[1, 3, 4, 4], 1.0), true);
        let e = SynthesisEntry::At { res: 4, features: &f, image: &i };
        let out = g.reconstruct(&tape, &e, &w).unwrap().square().mean_all();
        assert!(tape.grads(&out).is_empty());
        let gs = grad(&out, &[&w, &f, &i], false);
        assert!(gs.iter().all(|g| g.as_ref().is_some_and(|g| g.value().all_finite())));
    }

    #[test]
    fn w_avg_tracks_mean() {
        let (mut g, _) = micro();
        let w = Tensor::new([2, 16], (0..32).map(|i| if i < 16 { 1.0 } else { 3.0 }).collect());
        g.update_w_avg(&w, 0.5);
        assert!(g.w_avg().data().iter().all(|&v| v == 1.0));
    }
}
