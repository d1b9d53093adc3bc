//! Evaluation: Fréchet distance and k-NN precision/recall over embeddings
//! from the frozen extractor, reconstruction error, and parameter counts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{no_grad, Float, Tensor, Var};
use crate::data::Dataset;
use crate::discriminator::{Discriminator, ParamBreakdown};
use crate::error::{contract, GleadError, Result};
use crate::generator::{sample_latents, Generator};
use crate::losses::PerceptualExtractor;
use crate::nn::Tape;

const EIGEN_TOLERANCE: f64 = 1e-6;

/// `N x D` embedding matrix with the tag of the extractor that made it.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
    pub tag: String,
}

impl FeatureSet {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>, tag: impl Into<String>) -> Result<Self> {
        contract!(data.len() == rows * dim, "feature matrix {rows}x{dim} with {} values", data.len());
        contract!(data.iter().all(|v| v.is_finite()), "feature matrix contains non-finite values");
        Ok(FeatureSet { rows, dim, data, tag: tag.into() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Row-wise concatenation.
    pub fn concat(&self, other: &FeatureSet) -> Result<FeatureSet> {
        contract!(self.dim == other.dim, "cannot stack {}-d and {}-d features", self.dim, other.dim);
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        FeatureSet::new(self.rows + other.rows, self.dim, data, self.tag.clone())
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim);
        for i in 0..self.rows {
            for (j, v) in self.row(i).iter().enumerate() {
                m[j] += v;
            }
        }
        m / self.rows as f64
    }

    /// Unbiased covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean();
        let centered = DMatrix::from_fn(self.rows, self.dim, |i, j| self.data[i * self.dim + j] - mu[j]);
        centered.transpose() * &centered / (self.rows as f64 - 1.0)
    }
}

/// Global-average-pooled final-stage embeddings of `[N, 3, H, W]`, computed
/// in chunks of `chunk`.
pub fn embed_features<T: Float>(images: &Tensor<T>, extractor: &PerceptualExtractor<T>, chunk: usize) -> Result<FeatureSet> {
    let n = images.dim(0);
    let dim = extractor.dim();
    let mut data = Vec::with_capacity(n * dim);
    no_grad(|| -> Result<()> {
        let mut start = 0;
        while start < n {
            let len = chunk.max(1).min(n - start);
            let x = Var::constant(images.narrow(0, start, len));
            data.extend(extractor.embed(&x)?.value().data().iter().map(|v| v.as_f64()));
            start += len;
        }
        Ok(())
    })?;
    FeatureSet::new(n, dim, data, extractor.provenance().to_string())
}

fn sqrt_eigenvalues(m: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1f64, |a, v| a.max(v.abs()));
    if let Some(bad) = eig.eigenvalues.iter().find(|&&v| v < -EIGEN_TOLERANCE * scale) {
        return Err(GleadError::Numerical(format!(
            "{what}: eigenvalue {bad:e} below tolerance (largest magnitude {scale:e})"
        )));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok((eig.eigenvectors, roots))
}

fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let (va, ra) = sqrt_eigenvalues(a, "covariance")?;
    let a_half = &va * DMatrix::from_diagonal(&ra) * va.transpose();
    let inner = &a_half * b * &a_half;
    let (_, rm) = sqrt_eigenvalues(&inner, "covariance product")?;
    Ok(rm.sum())
}

/// Fréchet distance between Gaussians with the given moments.
pub fn fid_from_moments(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    let d = mu_a.len();
    contract!(
        mu_b.len() == d && cov_a.shape() == (d, d) && cov_b.shape() == (d, d),
        "moment dimensions disagree"
    );
    // tr sqrt(A B) equals tr sqrt(A^1/2 B A^1/2) and tr sqrt(B^1/2 A B^1/2);
    // both are evaluated and averaged so roundoff cannot break symmetry.
    let cross = trace_sqrt_product(cov_a, cov_b)? + trace_sqrt_product(cov_b, cov_a)?;
    let diff = mu_a - mu_b;
    let v = diff.dot(&diff) + (cov_a.trace() + cov_b.trace()) - cross;
    if !v.is_finite() {
        return Err(GleadError::Numerical(format!("non-finite Fréchet distance {v}")));
    }
    Ok(v)
}

pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    contract!(a.dim == b.dim, "feature sets differ in width: {} vs {}", a.dim, b.dim);
    for (name, s) in [("first", a), ("second", b)] {
        contract!(
            s.rows > s.dim,
            "{name} feature set has {} rows; covariance needs at least {}",
            s.rows,
            s.dim + 1
        );
    }
    fid_from_moments(&a.mean(), &a.covariance(), &b.mean(), &b.covariance())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each point to its k-th nearest other point.
fn knn_radii(s: &FeatureSet, k: usize) -> Vec<f64> {
    (0..s.rows)
        .map(|i| {
            let mut d: Vec<f64> = (0..s.rows).filter(|&j| j != i).map(|j| sq_dist(s.row(i), s.row(j))).collect();
            d.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
            d[k - 1]
        })
        .collect()
}

fn coverage(manifold: &FeatureSet, radii: &[f64], probes: &FeatureSet) -> f64 {
    let inside = (0..probes.rows)
        .filter(|&i| (0..manifold.rows).any(|j| sq_dist(probes.row(i), manifold.row(j)) <= radii[j]))
        .count();
    inside as f64 / probes.rows as f64
}

/// k-NN manifold precision (fakes inside the real manifold) and recall
/// (reals inside the fake manifold).
pub fn precision_recall(real: &FeatureSet, fake: &FeatureSet, k: usize) -> Result<(f64, f64)> {
    contract!(real.dim == fake.dim, "feature sets differ in width: {} vs {}", real.dim, fake.dim);
    contract!(
        k >= 1 && k < real.rows.min(fake.rows),
        "k = {k} must lie in 1..{}",
        real.rows.min(fake.rows)
    );
    let rr = knn_radii(real, k);
    let rf = knn_radii(fake, k);
    Ok((coverage(real, &rr, fake), coverage(fake, &rf, real)))
}

/// Images `G(h(D_enc(x)))` for `x: [N, 3, R, R]`, outside any graph.
pub fn reconstruct_images<T: Float>(d: &Discriminator<T>, g: &Generator<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    no_grad(|| {
        let tape = Tape::frozen();
        let p = d.encode(&tape, &Var::constant(x.clone()))?;
        let pred = d.decode(&tape, &p)?;
        Ok(g.reconstruct_prediction(&tape, d.f_resolution(), &pred)?.value().clone())
    })
}

/// Per-image perceptual distance between each input and its reconstruction.
pub fn reconstruction_distances<T: Float>(
    d: &Discriminator<T>,
    g: &Generator<T>,
    images: &Tensor<T>,
    extractor: &PerceptualExtractor<T>,
    chunk: usize,
) -> Result<Vec<f64>> {
    let n = images.dim(0);
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = chunk.max(1).min(n - start);
        let x = images.narrow(0, start, len);
        let rec = reconstruct_images(d, g, &x)?;
        let dist = no_grad(|| extractor.distance(&Var::constant(x), &Var::constant(rec)))?;
        out.extend(dist.value().data().iter().map(|v| v.as_f64()));
        start += len;
    }
    Ok(out)
}

/// Mean reconstruction distance over a dataset.
pub fn reconstruction_eval<T: Float>(
    d: &Discriminator<T>,
    g: &Generator<T>,
    data: &Dataset,
    extractor: &PerceptualExtractor<T>,
) -> Result<f64> {
    contract!(!data.is_empty(), "reconstruction_eval needs at least one image");
    let all: Tensor<T> = data.head(data.len());
    let d = reconstruction_distances(d, g, &all, extractor, 32)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Decoder parameters relative to the plain discriminator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overhead {
    pub backbone: usize,
    pub head: usize,
    pub decoder: usize,
    pub ratio: f64,
}

impl From<ParamBreakdown> for Overhead {
    fn from(b: ParamBreakdown) -> Self {
        Overhead {
            backbone: b.backbone,
            head: b.head,
            decoder: b.decoder,
            ratio: b.decoder as f64 / (b.backbone + b.head) as f64,
        }
    }
}

pub fn parameter_overhead<T: Float>(d: &Discriminator<T>) -> Overhead {
    d.param_breakdown().into()
}

/// Desk-scale evaluation summary; serialized as one `key=value` line.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub fid: f64,
    pub precision: f64,
    pub recall: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub k: usize,
    pub extractor: String,
    pub images_shown: Option<u64>,
    pub reconstruction: Option<f64>,
}

impl MetricReport {
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        if let Some(n) = self.images_shown {
            write!(s, "images_shown={n} ").expect("string write");
        }
        write!(
            s,
            "fid={} precision={} recall={} n_real={} n_fake={} k={}",
            self.fid, self.precision, self.recall, self.n_real, self.n_fake, self.k
        )
        .expect("string write");
        if let Some(r) = self.reconstruction {
            write!(s, " reconstruction={r}").expect("string write");
        }
        write!(s, " extractor={}", self.extractor.replace(' ', "_")).expect("string write");
        s
    }

    pub fn parse_kv(line: &str) -> Result<Self> {
        let map: BTreeMap<&str, &str> = line.split_whitespace().filter_map(|kv| kv.split_once('=')).collect();
        let bad = |k: &str| GleadError::Format(format!("metric record lacks a valid {k}: {line:?}"));
        let num = |k: &str| -> Result<f64> { map.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| bad(k)) };
        let int = |k: &str| -> Result<usize> { map.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| bad(k)) };
        Ok(MetricReport {
            fid: num("fid")?,
            precision: num("precision")?,
            recall: num("recall")?,
            n_real: int("n_real")?,
            n_fake: int("n_fake")?,
            k: int("k")?,
            extractor: map.get("extractor").ok_or_else(|| bad("extractor"))?.to_string(),
            images_shown: map.get("images_shown").and_then(|v| v.parse().ok()),
            reconstruction: map.get("reconstruction").and_then(|v| v.parse().ok()),
        })
    }
}

/// Images from `g` for `n` latents drawn from `rng`, in chunks.
pub fn sample_images<T: Float>(g: &Generator<T>, n: usize, rng: &mut ChaCha8Rng, chunk: usize) -> Result<Tensor<T>> {
    let mut parts = Vec::new();
    let mut left = n;
    while left > 0 {
        let len = chunk.max(1).min(left);
        let z = sample_latents(rng, len, g.z_dim());
        parts.push(g.generate(&z, 1.0)?);
        left -= len;
    }
    contract!(!parts.is_empty(), "sample_images needs n >= 1");
    Ok(Tensor::concat(&parts, 0))
}

/// FID and precision/recall of `g` against up to `n` real images.
pub fn evaluate<T: Float>(
    g: &Generator<T>,
    real: &Dataset,
    extractor: &PerceptualExtractor<T>,
    n: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MetricReport> {
    let real_imgs: Tensor<T> = real.head(n);
    let fake_imgs = sample_images(g, real_imgs.dim(0), rng, 64)?;
    let a = embed_features(&real_imgs, extractor, 64)?;
    let b = embed_features(&fake_imgs, extractor, 64)?;
    let f = fid(&a, &b)?;
    let (precision, recall) = precision_recall(&a, &b, k)?;
    Ok(MetricReport {
        fid: f,
        precision,
        recall,
        n_real: a.rows(),
        n_fake: b.rows(),
        k,
        extractor: a.tag.clone(),
        images_shown: None,
        reconstruction: None,
    })
}
