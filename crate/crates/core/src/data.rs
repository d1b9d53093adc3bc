//! Image datasets: directories of PNG/JPEG files and a procedural toy set of
//! colored shapes on gradient backgrounds. Pixels live in `[-1, 1]`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{resize_tensor, Float, Tensor};
use crate::config::DatasetSpec;
use crate::error::{GleadError, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Directory(PathBuf),
    Files(Vec<PathBuf>),
    Toy { count: usize, seed: u64 },
}

/// An in-memory image set, `count` images of `3 x R x R`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pixels: Vec<f32>,
    count: usize,
    resolution: usize,
    source: DataSource,
}

impl Dataset {
    pub fn from_pixels(pixels: Vec<f32>, resolution: usize, source: DataSource) -> Result<Self> {
        let per = 3 * resolution * resolution;
        if per == 0 || pixels.len() % per != 0 || pixels.is_empty() {
            return Err(GleadError::Dataset(format!("{} values do not form 3x{resolution}x{resolution} images", pixels.len())));
        }
        if pixels.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(GleadError::Dataset("pixel values outside [-1, 1]".into()));
        }
        Ok(Dataset { count: pixels.len() / per, pixels, resolution, source })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn source(&self) -> &DataSource {
        &self.source
    }

    fn per_image(&self) -> usize {
        3 * self.resolution * self.resolution
    }

    pub fn image_data(&self, i: usize) -> &[f32] {
        let p = self.per_image();
        &self.pixels[i * p..(i + 1) * p]
    }

    /// `[3, R, R]` copy of image `i`.
    pub fn image<T: Float>(&self, i: usize) -> Tensor<T> {
        let r = self.resolution;
        Tensor::new([3, r, r], self.image_data(i).iter().map(|&v| T::lit(v as f64)).collect())
    }

    /// Stack the given items into `[N, 3, R, R]`.
    pub fn gather<T: Float>(&self, idx: &[usize]) -> Tensor<T> {
        let r = self.resolution;
        let mut data = Vec::with_capacity(idx.len() * self.per_image());
        for &i in idx {
            data.extend(self.image_data(i).iter().map(|&v| T::lit(v as f64)));
        }
        Tensor::new([idx.len(), 3, r, r], data)
    }

    /// First `n` images (fewer if the set is smaller).
    pub fn head<T: Float>(&self, n: usize) -> Tensor<T> {
        let idx: Vec<usize> = (0..n.min(self.count)).collect();
        self.gather(&idx)
    }

    /// Split off every `every`-th image as a held-out set.
    pub fn split_holdout(&self, every: usize) -> Result<(Dataset, Dataset)> {
        if every < 2 || self.count < every {
            return Err(GleadError::Dataset(format!("cannot hold out every {every}th of {} images", self.count)));
        }
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for i in 0..self.count {
            let dst = if i % every == every - 1 { &mut held } else { &mut train };
            dst.extend_from_slice(self.image_data(i));
        }
        Ok((
            Dataset::from_pixels(train, self.resolution, self.source.clone())?,
            Dataset::from_pixels(held, self.resolution, self.source.clone())?,
        ))
    }

    pub fn checksum(&self) -> u64 {
        Tensor::new([self.pixels.len()], self.pixels.clone()).checksum()
    }
}

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Center-crop to a square, map to `[-1, 1]`, and bilinearly resize.
pub fn prepare_image(img: &image::RgbImage, resolution: usize) -> Vec<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let s = w.min(h);
    let (x0, y0) = ((w - s) / 2, (h - s) / 2);
    let mut data = vec![0f64; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let p = img.get_pixel((x0 + x) as u32, (y0 + y) as u32);
            for c in 0..3 {
                data[c * s * s + y * s + x] = p[c] as f64 / 127.5 - 1.0;
            }
        }
    }
    let t = resize_tensor(&Tensor::new([1, 3, s, s], data), resolution, resolution);
    t.data().iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect()
}

/// Every decodable PNG/JPEG in `dir` (sorted by file name). Undecodable
/// files are skipped with a warning.
pub fn load_dataset(dir: &Path, resolution: usize) -> Result<Dataset> {
    let entries = std::fs::read_dir(dir).map_err(|e| GleadError::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(GleadError::Dataset(format!("no PNG/JPEG images in {}", dir.display())));
    }
    let mut pixels = Vec::new();
    let mut skipped = 0;
    for f in &files {
        match image::open(f) {
            Ok(img) => pixels.extend(prepare_image(&img.to_rgb8(), resolution)),
            Err(e) => {
                log::warn!("skipping {}: {e}", f.display());
                skipped += 1;
            }
        }
    }
    if skipped == files.len() {
        return Err(GleadError::Dataset(format!("none of the {} images in {} could be decoded", files.len(), dir.display())));
    }
    Dataset::from_pixels(pixels, resolution, DataSource::Directory(dir.to_path_buf()))
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// One toy image: a circle, square or triangle of random hue, size and
/// position over a two-color linear gradient. 2x2 supersampled.
fn toy_image(rng: &mut ChaCha8Rng, r: usize) -> Vec<f32> {
    let bg0 = hsv_to_rgb(rng.random(), rng.random_range(0.2..0.6), rng.random_range(0.2..0.9));
    let bg1 = hsv_to_rgb(rng.random(), rng.random_range(0.2..0.6), rng.random_range(0.2..0.9));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let fg = hsv_to_rgb(rng.random(), rng.random_range(0.6..1.0), rng.random_range(0.6..1.0));
    let kind = rng.random_range(0..3u32);
    let (cx, cy) = (rng.random_range(0.25..0.75), rng.random_range(0.25..0.75));
    let size = rng.random_range(0.12..0.3);
    let rot: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let inside = |u: f64, v: f64| -> bool {
        let (px, py) = (u - cx, v - cy);
        let (qx, qy) = (px * rot.cos() + py * rot.sin(), -px * rot.sin() + py * rot.cos());
        match kind {
            0 => px * px + py * py <= size * size,
            1 => qx.abs() <= size * 0.85 && qy.abs() <= size * 0.85,
            _ => {
                // equilateral triangle with circumradius `size`
                let k = 3f64.sqrt();
                qy >= -size / 2.0 && k * qx + qy <= size && -k * qx + qy <= size
            }
        }
    };
    let mut out = vec![0f32; 3 * r * r];
    let ss = 2;
    for y in 0..r {
        for x in 0..r {
            let mut acc = [0.0; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let u = (x as f64 + (sx as f64 + 0.5) / ss as f64) / r as f64;
                    let v = (y as f64 + (sy as f64 + 0.5) / ss as f64) / r as f64;
                    let t = ((u - 0.5) * dx + (v - 0.5) * dy + 0.5).clamp(0.0, 1.0);
                    for c in 0..3 {
                        acc[c] += if inside(u, v) { fg[c] } else { bg0[c] * (1.0 - t) + bg1[c] * t };
                    }
                }
            }
            for c in 0..3 {
                let v = acc[c] / (ss * ss) as f64;
                out[c * r * r + y * r + x] = (v * 2.0 - 1.0).clamp(-1.0, 1.0) as f32;
            }
        }
    }
    out
}

/// Deterministic procedural dataset; image `i` depends only on `(seed, i)`.
pub fn make_toy_dataset(count: usize, resolution: usize, seed: u64) -> Result<Dataset> {
    if count == 0 || resolution == 0 {
        return Err(GleadError::Dataset("toy dataset needs count >= 1 and resolution >= 1".into()));
    }
    let mut pixels = Vec::with_capacity(count * 3 * resolution * resolution);
    for i in 0..count {
        let mut r = rng::derived(seed, i as u64);
        pixels.extend(toy_image(&mut r, resolution));
    }
    Dataset::from_pixels(pixels, resolution, DataSource::Toy { count, seed })
}

/// Resolve a configured dataset.
pub fn open_dataset(spec: &DatasetSpec, resolution: usize) -> Result<Dataset> {
    match spec {
        DatasetSpec::Toy { count, seed } => make_toy_dataset(*count, resolution, *seed),
        DatasetSpec::Directory(p) => {
            if !p.is_dir() {
                return Err(GleadError::Dataset(format!("dataset directory {} does not exist", p.display())));
            }
            load_dataset(p, resolution)
        }
    }
}

/// Training images plus a disjoint held-out set for reconstruction checks.
/// Toy sets draw the held-out images from a separate seed; directories
/// hold out every 20th file when there are at least 40.
pub fn open_with_holdout(spec: &DatasetSpec, resolution: usize) -> Result<(Dataset, Dataset)> {
    match spec {
        DatasetSpec::Toy { count, seed } => {
            let train = make_toy_dataset(*count, resolution, *seed)?;
            let held = make_toy_dataset((*count / 8).clamp(8, 256), resolution, seed.wrapping_add(0x5eed_0001))?;
            Ok((train, held))
        }
        DatasetSpec::Directory(_) => {
            let all = open_dataset(spec, resolution)?;
            if all.len() >= 40 {
                all.split_holdout(20)
            } else {
                Ok((all.clone(), all))
            }
        }
    }
}

/// Horizontal flip of every image in `[N, C, H, W]`.
pub fn flip_horizontal<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let w = x.dim(3);
    let mut out = x.to_vec();
    for row in out.chunks_mut(w) {
        row.reverse();
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Flip each sample independently with probability 1/2.
pub fn mirror_augment<T: Float>(batch: &Tensor<T>, rng: &mut impl Rng) -> Tensor<T> {
    let per: usize = batch.shape()[1..].iter().product();
    let w = batch.dim(3);
    let mut out = batch.to_vec();
    for sample in out.chunks_mut(per) {
        if rng.random_bool(0.5) {
            for row in sample.chunks_mut(w) {
                row.reverse();
            }
        }
    }
    Tensor::new(batch.shape().to_vec(), out)
}

/// Resumable position of a [`Batcher`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatcherState {
    pub epoch: u64,
    pub pos: u64,
    pub mirror_rng: Vec<u8>,
}

/// Endless shuffled batches: each epoch visits every item once in an order
/// determined by `(seed, epoch)`.
pub struct Batcher {
    seed: u64,
    epoch: u64,
    pos: usize,
    order: Vec<usize>,
    mirror: bool,
    mirror_rng: ChaCha8Rng,
}

const SHUFFLE_STREAM: u64 = 1 << 32;
const MIRROR_STREAM: u64 = 2;

impl Batcher {
    pub fn new(len: usize, seed: u64, mirror: bool) -> Self {
        let mut b = Batcher {
            seed,
            epoch: 0,
            pos: 0,
            order: (0..len).collect(),
            mirror,
            mirror_rng: rng::derived(seed, MIRROR_STREAM),
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        let n = self.order.len();
        self.order = (0..n).collect();
        let mut r = rng::derived(self.seed, SHUFFLE_STREAM + self.epoch);
        self.order.shuffle(&mut r);
    }

    /// Next `n` indices, crossing epoch boundaries as needed.
    pub fn next_indices(&mut self, n: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(n);
        while idx.len() < n {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.pos = 0;
                self.reshuffle();
            }
            idx.push(self.order[self.pos]);
            self.pos += 1;
        }
        idx
    }

    pub fn next_batch<T: Float>(&mut self, data: &Dataset, n: usize) -> Tensor<T> {
        let idx = self.next_indices(n);
        let batch = data.gather(&idx);
        if self.mirror {
            mirror_augment(&batch, &mut self.mirror_rng)
        } else {
            batch
        }
    }

    pub fn state(&self) -> BatcherState {
        BatcherState { epoch: self.epoch, pos: self.pos as u64, mirror_rng: rng::save(&self.mirror_rng) }
    }

    pub fn restore(&mut self, s: &BatcherState) -> Result<()> {
        if s.pos as usize > self.order.len() {
            return Err(GleadError::Format(format!("data position {} beyond dataset of {}", s.pos, self.order.len())));
        }
        self.epoch = s.epoch;
        self.reshuffle();
        self.pos = s.pos as usize;
        self.mirror_rng = rng::restore(&s.mirror_rng)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_dataset_is_deterministic_and_in_range() {
        let a = make_toy_dataset(20, 16, 1).unwrap();
        let b = make_toy_dataset(20, 16, 1).unwrap();
        let c = make_toy_dataset(20, 16, 2).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
        assert!(a.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_ne!(a.image_data(0), a.image_data(1));
    }

    #[test]
    fn flip_reverses_rows() {
        let x = Tensor::<f64>::from_f64([1, 1, 2, 2], &[1., 2., 3., 4.]);
        assert_eq!(flip_horizontal(&x).data(), &[2., 1., 4., 3.]);
        assert_eq!(flip_horizontal(&flip_horizontal(&x)).data(), x.data());
    }

    #[test]
    fn batcher_visits_every_item_per_epoch() {
        let mut b = Batcher::new(10, 3, false);
        let mut seen = b.next_indices(10);
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let e1 = b.next_indices(10);
        let mut b2 = Batcher::new(10, 3, false);
        b2.next_indices(10);
        assert_eq!(b2.next_indices(10), e1);
    }

    #[test]
    fn batcher_state_roundtrip() {
        let d = make_toy_dataset(7, 8, 0).unwrap();
        let mut a = Batcher::new(7, 5, true);
        let _: Tensor<f32> = a.next_batch(&d, 5);
        let s = a.state();
        let mut b = Batcher::new(7, 5, true);
        b.restore(&s).unwrap();
        for _ in 0..3 {
            let x: Tensor<f32> = a.next_batch(&d, 4);
            let y: Tensor<f32> = b.next_batch(&d, 4);
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn holdout_split_is_disjoint() {
        let d = make_toy_dataset(40, 8, 0).unwrap();
        let (t, h) = d.split_holdout(20).unwrap();
        assert_eq!((t.len(), h.len()), (38, 2));
        assert_eq!(h.image_data(0), d.image_data(19));
    }
}
