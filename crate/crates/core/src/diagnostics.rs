//! Visual and numeric diagnostics: discriminator attention maps, score
//! curves, sample and reconstruction grids.

use std::io::Write;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad, resize_tensor, Float, Tensor, Var};
use crate::config::ArchConfig;
use crate::discriminator::Discriminator;
use crate::error::{contract, GleadError, Result};
use crate::generator::Generator;
use crate::losses::PerceptualExtractor;
use crate::metrics::{reconstruct_images, reconstruction_distances, sample_images};
use crate::nn::Tape;
use crate::trainer::{ewma, LogRecord};

const RAW_MAGIC: &[u8; 8] = b"GLEADTNS";

/// Pyramid level used for attention maps when none is requested: the one
/// closest to a quarter of the image resolution.
pub fn default_attention_res(arch: &ArchConfig) -> usize {
    let target = (arch.resolution / 4) as f64;
    *arch
        .block_resolutions()
        .iter()
        .min_by(|a, b| (**a as f64 / target).ln().abs().total_cmp(&(**b as f64 / target).ln().abs()))
        .expect("at least one block")
}

/// Normalized attention map of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap<T: Float> {
    /// Pyramid level the map was computed on.
    pub layer_res: usize,
    /// `[layer_res, layer_res]` in `[0, 1]`.
    pub map: Tensor<T>,
    /// `map` resized to the image resolution.
    pub overlay: Tensor<T>,
}

/// Gradient-weighted activation map of the score of `image: [3, R, R]`
/// with respect to the pyramid level at `layer_res`:
/// `relu(sum_c alpha_c A_c)`, `alpha_c` the spatial mean of the gradient,
/// then min-max normalized. A map with no positive evidence is all zeros.
pub fn gradcam<T: Float>(d: &Discriminator<T>, image: &Tensor<T>, layer_res: usize) -> Result<Heatmap<T>> {
    contract!(image.rank() == 3 && image.dim(0) == 3, "gradcam expects [3, R, R], got {:?}", image.shape());
    contract!(
        d.arch().block_resolutions().contains(&layer_res),
        "no discriminator level at resolution {layer_res}; available: {:?}",
        d.arch().block_resolutions()
    );
    let (h, w) = (image.dim(1), image.dim(2));
    let x = Var::leaf(image.reshape([1, 3, h, w]), true);
    let tape = Tape::frozen();
    let pyramid = d.encode(&tape, &x)?;
    let a = pyramid.level(layer_res).expect("checked above").clone();
    let s = d.score_head(&tape, &pyramid)?.sum_all();
    let ga = grad(&s, &[&a], false).remove(0);
    let (c, lh, lw) = (a.shape()[1], a.shape()[2], a.shape()[3]);
    let av = a.value().data();
    let mut cam = vec![0.0f64; lh * lw];
    if let Some(ga) = ga {
        let gv = ga.value().data();
        for ch in 0..c {
            let plane = ch * lh * lw..(ch + 1) * lh * lw;
            let alpha = gv[plane.clone()].iter().map(|v| v.as_f64()).sum::<f64>() / (lh * lw) as f64;
            for (k, v) in av[plane].iter().enumerate() {
                cam[k] += alpha * v.as_f64();
            }
        }
    }
    let cam: Vec<T> = cam.into_iter().map(|v| T::lit(v.max(0.0))).collect();
    let map = Tensor::new([lh, lw], normalize01(&cam));
    let overlay = resize_tensor(&map.reshape([1, 1, lh, lw]), h, w).reshape([h, w]);
    Ok(Heatmap { layer_res, map, overlay })
}

fn normalize01<T: Float>(v: &[T]) -> Vec<T> {
    let lo = v.iter().fold(f64::INFINITY, |m, x| m.min(x.as_f64()));
    let hi = v.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
    if !(hi - lo > 1e-12) || !hi.is_finite() {
        return vec![T::zero(); v.len()];
    }
    v.iter().map(|x| T::lit((x.as_f64() - lo) / (hi - lo))).collect()
}

fn to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// `[3, H, W]` in `[-1, 1]` to an 8-bit image.
pub fn to_rgb_image<T: Float>(img: &Tensor<T>) -> Result<RgbImage> {
    contract!(img.rank() == 3 && img.dim(0) == 3, "expected [3, H, W], got {:?}", img.shape());
    let (h, w) = (img.dim(1), img.dim(2));
    let d = img.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| to_u8(d[(c * h + y as usize) * w + x as usize].as_f64());
        Rgb([at(0), at(1), at(2)])
    }))
}

/// Tile `[N, 3, R, R]` into `[3, rows·R, cols·R]`, filling unused cells with black.
pub fn image_grid<T: Float>(images: &Tensor<T>, cols: usize) -> Result<Tensor<T>> {
    contract!(images.rank() == 4 && images.dim(1) == 3, "expected [N, 3, R, R], got {:?}", images.shape());
    contract!(cols > 0 && images.dim(0) > 0, "grid needs at least one image and one column");
    let (n, h, w) = (images.dim(0), images.dim(2), images.dim(3));
    let rows = n.div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut out = vec![T::lit(-1.0); 3 * gh * gw];
    let src = images.data();
    for i in 0..n {
        let (r0, c0) = ((i / cols) * h, (i % cols) * w);
        for c in 0..3 {
            for y in 0..h {
                let s = ((i * 3 + c) * h + y) * w;
                let dst = (c * gh + r0 + y) * gw + c0;
                out[dst..dst + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    Ok(Tensor::new([3, gh, gw], out))
}

pub fn save_png<T: Float>(img: &Tensor<T>, path: &Path) -> Result<()> {
    to_rgb_image(img)?.save(path)?;
    Ok(())
}

/// Little-endian f32 dump with a shape header, readable by [`load_raw`].
pub fn save_raw<T: Float>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * t.rank() + 4 * t.numel());
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| GleadError::io(path, e))
}

pub fn load_raw(path: &Path) -> Result<Tensor<f32>> {
    let buf = std::fs::read(path).map_err(|e| GleadError::io(path, e))?;
    let bad = |m: &str| GleadError::Format(format!("{}: {m}", path.display()));
    if buf.len() < 12 || &buf[..8] != RAW_MAGIC {
        return Err(bad("not a raw tensor dump"));
    }
    let rank = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let mut off = 12;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = buf.get(off..off + 8).ok_or_else(|| bad("truncated header"))?;
        shape.push(u64::from_le_bytes(b.try_into().unwrap()) as usize);
        off += 8;
    }
    let numel: usize = shape.iter().product();
    if buf.len() != off + 4 * numel {
        return Err(bad("payload size does not match shape"));
    }
    let data = buf[off..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::try_new(shape, data)
}

/// Write `<name>.png` and `<name>.tensor` for `n` samples from `g`.
pub fn render_sample_grid<T: Float>(
    g: &Generator<T>,
    rng: &mut ChaCha8Rng,
    n: usize,
    cols: usize,
    dir: &Path,
    name: &str,
) -> Result<Tensor<T>> {
    let imgs = sample_images(g, n, rng, 16)?;
    let grid = image_grid(&imgs, cols)?;
    save_png(&grid, &dir.join(format!("{name}.png")))?;
    save_raw(&imgs, &dir.join(format!("{name}.tensor")))?;
    Ok(imgs)
}

/// One input/reconstruction pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDistance {
    pub kind: &'static str,
    pub index: usize,
    pub distance: f64,
}

/// Files written by [`render_reconstructions`].
#[derive(Clone, Debug)]
pub struct ReconstructionOutput {
    pub grid: PathBuf,
    pub pairs: Vec<PairDistance>,
}

/// Reconstruct real and generated images through `G(h(D(x)))`. The grid
/// has four rows: real inputs, their reconstructions, generated inputs,
/// their reconstructions. Inputs, outputs and per-pair distances are also
/// written as raw dumps and `reconstruction_pairs.csv`.
pub fn render_reconstructions<T: Float>(
    d: &Discriminator<T>,
    g: &Generator<T>,
    reals: &Tensor<T>,
    fakes: &Tensor<T>,
    extractor: &PerceptualExtractor<T>,
    dir: &Path,
) -> Result<ReconstructionOutput> {
    contract!(reals.dim(0) == fakes.dim(0), "need as many real as generated images");
    std::fs::create_dir_all(dir).map_err(|e| GleadError::io(dir, e))?;
    let n = reals.dim(0);
    let rec_real = reconstruct_images(d, g, reals)?;
    let rec_fake = reconstruct_images(d, g, fakes)?;
    let all = Tensor::concat(&[reals.clone(), rec_real.clone(), fakes.clone(), rec_fake.clone()], 0);
    let grid_path = dir.join("reconstruction.png");
    save_png(&image_grid(&all, n)?, &grid_path)?;
    save_raw(&Tensor::concat(&[reals.clone(), fakes.clone()], 0), &dir.join("reconstruction_inputs.tensor"))?;
    save_raw(&Tensor::concat(&[rec_real, rec_fake], 0), &dir.join("reconstruction_outputs.tensor"))?;
    let mut pairs = Vec::with_capacity(2 * n);
    for (kind, x) in [("real", reals), ("fake", fakes)] {
        for (index, distance) in reconstruction_distances(d, g, x, extractor, 16)?.into_iter().enumerate() {
            pairs.push(PairDistance { kind, index, distance });
        }
    }
    let csv = dir.join("reconstruction_pairs.csv");
    let mut f = std::fs::File::create(&csv).map_err(|e| GleadError::io(&csv, e))?;
    let mut text = String::from("kind,index,distance\n");
    for p in &pairs {
        text.push_str(&format!("{},{},{:e}\n", p.kind, p.index, p.distance));
    }
    f.write_all(text.as_bytes()).map_err(|e| GleadError::io(&csv, e))?;
    Ok(ReconstructionOutput { grid: grid_path, pairs })
}

fn colormap(v: f64) -> [f64; 3] {
    // blue -> cyan -> yellow -> red
    let v = v.clamp(0.0, 1.0);
    let stops = [[0.0, 0.0, 0.5], [0.0, 0.8, 1.0], [1.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
    let t = v * 3.0;
    let i = (t.floor() as usize).min(2);
    let f = t - i as f64;
    std::array::from_fn(|c| stops[i][c] * (1.0 - f) + stops[i + 1][c] * f)
}

/// Blend a `[H, W]` map in `[0, 1]` over a `[3, H, W]` image.
pub fn attention_overlay<T: Float>(img: &Tensor<T>, map: &Tensor<T>) -> Result<RgbImage> {
    contract!(
        img.rank() == 3 && map.rank() == 2 && img.shape()[1..] == *map.shape(),
        "overlay needs [3, H, W] and [H, W], got {:?} and {:?}",
        img.shape(),
        map.shape()
    );
    let base = to_rgb_image(img)?;
    let (h, w) = (map.dim(0), map.dim(1));
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let m = map.data()[y as usize * w + x as usize].as_f64();
        let c = colormap(m);
        let p = base.get_pixel(x, y).0;
        Rgb(std::array::from_fn(|k| (0.5 * p[k] as f64 + 0.5 * 255.0 * c[k]).round() as u8))
    }))
}

fn write_series_csv(path: &Path, xs: &[u64], raw: &[f64], smooth: &[f64]) -> Result<()> {
    let mut text = String::from("images_shown,raw,smoothed\n");
    for ((x, r), s) in xs.iter().zip(raw).zip(smooth) {
        text.push_str(&format!("{x},{r:e},{s:e}\n"));
    }
    std::fs::write(path, text).map_err(|e| GleadError::io(path, e))
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Raw and smoothed series in the horizontal band `top..top + h`, each
/// panel scaled to its own range.
fn plot_panel(img: &mut RgbImage, top: u32, h: u32, xs: &[u64], raw: &[f64], smooth: &[f64], colors: (Rgb<u8>, Rgb<u8>)) {
    let (w, pad) = (img.width() as i64, 20i64);
    let (top, h) = (top as i64, h as i64);
    let finite = raw.iter().chain(smooth).copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0) - 1.0, hi.max(0.0) + 1.0) };
    let (x_lo, x_hi) = (xs[0] as f64, (*xs.last().unwrap() as f64).max(xs[0] as f64 + 1.0));
    let px = |x: u64| pad + ((x as f64 - x_lo) / (x_hi - x_lo) * (w - 2 * pad) as f64).round() as i64;
    let py = |v: f64| {
        let v = if v.is_finite() { v } else { lo };
        top + (h - pad) - ((v - lo) / (hi - lo) * (h - 2 * pad) as f64).round() as i64
    };
    draw_line(img, (pad, top + h - 1), (w - pad, top + h - 1), Rgb([120, 120, 120]));
    if lo < 0.0 && hi > 0.0 {
        draw_line(img, (pad, py(0.0)), (w - pad, py(0.0)), Rgb([200, 200, 200]));
    }
    for (ys, color) in [(raw, colors.0), (smooth, colors.1)] {
        for i in 1..xs.len() {
            draw_line(img, (px(xs[i - 1]), py(ys[i - 1])), (px(xs[i]), py(ys[i])), color);
        }
        if xs.len() == 1 {
            draw_line(img, (px(xs[0]), py(ys[0])), (px(xs[0]), py(ys[0])), color);
        }
    }
}

/// Mean real and fake scores against images shown, raw and EWMA-smoothed
/// with weight `alpha`. Writes `scores_real.csv`, `scores_fake.csv` and
/// `scores.png` (real above, fake below) into `dir`.
pub fn render_score_curves(records: &[LogRecord], alpha: f64, dir: &Path) -> Result<()> {
    contract!(!records.is_empty(), "no log records to plot");
    std::fs::create_dir_all(dir).map_err(|e| GleadError::io(dir, e))?;
    let xs: Vec<u64> = records.iter().map(|r| r.images_shown).collect();
    let real: Vec<f64> = records.iter().map(|r| r.score_real).collect();
    let fake: Vec<f64> = records.iter().map(|r| r.score_fake).collect();
    let real_s = ewma(&real, alpha)?;
    let fake_s = ewma(&fake, alpha)?;
    write_series_csv(&dir.join("scores_real.csv"), &xs, &real, &real_s)?;
    write_series_csv(&dir.join("scores_fake.csv"), &xs, &fake, &fake_s)?;

    let (w, panel) = (800u32, 300u32);
    let mut img = RgbImage::from_pixel(w, 2 * panel, Rgb([255, 255, 255]));
    plot_panel(&mut img, 0, panel, &xs, &real, &real_s, (Rgb([160, 180, 240]), Rgb([20, 60, 200])));
    plot_panel(&mut img, panel, panel, &xs, &fake, &fake_s, (Rgb([240, 170, 170]), Rgb([200, 30, 30])));
    img.save(dir.join("scores.png"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Module;
    use crate::rng;

    fn micro_d() -> Discriminator<f64> {
        Discriminator::new(&ArchConfig { channel_divisor: 64, ..ArchConfig::micro() }, &mut rng::derived(0, 1)).unwrap()
    }

    #[test]
    fn gradcam_range_and_zero_case() {
        let mut d = micro_d();
        let x = Tensor::<f64>::from_f64([3, 16, 16], &(0..768).map(|i| ((i as f64) * 0.37).sin()).collect::<Vec<_>>());
        let m = gradcam(&d, &x, 8).unwrap();
        assert_eq!(m.map.shape(), [8, 8]);
        assert_eq!(m.overlay.shape(), [16, 16]);
        assert!(m.map.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(m.map.data().iter().copied().fold(0.0, f64::max), 1.0);
        for p in d.params_mut() {
            if p.name() == "head.out.weight" {
                let z = Tensor::zeros(p.value().shape().to_vec());
                p.set_value(z).unwrap();
            }
        }
        let m = gradcam(&d, &x, 8).unwrap();
        assert!(m.map.data().iter().chain(m.overlay.data()).all(|v| *v == 0.0));
        assert!(gradcam(&d, &x, 5).is_err());
    }

    #[test]
    fn grid_layout_and_raw_roundtrip() {
        let imgs = Tensor::<f32>::from_f64([3, 3, 2, 2], &(0..36).map(|i| i as f64 / 36.0).collect::<Vec<_>>());
        let g = image_grid(&imgs, 2).unwrap();
        assert_eq!(g.shape(), [3, 4, 4]);
        assert_eq!(g.data()[0], imgs.data()[0]);
        assert_eq!(g.data()[2], imgs.data()[12]);
        assert_eq!(g.data()[3 * 4 + 3], -1.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tensor");
        save_raw(&imgs, &p).unwrap();
        assert_eq!(load_raw(&p).unwrap(), imgs);
    }

    #[test]
    fn default_level_is_quarter_resolution() {
        assert_eq!(default_attention_res(&ArchConfig::default()), 16);
        assert_eq!(default_attention_res(&ArchConfig::full_256()), 64);
    }
}
