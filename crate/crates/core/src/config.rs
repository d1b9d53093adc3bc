//! Run configuration and its flat `key = value` text format.
//!
//! ```text
//! # comments start with '#'
//! resolution = 32
//! f_resolution = none
//! lambda1 = 10
//! ```
//!
//! Every key is optional (defaults are the desk-scale settings); unknown or
//! repeated keys are errors.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{GleadError, Result};

const CHANNEL_BASE: usize = 16384;
const CHANNEL_MAX: usize = 512;

/// Resolution of the spatial representation predicted by the decoder, or
/// `None` for the variant that predicts only the latent code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FResolution {
    None,
    Res(usize),
}

impl fmt::Display for FResolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FResolution::None => write!(f, "none"),
            FResolution::Res(r) => write!(f, "{r}"),
        }
    }
}

impl FromStr for FResolution {
    type Err = GleadError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" | "1" => Ok(FResolution::None),
            v => v
                .parse()
                .map(FResolution::Res)
                .map_err(|_| GleadError::Config(format!("f_resolution: expected integer or 'none', got {v:?}"))),
        }
    }
}

/// Network shapes shared by the generator and the discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub resolution: usize,
    /// Divides the full-scale channel schedule `min(16384 / res, 512)`.
    pub channel_divisor: usize,
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_layers: usize,
    pub f_resolution: FResolution,
    pub mbstd_group: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            resolution: 64,
            channel_divisor: 4,
            z_dim: 128,
            w_dim: 128,
            mapping_layers: 8,
            f_resolution: FResolution::Res(8),
            mbstd_group: 4,
        }
    }
}

impl ArchConfig {
    /// The 256x256 layout with unscaled widths.
    pub fn full_256() -> Self {
        ArchConfig {
            resolution: 256,
            channel_divisor: 1,
            z_dim: 512,
            w_dim: 512,
            mapping_layers: 8,
            f_resolution: FResolution::Res(32),
            mbstd_group: 4,
        }
    }

    /// A tiny layout for gradient checks: 16x16, widths of 32.
    pub fn micro() -> Self {
        ArchConfig {
            resolution: 16,
            channel_divisor: 16,
            z_dim: 16,
            w_dim: 16,
            mapping_layers: 2,
            f_resolution: FResolution::Res(4),
            mbstd_group: 4,
        }
    }

    /// Decoder resolution used when a config does not name one: `R/8`,
    /// but never below the 4x4 base.
    pub fn default_f_resolution(resolution: usize) -> usize {
        (resolution / 8).max(4)
    }

    /// Channel width at a given feature-map resolution.
    pub fn width(&self, res: usize) -> usize {
        ((CHANNEL_BASE / res).min(CHANNEL_MAX) / self.channel_divisor).max(1)
    }

    /// Synthesis block resolutions, 4 up to the image resolution.
    pub fn block_resolutions(&self) -> Vec<usize> {
        let mut v = Vec::new();
        let mut r = 4;
        while r <= self.resolution {
            v.push(r);
            r *= 2;
        }
        v
    }

    /// Entry resolutions at which reconstruction may start.
    pub fn supported_f_resolutions(&self) -> Vec<usize> {
        self.block_resolutions().into_iter().filter(|&r| r <= self.resolution / 2).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if !r.is_power_of_two() || r < 8 {
            return Err(GleadError::Config(format!("resolution must be a power of two >= 8, got {r}")));
        }
        if self.channel_divisor == 0 || self.z_dim == 0 || self.w_dim == 0 || self.mbstd_group == 0 {
            return Err(GleadError::Config("channel_divisor, z_dim, w_dim and mbstd_group must be positive".into()));
        }
        if let FResolution::Res(f) = self.f_resolution {
            if !self.supported_f_resolutions().contains(&f) {
                return Err(GleadError::Config(format!(
                    "f_resolution {f} is not a synthesis block resolution in 4..={} for image resolution {r}",
                    r / 2
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Toy { count: usize, seed: u64 },
    Directory(PathBuf),
}

/// Every architectural and training setting of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct GleadConfig {
    pub arch: ArchConfig,
    pub lambda1: f64,
    pub lambda2: f64,
    pub r1_gamma: f64,
    pub r1_interval: u64,
    pub g_lr: f64,
    pub d_lr: f64,
    pub g_betas: (f64, f64),
    pub d_betas: (f64, f64),
    pub batch_size: usize,
    /// EMA half-life in thousands of images.
    pub ema_kimg: f64,
    pub total_kimg: f64,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub mirror: bool,
    pub extractor_seed: u64,
    pub extractor_channels: Vec<usize>,
    pub extractor_path: Option<PathBuf>,
    pub checkpoint_kimg: f64,
    pub eval_kimg: f64,
    pub eval_samples: usize,
    pub pr_k: usize,
}

impl Default for GleadConfig {
    fn default() -> Self {
        GleadConfig {
            arch: ArchConfig::default(),
            lambda1: 10.0,
            lambda2: 3.0,
            r1_gamma: 1.0,
            r1_interval: 16,
            g_lr: 0.0025,
            d_lr: 0.0025,
            g_betas: (0.0, 0.99),
            d_betas: (0.0, 0.99),
            batch_size: 32,
            ema_kimg: 10.0,
            total_kimg: 200.0,
            seed: 0,
            dataset: DatasetSpec::Toy { count: 2000, seed: 0 },
            mirror: true,
            extractor_seed: 0,
            extractor_channels: vec![32, 64, 128],
            extractor_path: None,
            checkpoint_kimg: 4.0,
            eval_kimg: 4.0,
            eval_samples: 2000,
            pr_k: 3,
        }
    }
}

const KEYS: &[&str] = &[
    "resolution",
    "channel_divisor",
    "z_dim",
    "w_dim",
    "mapping_layers",
    "f_resolution",
    "mbstd_group",
    "lambda1",
    "lambda2",
    "r1_gamma",
    "r1_interval",
    "g_lr",
    "d_lr",
    "g_beta1",
    "g_beta2",
    "d_beta1",
    "d_beta2",
    "batch_size",
    "ema_kimg",
    "total_kimg",
    "seed",
    "dataset",
    "toy_count",
    "toy_seed",
    "mirror",
    "extractor_seed",
    "extractor_channels",
    "extractor_path",
    "checkpoint_kimg",
    "eval_kimg",
    "eval_samples",
    "pr_k",
];

fn parse<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse().map_err(|_| GleadError::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(GleadError::Config(format!("{key}: expected boolean, got {v:?}"))),
    }
}

impl GleadConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GleadError::io(path, e))?;
        text.parse()
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "resolution" => self.arch.resolution = parse(key, v)?,
            "channel_divisor" => self.arch.channel_divisor = parse(key, v)?,
            "z_dim" => self.arch.z_dim = parse(key, v)?,
            "w_dim" => self.arch.w_dim = parse(key, v)?,
            "mapping_layers" => self.arch.mapping_layers = parse(key, v)?,
            "f_resolution" => self.arch.f_resolution = v.parse()?,
            "mbstd_group" => self.arch.mbstd_group = parse(key, v)?,
            "lambda1" => self.lambda1 = parse(key, v)?,
            "lambda2" => self.lambda2 = parse(key, v)?,
            "r1_gamma" => self.r1_gamma = parse(key, v)?,
            "r1_interval" => self.r1_interval = parse(key, v)?,
            "g_lr" => self.g_lr = parse(key, v)?,
            "d_lr" => self.d_lr = parse(key, v)?,
            "g_beta1" => self.g_betas.0 = parse(key, v)?,
            "g_beta2" => self.g_betas.1 = parse(key, v)?,
            "d_beta1" => self.d_betas.0 = parse(key, v)?,
            "d_beta2" => self.d_betas.1 = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "ema_kimg" => self.ema_kimg = parse(key, v)?,
            "total_kimg" => self.total_kimg = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "dataset" => {
                self.dataset = if v == "toy" {
                    match self.dataset {
                        DatasetSpec::Toy { .. } => self.dataset.clone(),
                        DatasetSpec::Directory(_) => DatasetSpec::Toy { count: 2000, seed: 0 },
                    }
                } else {
                    DatasetSpec::Directory(PathBuf::from(v))
                }
            }
            "toy_count" | "toy_seed" => {
                let DatasetSpec::Toy { count, seed } = &mut self.dataset else {
                    return Err(GleadError::Config(format!("{key} requires dataset = toy")));
                };
                if key == "toy_count" {
                    *count = parse(key, v)?;
                } else {
                    *seed = parse(key, v)?;
                }
            }
            "mirror" => self.mirror = parse_bool(key, v)?,
            "extractor_seed" => self.extractor_seed = parse(key, v)?,
            "extractor_channels" => {
                self.extractor_channels =
                    v.split(',').map(|c| parse(key, c.trim())).collect::<Result<Vec<usize>>>()?
            }
            "extractor_path" => self.extractor_path = (!v.is_empty() && v != "none").then(|| PathBuf::from(v)),
            "checkpoint_kimg" => self.checkpoint_kimg = parse(key, v)?,
            "eval_kimg" => self.eval_kimg = parse(key, v)?,
            "eval_samples" => self.eval_samples = parse(key, v)?,
            "pr_k" => self.pr_k = parse(key, v)?,
            other => return Err(GleadError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let finite_nonneg = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("r1_gamma", self.r1_gamma),
            ("g_lr", self.g_lr),
            ("d_lr", self.d_lr),
            ("ema_kimg", self.ema_kimg),
            ("total_kimg", self.total_kimg),
            ("checkpoint_kimg", self.checkpoint_kimg),
            ("eval_kimg", self.eval_kimg),
        ];
        for (k, v) in finite_nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(GleadError::Config(format!("{k} must be finite and nonnegative, got {v}")));
            }
        }
        for (k, (b1, b2)) in [("g", self.g_betas), ("d", self.d_betas)] {
            if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
                return Err(GleadError::Config(format!("{k}_beta1/{k}_beta2 must lie in [0, 1)")));
            }
        }
        if self.batch_size < 2 {
            return Err(GleadError::Config("batch_size must be at least 2".into()));
        }
        let group = self.arch.mbstd_group.min(self.batch_size);
        if self.batch_size % group != 0 {
            return Err(GleadError::Config(format!(
                "batch_size {} is not divisible by the minibatch-stddev group {group}",
                self.batch_size
            )));
        }
        if self.r1_interval == 0 {
            return Err(GleadError::Config("r1_interval must be at least 1".into()));
        }
        if self.extractor_channels.len() < 3 || self.extractor_channels.contains(&0) {
            return Err(GleadError::Config("extractor_channels needs at least 3 positive stage widths".into()));
        }
        if self.arch.resolution >> self.extractor_channels.len() == 0 {
            return Err(GleadError::Config("too many extractor stages for the image resolution".into()));
        }
        if self.pr_k == 0 {
            return Err(GleadError::Config("pr_k must be positive".into()));
        }
        let dim = self.extractor_channels[self.extractor_channels.len() - 1];
        if self.extractor_path.is_none() && self.eval_samples <= dim {
            return Err(GleadError::Config(format!(
                "eval_samples must exceed the {dim}-dimensional embedding for a full-rank covariance"
            )));
        }
        Ok(())
    }

    /// Per-step EMA decay giving a half-life of `ema_kimg` thousand images.
    pub fn ema_decay(&self) -> f64 {
        if self.ema_kimg <= 0.0 {
            return 0.0;
        }
        0.5f64.powf(self.batch_size as f64 / (self.ema_kimg * 1000.0))
    }

    pub fn total_images(&self) -> u64 {
        (self.total_kimg * 1000.0).round() as u64
    }

    /// The canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        let a = &self.arch;
        put("resolution", a.resolution.to_string());
        put("channel_divisor", a.channel_divisor.to_string());
        put("z_dim", a.z_dim.to_string());
        put("w_dim", a.w_dim.to_string());
        put("mapping_layers", a.mapping_layers.to_string());
        put("f_resolution", a.f_resolution.to_string());
        put("mbstd_group", a.mbstd_group.to_string());
        put("lambda1", format!("{:?}", self.lambda1));
        put("lambda2", format!("{:?}", self.lambda2));
        put("r1_gamma", format!("{:?}", self.r1_gamma));
        put("r1_interval", self.r1_interval.to_string());
        put("g_lr", format!("{:?}", self.g_lr));
        put("d_lr", format!("{:?}", self.d_lr));
        put("g_beta1", format!("{:?}", self.g_betas.0));
        put("g_beta2", format!("{:?}", self.g_betas.1));
        put("d_beta1", format!("{:?}", self.d_betas.0));
        put("d_beta2", format!("{:?}", self.d_betas.1));
        put("batch_size", self.batch_size.to_string());
        put("ema_kimg", format!("{:?}", self.ema_kimg));
        put("total_kimg", format!("{:?}", self.total_kimg));
        put("seed", self.seed.to_string());
        match &self.dataset {
            DatasetSpec::Toy { count, seed } => {
                put("dataset", "toy".into());
                put("toy_count", count.to_string());
                put("toy_seed", seed.to_string());
            }
            DatasetSpec::Directory(p) => put("dataset", p.display().to_string()),
        }
        put("mirror", self.mirror.to_string());
        put("extractor_seed", self.extractor_seed.to_string());
        put(
            "extractor_channels",
            self.extractor_channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
        );
        if let Some(p) = &self.extractor_path {
            put("extractor_path", p.display().to_string());
        }
        put("checkpoint_kimg", format!("{:?}", self.checkpoint_kimg));
        put("eval_kimg", format!("{:?}", self.eval_kimg));
        put("eval_samples", self.eval_samples.to_string());
        put("pr_k", self.pr_k.to_string());
        out
    }

    pub fn known_keys() -> &'static [&'static str] {
        KEYS
    }
}

impl FromStr for GleadConfig {
    type Err = GleadError;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = GleadConfig::default();
        let mut seen = std::collections::HashSet::new();
        // `dataset` must be applied before the toy_* keys that refine it.
        let mut lines: Vec<(usize, &str, &str)> = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(GleadError::Config(format!("line {}: expected key = value", no + 1)));
            };
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(GleadError::Config(format!("line {}: duplicate key {k:?}", no + 1)));
            }
            lines.push((no, k, v));
        }
        lines.sort_by_key(|(_, k, _)| if *k == "dataset" { 0 } else { 1 });
        let explicit_f_res = seen.contains("f_resolution");
        for (no, k, v) in lines {
            cfg.set(k, v).map_err(|e| match e {
                GleadError::Config(m) => GleadError::Config(format!("line {}: {m}", no + 1)),
                other => other,
            })?;
        }
        if !explicit_f_res {
            cfg.arch.f_resolution = FResolution::Res(ArchConfig::default_f_resolution(cfg.arch.resolution));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut c = GleadConfig::default();
        c.arch.f_resolution = FResolution::None;
        c.lambda1 = 0.1;
        c.extractor_path = Some("/tmp/x".into());
        let back: GleadConfig = c.to_text().parse().unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn decoder_resolution_follows_image_resolution() {
        let at = |r: usize| "resolution = ".to_string() + &r.to_string();
        assert_eq!(at(32).parse::<GleadConfig>().unwrap().arch.f_resolution, FResolution::Res(4));
        assert_eq!(at(256).parse::<GleadConfig>().unwrap().arch.f_resolution, FResolution::Res(32));
        let c: GleadConfig = "resolution = 32\nf_resolution = 8".parse().unwrap();
        assert_eq!(c.arch.f_resolution, FResolution::Res(8));
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        assert!("bogus = 1".parse::<GleadConfig>().is_err());
        assert!("seed = 1\nseed = 2".parse::<GleadConfig>().is_err());
        assert!("seed 1".parse::<GleadConfig>().is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!("resolution = 48".parse::<GleadConfig>().is_err());
        assert!("batch_size = 1".parse::<GleadConfig>().is_err());
        assert!("batch_size = 6".parse::<GleadConfig>().is_err());
        assert!("lambda1 = -1".parse::<GleadConfig>().is_err());
        assert!("f_resolution = 64".parse::<GleadConfig>().is_err());
        assert!("f_resolution = 2".parse::<GleadConfig>().is_err());
        assert!("extractor_channels = 8,8".parse::<GleadConfig>().is_err());
    }

    #[test]
    fn widths_follow_256_schedule() {
        let a = ArchConfig::full_256();
        let w: Vec<_> = [256, 128, 64, 32, 16, 8, 4].iter().map(|&r| a.width(r)).collect();
        assert_eq!(w, [64, 128, 256, 512, 512, 512, 512]);
        assert_eq!(ArchConfig::micro().width(16), 32);
    }

    #[test]
    fn ema_half_life() {
        let c = GleadConfig { batch_size: 10, ema_kimg: 0.01, ..Default::default() };
        assert!((c.ema_decay() - 0.5).abs() < 1e-12);
    }
}
