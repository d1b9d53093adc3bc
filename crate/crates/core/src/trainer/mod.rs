//! The alternating training loop: one generator update, then one
//! discriminator update whose loss includes reconstructing both the real
//! batch and a fresh fake batch through the frozen generator.

pub mod checkpoint;
pub mod log;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Float, Tensor, Var};
use crate::config::GleadConfig;
use crate::data::{open_with_holdout, Batcher, BatcherState, Dataset};
use crate::diagnostics;
use crate::discriminator::Discriminator;
use crate::error::{GleadError, Result};
use crate::generator::{sample_latents, Generator};
use crate::losses::{
    discriminator_adversarial_loss, generator_adversarial_loss, r1_from_scores, total_discriminator_loss,
    LossWeights, PerceptualExtractor,
};
use crate::metrics::{self, MetricReport};
use crate::nn::{ema_blend, Adam, Module, Tape};
use crate::rng;

pub use checkpoint::Checkpoint;
pub use log::{ewma, read_log, LogRecord, CSV_HEADER};

const W_AVG_BETA: f64 = 0.995;
const EVAL_STREAM: u64 = 7;
const GRID_STREAM: u64 = 8;

/// Which network an optimizer step touched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Event {
    GUpdate,
    DUpdate,
}

/// A log record plus what the iteration did internally.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub record: LogRecord,
    pub events: Vec<Event>,
    pub g_checksum_before_d: u64,
    pub g_checksum_after_d: u64,
    pub real_reconstructions: u32,
    pub fake_reconstructions: u32,
    pub r1_applied: bool,
}

/// Networks, optimizers, data position and RNG streams of a run.
pub struct Trainer<T: Float> {
    pub config: GleadConfig,
    pub g: Generator<T>,
    pub g_ema: Generator<T>,
    pub d: Discriminator<T>,
    pub g_opt: Adam<T>,
    pub d_opt: Adam<T>,
    pub extractor: PerceptualExtractor<T>,
    pub data: Dataset,
    pub held_out: Dataset,
    batcher: Batcher,
    latent_rng: ChaCha8Rng,
    pub images_shown: u64,
    pub d_steps: u64,
    weights: LossWeights,
    started: Instant,
    elapsed_before: f64,
}

/// Build the extractor a config asks for.
pub fn build_extractor<T: Float>(config: &GleadConfig) -> Result<PerceptualExtractor<T>> {
    match &config.extractor_path {
        Some(p) => PerceptualExtractor::load(p),
        None => PerceptualExtractor::random(config.extractor_seed, &config.extractor_channels),
    }
}

impl<T: Float> Trainer<T> {
    pub fn new(config: GleadConfig) -> Result<Self> {
        config.validate()?;
        let (data, held_out) = open_with_holdout(&config.dataset, config.arch.resolution)?;
        Self::with_data(config, data, held_out)
    }

    /// Start a run on already loaded images.
    pub fn with_data(config: GleadConfig, data: Dataset, held_out: Dataset) -> Result<Self> {
        config.validate()?;
        if data.resolution() != config.arch.resolution || held_out.resolution() != config.arch.resolution {
            return Err(GleadError::Dataset(format!(
                "dataset resolution {} does not match the configured {}",
                data.resolution(),
                config.arch.resolution
            )));
        }
        let seed = config.seed;
        let g = Generator::new(&config.arch, &mut rng::derived(seed, 0))?;
        let d = Discriminator::new(&config.arch, &mut rng::derived(seed, 1))?;
        let g_ema = g.clone();
        let g_opt = Adam::new(config.g_lr, config.g_betas.0, config.g_betas.1);
        // Lazy R1 shares the D optimizer; rescale so the effective step
        // matches an unregularized schedule.
        let c = if config.r1_gamma > 0.0 {
            config.r1_interval as f64 / (config.r1_interval as f64 + 1.0)
        } else {
            1.0
        };
        let d_opt = Adam::new(config.d_lr * c, config.d_betas.0.powf(c), config.d_betas.1.powf(c));
        let extractor = build_extractor(&config)?;
        let batcher = Batcher::new(data.len(), seed ^ 0xda7a, config.mirror);
        let weights = LossWeights::new(config.lambda1, config.lambda2, config.r1_gamma)?;
        Ok(Trainer {
            g,
            g_ema,
            d,
            g_opt,
            d_opt,
            extractor,
            data,
            held_out,
            batcher,
            latent_rng: rng::derived(seed, 2),
            images_shown: 0,
            d_steps: 0,
            weights,
            started: Instant::now(),
            elapsed_before: 0.0,
            config,
        })
    }

    fn diverged(&self, detail: String) -> GleadError {
        GleadError::Diverged { images_shown: self.images_shown, detail }
    }

    fn check_scalar(&self, what: &str, v: f64) -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.diverged(format!("{what} is {v}")))
        }
    }

    /// One iteration: a generator update followed by a discriminator update.
    /// Nothing is modified when an error (including divergence) is returned
    /// before the corresponding update.
    pub fn step(&mut self) -> Result<StepReport> {
        let n = self.config.batch_size;
        let mut events = Vec::with_capacity(2);

        // Generator: adversarial loss only, discriminator parameters constant.
        let z = sample_latents::<T>(&mut self.latent_rng, n, self.g.z_dim());
        let (loss_g, ws, g_grads) = {
            let tape = Tape::training(self.g.param_ids());
            let w = self.g.map(&tape, &Var::constant(z), 1.0)?;
            let img = self.g.synthesize(&tape, &w)?;
            let s = self.d.score(&tape, &img)?;
            let loss = generator_adversarial_loss(&s)?;
            let lv = self.check_scalar("generator loss", loss.value().item().as_f64())?;
            let grads = tape.grads(&loss);
            if !grads.all_finite() {
                return Err(self.diverged("non-finite generator gradient".into()));
            }
            (lv, w.value().clone(), grads)
        };
        self.g_opt.step(&mut self.g, &g_grads);
        self.g.update_w_avg(&ws, W_AVG_BETA);
        ema_blend(&mut self.g_ema, &self.g, self.config.ema_decay())?;
        self.g_ema.set_w_avg(self.g.w_avg().clone())?;
        events.push(Event::GUpdate);

        // Discriminator: adversarial + reconstruction (+ lazy R1).
        let g_before = self.g.checksum();
        let z = sample_latents::<T>(&mut self.latent_rng, n, self.g.z_dim());
        let gz = self.g.generate(&z, 1.0)?;
        let x: Tensor<T> = self.batcher.next_batch(&self.data, n);
        let r1_now = self.weights.r1_gamma > 0.0 && self.d_steps % self.config.r1_interval == 0;
        let mut recs = (0u32, 0u32);
        let (loss_d, score_real, score_fake, rec_real, rec_fake, d_grads) = {
            let tape = Tape::training(self.d.param_ids());
            let x_var = Var::leaf(x.clone(), r1_now);
            let gz_var = Var::constant(gz);
            let real = self.d.features(&tape, &x_var)?;
            let fake = self.d.features(&tape, &gz_var)?;
            let adv = discriminator_adversarial_loss(&real.scores, &fake.scores)?;
            let f_res = self.d.f_resolution();
            let mut rec_terms = Vec::new();
            let (mut rec_real, mut rec_fake) = (0.0, 0.0);
            if self.weights.lambda1 > 0.0 {
                let pred = self.d.decode(&tape, &real.pyramid)?;
                let x_rec = self.g.reconstruct_prediction(&tape, f_res, &pred)?;
                let term = self.extractor.distance(&Var::constant(x), &x_rec)?.mean_all();
                rec_real = term.value().item().as_f64();
                rec_terms.push(term.scale(self.weights.lambda1));
                recs.0 += 1;
            }
            if self.weights.lambda2 > 0.0 {
                let pred = self.d.decode(&tape, &fake.pyramid)?;
                let gz_rec = self.g.reconstruct_prediction(&tape, f_res, &pred)?;
                let term = self.extractor.distance(&gz_var.detach(), &gz_rec)?.mean_all();
                rec_fake = term.value().item().as_f64();
                rec_terms.push(term.scale(self.weights.lambda2));
                recs.1 += 1;
            }
            let rec = rec_terms.into_iter().reduce(|a, b| a.add(&b));
            let r1 = if r1_now {
                Some(r1_from_scores(&x_var, &real.scores, self.weights.r1_gamma, n)?.scale(self.config.r1_interval as f64))
            } else {
                None
            };
            let loss = total_discriminator_loss(&adv, rec.as_ref(), r1.as_ref());
            let lv = self.check_scalar("discriminator loss", loss.value().item().as_f64())?;
            let grads = tape.grads(&loss);
            if !grads.all_finite() {
                return Err(self.diverged("non-finite discriminator gradient".into()));
            }
            (
                lv,
                real.scores.value().mean().as_f64(),
                fake.scores.value().mean().as_f64(),
                rec_real,
                rec_fake,
                grads,
            )
        };
        self.d_opt.step(&mut self.d, &d_grads);
        events.push(Event::DUpdate);
        let g_after = self.g.checksum();

        self.d_steps += 1;
        self.images_shown += n as u64;
        Ok(StepReport {
            record: LogRecord {
                images_shown: self.images_shown,
                score_real,
                score_fake,
                loss_g,
                loss_d,
                rec_real,
                rec_fake,
                wallclock_s: self.wallclock(),
            },
            events,
            g_checksum_before_d: g_before,
            g_checksum_after_d: g_after,
            real_reconstructions: recs.0,
            fake_reconstructions: recs.1,
            r1_applied: r1_now,
        })
    }

    pub fn wallclock(&self) -> f64 {
        self.elapsed_before + self.started.elapsed().as_secs_f64()
    }

    /// Desk FID / precision / recall of the EMA generator, plus held-out
    /// reconstruction distance.
    pub fn evaluate(&self) -> Result<MetricReport> {
        let mut r = rng::derived(self.config.seed, EVAL_STREAM);
        let mut report =
            metrics::evaluate(&self.g_ema, &self.data, &self.extractor, self.config.eval_samples, self.config.pr_k, &mut r)?;
        report.images_shown = Some(self.images_shown);
        report.reconstruction = Some(metrics::reconstruction_eval(&self.d, &self.g, &self.held_out, &self.extractor)?);
        Ok(report)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint { config: self.config.to_text(), ..Default::default() };
        for (prefix, g) in [("g", &self.g), ("g_ema", &self.g_ema)] {
            for p in g.params() {
                ck.put_tensor(format!("{prefix}/{}", p.name()), p.value());
            }
            for (name, b) in g.buffers() {
                ck.put_tensor(format!("{prefix}/buffer/{name}"), b);
            }
        }
        for p in self.d.params() {
            ck.put_tensor(format!("d/{}", p.name()), p.value());
        }
        for (prefix, opt) in [("g_opt", &self.g_opt), ("d_opt", &self.d_opt)] {
            for (name, (m, v)) in opt.moments() {
                ck.put_tensor(format!("{prefix}/m/{name}"), m);
                ck.put_tensor(format!("{prefix}/v/{name}"), v);
            }
            ck.put_u64(format!("{prefix}/step"), opt.step);
        }
        let ds = self.batcher.state();
        ck.put_u64("data/epoch", ds.epoch);
        ck.put_u64("data/pos", ds.pos);
        ck.bytes.insert("data/mirror_rng".into(), ds.mirror_rng);
        ck.bytes.insert("rng/latent".into(), rng::save(&self.latent_rng));
        ck.put_u64("images_shown", self.images_shown);
        ck.put_u64("d_steps", self.d_steps);
        ck.put_u64("wallclock_ms", (self.wallclock() * 1000.0) as u64);
        ck
    }

    /// Resume from a checkpoint, re-reading the dataset named in its config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: GleadConfig = ck.config.parse()?;
        let (data, held_out) = open_with_holdout(&config.dataset, config.arch.resolution)?;
        Self::from_checkpoint_with_data(ck, data, held_out)
    }

    pub fn from_checkpoint_with_data(ck: &Checkpoint, data: Dataset, held_out: Dataset) -> Result<Self> {
        let config: GleadConfig = ck.config.parse()?;
        let mut t = Self::with_data(config, data, held_out)?;
        load_generator(ck, "g", &mut t.g)?;
        load_generator(ck, "g_ema", &mut t.g_ema)?;
        load_module(ck, "d", &mut t.d)?;
        for (prefix, opt) in [("g_opt", &mut t.g_opt), ("d_opt", &mut t.d_opt)] {
            opt.step = ck.get_u64(&format!("{prefix}/step"))?;
            let m_prefix = format!("{prefix}/m/");
            for (key, m) in ck.tensors.range(m_prefix.clone()..) {
                let Some(name) = key.strip_prefix(&m_prefix) else { break };
                let v = ck.tensor(&format!("{prefix}/v/{name}"))?;
                opt.set_moments(name.to_string(), m.cast(), v);
            }
        }
        t.batcher.restore(&BatcherState {
            epoch: ck.get_u64("data/epoch")?,
            pos: ck.get_u64("data/pos")?,
            mirror_rng: ck.get_bytes("data/mirror_rng")?.to_vec(),
        })?;
        t.latent_rng = rng::restore(ck.get_bytes("rng/latent")?)?;
        t.images_shown = ck.get_u64("images_shown")?;
        t.d_steps = ck.get_u64("d_steps")?;
        t.elapsed_before = ck.get_u64("wallclock_ms")? as f64 / 1000.0;
        t.started = Instant::now();
        Ok(t)
    }
}

fn load_module<T: Float>(ck: &Checkpoint, prefix: &str, m: &mut dyn Module<T>) -> Result<()> {
    let mut expected = 0;
    for p in m.params_mut() {
        let name = format!("{prefix}/{}", p.name());
        p.set_value(ck.tensor(&name)?)
            .map_err(|e| GleadError::Format(format!("checkpoint entry {name}: {e}")))?;
        expected += 1;
    }
    let present = ck
        .tensors
        .keys()
        .filter(|k| k.strip_prefix(prefix).is_some_and(|r| r.starts_with('/') && !r.starts_with("/buffer/")))
        .count();
    if present != expected {
        return Err(GleadError::Format(format!(
            "checkpoint has {present} {prefix} parameters, the configured network has {expected}"
        )));
    }
    Ok(())
}

fn load_generator<T: Float>(ck: &Checkpoint, prefix: &str, g: &mut Generator<T>) -> Result<()> {
    load_module(ck, prefix, g)?;
    for (name, b) in g.buffers_mut() {
        let key = format!("{prefix}/buffer/{name}");
        let v: Tensor<T> = ck.tensor(&key)?;
        if v.shape() != b.shape() {
            return Err(GleadError::Format(format!("checkpoint entry {key} has shape {:?}", v.shape())));
        }
        *b = v;
    }
    Ok(())
}

/// Networks needed for inference, loaded from a checkpoint file.
pub struct Models {
    pub config: GleadConfig,
    pub g: Generator<f32>,
    pub g_ema: Generator<f32>,
    pub d: Discriminator<f32>,
    pub images_shown: u64,
}

pub fn load_models(path: &Path) -> Result<Models> {
    let ck = Checkpoint::load(path)?;
    let config: GleadConfig = ck.config.parse()?;
    let seed = config.seed;
    let mut g = Generator::new(&config.arch, &mut rng::derived(seed, 0))?;
    let mut d = Discriminator::new(&config.arch, &mut rng::derived(seed, 1))?;
    load_generator(&ck, "g", &mut g)?;
    let mut g_ema = g.clone();
    load_generator(&ck, "g_ema", &mut g_ema)?;
    load_module(&ck, "d", &mut d)?;
    Ok(Models { images_shown: ck.get_u64("images_shown")?, config, g, g_ema, d })
}

/// Options for [`train_run`].
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from the newest checkpoint in the run directory if present.
    pub resume: bool,
    /// Stop after this many iterations in this invocation (for tests and
    /// interruption drills); the run stays resumable.
    pub max_iterations: Option<u64>,
    /// Skip periodic desk-FID evaluation.
    pub skip_eval: bool,
}

/// How a run ended.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub images_shown: u64,
    pub finished: bool,
    pub diverged: Option<String>,
    pub evaluations: Vec<MetricReport>,
    pub best_checkpoint: Option<PathBuf>,
}

fn crossed(prev: u64, now: u64, every_kimg: f64) -> bool {
    if every_kimg <= 0.0 {
        return false;
    }
    let every = (every_kimg * 1000.0).round().max(1.0) as u64;
    prev / every != now / every
}

pub fn checkpoint_name(images_shown: u64) -> String {
    format!("ckpt-{images_shown:09}.ckpt")
}

/// Newest checkpoint in `<out>/checkpoints`, by images shown.
pub fn latest_checkpoint(out: &Path) -> Option<PathBuf> {
    let dir = out.join("checkpoints");
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .collect();
    v.sort();
    v.pop()
}

struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn create(root: &Path) -> Result<Self> {
        for sub in ["", "checkpoints", "samples", "diagnostics"] {
            let p = root.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| GleadError::io(&p, e))?;
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    fn log(&self) -> PathBuf {
        self.root.join("log.csv")
    }

    fn eval_log(&self) -> PathBuf {
        self.root.join("eval.log")
    }

    fn checkpoint(&self, images: u64) -> PathBuf {
        self.root.join("checkpoints").join(checkpoint_name(images))
    }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| GleadError::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| GleadError::io(path, e))
}

/// Evaluations recorded so far in a run directory.
pub fn read_eval_log(out: &Path) -> Result<Vec<MetricReport>> {
    let p = out.join("eval.log");
    if !p.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(&p).map_err(|e| GleadError::io(&p, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(MetricReport::parse_kv).collect()
}

fn checkpoint_and_eval<T: Float>(t: &Trainer<T>, dir: &RunDir, eval: bool, reports: &mut Vec<MetricReport>) -> Result<()> {
    let ck = dir.checkpoint(t.images_shown);
    t.to_checkpoint().save(&ck)?;
    if !eval {
        return Ok(());
    }
    let report = t.evaluate()?;
    append_line(&dir.eval_log(), &report.to_kv())?;
    let name = format!("grid-{:09}", t.images_shown);
    let mut r = rng::derived(t.config.seed, GRID_STREAM);
    diagnostics::render_sample_grid(&t.g_ema, &mut r, 16, 4, &dir.root.join("samples"), &name)?;
    reports.push(report);
    write_best_pointer(&dir.root)?;
    Ok(())
}

/// Point `best.txt` at the evaluated checkpoint with the lowest FID.
pub fn write_best_pointer(out: &Path) -> Result<Option<PathBuf>> {
    let reports = read_eval_log(out)?;
    let best = reports
        .iter()
        .filter(|r| r.fid.is_finite())
        .filter_map(|r| r.images_shown.map(|i| (r.fid, i)))
        .min_by(|a, b| a.0.total_cmp(&b.0));
    let Some((fid, images)) = best else { return Ok(None) };
    let ck = out.join("checkpoints").join(checkpoint_name(images));
    let p = out.join("best.txt");
    std::fs::write(&p, format!("checkpoint={}\nfid={fid}\nimages_shown={images}\n", ck.display()))
        .map_err(|e| GleadError::io(&p, e))?;
    Ok(Some(ck))
}

/// Train until the configured number of images has been shown, writing
/// the config snapshot, CSV log, checkpoints, evaluations and sample grids
/// under `out`.
pub fn train_run(config: &GleadConfig, out: &Path, opts: &RunOptions) -> Result<RunSummary> {
    config.validate()?;
    let dir = RunDir::create(out)?;
    let resume_from = if opts.resume { latest_checkpoint(out) } else { None };
    let mut trainer: Trainer<f32> = match &resume_from {
        Some(ck) => {
            ::log::info!("resuming from {}", ck.display());
            let t = Trainer::from_checkpoint(&Checkpoint::load(ck)?)?;
            // Drop log rows written after the checkpoint.
            let rows: Vec<LogRecord> =
                read_log(&dir.log())?.into_iter().filter(|r| r.images_shown <= t.images_shown).collect();
            log::write_log(&dir.log(), &rows)?;
            t
        }
        None => {
            let t = Trainer::new(config.clone())?;
            log::write_log(&dir.log(), &[])?;
            let _ = std::fs::remove_file(dir.eval_log());
            t
        }
    };
    let cfg_path = out.join("config.txt");
    std::fs::write(&cfg_path, trainer.config.to_text()).map_err(|e| GleadError::io(&cfg_path, e))?;
    let mut reports = Vec::new();
    let eval = !opts.skip_eval;
    if resume_from.is_none() {
        checkpoint_and_eval(&trainer, &dir, eval, &mut reports)?;
    }
    let target = trainer.config.total_images();
    let mut done = 0u64;
    let mut diverged = None;
    while trainer.images_shown < target {
        if opts.max_iterations.is_some_and(|m| done >= m) {
            break;
        }
        let prev = trainer.images_shown;
        match trainer.step() {
            Ok(report) => log::append_log(&dir.log(), &report.record)?,
            Err(GleadError::Diverged { images_shown, detail }) => {
                ::log::error!("diverged at {images_shown} images: {detail}");
                let snap = out.join("diverged.ckpt");
                trainer.to_checkpoint().save(&snap)?;
                let p = out.join("diverged.txt");
                std::fs::write(&p, format!("images_shown={images_shown}\ndetail={detail}\nsnapshot={}\n", snap.display()))
                    .map_err(|e| GleadError::io(&p, e))?;
                diverged = Some(detail);
                break;
            }
            Err(e) => return Err(e),
        }
        done += 1;
        let now = trainer.images_shown;
        let at_end = now >= target;
        let eval_tick = crossed(prev, now, trainer.config.eval_kimg);
        if at_end || eval_tick || crossed(prev, now, trainer.config.checkpoint_kimg) {
            checkpoint_and_eval(&trainer, &dir, eval && (eval_tick || at_end), &mut reports)?;
        }
    }
    let finished = trainer.images_shown >= target && diverged.is_none();
    if done > 0 || resume_from.is_none() {
        let records = read_log(&dir.log())?;
        if !records.is_empty() {
            diagnostics::render_score_curves(&records, 0.05, &dir.root.join("diagnostics"))?;
        }
    }
    if latest_checkpoint(out).map_or(true, |p| p != dir.checkpoint(trainer.images_shown)) && diverged.is_none() {
        trainer.to_checkpoint().save(&dir.checkpoint(trainer.images_shown))?;
    }
    let best_checkpoint = write_best_pointer(out)?;
    Ok(RunSummary {
        out_dir: out.to_path_buf(),
        images_shown: trainer.images_shown,
        finished,
        diverged,
        evaluations: read_eval_log(out)?,
        best_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ArchConfig, DatasetSpec, FResolution};
    use crate::data::make_toy_dataset;

    fn micro_config() -> GleadConfig {
        GleadConfig {
            arch: ArchConfig { channel_divisor: 64, z_dim: 8, w_dim: 8, mapping_layers: 2, ..ArchConfig::micro() },
            batch_size: 4,
            extractor_channels: vec![4, 4, 4],
            dataset: DatasetSpec::Toy { count: 16, seed: 0 },
            r1_interval: 2,
            ..Default::default()
        }
    }

    fn trainer(cfg: GleadConfig) -> Trainer<f32> {
        let data = make_toy_dataset(16, 16, 0).unwrap();
        let held = make_toy_dataset(4, 16, 1).unwrap();
        Trainer::with_data(cfg, data, held).unwrap()
    }

    #[test]
    fn step_orders_updates_and_keeps_g_frozen_during_d() {
        let mut t = trainer(micro_config());
        for _ in 0..3 {
            let r = t.step().unwrap();
            assert_eq!(r.events, [Event::GUpdate, Event::DUpdate]);
            assert_eq!(r.g_checksum_before_d, r.g_checksum_after_d);
            assert_eq!((r.real_reconstructions, r.fake_reconstructions), (1, 1));
            assert!(r.record.rec_real > 0.0 && r.record.rec_fake > 0.0);
        }
        assert_eq!(t.images_shown, 12);
    }

    #[test]
    fn disabled_reconstruction_skips_decoder() {
        let mut t = trainer(GleadConfig { lambda1: 0.0, lambda2: 0.0, ..micro_config() });
        let before: Vec<u64> = t.d.decoder_params().iter().map(|p| p.value().checksum()).collect();
        let r = t.step().unwrap();
        assert_eq!((r.real_reconstructions, r.fake_reconstructions), (0, 0));
        let after: Vec<u64> = t.d.decoder_params().iter().map(|p| p.value().checksum()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted() {
        let cfg = GleadConfig { arch: ArchConfig { f_resolution: FResolution::Res(8), ..micro_config().arch }, ..micro_config() };
        let mut a = trainer(cfg.clone());
        a.step().unwrap();
        let ck = Checkpoint::from_bytes(&a.to_checkpoint().to_bytes()).unwrap();
        let data = make_toy_dataset(16, 16, 0).unwrap();
        let held = make_toy_dataset(4, 16, 1).unwrap();
        let mut b = Trainer::<f32>::from_checkpoint_with_data(&ck, data, held).unwrap();
        for _ in 0..3 {
            let ra = a.step().unwrap().record;
            let rb = b.step().unwrap().record;
            assert_eq!(ra.scalars(), rb.scalars());
        }
    }

    #[test]
    fn divergence_is_reported_without_update() {
        let mut t = trainer(micro_config());
        let p = t.d.params_mut().into_iter().find(|p| p.name() == "head.out.bias").unwrap();
        p.set_value(Tensor::full([1], f32::NAN)).unwrap();
        let before = t.g.checksum();
        match t.step() {
            Err(GleadError::Diverged { images_shown: 0, .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|r| r.record)),
        }
        assert_eq!(t.g.checksum(), before);
    }

    #[test]
    fn crossing_cadence() {
        assert!(crossed(3990, 4010, 4.0));
        assert!(!crossed(4010, 4020, 4.0));
        assert!(!crossed(0, 100, 0.0));
    }
}
