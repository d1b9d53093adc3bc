//! Command-line front end: `train`, `eval`, `reconstruct`, `attention`,
//! `ablate` and `report`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use crate::autograd::Tensor;
use crate::config::{FResolution, GleadConfig};
use crate::data::{load_dataset, open_with_holdout, prepare_image, DataSource, Dataset};
use crate::diagnostics;
use crate::error::{GleadError, Result};
use crate::metrics::{self, MetricReport};
use crate::rng;
use crate::trainer::{self, build_extractor, load_models, read_eval_log, read_log, RunOptions};

pub const OUT_ENV: &str = "GLEAD_OUT";

#[derive(Parser, Debug)]
#[command(name = "glead", version, about = "Train and inspect GANs whose discriminator reconstructs through the generator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Compute desk FID, precision/recall and reconstruction distance for a checkpoint.
    Eval(EvalArgs),
    /// Reconstruct real and generated images through the discriminator and frozen generator.
    Reconstruct(ImageArgs),
    /// Gradient-weighted attention maps of the discriminator.
    Attention(ImageArgs),
    /// Run a grid of loss weights and decoder resolutions.
    Ablate(AblateArgs),
    /// Collate run directories into a markdown summary.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the newest checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many iterations (the run stays resumable).
    #[arg(long)]
    pub max_iterations: Option<u64>,
    #[arg(long)]
    pub skip_eval: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of real and generated images (defaults to the run's setting).
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ImageArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Image files or directories; defaults to the run's held-out images.
    #[arg(long, num_args = 1..)]
    pub images: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Pyramid level for attention maps (defaults to the level nearest R/4).
    #[arg(long)]
    pub layer_res: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Values of lambda1, comma separated (defaults to the config's).
    #[arg(long, value_delimiter = ',')]
    pub lambda1: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub lambda2: Vec<f64>,
    /// Decoder resolutions: integers, `none`, or fractions such as `R/8`.
    #[arg(long, value_delimiter = ',')]
    pub f_res: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[arg(long)]
    pub max_iterations: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories, or ablation directories containing `cells/`.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Write the summary here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Output root: `--out`, else `$GLEAD_OUT/<default>`, else `runs/<default>`.
pub fn output_dir(explicit: Option<&Path>, default_name: &str) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(default_name)
}

/// Parse and run; returns the process exit status. Usage and errors go to
/// stderr.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a).map(|_| ()),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Attention(a) => attention(a),
        Command::Ablate(a) => ablate(a).map(|_| ()),
        Command::Report(a) => report(a),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<GleadConfig> {
    let mut cfg = GleadConfig::from_file(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config, a.seed)?;
    let out = output_dir(a.out.as_deref(), &format!("train-seed{}", cfg.seed));
    let opts = RunOptions { resume: a.resume, max_iterations: a.max_iterations, skip_eval: a.skip_eval };
    let s = trainer::train_run(&cfg, &out, &opts)?;
    println!("run directory: {}", s.out_dir.display());
    println!("images shown: {}", s.images_shown);
    if let Some(d) = &s.diverged {
        println!("diverged: {d}");
    }
    if let Some(last) = s.evaluations.last() {
        println!("last evaluation: {}", last.to_kv());
    }
    if let Some(b) = &s.best_checkpoint {
        println!("best checkpoint: {}", b.display());
    }
    Ok(())
}

/// Evaluate a checkpoint and write `metrics.txt` next to the outputs.
pub fn eval(a: EvalArgs) -> Result<MetricReport> {
    let m = load_models(&a.ckpt)?;
    let (data, held_out) = open_with_holdout(&m.config.dataset, m.config.arch.resolution)?;
    let extractor = build_extractor::<f32>(&m.config)?;
    let n = a.samples.unwrap_or(m.config.eval_samples);
    let mut r = rng::derived(m.config.seed, 7);
    let mut report = metrics::evaluate(&m.g_ema, &data, &extractor, n, m.config.pr_k, &mut r)?;
    report.images_shown = Some(m.images_shown);
    report.reconstruction = Some(metrics::reconstruction_eval(&m.d, &m.g, &held_out, &extractor)?);
    let out = output_dir(a.out.as_deref(), "eval");
    std::fs::create_dir_all(&out).map_err(|e| GleadError::io(&out, e))?;
    let p = out.join("metrics.txt");
    std::fs::write(&p, report.to_kv() + "\n").map_err(|e| GleadError::io(&p, e))?;
    println!("{}", report.to_kv());
    Ok(report)
}

/// Images named on the command line (files or directories), resized to `res`.
pub fn load_images(paths: &[PathBuf], res: usize) -> Result<Dataset> {
    let mut pixels = Vec::new();
    for p in paths {
        if p.is_dir() {
            let d = load_dataset(p, res)?;
            for i in 0..d.len() {
                pixels.extend_from_slice(d.image_data(i));
            }
        } else {
            let img = image::open(p).map_err(|e| GleadError::Dataset(format!("{}: {e}", p.display())))?;
            pixels.extend(prepare_image(&img.to_rgb8(), res));
        }
    }
    if pixels.is_empty() {
        return Err(GleadError::Dataset("no images given".into()));
    }
    Dataset::from_pixels(pixels, res, DataSource::Files(paths.to_vec()))
}

fn input_images(a: &ImageArgs, m: &trainer::Models) -> Result<Tensor<f32>> {
    let res = m.config.arch.resolution;
    let set = if a.images.is_empty() {
        open_with_holdout(&m.config.dataset, res)?.1
    } else {
        load_images(&a.images, res)?
    };
    Ok(set.head(a.count.max(1)))
}

fn reconstruct(a: ImageArgs) -> Result<()> {
    let m = load_models(&a.ckpt)?;
    let reals = input_images(&a, &m)?;
    let mut r = rng::derived(a.seed.unwrap_or(m.config.seed), 9);
    let fakes = metrics::sample_images(&m.g, reals.dim(0), &mut r, 16)?;
    let extractor = build_extractor::<f32>(&m.config)?;
    let out = output_dir(a.out.as_deref(), "reconstruct");
    let res = diagnostics::render_reconstructions(&m.d, &m.g, &reals, &fakes, &extractor, &out)?;
    let mean = |k: &str| {
        let v: Vec<f64> = res.pairs.iter().filter(|p| p.kind == k).map(|p| p.distance).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    println!("grid: {}", res.grid.display());
    println!("mean distance real={:.6} fake={:.6}", mean("real"), mean("fake"));
    Ok(())
}

fn attention(a: ImageArgs) -> Result<()> {
    let m = load_models(&a.ckpt)?;
    let x = input_images(&a, &m)?;
    let layer = a.layer_res.unwrap_or_else(|| diagnostics::default_attention_res(&m.config.arch));
    let out = output_dir(a.out.as_deref(), "attention");
    std::fs::create_dir_all(&out).map_err(|e| GleadError::io(&out, e))?;
    let mut maps = Vec::with_capacity(x.dim(0));
    for i in 0..x.dim(0) {
        let img = x.row(i).reshape(x.shape()[1..].to_vec());
        let heat = diagnostics::gradcam(&m.d, &img, layer)?;
        diagnostics::attention_overlay(&img, &heat.overlay)?.save(out.join(format!("attention-{i:03}.png")))?;
        maps.push(heat.map.reshape([1, layer, layer]));
    }
    diagnostics::save_raw(&Tensor::concat(&maps, 0), &out.join("attention.tensor"))?;
    println!("{} attention maps at level {layer} written to {}", x.dim(0), out.display());
    Ok(())
}

/// Parse a decoder resolution for an ablation grid, relative to image size `r`.
pub fn parse_f_res(s: &str, resolution: usize) -> Result<FResolution> {
    let t = s.trim();
    if let Some(div) = t.strip_prefix("R/").or_else(|| t.strip_prefix("r/")) {
        let d: usize = div.parse().map_err(|_| GleadError::Config(format!("bad resolution fraction {t:?}")))?;
        if d == 0 || resolution % d != 0 {
            return Err(GleadError::Config(format!("{t} does not divide resolution {resolution}")));
        }
        return Ok(FResolution::Res(resolution / d));
    }
    t.parse()
}

/// One ablation grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub lambda1: f64,
    pub lambda2: f64,
    pub f_res_label: String,
    pub f_res: FResolution,
    pub seed: u64,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!("l1={}_l2={}_r={}_seed={}", self.lambda1, self.lambda2, self.f_res_label.replace('/', "over"), self.seed)
    }
}

/// Outcome of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    /// `ok`, `diverged`, `invalid` or `error`.
    pub status: String,
    pub detail: String,
    pub images_shown: u64,
    pub report: Option<MetricReport>,
}

pub const SUMMARY_HEADER: &str = "lambda1,lambda2,f_res,seed,status,images_shown,fid,precision,recall,reconstruction,detail";

impl CellResult {
    pub fn to_csv(&self) -> String {
        let num = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let r = self.report.as_ref();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.cell.lambda1,
            self.cell.lambda2,
            self.cell.f_res_label,
            self.cell.seed,
            self.status,
            self.images_shown,
            num(r.map(|r| r.fid)),
            num(r.map(|r| r.precision)),
            num(r.map(|r| r.recall)),
            num(r.and_then(|r| r.reconstruction)),
            self.detail.replace([',', '\n'], ";")
        )
    }
}

pub fn expand_grid(base: &GleadConfig, a: &AblateArgs) -> Vec<Cell> {
    let l1 = if a.lambda1.is_empty() { vec![base.lambda1] } else { a.lambda1.clone() };
    let l2 = if a.lambda2.is_empty() { vec![base.lambda2] } else { a.lambda2.clone() };
    let rs = if a.f_res.is_empty() { vec![base.arch.f_resolution.to_string()] } else { a.f_res.clone() };
    let seeds = if a.seeds.is_empty() { vec![base.seed] } else { a.seeds.clone() };
    let mut cells = Vec::new();
    for &lambda1 in &l1 {
        for &lambda2 in &l2 {
            for r in &rs {
                for &seed in &seeds {
                    cells.push(Cell {
                        lambda1,
                        lambda2,
                        f_res_label: r.trim().to_string(),
                        f_res: FResolution::None,
                        seed,
                    });
                }
            }
        }
    }
    cells
}

fn run_cell(base: &GleadConfig, cell: &Cell, root: &Path, max_iterations: Option<u64>) -> CellResult {
    let mut cell = cell.clone();
    let result = |status: &str, detail: String, images_shown, report, cell: Cell| CellResult {
        cell,
        status: status.into(),
        detail,
        images_shown,
        report,
    };
    let mut cfg = base.clone();
    cfg.lambda1 = cell.lambda1;
    cfg.lambda2 = cell.lambda2;
    cfg.seed = cell.seed;
    match parse_f_res(&cell.f_res_label, cfg.arch.resolution) {
        Ok(r) => {
            cell.f_res = r;
            cfg.arch.f_resolution = r;
        }
        Err(e) => return result("invalid", e.to_string(), 0, None, cell),
    }
    if let Err(e) = cfg.validate() {
        return result("invalid", e.to_string(), 0, None, cell);
    }
    let out = root.join("cells").join(cell.dir_name());
    let opts = RunOptions { resume: true, max_iterations, skip_eval: false };
    match trainer::train_run(&cfg, &out, &opts) {
        Ok(s) => {
            let last = s.evaluations.last().cloned();
            match s.diverged {
                Some(d) => result("diverged", d, s.images_shown, last, cell),
                None => result("ok", String::new(), s.images_shown, last, cell),
            }
        }
        Err(GleadError::Diverged { images_shown, detail }) => result("diverged", detail, images_shown, None, cell),
        Err(e) => result("error", e.to_string(), 0, None, cell),
    }
}

/// Run every cell of the grid (sequentially unless `parallel > 1`) and
/// write `summary.csv` and `summary.md` under the output directory.
pub fn ablate(a: AblateArgs) -> Result<Vec<CellResult>> {
    let base = load_config(&a.config, None)?;
    let out = output_dir(a.out.as_deref(), "ablate");
    std::fs::create_dir_all(&out).map_err(|e| GleadError::io(&out, e))?;
    let cells = expand_grid(&base, &a);
    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    let workers = a.parallel.clamp(1, cells.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                ::log::info!("ablation cell {}/{}: {}", i + 1, cells.len(), cell.dir_name());
                let r = run_cell(&base, cell, &out, a.max_iterations);
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    let results: Vec<CellResult> =
        results.into_inner().expect("no poisoned workers").into_iter().map(|r| r.expect("every cell ran")).collect();
    let mut csv = String::from(SUMMARY_HEADER);
    csv.push('\n');
    for r in &results {
        csv.push_str(&r.to_csv());
        csv.push('\n');
    }
    let p = out.join("summary.csv");
    std::fs::write(&p, &csv).map_err(|e| GleadError::io(&p, e))?;
    let md = summary_markdown(&csv)?;
    let p = out.join("summary.md");
    std::fs::write(&p, &md).map_err(|e| GleadError::io(&p, e))?;
    print!("{md}");
    Ok(results)
}

/// Markdown table of an ablation `summary.csv`.
pub fn summary_markdown(csv: &str) -> Result<String> {
    let mut lines = csv.lines();
    let header = lines.next().ok_or_else(|| GleadError::Format("empty summary".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let mut s = String::new();
    writeln!(s, "| {} |", cols.join(" | ")).expect("string write");
    writeln!(s, "|{}", "---|".repeat(cols.len())).expect("string write");
    for l in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = l.splitn(cols.len(), ',').collect();
        writeln!(s, "| {} |", f.join(" | ")).expect("string write");
    }
    Ok(s)
}

fn run_dirs(paths: &[PathBuf]) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for p in paths {
        let cells = p.join("cells");
        if cells.is_dir() {
            let mut v: Vec<PathBuf> = std::fs::read_dir(&cells)
                .into_iter()
                .flatten()
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            v.sort();
            out.extend(v);
        } else {
            out.push(p.clone());
        }
    }
    out
}

/// Markdown summary of run directories, computed only from their
/// `config.txt`, `log.csv`, `eval.log` and `diverged.txt`.
pub fn report_markdown(paths: &[PathBuf]) -> Result<String> {
    let mut s = String::from(
        "| run | lambda1 | lambda2 | f_res | seed | images | status | final FID | best FID | precision | recall | rec. init | rec. final | L_G | L_D |\n",
    );
    s.push_str(&format!("|{}\n", "---|".repeat(15)));
    for dir in run_dirs(paths) {
        let cfg_path = dir.join("config.txt");
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| GleadError::io(&cfg_path, e))?;
        let cfg: GleadConfig = text.parse()?;
        let evals = read_eval_log(&dir)?;
        let log = if dir.join("log.csv").exists() { read_log(&dir.join("log.csv"))? } else { Vec::new() };
        let status = if dir.join("diverged.txt").exists() {
            "diverged"
        } else if log.last().is_some_and(|r| r.images_shown >= cfg.total_images()) {
            "finished"
        } else {
            "partial"
        };
        let f = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        let last = evals.last();
        let best = evals.iter().map(|e| e.fid).filter(|v| v.is_finite()).min_by(f64::total_cmp);
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        writeln!(
            s,
            "| {name} | {} | {} | {} | {} | {} | {status} | {} | {} | {} | {} | {} | {} | {} | {} |",
            cfg.lambda1,
            cfg.lambda2,
            cfg.arch.f_resolution,
            cfg.seed,
            log.last().map_or(0, |r| r.images_shown),
            f(last.map(|e| e.fid)),
            f(best),
            f(last.map(|e| e.precision)),
            f(last.map(|e| e.recall)),
            f(evals.first().and_then(|e| e.reconstruction)),
            f(last.and_then(|e| e.reconstruction)),
            f(log.last().map(|r| r.loss_g)),
            f(log.last().map(|r| r.loss_d)),
        )
        .expect("string write");
    }
    Ok(s)
}

fn report(a: ReportArgs) -> Result<()> {
    let md = report_markdown(&a.runs)?;
    match a.out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| GleadError::io(parent, e))?;
            }
            std::fs::write(&p, &md).map_err(|e| GleadError::io(&p, e))?;
        }
        None => print!("{md}"),
    }
    Ok(())
}

/// Cells grouped by configuration (ignoring the seed), in grid order.
pub fn group_by_setting(results: &[CellResult]) -> BTreeMap<String, Vec<&CellResult>> {
    let mut m: BTreeMap<String, Vec<&CellResult>> = BTreeMap::new();
    for r in results {
        let key = format!("l1={} l2={} r={}", r.cell.lambda1, r.cell.lambda2, r.cell.f_res_label);
        m.entry(key).or_default().push(r);
    }
    m
}
