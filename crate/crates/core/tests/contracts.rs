use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use glead::autograd::Tensor;
use glead::config::{ArchConfig, GleadConfig};
use glead::data::{load_dataset, make_toy_dataset, mirror_augment};
use glead::diagnostics::gradcam;
use glead::discriminator::Discriminator;
use glead::losses::PerceptualExtractor;
use glead::metrics::{embed_features, parameter_overhead, precision_recall, FeatureSet};
use glead::nn::Module;
use glead::rng;
use glead::trainer::{read_eval_log, read_log, train_run, RunOptions, Trainer};

fn micro_run_config() -> GleadConfig {
    GleadConfig {
        arch: ArchConfig::micro(),
        batch_size: 4,
        r1_interval: 4,
        ema_kimg: 0.02,
        extractor_channels: vec![8, 16, 16],
        dataset: glead::config::DatasetSpec::Toy { count: 24, seed: 2 },
        ..Default::default()
    }
}

#[test]
fn ema_follows_the_geometric_recursion() {
    let cfg = micro_run_config();
    let beta = cfg.ema_decay();
    assert!(beta > 0.0 && beta < 1.0);
    let mut t = Trainer::<f32>::new(cfg).unwrap();
    let pick = |m: &dyn Module<f32>| m.params().iter().map(|p| p.value().data()[0] as f64).take(5).collect::<Vec<_>>();
    let e0 = pick(&t.g_ema);
    let mut gs = Vec::new();
    for _ in 0..12 {
        t.step().unwrap();
        gs.push(pick(&t.g));
    }
    let got = pick(&t.g_ema);
    let n = gs.len() as i32;
    for j in 0..e0.len() {
        let closed: f64 = beta.powi(n) * e0[j]
            + gs.iter().enumerate().map(|(i, g)| (1.0 - beta) * beta.powi(n - 1 - i as i32) * g[j]).sum::<f64>();
        assert!((closed - got[j]).abs() <= 1e-5 * closed.abs().max(1e-2), "param {j}: {closed} vs {}", got[j]);
    }
}

#[test]
fn identical_configs_give_identical_logs_and_best_is_argmin() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = micro_run_config();
    cfg.total_kimg = 0.024;
    cfg.eval_kimg = 0.008;
    cfg.checkpoint_kimg = 0.008;
    cfg.eval_samples = 20;
    let a = train_run(&cfg, &tmp.path().join("a"), &RunOptions::default()).unwrap();
    train_run(&cfg, &tmp.path().join("b"), &RunOptions::default()).unwrap();
    let la = read_log(&tmp.path().join("a/log.csv")).unwrap();
    let lb = read_log(&tmp.path().join("b/log.csv")).unwrap();
    assert_eq!(la.iter().map(|r| r.scalars()).collect::<Vec<_>>(), lb.iter().map(|r| r.scalars()).collect::<Vec<_>>());
    assert_eq!(read_eval_log(&tmp.path().join("a")).unwrap(), read_eval_log(&tmp.path().join("b")).unwrap());

    let evals = read_eval_log(&tmp.path().join("a")).unwrap();
    let best = evals.iter().min_by(|x, y| x.fid.total_cmp(&y.fid)).unwrap();
    let text = std::fs::read_to_string(tmp.path().join("a/best.txt")).unwrap();
    let want = glead::trainer::checkpoint_name(best.images_shown.unwrap());
    assert!(text.contains(&want), "{text} should name {want}");
    assert!(a.best_checkpoint.unwrap().ends_with(&want));
}

fn write_png(path: &std::path::Path, img: &RgbImage) {
    img.save(path).unwrap();
}

#[test]
fn directory_datasets() {
    let tmp = tempfile::tempdir().unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for i in 0..10 {
        let img = RgbImage::from_fn(20, 20, |_, _| Rgb([r.random(), r.random(), r.random()]));
        write_png(&tmp.path().join(format!("{i:02}.png")), &img);
    }
    std::fs::write(tmp.path().join("zz.png"), b"not a png").unwrap();
    std::fs::write(tmp.path().join("notes.txt"), b"ignored").unwrap();
    let d = load_dataset(tmp.path(), 16).unwrap();
    assert_eq!((d.len(), d.resolution()), (10, 16));
    assert!(d.image_data(3).iter().all(|v| (-1.0..=1.0).contains(v)));

    let white = tempfile::tempdir().unwrap();
    write_png(&white.path().join("w.png"), &RgbImage::from_pixel(33, 47, Rgb([255, 255, 255])));
    assert!(load_dataset(white.path(), 8).unwrap().image_data(0).iter().all(|v| *v == 1.0));

    // 100x80 is cropped to its central 80 columns.
    let wide = tempfile::tempdir().unwrap();
    let src = RgbImage::from_fn(100, 80, |x, y| Rgb([(x * 2) as u8, (y * 3) as u8, ((x + y) % 256) as u8]));
    write_png(&wide.path().join("a.png"), &src);
    let d = load_dataset(wide.path(), 80).unwrap();
    let px = d.image_data(0);
    for c in 0..3 {
        for y in 0..80 {
            for x in 0..80 {
                let want = src.get_pixel(x as u32 + 10, y as u32)[c] as f32 / 127.5 - 1.0;
                assert!((px[(c * 80 + y) * 80 + x] - want).abs() < 1e-6);
            }
        }
    }

    let empty = tempfile::tempdir().unwrap();
    assert!(load_dataset(empty.path(), 16).is_err());
    std::fs::write(empty.path().join("bad.jpg"), b"nope").unwrap();
    assert!(load_dataset(empty.path(), 16).is_err());
}

#[test]
fn toy_dataset_contract() {
    let a = make_toy_dataset(2000, 32, 0).unwrap();
    assert_eq!((a.len(), a.resolution(), a.image_data(0).len()), (2000, 32, 3 * 32 * 32));
    assert_eq!(a.checksum(), make_toy_dataset(2000, 32, 0).unwrap().checksum());
    assert_ne!(a.checksum(), make_toy_dataset(2000, 32, 1).unwrap().checksum());
}

#[test]
fn mirror_rate_is_near_one_half() {
    let n = 10_000;
    // Each image is [0, 1] along x; a flip turns it into [1, 0].
    let batch = Tensor::<f32>::from_f64([n, 3, 1, 2], &(0..n * 3).flat_map(|_| [0.0, 1.0]).collect::<Vec<_>>());
    let out = mirror_augment(&batch, &mut ChaCha8Rng::seed_from_u64(9));
    let flipped = (0..n).filter(|i| out.data()[i * 6] == 1.0).count();
    let rate = flipped as f64 / n as f64;
    assert!((0.47..=0.53).contains(&rate), "flip rate {rate}");
    let twice = glead::data::flip_horizontal(&glead::data::flip_horizontal(&batch));
    assert_eq!(twice.data(), batch.data());
}

#[test]
fn embeddings_are_deterministic_and_stack() {
    let ex = PerceptualExtractor::<f32>::random(3, &[8, 16, 24]).unwrap();
    let data = make_toy_dataset(10, 16, 5).unwrap();
    let all: Tensor<f32> = data.head(10);
    let a = embed_features(&all, &ex, 4).unwrap();
    assert_eq!((a.rows(), a.dim()), (10, 24));
    assert_eq!(a.data(), embed_features(&all, &ex, 10).unwrap().data());
    let first = embed_features(&all.narrow(0, 0, 6), &ex, 3).unwrap();
    let rest = embed_features(&all.narrow(0, 6, 4), &ex, 3).unwrap();
    assert_eq!(first.concat(&rest).unwrap().data(), a.data());
}

fn points(v: &[[f64; 2]]) -> FeatureSet {
    FeatureSet::new(v.len(), 2, v.iter().flatten().copied().collect(), "t").unwrap()
}

#[test]
fn precision_recall_subset_and_monotone_in_k() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let real: Vec<[f64; 2]> = (0..20).map(|_| [r.random_range(0.0..1.0), r.random_range(0.0..1.0)]).collect();
    let subset = points(&real[..8]);
    assert_eq!(precision_recall(&points(&real), &subset, 3).unwrap().0, 1.0);
    for seed in 0..5 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<[f64; 2]> = (0..12).map(|_| [r.random_range(0.0..1.0), r.random_range(0.0..1.0)]).collect();
        let b: Vec<[f64; 2]> = (0..12).map(|_| [r.random_range(0.3..1.5), r.random_range(0.0..1.0)]).collect();
        let mut last = (0.0, 0.0);
        for k in 1..11 {
            let pr = precision_recall(&points(&a), &points(&b), k).unwrap();
            assert!(pr.0 >= last.0 && pr.1 >= last.1);
            last = pr;
        }
    }
    assert!(precision_recall(&points(&real), &subset, 8).is_err());
}

#[test]
fn decoder_free_overhead_is_zero() {
    let d = Discriminator::<f32>::new(&ArchConfig::default(), &mut rng::derived(0, 1)).unwrap();
    let with = parameter_overhead(&d);
    let without = parameter_overhead(&d.without_decoder());
    assert_eq!((without.decoder, without.ratio), (0, 0.0));
    assert_eq!((without.backbone, without.head), (with.backbone, with.head));
}

#[test]
fn full_scale_gradcam_map_is_64_square() {
    let arch = ArchConfig::full_256();
    let d = Discriminator::<f32>::new(&arch, &mut rng::derived(0, 1)).unwrap().without_decoder();
    let layer = glead::diagnostics::default_attention_res(&arch);
    assert_eq!(layer, 64);
    let img = Tensor::<f32>::from_f64([3, 256, 256], &(0..3 * 256 * 256).map(|i| ((i % 97) as f64 / 48.0) - 1.0).collect::<Vec<_>>());
    let h = gradcam(&d, &img, layer).unwrap();
    assert_eq!(h.map.shape(), [64, 64]);
    assert_eq!(h.overlay.shape(), [256, 256]);
}
