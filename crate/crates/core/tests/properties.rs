use proptest::prelude::*;

use glead::autograd::{Tensor, Var};
use glead::config::{DatasetSpec, FResolution, GleadConfig};
use glead::diagnostics::image_grid;
use glead::discriminator::minibatch_stddev;
use glead::metrics::{fid, precision_recall, FeatureSet};
use glead::trainer::{ewma, Checkpoint, LogRecord};

fn features(rows: usize, dim: usize) -> impl Strategy<Value = FeatureSet> {
    prop::collection::vec(-3.0f64..3.0, rows * dim).prop_map(move |d| FeatureSet::new(rows, dim, d, "p").unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn config_text_roundtrips(
        res_pow in 3u32..8,
        divisor in prop::sample::select(vec![1usize, 2, 4, 16]),
        lambda1 in 0.0f64..200.0,
        lambda2 in 0.0f64..20.0,
        interval in 1u64..32,
        batch in prop::sample::select(vec![4usize, 8, 32]),
        no_decoder in any::<bool>(),
        seed in any::<u64>(),
        toy_count in 8usize..5000,
    ) {
        let resolution = 1usize << res_pow;
        let mut c = GleadConfig { lambda1, lambda2, r1_interval: interval, batch_size: batch, seed, ..Default::default() };
        c.arch.resolution = resolution;
        c.arch.channel_divisor = divisor;
        c.arch.f_resolution = if no_decoder { FResolution::None } else { FResolution::Res(4) };
        c.dataset = DatasetSpec::Toy { count: toy_count, seed: seed / 3 };
        let back: GleadConfig = c.to_text().parse().unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn ewma_stays_within_the_input_range(xs in prop::collection::vec(-1e3f64..1e3, 1..200), alpha in 0.0f64..=1.0) {
        let s = ewma(&xs, alpha).unwrap();
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(s.len(), xs.len());
        prop_assert_eq!(s[0], xs[0]);
        for v in s {
            prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
        }
    }

    #[test]
    fn fid_is_symmetric_and_non_negative(a in features(30, 4), b in features(25, 4)) {
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0));
        prop_assert!(fid(&a, &a).unwrap() <= 1e-8);
    }

    #[test]
    fn precision_recall_are_fractions(a in features(12, 3), b in features(15, 3), k in 1usize..5) {
        let (p, r) = precision_recall(&a, &b, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&r));
        let (p2, r2) = precision_recall(&b, &a, k).unwrap();
        prop_assert_eq!((p, r), (r2, p2));
    }

    #[test]
    fn checkpoints_roundtrip(values in prop::collection::vec(-1e6f32..1e6, 1..64), counter in any::<u64>()) {
        let mut ck = Checkpoint::default();
        let t = Tensor::<f32>::new([values.len()], values.clone());
        ck.put_tensor("t", &t);
        ck.put_u64("n", counter);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let t = back.tensor::<f32>("t").unwrap();
        prop_assert_eq!(t.data(), &values[..]);
        prop_assert_eq!(back.get_u64("n").unwrap(), counter);
    }

    #[test]
    fn corrupted_checkpoints_are_rejected(values in prop::collection::vec(-1.0f32..1.0, 1..16), at in any::<prop::sample::Index>()) {
        let mut ck = Checkpoint::default();
        ck.put_tensor("t", &Tensor::<f32>::new([values.len()], values));
        let mut bytes = ck.to_bytes();
        let i = at.index(bytes.len());
        bytes[i] ^= 0x40;
        prop_assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn log_rows_roundtrip(
        n in 0u64..1u64 << 40,
        v in prop::array::uniform6(-1e4f64..1e4),
        wall in 0.0f64..1e5,
    ) {
        let r = LogRecord {
            images_shown: n,
            score_real: v[0],
            score_fake: v[1],
            loss_g: v[2],
            loss_d: v[3],
            rec_real: v[4],
            rec_fake: v[5],
            wallclock_s: wall,
        };
        let back = LogRecord::parse_csv(&r.to_csv()).unwrap();
        prop_assert_eq!(back.scalars(), r.scalars());
        prop_assert_eq!(back.images_shown, n);
    }

    #[test]
    fn grids_hold_every_image(n in 1usize..12, cols in 1usize..6, res in prop::sample::select(vec![4usize, 8])) {
        let data: Vec<f64> = (0..n * 3 * res * res).map(|i| (i % 7) as f64 / 7.0).collect();
        let imgs = Tensor::<f64>::from_f64([n, 3, res, res], &data);
        let g = image_grid(&imgs, cols).unwrap();
        let rows = n.div_ceil(cols);
        prop_assert_eq!(g.shape(), &[3, rows * res, cols * res][..]);
        let (i, c) = (n - 1, 1);
        let (gy, gx) = (i / cols * res, i % cols * res);
        let w = g.dim(2);
        prop_assert_eq!(g.data()[c * rows * res * w + gy * w + gx], imgs.data()[((i * 3) + c) * res * res]);
    }

    #[test]
    fn mbstd_appends_one_constant_channel(
        groups in 1usize..3,
        group in prop::sample::select(vec![1usize, 2, 4]),
        vals in prop::collection::vec(-2.0f64..2.0, 8 * 2 * 4 * 4),
    ) {
        let n = groups * group;
        let x = Tensor::<f64>::from_f64([n, 2, 4, 4], &vals[..n * 32]);
        let y = minibatch_stddev(&Var::constant(x.clone()), group).unwrap();
        let y = y.value();
        prop_assert_eq!(y.shape(), &[n, 3, 4, 4][..]);
        for i in 0..n {
            let extra = &y.data()[(i * 3 + 2) * 16..(i * 3 + 3) * 16];
            prop_assert!(extra.iter().all(|v| *v == extra[0] && *v >= 0.0));
            prop_assert_eq!(&y.data()[i * 48..i * 48 + 32], &x.data()[i * 32..(i + 1) * 32]);
        }
    }
}
