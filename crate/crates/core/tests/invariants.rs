use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use speckle_ddpm::container::{decode, encode, NamedArray};
use speckle_ddpm::data::{crop_padding, normalize, pad_to_square, Volume};
use speckle_ddpm::metrics::{enl, psnr, snr, Roi, RoiSet};
use speckle_ddpm::sampler::p_sample_step;
use speckle_ddpm::{
    fuse, lr_schedule, Bandwidth, FusionConfig, Image, RegistrationMethod, ScheduleSpec, TrainConfig,
    VarianceSchedule, ZeroPredictor,
};

fn image(h: usize, w: usize, seed: u64, lo: f32, hi: f32) -> Image {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(h, w, |_| rng.random_range(lo..hi))
}

fn rois() -> RoiSet {
    let r = |row, col| Roi {
        row,
        col,
        height: 4,
        width: 4,
    };
    RoiSet {
        background_rois: vec![r(0, 0)],
        foreground_rois: vec![r(8, 8), r(8, 0)],
        homogeneous_rois: vec![r(8, 8)],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fusion_is_convex(seed in any::<u64>(), radius in 1usize..4, index in 0usize..5) {
        let slices: Vec<Image> = (0..5).map(|k| image(12, 12, seed ^ k, -1.0, 1.0)).collect();
        let vol = Volume::new(slices.clone()).unwrap();
        let cfg = FusionConfig { radius, registration: RegistrationMethod::None, ..FusionConfig::default() };
        let out = fuse(&vol, index, &cfg).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let (lo, hi) = slices.iter().fold((f32::MAX, f32::MIN), |(lo, hi), s| {
                    (lo.min(s.get(i, j)), hi.max(s.get(i, j)))
                });
                let v = out.get(i, j);
                prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
            }
        }
    }

    #[test]
    fn fusion_keeps_identical_slices(v in -1.0f32..1.0, n in 1usize..6, shift in 0usize..3) {
        let img = image(10, 10, 3, -1.0, 1.0).map(|x| x * 0.5 + v * 0.5);
        let vol = Volume::new(vec![img.clone(); n]).unwrap();
        for bandwidth in [Bandwidth::Auto, Bandwidth::Uniform, Bandwidth::Fixed(0.1)] {
            let cfg = FusionConfig {
                bandwidth,
                registration: RegistrationMethod::Translation { max_shift: shift },
                ..FusionConfig::default()
            };
            let out = fuse(&vol, n / 2, &cfg).unwrap();
            prop_assert!(out.max_abs_diff(&img) < 1e-5);
        }
    }

    #[test]
    fn snr_and_enl_ignore_scale(seed in any::<u64>(), s in 0.1f32..10.0) {
        let img = image(16, 16, seed, 0.05, 1.0);
        let scaled = img.scale(s);
        let r = rois();
        prop_assert!((snr(&img, &r).unwrap() - snr(&scaled, &r).unwrap()).abs() < 1e-3);
        let (a, b) = (enl(&img, &r).unwrap(), enl(&scaled, &r).unwrap());
        prop_assert!((a - b).abs() <= 1e-4 * a.abs());
    }

    #[test]
    fn psnr_is_symmetric_in_error(seed in any::<u64>()) {
        let reference = image(8, 8, seed, 0.0, 1.0);
        let noise = image(8, 8, seed.wrapping_add(1), -0.1, 0.1);
        let up = reference.axpby(1.0, &noise, 1.0).unwrap();
        let down = reference.axpby(1.0, &noise, -1.0).unwrap();
        let (a, b) = (psnr(&up, &reference).unwrap(), psnr(&down, &reference).unwrap());
        prop_assert!((a - b).abs() < 1e-3, "{a} vs {b}");
    }

    #[test]
    fn schedules_are_monotone(steps in 1usize..400, b0 in 1e-5f64..1e-2, span in 0.0f64..0.2) {
        let s = VarianceSchedule::linear(steps, b0, b0 + span).unwrap();
        for t in 1..=steps {
            prop_assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0);
            prop_assert!(s.tilde_beta(t) <= s.beta(t) + 1e-15);
            if t > 1 {
                prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                prop_assert!(s.beta(t) >= s.beta(t - 1));
            }
        }
    }

    #[test]
    fn sampler_step_stays_finite(seed in any::<u64>(), t in 1usize..=100) {
        let sched = ScheduleSpec::OCT.build().unwrap();
        let x = image(8, 8, seed, -1.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = p_sample_step(&x, t, &ZeroPredictor, &sched, &mut rng, true).unwrap();
        prop_assert!(y.is_finite());
        let y = p_sample_step(&x, t, &ZeroPredictor, &sched, &mut rng, false).unwrap();
        // zero noise estimate: the mean is x_t / sqrt(alpha_t)
        let expect = x.scale((1.0 / sched.alpha(t).sqrt()) as f32);
        prop_assert!(y.max_abs_diff(&expect) < 1e-5);
    }

    #[test]
    fn denoise_output_is_clamped(seed in any::<u64>(), t in 1usize..=100) {
        let sched = VarianceSchedule::oct();
        let x = image(8, 8, seed, -1.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = speckle_ddpm::denoise(&x, t, &ZeroPredictor, &sched, &mut rng).unwrap();
        prop_assert!(y.is_normalized(0.0));
    }

    #[test]
    fn learning_rate_never_increases(lr in 1e-6f64..1.0, period in 1usize..20) {
        let cfg = TrainConfig { initial_lr: lr, lr_halving_period_epochs: period, ..TrainConfig::default() };
        let mut prev = f64::INFINITY;
        for e in 0..200 {
            let cur = lr_schedule(e, &cfg);
            prop_assert!(cur <= prev && cur > 0.0);
            prev = cur;
        }
    }

    #[test]
    fn container_round_trips(data in proptest::collection::vec(any::<f32>(), 0..64), key in "[a-z]{1,8}") {
        let meta = serde_json::json!({ "kind": "test", key.clone(): data.len() });
        let arrays = vec![
            NamedArray::new("a", vec![data.len()], data.clone()),
            NamedArray::new(key.clone(), vec![1, 1], vec![1.5]),
        ];
        let bytes = encode(&meta, &arrays).unwrap();
        let c = decode(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(&c.meta, &meta);
        prop_assert_eq!(c.arrays.len(), 2);
        let a = c.get("a").unwrap();
        prop_assert!(a.data.iter().zip(&data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn padding_round_trips(h in 1usize..20, w in 1usize..20, extra in 0usize..6, seed in any::<u64>()) {
        let img = image(h, w, seed, -1.0, 1.0);
        let (padded, pad) = pad_to_square(&img, h.max(w) + extra).unwrap();
        prop_assert_eq!(padded.height(), padded.width());
        prop_assert_eq!(crop_padding(&padded, &pad).unwrap(), img);
    }

    #[test]
    fn normalize_hits_the_unit_interval(seed in any::<u64>(), lo in -5.0f32..0.0, span in 0.1f32..10.0) {
        let img = image(6, 7, seed, lo, lo + span);
        let n = normalize(&img).unwrap();
        let (a, b) = n.min_max();
        prop_assert!((a + 1.0).abs() < 1e-5 && (b - 1.0).abs() < 1e-5);
    }
}
