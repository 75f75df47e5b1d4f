mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use diffmatch::diffusion::{
    corrupt, extract_features, extract_pair, gaussian_noise, ImageTensor, NoiseSchedule, ScheduleKind,
};
use diffmatch::tensor::Tensor;

fn image(seed: u64, side: usize) -> ImageTensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::new(Tensor::randn(&[3, side, side], 0.5, &mut rng)).unwrap()
}

fn prompt(seed: u64, n: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[n, 16], 1.0, &mut rng)
}

#[test]
fn toy_features_are_half_resolution() {
    let unet = common::toy::<f64>(64);
    let f = extract_features(&image(1, 64), 50, &prompt(2, 75), 3, &unet, &NoiseSchedule::default()).unwrap();
    assert_eq!(f.grid().height, 32);
    assert_eq!(f.grid().width, 32);
    assert_eq!(f.channels(), 16);
}

#[test]
fn features_depend_on_the_prompt() {
    let unet = common::toy::<f64>(32);
    let sched = NoiseSchedule::default();
    let img = image(4, 32);
    let a = extract_features(&img, 50, &prompt(5, 10), 1, &unet, &sched).unwrap();
    let b = extract_features(&img, 50, &prompt(6, 10), 1, &unet, &sched).unwrap();
    assert!(a.data().max_abs_diff(b.data()) > 1e-3);
}

#[test]
fn prompt_length_limits() {
    let unet = common::toy::<f64>(16);
    let sched = NoiseSchedule::default();
    assert!(extract_features(&image(1, 16), 0, &prompt(1, 77), 0, &unet, &sched).is_ok());
    assert!(extract_features(&image(1, 16), 0, &prompt(1, 78), 0, &unet, &sched).is_err());
    let narrow = Tensor::<f64>::zeros(&[4, 8]);
    assert!(extract_features(&image(1, 16), 0, &narrow, 0, &unet, &sched).is_err());
}

#[test]
fn pair_extraction_seeds() {
    let unet = common::toy::<f64>(16);
    let sched = NoiseSchedule::default();
    let (x, y) = (image(7, 16), image(8, 16));
    let p = prompt(9, 6);
    let (a1, b1) = extract_pair(&x, &x, 200, &p, (5, 5), &unet, &sched).unwrap();
    assert_eq!(a1, b1);
    let (a2, b2) = extract_pair(&x, &x, 200, &p, (5, 6), &unet, &sched).unwrap();
    assert_ne!(a2, b2);
    let (fx, fy) = extract_pair(&x, &y, 200, &p, (1, 2), &unet, &sched).unwrap();
    let (gy, gx) = extract_pair(&y, &x, 200, &p, (2, 1), &unet, &sched).unwrap();
    assert_eq!(fx, gx);
    assert_eq!(fy, gy);
}

#[test]
fn schedule_variants_are_valid() {
    for kind in [ScheduleKind::Linear, ScheduleKind::ScaledLinear] {
        let s = NoiseSchedule::build(1000, 1e-4, 0.02, kind).unwrap();
        let mut acc = 1.0;
        for (t, (&a, &ab)) in s.alphas().iter().zip(s.alpha_bars()).enumerate() {
            assert!(a > 0.0 && a <= 1.0);
            acc *= a;
            assert!((ab - acc).abs() <= 1e-9, "t = {t}");
        }
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn toy_output_is_finite(seed in 0u64..10_000, t in 0usize..1000, n in 1usize..20, scale in 0.01f64..20.0) {
        let unet = common::toy::<f64>(16);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = ImageTensor::new(Tensor::randn(&[3, 16, 16], scale, &mut rng)).unwrap();
        let p = Tensor::randn(&[n, 16], scale, &mut rng);
        let f = extract_features(&img, t, &p, seed, &unet, &NoiseSchedule::default()).unwrap();
        prop_assert!(f.data().is_finite());
    }

    #[test]
    fn corrupt_is_jointly_linear(seed in 0u64..10_000, t in 0usize..1000, a in -5.0f64..5.0) {
        let sched = NoiseSchedule::default();
        let img = image(seed, 4);
        let e = gaussian_noise::<f64>(&[3, 4, 4], seed + 1);
        let scaled_img = ImageTensor::new(img.data().map(|v| a * v)).unwrap();
        let lhs = corrupt(&scaled_img, t, &e.map(|v| a * v), &sched).unwrap();
        let rhs = corrupt(&img, t, &e, &sched).unwrap().data().map(|v| a * v);
        prop_assert!(lhs.data().max_abs_diff(&rhs) <= 1e-9);
    }
}
