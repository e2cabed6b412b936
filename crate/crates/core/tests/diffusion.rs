use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tridiff::diffusion::{
    cfg_combine, clean_mask, cosine_schedule, ddim_step, gaussian_tensor, inference_timesteps, q_sample,
};

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

#[test]
fn forward_noising_has_the_scheduled_moments() {
    let schedule = cosine_schedule(1000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x0 = Tensor::full(0.6f64, (2, 64, 64, 3), &Device::Cpu).unwrap();
    let mask = clean_mask(2, false);
    for t in [1, 100, 500, 900, 1000] {
        let ab = schedule.alpha_bar(t);
        let noise = gaussian_tensor(&mut rng, &[2, 64, 64, 3], DType::F64).unwrap();
        let xt = values(&q_sample(&x0, t, &noise, &schedule, &mask).unwrap().images);
        let n = xt.len() as f64;
        let mean = xt.iter().sum::<f64>() / n;
        let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // About 24k samples: the mean is within 4 standard errors, the variance within 5%.
        let se = ((1.0 - ab) / n).sqrt();
        assert!((mean - 0.6 * ab.sqrt()).abs() < 4.0 * se + 1e-12, "t {t}: mean {mean}");
        assert!((var - (1.0 - ab)).abs() <= 0.05 * (1.0 - ab), "t {t}: var {var}");
    }
}

#[test]
fn guidance_interpolates_and_extrapolates() {
    let cond = Tensor::new(&[1.0f64, 2.0, -1.0], &Device::Cpu).unwrap();
    let uncond = Tensor::new(&[0.0f64, 1.0, 1.0], &Device::Cpu).unwrap();
    assert_eq!(values(&cfg_combine(&cond, &uncond, 1.0).unwrap()), values(&cond));
    assert_eq!(values(&cfg_combine(&cond, &uncond, 0.0).unwrap()), values(&uncond));
    assert_eq!(values(&cfg_combine(&cond, &uncond, 3.0).unwrap()), vec![3.0, 4.0, -5.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn inference_schedule_descends_to_zero(steps in 1usize..=1000) {
        let pairs = inference_timesteps(1000, steps).unwrap();
        prop_assert_eq!(pairs.len(), steps);
        prop_assert_eq!(pairs[0].0, 1000);
        prop_assert_eq!(pairs[steps - 1].1, 0);
        for (k, (t, prev)) in pairs.iter().enumerate() {
            prop_assert!(prev < t);
            if k + 1 < steps {
                prop_assert_eq!(*prev, pairs[k + 1].0);
            }
        }
    }

    #[test]
    fn ddim_steps_compose_with_an_exact_prediction(t in 2usize..=1000, a in 0.0f64..1.0, b in 0.0f64..1.0, seed in 0u64..1000) {
        // With the true x0, stepping t -> mid -> end equals stepping t -> end directly.
        let mid = 1 + ((t - 2) as f64 * a) as usize;
        let end = (mid as f64 * b) as usize;
        let schedule = cosine_schedule(1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = gaussian_tensor(&mut rng, &[3, 4, 4, 3], DType::F64).unwrap();
        let noise = gaussian_tensor(&mut rng, &[3, 4, 4, 3], DType::F64).unwrap();
        let mask = clean_mask(3, seed % 2 == 0);
        let xt = q_sample(&x0, t, &noise, &schedule, &mask).unwrap();
        let two = ddim_step(&ddim_step(&xt, &x0, mid, &schedule).unwrap(), &x0, end, &schedule).unwrap();
        let one = ddim_step(&xt, &x0, end, &schedule).unwrap();
        for (p, q) in values(&two.images).iter().zip(values(&one.images)) {
            prop_assert!((p - q).abs() < 1e-8);
        }
        prop_assert_eq!(two.t, end);
    }
}
