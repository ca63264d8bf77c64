use motia_core::adaptation::{adaptation_step, adapter_buffer_lengths, iteration_draws, AdaptConfig};
use motia_core::adapters::{init_adapters, sa_weight, Insertion, Rect, SaConfig};
use motia_core::denoiser::{ConditionInput, DenoiserConfig, DenoiserNet};
use motia_core::metrics::{psnr, ssim};
use motia_core::optim::AdamState;
use motia_core::outpaint::{outpaint, Expansion, OutpaintSpec, SamplerConfig};
use motia_core::rng::CounterRng;
use motia_core::schedule::{NoiseSchedule, SigmaMode, TimestepPlan};
use motia_core::Tensor;
use proptest::prelude::*;

fn rect_in(h: usize, w: usize) -> impl Strategy<Value = Rect> {
    (0..h, 0..w)
        .prop_flat_map(move |(t, l)| (Just(t), t + 1..=h, Just(l), l + 1..=w))
        .prop_map(|(t, b, l, r)| Rect::new(t, b, l, r).unwrap())
}

fn tiny_config() -> DenoiserConfig {
    DenoiserConfig {
        width: 4,
        blocks: 1,
        embed_dim: 4,
        channels: 1,
        groups: 2,
    }
}

const DIRECTIONS: [(i64, i64); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

fn check_sa_laws(n: usize, rect: Rect, decay: f64) -> Result<(), TestCaseError> {
    let cfg = SaConfig::new(decay, rect, (n, n)).unwrap();
    let alpha = |r: usize, c: usize| sa_weight((r, c), &cfg, (n, n)).unwrap();
    let mut far = (0, 0);
    let mut far_d = -1.0;
    for r in 0..n {
        for c in 0..n {
            let a = alpha(r, c);
            prop_assert!(a > 0.0 && a <= 1.0);
            if rect.contains(r, c) {
                prop_assert_eq!(a, 1.0);
            }
            let dr = if r < rect.top { rect.top - r } else { r.saturating_sub(rect.bottom - 1) };
            let dc = if c < rect.left { rect.left - c } else { c.saturating_sub(rect.right - 1) };
            let d = ((dr * dr + dc * dc) as f64).sqrt();
            if d > far_d {
                far_d = d;
                far = (r, c);
            }
        }
    }
    if far_d > 0.0 {
        prop_assert!((alpha(far.0, far.1) - (-decay).exp()).abs() < 1e-12);
    }
    // Distance to a convex set never decreases along a ray that starts inside it.
    for r0 in rect.top..rect.bottom {
        for c0 in rect.left..rect.right {
            for (dr, dc) in DIRECTIONS {
                let (mut r, mut c) = (r0 as i64, c0 as i64);
                let mut prev = 1.0;
                while (0..n as i64).contains(&r) && (0..n as i64).contains(&c) {
                    let a = alpha(r as usize, c as usize);
                    prop_assert!(a <= prev, "ray from {:?} dir {:?} rose at {:?}", (r0, c0), (dr, dc), (r, c));
                    prev = a;
                    r += dr;
                    c += dc;
                }
            }
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sa_laws_8(rect in rect_in(8, 8), decay in 0.0f64..6.0) {
        check_sa_laws(8, rect, decay)?;
    }

    #[test]
    fn sa_laws_16(rect in rect_in(16, 16), decay in 0.0f64..6.0) {
        check_sa_laws(16, rect, decay)?;
    }

    #[test]
    fn sa_decay_zero_is_full_insertion(seed in any::<u64>(), rect in rect_in(6, 6)) {
        let net = DenoiserNet::build(tiny_config(), seed).unwrap();
        let mut set = init_adapters(&net, 2, 8.0, seed).unwrap();
        let mut rng = CounterRng::named(seed, "test/sa", 0);
        for (_, a) in set.iter_mut() {
            rng.fill_normal(a.up.data_mut());
        }
        let v = Tensor::uniform_from(&[2, 1, 6, 6], 0.0, 1.0, &mut rng).unwrap();
        let known: Vec<bool> = (0..36).map(|i| rect.contains(i / 6, i % 6)).collect();
        let cond = ConditionInput::from_video(&v, &known).unwrap();
        let x = Tensor::randn_from(&[2, 1, 6, 6], &mut rng).unwrap();
        let full = net.predict_noise(Some(&set), &x, &cond, 300, &Insertion::Full).unwrap();
        let sa = Insertion::SpatialAware(SaConfig::new(0.0, rect, (6, 6)).unwrap());
        let zero = net.predict_noise(Some(&set), &x, &cond, 300, &sa).unwrap();
        prop_assert!(full.data().iter().zip(zero.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn alpha_bar_is_the_running_product(n in 1usize..400, lo in 1e-5f64..1e-3, span in 1e-3f64..0.05) {
        let s = NoiseSchedule::linear(n, lo, lo + span).unwrap();
        let mut prod = 1.0f64;
        for t in 1..=n {
            prod *= 1.0 - s.beta(t);
            prop_assert!((s.alpha_bar(t) - prod).abs() <= 1e-12 * prod);
        }
    }

    #[test]
    fn plans_are_strictly_decreasing(n in 1usize..200) {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let p = TimestepPlan::new(&s, n, SigmaMode::Deterministic).unwrap();
        prop_assert_eq!(p.timesteps().len(), n);
        prop_assert_eq!(p.timesteps()[0], 1000);
        prop_assert!(p.timesteps().windows(2).all(|w| w[0] > w[1]));
        prop_assert!(*p.timesteps().last().unwrap() >= 1);
    }

    #[test]
    fn psnr_is_symmetric_and_ssim_reflexive(seed in any::<u64>()) {
        let mut rng = CounterRng::named(seed, "test/metrics", 0);
        let a = Tensor::uniform_from(&[2, 1, 12, 12], 0.0, 1.0, &mut rng).unwrap();
        let b = Tensor::uniform_from(&[2, 1, 12, 12], 0.0, 1.0, &mut rng).unwrap();
        prop_assert_eq!(psnr(&a, &b, None).unwrap(), psnr(&b, &a, None).unwrap());
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        prop_assert!(ssim(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn known_pixels_survive_outpainting(
        seed in any::<u64>(),
        top in 0usize..3, bottom in 0usize..3, left in 0usize..3, right in 0usize..3,
        regret in any::<bool>(), spatial in any::<bool>(),
    ) {
        let net = DenoiserNet::build(tiny_config(), seed).unwrap();
        let mut rng = CounterRng::named(seed, "test/preserve", 0);
        let src = Tensor::uniform_from(&[2, 1, 5, 4], 0.0, 1.0, &mut rng).unwrap();
        let spec = OutpaintSpec::new((5, 4), Expansion { top, bottom, left, right }).unwrap();
        let adapters = init_adapters(&net, 2, 8.0, seed).unwrap();
        let cfg = SamplerConfig {
            steps: 6,
            guidance_window: 3,
            repeats: if regret { 4 } else { 0 },
            decay: if spatial { 3.0 } else { 0.0 },
            seed,
            ..SamplerConfig::default()
        };
        let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let out = outpaint(&src, &spec, &net, Some(&adapters), &cfg, &sched).unwrap();
        let padded = spec.pad(&src).unwrap();
        let known = spec.known_map();
        let hw = known.len();
        for (i, (a, b)) in out.video.data().iter().zip(padded.data()).enumerate() {
            if known[i % hw] {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn adaptation_leaves_the_base_untouched(seed in any::<u64>()) {
        let net = DenoiserNet::build(tiny_config(), seed).unwrap();
        let before = net.clone();
        let mut adapters = init_adapters(&net, 2, 8.0, seed).unwrap();
        let cfg = AdaptConfig { seed, ..AdaptConfig::default() };
        let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let mut rng = CounterRng::named(seed, "test/frozen", 0);
        let video = Tensor::uniform_from(&[3, 1, 6, 6], 0.0, 1.0, &mut rng).unwrap();
        let mut adam = AdamState::new(cfg.optimizer.clone(), &adapter_buffer_lengths(&adapters));
        for i in 0..2 {
            let draws = iteration_draws(&video, &cfg, &sched, seed, i).unwrap();
            adaptation_step(&net, &mut adapters, &mut adam, &draws, false, &sched).unwrap();
        }
        let max_change = net
            .params()
            .iter()
            .zip(before.params())
            .map(|(a, b)| a.max_abs_diff(b).unwrap())
            .fold(0.0, f64::max);
        prop_assert_eq!(max_change, 0.0);
        prop_assert!(!adapters.is_identity());
    }
}
