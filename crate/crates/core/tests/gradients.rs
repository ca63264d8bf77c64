use motia_core::adapters::{init_adapters, AdapterSet, Insertion, Rect, SaConfig};
use motia_core::denoiser::{bind_adapters, noise_loss, ConditionInput, DenoiserConfig, DenoiserNet};
use motia_core::gradcheck::check_gradients;
use motia_core::rng::CounterRng;
use motia_core::tape::{Tape, Var};
use motia_core::{Result, Tensor};
use proptest::prelude::*;

const H: f64 = 1e-3;
/// Whole-network step: at 1e-3 the O(h^2) truncation term alone reaches ~1.3e-4.
const NET_H: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn randn(shape: &[usize], rng: &mut CounterRng) -> Tensor<f64> {
    Tensor::<f32>::randn_from(shape, rng).unwrap().cast()
}

/// Sum of the output weighted by fixed random coefficients, so no gradient
/// is trivially uniform.
fn probe(t: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = t.leaf(weights.clone().reshape(t.value(y).shape())?);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn assert_op(inputs: Vec<Tensor<f64>>, out_len: usize, seed: u64, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    let mut rng = CounterRng::named(seed, "test/probe", 0);
    let weights = randn(&[out_len], &mut rng);
    let r = check_gradients(&inputs, H, |t, v| {
        let y = f(t, v)?;
        probe(t, y, &weights)
    })
    .unwrap();
    assert!(r.max_rel_error < TOL, "{:?}", r);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_ops(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = CounterRng::named(seed, "test/grad", 0);
        let a = randn(&[n], &mut rng);
        let b = randn(&[n], &mut rng);
        assert_op(vec![a.clone(), b.clone()], n, seed, |t, v| t.add(v[0], v[1]));
        assert_op(vec![a.clone(), b.clone()], n, seed, |t, v| t.sub(v[0], v[1]));
        assert_op(vec![a.clone(), b], n, seed, |t, v| t.mul(v[0], v[1]));
        assert_op(vec![a.clone()], n, seed, |t, v| Ok(t.scale(v[0], -1.7)));
        assert_op(vec![a.clone()], n, seed, |t, v| Ok(t.silu(v[0])));
        assert_op(vec![a.clone()], 1, seed, |t, v| Ok(t.mean(v[0])));
        assert_op(vec![a], 1, seed, |t, v| Ok(t.sum(v[0])));
    }

    #[test]
    fn matrix_ops(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let mut rng = CounterRng::named(seed, "test/grad", 1);
        let a = randn(&[m, k], &mut rng);
        let b = randn(&[k, n], &mut rng);
        assert_op(vec![a.clone(), b], m * n, seed, |t, v| t.matmul(v[0], v[1]));
        assert_op(vec![a.clone()], m * k, seed, |t, v| t.transpose(v[0]));
        assert_op(vec![a], m * k, seed, |t, v| t.reshape(v[0], &[m * k]));
    }

    #[test]
    fn convolution_ops(seed in any::<u64>(), frames in 1usize..4, cin in 1usize..3, cout in 1usize..3, h in 1usize..5, w in 1usize..5) {
        let mut rng = CounterRng::named(seed, "test/grad", 2);
        let x = randn(&[frames, cin, h, w], &mut rng);
        let k = randn(&[cout, cin, 1, 3, 3], &mut rng);
        let b = randn(&[cout], &mut rng);
        let n = frames * cout * h * w;
        assert_op(vec![x.clone(), k, b], n, seed, |t, v| t.conv_p3d(v[0], v[1], Some(v[2])));
        let kt = randn(&[cout, cin, 3], &mut rng);
        let bt = randn(&[cout], &mut rng);
        assert_op(vec![x.clone(), kt, bt], n, seed, |t, v| t.temporal_conv(v[0], v[1], Some(v[2])));
        let bias = randn(&[cin], &mut rng);
        assert_op(vec![x.clone(), bias], frames * cin * h * w, seed, |t, v| t.channel_bias(v[0], v[1]));
        let map: Vec<f64> = (0..h * w).map(|i| 0.25 + (i % 3) as f64).collect();
        assert_op(vec![x.clone()], frames * cin * h * w, seed, move |t, v| t.spatial_scale(v[0], map.clone()));
        let y = randn(&[frames, cout, h, w], &mut rng);
        assert_op(vec![x, y], frames * (cin + cout) * h * w, seed, |t, v| t.concat_channels(&[v[0], v[1]]));
    }

    #[test]
    fn group_norm(seed in any::<u64>(), frames in 1usize..3, groups in 1usize..3, per in 1usize..3, hw in 2usize..4) {
        let c = groups * per;
        let mut rng = CounterRng::named(seed, "test/grad", 3);
        let x = randn(&[frames, c, hw, hw], &mut rng);
        let g = randn(&[c], &mut rng);
        let s = randn(&[c], &mut rng);
        assert_op(vec![x, g, s], frames * c * hw * hw, seed, |t, v| t.group_norm_3d(v[0], v[1], v[2], groups, 1e-5));
    }
}

fn small_config() -> DenoiserConfig {
    DenoiserConfig {
        width: 4,
        blocks: 1,
        embed_dim: 4,
        channels: 1,
        groups: 2,
    }
}

/// Noise-prediction loss of a small net, checked over base and adapter parameters.
fn denoiser_check(seed: u64, insertion: Insertion) -> f64 {
    let net = DenoiserNet::build(small_config(), seed).unwrap();
    let mut set = init_adapters(&net, 2, 8.0, seed).unwrap();
    let mut rng = CounterRng::named(seed, "test/denoiser-grad", 0);
    for (_, a) in set.iter_mut() {
        rng.fill_normal(a.up.data_mut());
    }
    let shape = [2, 1, 4, 4];
    let video = Tensor::<f32>::uniform_from(&shape, 0.0, 1.0, &mut rng).unwrap().cast::<f64>();
    let known: Vec<bool> = (0..16).map(|i| i % 4 < 2).collect();
    let cond = ConditionInput::from_video(&video, &known).unwrap();
    let noisy = randn(&shape, &mut rng);
    let target = randn(&shape, &mut rng);
    let net64: DenoiserNet<f64> = net.cast();
    let set64: AdapterSet<f64> = set.cast();

    let names: Vec<String> = set64.iter().map(|(n, _)| n.clone()).collect();
    let mut inputs: Vec<Tensor<f64>> = net64.params().to_vec();
    for n in &names {
        let a = set64.get(n).unwrap();
        inputs.push(a.down.clone());
        inputs.push(a.up.clone());
    }
    let base_len = net64.params().len();
    let r = check_gradients(&inputs, NET_H, |tape, vars| {
        let mut bound = bind_adapters(tape, &set64, false);
        for (i, n) in names.iter().enumerate() {
            let e = bound.get_mut(n).unwrap();
            e.0 = vars[base_len + 2 * i];
            e.1 = vars[base_len + 2 * i + 1];
        }
        let pred = net64.forward(tape, &vars[..base_len], Some(&bound), &insertion, &noisy, &cond, 417)?;
        noise_loss(tape, pred, &target, None)
    })
    .unwrap();
    r.max_rel_error
}

#[test]
fn denoiser_gradients_full_insertion() {
    for seed in 0..20 {
        let e = denoiser_check(seed, Insertion::Full);
        assert!(e < TOL, "seed {seed}: {e}");
    }
}

#[test]
fn denoiser_gradients_spatial_insertion() {
    let sa = SaConfig::new(3.0, Rect::new(0, 4, 0, 2).unwrap(), (4, 4)).unwrap();
    for seed in 0..5 {
        let e = denoiser_check(seed, Insertion::SpatialAware(sa.clone()));
        assert!(e < TOL, "seed {seed}: {e}");
    }
}
