use fakemap::locator::{build_attention, miniature_config, LimitingPlacement, LocatorNetwork};
use fakemap::losses::{joint, LossConfig, MapLoss};
use fakemap::texturegen::Label;
use fakemap::BinaryMap;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss_of(net: &LocatorNetwork<f64>, x: &Array3<f64>, gt: &Array2<f64>, label: Label, cfg: &LossConfig, attn: Option<&fakemap::AttentionMap>) -> f64 {
    let t = net.forward_trace(x, attn).unwrap();
    joint(t.map().view(), gt.view(), t.score(), label, cfg).unwrap().value
}

fn check(limiting: LimitingPlacement, map_loss: MapLoss, with_attention: bool, seed: u64) {
    let mut arch = miniature_config();
    arch.limiting = limiting;
    let mut net = LocatorNetwork::<f64>::new(arch, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in net.params_mut() {
        p.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
    }
    let n = net.config().input_size;
    let x = Array3::from_shape_fn((3, n, n), |_| rng.gen_range(0.0..1.0));
    let gt = Array2::from_shape_fn((n, n), |_| rng.gen_range(0.0..1.0));
    let cfg = LossConfig { map_loss, ..LossConfig::default() };
    let mask = BinaryMap::from_fn(n, n, |y, x| y >= 2 && x < 5);
    let attn = with_attention.then(|| build_attention(&mask, 1));
    let label = if seed % 2 == 0 { Label::Fake } else { Label::Real };

    let t = net.forward_trace(&x, attn.as_ref()).unwrap();
    let j = joint(t.map().view(), gt.view(), t.score(), label, &cfg).unwrap();
    let mut grads = net.zeros_like();
    net.backward(&t, &j.dmap, j.dscore, &mut grads);
    let analytic: Vec<(String, Vec<f64>)> = grads.params().into_iter().map(|(n, p)| (n, p.to_vec())).collect();

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, (name, g)) in analytic.iter().enumerate() {
        for i in 0..g.len() {
            let orig = net.params_mut()[k][i];
            net.params_mut()[k][i] = orig + h;
            let lp = loss_of(&net, &x, &gt, label, &cfg, attn.as_ref());
            net.params_mut()[k][i] = orig - h;
            let lm = loss_of(&net, &x, &gt, label, &cfg, attn.as_ref());
            net.params_mut()[k][i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(g[i].abs()).max(1e-6);
            let rel = (fd - g[i]).abs() / denom;
            assert!(rel <= 1e-4, "{name}[{i}]: analytic {} vs numeric {fd} (rel {rel})", g[i]);
            worst = worst.max(rel);
        }
    }
    assert!(worst.is_finite());
}

#[test]
fn joint_l1_gradients_match_finite_differences() {
    for seed in 0..3 {
        check(LimitingPlacement::Encoder, MapLoss::L1, false, seed);
    }
}

#[test]
fn gradients_with_attention_and_other_losses() {
    check(LimitingPlacement::Encoder, MapLoss::L2, true, 4);
    check(LimitingPlacement::Decoder, MapLoss::Dice, true, 5);
    check(LimitingPlacement::Encoder, MapLoss::Focal, false, 6);
}
