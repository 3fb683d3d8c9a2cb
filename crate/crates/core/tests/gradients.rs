//! Analytic gradients against central finite differences.

use bayescns::prior_net::{
    backprop, gp_nll_grad_with_exposure, gp_nll_with_exposure, mean_nll, Architecture,
    PriorNetwork, PriorOutput, TrainingExample,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn output(log_alpha: f64, zeta: f64) -> PriorOutput {
    PriorOutput {
        log_alpha: vec![log_alpha],
        zeta: vec![zeta],
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let la = rng.random_range(-4.0..4.0);
        let zeta = rng.random_range(-6.0..6.0);
        let x = rng.random_range(0..200u64);
        let exposure = if rng.random::<bool>() { 1.0 } else { rng.random_range(0.5..500.0) };
        let g = gp_nll_grad_with_exposure(&output(la, zeta), &[x], exposure).unwrap();
        let f = |la: f64, z: f64| gp_nll_with_exposure(&output(la, z), &[x], exposure).unwrap();
        let fd_la = (f(la + H, zeta) - f(la - H, zeta)) / (2.0 * H);
        let fd_z = (f(la, zeta + H) - f(la, zeta - H)) / (2.0 * H);
        worst = worst.max(rel_err(g.log_alpha[0], fd_la)).max(rel_err(g.zeta[0], fd_z));
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn multi_feature_gradient_is_per_feature() {
    let out = PriorOutput {
        log_alpha: vec![0.3, -1.0, 2.0],
        zeta: vec![0.5, 1.5, -2.0],
    };
    let x = [4, 0, 17];
    let g = gp_nll_grad_with_exposure(&out, &x, 1.0).unwrap();
    for i in 0..3 {
        let single = gp_nll_grad_with_exposure(&output(out.log_alpha[i], out.zeta[i]), &x[i..=i], 1.0).unwrap();
        assert_eq!(g.log_alpha[i], single.log_alpha[0]);
        assert_eq!(g.zeta[i], single.zeta[0]);
    }
}

fn random_network(seed: u64, blocks: usize, features: usize) -> (PriorNetwork, Vec<TrainingExample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Architecture {
        input_dim: 3,
        num_features: features,
        hidden_width: 6,
        num_residual_blocks: blocks,
    };
    let mut net = PriorNetwork::new(arch, &mut rng).unwrap();
    for p in net.params_mut() {
        *p += rng.random_range(-0.3..0.3);
    }
    let data = (0..8)
        .map(|_| {
            let z = (0..3).map(|_| rng.random::<f64>()).collect();
            let x = (0..features).map(|_| rng.random_range(0..30)).collect();
            TrainingExample::with_exposure(z, x, rng.random_range(1.0..50.0))
        })
        .collect();
    (net, data)
}

#[test]
fn backprop_matches_finite_differences() {
    let mut probes = 0;
    let mut worst: f64 = 0.0;
    for (seed, blocks, features) in [(1, 0, 1), (2, 1, 1), (3, 2, 2), (4, 2, 1)] {
        let (net, data) = random_network(seed, blocks, features);
        let (grad, _) = backprop(&net, &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let n = net.params().len();
        for _ in 0..40 {
            let i = rng.random_range(0..n);
            let mut plus = net.clone();
            plus.params_mut()[i] += H;
            let mut minus = net.clone();
            minus.params_mut()[i] -= H;
            let fd = (mean_nll(&plus, &data).unwrap() - mean_nll(&minus, &data).unwrap()) / (2.0 * H);
            worst = worst.max(rel_err(grad[i], fd));
            probes += 1;
        }
    }
    assert!(probes >= 100);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}
