use cryoplan::qnet::Mlp;
use cryoplan::rng;
use rand::Rng;

fn loss(net: &Mlp<f64>, x: &[f64], n: usize, y: &[f64]) -> f64 {
    net.mse_loss(x, n, y).unwrap().0
}

/// Central differences on every parameter of a small net, relative error with
/// a floor of 1e-6 on the denominator.
fn max_rel_error(sizes: &[usize], seed: u64, n: usize) -> f64 {
    let mut r = rng::seeded(seed, &[1]);
    let mut net = Mlp::<f64>::new(sizes, seed).unwrap();
    // Nonzero biases so that no unit sits exactly on the ReLU kink.
    for l in net.layers_mut() {
        for b in l.b.iter_mut() {
            *b = r.random_range(-0.1..0.1);
        }
    }
    let x: Vec<f64> = (0..n * sizes[0]).map(|_| r.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let (_, dout, cache) = net.mse_loss(&x, n, &y).unwrap();
    let grads = net.backward(&cache, &dout).unwrap();
    let analytic: Vec<f64> = grads.params().flat_map(|p| p.to_vec()).collect();

    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut k = 0;
    let n_slices = net.params().count();
    for s in 0..n_slices {
        let len = net.params().nth(s).unwrap().len();
        for i in 0..len {
            let orig = net.params().nth(s).unwrap()[i];
            net.params_mut().nth(s).unwrap()[i] = orig + h;
            let up = loss(&net, &x, n, &y);
            net.params_mut().nth(s).unwrap()[i] = orig - h;
            let down = loss(&net, &x, n, &y);
            net.params_mut().nth(s).unwrap()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let g = analytic[k];
            worst = worst.max((g - fd).abs() / (g.abs() + fd.abs()).max(1e-6));
            k += 1;
        }
    }
    worst
}

#[test]
fn backprop_matches_finite_differences() {
    let mut r = rng::seeded(2024, &[]);
    for trial in 0..50u64 {
        let d = r.random_range(2..10);
        let sizes = [d, r.random_range(3..12), r.random_range(3..12), 1];
        let n = r.random_range(1..6);
        let e = max_rel_error(&sizes, trial, n);
        assert!(e < 1e-4, "net {trial} {sizes:?}: relative error {e}");
    }
}

#[test]
fn f32_backprop_agrees_with_f64() {
    let net64 = Mlp::<f64>::q_network(32, 5).unwrap();
    let net32: Mlp<f32> = net64.cast();
    let mut r = rng::seeded(6, &[]);
    let n = 8;
    let x: Vec<f64> = (0..n * 32).map(|_| r.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let (_, d64, c64) = net64.mse_loss(&x, n, &y).unwrap();
    let g64 = net64.backward(&c64, &d64).unwrap();
    let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    let y32: Vec<f32> = y.iter().map(|&v| v as f32).collect();
    let (_, d32, c32) = net32.mse_loss(&x32, n, &y32).unwrap();
    let g32 = net32.backward(&c32, &d32).unwrap();
    for (a, b) in g64.params().zip(g32.params()) {
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-3);
        for (u, v) in a.iter().zip(b) {
            assert!((u - f64::from(*v)).abs() / scale < 1e-3);
        }
    }
}
