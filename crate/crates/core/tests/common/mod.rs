#![allow(dead_code)]

use hybridssl::gridsim::{build_wscc_scenarios, generate_dataset, Dataset, Manifest, SimConfig};
use hybridssl::neural::{Network, OutputHead, ParamGrads};
use hybridssl::{Matrix, Rng};

/// Small simulated dataset (`per_class` samples per outage class).
pub fn small_dataset(per_class: usize, label_fraction: f64, seed: u64) -> Dataset {
    let cfg = SimConfig {
        samples_per_class: per_class,
        label_fraction,
        seed,
        ..SimConfig::default()
    };
    let case = build_wscc_scenarios(&cfg).unwrap();
    generate_dataset(&case, &cfg).unwrap()
}

/// Two Gaussian blobs separated along a random direction, fully labeled,
/// with a stratified 20% validation split.
pub fn toy_blobs(n_per_class: usize, dim: usize, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed);
    let dir: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n = 2 * n_per_class;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let sign = if class == 0 { -1.0 } else { 1.0 };
        let row: Vec<f64> = dir.iter().map(|d| 3.0 * sign * d / norm + rng.gaussian() * 0.5).collect();
        rows.push(row);
        labels.push(class as i64);
    }
    let val_indices: Vec<usize> = (0..n).filter(|i| i % 5 == 0).collect();
    let labeled_indices: Vec<usize> = (0..n).filter(|i| i % 5 != 0).collect();
    let manifest = Manifest {
        class_count: 2,
        n_samples: n,
        n_labeled: labeled_indices.len(),
        labeled_indices,
        val_indices,
        labels,
        feature_dim: dim,
        ..Manifest::default()
    };
    Dataset {
        features: Matrix::from_rows(&rows).unwrap(),
        theta0: Matrix::zeros(n, 0),
        manifest,
    }
}

/// A network with random nonzero biases. Zero biases put rows whose
/// hidden inputs are all dropped exactly on the ReLU kink, where finite
/// differences are meaningless.
pub fn oracle_net(widths: &[usize], head: OutputHead, rng: &mut Rng) -> Network {
    let mut net = Network::new(widths, head, rng).unwrap();
    for layer in net.layers_mut() {
        let n = layer.bias.cols();
        layer.bias = rng.uniform_matrix(1, n, -0.3, 0.3);
    }
    net
}

/// All parameters of `net`, layer by layer (weights then bias).
pub fn flat_params(net: &Network) -> Vec<f64> {
    net.params().flat_map(|m| m.as_slice().to_vec()).collect()
}

pub fn flat_grads(g: &ParamGrads) -> Vec<f64> {
    g.layers
        .iter()
        .flat_map(|l| l.weights.as_slice().iter().chain(l.bias.as_slice()).copied().collect::<Vec<_>>())
        .collect()
}

/// `net` with the parameter at flat index `k` shifted by `delta`.
pub fn nudged(net: &Network, k: usize, delta: f64) -> Network {
    let mut out = net.clone();
    let mut k = k;
    let mut hit = false;
    'outer: for layer in out.layers_mut() {
        for m in [&mut layer.weights, &mut layer.bias] {
            if k < m.len() {
                m.as_mut_slice()[k] += delta;
                hit = true;
                break 'outer;
            }
            k -= m.len();
        }
    }
    assert!(hit, "parameter index out of range");
    out
}

pub const FD_EPS: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-5;
pub const ABS_FLOOR: f64 = 1e-7;

/// Central differences of `loss` over every parameter of `net`, compared to
/// `analytic`. Returns the worst violation ratio (<= 1 passes).
pub fn check_net_grad(net: &Network, analytic: &[f64], loss: impl Fn(&Network) -> f64) -> f64 {
    assert_eq!(analytic.len(), net.param_count());
    let mut worst: f64 = 0.0;
    for (k, &a) in analytic.iter().enumerate() {
        let up = loss(&nudged(net, k, FD_EPS));
        let down = loss(&nudged(net, k, -FD_EPS));
        let numeric = (up - down) / (2.0 * FD_EPS);
        let tol = (REL_TOL * a.abs().max(numeric.abs())).max(ABS_FLOOR);
        worst = worst.max((a - numeric).abs() / tol);
    }
    worst
}

/// A smooth synthetic `n_gen x window` frequency trace, channel-major.
pub fn synthetic_omega_row(rng: &mut Rng, n_gen: usize, window: usize, dt: f64) -> Vec<f64> {
    let mut row = Vec::with_capacity(n_gen * window);
    for _ in 0..n_gen {
        let amp = rng.uniform_range(0.05, 0.5);
        let freq = rng.uniform_range(0.5, 2.0);
        let phase = rng.uniform_range(0.0, 6.28);
        let decay = rng.uniform_range(0.1, 1.0);
        for t in 0..window {
            let s = t as f64 * dt;
            row.push(amp * (-decay * s).exp() * (2.0 * std::f64::consts::PI * freq * s + phase).sin());
        }
    }
    row
}
