//! Oracles and checks shared by the integration tests and the acceptance binary.
#![allow(dead_code)]

use jcnf::data::{generate_scene, sample_patches, SceneRecord};
use jcnf::energy::{loss_global_depth, loss_pairwise, Freeze};
use jcnf::image::{Domain, GradientField, Image};
use jcnf::networks::{
    scale_activation, scale_activation_grad, Architecture, GlobalDepthNet, GradientNets, Init, Peers, ScaleNets, ScaleRole,
};
use jcnf::tensor::{
    concat_channels, concat_channels_backward, conv2d, conv2d_backward, fully_connected, fully_connected_backward,
    maxpool, maxpool_backward, relu, relu_backward, LayerParams, NetworkParams, Padding, Tensor,
};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------------------------
// finite differences

/// Relative error with a floor on the denominator, so gradients that are both close to zero
/// are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CheckStats {
    pub trials: usize,
    pub checks: usize,
    pub max_rel: f64,
    /// Draws rejected because a kink lay inside the difference stencil.
    pub skipped: usize,
}

impl CheckStats {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.checks += 1;
        let e = rel_err(analytic, numeric);
        self.max_rel = if e.is_nan() { f64::INFINITY } else { self.max_rel.max(e) };
    }
}

fn rand_tensor(h: usize, w: usize, c: usize, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(h, w, c, |_, _, _| r.random_range(-1.0..1.0))
}

/// Random values kept at least `gap` away from zero (ReLU kink).
fn away_from_zero(h: usize, w: usize, c: usize, gap: f64, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(h, w, c, |_, _, _| {
        let v: f64 = r.random_range(gap..1.0);
        if r.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn weighted(t: &Tensor, w: &Tensor) -> f64 {
    t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn with_value(t: &Tensor, i: usize, v: f64) -> Tensor {
    let mut t = t.clone();
    t.data_mut()[i] = v;
    t
}

fn rand_layer(o: usize, i: usize, kh: usize, kw: usize, r: &mut ChaCha8Rng) -> LayerParams {
    let mut p = LayerParams::zeros(o, i, kh, kw);
    p.values_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    p
}

const H: f64 = 1e-6;

pub fn check_conv(trials: usize, seed: u64) -> CheckStats {
    let mut s = CheckStats::default();
    let mut r = rng(seed);
    for t in 0..trials {
        let (h, w, cin, cout) = (r.random_range(3..8), r.random_range(3..8), r.random_range(1..4), r.random_range(1..4));
        let k = [1, 3, 5][t % 3];
        let stride = 1 + t % 2;
        let padding = if t % 4 == 3 && k <= h.min(w) { Padding::Valid } else { Padding::Same };
        let x = rand_tensor(h, w, cin, &mut r);
        let p = rand_layer(cout, cin, k, k, &mut r);
        let y = conv2d(&x, &p, stride, padding).unwrap();
        let wt = rand_tensor(y.height(), y.width(), y.channels(), &mut r);
        let (dx, dp) = conv2d_backward(&x, &p, stride, padding, &wt).unwrap();
        for _ in 0..4 {
            let i = r.random_range(0..x.len());
            let fd = central_diff(|v| weighted(&conv2d(&with_value(&x, i, v), &p, stride, padding).unwrap(), &wt), x.data()[i], H);
            s.record(dx.data()[i], fd);
            let j = r.random_range(0..p.kernels.len());
            let fd = central_diff(
                |v| {
                    let mut q = p.clone();
                    q.kernels[j] = v;
                    weighted(&conv2d(&x, &q, stride, padding).unwrap(), &wt)
                },
                p.kernels[j],
                H,
            );
            s.record(dp.kernels[j], fd);
        }
        let b = r.random_range(0..cout);
        let fd = central_diff(
            |v| {
                let mut q = p.clone();
                q.biases[b] = v;
                weighted(&conv2d(&x, &q, stride, padding).unwrap(), &wt)
            },
            p.biases[b],
            H,
        );
        s.record(dp.biases[b], fd);
        s.trials += 1;
    }
    s
}

pub fn check_fc(trials: usize, seed: u64) -> CheckStats {
    let mut s = CheckStats::default();
    let mut r = rng(seed);
    for _ in 0..trials {
        let (h, w, c, o) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..4), r.random_range(1..6));
        let x = rand_tensor(h, w, c, &mut r);
        let p = rand_layer(o, x.len(), 1, 1, &mut r);
        let wt = rand_tensor(1, 1, o, &mut r);
        let (dx, dp) = fully_connected_backward(&x, &p, &wt).unwrap();
        for _ in 0..4 {
            let i = r.random_range(0..x.len());
            let fd = central_diff(|v| weighted(&fully_connected(&with_value(&x, i, v), &p).unwrap(), &wt), x.data()[i], H);
            s.record(dx.data()[i], fd);
            let j = r.random_range(0..p.kernels.len());
            let fd = central_diff(
                |v| {
                    let mut q = p.clone();
                    q.kernels[j] = v;
                    weighted(&fully_connected(&x, &q).unwrap(), &wt)
                },
                p.kernels[j],
                H,
            );
            s.record(dp.kernels[j], fd);
        }
        let b = r.random_range(0..o);
        let fd = central_diff(
            |v| {
                let mut q = p.clone();
                q.biases[b] = v;
                weighted(&fully_connected(&x, &q).unwrap(), &wt)
            },
            p.biases[b],
            H,
        );
        s.record(dp.biases[b], fd);
        s.trials += 1;
    }
    s
}

pub fn check_relu(trials: usize, seed: u64) -> CheckStats {
    let mut s = CheckStats::default();
    let mut r = rng(seed);
    for _ in 0..trials {
        let x = away_from_zero(r.random_range(1..6), r.random_range(1..6), r.random_range(1..4), 1e-3, &mut r);
        let wt = rand_tensor(x.height(), x.width(), x.channels(), &mut r);
        let dx = relu_backward(&x, &wt).unwrap();
        for i in 0..x.len() {
            let fd = central_diff(|v| weighted(&relu(&with_value(&x, i, v)), &wt), x.data()[i], H);
            s.record(dx.data()[i], fd);
        }
        s.trials += 1;
    }
    s
}

pub fn check_maxpool(trials: usize, seed: u64) -> CheckStats {
    let mut s = CheckStats::default();
    let mut r = rng(seed);
    for t in 0..trials {
        let (h, w, c) = (r.random_range(4..9), r.random_range(4..9), r.random_range(1..3));
        // distinct values, at least 1e-3 apart, so no perturbation changes an argmax
        let mut vals: Vec<f64> = (0..h * w * c).map(|k| k as f64 * 1e-3).collect();
        for i in (1..vals.len()).rev() {
            let j = r.random_range(0..=i);
            vals.swap(i, j);
        }
        let x = Tensor::new(h, w, c, vals).unwrap();
        let (window, stride) = if t % 2 == 0 { (2, 2) } else { (3, 2) };
        let y = maxpool(&x, window, stride).unwrap();
        let wt = rand_tensor(y.height(), y.width(), y.channels(), &mut r);
        let dx = maxpool_backward(&x, window, stride, &wt).unwrap();
        for i in 0..x.len() {
            let fd = central_diff(|v| weighted(&maxpool(&with_value(&x, i, v), window, stride).unwrap(), &wt), x.data()[i], 1e-7);
            s.record(dx.data()[i], fd);
        }
        s.trials += 1;
    }
    s
}

pub fn check_concat(trials: usize, seed: u64) -> CheckStats {
    let mut s = CheckStats::default();
    let mut r = rng(seed);
    for _ in 0..trials {
        let (h, w) = (r.random_range(1..5), r.random_range(1..5));
        let a = rand_tensor(h, w, r.random_range(1..4), &mut r);
        let b = rand_tensor(h, w, r.random_range(1..4), &mut r);
        let y = concat_channels(&a, &b).unwrap();
        let wt = rand_tensor(h, w, y.channels(), &mut r);
        let (da, db) = concat_channels_backward(&wt, a.channels()).unwrap();
        for i in 0..a.len() {
            let fd = central_diff(|v| weighted(&concat_channels(&with_value(&a, i, v), &b).unwrap(), &wt), a.data()[i], H);
            s.record(da.data()[i], fd);
        }
        for i in 0..b.len() {
            let fd = central_diff(|v| weighted(&concat_channels(&a, &with_value(&b, i, v)).unwrap(), &wt), b.data()[i], H);
            s.record(db.data()[i], fd);
        }
        s.trials += 1;
    }
    s
}

pub fn check_scale_activation(trials: usize, seed: u64) -> CheckStats {
    let mut s = CheckStats::default();
    let mut r = rng(seed);
    for _ in 0..trials {
        for _ in 0..10 {
            let x: f64 = r.random_range(-10.0..10.0);
            let fd = central_diff(scale_activation, x, 1e-5);
            s.record(scale_activation_grad(scale_activation(x)), fd);
        }
        s.trials += 1;
    }
    s
}

/// Every differentiable layer, `trials` randomized trials each.
pub fn layer_checks(trials: usize) -> Vec<(&'static str, CheckStats)> {
    vec![
        ("conv", check_conv(trials, 1)),
        ("fully_connected", check_fc(trials, 2)),
        ("relu", check_relu(trials, 3)),
        ("maxpool", check_maxpool(trials, 4)),
        ("concat", check_concat(trials, 5)),
        ("scale_activation", check_scale_activation(trials, 6)),
    ]
}

pub fn tiny_arch() -> Architecture {
    Architecture {
        global_input: 32,
        global_widths: [3, 4, 4, 4, 3],
        global_fc: 6,
        grad_widths: [3, 3, 3, 3],
        grad_kernel: 3,
        scale_widths: [3, 3],
    }
}

fn perturbed(params: &NetworkParams, layer: usize, kernel: Option<usize>, bias: Option<usize>, v: f64) -> NetworkParams {
    let mut p = params.clone();
    let l = &mut p.layers[layer].1;
    if let Some(k) = kernel {
        l.kernels[k] = v;
    }
    if let Some(b) = bias {
        l.biases[b] = v;
    }
    p
}

/// Picks one kernel weight or bias of a random layer among `layers`.
fn pick(params: &NetworkParams, layers: &[usize], r: &mut ChaCha8Rng) -> (usize, Option<usize>, Option<usize>, f64) {
    let layer = layers[r.random_range(0..layers.len())];
    let l = &params.layers[layer].1;
    if r.random_bool(0.8) {
        let k = r.random_range(0..l.kernels.len());
        (layer, Some(k), None, l.kernels[k])
    } else {
        let b = r.random_range(0..l.biases.len());
        (layer, None, Some(b), l.biases[b])
    }
}

fn grad_at(tapes: &[jcnf::tensor::GradTape], layer: usize, k: Option<usize>, b: Option<usize>) -> f64 {
    match (k, b) {
        (Some(k), _) => tapes[layer].kernels[k],
        (_, Some(b)) => tapes[layer].biases[b],
        _ => unreachable!(),
    }
}

/// Five-point central difference.
pub fn five_point(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x - 2.0 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h)
}

/// Derivative of a piecewise-smooth function, or `None` when the stencils at `h` and `h / 2`
/// disagree, which means a kink lies within reach of `x`.
pub fn smooth_derivative(f: impl Fn(f64) -> f64, x: f64) -> Option<f64> {
    let h = 1e-4;
    let coarse = five_point(&f, x, h);
    let fine = five_point(&f, x, h / 2.0);
    (rel_err(coarse, fine) < 1e-7).then_some(fine)
}

/// Draws parameters of `layers` until one has a smooth neighbourhood, then records the
/// analytic gradient against the numeric one.
fn check_param(
    s: &mut CheckStats,
    params: &NetworkParams,
    layers: &[usize],
    grads: &[jcnf::tensor::GradTape],
    r: &mut ChaCha8Rng,
    loss: impl Fn(NetworkParams) -> f64,
) {
    for _ in 0..50 {
        let (layer, k, b, x) = pick(params, layers, r);
        if let Some(fd) = smooth_derivative(|v| loss(perturbed(params, layer, k, b, v)), x) {
            s.record(grad_at(grads, layer, k, b), fd);
            return;
        }
        s.skipped += 1;
    }
    panic!("no smooth parameter found");
}

pub fn check_global_loss(trials: usize, seed: u64) -> CheckStats {
    let mut s = CheckStats::default();
    let arch = tiny_arch();
    let mut r = rng(seed);
    for t in 0..trials {
        let mut net = GlobalDepthNet::new(&arch, Init::Gaussian { std: 0.3 }, &mut r).unwrap();
        randomize_biases(&mut net.params, &mut r);
        let batch: Vec<SceneRecord> = (0..2).map(|k| generate_scene(seed * 1000 + (2 * t + k) as u64, 32, 32).unwrap()).collect();
        let (_, grads) = loss_global_depth(&batch, &net).unwrap();
        let layers: Vec<usize> = (0..net.params.layers.len()).collect();
        for _ in 0..4 {
            check_param(&mut s, &net.params, &layers, &grads, &mut r, |p| {
                loss_global_depth(&batch, &GlobalDepthNet::from_params(&arch, p).unwrap()).unwrap().0
            });
        }
        s.trials += 1;
    }
    s
}

/// Gives every bias a random value so no pre-activation sits exactly on a ReLU kink.
fn randomize_biases(params: &mut NetworkParams, r: &mut ChaCha8Rng) {
    for (_, l) in params.layers.iter_mut() {
        l.biases.iter_mut().for_each(|b| *b = r.random_range(-0.1..0.1));
    }
}

fn layer_indices(params: &NetworkParams, pred: impl Fn(&str) -> bool) -> Vec<usize> {
    params.layers.iter().enumerate().filter(|(_, (n, _))| pred(n)).map(|(i, _)| i).collect()
}

/// Pairwise loss gradients of the gradient nets (scale nets frozen) and of the scale nets
/// (gradient nets frozen). With live peers the peer activations are detached, so only head
/// layers, which do not feed the peer, are checked there.
pub fn check_pairwise_loss(trials: usize, seed: u64) -> CheckStats {
    let mut s = CheckStats::default();
    let arch = tiny_arch();
    let mut r = rng(seed);
    for t in 0..trials {
        let mut nets = GradientNets::new(&arch, Init::Gaussian { std: 0.2 }, &mut r).unwrap();
        randomize_biases(&mut nets.depth, &mut r);
        randomize_biases(&mut nets.intrinsic, &mut r);
        let mut scales = ScaleNets::new(&arch, Init::Gaussian { std: 0.2 }, &mut r).unwrap();
        scales.release_bypass();
        for role in ScaleRole::ALL {
            randomize_biases(&mut scales.get_mut(role).params, &mut r);
        }
        let record = generate_scene(seed * 1000 + t as u64, 40, 40).unwrap();
        let batch = sample_patches(&record, 2, t as u64).unwrap();
        let peers = if t % 2 == 0 { Peers::Zero } else { Peers::Live };
        let selected = |p: &NetworkParams| match peers {
            Peers::Zero => layer_indices(p, |_| true),
            Peers::Live => layer_indices(p, |n| n != "conv1" && n != "conv2"),
        };
        let loss = |n: &GradientNets| loss_pairwise(&batch, n, &scales, peers, Freeze::SCALE_NETS).unwrap().0.total();

        let (_, g) = loss_pairwise(&batch, &nets, &scales, peers, Freeze::SCALE_NETS).unwrap();
        check_param(&mut s, &nets.depth, &selected(&nets.depth), &g.depth_net, &mut r, |p| {
            let mut n = nets.clone();
            n.depth = p;
            loss(&n)
        });
        check_param(&mut s, &nets.intrinsic, &selected(&nets.intrinsic), &g.intrinsic_net, &mut r, |p| {
            let mut n = nets.clone();
            n.intrinsic = p;
            loss(&n)
        });

        let (_, g) = loss_pairwise(&batch, &nets, &scales, peers, Freeze::GRADIENT_NETS).unwrap();
        let role = ScaleRole::ALL[t % 3];
        let params = &scales.get(role).params;
        let layers: Vec<usize> = (0..params.layers.len()).collect();
        check_param(&mut s, params, &layers, &g.scale_nets[t % 3], &mut r, |p| {
            let mut sc = scales.clone();
            sc.get_mut(role).params = p;
            loss_pairwise(&batch, &nets, &sc, peers, Freeze::GRADIENT_NETS).unwrap().0.total()
        });
        s.trials += 1;
    }
    s
}

pub fn loss_checks(trials: usize) -> Vec<(&'static str, CheckStats)> {
    vec![
        ("global_depth_loss", check_global_loss(trials, 7)),
        ("pairwise_loss", check_pairwise_loss(trials, 8)),
    ]
}

// ---------------------------------------------------------------------------------------------
// dense solver oracles

pub fn rand_image(h: usize, w: usize, c: usize, r: &mut ChaCha8Rng) -> Image {
    Image::from_fn(h, w, c, Domain::Log, |_, _, _| r.random_range(-2.0..2.0))
}

pub fn rand_field(h: usize, w: usize, c: usize, r: &mut ChaCha8Rng) -> GradientField {
    GradientField::new(rand_tensor(h, w, c, r), rand_tensor(h, w, c, r)).unwrap()
}

/// Forward-difference edges `(p, q)` with `q` the right or lower neighbour, tagged with the
/// gradient component (`false` = x, `true` = y) and the pixel index of the difference.
fn edges(h: usize, w: usize) -> Vec<(usize, usize, bool)> {
    let mut e = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                e.push((p, p + 1, false));
            }
            if y + 1 < h {
                e.push((p, p + w, true));
            }
        }
    }
    e
}

/// Minimum-norm least-squares solution of `J x ≈ r`, via the eigen-decomposition of `JᵀJ`.
fn least_squares(rows: &[(Vec<(usize, f64)>, f64)], n: usize) -> Vec<f64> {
    let mut jtj = DMatrix::<f64>::zeros(n, n);
    let mut jtr = DVector::<f64>::zeros(n);
    for (row, rhs) in rows {
        for &(i, a) in row {
            jtr[i] += a * rhs;
            for &(j, b) in row {
                jtj[(i, j)] += a * b;
            }
        }
    }
    let eig = SymmetricEigen::new(jtj);
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut x = DVector::<f64>::zeros(n);
    for k in 0..n {
        let lambda = eig.eigenvalues[k];
        if lambda.abs() > 1e-10 * top {
            let v = eig.eigenvectors.column(k);
            x += v * (v.dot(&jtr) / lambda);
        }
    }
    x.iter().copied().collect()
}

/// Minimizer of `Σ(D − D*)² [+ Σ(D − D_prev)²] + λ Σ‖∇D − g‖²` from its residual rows.
pub fn dense_depth(d_star: &Image, prev: Option<&Image>, g: &GradientField, lambda: f64) -> Vec<f64> {
    let (h, w) = (d_star.height(), d_star.width());
    let mut rows = Vec::new();
    for p in 0..h * w {
        rows.push((vec![(p, 1.0)], d_star.data()[p]));
        if let Some(prev) = prev {
            rows.push((vec![(p, 1.0)], prev.data()[p]));
        }
    }
    let sl = lambda.sqrt();
    for (p, q, vertical) in edges(h, w) {
        let t = if vertical { g.gy.data()[p] } else { g.gx.data()[p] };
        rows.push((vec![(q, sl), (p, -sl)], sl * t));
    }
    least_squares(&rows, h * w)
}

/// Minimizer of `Σ(L(I − A − S))² [+ Σ(A − A_prev)² + Σ(S − S_prev)²] + λ_A Σ‖∇A − g_A‖²
/// + λ_S Σ‖∇S − g_S‖²` for one channel; minimum norm (hence `ΣA = ΣS`) when it is not unique.
#[allow(clippy::too_many_arguments)]
pub fn dense_intrinsic_channel(
    image: &Image,
    lum: &Image,
    ga: &GradientField,
    gs: &GradientField,
    prev: Option<(&Image, &Image)>,
    lambda_a: f64,
    lambda_s: f64,
    c: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (image.height(), image.width());
    let n = h * w;
    let ch = image.channels();
    let mut rows = Vec::new();
    for p in 0..n {
        let l = lum.data()[p];
        rows.push((vec![(p, l), (n + p, l)], l * image.data()[p * ch + c]));
        if let Some((a, s)) = prev {
            rows.push((vec![(p, 1.0)], a.data()[p * ch + c]));
            rows.push((vec![(n + p, 1.0)], s.data()[p * ch + c]));
        }
    }
    for (offset, g, lambda) in [(0, ga, lambda_a), (n, gs, lambda_s)] {
        let sl = lambda.sqrt();
        for (p, q, vertical) in edges(h, w) {
            let t = if vertical { g.gy.data()[p * ch + c] } else { g.gx.data()[p * ch + c] };
            rows.push((vec![(offset + q, sl), (offset + p, -sl)], sl * t));
        }
    }
    let x = least_squares(&rows, 2 * n);
    (x[..n].to_vec(), x[n..].to_vec())
}

// ---------------------------------------------------------------------------------------------
// metric oracles

pub struct DepthOracle {
    pub rel: f64,
    pub log10: f64,
    pub rms: f64,
    pub rms_log: f64,
    pub acc: [f64; 3],
}

pub fn depth_oracle(pred: &[f64], gt: &[f64]) -> DepthOracle {
    let n = pred.len() as f64;
    let pairs = || pred.iter().zip(gt);
    let rel = pairs().map(|(p, g)| ((p - g) / g).abs()).sum::<f64>() / n;
    let log10 = pairs().map(|(p, g)| (p / g).ln().abs() / std::f64::consts::LN_10).sum::<f64>() / n;
    let rms = (pairs().map(|(p, g)| (p - g).powi(2)).sum::<f64>() / n).sqrt();
    let rms_log = (pairs().map(|(p, g)| (p / g).ln().powi(2)).sum::<f64>() / n).sqrt();
    let acc = [1, 2, 3].map(|k| pairs().filter(|(p, g)| (*p / *g).ln().abs() < k as f64 * 1.25f64.ln()).count() as f64 / n);
    DepthOracle { rel, log10, rms, rms_log, acc }
}

fn fitted_mse(p: &[f64], g: &[f64]) -> f64 {
    let pv = DVector::from_column_slice(p);
    let gv = DVector::from_column_slice(g);
    let denom = pv.norm_squared();
    let alpha = if denom > 0.0 { pv.dot(&gv) / denom } else { 0.0 };
    (pv * alpha - gv).norm_squared() / p.len() as f64
}

pub fn mse_oracle(pred: &Image, gt: &Image) -> f64 {
    fitted_mse(pred.data(), gt.data())
}

pub fn lmse_oracle(pred: &Image, gt: &Image) -> f64 {
    let (h, w, c) = (gt.height(), gt.width(), gt.channels());
    let k = ((h.max(w) as f64 / 10.0).round() as usize).max(8).min(h.min(w));
    let step = (k / 2).max(1);
    let mut vals = Vec::new();
    let mut y0 = 0;
    while y0 + k <= h {
        let mut x0 = 0;
        while x0 + k <= w {
            let mut p = Vec::new();
            let mut g = Vec::new();
            for y in y0..y0 + k {
                for x in x0..x0 + k {
                    for ch in 0..c {
                        let i = gt.tensor().index(y, x, ch);
                        p.push(pred.data()[i]);
                        g.push(gt.data()[i]);
                    }
                }
            }
            vals.push(fitted_mse(&p, &g));
            x0 += step;
        }
        y0 += step;
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Mean SSIM with two-pass (centred) window statistics.
pub fn ssim_oracle(pred: &Image, gt: &Image) -> f64 {
    let (h, w, c) = (gt.height(), gt.width(), gt.channels());
    let k = 8.min(h).min(w);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut vals = Vec::new();
    for ch in 0..c {
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let idx: Vec<usize> = (y0..y0 + k)
                    .flat_map(|y| (x0..x0 + k).map(move |x| (y, x)))
                    .map(|(y, x)| gt.tensor().index(y, x, ch))
                    .collect();
                let n = idx.len() as f64;
                let mx = idx.iter().map(|&i| pred.data()[i]).sum::<f64>() / n;
                let my = idx.iter().map(|&i| gt.data()[i]).sum::<f64>() / n;
                let vx = idx.iter().map(|&i| (pred.data()[i] - mx).powi(2)).sum::<f64>() / n;
                let vy = idx.iter().map(|&i| (gt.data()[i] - my).powi(2)).sum::<f64>() / n;
                let cov = idx.iter().map(|&i| (pred.data()[i] - mx) * (gt.data()[i] - my)).sum::<f64>() / n;
                vals.push((2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)));
            }
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

pub fn dssim_oracle(pred: &Image, gt: &Image) -> f64 {
    let p = DVector::from_column_slice(pred.data());
    let g = DVector::from_column_slice(gt.data());
    let alpha = if p.norm_squared() > 0.0 { p.dot(&g) / p.norm_squared() } else { 0.0 };
    let fitted = pred.map(|v| v * alpha);
    ((1.0 - ssim_oracle(&fitted, gt)) / 2.0).clamp(0.0, 1.0)
}

pub fn rand_unit_image(h: usize, w: usize, r: &mut ChaCha8Rng) -> Image {
    Image::from_fn(h, w, 3, Domain::Linear, |_, _, _| r.random_range(0.0..1.0))
}

pub fn rand_depth(h: usize, w: usize, r: &mut ChaCha8Rng) -> Image {
    Image::from_fn(h, w, 1, Domain::Linear, |_, _, _| r.random_range(1.0..10.0))
}

// ---------------------------------------------------------------------------------------------
// trial drivers

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// One random depth system and one random intrinsic system on the same grid; returns the largest
/// deviation of the iterative solutions from the dense ones.
pub fn solver_trial(r: &mut ChaCha8Rng) -> f64 {
    let (h, w) = (r.random_range(1..=16), r.random_range(2..=16));
    let with_prev = r.random_bool(0.5);

    let d_star = rand_image(h, w, 1, r);
    let d_prev = rand_image(h, w, 1, r);
    let g = rand_field(h, w, 1, r);
    let lambda = r.random_range(0.0..3.0);
    let prev = with_prev.then_some(&d_prev);
    let d = jcnf::solver::solve_depth(&d_star, prev, &g, lambda, 1e-13, None).unwrap();
    let mut worst = max_abs_diff(d.data(), &dense_depth(&d_star, prev, &g, lambda));

    let image = rand_image(h, w, 3, r);
    let lum = Image::from_fn(h, w, 1, Domain::Linear, |_, _, _| r.random_range(0.05..1.0));
    let (ga, gs) = (rand_field(h, w, 3, r), rand_field(h, w, 3, r));
    let (pa, ps) = (rand_image(h, w, 3, r), rand_image(h, w, 3, r));
    let (la, ls) = (r.random_range(0.1..3.0), r.random_range(0.1..3.0));
    let prev = with_prev.then_some((&pa, &ps));
    let (a, s) = jcnf::solver::solve_intrinsic(&image, &lum, &ga, &gs, prev, la, ls, 1e-13, None).unwrap();
    for c in 0..3 {
        let (oa, os) = dense_intrinsic_channel(&image, &lum, &ga, &gs, prev, la, ls, c);
        let a_c: Vec<f64> = a.data().iter().skip(c).step_by(3).copied().collect();
        let s_c: Vec<f64> = s.data().iter().skip(c).step_by(3).copied().collect();
        worst = worst.max(max_abs_diff(&a_c, &oa)).max(max_abs_diff(&s_c, &os));
    }
    worst
}

/// Depth on a 1×2 grid with `D* = 0`, target gradient 1 and unit weight: minimizing
/// `d0² + d1² + (d1 − d0 − 1)²` gives `(−1/3, 1/3)`.
pub fn one_by_two() -> (f64, f64) {
    let d_star = Image::filled(1, 2, 1, 0.0, Domain::Log);
    let g = GradientField::new(Tensor::new(1, 2, 1, vec![1.0, 0.0]).unwrap(), Tensor::zeros(1, 2, 1)).unwrap();
    let d = jcnf::solver::solve_depth(&d_star, None, &g, 1.0, 1e-14, None).unwrap();
    (d.data()[0], d.data()[1])
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MetricTrial {
    /// Largest deviation from the direct formulas.
    pub max_diff: f64,
    /// Largest change of the intrinsic metrics under a global rescaling of the prediction.
    pub scale_drift: f64,
    pub accuracy_monotone: bool,
}

pub fn metric_trial(r: &mut ChaCha8Rng) -> MetricTrial {
    use jcnf::metrics::{depth_metrics, intrinsic_metrics};
    let (h, w) = (r.random_range(8..=40), r.random_range(8..=40));
    let gt_d = rand_depth(h, w, r);
    let noise = r.random_range(0.01..0.5);
    let pred_d = Image::from_fn(h, w, 1, Domain::Linear, |y, x, _| {
        let f: f64 = 1.0 + r.random_range(-noise..noise);
        gt_d.tensor().at(y, x, 0) * f
    });
    let m = depth_metrics(&pred_d, &gt_d).unwrap();
    let o = depth_oracle(pred_d.data(), gt_d.data());
    let mut diff = [m.rel - o.rel, m.log10 - o.log10, m.rms - o.rms, m.rms_log - o.rms_log]
        .iter()
        .chain(&[m.acc[0] - o.acc[0], m.acc[1] - o.acc[1], m.acc[2] - o.acc[2]])
        .fold(0.0f64, |a, d| a.max(d.abs()));
    let accuracy_monotone = m.acc[0] <= m.acc[1] && m.acc[1] <= m.acc[2];

    let (ga, gs) = (rand_unit_image(h, w, r), rand_unit_image(h, w, r));
    let (pa, ps) = (rand_unit_image(h, w, r), rand_unit_image(h, w, r));
    let im = intrinsic_metrics(&pa, &ps, &ga, &gs).unwrap();
    for (got, p, g) in [(im.albedo, &pa, &ga), (im.shading, &ps, &gs)] {
        diff = diff
            .max((got.mse - mse_oracle(p, g)).abs())
            .max((got.lmse - lmse_oracle(p, g)).abs())
            .max((got.dssim - dssim_oracle(p, g)).abs());
    }
    let k = r.random_range(0.1..10.0);
    let scaled = intrinsic_metrics(&pa.map(|v| v * k), &ps.map(|v| v * k), &ga, &gs).unwrap();
    let scale_drift = [
        scaled.albedo.mse - im.albedo.mse,
        scaled.albedo.lmse - im.albedo.lmse,
        scaled.albedo.dssim - im.albedo.dssim,
        scaled.shading.mse - im.shading.mse,
        scaled.shading.lmse - im.shading.lmse,
        scaled.shading.dssim - im.shading.dssim,
    ]
    .iter()
    .fold(0.0f64, |a, d| a.max(d.abs()));
    MetricTrial { max_diff: diff, scale_drift, accuracy_monotone }
}

// ---------------------------------------------------------------------------------------------
// command-line runs

/// A configuration small enough to synthesize, train and infer in a few seconds.
pub const TINY_CONFIG: &str = "\
width = 40
height = 40
num_scenes = 2
seed = 5
levels = 2
inner_iters = 2
global_input = 32
global_widths = 3,4,4,4,4
global_fc = 8
grad_widths = 4,4,4,4
grad_kernel = 3
scale_widths = 3,3
init = he
zero_final = true
lr = 0.001
lr_final = 0.001
global_lr = 0.001
global_steps = 3
global_batch = 1
phase_steps = 2
batch_size = 2
eval_patches = 2
max_rounds = 2
clip_norm = 1.0
global_clip_norm = 10.0
";

/// Runs the `jcnf` binary with its output captured and returns the exit status.
pub fn jcnf(args: &[&str]) -> i32 {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_jcnf"))
        .args(args)
        .output()
        .expect("jcnf binary runs");
    out.status.code().unwrap_or(-1)
}

/// Runs synth, train, infer and eval under `root` with [`TINY_CONFIG`] and returns
/// the exit status of each command.
pub fn cli_pipeline(root: &std::path::Path) -> [i32; 4] {
    std::fs::create_dir_all(root).unwrap();
    let cfg = root.join("tiny.cfg");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let data = root.join("data");
    let ckpt = root.join("ckpt");
    let pred = root.join("pred");
    let base = [
        "--config".to_string(),
        cfg.display().to_string(),
        "--set".into(),
        format!("dataset={}", data.display()),
        "--set".into(),
        format!("checkpoint={}", ckpt.display()),
    ];
    let with = |extra: &[&str]| -> i32 {
        let mut args: Vec<&str> = base.iter().map(String::as_str).collect();
        args.extend_from_slice(extra);
        jcnf(&args)
    };
    let data_s = data.display().to_string();
    let pred_s = pred.display().to_string();
    [
        with(&["synth"]),
        with(&["train"]),
        with(&["infer", "--dataset", &data_s, "--out", &pred_s]),
        with(&["eval", "--pred", &pred_s, "--gt", &data_s]),
    ]
}

/// Every file below `root` with its contents, sorted by relative path.
pub fn snapshot(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

// ---------------------------------------------------------------------------------------------
// persistence

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn params_equal(a: &NetworkParams, b: &NetworkParams) -> bool {
    a.layers.len() == b.layers.len()
        && a.layers.iter().zip(&b.layers).all(|((na, la), (nb, lb))| {
            na == nb && la.dims() == lb.dims() && same_bits(&la.kernels, &lb.kernels) && same_bits(&la.biases, &lb.biases)
        })
}

/// Round-trips rasters, parameter files, a dataset and a checkpoint under `root`; returns the
/// first failure.
pub fn persistence_checks(root: &std::path::Path) -> Result<(), String> {
    use jcnf::data::{generate_dataset, read_dataset, read_raster_file, write_dataset, write_raster_file};
    use jcnf::pipeline::{load_checkpoint, save_checkpoint, train, TrainConfig};
    use jcnf::tensor::{read_params, write_params};
    std::fs::create_dir_all(root).map_err(|e| e.to_string())?;
    let mut r = rng(90);

    for k in 0..20 {
        let (h, w, c) = (r.random_range(1..20), r.random_range(1..20), [1, 3, 6][k % 3]);
        let t = Tensor::from_fn(h, w, c, |_, _, _| f64::from_bits(r.random::<u64>() >> 2).copysign(r.random_range(-1.0..1.0)));
        let path = root.join(format!("r{k}.raw"));
        write_raster_file(&path, &t).map_err(|e| e.to_string())?;
        let back = read_raster_file(&path).map_err(|e| e.to_string())?;
        if back.shape() != t.shape() || !same_bits(back.data(), t.data()) {
            return Err(format!("raster {k} ({h}x{w}x{c}) changed"));
        }
    }

    let model = jcnf::pipeline::Model::new(&tiny_arch(), Init::He, 3).map_err(|e| e.to_string())?;
    let nets = [
        &model.global.params,
        &model.gradient.depth,
        &model.gradient.intrinsic,
        &model.scales.get(ScaleRole::Depth).params,
        &model.scales.get(ScaleRole::Albedo).params,
        &model.scales.get(ScaleRole::Shading).params,
    ];
    for (k, p) in nets.into_iter().enumerate() {
        let mut buf = Vec::new();
        write_params(&mut buf, p).map_err(|e| e.to_string())?;
        if !params_equal(&read_params(&buf[..]).map_err(|e| e.to_string())?, p) {
            return Err(format!("parameter set {k} changed"));
        }
    }

    let records = generate_dataset(4, 3, 40, 36).map_err(|e| e.to_string())?;
    write_dataset(root.join("data"), &records).map_err(|e| e.to_string())?;
    let back = read_dataset(root.join("data")).map_err(|e| e.to_string())?;
    let mut sorted = records.clone();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut back_sorted = back.clone();
    back_sorted.sort_by(|a, b| a.id.cmp(&b.id));
    if sorted != back_sorted {
        return Err("dataset changed".into());
    }

    let config = TrainConfig {
        arch: tiny_arch(),
        init: Init::He,
        global_steps: 2,
        global_batch: 1,
        phase_steps: 1,
        batch_size: 1,
        eval_patches: 1,
        max_rounds: 1,
        seed: 6,
        ..TrainConfig::default()
    };
    let state = train(&records, &config).map_err(|e| e.to_string())?;
    save_checkpoint(root.join("ckpt"), &state).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(root.join("ckpt")).map_err(|e| e.to_string())?;
    if loaded != state {
        return Err("checkpoint changed".into());
    }
    Ok(())
}

// ---------------------------------------------------------------------------------------------
// architecture contracts

fn nudge(params: &mut NetworkParams, layer: &str) {
    let l = params.get_mut(layer).unwrap_or_else(|| panic!("no layer {layer}"));
    l.values_mut().for_each(|v| *v = 1.5 * *v + 0.25);
}

/// Shared-stem, cross-concatenation and freeze contracts; returns every violated one.
pub fn architecture_checks() -> Vec<String> {
    use jcnf::pipeline::{train_phase, Phase, TrainConfig, TrainState};
    let mut failures = Vec::new();
    let mut fail = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };
    let arch = tiny_arch();
    let mut r = rng(70);
    let mut base = GradientNets::new(&arch, Init::He, &mut r).unwrap();
    randomize_biases(&mut base.depth, &mut r);
    randomize_biases(&mut base.intrinsic, &mut r);
    let img = rand_tensor(35, 35, 3, &mut r);
    let dep = rand_tensor(35, 35, 1, &mut r);
    let live = base.forward_patch(&img, &dep, Peers::Live).unwrap();
    let cold = base.forward_patch(&img, &dep, Peers::Zero).unwrap();
    let run = |f: &dyn Fn(&mut GradientNets), peers: Peers| {
        let mut n = base.clone();
        f(&mut n);
        n.forward_patch(&img, &dep, peers).unwrap()
    };

    for layer in ["conv1", "conv2", "conv3"] {
        let o = run(&|n| nudge(&mut n.intrinsic, layer), Peers::Zero);
        fail(o.albedo != cold.albedo && o.shading != cold.shading, &format!("shared {layer} must feed both intrinsic heads"));
    }
    for (head, other) in [("albedo", "shading"), ("shading", "albedo")] {
        for layer in ["conv4", "conv5"] {
            let o = run(&|n| nudge(&mut n.intrinsic, &format!("{head}.{layer}")), Peers::Live);
            let (own, theirs, own_base, theirs_base) = match head {
                "albedo" => (&o.albedo, &o.shading, &live.albedo, &live.shading),
                _ => (&o.shading, &o.albedo, &live.shading, &live.albedo),
            };
            fail(own != own_base, &format!("{head}.{layer} must change {head}"));
            fail(theirs == theirs_base, &format!("{head}.{layer} must leave {other} bit-identical"));
            fail(o.depth == live.depth, &format!("{head}.{layer} must leave depth bit-identical"));
        }
    }

    let o = run(&|n| nudge(&mut n.depth, "conv2"), Peers::Live);
    fail(o.albedo != live.albedo && o.shading != live.shading, "depth conv2 must reach the intrinsic heads");
    let o = run(&|n| nudge(&mut n.intrinsic, "conv2"), Peers::Live);
    fail(o.depth != live.depth, "intrinsic conv2 must reach the depth head");
    for layer in ["conv3", "conv4", "conv5"] {
        let o = run(&|n| nudge(&mut n.depth, layer), Peers::Live);
        fail(o.albedo == live.albedo && o.shading == live.shading, &format!("depth {layer} must not reach the intrinsic heads"));
    }
    let o = run(&|n| nudge(&mut n.intrinsic, "conv3"), Peers::Live);
    fail(o.depth == live.depth, "intrinsic conv3 must not reach the depth head");
    let o = run(&|n| nudge(&mut n.depth, "conv2"), Peers::Zero);
    fail(o.albedo == cold.albedo && o.shading == cold.shading, "zero peers must decouple the nets");

    let config = TrainConfig {
        arch: arch.clone(),
        init: Init::He,
        phase_steps: 3,
        batch_size: 2,
        eval_patches: 1,
        global_steps: 1,
        global_batch: 1,
        max_rounds: 1,
        augment: true,
        seed: 71,
        ..TrainConfig::default()
    };
    let data: Vec<SceneRecord> = (0..2).map(|k| generate_scene(700 + k, 40, 40).unwrap()).collect();
    let mut state = TrainState::new(&config).unwrap();
    state.model.scales.release_bypass();
    for round in [0, 1] {
        state.rounds_done = round;
        let before = state.model.clone();
        train_phase(&mut state, &data, &config, Phase::GradientNets).unwrap();
        fail(state.model.scales == before.scales, &format!("round {round}: gradient phase must freeze the scale nets"));
        fail(state.model.global == before.global, &format!("round {round}: gradient phase must freeze the global net"));
        fail(state.model.gradient != before.gradient, &format!("round {round}: gradient phase must train the gradient nets"));
        let before = state.model.clone();
        train_phase(&mut state, &data, &config, Phase::ScaleNets).unwrap();
        fail(state.model.gradient == before.gradient, &format!("round {round}: scale phase must freeze the gradient nets"));
        fail(state.model.global == before.global, &format!("round {round}: scale phase must freeze the global net"));
        fail(state.model.scales != before.scales, &format!("round {round}: scale phase must train the scale nets"));
    }

    let batch = sample_patches(&data[0], 2, 1).unwrap();
    let zero = |tapes: &[jcnf::tensor::GradTape]| tapes.iter().all(|t| t.is_zero());
    let (_, g) = loss_pairwise(&batch, &state.model.gradient, &state.model.scales, Peers::Live, Freeze::SCALE_NETS).unwrap();
    fail(g.scale_nets.iter().all(|t| zero(t)), "frozen scale nets must get zero gradients");
    let (_, g) = loss_pairwise(&batch, &state.model.gradient, &state.model.scales, Peers::Live, Freeze::GRADIENT_NETS).unwrap();
    fail(zero(&g.depth_net) && zero(&g.intrinsic_net), "frozen gradient nets must get zero gradients");
    failures
}
