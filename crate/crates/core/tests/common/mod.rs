//! Oracles shared by the integration tests.
#![allow(dead_code)]

use dscca::dcca::{dcca_loss, dcca_loss_grad};
use dscca::dsl::{Conditioning, DslNetwork, DslNetworkSpec, DslVariant, Phase};
use dscca::nn::Mode;
use dscca::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;

pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn rel_err(fd: &[f64], an: &[f64]) -> f64 {
    let num: f64 = fd.iter().zip(an).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

/// Relative errors of the loss gradient with respect to both feature
/// matrices on `cases` random instances.
pub fn loss_gradient_errors(cases: usize, seed: u64) -> Vec<f64> {
    let h = FD_STEP;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cases)
        .map(|case| {
            let (k, d, n) = if case % 2 == 0 { (4, 4, 32) } else { (5, 3, 24) };
            let f1 = gaussian(k, n, &mut rng);
            let f2 = f1.scale(0.6).add(&gaussian(k, n, &mut rng));
            let (_, cache) = dcca_loss(&f1, &f2, 1e-3, 1e-3, d).unwrap();
            let grad = dcca_loss_grad(&cache);
            assert!(!grad.degenerate);
            let loss = |a: &Matrix, b: &Matrix| dcca_loss(a, b, 1e-3, 1e-3, d).unwrap().0;
            let mut fd = Vec::new();
            let mut an = Vec::new();
            for (which, g) in [(0, &grad.d_f1), (1, &grad.d_f2)] {
                for idx in 0..f1.data().len() {
                    let base = if which == 0 { &f1 } else { &f2 };
                    let (mut p, mut m) = (base.clone(), base.clone());
                    p.data_mut()[idx] += h;
                    m.data_mut()[idx] -= h;
                    let (lp, lm) = if which == 0 {
                        (loss(&p, &f2), loss(&m, &f2))
                    } else {
                        (loss(&f1, &p), loss(&f1, &m))
                    };
                    fd.push((lp - lm) / (2.0 * h));
                    an.push(g.data()[idx]);
                }
            }
            rel_err(&fd, &an)
        })
        .collect()
}

fn micro_network(variant: DslVariant, conditioning: Conditioning, seed: u64) -> DslNetwork {
    DslNetwork::new(
        &DslNetworkSpec {
            input_dim: 6,
            hidden: vec![5],
            output_dim: 3,
            variant,
            conditioning,
            scaler_hidden: vec![4],
        },
        seed,
    )
    .unwrap()
}

fn network_loss(n1: &DslNetwork, n2: &DslNetwork, x1: &Matrix, x2: &Matrix) -> f64 {
    let f1 = n1.clone().forward(x1, Mode::Train).unwrap().0;
    let f2 = n2.clone().forward(x2, Mode::Train).unwrap().0;
    dcca_loss(&f1, &f2, 1e-3, 1e-3, 3).unwrap().0
}

/// Finite-difference relative error of the full two-network loss over every parameter.
fn end_to_end_error(mut n1: DslNetwork, mut n2: DslNetwork, x1: &Matrix, x2: &Matrix) -> f64 {
    let h = FD_STEP;
    let (f1, t1) = n1.clone().forward(x1, Mode::Train).unwrap();
    let (f2, t2) = n2.clone().forward(x2, Mode::Train).unwrap();
    let (_, cache) = dcca_loss(&f1, &f2, 1e-3, 1e-3, 3).unwrap();
    let g = dcca_loss_grad(&cache);
    let g1 = n1.backward(&t1, &g.d_f1).unwrap();
    let g2 = n2.backward(&t2, &g.d_f2).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = g1
        .entries("a")
        .into_iter()
        .chain(g2.entries("b"))
        .map(|(k, v)| (k, v.to_vec()))
        .collect();

    let mut fd = Vec::new();
    let mut an = Vec::new();
    for (view, prefix) in [(0, "a"), (1, "b")] {
        let names: Vec<(String, usize)> = {
            let net = if view == 0 { &mut n1 } else { &mut n2 };
            net.parameters_mut(prefix).into_iter().map(|(k, v)| (k, v.len())).collect()
        };
        for (block, (name, len)) in names.iter().enumerate() {
            let grad = analytic.iter().find(|(k, _)| k == name).map(|(_, v)| v.clone());
            for idx in 0..*len {
                let eval = |delta: f64| {
                    let mut p1 = n1.clone();
                    let mut p2 = n2.clone();
                    let net = if view == 0 { &mut p1 } else { &mut p2 };
                    net.parameters_mut(prefix)[block].1[idx] += delta;
                    network_loss(&p1, &p2, x1, x2)
                };
                fd.push((eval(h) - eval(-h)) / (2.0 * h));
                an.push(grad.as_ref().map_or(0.0, |g| g[idx]));
            }
        }
    }
    rel_err(&fd, &an)
}

/// End-to-end gradient errors over every head variant, conditioning mode and phase.
pub fn end_to_end_gradient_errors(seed: u64) -> Vec<(String, f64)> {
    let configs = [
        (DslVariant::Conventional, Conditioning::ZOnly, Phase::Active),
        (DslVariant::Dynamic, Conditioning::ZOnly, Phase::Warmup),
        (DslVariant::Dynamic, Conditioning::ZOnly, Phase::Active),
        (DslVariant::Dynamic, Conditioning::XOnly, Phase::Active),
        (DslVariant::Dynamic, Conditioning::ZAndX, Phase::Active),
        (DslVariant::GlobalScale, Conditioning::ZOnly, Phase::Active),
        (DslVariant::ScaleOutputs, Conditioning::ZAndX, Phase::Active),
        (DslVariant::Hypernet, Conditioning::ZOnly, Phase::Active),
        (DslVariant::Hypernet, Conditioning::XOnly, Phase::Active),
        (DslVariant::Dynamic, Conditioning::ZAndX, Phase::Warmup),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for round in 0..2u64 {
        for (i, &(variant, conditioning, phase)) in configs.iter().enumerate() {
            let s = round * 100 + i as u64;
            let mut n1 = micro_network(variant, conditioning, s);
            let mut n2 = micro_network(variant, conditioning, s + 1000);
            n1.set_phase(phase);
            n2.set_phase(phase);
            let x1 = gaussian(6, 16, &mut rng);
            let x2 = x1.scale(0.5).add(&gaussian(6, 16, &mut rng));
            let e = end_to_end_error(n1, n2, &x1, &x2);
            out.push((format!("{variant:?}/{conditioning:?}/{phase:?}"), e));
        }
    }
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Ranking loss written out directly: each side-1 query against every
/// mismatched side-2 target, then the same with the sides swapped.
pub fn ranking_loss_double_loop(p1: &Matrix, p2: &Matrix, m: f64) -> f64 {
    let n = p1.cols();
    let mut total = 0.0;
    for (a, b) in [(p1, p2), (p2, p1)] {
        for i in 0..n {
            let matched = cosine(a.col(i), b.col(i));
            for j in 0..n {
                if j != i {
                    total += (m - matched + cosine(a.col(i), b.col(j))).max(0.0);
                }
            }
        }
    }
    total
}

/// Recall@k by sorting every query's cosine scores.
pub fn brute_force_recall(q: &Matrix, t: &Matrix, k: usize) -> f64 {
    let n = q.cols();
    let mut hits = 0;
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| cosine(q.col(i), t.col(b)).partial_cmp(&cosine(q.col(i), t.col(a))).unwrap());
        if order[..k].contains(&i) {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}
