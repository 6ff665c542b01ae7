//! Central finite differences against backpropagation through a
//! dynamically-scaled network and the correlation objective.
//!
//!     cargo run --release --example gradient_check

use dscca::dcca::{dcca_loss, dcca_loss_grad};
use dscca::dsl::{Conditioning, DslNetwork, DslNetworkSpec, DslVariant, Phase};
use dscca::nn::Mode;
use dscca::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-5;

fn loss(n1: &DslNetwork, n2: &DslNetwork, x1: &Matrix, x2: &Matrix) -> f64 {
    let f1 = n1.clone().forward(x1, Mode::Train).unwrap().0;
    let f2 = n2.clone().forward(x2, Mode::Train).unwrap().0;
    dcca_loss(&f1, &f2, 1e-3, 1e-3, 3).unwrap().0
}

fn main() -> dscca::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let spec = DslNetworkSpec {
        input_dim: 6,
        hidden: vec![8],
        output_dim: 3,
        variant: DslVariant::Dynamic,
        conditioning: Conditioning::ZAndX,
        scaler_hidden: vec![5],
    };
    let mut n1 = DslNetwork::new(&spec, 1)?;
    let mut n2 = DslNetwork::new(&spec, 2)?;
    n1.set_phase(Phase::Active);
    n2.set_phase(Phase::Active);
    let x1 = Matrix::from_fn(6, 24, |_, _| rng.sample(StandardNormal));
    let x2 = x1.scale(0.7).add(&Matrix::from_fn(6, 24, |_, _| rng.sample(StandardNormal)));

    let (f1, tape) = n1.clone().forward(&x1, Mode::Train)?;
    let f2 = n2.clone().forward(&x2, Mode::Train)?.0;
    let (value, cache) = dcca_loss(&f1, &f2, 1e-3, 1e-3, 3)?;
    let grads = n1.backward(&tape, &dcca_loss_grad(&cache).d_f1)?;
    println!("loss {value:.6}");

    let analytic = grads.entries("net");
    let names: Vec<(String, usize)> = n1.parameters_mut("net").into_iter().map(|(k, v)| (k, v.len())).collect();
    for (block, (name, len)) in names.iter().enumerate() {
        let g = analytic.iter().find(|(k, _)| k == name).map(|(_, v)| v.to_vec()).unwrap_or(vec![0.0; *len]);
        let mut worst: f64 = 0.0;
        for idx in 0..*len {
            let mut plus = n1.clone();
            let mut minus = n1.clone();
            plus.parameters_mut("net")[block].1[idx] += H;
            minus.parameters_mut("net")[block].1[idx] -= H;
            let fd = (loss(&plus, &n2, &x1, &x2) - loss(&minus, &n2, &x1, &x2)) / (2.0 * H);
            worst = worst.max((fd - g[idx]).abs() / fd.abs().max(1e-3));
        }
        println!("{name:<24} {len:>4} params, max relative error {worst:.1e}");
    }
    Ok(())
}
