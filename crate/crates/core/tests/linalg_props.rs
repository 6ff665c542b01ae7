use dscca::linalg::{svd, sym_eig, sym_inv_sqrt, DEFAULT_RELATIVE_CLAMP};
use dscca::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn orthogonal(n: usize, seed: u64) -> Matrix {
    svd(&gaussian(n, n, seed)).unwrap().u
}

/// `Q diag(λ) Qᵀ` with eigenvalues spread over `decades` orders of magnitude.
fn graded_spd(n: usize, decades: f64, seed: u64) -> (Matrix, Vec<f64>) {
    let q = orthogonal(n, seed);
    let lambdas: Vec<f64> = (0..n)
        .map(|i| 10f64.powf(decades * (0.5 - i as f64 / (n - 1).max(1) as f64)))
        .collect();
    let s = q.matmul(&Matrix::from_diag(&lambdas)).matmul_t(&q).symmetrize();
    (s, lambdas)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sym_eig_reconstructs_and_is_orthonormal(n in 1usize..24, seed in any::<u64>()) {
        let a = gaussian(n, n, seed);
        let s = a.add(&a.transpose());
        let e = sym_eig(&s).unwrap();
        let v = &e.eigenvectors;
        let rec = v.matmul(&Matrix::from_diag(&e.eigenvalues)).matmul_t(v);
        let scale = s.max_abs().max(1.0);
        prop_assert!(rec.max_abs_diff(&s) < 1e-11 * scale);
        prop_assert!(v.t_matmul(v).max_abs_diff(&Matrix::identity(n)) < 1e-12);
        prop_assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn sym_eig_handles_graded_spectra(n in 2usize..64, decades in 0.0f64..14.0, seed in any::<u64>()) {
        let (s, mut lambdas) = graded_spd(n, decades, seed);
        let e = sym_eig(&s).unwrap();
        lambdas.sort_by(|a, b| b.total_cmp(a));
        let top = lambdas[0];
        for (got, want) in e.eigenvalues.iter().zip(&lambdas) {
            prop_assert!((got - want).abs() < 1e-12 * top * n as f64, "{got} vs {want}");
        }
    }

    #[test]
    fn svd_reconstructs(rows in 1usize..20, cols in 1usize..20, seed in any::<u64>()) {
        let m = gaussian(rows, cols, seed);
        let r = svd(&m).unwrap();
        prop_assert!(r.reconstruct().max_abs_diff(&m) < 1e-11 * m.max_abs().max(1.0));
        prop_assert!(r.singular_values.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(r.singular_values.iter().all(|&s| s >= 0.0));
        let k = rows.min(cols);
        prop_assert!(r.u.t_matmul(&r.u).max_abs_diff(&Matrix::identity(k)) < 1e-12);
        prop_assert!(r.v.t_matmul(&r.v).max_abs_diff(&Matrix::identity(k)) < 1e-12);
    }

    #[test]
    fn svd_of_graded_matrix(n in 2usize..48, decades in 0.0f64..12.0, seed in any::<u64>()) {
        let (s, _) = graded_spd(n, decades, seed);
        let m = s.matmul(&orthogonal(n, seed ^ 0xabc));
        let r = svd(&m).unwrap();
        prop_assert!(r.reconstruct().max_abs_diff(&m) < 1e-11 * m.max_abs());
    }

    #[test]
    fn inverse_square_root_whitens(n in 1usize..32, decades in 0.0f64..8.0, seed in any::<u64>()) {
        let (s, _) = graded_spd(n, decades, seed);
        let w = sym_inv_sqrt(&s, DEFAULT_RELATIVE_CLAMP * s.max_abs()).unwrap();
        let white = w.matmul(&s).matmul(&w);
        prop_assert!(white.max_abs_diff(&Matrix::identity(n)) < 1e-6);
        prop_assert!(w.max_abs_diff(&w.transpose()) <= 1e-12 * w.max_abs());
    }
}
