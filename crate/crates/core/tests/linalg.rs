mod common;

use common::*;
use proptest::prelude::*;
use umm_core::linalg::{
    cholesky, cholesky_inverse, cholesky_logdet, cholesky_solve, logdet_spd, solve_lower_triangular,
};
use umm_core::{Matrix, Rng};

fn spd(rng: &mut Rng, n: usize) -> Matrix {
    let a = random_matrix(rng, n, n + 3);
    let mut g = a.gram_rows();
    for i in 0..n {
        g[(i, i)] += 0.1;
    }
    g
}

#[test]
fn cholesky_matches_nalgebra() {
    let mut rng = Rng::new(1);
    for n in 1..=12 {
        let a = spd(&mut rng, n);
        let ours = cholesky(&a).unwrap();
        let oracle = from_na(&to_na(&a).cholesky().unwrap().l());
        assert!(ours.max_abs_diff(&oracle) < 1e-10, "n = {n}");
        let ld = cholesky_logdet(&a).unwrap();
        assert!((ld - eig_logdet(&to_na(&a))).abs() < 1e-9, "n = {n}");
    }
}

#[test]
fn matmul_matches_nalgebra() {
    let mut rng = Rng::new(2);
    for (n, k, p) in [(1, 1, 1), (3, 4, 2), (7, 5, 9), (5, 13, 6), (16, 3, 17)] {
        let a = random_matrix(&mut rng, n, k);
        let b = random_matrix(&mut rng, k, p);
        let oracle = from_na(&(to_na(&a) * to_na(&b)));
        assert!(a.matmul(&b).unwrap().max_abs_diff(&oracle) < 1e-12);
        let bt = b.transpose();
        assert!(a.matmul_nt(&bt).unwrap().max_abs_diff(&oracle) < 1e-12);
        let at = a.transpose();
        assert!(at.matmul_tn(&b).unwrap().max_abs_diff(&oracle) < 1e-12);
    }
}

#[test]
fn transpose_of_product() {
    let mut rng = Rng::new(3);
    let a = random_matrix(&mut rng, 3, 4);
    let b = random_matrix(&mut rng, 4, 2);
    let lhs = a.matmul(&b).unwrap().transpose();
    let rhs = b.transpose().matmul(&a.transpose()).unwrap();
    // element-wise brute force
    for i in 0..2 {
        for j in 0..3 {
            let brute: f64 = (0..4).map(|l| a[(j, l)] * b[(l, i)]).sum();
            assert!((lhs[(i, j)] - brute).abs() < 1e-14);
            assert!((rhs[(i, j)] - brute).abs() < 1e-14);
        }
    }
}

#[test]
fn construct_then_solve() {
    let mut rng = Rng::new(4);
    for n in 1..=10 {
        let mut l = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..i {
                l[(i, j)] = rng.normal();
            }
            l[(i, i)] = 1.0 + rng.uniform();
        }
        let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let b = l.matvec(&x).unwrap();
        let got = solve_lower_triangular(&l, &b).unwrap();
        assert!(got.iter().zip(&x).all(|(g, x)| (g - x).abs() < 1e-10));
    }
}

#[test]
fn cholesky_solve_and_inverse() {
    let mut rng = Rng::new(5);
    let a = spd(&mut rng, 6);
    let l = cholesky(&a).unwrap();
    let x: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
    let got = cholesky_solve(&l, &a.matvec(&x).unwrap()).unwrap();
    assert!(got.iter().zip(&x).all(|(g, x)| (g - x).abs() < 1e-9));
    let prod = a.matmul(&cholesky_inverse(&l)).unwrap();
    assert!(prod.max_abs_diff(&Matrix::identity(6)) < 1e-9);
}

#[test]
fn binary_and_csv_round_trips() {
    let mut rng = Rng::new(6);
    let a = random_matrix(&mut rng, 5, 7).scale(1e3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.bin");
    a.save(&path).unwrap();
    let back = Matrix::load(&path).unwrap();
    assert_eq!(back.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), a.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let csv = Matrix::from_csv(&a.to_csv()).unwrap();
    assert_eq!(csv, a);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scaled_identity_logdet(n in 1usize..=64, c in 1e-3f64..1e3) {
        let got = cholesky_logdet(&Matrix::identity(n).scale(c)).unwrap();
        prop_assert!((got - n as f64 * c.ln()).abs() < 1e-10);
    }

    #[test]
    fn logdet_permutation_invariant(seed in any::<u64>(), n in 1usize..=12) {
        let mut rng = Rng::new(seed);
        let a = spd(&mut rng, n);
        let perm = rng.permutation(n);
        let pa = Matrix::from_fn(n, n, |i, j| a[(perm[i], perm[j])]);
        prop_assert!((logdet_spd(&a).unwrap() - logdet_spd(&pa).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn rng_streams_reproduce(seed in any::<u64>(), stream in any::<u64>()) {
        let draw = |r: &mut Rng| (0..32).map(|_| r.next_u64()).collect::<Vec<_>>();
        prop_assert_eq!(draw(&mut Rng::new(seed)), draw(&mut Rng::new(seed)));
        let f = Rng::new(seed).fork(stream);
        prop_assert_eq!(draw(&mut f.clone()), draw(&mut Rng::new(seed).fork(stream)));
    }
}
