mod common;

use common::*;
use proptest::prelude::*;
use umm_core::mlp::{init_stack, Activation, Layer};
use umm_core::ssl::{barlow_loss, ntxent_loss, ssl_loss, AugPairBatch, SslKind};
use umm_core::{Matrix, Rng};

/// Anchor-by-anchor cross-entropy over `[v1 | v2]`.
fn naive_ntxent(v1: &Matrix, v2: &Matrix, t: f64) -> f64 {
    let z = v1.hcat(v2).unwrap();
    let (n2, half) = (z.cols(), v1.cols());
    let sim = |a: usize, b: usize| dot(&z.col(a), &z.col(b)) / t;
    (0..n2)
        .map(|a| {
            let pos = (a + half) % n2;
            let lse = (0..n2).filter(|&k| k != a).map(|k| sim(a, k).exp()).sum::<f64>().ln();
            lse - sim(a, pos)
        })
        .sum::<f64>()
        / n2 as f64
}

fn naive_barlow(v1: &Matrix, v2: &Matrix, w: f64) -> f64 {
    let standardize = |v: &Matrix| -> Vec<Vec<f64>> {
        (0..v.rows())
            .map(|r| {
                let row = v.row(r);
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let sd = (row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                row.iter().map(|x| (x - mean) / sd).collect()
            })
            .collect()
    };
    let (h1, h2) = (standardize(v1), standardize(v2));
    let n = v1.cols() as f64;
    let mut loss = 0.0;
    for (a, ha) in h1.iter().enumerate() {
        for (b, hb) in h2.iter().enumerate() {
            let c = dot(ha, hb) / n;
            loss += if a == b { (1.0 - c).powi(2) } else { w * c * c };
        }
    }
    loss
}

fn orthogonal(rng: &mut Rng, m: usize) -> Matrix {
    from_na(&to_na(&random_matrix(rng, m, m)).qr().q())
}

fn stack(dims: &[usize], last: Activation, rng: &mut Rng) -> Vec<Layer> {
    let mut acts = vec![Activation::Tanh; dims.len() - 1];
    *acts.last_mut().unwrap() = last;
    let mut layers = init_stack(dims, &acts, rng).unwrap();
    for l in &mut layers {
        l.bias.iter_mut().for_each(|b| *b = 0.1 * rng.normal());
    }
    layers
}

fn kinds() -> [SslKind; 2] {
    [SslKind::NtXent { temperature: 0.5 }, SslKind::Barlow { off_diag_weight: 0.05 }]
}

#[test]
fn ntxent_matches_reference() {
    let mut rng = Rng::new(41);
    for (d, n, t) in [(2, 2, 1.0), (4, 5, 0.1), (8, 16, 0.5)] {
        let v1 = unit_columns(&mut rng, d, n);
        let v2 = unit_columns(&mut rng, d, n);
        let (loss, _, _) = ntxent_loss(&v1, &v2, t).unwrap();
        assert!(rel_err(loss, naive_ntxent(&v1, &v2, t)) < 1e-10);
    }
}

#[test]
fn barlow_matches_reference() {
    let mut rng = Rng::new(42);
    for (d, n, w) in [(2, 3, 0.0), (4, 8, 5e-3), (6, 20, 1.0)] {
        let v1 = random_matrix(&mut rng, d, n);
        let v2 = random_matrix(&mut rng, d, n);
        let (loss, _, _) = barlow_loss(&v1, &v2, w).unwrap();
        assert!(rel_err(loss, naive_barlow(&v1, &v2, w)) < 1e-10);
    }
}

#[test]
fn embedding_gradients_match_central_differences() {
    let mut rng = Rng::new(43);
    let (v1, v2) = (random_matrix(&mut rng, 3, 4), random_matrix(&mut rng, 3, 4));
    for kind in kinds() {
        let (_, g1, g2) = kind.embedding_loss(&v1, &v2).unwrap();
        let fd1 = fd_matrix(|v| kind.embedding_loss(v, &v2).unwrap().0, &v1, FD_STEP);
        let fd2 = fd_matrix(|v| kind.embedding_loss(&v1, v).unwrap().0, &v2, FD_STEP);
        assert!(max_rel_err(g1.as_slice(), fd1.as_slice()) < 1e-6, "{}", kind.name());
        assert!(max_rel_err(g2.as_slice(), fd2.as_slice()) < 1e-6, "{}", kind.name());
    }
}

#[test]
fn ssl_loss_gradients_match_central_differences() {
    let mut rng = Rng::new(44);
    let net = stack(&[3, 5, 4], Activation::Tanh, &mut rng);
    let head = stack(&[4, 3], Activation::Identity, &mut rng);
    let batch = AugPairBatch::new(random_matrix(&mut rng, 3, 4), random_matrix(&mut rng, 3, 4), vec![7, 1, 3, 0]).unwrap();
    for kind in kinds() {
        let out = ssl_loss(kind, &net, &head, &batch).unwrap();
        let fd_net = fd_params(|n| ssl_loss(kind, n, &head, &batch).unwrap().loss, &net, FD_STEP);
        let fd_head = fd_params(|h| ssl_loss(kind, &net, h, &batch).unwrap().loss, &head, FD_STEP);
        assert!(max_rel_err(&out.net.flatten(), &fd_net) < 1e-6, "{}", kind.name());
        assert!(max_rel_err(&out.head.flatten(), &fd_head) < 1e-6, "{}", kind.name());
        let x = batch.stacked();
        let fd_x = fd_matrix(
            |x| {
                let (a, b) = x.split_columns(4);
                ssl_loss(kind, &net, &head, &AugPairBatch::new(a, b, batch.ancestors.clone()).unwrap()).unwrap().loss
            },
            &x,
            FD_STEP,
        );
        assert!(max_rel_err(out.input.as_slice(), fd_x.as_slice()) < 1e-6, "{}", kind.name());
    }
}

#[test]
fn ssl_loss_is_pure() {
    let mut rng = Rng::new(45);
    let net = stack(&[3, 5, 4], Activation::Tanh, &mut rng);
    let head = stack(&[4, 3], Activation::Identity, &mut rng);
    let batch = AugPairBatch::new(random_matrix(&mut rng, 3, 6), random_matrix(&mut rng, 3, 6), (0..6).collect()).unwrap();
    let (net0, head0, batch0) = (net.clone(), head.clone(), batch.clone());
    for kind in kinds() {
        let a = ssl_loss(kind, &net, &head, &batch).unwrap();
        let b = ssl_loss(kind, &net, &head, &batch).unwrap();
        assert_eq!(a, b);
    }
    assert_eq!((net, head, batch), (net0, head0, batch0));
}

#[test]
fn duplicate_ancestors_are_rejected() {
    let v = Matrix::zeros(2, 3);
    assert!(AugPairBatch::new(v.clone(), v.clone(), vec![0, 1, 1]).is_err());
    assert!(AugPairBatch::new(v.clone(), v, vec![0, 1]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_ignore_pair_order_and_view_swap(seed in any::<u64>(), d in 2usize..6, n in 3usize..12) {
        let mut rng = Rng::new(seed);
        let batch = AugPairBatch::new(random_matrix(&mut rng, d, n), random_matrix(&mut rng, d, n), (0..n).collect()).unwrap();
        let perm = rng.permutation(n);
        let p = batch.permuted(&perm);
        for kind in kinds() {
            let base = kind.embedding_loss(&batch.view1, &batch.view2).unwrap().0;
            let permuted = kind.embedding_loss(&p.view1, &p.view2).unwrap().0;
            let swapped = kind.embedding_loss(&batch.view2, &batch.view1).unwrap().0;
            prop_assert!((base - permuted).abs() < 1e-10 * base.abs().max(1.0));
            prop_assert!((base - swapped).abs() < 1e-10 * base.abs().max(1.0));
        }
    }

    #[test]
    fn ntxent_is_rotation_invariant(seed in any::<u64>(), d in 2usize..6, n in 2usize..12, t in 0.05f64..2.0) {
        let mut rng = Rng::new(seed);
        let v1 = unit_columns(&mut rng, d, n);
        let v2 = unit_columns(&mut rng, d, n);
        let u = orthogonal(&mut rng, d);
        let a = ntxent_loss(&v1, &v2, t).unwrap().0;
        let b = ntxent_loss(&u.matmul(&v1).unwrap(), &u.matmul(&v2).unwrap(), t).unwrap().0;
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }
}
