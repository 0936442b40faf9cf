mod common;

use common::*;
use proptest::prelude::*;
use umm_core::mlp::{
    apply_gradient, backprop, flatten_params, init_stack, jacobian, jacobian_pullback, output, Activation, Layer, Mlp,
    ParamGrad,
};
use umm_core::{Matrix, Rng};

/// Scalar-loop evaluation of one sample.
fn naive_forward(layers: &[Layer], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for l in layers {
        h = (0..l.d_out())
            .map(|i| {
                let mut a = l.bias[i];
                for (j, hj) in h.iter().enumerate() {
                    a += l.weight[(i, j)] * hj;
                }
                match l.activation {
                    Activation::Identity => a,
                    Activation::Relu => a.max(0.0),
                    Activation::Tanh => a.tanh(),
                }
            })
            .collect();
    }
    h
}

fn tanh_stack(dims: &[usize], rng: &mut Rng) -> Vec<Layer> {
    let mut acts = vec![Activation::Tanh; dims.len() - 1];
    *acts.last_mut().unwrap() = Activation::Identity;
    let mut layers = init_stack(dims, &acts, rng).unwrap();
    // nonzero biases so the bias gradients are exercised
    for l in &mut layers {
        l.bias.iter_mut().for_each(|b| *b = 0.3 * rng.normal());
    }
    layers
}

#[test]
fn forward_matches_scalar_reference() {
    let mut rng = Rng::new(21);
    for hidden in [Activation::Tanh, Activation::Relu, Activation::Identity] {
        let net = Mlp::random(&[5, 7, 6, 3], hidden, None, &mut rng).unwrap();
        let x = random_matrix(&mut rng, 5, 9);
        let y = output(net.layers(), &x).unwrap();
        for c in 0..9 {
            let want = naive_forward(net.layers(), &x.col(c));
            for (r, w) in want.iter().enumerate() {
                assert!((y[(r, c)] - w).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn backprop_matches_central_differences() {
    let mut rng = Rng::new(22);
    let layers = tanh_stack(&[4, 6, 5, 3], &mut rng);
    let x = random_matrix(&mut rng, 4, 7);
    let u = random_matrix(&mut rng, 3, 7);
    let inner = |ls: &[Layer], x: &Matrix| dot(output(ls, x).unwrap().as_slice(), u.as_slice());
    let (pg, gx) = backprop(&layers, &x, &u).unwrap();
    let fd = fd_params(|ls| inner(ls, &x), &layers, FD_STEP);
    assert!(max_rel_err(&pg.flatten(), &fd) < 1e-6);
    let fdx = fd_matrix(|x| inner(&layers, x), &x, FD_STEP);
    assert!(max_rel_err(gx.as_slice(), fdx.as_slice()) < 1e-6);
}

#[test]
fn jacobian_matches_differences_and_backprop() {
    let mut rng = Rng::new(23);
    let layers = tanh_stack(&[4, 6, 5, 3], &mut rng);
    let z: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
    let j = jacobian(&layers, &z).unwrap();
    assert_eq!(j.shape(), (3, 4));
    let x = Matrix::from_columns(&[z.clone()]).unwrap();
    for r in 0..3 {
        let fd = fd_grad(|v| naive_forward(&layers, v)[r], &z, FD_STEP);
        assert!(max_rel_err(j.row(r), &fd) < 1e-6);
        let mut e = Matrix::zeros(3, 1);
        e[(r, 0)] = 1.0;
        let (_, gx) = backprop(&layers, &x, &e).unwrap();
        for c in 0..4 {
            assert!((gx[(c, 0)] - j[(r, c)]).abs() < 1e-12);
        }
    }
}

#[test]
fn jacobian_pullback_matches_differences() {
    let mut rng = Rng::new(24);
    let layers = tanh_stack(&[3, 5, 4, 2], &mut rng);
    let z: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
    let b = random_matrix(&mut rng, 2, 3);
    let got = jacobian_pullback(&layers, &z, &b).unwrap();
    let fd = fd_params(|ls| dot(jacobian(ls, &z).unwrap().as_slice(), b.as_slice()), &layers, FD_STEP);
    assert!(max_rel_err(&got.flatten(), &fd) < 1e-6);
}

#[test]
fn every_split_composes_to_the_full_network() {
    let mut rng = Rng::new(25);
    let mut net = Mlp::random(&[6, 8, 8, 5, 4, 2], Activation::Tanh, None, &mut rng).unwrap();
    let x = random_matrix(&mut rng, 6, 11);
    let full = output(net.layers(), &x).unwrap();
    for s in 1..net.layers().len() {
        net.set_split_index(s).unwrap();
        let (early, last) = net.early_and_last(&x).unwrap();
        assert_eq!(early, output(net.early(), &x).unwrap());
        assert_eq!(last, full);
        assert_eq!(output(net.late(), &early).unwrap(), full);
    }
    assert!(net.set_split_index(0).is_err());
    assert!(net.set_split_index(net.layers().len()).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut rng = Rng::new(26);
    let net = Mlp::random(&[5, 9, 4, 3], Activation::Relu, Some(2), &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    net.save(&path).unwrap();
    let back = Mlp::load(&path).unwrap();
    assert_eq!(back, net);
    assert_eq!(back.to_bytes(), net.to_bytes());
    let bytes = net.to_bytes();
    assert!(Mlp::read_checkpoint(&mut &bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn invalid_networks_are_rejected() {
    let mut rng = Rng::new(27);
    let l1 = Layer::glorot(3, 4, Activation::Tanh, &mut rng);
    let l2 = Layer::glorot(5, 2, Activation::Identity, &mut rng);
    assert!(Mlp::new(vec![l1.clone(), l2], 1).is_err());
    let l2 = Layer::glorot(4, 2, Activation::Tanh, &mut rng);
    assert!(Mlp::new(vec![l1.clone(), l2], 1).is_err());
    assert!(Layer::new(Matrix::zeros(2, 3), vec![0.0; 3], Activation::Tanh).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn late_updates_leave_early_bits_untouched(seed in any::<u64>(), split in 1usize..4, lr in -1.0f64..1.0) {
        let mut rng = Rng::new(seed);
        let mut net = Mlp::random(&[4, 6, 6, 5, 3], Activation::Tanh, Some(split), &mut rng).unwrap();
        let before: Vec<u64> = flatten_params(net.early()).iter().map(|v| v.to_bits()).collect();
        let late_before = flatten_params(net.late());
        let noise: Vec<f64> = (0..late_before.len()).map(|_| rng.normal()).collect();
        let g = ParamGrad::from_flat(net.late(), &noise).unwrap();
        apply_gradient(net.late_mut(), &g, lr);
        let after: Vec<u64> = flatten_params(net.early()).iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(before, after);
        if lr != 0.0 {
            prop_assert_ne!(flatten_params(net.late()), late_before);
        }
    }
}
