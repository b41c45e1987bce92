use plab::numerics::{cross_entropy, matmul, rms_norm, softmax, Graph, Tensor};
use plab::LabError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matmul_identity_and_hand_cases() {
    let eye = Tensor::from_rows(&[vec![1., 0.], vec![0., 1.]]).unwrap();
    let b = Tensor::from_rows(&[vec![3., 4.], vec![5., 6.]]).unwrap();
    assert_eq!(matmul(&eye, &b).unwrap(), b);

    let row = Tensor::from_rows(&[vec![1., 2.]]).unwrap();
    let col = Tensor::from_rows(&[vec![3.], vec![4.]]).unwrap();
    assert_eq!(matmul(&row, &col).unwrap().data(), &[11.0]);
}

#[test]
fn matmul_4x5_by_5x3_matches_triple_loop() {
    let a = random(&[4, 5], 1);
    let b = random(&[5, 3], 2);
    let got = matmul(&a, &b).unwrap();
    let want = triple_loop(a.data(), b.data(), 4, 5, 3);
    for (g, w) in got.data().iter().zip(&want) {
        assert!((g - w).abs() <= 1e-12);
    }
}

#[test]
fn matmul_inner_mismatch() {
    let r = matmul(&random(&[2, 3], 0), &random(&[4, 2], 0));
    assert!(matches!(r, Err(LabError::ShapeMismatch { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_agrees_with_triple_loop(m in 1usize..=32, k in 1usize..=32, n in 1usize..=32, seed in any::<u64>()) {
        let a = random(&[m, k], seed);
        let b = random(&[k, n], seed.wrapping_add(1));
        let got = matmul(&a, &b).unwrap();
        let want = triple_loop(a.data(), b.data(), m, k, n);
        for (g, w) in got.data().iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 1..40), scale in 0.1f64..30.0) {
        let x = Tensor::new(vec![1, values.len()], values.iter().map(|v| v * scale).collect()).unwrap();
        let y = softmax(&x, 1).unwrap();
        let total: f64 = y.data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(y.data().iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)));
    }
}

#[test]
fn softmax_symmetry_stability_and_formula() {
    let y = softmax(&Tensor::new(vec![3], vec![0., 0., 0.]).unwrap(), 0).unwrap();
    for p in y.data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }

    let y = softmax(&Tensor::new(vec![3], vec![1000., 0., 0.]).unwrap(), 0).unwrap();
    assert!(y.is_finite());
    assert!((y.data()[0] - 1.0).abs() < 1e-15);
    assert!(y.data()[1] < 1e-300);

    let y = softmax(&Tensor::new(vec![3], vec![1., 2., 3.]).unwrap(), 0).unwrap();
    let z: f64 = [1f64, 2., 3.].iter().map(|v| v.exp()).sum();
    for (i, p) in y.data().iter().enumerate() {
        assert!((p - ((i + 1) as f64).exp() / z).abs() < 1e-12);
    }
}

#[test]
fn softmax_along_first_axis() {
    let x = random(&[4, 3], 8);
    let y = softmax(&x, 0).unwrap();
    for col in 0..3 {
        let s: f64 = (0..4).map(|r| y.data()[r * 3 + col]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn rms_norm_cases() {
    let ones = Tensor::ones(&[5]);
    assert_eq!(rms_norm(&ones, &ones, 0.0).unwrap(), ones);

    let zero = Tensor::zeros(&[4]);
    assert_eq!(rms_norm(&zero, &Tensor::ones(&[4]), 1e-6).unwrap(), zero);

    let x = random(&[2, 6], 3);
    let w = random(&[6], 4);
    let got = rms_norm(&x, &w, 1e-6).unwrap();
    for r in 0..2 {
        let row = &x.data()[r * 6..(r + 1) * 6];
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / 6.0 + 1e-6).sqrt();
        for j in 0..6 {
            assert!((got.data()[r * 6 + j] - row[j] / rms * w.data()[j]).abs() < 1e-12);
        }
    }

    assert!(matches!(
        rms_norm(&x, &Tensor::ones(&[5]), 1e-6),
        Err(LabError::ShapeMismatch { .. })
    ));
}

#[test]
fn cross_entropy_cases() {
    let uniform = Tensor::zeros(&[2, 4]);
    let l = cross_entropy(&uniform, &[0, 3]).unwrap().item().unwrap();
    assert!((l - 4f64.ln()).abs() < 1e-15);

    let mut peaked = Tensor::zeros(&[1, 4]);
    peaked.data_mut()[2] = 1e4;
    assert!(cross_entropy(&peaked, &[2]).unwrap().item().unwrap() < 1e-12);

    let logits = random(&[3, 5], 11);
    let targets = [4, 0, 2];
    let got = cross_entropy(&logits, &targets).unwrap().item().unwrap();
    let mut want = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits.data()[i * 5..(i + 1) * 5];
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        want += lse - row[t];
    }
    want /= 3.0;
    assert!((got - want).abs() < 1e-10);

    assert!(matches!(
        cross_entropy(&logits, &[0, 5, 1]),
        Err(LabError::IndexOutOfRange { .. })
    ));
}

#[test]
fn ops_are_bit_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.leaf(random(&[4, 8], 21), true);
        let w = g.leaf(random(&[8, 8], 22), true);
        let y = g.matmul(x, w).unwrap();
        let y = g.softmax(y, 1).unwrap();
        let l = g.cross_entropy(y, &[1, 2, 3, 4]).unwrap();
        g.backward(l).unwrap();
        (g.value(l).clone(), g.grad(w).unwrap())
    };
    assert_eq!(run(), run());
}
