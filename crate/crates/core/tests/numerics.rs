use proptest::prelude::*;
use voxfuse::numerics::{conv, grad_check, softmax, sum, trilinear_sample, ConvGeometry, Tape, Tensor};
use voxfuse::seeded_rng;

fn conv_value(x: &Tensor<f64>, k: &Tensor<f64>, geom: ConvGeometry) -> Tensor<f64> {
    let mut tape = Tape::inference();
    let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
    let b = tape.constant(Tensor::zeros(&[k.shape()[4]]));
    let y = conv(&mut tape, xv, kv, b, geom).unwrap();
    tape.value(y).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear(seed in 0u64..10_000, a in -2.0f64..2.0, b in -2.0f64..2.0, stride in 1usize..3) {
        let mut rng = seeded_rng(seed, 0);
        let x = Tensor::random_normal(&[5, 4, 3, 2], 1.0, &mut rng);
        let y = Tensor::random_normal(&[5, 4, 3, 2], 1.0, &mut rng);
        let k = Tensor::random_normal(&[3, 3, 3, 2, 3], 1.0, &mut rng);
        let geom = ConvGeometry { stride: [stride; 3], padding: [1; 3] };
        let mixed = x.zip_map(&y, |p, q| a * p + b * q);
        let lhs = conv_value(&mixed, &k, geom);
        let (cx, cy) = (conv_value(&x, &k, geom), conv_value(&y, &k, geom));
        let rhs = cx.zip_map(&cy, |p, q| a * p + b * q);
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
    }

    #[test]
    fn identity_kernel_is_identity(seed in 0u64..10_000) {
        let mut rng = seeded_rng(seed, 1);
        let x = Tensor::random_normal(&[4, 3, 2, 3], 1.0, &mut rng);
        let k = Tensor::identity_kernel([3, 3, 3], 3);
        prop_assert_eq!(conv_value(&x, &k, ConvGeometry::same([3, 3, 3])), x);
    }

    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..10_000, scale in 0.01f64..200.0) {
        let mut rng = seeded_rng(seed, 2);
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::random_normal(&[3, 4, 7], scale, &mut rng));
        let s = softmax(&mut tape, x, 2).unwrap();
        let v = tape.value(s);
        for r in 0..12 {
            let row = v.row(r);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn sum_of_softmax_is_flat(seed in 0u64..10_000) {
        let mut rng = seeded_rng(seed, 3);
        let point = Tensor::random_normal(&[2, 5], 1.0, &mut rng);
        let check = grad_check(|tape, x| { let s = softmax(tape, x, 1)?; Ok(sum(tape, s)) }, &point, 1e-5).unwrap();
        prop_assert!(check.analytic.max_abs() <= 1e-12);
    }

    #[test]
    fn trilinear_is_exact_on_cells(seed in 0u64..10_000, i in 0usize..4, j in 0usize..3, k in 0usize..2) {
        let mut rng = seeded_rng(seed, 4);
        let v = Tensor::random_normal(&[4, 3, 2, 2], 1.0, &mut rng);
        let got = trilinear_sample(&v, [i as f64, j as f64, k as f64]).unwrap();
        let o = ((i * 3 + j) * 2 + k) * 2;
        prop_assert_eq!(got, v.data()[o..o + 2].to_vec());
    }
}
