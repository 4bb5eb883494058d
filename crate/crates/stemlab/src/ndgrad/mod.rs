//! Tensor arithmetic with reverse-mode autodiff, AdamW, and LR scheduling.

pub mod adamw;
pub mod gradcheck;
pub mod param;
pub mod reference;
pub mod schedule;
pub mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use param::{ParamRef, ParamSet, Parameter};
pub use schedule::LrSchedule;
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_definition() {
        let x = Tensor::from_vec(vec![-1.0, 0.0, 2.0], &[3]).unwrap();
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let x = Tensor::from_vec(vec![0.0; 3], &[3]).unwrap();
        for v in x.softmax().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn layernorm_matches_reference_on_shifted_vector() {
        let base = [0.3f32, -1.2, 2.0, 0.7, -0.4];
        let shifted: Vec<f32> = base.iter().map(|v| 3.0 * v + 5.0).collect();
        let t = Tensor::from_vec(shifted.clone(), &[5]).unwrap().layer_norm(1e-5);
        let x64: Vec<f64> = shifted.iter().map(|&v| v as f64).collect();
        let want = reference::layer_norm_rows(&x64, 5, 1e-5);
        for (a, b) in t.data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
        // scale+shift of the input changes layernorm output only marginally
        let orig = Tensor::from_vec(base.to_vec(), &[5]).unwrap().layer_norm(1e-5);
        for (a, b) in t.data().iter().zip(orig.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn backward_quadratic() {
        let p = Parameter::new("x", &[2], vec![1.0, 2.0]);
        let x = p.leaf();
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(p.grad(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let p = Parameter::new("x", &[2], vec![1.0, 2.0]);
        assert!(p.leaf().backward().is_err());
    }

    #[test]
    fn l2_normalize_gradient_orthogonal_to_input() {
        // loss = <x/||x||, c> with c parallel to x has zero directional
        // derivative along x, so grad(x) must be orthogonal to x.
        let p = Parameter::new("x", &[1, 2], vec![3.0, 4.0]);
        let c = Tensor::from_vec(vec![0.6, 0.8], &[1, 2]).unwrap();
        let loss = p.leaf().l2_normalize_rows().mul(&c).unwrap().sum_all();
        loss.backward().unwrap();
        let g = p.grad();
        let dot = g[0] * 3.0 + g[1] * 4.0;
        assert!(dot.abs() < 1e-6, "grad not orthogonal: {dot}");
    }

    #[test]
    fn shared_input_accumulates() {
        // y = sum(x*x) + sum(x) consumes x twice.
        let p = Parameter::new("x", &[2], vec![2.0, -3.0]);
        let x = p.leaf();
        let loss = x.mul(&x).unwrap().sum_all().add(&x.sum_all()).unwrap();
        loss.backward().unwrap();
        assert_eq!(p.grad(), vec![5.0, -5.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn elementwise_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cases: Vec<(
            &str,
            fn(&Tensor) -> Tensor,
            fn(&[f64]) -> Vec<f64>,
        )> = vec![
            ("relu", |t| t.relu(), reference::relu),
            ("gelu", |t| t.gelu(), reference::gelu),
            ("exp", |t| t.exp(), reference::exp),
        ];
        for (name, fa, fr) in cases {
            let rep = gradcheck::check_fn(
                name,
                &[&[3, 4]],
                &mut rng,
                10,
                |args| Ok(fa(&args[0]).sum_all()),
                |args| reference::sum_all(&fr(&args[0])),
            )
            .unwrap();
            assert!(rep.pass, "{name}: max_err={}", rep.max_err);
        }
    }

    #[test]
    fn matmul_softmax_layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rep = gradcheck::check_fn(
            "matmul+softmax+layernorm",
            &[&[3, 4], &[4, 5]],
            &mut rng,
            10,
            |args| {
                let y = args[0].matmul(&args[1])?.softmax().layer_norm(1e-5);
                Ok(y.mul(&y)?.sum_all())
            },
            |args| {
                let y = reference::matmul(&args[0], &args[1], 3, 4, 5);
                let y = reference::softmax_rows(&y, 5);
                let y = reference::layer_norm_rows(&y, 5, 1e-5);
                reference::sum_all(&reference::mul(&y, &y))
            },
        )
        .unwrap();
        assert!(rep.pass, "max_err={}", rep.max_err);
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_identity() {
        let p = Parameter::new("p", &[2], vec![1.5, -0.5]);
        p.accumulate_grad(&[0.0, 0.0]);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&[p.clone()], 0.1).unwrap();
        assert_eq!(p.value(), vec![1.5, -0.5]);
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        // bias correction makes the first step ~ lr * sign(g)
        let p = Parameter::new("p", &[1], vec![1.0]);
        p.accumulate_grad(&[1.0]);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&[p.clone()], 0.1).unwrap();
        assert!((p.value()[0] - 0.9).abs() < 1e-4, "{}", p.value()[0]);
    }

    #[test]
    fn adamw_decoupled_decay_with_zero_gradient() {
        let p = Parameter::new("p", &[1], vec![2.0]);
        p.accumulate_grad(&[0.0]);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        });
        opt.step(&[p.clone()], 0.5).unwrap();
        // p -= lr * wd * p
        assert!((p.value()[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-6);
    }

    #[test]
    fn adamw_lr_zero_is_identity() {
        let p = Parameter::new("p", &[2], vec![0.3, -0.8]);
        p.accumulate_grad(&[1.0, -2.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&[p.clone()], 0.0).unwrap();
        assert_eq!(p.value(), vec![0.3, -0.8]);
    }

    #[test]
    fn adamw_missing_grad_names_parameter() {
        let p = Parameter::new("encoder.w", &[1], vec![1.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step(&[p], 0.1).unwrap_err().to_string();
        assert!(err.contains("encoder.w"), "{err}");
    }

    #[test]
    fn concat_and_slice_roundtrip_with_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rep = gradcheck::check_fn(
            "slice+concat",
            &[&[2, 6]],
            &mut rng,
            5,
            |args| {
                let a = args[0].slice_cols(0, 3)?;
                let b = args[0].slice_cols(3, 6)?;
                let y = Tensor::concat(&[b, a], 1)?;
                Ok(y.mul(&y)?.sum_all())
            },
            |args| reference::sum_all(&reference::mul(&args[0], &args[0])),
        )
        .unwrap();
        assert!(rep.pass, "max_err={}", rep.max_err);
    }
}
