//! Encoder, conditioned predictor, target-network updates, checkpoints.

pub mod checkpoint;
pub mod ema;
pub mod encoder;
pub mod predictor;
pub mod reference;

pub use checkpoint::{Checkpoint, NamedTensor};
pub use ema::{copy_params, ema_update, EmaSchedule};
pub use encoder::{normal_init, pool, pos_embed_2d, Encoder, EncoderConfig};
pub use predictor::{FilmPredictor, PredictorConfig};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::PatchSequence;
    use crate::ndgrad::{gradcheck, reference as r64, ParamSet, Parameter, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            patch_dim: 6,
            max_patches: 16,
        }
    }

    fn rand_seq(rng: &mut ChaCha8Rng, nf: usize, nt: usize, patch_dim: usize) -> PatchSequence {
        PatchSequence {
            patches: (0..nf * nt * patch_dim)
                .map(|_| rng.gen_range(-1.0f32..1.0))
                .collect(),
            n_freq_patches: nf,
            n_time_patches: nt,
        }
    }

    #[test]
    fn tiny_encoder_shape_and_finiteness() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(tiny_cfg(), "encoder", &mut rng).unwrap();
        let seq = rand_seq(&mut rng, 2, 2, 6);
        let z = enc.encode(&seq).unwrap();
        assert_eq!(z.shape(), &[4, 8]);
        assert!(z.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encoder_sensitive_to_first_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = Encoder::new(tiny_cfg(), "encoder", &mut rng).unwrap();
        let seq = rand_seq(&mut rng, 2, 2, 6);
        let mut seq2 = seq.clone();
        seq2.patches[0] += 1.0;
        let a = enc.encode(&seq).unwrap();
        let b = enc.encode(&seq2).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn zero_depth_encoder_matches_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = EncoderConfig {
            depth: 0,
            ..tiny_cfg()
        };
        let enc = Encoder::new(cfg, "encoder", &mut rng).unwrap();
        let seq = rand_seq(&mut rng, 1, 2, 6);
        let got = enc.encode(&seq).unwrap();
        let p = reference::param_map(enc.params());
        let x64: Vec<f64> = seq.patches.iter().map(|&v| v as f64).collect();
        let want = reference::encoder_forward(&cfg, "encoder", &p, &x64, 1, 2);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn encoder_matches_reference_with_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = Encoder::new(tiny_cfg(), "encoder", &mut rng).unwrap();
        let seq = rand_seq(&mut rng, 2, 2, 6);
        let got = enc.encode(&seq).unwrap();
        let p = reference::param_map(enc.params());
        let x64: Vec<f64> = seq.patches.iter().map(|&v| v as f64).collect();
        let want = reference::encoder_forward(&tiny_cfg(), "encoder", &p, &x64, 2, 2);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn pool_examples() {
        let v = Tensor::from_vec(vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0], &[3, 2]).unwrap();
        assert_eq!(pool(&v).unwrap().data(), &[1.0, 2.0]);
        let pm = Tensor::from_vec(vec![3.0, -1.0, -3.0, 1.0], &[2, 2]).unwrap();
        assert_eq!(pool(&pm).unwrap().data(), &[0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let t = Tensor::from_vec(data.clone(), &[3, 4]).unwrap();
        let x64: Vec<f64> = data.iter().map(|&v| v as f64).collect();
        let want = r64::mean_axis0(&x64, 3, 4);
        for (a, b) in pool(&t).unwrap().data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    fn tiny_pred_cfg() -> PredictorConfig {
        PredictorConfig {
            layers: 3,
            hidden: 5,
            embed_dim: 4,
            cond_dim: 3,
        }
    }

    #[test]
    fn film_identity_at_init_matches_plain_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pred = FilmPredictor::new(tiny_pred_cfg(), "predictor", &mut rng).unwrap();
        let z = Tensor::from_vec(
            (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            &[2, 4],
        )
        .unwrap();
        let c1 = Tensor::from_vec(vec![0.3, -0.7, 0.1], &[3]).unwrap();
        let c2 = Tensor::from_vec(vec![-0.9, 0.2, 0.8], &[3]).unwrap();
        // at init gamma=1, beta=0 regardless of c: output independent of c
        let y1 = pred.predict(&z, &c1).unwrap();
        let y2 = pred.predict(&z, &c2).unwrap();
        assert_eq!(y1.data(), y2.data());
        // and equal to the unconditioned ReLU MLP with the same weights
        let p = reference::param_map(pred.params());
        let z64: Vec<f64> = z.data().iter().map(|&v| v as f64).collect();
        let mut h = z64;
        let mut width = 4;
        for i in 0..2 {
            h = r64::add(
                &r64::matmul(&h, &p[&format!("predictor.layer{i}.w")], 2, width, 5),
                &p[&format!("predictor.layer{i}.b")],
            );
            h = r64::relu(&h);
            width = 5;
        }
        let want = r64::add(
            &r64::matmul(&h, &p["predictor.layer2.w"], 2, 5, 4),
            &p["predictor.layer2.b"],
        );
        for (a, b) in y1.data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn film_gamma_zero_makes_output_constant_across_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pred = FilmPredictor::new(tiny_pred_cfg(), "predictor", &mut rng).unwrap();
        for i in 0..2 {
            pred.params()
                .get(&format!("predictor.film{i}.gamma.b"))
                .unwrap()
                .set_value(vec![0.0; 5]);
        }
        let z = Tensor::from_vec(
            (0..12).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            &[3, 4],
        )
        .unwrap();
        let c = Tensor::from_vec(vec![0.5, 0.5, 0.5], &[3]).unwrap();
        let y = pred.predict(&z, &c).unwrap();
        let row0 = &y.data()[0..4];
        for r in 1..3 {
            assert_eq!(&y.data()[r * 4..(r + 1) * 4], row0);
        }
    }

    #[test]
    fn film_hand_instance_matches_oracle() {
        let cfg = PredictorConfig {
            layers: 2,
            hidden: 2,
            embed_dim: 2,
            cond_dim: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pred = FilmPredictor::new(cfg, "predictor", &mut rng).unwrap();
        // give the film maps real values so conditioning matters
        for p in pred.params().iter() {
            let data: Vec<f32> = (0..p.numel()).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            p.set_value(data);
        }
        let z = Tensor::from_vec(vec![0.4, -0.2, 1.0, 0.3], &[2, 2]).unwrap();
        let c = Tensor::from_vec(vec![0.9], &[1]).unwrap();
        let got = pred.predict(&z, &c).unwrap();
        let p = reference::param_map(pred.params());
        let want = reference::predictor_forward(
            &cfg,
            "predictor",
            &p,
            &[0.4, -0.2, 1.0, 0.3],
            &[0.9],
            2,
        );
        for (a, b) in got.data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn predict_is_per_patch_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pred = FilmPredictor::new(tiny_pred_cfg(), "predictor", &mut rng).unwrap();
        let rows: Vec<Vec<f32>> = (0..3)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let c = Tensor::from_vec(vec![0.2, -0.4, 0.6], &[3]).unwrap();
        let z = Tensor::from_vec(rows.concat(), &[3, 4]).unwrap();
        let perm = [2usize, 0, 1];
        let zp = Tensor::from_vec(
            perm.iter().flat_map(|&i| rows[i].clone()).collect(),
            &[3, 4],
        )
        .unwrap();
        let y = pred.predict(&z, &c).unwrap();
        let yp = pred.predict(&zp, &c).unwrap();
        for (out_row, &in_row) in perm.iter().enumerate() {
            assert_eq!(
                &yp.data()[out_row * 4..(out_row + 1) * 4],
                &y.data()[in_row * 4..(in_row + 1) * 4]
            );
        }
    }

    #[test]
    fn ema_rate_is_linear() {
        let s = EmaSchedule {
            tau_start: 0.9,
            tau_end: 1.0,
            total_steps: 10,
        };
        assert_eq!(s.rate(0), 0.9);
        assert_eq!(s.rate(10), 1.0);
        assert!((s.rate(5) - 0.95).abs() < 1e-7);
    }

    fn param_pair() -> (ParamSet, ParamSet) {
        let mut a = ParamSet::new();
        let mut b = ParamSet::new();
        a.register(Parameter::new("w", &[2], vec![2.0, 2.0])).unwrap();
        b.register(Parameter::new("w", &[2], vec![4.0, 4.0])).unwrap();
        (a, b)
    }

    #[test]
    fn ema_update_examples() {
        let (target, source) = param_pair();
        ema_update(&target, &source, 1.0).unwrap();
        assert_eq!(target.get("w").unwrap().value(), vec![2.0, 2.0]);
        ema_update(&target, &source, 0.5).unwrap();
        assert_eq!(target.get("w").unwrap().value(), vec![3.0, 3.0]);
        ema_update(&target, &source, 0.0).unwrap();
        assert_eq!(target.get("w").unwrap().value(), vec![4.0, 4.0]);
    }

    #[test]
    fn ema_name_mismatch_rejected() {
        let mut a = ParamSet::new();
        let mut b = ParamSet::new();
        a.register(Parameter::new("w1", &[1], vec![0.0])).unwrap();
        b.register(Parameter::new("w2", &[1], vec![0.0])).unwrap();
        assert!(ema_update(&a, &b, 0.5).is_err());
    }

    #[test]
    fn ema_convexity_preserves_norm_bound() {
        let (target, source) = param_pair();
        let n0 = 8.0f32.sqrt();
        let n1 = 32.0f32.sqrt();
        ema_update(&target, &source, 0.3).unwrap();
        let v = target.get("w").unwrap().value();
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        assert!(n <= n0.max(n1) + 1e-6);
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = Checkpoint {
            config_digest: [7u8; 32],
            phase: 2,
            step: 123,
            tensors: vec![
                ("a.w".into(), vec![2, 3], vec![1.0, -2.0, 3.0, 4.0, 5.5, -0.25]),
                ("a.b".into(), vec![3], vec![0.0, 1.0, 2.0]),
            ],
            opt_step: 10,
            opt: Some(vec![("m.a.w".into(), vec![6], vec![0.1; 6])]),
            ema: Some(vec![("a.w".into(), vec![2, 3], vec![0.5; 6])]),
        };
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.step, 123);
        assert_eq!(loaded.phase, 2);
        assert_eq!(loaded.tensors, ckpt.tensors);
        assert_eq!(loaded.opt, ckpt.opt);
        assert_eq!(loaded.ema, ckpt.ema);

        // save -> load -> save is byte identical
        let path2 = dir.path().join("m2.ckpt");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        // flipped magic
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path2, &bytes).unwrap();
        assert!(Checkpoint::load(&path2).unwrap_err().to_string().contains("magic"));

        // payload tamper breaks the table checksum
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 40] ^= 0x01;
        std::fs::write(&path2, &bytes).unwrap();
        assert!(Checkpoint::load(&path2)
            .unwrap_err()
            .to_string()
            .contains("checksum"));

        // truncation
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path2, &bytes[..n - 10]).unwrap();
        assert!(Checkpoint::load(&path2)
            .unwrap_err()
            .to_string()
            .contains("truncated"));
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = EncoderConfig {
            embed_dim: 4,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            patch_dim: 3,
            max_patches: 4,
        };
        let enc = Encoder::new(cfg, "encoder", &mut rng).unwrap();
        let seq = rand_seq(&mut rng, 1, 2, 3);
        let x64: Vec<f64> = seq.patches.iter().map(|&v| v as f64).collect();
        let params: Vec<_> = enc.params().iter().cloned().collect();
        let rep = gradcheck::check_params(
            "encoder",
            &params,
            &mut rng,
            3,
            0.5,
            || {
                let z = enc.encode(&seq)?;
                Ok(z.mul(&z)?.sum_all())
            },
            |vals| {
                let y = reference::encoder_forward(&cfg, "encoder", vals, &x64, 1, 2);
                r64::sum_all(&r64::mul(&y, &y))
            },
        )
        .unwrap();
        assert!(rep.pass, "max_err={}", rep.max_err);
    }

    #[test]
    fn predictor_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = tiny_pred_cfg();
        let pred = FilmPredictor::new(cfg, "predictor", &mut rng).unwrap();
        let z: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let c: Vec<f32> = (0..3).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let z64: Vec<f64> = z.iter().map(|&v| v as f64).collect();
        let c64: Vec<f64> = c.iter().map(|&v| v as f64).collect();
        let zt = Tensor::from_vec(z, &[2, 4]).unwrap();
        let ct = Tensor::from_vec(c, &[3]).unwrap();
        let params: Vec<_> = pred.params().iter().cloned().collect();
        let rep = gradcheck::check_params(
            "predictor",
            &params,
            &mut rng,
            5,
            0.5,
            || {
                let y = pred.predict(&zt, &ct)?;
                Ok(y.mul(&y)?.sum_all())
            },
            |vals| {
                let y = reference::predictor_forward(&cfg, "predictor", vals, &z64, &c64, 2);
                r64::sum_all(&r64::mul(&y, &y))
            },
        )
        .unwrap();
        assert!(rep.pass, "max_err={}", rep.max_err);
    }
}
