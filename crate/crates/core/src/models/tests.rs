use super::*;
use crate::numerics::gradcheck::{central_difference, relative_error, STEP};

fn rng() -> SeededRng {
    SeededRng::new(11)
}

fn rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = SeededRng::new(seed);
    (0..n).map(|_| (0..d).map(|_| r.normal()).collect()).collect()
}

fn refs(rows: &[Vec<f64>]) -> Vec<&[f64]> {
    rows.iter().map(Vec::as_slice).collect()
}

#[test]
fn names_round_trip() {
    for a in Architecture::ALL {
        assert_eq!(a.tag().parse::<Architecture>().unwrap(), a);
    }
    assert_eq!("HYBRID_CNN_GRU".parse::<Architecture>().unwrap(), Architecture::HybridCnnGru);
    assert!("transformer".parse::<Architecture>().is_err());
    assert_eq!(Architecture::Crnim.display_name(), "Ours(CRNIM)");
}

#[test]
fn output_width_is_e_for_any_d() {
    for a in Architecture::ALL {
        for d in [4, 5, 16, 31] {
            let m = EncoderModel::build(a, d, 8, &mut rng()).unwrap();
            let x = rows(3, d, 1);
            let z = m.embed_batch(&refs(&x)).unwrap();
            assert_eq!(z.len(), 3);
            assert!(z.iter().all(|v| v.len() == 8 && v.iter().all(|x| x.is_finite())), "{a} d={d}");
        }
    }
}

#[test]
fn wide_inputs_embed() {
    for a in [Architecture::SimpleCnn, Architecture::Abad, Architecture::Crnim] {
        let m = EncoderModel::build(a, 200, DEFAULT_EMBED_DIM, &mut rng()).unwrap();
        let z = m.embed(&rows(1, 200, 3)[0]).unwrap();
        assert_eq!(z.len(), DEFAULT_EMBED_DIM);
    }
}

#[test]
fn wrong_width_is_rejected() {
    let m = EncoderModel::build(Architecture::DeepCnn, 6, 4, &mut rng()).unwrap();
    let err = m.embed(&[1.0; 5]).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { .. }));
    assert!(EncoderModel::build(Architecture::DeepCnn, 1, 4, &mut rng()).is_err());
}

#[test]
fn build_is_deterministic_and_biases_zero() {
    for a in Architecture::ALL {
        let m1 = EncoderModel::build(a, 7, 4, &mut rng()).unwrap();
        let m2 = EncoderModel::build(a, 7, 4, &mut rng()).unwrap();
        assert_eq!(m1, m2);
        for (n, t) in m1.param_names().iter().zip(m1.params()) {
            if n.ends_with(".b") || n.ends_with(".bi") || n.ends_with(".bh") {
                assert!(t.values().iter().all(|&v| v == 0.0), "{n}");
            } else {
                assert!(t.values().iter().any(|&v| v != 0.0), "{n}");
            }
        }
    }
}

#[test]
fn batched_equals_single() {
    for a in Architecture::ALL {
        let m = EncoderModel::build(a, 9, 5, &mut rng()).unwrap();
        let x = rows(4, 9, 2);
        let batch = m.embed_batch(&refs(&x)).unwrap();
        for (r, z) in x.iter().zip(&batch) {
            let single = m.embed(r).unwrap();
            for (p, q) in single.iter().zip(z) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn normalized_embeddings_are_unit_length() {
    let m = EncoderModel::build(Architecture::Crnim, 8, 6, &mut rng()).unwrap();
    let x = rows(5, 8, 4);
    for z in m.embed_normalized_batch(&refs(&x)).unwrap() {
        let n: f64 = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
}

#[test]
fn parameter_counts() {
    // conv1 8*1*3+8, conv2 16*8*3+16, head 16*e+e
    assert_eq!(parameter_count(Architecture::SimpleCnn, 16, 32), 32 + 400 + 16 * 32 + 32);
    let deep = 32 + 400 + (32 * 16 * 3 + 32) + (32 * 32 * 3 + 32) + 32 * 32 + 32;
    assert_eq!(parameter_count(Architecture::DeepCnn, 16, 32), deep);
    let gru = 96 + 32 * 96 + 96 + 96;
    let crnim = deep - (32 * 32 + 32) + gru + (16 * 64 + 64) + (64 * 32 + 32);
    assert_eq!(parameter_count(Architecture::Crnim, 16, 32), crnim);
    let m = EncoderModel::build(Architecture::Crnim, 16, 32, &mut rng()).unwrap();
    assert_eq!(m.parameter_count(), crnim);
    assert!(
        parameter_count(Architecture::SimpleCnn, 16, 32) < parameter_count(Architecture::DeepCnn, 16, 32)
            && parameter_count(Architecture::DeepCnn, 16, 32) < crnim
    );
}

#[test]
fn reconstruction_error_examples() {
    assert_eq!(mean_squared_error(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
    assert_eq!(mean_squared_error(&[2.0, 2.0], &[2.0, 2.0]).unwrap(), 0.0);
    assert!(mean_squared_error(&[1.0], &[1.0, 2.0]).is_err());

    let abad = EncoderModel::build(Architecture::Abad, 6, 3, &mut rng()).unwrap();
    let x = rows(2, 6, 5);
    let r = abad.reconstruct(&x[0]).unwrap();
    let expected = mean_squared_error(&x[0], &r).unwrap();
    assert_eq!(abad.reconstruction_error(&x[0]).unwrap(), expected);
    assert_eq!(abad.reconstruction_error_batch(&refs(&x)).unwrap()[0], expected);

    let cnn = EncoderModel::build(Architecture::SimpleCnn, 6, 3, &mut rng()).unwrap();
    assert!(matches!(cnn.reconstruction_error(&x[0]), Err(Error::InvalidArgument(_))));
}

/// Sum of squared embedding entries over a small batch.
fn squared_norm_loss(m: &EncoderModel, x: &[Vec<f64>]) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let p = m.register(&mut g);
    let xin = g.input(Tensor::from_rows(x).unwrap());
    let z = m.forward(&mut g, &p, xin).unwrap();
    let sq = g.mul(z, z).unwrap();
    let s = g.sum(sq, 1).unwrap();
    let s = g.sum(s, 0).unwrap();
    let value = g.value(s).values()[0];
    let grads = g.backward(s).unwrap();
    (value, p.iter().map(|&v| grads.of(v)).collect())
}

#[test]
fn gradients_match_finite_differences() {
    for a in Architecture::ALL {
        let model = EncoderModel::build(a, 5, 3, &mut rng()).unwrap();
        let x = rows(2, 5, 6);
        let (_, grads) = squared_norm_loss(&model, &x);
        let mut worst: f64 = 0.0;
        for pi in 0..model.params().len() {
            // Biases start at zero where relu kinks can sit; spot check a few entries of each tensor.
            let n = model.params()[pi].len();
            for i in [0, n / 2, n - 1] {
                let mut values = model.params()[pi].values().to_vec();
                let numeric = central_difference(&mut values, i, STEP, |v| {
                    let mut m = model.clone();
                    m.params_mut()[pi].values_mut().copy_from_slice(v);
                    squared_norm_loss(&m, &x).0
                });
                worst = worst.max(relative_error(grads[pi].values()[i], numeric));
            }
        }
        assert!(worst < 1e-4, "{a}: worst relative error {worst}");
    }
}

#[test]
fn every_parameter_receives_gradient() {
    for a in Architecture::ALL {
        let model = EncoderModel::build(a, 6, 4, &mut rng()).unwrap();
        let x = rows(4, 6, 8);
        let mut g = Graph::new();
        let p = model.register(&mut g);
        let xin = g.input(Tensor::from_rows(&x).unwrap());
        let out = if a == Architecture::Abad {
            model.reconstruct_graph(&mut g, &p, xin).unwrap()
        } else {
            model.forward(&mut g, &p, xin).unwrap()
        };
        let sq = g.mul(out, out).unwrap();
        let s = g.sum(sq, 1).unwrap();
        let s = g.sum(s, 0).unwrap();
        let grads = g.backward(s).unwrap();
        for (name, v) in model.param_names().iter().zip(&p) {
            let gt = grads.of(*v);
            assert!(gt.values().iter().any(|&x| x != 0.0), "{a}: {name} has zero gradient");
        }
    }
}

#[test]
fn save_load_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    for a in Architecture::ALL {
        let m = EncoderModel::build(a, 7, 4, &mut rng()).unwrap();
        let path = dir.path().join(format!("{a}.json"));
        m.save(&path).unwrap();
        let back = EncoderModel::load(&path).unwrap();
        assert_eq!(back, m);
        let x = rows(2, 7, 9);
        assert_eq!(back.embed_batch(&refs(&x)).unwrap(), m.embed_batch(&refs(&x)).unwrap());
    }
}

#[test]
fn load_rejects_mismatched_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    EncoderModel::build(Architecture::SimpleCnn, 7, 4, &mut rng()).unwrap().save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("\"simple-cnn\"", "\"deep-cnn\"")).unwrap();
    assert!(matches!(EncoderModel::load(&path), Err(Error::Format(_))));
    std::fs::write(&path, text.replace("\"format_version\":1", "\"format_version\":9")).unwrap();
    assert!(matches!(EncoderModel::load(&path), Err(Error::Format(_))));
}

#[test]
fn zero_input_gives_finite_output() {
    for a in Architecture::ALL {
        let m = EncoderModel::build(a, 12, 6, &mut rng()).unwrap();
        let z = m.embed(&[0.0; 12]).unwrap();
        assert!(z.iter().all(|v| v.is_finite()), "{a}");
        let n = m.embed_normalized_batch(&[&[0.0; 12][..]]).unwrap();
        assert!(n[0].iter().all(|v| v.is_finite()), "{a}");
    }
}

#[test]
fn abad_reconstructs_input_shape() {
    let m = EncoderModel::build(Architecture::Abad, 10, DEFAULT_EMBED_DIM, &mut rng()).unwrap();
    assert_eq!(m.reconstruct(&rows(1, 10, 12)[0]).unwrap().len(), 10);
}

#[test]
fn identical_inputs_give_identical_embeddings() {
    let m = EncoderModel::build(Architecture::CnnLstm, 8, 4, &mut rng()).unwrap();
    let x = rows(1, 8, 13).remove(0);
    assert_eq!(m.embed(&x).unwrap(), m.embed(&x.clone()).unwrap());
}
