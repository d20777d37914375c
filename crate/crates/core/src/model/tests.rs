use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::Rng as _;

use super::*;

fn doc(tokens: &[(usize, u32)], labels: &[usize]) -> Document {
    Document {
        id: String::new(),
        timestamp: 0,
        token_counts: tokens.iter().copied().collect(),
        labels: labels.iter().copied().collect::<BTreeSet<_>>(),
    }
}

fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 7,
        embed_dim: 4,
        hidden_dim: 5,
        n_labels: 3,
        use_label_attention: true,
        nonlinearity: Nonlinearity::Tanh,
        seed,
    }
}

fn batch() -> Vec<Document> {
    vec![
        doc(&[(0, 2), (3, 1), (5, 4)], &[0, 2]),
        doc(&[(1, 1), (6, 3)], &[1]),
        doc(&[(2, 1), (3, 2), (4, 1), (6, 1)], &[]),
    ]
}

/// Randomizes every tensor, including zero-initialized ones, so that no
/// gradient path is trivially zero.
fn randomize(model: &mut ModelState, seed: u64) {
    let mut rng = rng::seeded(seed);
    for (_, p) in model.params_mut().iter_mut() {
        for x in p.tensor.data_mut() {
            *x = rng.gen_range(-0.8..0.8);
        }
    }
}

fn loss_of(model: &ModelState, docs: &[Document]) -> f64 {
    let (logits, _) = model.forward(docs).unwrap();
    let targets = targets_matrix(docs, model.config().n_labels);
    bce_loss(&logits, &targets).unwrap().0
}

/// Central differences over every trainable coordinate.
fn assert_gradients_match(model: &ModelState, docs: &[Document]) {
    let (logits, cache) = model.forward(docs).unwrap();
    let targets = targets_matrix(docs, model.config().n_labels);
    let (_, dz) = bce_loss(&logits, &targets).unwrap();
    let grads = model.backward(&cache, &dz).unwrap();
    let eps = 1e-4;
    let names: Vec<String> = model.params().names().map(String::from).collect();
    for name in names {
        let p = model.params().get(&name).unwrap();
        let g = grads.tensor(&name).unwrap();
        if !p.trainable {
            assert!(g.data().iter().all(|&x| x == 0.0), "{name} frozen but has gradient");
            continue;
        }
        for i in 0..p.tensor.len() {
            let mut plus = model.clone();
            plus.params_mut().tensor_mut(&name).unwrap().data_mut()[i] += eps;
            let mut minus = model.clone();
            minus.params_mut().tensor_mut(&name).unwrap().data_mut()[i] -= eps;
            let numeric = (loss_of(&plus, docs) - loss_of(&minus, docs)) / (2.0 * eps);
            let analytic = g.data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                rel < 1e-3,
                "{name}[{i}]: analytic {analytic} numeric {numeric}"
            );
        }
    }
}

#[test]
fn init_is_deterministic_with_zero_biases() {
    let a = init_model(&small_config(3)).unwrap();
    let b = init_model(&small_config(3)).unwrap();
    assert_eq!(a, b);
    let c = init_model(&small_config(4)).unwrap();
    assert_ne!(a.params(), c.params());
    for name in [B1, B_OUT] {
        assert!(a.params().tensor(name).unwrap().data().iter().all(|&x| x == 0.0));
    }
    let mut bad = small_config(0);
    bad.hidden_dim = 0;
    assert!(init_model(&bad).is_err());
}

#[test]
fn unit_model_forwards() {
    let config = ModelConfig {
        vocab_size: 2,
        embed_dim: 1,
        hidden_dim: 1,
        n_labels: 1,
        ..small_config(1)
    };
    let model = init_model(&config).unwrap();
    let (logits, _) = model.forward(&[doc(&[(1, 3)], &[0])]).unwrap();
    assert_eq!(logits.shape(), &[1, 1]);
    assert!(logits.data()[0].is_finite());
}

#[test]
fn single_token_gets_full_attention() {
    let model = init_model(&small_config(2)).unwrap();
    let (_, cache) = model.forward(&[doc(&[(4, 3)], &[0])]).unwrap();
    for l in 0..3 {
        assert_eq!(cache.attention(0, l), &[1.0]);
    }
}

#[test]
fn zero_head_gives_zero_logits() {
    let mut model = init_model(&small_config(2)).unwrap();
    model.params_mut().tensor_mut(W_OUT).unwrap().fill(0.0);
    let (logits, _) = model.forward(&batch()).unwrap();
    assert!(logits.data().iter().all(|&z| z == 0.0));
}

#[test]
fn token_count_equals_repetition() {
    let mut model = init_model(&small_config(5)).unwrap();
    randomize(&mut model, 9);
    let counted = vec![vec![(2, 2.0), (5, 1.0)]];
    let repeated = vec![vec![(2, 1.0), (5, 1.0), (2, 1.0)]];
    let (a, _) = model.forward_entries(&counted).unwrap();
    let (b, _) = model.forward_entries(&repeated).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

#[test]
fn out_of_range_token_rejected() {
    let model = init_model(&small_config(0)).unwrap();
    assert!(matches!(
        model.forward(&[doc(&[(7, 1)], &[])]),
        Err(Error::IdOutOfRange { kind: "token", .. })
    ));
}

#[test]
fn bce_values() {
    let z = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
    let y = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
    let (loss, grad) = bce_loss(&z, &y).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(grad.data(), &[-0.25, 0.25]);

    let z = Tensor::from_vec(&[1, 1], vec![30.0]).unwrap();
    let y = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
    assert!(bce_loss(&z, &y).unwrap().0 < 1e-12);

    let z = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
    let y = Tensor::from_vec(&[1, 1], vec![0.0]).unwrap();
    let direct = (1.0 + 1f64.exp()).ln();
    let loss = bce_loss(&z, &y).unwrap().0;
    assert!((loss - direct).abs() < 1e-15);
    assert!((loss - 1.3133).abs() < 1e-4);

    let huge = Tensor::from_vec(&[1, 2], vec![-800.0, 800.0]).unwrap();
    let y = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
    assert!((bce_loss(&huge, &y).unwrap().0 - 800.0).abs() < 1e-9);
    assert!(bce_loss(&huge, &Tensor::zeros(&[2, 1])).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..4 {
        let mut model = init_model(&small_config(seed)).unwrap();
        randomize(&mut model, 100 + seed);
        assert_gradients_match(&model, &batch());
    }
}

#[test]
fn gradients_without_label_attention() {
    let config = ModelConfig {
        use_label_attention: false,
        ..small_config(1)
    };
    let mut model = init_model(&config).unwrap();
    randomize(&mut model, 5);
    assert_gradients_match(&model, &batch());
}

#[test]
fn gradients_with_relu() {
    let config = ModelConfig {
        nonlinearity: Nonlinearity::Relu,
        ..small_config(1)
    };
    let mut model = init_model(&config).unwrap();
    randomize(&mut model, 6);
    assert_gradients_match(&model, &batch());
}

#[test]
fn gradients_through_lora() {
    let base = init_model(&small_config(8)).unwrap();
    let mut model = attach_lora(&base, &[W1, W_OUT, EMBEDDING], 2, 4.0).unwrap();
    randomize(&mut model, 7);
    assert_gradients_match(&model, &batch());
}

#[test]
fn gradients_through_adapter() {
    let base = init_model(&small_config(8)).unwrap();
    let mut model = attach_adapter(&base, 2).unwrap();
    randomize(&mut model, 8);
    assert_gradients_match(&model, &batch());
}

#[test]
fn feature_gradient_matches_finite_differences() {
    let mut model = init_model(&small_config(4)).unwrap();
    randomize(&mut model, 44);
    let docs = batch();
    let probe = |m: &ModelState| -> f64 {
        let (_, cache) = m.forward(&docs).unwrap();
        let f = extract_features(&cache);
        f.data().iter().enumerate().map(|(i, x)| (i as f64 * 0.37).sin() * x).sum()
    };
    let (_, cache) = model.forward(&docs).unwrap();
    let feats = extract_features(&cache);
    let dfeat = Tensor::from_vec(
        feats.shape(),
        (0..feats.len()).map(|i| (i as f64 * 0.37).sin()).collect(),
    )
    .unwrap();
    let zero = Tensor::zeros(&[3, 3]);
    let grads = model
        .backward_with_features(&cache, &zero, Some(&dfeat))
        .unwrap();
    let eps = 1e-5;
    for name in [W1, QUERY, EMBEDDING] {
        for i in 0..model.params().tensor(name).unwrap().len() {
            let mut plus = model.clone();
            plus.params_mut().tensor_mut(name).unwrap().data_mut()[i] += eps;
            let mut minus = model.clone();
            minus.params_mut().tensor_mut(name).unwrap().data_mut()[i] -= eps;
            let numeric = (probe(&plus) - probe(&minus)) / (2.0 * eps);
            let analytic = grads.tensor(name).unwrap().data()[i];
            assert!((analytic - numeric).abs() <= 1e-3 * analytic.abs().max(numeric.abs()).max(1e-6));
        }
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let model = init_model(&small_config(1)).unwrap();
    let (_, cache) = model.forward(&batch()).unwrap();
    let grads = model.backward(&cache, &Tensor::zeros(&[3, 3])).unwrap();
    for (_, p) in grads.iter() {
        assert!(p.tensor.data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn stale_cache_rejected() {
    let mut model = init_model(&small_config(1)).unwrap();
    let (_, cache) = model.forward(&batch()).unwrap();
    model.params_mut().tensor_mut(B1).unwrap().data_mut()[0] = 0.5;
    assert!(matches!(
        model.backward(&cache, &Tensor::zeros(&[3, 3])),
        Err(Error::StaleCache { .. })
    ));
    assert!(model.backward(&cache, &Tensor::zeros(&[2, 3])).is_err());
}

#[test]
fn lora_attach_contract() {
    let config = ModelConfig {
        embed_dim: 10,
        hidden_dim: 12,
        n_labels: 9,
        vocab_size: 20,
        ..small_config(3)
    };
    let base = init_model(&config).unwrap();
    let docs = vec![doc(&[(1, 2), (13, 1)], &[0]), doc(&[(19, 1)], &[4])];
    let (before, _) = base.forward(&docs).unwrap();
    let model = attach_lora(&base, &[W1], 8, 16.0).unwrap();
    assert_eq!(model.lora().unwrap().scale(), 2.0);
    assert_eq!(model.trainable_count(), 8 * (10 + 12));
    let (after, cache) = model.forward(&docs).unwrap();
    for (x, y) in before.data().iter().zip(after.data()) {
        assert!((x - y).abs() <= 1e-12);
    }
    let dz = Tensor::from_vec(&[2, 9], vec![0.1; 18]).unwrap();
    let grads = model.backward(&cache, &dz).unwrap();
    assert!(grads.tensor(EMBEDDING).unwrap().data().iter().all(|&x| x == 0.0));
    assert!(attach_lora(&base, &[W_OUT], 10, 16.0).is_err());
    assert!(attach_lora(&base, &[B1], 1, 1.0).is_err());
    assert!(attach_lora(&base, &[W1], 0, 1.0).is_err());
}

#[test]
fn adapter_attach_contract() {
    assert_eq!(adapter_bottleneck(64, 16), 4);
    assert_eq!(adapter_bottleneck(8, 16), 1);
    let base = init_model(&small_config(2)).unwrap();
    let (before, _) = base.forward(&batch()).unwrap();
    let model = attach_adapter(&base, 16).unwrap();
    assert_eq!(model.adapter().unwrap().bottleneck, 1);
    let (after, _) = model.forward(&batch()).unwrap();
    for (x, y) in before.data().iter().zip(after.data()) {
        assert!((x - y).abs() <= 1e-12);
    }
    let trainable: Vec<&str> = model
        .params()
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n)
        .collect();
    assert_eq!(
        trainable,
        vec![ADAPTER_DOWN, ADAPTER_DOWN_BIAS, ADAPTER_UP, ADAPTER_UP_BIAS]
    );
    assert!(attach_adapter(&base, 0).is_err());
}

#[test]
fn features_are_mean_label_representations() {
    let config = ModelConfig {
        n_labels: 1,
        ..small_config(3)
    };
    let model = init_model(&config).unwrap();
    let docs = vec![doc(&[(1, 1), (2, 2)], &[0]), doc(&[(1, 1), (2, 2)], &[0])];
    let (_, cache) = model.forward(&docs).unwrap();
    let f = extract_features(&cache);
    assert_eq!(f.shape(), &[2, 5]);
    assert_eq!(f.row(0), cache.label_representation(0, 0));
    assert_eq!(f.row(0), f.row(1));

    let wide = init_model(&small_config(3)).unwrap();
    let (_, cache) = wide.forward(&docs).unwrap();
    assert_eq!(extract_features(&cache).shape(), &[2, 5]);
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let base = init_model(&small_config(6)).unwrap();
    let mut model = attach_adapter(&attach_lora(&base, &[W1], 2, 16.0).unwrap(), 2).unwrap();
    randomize(&mut model, 3);
    let mut buf = Vec::new();
    write_checkpoint(&model, &mut buf).unwrap();
    let loaded = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(loaded.config(), model.config());
    assert_eq!(loaded.lora(), model.lora());
    assert_eq!(loaded.adapter(), model.adapter());
    for ((na, pa), (nb, pb)) in model.params().iter().zip(loaded.params().iter()) {
        assert_eq!(na, nb);
        assert_eq!(pa.trainable, pb.trainable);
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&pa.tensor), bits(&pb.tensor));
    }
    let mut again = Vec::new();
    write_checkpoint(&loaded, &mut again).unwrap();
    assert_eq!(buf, again);

    buf[0] = b'X';
    assert!(read_checkpoint(buf.as_slice()).is_err());
}

proptest! {
    #[test]
    fn attention_is_normalized(
        seed in 0u64..1000,
        entries in proptest::collection::btree_map(0usize..7, 1u32..5, 1..6),
    ) {
        let model = init_model(&small_config(seed)).unwrap();
        let d = Document {
            id: String::new(),
            timestamp: 0,
            token_counts: entries,
            labels: BTreeSet::new(),
        };
        let (_, cache) = model.forward(&[d]).unwrap();
        for l in 0..3 {
            let a = cache.attention(0, l);
            prop_assert!(a.iter().all(|&x| x >= 0.0));
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn bce_is_convex_in_logits(
        z1 in proptest::collection::vec(-20.0f64..20.0, 6),
        z2 in proptest::collection::vec(-20.0f64..20.0, 6),
        y in proptest::collection::vec(0u8..2, 6),
    ) {
        let y = Tensor::from_vec(&[2, 3], y.iter().map(|&v| v as f64).collect()).unwrap();
        let a = Tensor::from_vec(&[2, 3], z1.clone()).unwrap();
        let b = Tensor::from_vec(&[2, 3], z2.clone()).unwrap();
        let mid = Tensor::from_vec(&[2, 3], z1.iter().zip(&z2).map(|(p, q)| (p + q) / 2.0).collect()).unwrap();
        let la = bce_loss(&a, &y).unwrap().0;
        let lb = bce_loss(&b, &y).unwrap().0;
        let lm = bce_loss(&mid, &y).unwrap().0;
        prop_assert!(lm <= (la + lb) / 2.0 + 1e-12);
    }
}

#[test]
fn targets_matrix_marks_labels() {
    let t = targets_matrix(&batch(), 3);
    assert_eq!(t.data(), &[1., 0., 1., 0., 1., 0., 0., 0., 0.]);
}
