use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use moegan_core::checkpoint::Checkpoint;
use moegan_core::evaluation::{bleu, nll_gen, BleuReference};
use moegan_core::generator::{gumbel_from_uniform, gumbel_max, gumbel_softmax_values, GeneratorConfig, GeneratorParams, TokenSequence};
use moegan_core::objectives::{discriminator_loss, fsa_from_features, mle_loss};
use moegan_core::params::Parameters;
use moegan_core::tensor::{Tape, Tensor};
use moegan_core::training::{clip_global_norm, global_norm, Adam, GradMap};

fn distribution(weights: &[f64]) -> Vec<f64> {
    let s: f64 = weights.iter().sum();
    weights.iter().map(|w| w / s).collect()
}

fn weights(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n)
}

fn sentence(min: usize, max: usize) -> impl Strategy<Value = TokenSequence> {
    prop::collection::vec(0usize..6, min..max).prop_map(TokenSequence)
}

struct Flat(Tensor<f64>);
impl Parameters<f64> for Flat {
    fn named(&self) -> Vec<(String, &Tensor<f64>)> {
        vec![("x".into(), &self.0)]
    }
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
        vec![("x".into(), &mut self.0)]
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(logits in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_f64(&[1, logits.len()], &logits).unwrap());
        let p = tape.softmax(x).unwrap();
        let d = tape.value(p).data();
        prop_assert!(d.iter().all(|&v| v >= 0.0));
        prop_assert!((d.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gumbel_softmax_is_a_distribution_with_the_gumbel_max_argmax(
        w in weights(2..10),
        u in prop::collection::vec(1e-9f64..1.0, 10),
        tau in 1e-3f64..100.0,
    ) {
        let pi = distribution(&w);
        let g: Vec<f64> = u[..pi.len()].iter().map(|&u| gumbel_from_uniform(u)).collect();
        let y = gumbel_softmax_values(&pi, &g, tau).unwrap();
        prop_assert!(y.iter().all(|&v| v >= 0.0));
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let soft_arg = y
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > y[best] { i } else { best });
        prop_assert_eq!(soft_arg, gumbel_max(&pi, &g));
    }

    #[test]
    fn discriminator_loss_is_positive_and_decreasing(
        gaps in prop::collection::vec(-20.0f64..20.0, 1..8),
        j in 0usize..8,
        step in 0.0f64..5.0,
    ) {
        let j = j % gaps.len();
        let loss = |d: &[f64]| {
            let mut tape = Tape::<f64>::new();
            let v = tape.constant(Tensor::vector(d.to_vec()));
            let l = discriminator_loss(&mut tape, v).unwrap();
            tape.value(l).data()[0]
        };
        let before = loss(&gaps);
        let mut raised = gaps.clone();
        raised[j] += step;
        prop_assert!(before > 0.0);
        prop_assert!(loss(&raised) <= before);
    }

    #[test]
    fn fsa_is_non_negative_and_zero_for_equal_centroids(
        a in prop::collection::vec(-3.0f64..3.0, 12),
        shift in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        let mut tape = Tape::<f64>::new();
        let real = tape.constant(Tensor::new(vec![3, 4], a.clone()).unwrap());
        // Reversing the rows keeps the centroid.
        let rev: Vec<f64> = a.chunks(4).rev().flatten().copied().collect();
        let same = tape.constant(Tensor::new(vec![3, 4], rev).unwrap());
        let shifted: Vec<f64> = a.iter().enumerate().map(|(i, v)| v + shift[i % 4]).collect();
        let other = tape.constant(Tensor::new(vec![3, 4], shifted).unwrap());
        let zero = fsa_from_features(&mut tape, real, same).unwrap();
        let d = fsa_from_features(&mut tape, real, other).unwrap();
        prop_assert!(tape.value(zero).data()[0] < 1e-12);
        let expect = shift.iter().map(|s| s * s).sum::<f64>().sqrt();
        prop_assert!((tape.value(d).data()[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn clipped_norm_never_exceeds_the_threshold(
        values in prop::collection::vec(-1e4f64..1e4, 1..20),
        split in 0usize..20,
    ) {
        let split = split % values.len();
        let mut grads: GradMap<f64> = BTreeMap::new();
        grads.insert("a".into(), Tensor::vector(values[..split].to_vec()));
        grads.insert("b".into(), Tensor::vector(values[split..].to_vec()));
        let original = grads.clone();
        let norm = clip_global_norm(&mut grads, 5.0);
        prop_assert!(global_norm(&grads) <= 5.0 + 1e-6);
        if norm <= 5.0 {
            prop_assert_eq!(grads, original);
        }
    }

    #[test]
    fn adam_first_step_is_lr_times_normalized_gradient(
        g in prop::collection::vec(-10.0f64..10.0, 1..10),
        lr in 0.0f64..0.1,
    ) {
        let mut p = Flat(Tensor::zeros(&[g.len()]));
        let grads = BTreeMap::from([("x".to_string(), Tensor::vector(g.clone()))]);
        Adam::new().step(&mut p, &grads, lr).unwrap();
        for (w, gi) in p.0.data().iter().zip(&g) {
            prop_assert!((w + lr * gi / (gi.abs() + 1e-8)).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_linear(
        x in prop::collection::vec(-2.0f64..2.0, 6),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let grad = |ca: f64, cb: f64| {
            let mut tape = Tape::<f64>::new();
            let v = tape.leaf(Tensor::new(vec![2, 3], x.clone()).unwrap());
            let t = tape.tanh(v);
            let l1 = tape.sum(t);
            let sm = tape.log_softmax(v).unwrap();
            let l2 = tape.mean(sm).unwrap();
            let s1 = tape.scale(l1, ca);
            let s2 = tape.scale(l2, cb);
            let l = tape.add(s1, s2).unwrap();
            tape.backward(l).unwrap().wrt(v)
        };
        let (g1, g2, both) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(a, b));
        for i in 0..6 {
            let lin = a * g1.data()[i] + b * g2.data()[i];
            prop_assert!((both.data()[i] - lin).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical(
        tensor in prop::collection::vec(any::<f32>(), 0..20),
        ints in prop::collection::vec(any::<u64>(), 0..5),
        text in ".{0,40}",
        name in "[a-z.]{1,12}",
    ) {
        let mut c = Checkpoint::new();
        c.put_tensor(&format!("t.{name}"), &Tensor::new(vec![tensor.len()], tensor.clone()).unwrap()).unwrap();
        c.put_u64s(&format!("i.{name}"), &ints).unwrap();
        c.put_text(&format!("s.{name}"), &text).unwrap();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        let t: Tensor<f32> = back.tensor(&format!("t.{name}")).unwrap();
        let same_bits = t.data().iter().zip(&tensor).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same_bits);
        prop_assert_eq!(back.u64s(&format!("i.{name}")).unwrap(), ints);
        prop_assert_eq!(back.text(&format!("s.{name}")).unwrap(), text);
    }

    #[test]
    fn bleu_of_a_corpus_with_itself_is_one(corpus in prop::collection::vec(sentence(5, 9), 1..6)) {
        prop_assert_eq!(bleu(&corpus, &corpus, 5).unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn adding_the_hypothesis_as_a_reference_never_lowers_its_score(
        hyp in sentence(1, 9),
        refs in prop::collection::vec(sentence(1, 9), 1..5),
    ) {
        let before = BleuReference::new(&refs, 5).unwrap().score(&hyp);
        let mut more = refs.clone();
        more.push(hyp.clone());
        let after = BleuReference::new(&more, 5).unwrap().score(&hyp);
        for (b, a) in before.iter().zip(&after) {
            prop_assert!((0.0..=1.0).contains(b) && (0.0..=1.0).contains(a));
            prop_assert!(a >= b);
        }
    }

    #[test]
    fn nll_gen_is_mle_loss_bit_for_bit(seed in any::<u64>(), corpus in prop::collection::vec(sentence(1, 6), 1..5)) {
        let cfg = GeneratorConfig { vocab_size: 6, embed_dim: 3, hidden_dim: 4, num_experts: 2, share_experts: false };
        let gen = GeneratorParams::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut tape = Tape::<f32>::new();
        let bound = gen.bind(&mut tape, true);
        let loss = mle_loss(&mut tape, &bound, &corpus).unwrap();
        let direct = tape.value(loss).data()[0] as f64;
        prop_assert_eq!(nll_gen(&gen, &corpus).unwrap().to_bits(), direct.to_bits());
    }
}
