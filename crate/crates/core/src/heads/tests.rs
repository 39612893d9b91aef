use proptest::prelude::*;
use rand::Rng;

use super::ctc::repeats;
use super::*;
use crate::autodiff::{grad_check, log_softmax_vec, GradCheck, Tensor};
use crate::rng::SeedStream;
use crate::testutil::{probe, random, randomize, unfreeze, with_sink};

/// −log Σ over every frame path whose collapse is `target`.
fn brute_force_ctc(logits: &Tensor<f64>, target: &[usize]) -> f64 {
    let (t, c) = logits.dims2().unwrap();
    let lp: Vec<Vec<f64>> = logits.rows().map(log_softmax_vec).collect();
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    loop {
        if collapse(&path) == target {
            total += path.iter().enumerate().map(|(i, &k)| lp[i][k]).sum::<f64>().exp();
        }
        // odometer increment
        let mut i = 0;
        while i < t {
            path[i] += 1;
            if path[i] < c {
                break;
            }
            path[i] = 0;
            i += 1;
        }
        if i == t {
            break;
        }
    }
    -total.ln()
}

fn ctc_value(logits: &Tensor<f64>, target: &[usize]) -> crate::Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone())?;
    let l = ctc_loss(&mut g, x, target)?;
    Ok(g.value(l).item())
}

#[test]
fn single_frame_single_label() {
    let logits = Tensor::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap();
    let expected = -log_softmax_vec(logits.row(0))[2];
    assert!((ctc_value(&logits, &[2]).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn empty_target_is_the_all_blank_path() {
    let logits = random::<f64>(&[2, 4], 3);
    let p1 = log_softmax_vec(logits.row(0))[0];
    let p2 = log_softmax_vec(logits.row(1))[0];
    assert!((ctc_value(&logits, &[]).unwrap() + p1 + p2).abs() < 1e-12);
}

#[test]
fn matches_brute_force_on_the_worked_case() {
    let logits = random::<f64>(&[4, 4], 17);
    let a = ctc_value(&logits, &[1, 2]).unwrap();
    assert!((a - brute_force_ctc(&logits, &[1, 2])).abs() < 1e-9);
}

#[test]
fn matches_brute_force_over_random_draws() {
    let mut rng = SeedStream::new(42).rng("ctc");
    let mut checked = 0;
    for draw in 0..400 {
        let v = rng.random_range(1..=3);
        let t = rng.random_range(1..=6);
        let u = rng.random_range(0..=3);
        let target: Vec<usize> = (0..u).map(|_| rng.random_range(1..=v)).collect();
        let scale = [0.5, 2.0, 6.0][draw % 3];
        let logits = Tensor::new(
            vec![t, v + 1],
            (0..t * (v + 1)).map(|_| scale * crate::rng::normal(&mut rng)).collect(),
        )
        .unwrap();
        if t < target.len() + repeats(&target) {
            assert!(matches!(ctc_value(&logits, &target), Err(Error::InfeasibleTarget { .. })));
            continue;
        }
        let ours = ctc_value(&logits, &target).unwrap();
        let oracle = brute_force_ctc(&logits, &target);
        assert!(ours >= 0.0);
        assert!((ours - oracle).abs() < 1e-9, "T={t} V={v} {target:?}: {ours} vs {oracle}");
        checked += 1;
    }
    assert!(checked >= 100, "{checked}");
}

#[test]
fn ctc_gradient_matches_finite_differences() {
    let mut rng = SeedStream::new(7).rng("ctc-grad");
    for target in [vec![], vec![1], vec![1, 1], vec![2, 1, 3], vec![3, 3, 3]] {
        let t = target.len() + repeats(&target) + rng.random_range(0..3) + 1;
        let mut store = ParamStore::<f64>::new();
        store.insert("logits", random(&[t, 4], rng.random()), true).unwrap();
        let r = grad_check(
            &store,
            |g, s| {
                let x = g.param(s, s.id("logits").unwrap())?;
                ctc_loss(g, x, &target)
            },
            &GradCheck::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{target:?}: {r:?}");
    }
}

#[test]
fn ctc_errors() {
    let logits = random::<f64>(&[3, 3], 0);
    assert!(matches!(ctc_value(&logits, &[3]), Err(Error::LabelOutOfRange { label: 3, classes: 3 })));
    assert!(matches!(ctc_value(&logits, &[0]), Err(Error::LabelOutOfRange { label: 0, .. })));
    assert!(matches!(ctc_value(&logits, &[1, 1, 1]), Err(Error::InfeasibleTarget { .. })));
    assert!(ctc_value(&logits, &[1, 2, 1]).is_ok());
    assert!(ctc_value(&Tensor::zeros(vec![0, 3]), &[]).is_err());
}

#[test]
fn ctc_is_stable_for_extreme_logits() {
    let logits = Tensor::from_rows(&[vec![500.0, -500.0, 0.0], vec![-500.0, 500.0, 0.0], vec![0.0, 0.0, 900.0]]).unwrap();
    let l = ctc_value(&logits, &[1, 2]).unwrap();
    assert!(l.is_finite() && l >= 0.0);
}

#[test]
fn swapping_labels_changes_the_loss() {
    let mut rng = SeedStream::new(3).rng("swap");
    for _ in 0..50 {
        let logits = Tensor::new(vec![5, 4], (0..20).map(|_| crate::rng::normal(&mut rng)).collect()).unwrap();
        let a = ctc_value(&logits, &[1, 2, 3]).unwrap();
        let b = ctc_value(&logits, &[2, 1, 3]).unwrap();
        assert!((a - b).abs() > 1e-9);
    }
}

#[test]
fn greedy_decode_examples() {
    // argmax path [blank, a, a, blank, a]
    let rows: Vec<Vec<f64>> = [0, 1, 1, 0, 1]
        .iter()
        .map(|&k| (0..3).map(|j| if j == k { 1.0 } else { 0.0 }).collect())
        .collect();
    assert_eq!(greedy_decode(&Tensor::from_rows(&rows).unwrap()), vec![1, 1]);
    assert!(greedy_decode(&Tensor::<f64>::from_rows(&[vec![2.0, 1.0], vec![5.0, 0.0]]).unwrap()).is_empty());
    // ties resolve to the lowest index, here blank
    assert!(greedy_decode(&Tensor::<f64>::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap()).is_empty());
}

proptest! {
    #[test]
    fn greedy_decode_recovers_sharpened_paths(path in prop::collection::vec(0usize..4, 1..20), seed in 0u64..500) {
        let noise = random::<f64>(&[path.len(), 4], seed);
        let rows: Vec<Vec<f64>> = path
            .iter()
            .enumerate()
            .map(|(t, &k)| (0..4).map(|j| noise.row(t)[j] * 0.1 + if j == k { 10.0 } else { 0.0 }).collect())
            .collect();
        prop_assert_eq!(greedy_decode(&Tensor::from_rows(&rows).unwrap()), collapse(&path));
    }
}

fn cls_head(in_dim: usize, hidden: usize, classes: usize) -> (ClsHead, ParamStore<f64>) {
    let (h, mut store) = with_sink(5, |s| Head::declare(s, in_dim, &HeadConfig::Cls { hidden, classes }).unwrap());
    randomize(&mut store, 6, 0.5);
    let Head::Cls(h) = h else { unreachable!() };
    (h, store)
}

fn cls_out(h: &ClsHead, store: &ParamStore<f64>, x: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let mut g = Graph::new();
    let v = g.constant(x.clone()).unwrap();
    let o = h.forward(&mut g, store, v).unwrap();
    (g.value(o.logits).clone(), g.value(o.embedding).clone())
}

#[test]
fn single_frame_classification_is_two_affine_maps() {
    let (h, store) = cls_head(6, 4, 3);
    let x = random::<f64>(&[1, 6], 1);
    let (logits, emb) = cls_out(&h, &store, &x);
    assert_eq!(logits.shape(), &[3]);
    assert_eq!(emb.shape(), &[4]);
    let affine = |x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
        let (i, o) = w.dims2().unwrap();
        (0..o).map(|j| b.data()[j] + (0..i).map(|k| x[k] * w.data()[k * o + j]).sum::<f64>()).collect()
    };
    let z = affine(x.data(), store.value(h.fc1.w), store.value(h.fc1.b));
    let y = affine(&z, store.value(h.fc2.w), store.value(h.fc2.b));
    for (a, b) in emb.data().iter().zip(&z) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in logits.data().iter().zip(&y) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn duplicated_frames_pool_to_the_same_output() {
    let (h, store) = cls_head(6, 4, 3);
    let x = random::<f64>(&[1, 6], 2);
    let xx = Tensor::from_rows(&[x.row(0).to_vec(), x.row(0).to_vec()]).unwrap();
    let (a, ea) = cls_out(&h, &store, &x);
    let (b, eb) = cls_out(&h, &store, &xx);
    assert!(a.max_abs_diff(&b) < 1e-12 && ea.max_abs_diff(&eb) < 1e-12);
}

#[test]
fn pooled_embedding_ignores_frame_order() {
    let (h, store) = cls_head(6, 4, 3);
    let x = random::<f64>(&[5, 6], 3);
    let rows: Vec<Vec<f64>> = [4, 2, 0, 3, 1].iter().map(|&i| x.row(i).to_vec()).collect();
    let (_, a) = cls_out(&h, &store, &x);
    let (_, b) = cls_out(&h, &store, &Tensor::from_rows(&rows).unwrap());
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn classification_gradient_matches_finite_differences() {
    let (h, mut store) = cls_head(6, 4, 3);
    unfreeze(&mut store);
    let x = random::<f64>(&[5, 6], 4);
    let r = grad_check(
        &store,
        |g, s| {
            let v = g.constant(x.clone())?;
            let o = h.forward(g, s, v)?;
            let ce = g.cross_entropy(o.logits, 1)?;
            let e = probe(g, o.embedding, 9)?;
            g.add(ce, e)
        },
        &GradCheck::default(),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn classification_rejects_empty_input_and_bad_configs() {
    let (h, store) = cls_head(6, 4, 3);
    let mut g = Graph::new();
    let v = g.constant(Tensor::zeros(vec![0, 6])).unwrap();
    assert!(matches!(h.forward(&mut g, &store, v), Err(Error::EmptySequence { .. })));
    for cfg in [HeadConfig::Ctc { vocab: 0 }, HeadConfig::Cls { hidden: 0, classes: 2 }, HeadConfig::Cls { hidden: 2, classes: 0 }] {
        assert!(with_sink(0, |s| Head::declare(s, 4, &cfg).map(|_| ())).0.is_err());
    }
}

#[test]
fn ctc_head_shapes() {
    let (h, store) = with_sink(1, |s| Head::declare(s, 8, &HeadConfig::Ctc { vocab: 5 }).unwrap());
    let Head::Ctc(h) = h else { unreachable!() };
    assert_eq!(h.vocab(), 5);
    assert_eq!(store.total_numel(), HeadConfig::Ctc { vocab: 5 }.param_count(8));
    let mut g = Graph::<f64>::new();
    let x = g.constant(random(&[7, 8], 0)).unwrap();
    let y = h.forward(&mut g, &store, x).unwrap();
    assert_eq!(g.shape(y), &[7, 6]);
}
