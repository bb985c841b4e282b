//! Independent oracles and fixtures shared by the integration tests. The
//! oracles use plain index loops and never call the library's own algebra.

#![allow(dead_code)]

use fedflow::lora::{AdapterSet, LoraAdapter};
use fedflow::model::{self, BackboneConfig, LayerIndexSet, PartitionedModel};
use fedflow::seed::Rng;
use fedflow::Matrix;
use rand::Rng as _;

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// One adapter set with random B and A on each `(m, n)` target.
pub fn random_adapters(rng: &mut Rng, client: usize, rank: usize, shapes: &[(usize, usize)]) -> AdapterSet {
    let adapters = shapes
        .iter()
        .enumerate()
        .map(|(i, &(m, n))| {
            let b = random_matrix(rng, m, rank);
            let a = random_matrix(rng, rank, n);
            LoraAdapter::new(format!("target{i}"), b, a).unwrap()
        })
        .collect();
    AdapterSet::new(client, adapters).unwrap()
}

/// Random weights drawn from positive reals and normalized.
pub fn random_weights(rng: &mut Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

/// `b · a` by explicit summation.
pub fn product(b: &Matrix, a: &Matrix) -> Vec<Vec<f64>> {
    let (m, r) = b.shape();
    let n = a.cols();
    let mut out = vec![vec![0.0; n]; m];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            for t in 0..r {
                *cell += b.get(i, t) * a.get(t, j);
            }
        }
    }
    out
}

fn add_scaled(acc: &mut [Vec<f64>], x: &[Vec<f64>], s: f64) {
    for (ra, rx) in acc.iter_mut().zip(x) {
        for (a, v) in ra.iter_mut().zip(rx) {
            *a += s * v;
        }
    }
}

/// `Σ_k p_k B_k A_k` for one target.
pub fn weighted_sum(sets: &[AdapterSet], p: &[f64], target: usize) -> Vec<Vec<f64>> {
    let (m, n) = sets[0].adapters[target].shape();
    let mut acc = vec![vec![0.0; n]; m];
    for (s, &pk) in sets.iter().zip(p) {
        let ad = &s.adapters[target];
        add_scaled(&mut acc, &product(&ad.b, &ad.a), pk);
    }
    acc
}

/// `Σ_k p_k² B_k A_k + Σ_{i≠j} p_i p_j B_i A_j` for one target.
pub fn noisy_expansion(sets: &[AdapterSet], p: &[f64], target: usize) -> Vec<Vec<f64>> {
    let (m, n) = sets[0].adapters[target].shape();
    let mut acc = vec![vec![0.0; n]; m];
    for (i, si) in sets.iter().enumerate() {
        for (j, sj) in sets.iter().enumerate() {
            let term = product(&si.adapters[target].b, &sj.adapters[target].a);
            add_scaled(&mut acc, &term, p[i] * p[j]);
        }
    }
    acc
}

pub fn max_abs(x: &[Vec<f64>]) -> f64 {
    x.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn max_abs_diff(x: &Matrix, y: &[Vec<f64>]) -> f64 {
    let mut d: f64 = 0.0;
    for (i, row) in y.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            d = d.max((x.get(i, j) - v).abs());
        }
    }
    d
}

/// Accuracy and macro precision, recall, F1 from label pairs, averaging over
/// classes that occur in `truth`.
pub fn brute_force_scores(truth: &[usize], pred: &[usize], classes: usize) -> (f64, f64, f64, f64) {
    let correct = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
    let (mut sp, mut sr, mut sf, mut present) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..classes {
        let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p == c).count() as f64;
        let fp = truth.iter().zip(pred).filter(|&(&t, &p)| t != c && p == c).count() as f64;
        let fneg = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p != c).count() as f64;
        if tp + fneg == 0.0 {
            continue;
        }
        present += 1;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = tp / (tp + fneg);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        sp += precision;
        sr += recall;
        sf += f1;
    }
    let k = present as f64;
    (correct as f64 / truth.len() as f64, sp / k, sr / k, sf / k)
}

/// A small transformed and split model.
pub fn small_model(vocab: usize, d: usize, hidden: usize, depth: usize, split_point: usize, classes: usize, seed: u64) -> PartitionedModel {
    let backbone = model::Backbone::random(
        &BackboneConfig {
            vocab_size: vocab,
            d_model: d,
            hidden,
            depth,
            embedding_std: 1.0,
        },
        seed,
    )
    .unwrap();
    let compressed = model::layer_extract(&backbone, &LayerIndexSet::all(depth)).unwrap();
    model::split(model::attach_network_head(compressed, classes, seed).unwrap(), split_point).unwrap()
}

pub fn random_batch(rng: &mut Rng, vocab: usize, size: usize, max_len: usize) -> Vec<Vec<u32>> {
    (0..size)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
        })
        .collect()
}

/// Largest relative error between analytic gradients and central finite
/// differences over every trainable entry (head and adapters) of a depth-2,
/// width-8 model with non-zero adapters. Returns the error and the number of
/// entries checked.
pub fn gradient_check(eps: f64, seed: u64) -> (f64, usize) {
    use fedflow::nncore::{forward, layers, loss_and_grads, ParamSet};
    use fedflow::seed;

    let model = small_model(16, 8, 8, 2, 1, 3, seed);
    let mut rng = seed::rng(seed ^ 0x5eed);
    let adapters = model
        .adapt_points()
        .iter()
        .map(|p| LoraAdapter::new(p.name.clone(), random_matrix(&mut rng, p.rows, 2), random_matrix(&mut rng, 2, p.cols)).unwrap())
        .collect();
    let mut params = model.to_params();
    AdapterSet::new(0, adapters).unwrap().install(&mut params);
    let batch = random_batch(&mut rng, 16, 6, 5);
    let refs: Vec<&[u32]> = batch.iter().map(Vec::as_slice).collect();
    let labels: Vec<usize> = (0..refs.len()).map(|_| rng.random_range(0..3)).collect();
    let arch = model.arch();
    let (_, grads) = loss_and_grads(&params, &arch, &refs, &labels).unwrap();
    let loss = |p: &ParamSet| {
        let logits = forward(p, &arch, &refs).unwrap();
        layers::softmax_cross_entropy(&logits, &labels).unwrap().0
    };

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, g) in &grads {
        for idx in 0..g.len() {
            let original = params.get(name).unwrap().as_slice()[idx];
            params.get_mut(name).unwrap().as_mut_slice()[idx] = original + eps;
            let up = loss(&params);
            params.get_mut(name).unwrap().as_mut_slice()[idx] = original - eps;
            let down = loss(&params);
            params.get_mut(name).unwrap().as_mut_slice()[idx] = original;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = g.as_slice()[idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}
