//! Graph kernels, scoring heads and losses against independent scalar-loop
//! reimplementations and finite differences.

#![allow(clippy::needless_range_loop, clippy::excessive_precision)]

use std::sync::Arc;

use cenet_core::autodiff::Graph;
use cenet_core::history::SparseCounts;
use cenet_core::model::{
    ce_loss, combined_loss, embed_batch, historical_scores, nonhistorical_scores, score_batch,
    stage1_objective, supcon_loss,
};
use cenet_core::tensor::softmax;
use cenet_core::{
    Heads, HyperParams, ModelParams, QueryBatch, QueryContext, Tensor, TrainSwitches,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

fn naive_matmul_t(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|ra| {
            b.iter()
                .map(|rb| ra.iter().zip(rb).map(|(x, y)| x * y).sum())
                .collect()
        })
        .collect()
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (n, k, m) in [(1, 1, 1), (3, 5, 2), (17, 9, 33), (64, 40, 7)] {
        let a = rand_matrix(&mut rng, n, k);
        let b = rand_matrix(&mut rng, m, k);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&a).unwrap());
        let w = g.constant(Tensor::from_rows(&b).unwrap());
        let y = g.matmul_t(x, w).unwrap();
        let want = naive_matmul_t(&a, &b);
        for i in 0..n {
            for j in 0..m {
                assert!((g.value(y).get(i, j) - want[i][j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_matches_high_precision_values() {
    // computed with 40-digit arithmetic
    let want = [
        0.090_030_573_170_380_457_998_022_102_184_491_797_867_93,
        0.244_728_471_054_797_652_472_959_618_340_762_797_199_3,
        0.665_240_955_774_821_889_529_018_280_174_703_804_932_8,
    ];
    let got = softmax(&[1.0, 2.0, 3.0]).unwrap();
    for (a, b) in got.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!(softmax(&[]).is_err());
}

fn toy_contexts() -> Vec<QueryContext> {
    let f = |pairs: &[(u32, u32)]| Arc::new(SparseCounts::from_pairs(pairs.to_vec()));
    vec![
        QueryContext::new(0, 1, 5, 2, f(&[(2, 3), (1, 1)])),
        QueryContext::new(1, 0, 5, 3, f(&[])),
        QueryContext::new(2, 3, 5, 0, f(&[(0, 2)])),
        QueryContext::new(3, 2, 5, 1, f(&[(0, 1), (3, 4)])),
    ]
}

fn toy_params() -> ModelParams {
    ModelParams::init(4, 4, 3, 42)
}

/// Scalar-loop reimplementation of both scoring heads.
fn naive_scores(
    params: &ModelParams,
    ctx: &QueryContext,
    lambda: f64,
    nonhistorical: bool,
) -> Vec<f64> {
    let d = params.dim;
    let e = &params.entity.value;
    let r = &params.relation.value;
    let (w, b) = if nonhistorical {
        (&params.nhis_w.value, &params.nhis_b.value)
    } else {
        (&params.his_w.value, &params.his_b.value)
    };
    let mut x = e.row(ctx.s as usize).to_vec();
    x.extend_from_slice(r.row(ctx.p as usize));
    let mut h = vec![0.0; d];
    for i in 0..d {
        let mut acc = b.data()[i];
        for j in 0..2 * d {
            acc += w.get(i, j) * x[j];
        }
        h[i] = acc.tanh();
    }
    (0..params.num_entities)
        .map(|o| {
            let sim: f64 = (0..d).map(|j| h[j] * e.get(o, j)).sum();
            let z = if ctx.freq.contains(o as u32) {
                lambda
            } else {
                -lambda
            };
            if nonhistorical {
                sim - z
            } else {
                sim + z
            }
        })
        .collect()
}

#[test]
fn scoring_heads_match_scalar_loops() {
    let params = toy_params();
    let ctx = toy_contexts();
    let batch = QueryBatch::assemble(&ctx, 4, 4, 2.0).unwrap();
    let mut g = Graph::new();
    let his = historical_scores(&mut g, &params, &batch).unwrap();
    let nhis = nonhistorical_scores(&mut g, &params, &batch).unwrap();
    for (i, c) in ctx.iter().enumerate() {
        let want_h = naive_scores(&params, c, 2.0, false);
        let want_n = naive_scores(&params, c, 2.0, true);
        for o in 0..4 {
            assert!((g.value(his).get(i, o) - want_h[o]).abs() < 1e-12);
            assert!((g.value(nhis).get(i, o) - want_n[o]).abs() < 1e-12);
        }
    }
}

#[test]
fn lambda_shift_moves_scores_by_exactly_delta() {
    let params = toy_params();
    let ctx = toy_contexts();
    let a = QueryBatch::assemble(&ctx, 4, 4, 2.0).unwrap();
    let b = QueryBatch::assemble(&ctx, 4, 4, 2.5).unwrap();
    let (ha, na) = score_batch(&params, &a, Heads::Both).unwrap();
    let (hb, nb) = score_batch(&params, &b, Heads::Both).unwrap();
    let (ha, na, hb, nb) = (ha.unwrap(), na.unwrap(), hb.unwrap(), nb.unwrap());
    for (i, c) in ctx.iter().enumerate() {
        for o in 0..4 {
            let sign = if c.freq.contains(o as u32) { 1.0 } else { -1.0 };
            assert!((hb.get(i, o) - ha.get(i, o) - sign * 0.5).abs() < 1e-12);
            assert!((nb.get(i, o) - na.get(i, o) + sign * 0.5).abs() < 1e-12);
        }
    }
    // gradients of the similarity terms do not depend on λ when the loss is linear in the scores
    let grad_of = |batch: &QueryBatch| {
        let mut g = Graph::new();
        let h = historical_scores(&mut g, &params, batch).unwrap();
        let s = g.sum(h);
        g.backward(s).unwrap()
    };
    let (ga, gb) = (grad_of(&a), grad_of(&b));
    for (name, t) in ga.iter() {
        assert_eq!(t, gb.get(name).unwrap(), "{name}");
    }
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[test]
fn ce_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let his = rand_matrix(&mut rng, 3, 5)
            .into_iter()
            .map(|r| r.iter().map(|v| v * 4.0).collect::<Vec<f64>>())
            .collect::<Vec<_>>();
        let nhis = rand_matrix(&mut rng, 3, 5)
            .into_iter()
            .map(|r| r.iter().map(|v| v * 4.0).collect::<Vec<f64>>())
            .collect::<Vec<_>>();
        let objects: Vec<usize> = (0..3).map(|_| rng.gen_range(0..5)).collect();
        let want: f64 = (0..3)
            .map(|i| {
                let ph = (his[i][objects[i]] - log_sum_exp(&his[i])).exp();
                let pn = (nhis[i][objects[i]] - log_sum_exp(&nhis[i])).exp();
                -(ph + pn).ln()
            })
            .sum();
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_rows(&his).unwrap());
        let n = g.constant(Tensor::from_rows(&nhis).unwrap());
        let l = ce_loss(&mut g, Some(h), Some(n), &objects).unwrap();
        assert!((g.value(l).item().unwrap() - want).abs() < 1e-10);
    }
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    rand_matrix(rng, n, d)
        .into_iter()
        .map(|r| {
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// Per-pair evaluation of the supervised contrastive loss.
fn supcon_direct(v: &[Vec<f64>], labels: &[bool], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let n = v.len();
    let mut total = 0.0;
    for q in 0..n {
        let pos: Vec<usize> = (0..n)
            .filter(|&k| k != q && labels[k] == labels[q])
            .collect();
        if pos.is_empty() {
            continue;
        }
        let denom: f64 = (0..n)
            .filter(|&a| a != q)
            .map(|a| (dot(&v[q], &v[a]) / tau).exp())
            .sum();
        let s: f64 = pos
            .iter()
            .map(|&k| ((dot(&v[q], &v[k]) / tau).exp() / denom).ln())
            .sum();
        total += -s / pos.len() as f64;
    }
    total
}

#[test]
fn supcon_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for labels in [
        vec![true, true, false, false],
        vec![true, false, false, false],
        vec![true; 4],
    ] {
        let v = unit_rows(&mut rng, 4, 5);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&v).unwrap());
        let s = supcon_loss(&mut g, x, &labels, 0.1).unwrap();
        let want = supcon_direct(&v, &labels, 0.1);
        assert!((g.value(s.loss).item().unwrap() - want).abs() < 1e-10);
    }
}

/// Full stage-1 objective as a function of the parameters.
fn objective(params: &ModelParams, batch: &QueryBatch, hp: &HyperParams) -> f64 {
    let mut g = Graph::new();
    let (total, _, _) =
        stage1_objective(&mut g, params, batch, hp, &TrainSwitches::default()).unwrap();
    g.value(total).item().unwrap()
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    let params = toy_params();
    let ctx = toy_contexts();
    let batch = QueryBatch::assemble(&ctx, 4, 4, 2.0).unwrap();
    let hp = HyperParams {
        dim: 3,
        ..HyperParams::default()
    };
    let mut g = Graph::new();
    let (total, _, _) =
        stage1_objective(&mut g, &params, &batch, &hp, &TrainSwitches::default()).unwrap();
    let grads = g.backward(total).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for pi in 0..11 {
        let n = params.stage1()[pi].value.len();
        for j in 0..n {
            let mut plus = params.clone();
            plus.stage1_mut()[pi].value.data_mut()[j] += h;
            let mut minus = params.clone();
            minus.stage1_mut()[pi].value.data_mut()[j] -= h;
            let numeric =
                (objective(&plus, &batch, &hp) - objective(&minus, &batch, &hp)) / (2.0 * h);
            let name = &params.stage1()[pi].name;
            let analytic = grads.get(name).unwrap().data()[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            assert!(
                rel < 1e-3,
                "{name}[{j}]: analytic {analytic} numeric {numeric}"
            );
        }
    }
    assert!(worst < 1e-3);
}

#[test]
fn alpha_weights_the_two_terms() {
    let mut g = Graph::new();
    let ce = g.constant(Tensor::scalar(5.0));
    let sup = g.constant(Tensor::scalar(10.0));
    let l = combined_loss(&mut g, ce, sup, 0.2).unwrap();
    assert!((g.value(l).item().unwrap() - 9.0).abs() < 1e-12);
}

#[test]
fn embeddings_are_unit_norm_for_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = ModelParams::init(30, 8, 16, 1);
    let ctx: Vec<QueryContext> = (0..40)
        .map(|_| {
            let hist: Vec<(u32, u32)> = (0..rng.gen_range(0..6))
                .map(|_| (rng.gen_range(0..30), rng.gen_range(1..9)))
                .collect();
            QueryContext::new(
                rng.gen_range(0..30),
                rng.gen_range(0..8),
                1,
                rng.gen_range(0..30),
                Arc::new(SparseCounts::from_pairs(hist)),
            )
        })
        .collect();
    let v = embed_batch(&params, &QueryBatch::assemble(&ctx, 30, 8, 2.0).unwrap()).unwrap();
    for i in 0..ctx.len() {
        let n = v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

#[test]
fn parameters_named_once() {
    let p = ModelParams::init(3, 2, 2, 0);
    let mut names: Vec<&str> = p.all().iter().map(|q| q.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), 11);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_probability_vector(x in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let p = softmax(&x).unwrap();
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // argmax preserved
        let am = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b });
        prop_assert_eq!(am(&p), am(&x));
    }

    #[test]
    fn ce_terms_never_below_minus_log_two(
        rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 4), 2),
        o in 0usize..4,
    ) {
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_rows(&rows[..1]).unwrap());
        let n = g.constant(Tensor::from_rows(&rows[1..]).unwrap());
        let l = ce_loss(&mut g, Some(h), Some(n), &[o]).unwrap();
        prop_assert!(g.value(l).item().unwrap() >= -(2f64.ln()) - 1e-12);
    }

    #[test]
    fn supcon_is_rotation_invariant(seed in 0u64..1000, angle in 0.0f64..std::f64::consts::TAU) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = unit_rows(&mut rng, 6, 3);
        let labels: Vec<bool> = (0..6).map(|_| rng.gen()).collect();
        let (c, s) = (angle.cos(), angle.sin());
        // rotation in the plane of the first two coordinates
        let rotated: Vec<Vec<f64>> = v.iter().map(|r| vec![c * r[0] - s * r[1], s * r[0] + c * r[1], r[2]]).collect();
        let eval = |rows: &[Vec<f64>]| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_rows(rows).unwrap());
            let l = supcon_loss(&mut g, x, &labels, 0.1).unwrap();
            g.value(l.loss).item().unwrap()
        };
        prop_assert!((eval(&v) - eval(&rotated)).abs() < 1e-9);
    }
}
