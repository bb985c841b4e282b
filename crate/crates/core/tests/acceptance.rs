//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::time::Instant;

use fedflow::adaptive::{compute_rank, RankPolicy};
use fedflow::aggregate::{naive_aggregate, reference_delta, stack_aggregate, AggregationWeights};
use fedflow::metrics::ConfusionMatrix;
use fedflow::model::{self, BackboneConfig, LayerIndexSet};
use fedflow::nncore::{checkpoint, forward};
use fedflow::scenario::{self, RunOptions, ScenarioConfig, ScenarioOutput};
use fedflow::seed;
use rand::Rng as _;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rank_upto(rng: &mut seed::Rng, m: usize, n: usize) -> usize {
    rng.random_range(1..=16.min(m).min(n))
}

fn stacking_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(1001);
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.random_range(1..=8);
        let (m, n) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let sets: Vec<_> = (0..k)
            .map(|c| {
                let r = rank_upto(&mut rng, m, n);
                common::random_adapters(&mut rng, c, r, &[(m, n)])
            })
            .collect();
        let p = common::random_weights(&mut rng, k);
        let w = AggregationWeights::from_values(p.clone()).map_err(|e| e.to_string())?;
        let stacked = stack_aggregate(&sets, &w).map_err(|e| e.to_string())?;
        let reference = reference_delta(&sets, &w).map_err(|e| e.to_string())?;
        let (s, r) = (&stacked["target0"].1, &reference["target0"]);
        let scale = r.max_abs().max(1.0);
        worst_ratio = worst_ratio.max(s.max_abs_diff(r).map_err(|e| e.to_string())? / scale);
        let oracle = common::weighted_sum(&sets, &p, 0);
        worst_ratio = worst_ratio.max(common::max_abs_diff(r, &oracle) / common::max_abs(&oracle).max(1.0));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_ratio <= 1e-9 && secs < 5.0,
        format!("worst scaled deviation {worst_ratio:.2e} (limit 1e-9), {secs:.2} s (limit 5 s)"),
    )
}

fn noise_decomposition() -> Outcome {
    let mut rng = seed::rng(2002);
    let mut worst_ratio: f64 = 0.0;
    let mut noisy = 0;
    for _ in 0..100 {
        let k = rng.random_range(2..=8);
        let (m, n) = (rng.random_range(2..=64), rng.random_range(2..=64));
        let r = rank_upto(&mut rng, m, n);
        let sets: Vec<_> = (0..k).map(|c| common::random_adapters(&mut rng, c, r, &[(m, n)])).collect();
        let p = common::random_weights(&mut rng, k);
        let w = AggregationWeights::from_values(p.clone()).map_err(|e| e.to_string())?;
        let naive = naive_aggregate(&sets, &w).map_err(|e| e.to_string())?;
        let right = reference_delta(&sets, &w).map_err(|e| e.to_string())?;
        let expansion = common::noisy_expansion(&sets, &p, 0);
        let d = &naive["target0"];
        worst_ratio = worst_ratio.max(common::max_abs_diff(d, &expansion) / common::max_abs(&expansion).max(1.0));
        if d.sub(&right["target0"]).map_err(|e| e.to_string())?.frobenius() > 0.0 {
            noisy += 1;
        }
    }
    check(
        worst_ratio <= 1e-9 && noisy >= 95,
        format!("worst scaled deviation {worst_ratio:.2e} (limit 1e-9), non-zero noise in {noisy}/100 (need 95)"),
    )
}

fn rank_policy() -> Outcome {
    let policy = RankPolicy::preset("balanced", 4, 64).map_err(|e| e.to_string())?;
    let table: Vec<usize> = [0.0, 0.5, 1.0].iter().map(|&s| compute_rank(&[s, s, s], &policy)).collect();
    let table_ok = table == [4, 32, 64];

    let mut rng = seed::rng(3003);
    let mut in_range = 0;
    let mut monotone = true;
    for _ in 0..10_000 {
        let lo = 1usize << rng.random_range(0..=4);
        let hi = lo << rng.random_range(0..=4);
        let raw = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let total: f64 = raw.iter().sum();
        let (a, b) = (raw[0] / total, raw[1] / total);
        let policy = RankPolicy::new(a, b, 1.0 - a - b, lo, hi).map_err(|e| e.to_string())?;
        let x = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let r = compute_rank(&x, &policy);
        if r.is_power_of_two() && (lo..=hi).contains(&r) {
            in_range += 1;
        }
        // Raising every feature cannot lower the score.
        let y = x.map(|v| v + (1.0 - v) * rng.random::<f64>());
        monotone &= compute_rank(&y, &policy) >= r;
    }
    let mut previous = 0;
    for i in 0..=1000 {
        let s = i as f64 / 1000.0;
        let r = compute_rank(&[s, s, s], &RankPolicy::preset("volume", 4, 64).map_err(|e| e.to_string())?);
        monotone &= r >= previous;
        previous = r;
    }
    check(
        table_ok && in_range == 10_000 && monotone,
        format!("table {table:?} (want [4, 32, 64]), {in_range}/10000 valid powers of two, monotone {monotone}"),
    )
}

fn model_transformation() -> Outcome {
    let (vocab, d, h) = (32, 8, 12);
    let source = model::Backbone::random(
        &BackboneConfig {
            vocab_size: vocab,
            d_model: d,
            hidden: h,
            depth: 28,
            embedding_std: 1.0,
        },
        4004,
    )
    .map_err(|e| e.to_string())?;
    let keep: Vec<usize> = (0..=12).chain(23..=27).collect();
    let index = LayerIndexSet::new(keep.clone(), 28).map_err(|e| e.to_string())?;
    let compressed = model::layer_extract(&source, &index).map_err(|e| e.to_string())?;
    let expected: usize = source.embedding.len()
        + keep
            .iter()
            .map(|&i| {
                let b = &source.blocks[i];
                b.fc1_weight.len() + b.fc1_bias.len() + b.fc2_weight.len() + b.fc2_bias.len()
            })
            .sum::<usize>();
    let count_ok = compressed.depth() == 18 && compressed.param_count() == expected;

    let headed = model::attach_network_head(compressed, 5, 4004).map_err(|e| e.to_string())?;
    let split = model::split(headed.clone(), 13).map_err(|e| e.to_string())?;
    let params = split.to_params();
    let arch = split.arch();
    let mut rng = seed::rng(4005);
    let mut identical = 0;
    for _ in 0..100 {
        let input = common::random_batch(&mut rng, vocab, 1, 20);
        let refs: Vec<&[u32]> = input.iter().map(Vec::as_slice).collect();
        let whole = headed.logits(&refs).map_err(|e| e.to_string())?;
        let parts = split.logits(&refs).map_err(|e| e.to_string())?;
        let executor = forward(&params, &arch, &refs).map_err(|e| e.to_string())?;
        if whole.bit_eq(&parts) && whole.bit_eq(&executor) {
            identical += 1;
        }
    }
    check(
        count_ok && identical == 100,
        format!(
            "depth {} (want 18), {} params (independent sum {expected}), bit-identical logits on {identical}/100 inputs",
            split.depth(),
            split.to_params().numel() - split.classifier.head.weight.len() - split.classifier.head.bias.len()
        ),
    )
}

fn freeze_invariant(run: &ScenarioOutput) -> Outcome {
    let (before, _) = checkpoint::decode(&run.transformed_checkpoint().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let (after, _) = checkpoint::decode(&run.model_checkpoint().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let mut compared = 0;
    let mut differing = Vec::new();
    for (name, p) in before.iter() {
        if name == "embedding" || name.starts_with("blocks.") {
            compared += 1;
            let same = after.get(name).is_some_and(|q| {
                q.shape() == p.value.shape()
                    && q.as_slice().iter().zip(p.value.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits())
            });
            if !same {
                differing.push(name.to_string());
            }
        }
    }
    let merged: f64 = after
        .iter()
        .filter(|(n, _)| n.ends_with(".merged_delta"))
        .map(|(_, p)| p.value.frobenius())
        .sum();
    check(
        differing.is_empty() && compared > 0 && merged > 0.0,
        format!(
            "{compared} base tensors compared after {} rounds, {} differ {differing:?}; merged adapter deltas carry norm {merged:.3}",
            run.history().len(),
            differing.len()
        ),
    )
}

fn gradient_correctness() -> Outcome {
    let (worst, checked) = common::gradient_check(1e-5, 6006);
    check(
        worst < 1e-4 && checked > 0,
        format!("max relative error {worst:.2e} over {checked} head and adapter entries (limit 1e-4)"),
    )
}

fn end_to_end(run: &ScenarioOutput, secs: f64) -> Outcome {
    let f1 = run.report.final_metrics.macro_f1;
    check(
        f1 >= 0.90 && run.history().len() == 10 && secs < 300.0,
        format!("final macro-F1 {f1:.4} after {} rounds (need 0.90), {secs:.1} s (limit 300 s)", run.history().len()),
    )
}

fn non_iid_trend() -> Outcome {
    let sigmas = [0.5, 0.2, 0.05];
    let mut means = Vec::new();
    for &sigma in &sigmas {
        let mut total = 0.0;
        for s in 1..=5u64 {
            let mut c = criterion7_config();
            c.federation.sigma = sigma;
            c.federation.seed = s;
            total += scenario::run(&c, RunOptions::default()).map_err(|e| e.to_string())?.report.final_metrics.macro_f1;
        }
        means.push(total / 5.0);
    }
    check(
        means[0] >= means[1] && means[1] >= means[2] - 0.02,
        format!(
            "mean final macro-F1 over seeds 1-5: sigma 0.5 -> {:.4}, 0.2 -> {:.4}, 0.05 -> {:.4}",
            means[0], means[1], means[2]
        ),
    )
}

fn metrics_oracle() -> Outcome {
    let cm = ConfusionMatrix::from_counts(vec![vec![50, 10], vec![5, 35]]).map_err(|e| e.to_string())?;
    let report = cm.report();
    // Per-class F1 from the example's precision and recall fractions.
    let f1 = |p: f64, r: f64| 2.0 * p * r / (p + r);
    let hand = (f1(50.0 / 55.0, 50.0 / 60.0) + f1(35.0 / 45.0, 35.0 / 40.0)) / 2.0;
    let hand_ok = (report.macro_f1 * 1e4).round() == (hand * 1e4).round();

    let mut rng = seed::rng(9009);
    let mut agree = 0;
    for _ in 0..20 {
        let classes = rng.random_range(2..=8);
        let n = rng.random_range(1..=300);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| if rng.random::<f64>() < 0.6 { t } else { rng.random_range(0..classes) })
            .collect();
        let r = ConfusionMatrix::from_predictions(classes, &truth, &pred).map_err(|e| e.to_string())?.report();
        let (acc, pr, rc, f) = common::brute_force_scores(&truth, &pred, classes);
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        if close(r.accuracy, acc) && close(r.macro_precision, pr) && close(r.macro_recall, rc) && close(r.macro_f1, f) {
            agree += 1;
        }
    }
    check(
        hand_ok && agree == 20,
        format!(
            "[[50,10],[5,35]] macro-F1 {:.4} vs hand value {hand:.4}; {agree}/20 random matrices match brute force",
            report.macro_f1
        ),
    )
}

fn determinism(first: &ScenarioOutput) -> Outcome {
    let config = criterion7_config();
    let log = |out: ScenarioOutput| out.metrics_log().map_err(|e| e.to_string());
    let a = first.metrics_log().map_err(|e| e.to_string())?;
    let b = log(scenario::run(&config, RunOptions::default()).map_err(|e| e.to_string())?)?;
    let c = log(scenario::run(
        &config,
        RunOptions {
            workers: 4,
            ..RunOptions::default()
        },
    )
    .map_err(|e| e.to_string())?)?;
    check(
        a == b && a == c && !a.is_empty(),
        format!(
            "repeat run identical: {}, 4-worker run identical: {} ({} bytes)",
            a == b,
            a == c,
            a.len()
        ),
    )
}

fn criterion7_config() -> ScenarioConfig {
    let mut c = ScenarioConfig::default();
    c.federation.seed = 7;
    c
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "stacking equals the dense weighted sum", stacking_exactness()),
        (2, "naive averaging noise decomposition", noise_decomposition()),
        (3, "power-of-two rank policy", rank_policy()),
        (4, "layer extraction and split equivalence", model_transformation()),
    ];

    let start = Instant::now();
    let run = scenario::run(&criterion7_config(), RunOptions::default());
    let secs = start.elapsed().as_secs_f64();
    match &run {
        Ok(run) => {
            results.push((5, "frozen base weights survive a full run", freeze_invariant(run)));
            results.push((6, "finite-difference gradient check", gradient_correctness()));
            results.push((7, "desk-scale end-to-end macro-F1", end_to_end(run, secs)));
        }
        Err(e) => {
            for (n, name) in [(5, "frozen base weights survive a full run"), (7, "desk-scale end-to-end macro-F1")] {
                results.push((n, name, Err(format!("run failed: {e}"))));
            }
            results.push((6, "finite-difference gradient check", gradient_correctness()));
        }
    }
    results.push((8, "non-IID trend across concentrations", non_iid_trend()));
    results.push((9, "metrics against hand and brute-force oracles", metrics_oracle()));
    results.push((
        10,
        "byte-identical logs across repeats and worker counts",
        match &run {
            Ok(run) => determinism(run),
            Err(e) => Err(format!("run failed: {e}")),
        },
    ));

    let mut failed = 0;
    for (n, name, outcome) in &results {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2} {tag}  {name}: {detail}");
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
