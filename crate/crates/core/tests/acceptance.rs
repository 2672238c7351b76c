//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! to stderr (uncaptured) before asserting.

use std::io::Write;
use std::time::Instant;

use steerlab::experiment::{
    collect_pairs, collect_traces, evaluate, fit_gate, identify, run_ablation, sweep, AblationConfig, AblationInputs, GateMode, IdentifyConfig,
    DEFAULT_ALPHA_GRID, DEFAULT_K_GRID,
};
use steerlab::gate::{gate_from_json, gate_loss_grad, gate_to_json, init_gate, Dense, GateConfig};
use steerlab::model::{
    build_random_model, forward, model_from_bytes, model_to_bytes, ActivationTrace, CaptureFlags, ForwardOptions, ModelConfig, Provenance,
    SteeringEntry, SteeringSpec, Weights,
};
use steerlab::numerics::{finite_diff_grad, SeededRng};
use steerlab::probe::{
    auroc, cross_validate, f_statistic, fit_l1_logistic, logistic_grad, logistic_loss, probe_from_json, probe_to_json, CvConfig, FeatureMatrix,
};
use steerlab::rcn::{md_scores, polarity_filter, select, steering_from_json, steering_to_json, SelectionConfig};
use steerlab::tasks::{make_planted_suite, split_suite, PlantedSuiteConfig, SuiteSplit, TaskSuite};
use steerlab::traces::{store_from_bytes, store_to_bytes, ContrastivePair, LabeledTrace, SampleConfig, Span, TaskInstance};
use steerlab::trajectory::{angle_of, magnitude_of, trajectory_features, TrajectoryConfig};
use steerlab::Error;

fn report(n: usize, name: &str, pass: bool, detail: &str, start: Instant) {
    let line = format!(
        "criterion {n:>2} [{}] {name}: {detail} ({:.1}s)\n",
        if pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

fn fixture_cfg() -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        d_model: 16,
        d_mlp: 32,
        n_heads: 2,
        vocab_size: 512,
        max_seq: 8,
    }
}

const FRACTIONS: [f64; 4] = [0.15, 0.25, 0.10, 0.50];

struct World {
    suite: TaskSuite,
    weights: Weights,
    planted: Vec<(usize, usize)>,
    alpha_star: f64,
    split: SuiteSplit,
}

impl World {
    fn part(&self, ids: &[u64]) -> Vec<TaskInstance> {
        self.suite.select(ids).unwrap()
    }
}

fn world(sc: PlantedSuiteConfig) -> World {
    let (suite, m) = make_planted_suite(fixture_cfg(), &sc).unwrap();
    let split = split_suite(&suite, FRACTIONS, sc.seed).unwrap();
    World {
        suite,
        weights: m.weights,
        planted: m.planted,
        alpha_star: m.alpha_star,
        split,
    }
}

/// Pipeline spec from sampled contrastive traces on the probe split.
fn pipeline_spec(w: &World, k: usize, seed: u64, alpha: f64) -> (SteeringSpec, usize) {
    let probe = w.part(&w.split.probe);
    let traces = collect_traces(&w.weights, &probe, &SampleConfig::contrastive(seed, 1)).unwrap();
    let pairs = collect_pairs(&traces, None).unwrap();
    let id = identify(
        &pairs,
        &IdentifyConfig {
            k,
            alpha,
            ..Default::default()
        },
    )
    .unwrap();
    (id.spec, pairs.len())
}

fn random_trace(rng: &mut SeededRng, n_layers: usize, d_mlp: usize, prompt_len: usize, n_tokens: usize, zero_cols: &[usize]) -> ActivationTrace {
    let width = n_layers * d_mlp;
    let mut activations: Vec<f32> = (0..n_tokens * width).map(|_| rng.normal() as f32).collect();
    for t in 0..n_tokens {
        for &c in zero_cols {
            activations[t * width + c] = 0.0;
        }
    }
    ActivationTrace {
        tokens: (0..n_tokens as u32).collect(),
        prompt_len,
        n_layers,
        d_mlp,
        d_model: 4,
        activations,
        hidden: None,
    }
}

fn labeled(trace: ActivationTrace, id: u64, correct: bool, seed: u64) -> LabeledTrace {
    LabeledTrace {
        instance_id: id,
        trace,
        answer: None,
        correct,
        seed,
    }
}

fn random_pairs(seed: u64) -> Vec<ContrastivePair> {
    let mut rng = SeededRng::new(seed, 77);
    let (l, d) = (1 + rng.below(3), 1 + rng.below(8));
    let n = 1 + rng.below(12);
    // a few neurons silent everywhere: zero means on both sides
    let zero: Vec<usize> = (0..l * d).filter(|_| rng.uniform() < 0.2).collect();
    (0..n)
        .map(|p| {
            let (tp, tn) = (2 + rng.below(5), 2 + rng.below(5));
            ContrastivePair {
                instance_id: p as u64,
                positive: labeled(random_trace(&mut rng, l, d, 1, tp, &zero), p as u64, true, 0),
                negative: labeled(random_trace(&mut rng, l, d, 1, tn, &zero), p as u64, false, 1),
            }
        })
        .collect()
}

fn brute_means(t: &ActivationTrace) -> Vec<f64> {
    let width = t.n_layers * t.d_mlp;
    let mut out = vec![0.0f64; width];
    for (j, o) in out.iter_mut().enumerate() {
        let mut s = 0.0f64;
        for tok in 0..t.n_tokens() {
            s += t.activations[tok * width + j] as f64;
        }
        *o = s / t.n_tokens() as f64;
    }
    out
}

/// Independent double loop: neurons outer, pairs inner.
fn brute_scores(pairs: &[ContrastivePair]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let means: Vec<(Vec<f64>, Vec<f64>)> = pairs.iter().map(|p| (brute_means(&p.positive.trace), brute_means(&p.negative.trace))).collect();
    let width = means[0].0.len();
    let n = pairs.len() as f64;
    let (mut s, mut mp, mut mn) = (vec![0.0; width], vec![0.0; width], vec![0.0; width]);
    for j in 0..width {
        let (mut d, mut a, mut b) = (0.0f64, 0.0f64, 0.0f64);
        for (pos, neg) in &means {
            d += pos[j] - neg[j];
            a += pos[j];
            b += neg[j];
        }
        s[j] = d / n;
        mp[j] = a / n;
        mn[j] = b / n;
    }
    (s, mp, mn)
}

#[test]
fn c01_steering_identity() {
    let start = Instant::now();
    let mut cases = 0;
    let mut mismatches = 0;
    for m in 0..50u64 {
        let mut rng = SeededRng::new(m, 1);
        let cfg = ModelConfig {
            n_layers: 1 + rng.below(3),
            d_model: 4 * (1 + rng.below(3)),
            d_mlp: 4 + rng.below(12),
            n_heads: 2,
            vocab_size: 16 + rng.below(16),
            max_seq: 8,
        };
        let w = build_random_model(cfg, m).unwrap();
        for _ in 0..20 {
            let len = 1 + rng.below(cfg.max_seq);
            let tokens: Vec<u32> = (0..len).map(|_| rng.below(cfg.vocab_size) as u32).collect();
            let k = 1 + rng.below(cfg.n_neurons());
            let mut flat: Vec<usize> = (0..cfg.n_neurons()).collect();
            rng.shuffle(&mut flat);
            let entries = flat[..k]
                .iter()
                .map(|&f| SteeringEntry {
                    layer: f / cfg.d_mlp,
                    neuron: f % cfg.d_mlp,
                    value: 10.0 * rng.normal(),
                })
                .collect();
            let spec = SteeringSpec::new(0.0, Provenance::Md, entries).unwrap();
            let opts = |s| ForwardOptions {
                steering: s,
                capture: CaptureFlags::all(),
                ..Default::default()
            };
            let a = forward(&w, &tokens, &opts(None)).unwrap();
            let b = forward(&w, &tokens, &opts(Some(&spec))).unwrap();
            let bits = |o: &steerlab::model::ForwardOutput| -> Vec<u32> {
                let t = o.trace.as_ref().unwrap();
                o.logits
                    .iter()
                    .flatten()
                    .chain(&t.activations)
                    .chain(t.hidden.as_ref().unwrap())
                    .map(|v| v.to_bits())
                    .collect()
            };
            if bits(&a) != bits(&b) {
                mismatches += 1;
            }
            cases += 1;
        }
    }
    report(1, "alpha = 0 steering is bit-identical", mismatches == 0, &format!("{cases} cases, {mismatches} mismatches"), start);
}

#[test]
fn c02_md_score_oracle() {
    let start = Instant::now();
    let mut bad = 0;
    for seed in 0..50 {
        let pairs = random_pairs(seed);
        let table = md_scores(&pairs, Span::All).unwrap();
        let (s, mp, mn) = brute_scores(&pairs);
        let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        if !(same(&table.score, &s) && same(&table.mean_pos, &mp) && same(&table.mean_neg, &mn)) {
            bad += 1;
        }
    }
    report(2, "mean-difference scores match brute force exactly", bad == 0, &format!("50 pair sets, {bad} mismatches"), start);
}

#[test]
fn c03_polarity_oracle() {
    let start = Instant::now();
    let mut bad = 0;
    let mut boundary = 0;
    for seed in 0..50 {
        let pairs = random_pairs(seed);
        let table = md_scores(&pairs, Span::All).unwrap();
        let (_, mp, mn) = brute_scores(&pairs);
        let d = table.d_mlp;
        let want: Vec<(usize, usize)> = (0..mp.len()).filter(|&j| mp[j] * mn[j] < 0.0).map(|j| (j / d, j % d)).collect();
        boundary += (0..mp.len()).filter(|&j| mp[j] == 0.0 || mn[j] == 0.0).count();
        if polarity_filter(&table) != want {
            bad += 1;
        }
    }
    // hand-built boundary cases: exact zero on one side, opposite signs, same signs
    let mk = |vals: &[f32]| ActivationTrace {
        tokens: vec![0],
        prompt_len: 1,
        n_layers: 1,
        d_mlp: vals.len(),
        d_model: 1,
        activations: vals.to_vec(),
        hidden: None,
    };
    let pair = ContrastivePair {
        instance_id: 0,
        positive: labeled(mk(&[0.0, 1.0, 1.0, -2.0, 0.0]), 0, true, 0),
        negative: labeled(mk(&[-1.0, -1.0, 2.0, 3.0, 0.0]), 0, false, 1),
    };
    let t = md_scores(&[pair], Span::All).unwrap();
    let hand_ok = polarity_filter(&t) == vec![(0, 1), (0, 3)];
    report(
        3,
        "polarity filter matches sign-product oracle",
        bad == 0 && hand_ok && boundary > 0,
        &format!("50 fixtures ({boundary} zero-mean neurons), {bad} mismatches, hand cases ok = {hand_ok}"),
        start,
    );
}

#[test]
fn c04_planted_recovery() {
    let start = Instant::now();
    let mut ok = 0;
    let mut total = 0;
    let mut min_pairs = usize::MAX;
    for p in [3usize, 10, 25] {
        for seed in 0..10u64 {
            let w = world(PlantedSuiteConfig::new(p, 200, 0.5, 1000 + seed));
            let (spec, n_pairs) = pipeline_spec(&w, p, seed, 0.0);
            min_pairs = min_pairs.min(n_pairs);
            let got = spec.neurons();
            total += 1;
            if n_pairs >= 8 && got == w.planted {
                ok += 1;
            }
        }
    }
    report(4, "planted neurons recovered at K = P", ok == total, &format!("{ok}/{total} runs exact (P in 3, 10, 25; min pairs {min_pairs})"), start);
}

#[test]
fn c05_steering_lift() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in 0..3u64 {
        let w = world(PlantedSuiteConfig::new(5, 200, 0.5, 50 + seed));
        let (spec, _) = pipeline_spec(&w, 5, seed, w.alpha_star);
        let all = &w.suite.instances;
        let base = evaluate(&w.weights, all, None, GateMode::Off, 1, "base").unwrap();
        let test = w.part(&w.split.test);
        let steered = evaluate(&w.weights, &test, Some(&spec), GateMode::Off, 1, "steer").unwrap();
        pass &= (base.accuracy - 0.5).abs() <= 0.05 && steered.accuracy == 1.0;
        lines.push(format!("unsteered {:.3} steered {:.3}", base.accuracy, steered.accuracy));
    }
    report(5, "steering lift at alpha_star", pass, &lines.join("; "), start);
}

fn fixture_gate(seed: u64) -> GateConfig {
    GateConfig {
        seed,
        learning_rate: 1e-3,
        ..GateConfig::default()
    }
}

#[test]
fn c06_adaptive_gate_benefit() {
    let start = Instant::now();
    let mut strict = 0;
    let mut never_worse = true;
    let mut lines = Vec::new();
    for seed in 0..10u64 {
        let w = world(PlantedSuiteConfig::new(5, 200, 0.5, 300 + seed).mixed_harm());
        let (spec, _) = pipeline_spec(&w, 5, seed, w.alpha_star);
        let (gate, _) = fit_gate(&w.weights, &w.part(&w.split.gate_train), &w.part(&w.split.gate_val), &fixture_gate(seed), 1).unwrap();
        let test = w.part(&w.split.test);
        let always = evaluate(&w.weights, &test, Some(&spec), GateMode::Off, 1, "always").unwrap();
        let adaptive = evaluate(&w.weights, &test, Some(&spec), GateMode::Learned(&gate), 1, "adaptive").unwrap();
        never_worse &= adaptive.accuracy >= always.accuracy;
        strict += (adaptive.accuracy > always.accuracy) as usize;
        lines.push(format!("{:.2}/{:.2}", adaptive.accuracy, always.accuracy));
    }
    report(
        6,
        "adaptive gate beats always-on steering (mixed-harm)",
        never_worse && strict >= 8,
        &format!("strictly better on {strict}/10 seeds; adaptive/always = {}", lines.join(" ")),
        start,
    );
}

#[test]
fn c07_ablation_ordering() {
    let start = Instant::now();
    let mut pass = true;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let w = world(PlantedSuiteConfig::new(5, 200, 0.5, 700 + seed));
        let (probe, gt, gv, test) = (w.part(&w.split.probe), w.part(&w.split.gate_train), w.part(&w.split.gate_val), w.part(&w.split.test));
        let inputs = AblationInputs {
            weights: &w.weights,
            probe: &probe,
            gate_train: &gt,
            gate_val: &gv,
            test: &test,
        };
        let mut cfg = AblationConfig::new(50, w.alpha_star, seed, 1);
        cfg.gate = fixture_gate(seed);
        let res = run_ablation(&inputs, &cfg).unwrap();
        let acc = |name: &str| res.arms.iter().find(|(a, _)| a.name == name).unwrap().1.accuracy;
        let (full, no_ai, random) = (acc("full"), acc("w/o AI"), acc("random"));
        pass &= full >= no_ai && no_ai >= random;
        lines.push(format!("{full:.2}>={no_ai:.2}>={random:.2}"));
    }
    report(7, "ablation ordering full >= w/o AI >= random", pass, &lines.join(" "), start);
}

#[test]
fn c08_probe_pipeline() {
    let start = Instant::now();
    let x = FeatureMatrix::new(vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0], vec![5.0], vec![6.0]], vec![false, false, false, true, true, true]).unwrap();
    let f = f_statistic(&x).unwrap()[0];
    let f_ok = f == 13.5;

    let mut rng = SeededRng::new(8, 0);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..80 {
        let y = i % 2 == 0;
        let mut r: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        r[0] += if y { 3.0 } else { -3.0 };
        rows.push(r);
        labels.push(y);
    }
    let sep = FeatureMatrix::new(rows.clone(), labels.clone()).unwrap();
    let (_, fit) = fit_l1_logistic(&sep, 1e-3, 200).unwrap();
    let monotone = fit.objective.windows(2).all(|w| w[1] <= w[0]);
    let (cv, _) = cross_validate(&sep, &CvConfig::default()).unwrap();
    let sep_ok = cv.best_mean_auroc >= 0.99;

    let mut null = Vec::new();
    for s in 0..10u64 {
        let mut shuffled = labels.clone();
        SeededRng::new(s, 5).shuffle(&mut shuffled);
        let noise: Vec<Vec<f64>> = rows.iter().map(|r| r[1..].to_vec()).collect();
        let (cv, _) = cross_validate(&FeatureMatrix::new(noise, shuffled).unwrap(), &CvConfig { seed: s, ..CvConfig::default() }).unwrap();
        null.push(cv.mean_auroc.iter().sum::<f64>() / cv.mean_auroc.len() as f64);
    }
    let null_mean = null.iter().sum::<f64>() / null.len() as f64;
    let null_ok = (0.35..=0.65).contains(&null_mean);
    report(
        8,
        "probe pipeline",
        f_ok && monotone && sep_ok && null_ok,
        &format!("F = {f}; objective monotone = {monotone}; separable CV AUROC {:.4}; permutation null {null_mean:.3}", cv.best_mean_auroc),
        start,
    );
}

/// Mann-Whitney pairwise count with half credit for ties.
fn mw_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut n) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            n += 1.0;
            wins += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / n
}

#[test]
fn c09_auroc_oracle() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = SeededRng::new(seed, 9);
        let n = 2 + rng.below(60);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.5).collect();
        labels[0] = true;
        labels[1] = false;
        // coarse grid to force ties
        let scores: Vec<f64> = (0..n).map(|_| (rng.below(7) as f64) * 0.5).collect();
        worst = worst.max((auroc(&scores, &labels).unwrap() - mw_auroc(&scores, &labels)).abs());
    }
    report(9, "AUROC matches Mann-Whitney pair counting", worst <= 1e-12, &format!("max deviation {worst:e} over 100 sets"), start);
}

#[test]
fn c10_trajectory_closed_forms() {
    let start = Instant::now();
    let eps = 1e-6;
    let mut closed_ok = true;
    for l in 1..=6usize {
        for s in [0.5, 1.0, 3.0] {
            let pts: Vec<Vec<f64>> = (0..=l).map(|k| vec![1.0 + s * k as f64, 0.0, 0.0]).collect();
            let m = magnitude_of(&pts, eps).unwrap();
            let want = (1.0 / l as f64) * (l as f64 * s) / (l as f64 * s + eps);
            let a = angle_of(&pts, eps).unwrap().unwrap();
            closed_ok &= (m - want).abs() <= 1e-9 && a.abs() <= 1e-9;
        }
    }
    let mut exact = 0;
    for seed in 0..100u64 {
        let mut rng = SeededRng::new(seed, 10);
        let (nl, dm, prompt, gen) = (1 + rng.below(4), 2 + rng.below(6), 1 + rng.below(3), 1 + rng.below(4));
        let n = prompt + gen;
        let hidden: Vec<f32> = (0..n * (nl + 1) * dm).map(|_| rng.normal() as f32).collect();
        let t = ActivationTrace {
            tokens: vec![0; n],
            prompt_len: prompt,
            n_layers: nl,
            d_mlp: 1,
            d_model: dm,
            activations: vec![0.0; n * nl],
            hidden: Some(hidden.clone()),
        };
        let f = trajectory_features(&t, &TrajectoryConfig::default()).unwrap();
        // brute force straight from the flat buffer
        let (mut msum, mut asum) = (0.0, 0.0);
        for tok in prompt..n {
            let h = |l: usize| -> Vec<f64> {
                let at = (tok * (nl + 1) + l) * dm;
                hidden[at..at + dm].iter().map(|&v| v as f64).collect()
            };
            let mut path = 0.0;
            let mut turn = 0.0;
            for l in 0..nl {
                let (a, b) = (h(l), h(l + 1));
                path += a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                turn += (dot / (na * nb)).clamp(-1.0, 1.0).acos();
            }
            let (a, b) = (h(0), h(nl));
            let net = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let net_angle = (dot / (na * nb)).clamp(-1.0, 1.0).acos();
            msum += path / (net + eps) / nl as f64;
            asum += turn / (net_angle + eps) / nl as f64;
        }
        let m_bar = msum / gen as f64;
        let a_bar = asum / gen as f64;
        if f.m_bar == m_bar && f.a_bar == a_bar && f.count == gen {
            exact += 1;
        }
    }
    report(
        10,
        "trajectory closed forms and brute-force agreement",
        closed_ok && exact == 100,
        &format!("closed forms ok = {closed_ok}; {exact}/100 traces exact"),
        start,
    );
}

#[test]
fn c11_gradient_checks() {
    let start = Instant::now();
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
    let mut worst_gate = 0.0f64;
    for k in 0..10u64 {
        let mut rng = SeededRng::new(k, 11);
        let cfg = GateConfig {
            hidden: 8,
            seed: k,
            ..GateConfig::default()
        };
        let mut m = init_gate((0..5).collect(), vec![1.0; 5], &cfg).unwrap();
        let mut p: Vec<f64> = m.params().iter().map(|v| v + 0.3 * rng.normal()).collect();
        // b1 offsets keep hidden units off the ReLU kink
        for v in &mut p[5 + 40..5 + 48] {
            *v += 0.5;
        }
        m.set_params(&p).unwrap();
        let x = Dense {
            shape: [3, 5],
            data: (0..15).map(|_| rng.normal()).collect(),
        };
        let y = k % 2 == 0;
        let (_, g) = gate_loss_grad(&m, &x, y).unwrap();
        let fd = finite_diff_grad(
            |q| {
                let mut mm = m.clone();
                mm.set_params(q).unwrap();
                gate_loss_grad(&mm, &x, y).unwrap().0
            },
            &p,
            1e-5,
        )
        .unwrap();
        for (a, b) in g.iter().zip(&fd) {
            worst_gate = worst_gate.max(rel(*a, *b));
        }
    }
    let mut worst_probe = 0.0f64;
    for k in 0..10u64 {
        let mut rng = SeededRng::new(k, 12);
        let rows: Vec<Vec<f64>> = (0..20).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let labels: Vec<bool> = (0..20).map(|i| i % 3 == 0).collect();
        let x = FeatureMatrix::new(rows, labels).unwrap();
        let cw = (1.3, 0.7);
        let point: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let (gw, gb) = logistic_grad(&x, cw, &point[..4], point[4]);
        let fd = finite_diff_grad(|q| logistic_loss(&x, cw, &q[..4], q[4]), &point, 1e-6).unwrap();
        for (a, b) in gw.iter().chain([&gb]).zip(&fd) {
            worst_probe = worst_probe.max(rel(*a, *b));
        }
    }
    report(
        11,
        "analytic gradients match central differences",
        worst_gate <= 1e-4 && worst_probe <= 1e-4,
        &format!("max relative error gate {worst_gate:.2e}, probe {worst_probe:.2e}"),
        start,
    );
}

#[test]
fn c12_format_round_trips() {
    let start = Instant::now();
    let cfg = fixture_cfg();
    let w = build_random_model(ModelConfig { vocab_size: 32, ..cfg }, 3).unwrap();
    let bytes = model_to_bytes(&w).unwrap();
    let back = model_from_bytes(&bytes).unwrap();
    let model_ok = model_to_bytes(&back).unwrap() == bytes && back == w;

    let inst = TaskInstance {
        id: 4,
        prompt: vec![1, 2, 3],
        answer_tokens: vec![5],
        variant: steerlab::traces::Variant::Natural,
    };
    let traces = steerlab::traces::sample_traces(
        &w,
        &inst,
        &SampleConfig {
            capture_hidden: true,
            ..SampleConfig::contrastive(1, 3)
        },
        None,
    )
    .unwrap();
    let store = store_to_bytes(&traces).unwrap();
    let store_ok = store_from_bytes(&store).unwrap() == traces;

    let spec = SteeringSpec::new(
        0.3,
        Provenance::Md,
        vec![
            SteeringEntry {
                layer: 0,
                neuron: 3,
                value: 0.1 + 0.2,
            },
            SteeringEntry {
                layer: 2,
                neuron: 1,
                value: -1e-300,
            },
        ],
    )
    .unwrap();
    let spec_ok = steering_from_json(&steering_to_json(&spec).unwrap(), Some(&cfg)).unwrap() == spec;

    let x = FeatureMatrix::new((0..20).map(|i| vec![i as f64 * 0.37, (i % 3) as f64]).collect(), (0..20).map(|i| i >= 10).collect()).unwrap();
    let (_, probe) = cross_validate(&x, &CvConfig::default()).unwrap();
    let probe_ok = probe_from_json(&probe_to_json(&probe).unwrap()).unwrap() == probe;

    let gate = init_gate(vec![1, 5, 9], vec![0.1, 0.2, 1.0 / 3.0], &GateConfig { hidden: 4, ..GateConfig::default() }).unwrap();
    let gate_ok = gate_from_json(&gate_to_json(&gate).unwrap()).unwrap() == gate;

    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    let mut bad_version = bytes.clone();
    bad_version[8] = 99;
    let mut store_magic = store.clone();
    store_magic[2] ^= 0xff;
    let mut store_version = store.clone();
    store_version[8] = 99;
    let rejects = matches!(model_from_bytes(&bad_magic), Err(Error::BadMagic { .. }))
        && matches!(model_from_bytes(&bad_version), Err(Error::UnsupportedVersion { .. }))
        && matches!(store_from_bytes(&store_magic), Err(Error::BadMagic { .. }))
        && matches!(store_from_bytes(&store_version), Err(Error::UnsupportedVersion { .. }));
    let pass = model_ok && store_ok && spec_ok && probe_ok && gate_ok && rejects;
    report(
        12,
        "format round-trips and rejections",
        pass,
        &format!("model {model_ok}, store {store_ok}, spec {spec_ok}, probe {probe_ok}, gate {gate_ok}, bad magic/version rejected {rejects}"),
        start,
    );
}

/// Non-decreasing up to the first maximum, non-increasing after it, with the
/// maximum strictly inside the grid and strictly above both ends.
fn unimodal_interior(acc: &[f64]) -> bool {
    let peak = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let i = acc.iter().position(|&a| a == peak).unwrap();
    i > 0
        && i + 1 < acc.len()
        && acc[..=i].windows(2).all(|w| w[1] >= w[0])
        && acc[i..].windows(2).all(|w| w[1] <= w[0])
        && peak > acc[0]
        && peak > acc[acc.len() - 1]
}

#[test]
fn c13_sweep_shape() {
    let start = Instant::now();
    let mut pass = true;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let p = 5;
        let w = world(PlantedSuiteConfig::new(p, 200, 0.5, 900 + seed).mixed_harm());
        let probe = w.part(&w.split.probe);
        let traces = collect_traces(&w.weights, &probe, &SampleConfig::contrastive(seed, 1)).unwrap();
        let table = md_scores(&collect_pairs(&traces, None).unwrap(), Span::All).unwrap();
        let test = w.part(&w.split.test);
        let by_alpha = sweep(&w.weights, &test, &table, &DEFAULT_ALPHA_GRID, &[p], 1).unwrap();
        let alpha_acc: Vec<f64> = by_alpha.iter().map(|r| r.accuracy).collect();
        let by_k = sweep(&w.weights, &test, &table, &[w.alpha_star], &DEFAULT_K_GRID, 1).unwrap();
        let k_acc: Vec<f64> = by_k.iter().map(|r| r.accuracy).collect();
        let best_k = by_k.iter().cloned().fold(by_k[0], |a, r| if r.accuracy > a.accuracy { r } else { a });
        let largest = by_k.last().unwrap();
        let alpha_ok = unimodal_interior(&alpha_acc);
        let k_ok = largest.k >= 10 * p && largest.accuracy < best_k.accuracy && best_k.k <= 2 * p;
        pass &= alpha_ok && k_ok;
        let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>().join(",");
        lines.push(format!("alpha [{}] K [{}]", fmt(&alpha_acc), fmt(&k_acc)));
        // selection sanity: polarity-filtered candidates are planted + distractors
        let _ = select(&table, &SelectionConfig::top_k(p)).unwrap();
    }
    report(13, "sweep shape: interior alpha peak, K degradation", pass, &lines.join(" | "), start);
}
