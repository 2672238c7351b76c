//! End-to-end pipelines: trace collection, identification, gated steering
//! evaluation, ablation arms and strength / top-K sweeps. Every function is
//! a pure function of its inputs; per-instance work runs in parallel and is
//! merged in instance order.

use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::{gate_decision, gate_features, gate_forward, select_gate_features, train_gate, GateConfig, GateModel, GateSample, TrainReport};
use crate::model::{generate, ActivationTrace, DecodeConfig, SteeringSpec, Weights};
use crate::probe::{cross_validate, feature_matrix, CvConfig, CvReport, ProbeModel};
use crate::rcn::{self, NeuronScoreTable, PolarityMode, Selection, SelectionConfig};
use crate::traces::{build_pairs, extract_answer, sample_traces, ContrastivePair, LabeledTrace, SampleConfig, Span, TaskInstance, Variant};

/// Greedy, unsteered decode with the activation trace.
pub fn baseline_trace(w: &Weights, inst: &TaskInstance, max_new: usize) -> Result<ActivationTrace> {
    let mut dc = DecodeConfig::greedy(max_new);
    dc.capture = true;
    let g = generate(w, &inst.prompt, &dc, None).map_err(|e| e.for_instance(inst.id))?;
    Ok(g.trace.expect("capture enabled"))
}

/// Samples traces for every instance (instance order, then sample order).
pub fn collect_traces(w: &Weights, instances: &[TaskInstance], sc: &SampleConfig) -> Result<Vec<LabeledTrace>> {
    let per: Vec<Vec<LabeledTrace>> = instances
        .par_iter()
        .map(|inst| sample_traces(w, inst, sc, None))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Pairs, or an error naming every instance without both outcomes.
pub fn collect_pairs(traces: &[LabeledTrace], balance: Option<(usize, usize)>) -> Result<Vec<ContrastivePair>> {
    let pairs = build_pairs(traces, balance);
    if pairs.is_empty() {
        let ids: BTreeSet<u64> = traces.iter().map(|t| t.instance_id).collect();
        let list: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
        return Err(Error::invalid(format!(
            "no contrastive pairs: instances lacking both correct and incorrect traces: {}",
            list.join(", ")
        )));
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentifyConfig {
    pub k: usize,
    pub polarity_filter: bool,
    pub polarity_mode: PolarityMode,
    pub span: Span,
    pub alpha: f64,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        IdentifyConfig {
            k: 50,
            polarity_filter: true,
            polarity_mode: PolarityMode::Averaged,
            span: Span::All,
            alpha: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Identified {
    pub table: NeuronScoreTable,
    pub kept: Vec<(usize, usize)>,
    pub selection: Selection,
    pub spec: SteeringSpec,
}

pub fn identify(pairs: &[ContrastivePair], cfg: &IdentifyConfig) -> Result<Identified> {
    let table = rcn::md_scores(pairs, cfg.span)?;
    identify_from_table(table, cfg)
}

pub fn identify_from_table(table: NeuronScoreTable, cfg: &IdentifyConfig) -> Result<Identified> {
    let kept = rcn::polarity_filter_with(&table, cfg.polarity_mode);
    let selection = rcn::select(
        &table,
        &SelectionConfig {
            k: cfg.k,
            polarity_filter: cfg.polarity_filter,
            polarity_mode: cfg.polarity_mode,
        },
    )?;
    let spec = rcn::build_steering(&selection, &table, cfg.alpha)?;
    Ok(Identified {
        table,
        kept,
        selection,
        spec,
    })
}

/// Who decides whether an instance gets steered.
#[derive(Debug, Clone, Copy)]
pub enum GateMode<'a> {
    /// Always steer.
    Off,
    /// Steer exactly the instances the unsteered model gets wrong.
    Oracle,
    Learned(&'a GateModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub id: u64,
    pub variant: Variant,
    pub baseline_answer: Option<u32>,
    pub baseline_correct: bool,
    pub gate_p: Option<f64>,
    pub steered: bool,
    pub answer: Option<u32>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub alpha: f64,
    pub k: usize,
    pub n: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub baseline_accuracy: f64,
    pub n_steered: usize,
    pub outcomes: Vec<InstanceOutcome>,
}

fn eval_one(w: &Weights, inst: &TaskInstance, spec: Option<&SteeringSpec>, gate: GateMode<'_>, max_new: usize) -> Result<InstanceOutcome> {
    let base = baseline_trace(w, inst, max_new)?;
    let baseline_answer = extract_answer(&base);
    let baseline_correct = inst.judge(baseline_answer);
    let (steer, gate_p) = match (spec, gate) {
        (None, _) => (false, None),
        (Some(_), GateMode::Off) => (true, None),
        (Some(_), GateMode::Oracle) => (!baseline_correct, None),
        (Some(_), GateMode::Learned(g)) => {
            let feats = gate_features(&base, &g.feature_indices, &g.sigma).map_err(|e| e.for_instance(inst.id))?;
            let p = gate_forward(g, &feats)?;
            (gate_decision(p, g.threshold), Some(p))
        }
    };
    let answer = if steer {
        let g = generate(w, &inst.prompt, &DecodeConfig::greedy(max_new), spec).map_err(|e| e.for_instance(inst.id))?;
        g.generated().last().copied()
    } else {
        baseline_answer
    };
    Ok(InstanceOutcome {
        id: inst.id,
        variant: inst.variant,
        baseline_answer,
        baseline_correct,
        gate_p,
        steered: steer,
        answer,
        correct: inst.judge(answer),
    })
}

/// Greedy evaluation of every instance, each counted exactly once.
pub fn evaluate(
    w: &Weights,
    instances: &[TaskInstance],
    spec: Option<&SteeringSpec>,
    gate: GateMode<'_>,
    max_new: usize,
    label: &str,
) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(Error::Empty("evaluation instances"));
    }
    if let Some(s) = spec {
        s.validate_for(&w.config)?;
    }
    let mut outcomes: Vec<InstanceOutcome> = instances
        .par_iter()
        .map(|inst| eval_one(w, inst, spec, gate, max_new))
        .collect::<Result<_>>()?;
    outcomes.sort_by_key(|o| o.id);
    if outcomes.windows(2).any(|p| p[0].id == p[1].id) {
        return Err(Error::invalid("duplicate instance in evaluation set"));
    }
    let n = outcomes.len();
    let n_correct = outcomes.iter().filter(|o| o.correct).count();
    let base = outcomes.iter().filter(|o| o.baseline_correct).count();
    Ok(EvalReport {
        label: label.to_string(),
        alpha: spec.map_or(0.0, |s| s.alpha),
        k: spec.map_or(0, |s| s.entries.len()),
        n,
        n_correct,
        accuracy: n_correct as f64 / n as f64,
        baseline_accuracy: base as f64 / n as f64,
        n_steered: outcomes.iter().filter(|o| o.steered).count(),
        outcomes,
    })
}

/// `label,alpha,K,n,n_correct,accuracy,baseline_accuracy,n_steered`
pub fn write_summary_csv<W: Write>(mut out: W, reports: &[EvalReport]) -> Result<()> {
    writeln!(out, "label,alpha,K,n,n_correct,accuracy,baseline_accuracy,n_steered")?;
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.label, r.alpha, r.k, r.n, r.n_correct, r.accuracy, r.baseline_accuracy, r.n_steered
        )?;
    }
    Ok(())
}

/// `label,id,variant,baseline_answer,baseline_correct,gate_p,steered,answer,correct`
pub fn write_outcomes_csv<W: Write>(mut out: W, reports: &[EvalReport]) -> Result<()> {
    writeln!(out, "label,id,variant,baseline_answer,baseline_correct,gate_p,steered,answer,correct")?;
    let opt = |v: Option<u32>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in reports {
        for o in &r.outcomes {
            let variant = match o.variant {
                Variant::Clean => "clean",
                Variant::Corrupt => "corrupt",
                Variant::Natural => "natural",
            };
            writeln!(
                out,
                "{},{},{variant},{},{},{},{},{},{}",
                r.label,
                o.id,
                opt(o.baseline_answer),
                o.baseline_correct as u8,
                o.gate_p.map(|p| p.to_string()).unwrap_or_default(),
                o.steered as u8,
                opt(o.answer),
                o.correct as u8
            )?;
        }
    }
    Ok(())
}

/// Gate samples: prompt rows of the unsteered greedy trace, label = the
/// unsteered answer is wrong.
pub fn gate_dataset(w: &Weights, instances: &[TaskInstance], max_new: usize) -> Result<Vec<(u64, ActivationTrace, bool)>> {
    instances
        .par_iter()
        .map(|inst| {
            let t = baseline_trace(w, inst, max_new)?;
            let wrong = !inst.judge(extract_answer(&t));
            Ok((inst.id, t, wrong))
        })
        .collect()
}

/// Feature selection and σ on the training instances, then training with
/// early stopping on the validation instances.
pub fn fit_gate(w: &Weights, train: &[TaskInstance], val: &[TaskInstance], cfg: &GateConfig, max_new: usize) -> Result<(GateModel, TrainReport)> {
    let tr = gate_dataset(w, train, max_new)?;
    let va = gate_dataset(w, val, max_new)?;
    let traces: Vec<&ActivationTrace> = tr.iter().map(|s| &s.1).collect();
    let labels: Vec<bool> = tr.iter().map(|s| s.2).collect();
    let (idx, sigma) = select_gate_features(&traces, &labels, cfg.n_features)?;
    let samples = |set: &[(u64, ActivationTrace, bool)]| -> Result<Vec<GateSample>> {
        set.iter()
            .map(|(id, t, y)| {
                Ok(GateSample {
                    instance_id: *id,
                    feats: gate_features(t, &idx, &sigma)?,
                    label: *y,
                })
            })
            .collect()
    };
    let (train_s, val_s) = (samples(&tr)?, samples(&va)?);
    train_gate(idx.clone(), sigma.clone(), &train_s, &val_s, cfg)
}

/// Probe baseline: last-token L1 logistic probe with cross-validated λ.
pub fn fit_trace_probe(traces: &[LabeledTrace], cv: &CvConfig) -> Result<(CvReport, ProbeModel)> {
    cross_validate(&feature_matrix(traces)?, cv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scoring {
    Md,
    Probe,
    Random,
}

/// One ablation arm: which importance scores, whether the polarity filter
/// runs, whether the gate decides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arm {
    pub name: &'static str,
    pub scoring: Scoring,
    pub polarity_filter: bool,
    pub adaptive: bool,
}

pub const FULL: Arm = Arm {
    name: "full",
    scoring: Scoring::Md,
    polarity_filter: true,
    adaptive: true,
};

/// Full method, then one toggle per arm.
pub fn ablation_arms() -> [Arm; 5] {
    [
        FULL,
        Arm {
            name: "w/o MD",
            scoring: Scoring::Probe,
            ..FULL
        },
        Arm {
            name: "w/o AS",
            polarity_filter: false,
            ..FULL
        },
        Arm {
            name: "w/o AI",
            adaptive: false,
            ..FULL
        },
        Arm {
            name: "random",
            scoring: Scoring::Random,
            ..FULL
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub k: usize,
    pub alpha: f64,
    pub seed: u64,
    pub samples_per_instance: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub gate: GateConfig,
    pub probe_cv: CvConfig,
}

impl AblationConfig {
    pub fn new(k: usize, alpha: f64, seed: u64, max_new_tokens: usize) -> Self {
        AblationConfig {
            k,
            alpha,
            seed,
            samples_per_instance: 8,
            temperature: 1.0,
            max_new_tokens,
            gate: GateConfig {
                seed,
                ..GateConfig::default()
            },
            probe_cv: CvConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationInputs<'a> {
    pub weights: &'a Weights,
    pub probe: &'a [TaskInstance],
    pub gate_train: &'a [TaskInstance],
    pub gate_val: &'a [TaskInstance],
    pub test: &'a [TaskInstance],
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub arms: Vec<(Arm, EvalReport)>,
    pub gate_report: TrainReport,
}

fn arm_err(arm: &Arm, e: Error) -> Error {
    Error::invalid(format!("ablation arm '{}' failed: {e}", arm.name))
}

/// Shared upstream artifacts (traces, scores, gate) are built once; each
/// arm then differs only in its toggle. Arms evaluate on the same test set.
pub fn run_ablation(inp: &AblationInputs<'_>, cfg: &AblationConfig) -> Result<AblationResult> {
    let w = inp.weights;
    let sc = SampleConfig {
        n: cfg.samples_per_instance,
        temperature: cfg.temperature,
        seed: cfg.seed,
        max_new_tokens: cfg.max_new_tokens,
        capture_hidden: false,
    };
    let traces = collect_traces(w, inp.probe, &sc)?;
    let pairs = collect_pairs(&traces, None)?;
    let table = rcn::md_scores(&pairs, Span::All)?;
    let (gate, gate_report) = fit_gate(w, inp.gate_train, inp.gate_val, &cfg.gate, cfg.max_new_tokens)?;

    let mut arms = Vec::new();
    for arm in ablation_arms() {
        let spec = match arm.scoring {
            Scoring::Md => identify_from_table(
                table.clone(),
                &IdentifyConfig {
                    k: cfg.k,
                    polarity_filter: arm.polarity_filter,
                    alpha: cfg.alpha,
                    ..IdentifyConfig::default()
                },
            )
            .map(|id| id.spec),
            Scoring::Probe => fit_trace_probe(&traces, &cfg.probe_cv).and_then(|(_, p)| rcn::probe_steering(&p, &w.config, cfg.k, cfg.alpha).map(|s| s.0)),
            Scoring::Random => rcn::random_steering(&w.config, cfg.k.min(w.config.n_neurons()), cfg.seed, &table, cfg.alpha),
        }
        .map_err(|e| arm_err(&arm, e))?;
        let mode = if arm.adaptive { GateMode::Learned(&gate) } else { GateMode::Off };
        let rep = evaluate(w, inp.test, Some(&spec), mode, cfg.max_new_tokens, arm.name).map_err(|e| arm_err(&arm, e))?;
        arms.push((arm, rep));
    }
    Ok(AblationResult { arms, gate_report })
}

pub const DEFAULT_ALPHA_GRID: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
pub const DEFAULT_K_GRID: [usize; 9] = [1, 2, 5, 10, 20, 50, 100, 500, 2000];

/// K values capped at the neuron count, deduplicated, ascending.
pub fn cap_k_grid(ks: &[usize], n_neurons: usize) -> Vec<usize> {
    let set: BTreeSet<usize> = ks.iter().map(|&k| k.clamp(1, n_neurons)).collect();
    set.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub k: usize,
    /// Neurons actually steered (below K on a shortfall).
    pub k_used: usize,
    pub accuracy: f64,
}

/// Accuracy over the full `alpha × K` grid (polarity-filtered md top-K,
/// steering always on).
pub fn sweep(
    w: &Weights,
    test: &[TaskInstance],
    table: &NeuronScoreTable,
    alphas: &[f64],
    ks: &[usize],
    max_new: usize,
) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() || ks.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a >= 0.0)) {
        return Err(Error::invalid(format!("sweep alpha {a} must be >= 0")));
    }
    let mut rows = Vec::with_capacity(alphas.len() * ks.len());
    for &k in &cap_k_grid(ks, w.config.n_neurons()) {
        let sel = rcn::select(table, &SelectionConfig::top_k(k))?;
        let spec = rcn::build_steering(&sel, table, 0.0)?;
        for &alpha in alphas {
            let s = spec.with_alpha(alpha)?;
            let rep = evaluate(w, test, Some(&s), GateMode::Off, max_new, "sweep")?;
            rows.push(SweepRow {
                alpha,
                k,
                k_used: sel.neurons.len(),
                accuracy: rep.accuracy,
            });
        }
    }
    Ok(rows)
}

/// `alpha,K,K_used,accuracy`
pub fn write_sweep_csv<W: Write>(mut out: W, rows: &[SweepRow]) -> Result<()> {
    writeln!(out, "alpha,K,K_used,accuracy")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.alpha, r.k, r.k_used, r.accuracy)?;
    }
    Ok(())
}
