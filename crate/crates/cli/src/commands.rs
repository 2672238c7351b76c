use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use steerlab::experiment::{
    self, ablation_arms, collect_pairs, collect_traces, fit_gate, fit_trace_probe, run_ablation, AblationConfig, AblationInputs, GateMode,
    IdentifyConfig,
};
use steerlab::gate::{load_gate, save_gate};
use steerlab::model::{generate, load_model, save_model, DecodeConfig, SteeringSpec, Weights};
use steerlab::probe::{load_probe, save_probe};
use steerlab::rcn::{self, load_steering, save_steering, write_score_csv, NeuronScoreTable};
use steerlab::tasks::{load_split, make_arithmetic_suite, make_planted_suite, save_split, save_suite, split_suite, load_suite, PlantedSuiteConfig, SuiteSplit, TaskSuite};
use steerlab::traces::{load_store, save_store, trace_mean, ContrastivePair, SampleConfig, Span, TaskInstance};
use steerlab::trajectory::{activation_shift, trajectory_features, write_shift_csv, write_summary_csv, write_token_csv, TrajectoryConfig};

use crate::config::{Baseline, ExperimentConfig, GateChoice, SplitName, WorldKind};
use crate::{log, CliError};

type Res<T = ()> = Result<T, CliError>;

/// Loaded suite, its model and split.
struct Ctx {
    suite: TaskSuite,
    weights: Weights,
    split: SuiteSplit,
}

impl Ctx {
    fn part(&self, which: SplitName) -> Res<Vec<TaskInstance>> {
        let ids = match which {
            SplitName::Probe => &self.split.probe,
            SplitName::GateTrain => &self.split.gate_train,
            SplitName::GateVal => &self.split.gate_val,
            SplitName::Test => &self.split.test,
        };
        Ok(self.suite.select(ids)?)
    }

    fn max_new(&self) -> usize {
        self.suite.metadata.max_new_tokens
    }
}

pub fn require(path: &Path, producer: &str) -> Res {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Data(format!("missing input {} (produced by `steerlab {producer}`)", path.display())))
    }
}

fn load_ctx(cfg: &ExperimentConfig) -> Res<Ctx> {
    let suite_path = cfg.suite_path();
    require(&suite_path, "make-suite")?;
    let suite = load_suite(&suite_path)?;
    let model_path = match (&cfg.model, &suite.model_file) {
        (Some(p), _) => p.clone(),
        (None, Some(f)) => suite_path.parent().unwrap_or(Path::new(".")).join(f),
        (None, None) => return Err(CliError::Data(format!("suite {} names no model file and none was configured", suite_path.display()))),
    };
    require(&model_path, "make-suite")?;
    let weights = load_model(&model_path)?;
    let split_path = cfg.split_path();
    let split = if split_path.exists() {
        load_split(&split_path)?
    } else {
        log(&format!("{} not found; deriving the split from the seed", split_path.display()));
        split_suite(&suite, cfg.fractions, cfg.seed)?
    };
    split.assert_disjoint()?;
    Ok(Ctx { suite, weights, split })
}

fn csv<F>(path: PathBuf, f: F) -> Res
where
    F: FnOnce(&mut BufWriter<File>) -> steerlab::Result<()>,
{
    let mut w = BufWriter::new(File::create(&path)?);
    f(&mut w)?;
    w.flush()?;
    log(&format!("wrote {}", path.display()));
    Ok(())
}

fn json<T: Serialize>(path: PathBuf, v: &T) -> Res {
    std::fs::write(&path, serde_json::to_string_pretty(v)? + "\n")?;
    log(&format!("wrote {}", path.display()));
    Ok(())
}

/// Configured strength, else the suite's calibrated one, else the middle of
/// the grid.
fn resolve_alpha(cfg: &ExperimentConfig, suite: &TaskSuite) -> f64 {
    cfg.alpha
        .or(suite.metadata.alpha_star)
        .unwrap_or(cfg.alphas[cfg.alphas.len() / 2])
}

fn load_pairs(cfg: &ExperimentConfig) -> Res<Vec<ContrastivePair>> {
    let path = cfg.out("pairs.bin");
    require(&path, "gen-data")?;
    let flat = load_store(&path)?;
    if flat.len() % 2 != 0 {
        return Err(CliError::Data(format!("{}: odd number of traces in a pair store", path.display())));
    }
    let mut it = flat.into_iter();
    let mut pairs = Vec::new();
    while let (Some(positive), Some(negative)) = (it.next(), it.next()) {
        pairs.push(ContrastivePair {
            instance_id: positive.instance_id,
            positive,
            negative,
        });
    }
    Ok(pairs)
}

fn score_table(cfg: &ExperimentConfig) -> Res<NeuronScoreTable> {
    Ok(rcn::md_scores(&load_pairs(cfg)?, Span::All)?)
}

pub fn make_suite(cfg: &ExperimentConfig) -> Res {
    let (mut suite, weights) = match cfg.world {
        WorldKind::Planted | WorldKind::MixedHarm => {
            let mut sc = PlantedSuiteConfig::new(cfg.planted, cfg.instances, cfg.corrupt_rate, cfg.seed);
            if cfg.world == WorldKind::MixedHarm {
                sc = sc.mixed_harm();
            }
            let (suite, model) = make_planted_suite(cfg.model_shape, &sc)?;
            log(&format!("planted {:?}, alpha* = {:.4}", model.planted, model.alpha_star));
            (suite, model.weights)
        }
        WorldKind::Arithmetic => make_arithmetic_suite(cfg.model_shape, cfg.instances, cfg.noise, cfg.seed)?,
    };
    let suite_path = cfg.suite_path();
    let dir = suite_path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    suite.model_file = Some("model.bin".into());
    save_model(dir.join("model.bin"), &weights)?;
    save_suite(&suite_path, &suite)?;
    let split = split_suite(&suite, cfg.fractions, cfg.seed)?;
    save_split(cfg.split_path(), &split)?;
    let sizes = split.parts().map(|p| p.len());
    log(&format!(
        "suite {} with {} instances; split probe/gate-train/gate-val/test = {:?}",
        suite.name,
        suite.instances.len(),
        sizes
    ));
    Ok(())
}

#[derive(Serialize)]
struct InstancePairs {
    id: u64,
    n_correct: usize,
    n_incorrect: usize,
    n_pairs: usize,
}

#[derive(Serialize)]
struct GenDataSummary {
    samples_per_instance: usize,
    temperature: f64,
    n_traces: usize,
    n_pairs: usize,
    instances: Vec<InstancePairs>,
}

pub fn gen_data(cfg: &ExperimentConfig) -> Res {
    let ctx = load_ctx(cfg)?;
    let probe = ctx.part(SplitName::Probe)?;
    let sc = SampleConfig {
        n: cfg.samples,
        temperature: cfg.temperature,
        seed: cfg.seed,
        max_new_tokens: ctx.max_new(),
        capture_hidden: false,
    };
    let traces = collect_traces(&ctx.weights, &probe, &sc)?;
    let pairs = collect_pairs(&traces, cfg.balance.map(|[p, n]| (p, n)))?;

    save_store(cfg.out("traces.bin"), &traces)?;
    let flat: Vec<_> = pairs.iter().flat_map(|p| [p.positive.clone(), p.negative.clone()]).collect();
    save_store(cfg.out("pairs.bin"), &flat)?;
    csv(cfg.out("pairs.csv"), |w| {
        writeln!(w, "instance_id,positive_seed,negative_seed")?;
        for p in &pairs {
            writeln!(w, "{},{},{}", p.instance_id, p.positive.seed, p.negative.seed)?;
        }
        Ok(())
    })?;
    let instances = probe
        .iter()
        .map(|inst| {
            let mine = traces.iter().filter(|t| t.instance_id == inst.id);
            let n_correct = mine.clone().filter(|t| t.correct).count();
            InstancePairs {
                id: inst.id,
                n_correct,
                n_incorrect: mine.count() - n_correct,
                n_pairs: pairs.iter().filter(|p| p.instance_id == inst.id).count(),
            }
        })
        .collect();
    json(
        cfg.out("gen_data.json"),
        &GenDataSummary {
            samples_per_instance: cfg.samples,
            temperature: cfg.temperature,
            n_traces: traces.len(),
            n_pairs: pairs.len(),
            instances,
        },
    )?;
    log(&format!("{} traces, {} pairs", traces.len(), pairs.len()));
    Ok(())
}

#[derive(Serialize)]
struct SelectionDump {
    requested: usize,
    selected: usize,
    shortfall: bool,
    polarity_filter: bool,
    polarity_candidates: usize,
    alpha: f64,
    neurons: Vec<(usize, usize)>,
}

pub fn identify(cfg: &ExperimentConfig) -> Res {
    let suite_path = cfg.suite_path();
    require(&suite_path, "make-suite")?;
    let suite = load_suite(&suite_path)?;
    let alpha = resolve_alpha(cfg, &suite);
    let pairs = load_pairs(cfg)?;
    let id = experiment::identify(
        &pairs,
        &IdentifyConfig {
            k: cfg.k,
            polarity_filter: cfg.polarity_filter,
            alpha,
            ..IdentifyConfig::default()
        },
    )?;
    save_steering(cfg.out("spec.json"), &id.spec)?;
    csv(cfg.out("scores.csv"), |w| write_score_csv(w, &id.table, &id.kept))?;
    if id.selection.shortfall() {
        log(&format!(
            "shortfall: asked for K = {}, only {} candidates",
            id.selection.requested,
            id.selection.neurons.len()
        ));
    }
    json(
        cfg.out("selection.json"),
        &SelectionDump {
            requested: id.selection.requested,
            selected: id.selection.neurons.len(),
            shortfall: id.selection.shortfall(),
            polarity_filter: cfg.polarity_filter,
            polarity_candidates: id.kept.len(),
            alpha,
            neurons: id.selection.neurons.clone(),
        },
    )
}

/// Strength-free spec for the configured baseline.
fn baseline_spec(cfg: &ExperimentConfig, w: &Weights) -> Res<SteeringSpec> {
    Ok(match cfg.baseline {
        Baseline::Md => {
            let path = cfg.out("spec.json");
            require(&path, "identify")?;
            load_steering(&path, Some(&w.config))?
        }
        Baseline::Probe => {
            let path = cfg.out("probe.json");
            require(&path, "probe")?;
            rcn::probe_steering(&load_probe(&path)?, &w.config, cfg.k, 0.0)?.0
        }
        Baseline::Random => rcn::random_steering(&w.config, cfg.k.min(w.config.n_neurons()), cfg.seed, &score_table(cfg)?, 0.0)?,
    })
}

pub fn steer_eval(cfg: &ExperimentConfig) -> Res {
    let ctx = load_ctx(cfg)?;
    let instances = ctx.part(cfg.eval_split)?;
    let spec = baseline_spec(cfg, &ctx.weights)?;
    let gate = match cfg.gate {
        GateChoice::Learned => {
            let path = cfg.out("gate.json");
            require(&path, "train-gate")?;
            Some(load_gate(&path)?)
        }
        _ => None,
    };
    let mode = match (cfg.gate, &gate) {
        (GateChoice::Learned, Some(g)) => GateMode::Learned(g),
        (GateChoice::Oracle, _) => GateMode::Oracle,
        _ => GateMode::Off,
    };
    let label = match cfg.baseline {
        Baseline::Md => "md",
        Baseline::Probe => "probe",
        Baseline::Random => "random",
    };
    let mut reports = vec![experiment::evaluate(&ctx.weights, &instances, None, GateMode::Off, ctx.max_new(), "unsteered")?];
    for &alpha in &cfg.alphas {
        let s = spec.with_alpha(alpha)?;
        let rep = experiment::evaluate(&ctx.weights, &instances, Some(&s), mode, ctx.max_new(), label)?;
        log(&format!("{label} alpha {alpha}: accuracy {:.4} ({} steered)", rep.accuracy, rep.n_steered));
        reports.push(rep);
    }
    csv(cfg.out("eval_summary.csv"), |w| experiment::write_summary_csv(w, &reports))?;
    csv(cfg.out("eval_outcomes.csv"), |w| experiment::write_outcomes_csv(w, &reports))
}

pub fn probe(cfg: &ExperimentConfig) -> Res {
    let path = cfg.out("traces.bin");
    require(&path, "gen-data")?;
    let traces = load_store(&path)?;
    let (cv, model) = fit_trace_probe(&traces, &cfg.probe_cv)?;
    log(&format!("probe: best lambda {}, mean AUROC {:.4}, {} nonzero", cv.best_lambda, cv.best_mean_auroc, model.nonzero()));
    save_probe(cfg.out("probe.json"), &model)?;
    csv(cfg.out("probe_cv.csv"), |w| cv.write_csv(w))
}

pub fn train_gate(cfg: &ExperimentConfig) -> Res {
    let ctx = load_ctx(cfg)?;
    let (gate, report) = fit_gate(
        &ctx.weights,
        &ctx.part(SplitName::GateTrain)?,
        &ctx.part(SplitName::GateVal)?,
        &cfg.gate_config(),
        ctx.max_new(),
    )?;
    log(&format!("gate: best epoch {}, early stop {}", report.best_epoch, report.stopped_early));
    save_gate(cfg.out("gate.json"), &gate)?;
    csv(cfg.out("gate_training.csv"), |w| report.write_csv(w))
}

pub fn trajectory(cfg: &ExperimentConfig) -> Res {
    let ctx = load_ctx(cfg)?;
    let instances = ctx.part(cfg.eval_split)?;
    let spec_path = cfg.out("spec.json");
    let spec = if spec_path.exists() {
        Some(load_steering(&spec_path, Some(&ctx.weights.config))?)
    } else {
        log("no spec.json; computing unsteered trajectories only");
        None
    };
    let tc = TrajectoryConfig {
        include_prompt: cfg.include_prompt,
        ..TrajectoryConfig::default()
    };
    let mut dc = DecodeConfig::greedy(ctx.max_new());
    dc.capture_hidden = true;
    let run = |inst: &TaskInstance, s: Option<&SteeringSpec>| -> steerlab::Result<_> {
        let g = generate(&ctx.weights, &inst.prompt, &dc, s).map_err(|e| e.for_instance(inst.id))?;
        let t = g.trace.expect("capture enabled");
        let f = trajectory_features(&t, &tc).map_err(|e| e.for_instance(inst.id))?;
        Ok(((inst.id, f), trace_mean(&t, Span::All)?))
    };
    let plain: Vec<_> = instances.par_iter().map(|i| run(i, None)).collect::<steerlab::Result<_>>()?;
    let (rows, before): (Vec<_>, Vec<_>) = plain.into_iter().unzip();
    csv(cfg.out("trajectory_tokens.csv"), |w| write_token_csv(w, &rows))?;
    csv(cfg.out("trajectory_summary.csv"), |w| write_summary_csv(w, &rows))?;
    if let Some(spec) = &spec {
        let steered: Vec<_> = instances.par_iter().map(|i| run(i, Some(spec))).collect::<steerlab::Result<_>>()?;
        let (rows, after): (Vec<_>, Vec<_>) = steered.into_iter().unzip();
        csv(cfg.out("trajectory_steered_tokens.csv"), |w| write_token_csv(w, &rows))?;
        csv(cfg.out("trajectory_steered_summary.csv"), |w| write_summary_csv(w, &rows))?;
        let shifts = activation_shift(&before, &after, &spec.neurons())?;
        csv(cfg.out("activation_shift.csv"), |w| write_shift_csv(w, &shifts))?;
    }
    Ok(())
}

pub fn ablate(cfg: &ExperimentConfig) -> Res {
    let ctx = load_ctx(cfg)?;
    let (probe, gt, gv, test) = (
        ctx.part(SplitName::Probe)?,
        ctx.part(SplitName::GateTrain)?,
        ctx.part(SplitName::GateVal)?,
        ctx.part(cfg.eval_split)?,
    );
    let mut ac = AblationConfig::new(cfg.k, resolve_alpha(cfg, &ctx.suite), cfg.seed, ctx.max_new());
    ac.samples_per_instance = cfg.samples;
    ac.temperature = cfg.temperature;
    ac.gate = cfg.gate_config();
    ac.probe_cv = cfg.probe_cv.clone();
    let res = run_ablation(
        &AblationInputs {
            weights: &ctx.weights,
            probe: &probe,
            gate_train: &gt,
            gate_val: &gv,
            test: &test,
        },
        &ac,
    )?;
    for (arm, rep) in &res.arms {
        log(&format!("{:<8} accuracy {:.4}", arm.name, rep.accuracy));
    }
    let reports: Vec<_> = res.arms.iter().map(|(_, r)| r.clone()).collect();
    csv(cfg.out("ablation_summary.csv"), |w| experiment::write_summary_csv(w, &reports))?;
    csv(cfg.out("ablation_outcomes.csv"), |w| experiment::write_outcomes_csv(w, &reports))?;
    csv(cfg.out("ablation_gate_training.csv"), |w| res.gate_report.write_csv(w))?;
    json(cfg.out("ablation_arms.json"), &ablation_arms())
}

pub fn sweep(cfg: &ExperimentConfig) -> Res {
    let ctx = load_ctx(cfg)?;
    let table = score_table(cfg)?;
    let rows = experiment::sweep(&ctx.weights, &ctx.part(cfg.eval_split)?, &table, &cfg.sweep_alphas, &cfg.sweep_ks, ctx.max_new())?;
    csv(cfg.out("sweep.csv"), |w| experiment::write_sweep_csv(w, &rows))
}
