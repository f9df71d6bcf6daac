use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use bird_core::analytics::{scores_by_label, sweep_to_csv};
use bird_core::attack::{AttackConfig, ScenarioConfig};
use bird_core::scenario_io::atomic_write;
use bird_core::{
    calibrate_threshold, evaluate, generate_scenario, heatmap, load_scenario, proxy_metrics,
    read_results, results_to_bytes, save_scenario, score_distributions, sweep, AblationMode,
    AblationThresholds, CalibrationPolicy, DefaultScenario, DefenseConfig, DefenseResult,
    SweepAxis, Verdict,
};
use serde::Serialize;

use crate::manifest::{read_manifest, write_manifest, FileDigest, RunManifest};
use crate::{
    CalibrateArgs, Command, DefendArgs, DefenseOpts, EvalArgs, GenArgs, HeatmapArgs, ReplayArgs,
    SweepArgs, Toggle,
};

/// A command that can be recorded in, and rebuilt from, a manifest.
enum Run {
    Gen(GenArgs),
    Defend(DefendArgs),
    Heatmap(HeatmapArgs),
    Sweep(SweepArgs),
    Calibrate(CalibrateArgs),
    Eval(EvalArgs),
}

struct Outcome {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seed: Option<u64>,
}

pub fn dispatch(command: Command) -> Result<()> {
    let run = match command {
        Command::Gen(a) => Run::Gen(a),
        Command::Defend(a) => Run::Defend(a),
        Command::Heatmap(a) => Run::Heatmap(a),
        Command::Sweep(a) => Run::Sweep(a),
        Command::Calibrate(a) => Run::Calibrate(a),
        Command::Eval(a) => Run::Eval(a),
        Command::Replay(a) => return replay(&a),
    };
    let manifest = execute(&run)?;
    let path = write_manifest(&manifest, &manifest.outputs[0].path)?;
    eprintln!("manifest: {}", path.display());
    Ok(())
}

impl Run {
    fn name(&self) -> &'static str {
        match self {
            Run::Gen(_) => "gen",
            Run::Defend(_) => "defend",
            Run::Heatmap(_) => "heatmap",
            Run::Sweep(_) => "sweep",
            Run::Calibrate(_) => "calibrate",
            Run::Eval(_) => "eval",
        }
    }

    fn config(&self) -> Result<serde_json::Value> {
        fn value<T: Serialize>(t: &T) -> Result<serde_json::Value> {
            Ok(serde_json::to_value(t)?)
        }
        match self {
            Run::Gen(a) => value(a),
            Run::Defend(a) => value(a),
            Run::Heatmap(a) => value(a),
            Run::Sweep(a) => value(a),
            Run::Calibrate(a) => value(a),
            Run::Eval(a) => value(a),
        }
    }

    fn from_manifest(m: &RunManifest) -> Result<Self> {
        let c = m.config.clone();
        Ok(match m.command.as_str() {
            "gen" => Run::Gen(serde_json::from_value(c)?),
            "defend" => Run::Defend(serde_json::from_value(c)?),
            "heatmap" => Run::Heatmap(serde_json::from_value(c)?),
            "sweep" => Run::Sweep(serde_json::from_value(c)?),
            "calibrate" => Run::Calibrate(serde_json::from_value(c)?),
            "eval" => Run::Eval(serde_json::from_value(c)?),
            other => bail!("manifest names unknown command {other:?}"),
        })
    }
}

fn execute(run: &Run) -> Result<RunManifest> {
    let outcome = match run {
        Run::Gen(a) => gen(a)?,
        Run::Defend(a) => defend(a)?,
        Run::Heatmap(a) => heatmap_cmd(a)?,
        Run::Sweep(a) => sweep_cmd(a)?,
        Run::Calibrate(a) => calibrate(a)?,
        Run::Eval(a) => eval(a)?,
    };
    let digests = |paths: &[PathBuf]| paths.iter().map(|p| FileDigest::of(p)).collect::<Result<Vec<_>>>();
    Ok(RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: run.name().to_string(),
        seed: outcome.seed,
        config: run.config()?,
        inputs: digests(&outcome.inputs)?,
        outputs: digests(&outcome.outputs)?,
    })
}

fn replay(args: &ReplayArgs) -> Result<()> {
    let recorded = read_manifest(&args.manifest)?;
    for input in &recorded.inputs {
        let now = FileDigest::of(&input.path)?;
        ensure!(
            now.sha256 == input.sha256,
            "input {} changed since the manifest was written",
            input.path.display()
        );
    }
    let run = Run::from_manifest(&recorded)?;
    let fresh = execute(&run)?;
    let mut mismatched = Vec::new();
    for (old, new) in recorded.outputs.iter().zip(&fresh.outputs) {
        if old != new {
            mismatched.push(old.path.display().to_string());
        }
    }
    if recorded.outputs.len() != fresh.outputs.len() {
        mismatched.push("output list".to_string());
    }
    ensure!(mismatched.is_empty(), "replay produced different outputs: {}", mismatched.join(", "));
    write_manifest(&fresh, &fresh.outputs[0].path)?;
    println!("replay ok: {} outputs match", fresh.outputs.len());
    Ok(())
}

fn load(path: &Path) -> Result<DefaultScenario> {
    load_scenario(path).with_context(|| format!("loading scenario {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

fn defense_config(opts: &DefenseOpts) -> DefenseConfig {
    DefenseConfig {
        k: opts.k,
        epsilon: opts.epsilon,
        consistency_metric: opts.metric,
        singularity_guard: opts.singularity_guard,
    }
}

fn gen(a: &GenArgs) -> Result<Outcome> {
    let cfg = ScenarioConfig {
        n_queries: a.n_queries,
        n_benign: a.n_benign,
        metric: a.similarity,
        attack: AttackConfig {
            m: a.m,
            poison_tightness: a.poison_tightness,
            poison_pull: a.poison_pull,
            benign_dispersion: a.benign_dispersion,
            dimension: a.dimension,
            seed: a.seed,
        },
    };
    let scenario: DefaultScenario = generate_scenario(&cfg)?;
    save_scenario(&scenario, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "wrote {}: {} queries, {} documents",
        a.out.display(),
        scenario.queries.len(),
        scenario.corpus.len()
    );
    Ok(Outcome {
        inputs: vec![],
        outputs: vec![a.out.clone()],
        seed: Some(a.seed),
    })
}

fn check_results(results: &[DefenseResult], config: &DefenseConfig) -> Result<()> {
    for r in results {
        ensure!(r.scored.len() == config.k, "query {} scored {} documents, expected {}", r.query_id, r.scored.len(), config.k);
        if r.mode == AblationMode::Composite {
            for d in &r.scored {
                let keep = d.score.is_finite() && d.score <= config.epsilon;
                ensure!(
                    (d.verdict == Verdict::Kept) == keep,
                    "verdict of {} for query {} disagrees with its score",
                    d.doc_id,
                    r.query_id
                );
            }
        }
    }
    Ok(())
}

fn defend(a: &DefendArgs) -> Result<Outcome> {
    let scenario = load(&a.scenario)?;
    let config = defense_config(&a.defense);
    let views = scenario.views(a.defense.scope, a.cache == Toggle::On)?;
    let thresholds = AblationThresholds {
        relevance: a.relevance_threshold,
        consistency: a.consistency_threshold,
    };
    let results = evaluate(&views, &config, a.mode, &thresholds)?;
    check_results(&results, &config)?;
    atomic_write(&a.out, &results_to_bytes(&results)?).with_context(|| format!("writing {}", a.out.display()))?;
    let kept: usize = results.iter().map(|r| r.clean_ids.len()).sum();
    println!("wrote {}: {} queries, {} documents kept", a.out.display(), results.len(), kept);
    Ok(Outcome {
        inputs: vec![a.scenario.clone()],
        outputs: vec![a.out.clone()],
        seed: None,
    })
}

fn heatmap_cmd(a: &HeatmapArgs) -> Result<Outcome> {
    let scenario = load(&a.scenario)?;
    let views = scenario.views(a.scope, true)?;
    let matrix = heatmap(&views, a.k)?;
    let cells = matrix.forward_column().into_iter().chain(matrix.backward_rows().into_iter().flatten());
    for c in cells {
        ensure!((0.0..=1.0).contains(&c), "heatmap cell {c} outside [0, 1]");
    }
    atomic_write(&a.out, matrix.to_csv().as_bytes()).with_context(|| format!("writing {}", a.out.display()))?;
    let mut outputs = vec![a.out.clone()];
    if let Some(svg) = &a.svg {
        atomic_write(svg, matrix.to_svg().as_bytes()).with_context(|| format!("writing {}", svg.display()))?;
        outputs.push(svg.clone());
    }
    println!(
        "wrote {}: {} queries, mean forward poison frequency {:.3} at ranks 1-5",
        a.out.display(),
        matrix.num_queries,
        matrix.forward_mean(1, 5.min(a.k))
    );
    Ok(Outcome {
        inputs: vec![a.scenario.clone()],
        outputs,
        seed: None,
    })
}

fn sweep_cmd(a: &SweepArgs) -> Result<Outcome> {
    let axis = SweepAxis::parse(&a.axis, &a.values)?;
    let scenario = load(&a.scenario)?;
    let rows = sweep(&scenario, &defense_config(&a.defense), a.defense.scope, &axis)?;
    ensure!(rows.len() == axis.len(), "sweep produced {} rows for {} values", rows.len(), axis.len());
    atomic_write(&a.out, sweep_to_csv(axis.name(), &rows).as_bytes())
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {}: {} rows over {}", a.out.display(), rows.len(), axis.name());
    Ok(Outcome {
        inputs: vec![a.scenario.clone()],
        outputs: vec![a.out.clone()],
        seed: None,
    })
}

/// Reads `label,score` rows; a header line is optional and `inf` is accepted.
fn read_scores_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut poison = Vec::new();
    let mut benign = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("label")) {
            continue;
        }
        let (label, score) = line
            .split_once(',')
            .ok_or_else(|| anyhow!("{}:{}: expected `label,score`", path.display(), i + 1))?;
        let score: f64 = score
            .trim()
            .parse()
            .map_err(|_| anyhow!("{}:{}: bad score {:?}", path.display(), i + 1, score.trim()))?;
        match label.trim() {
            "poison" => poison.push(score),
            "benign" => benign.push(score),
            other => bail!("{}:{}: unknown label {other:?}", path.display(), i + 1),
        }
    }
    Ok((poison, benign))
}

#[derive(Serialize)]
struct CalibrationReport {
    policy: CalibrationPolicy,
    poison_samples: usize,
    benign_samples: usize,
    #[serde(flatten)]
    calibration: bird_core::Calibration,
}

fn calibrate(a: &CalibrateArgs) -> Result<Outcome> {
    let (input, (poison, benign)) = match (&a.results, &a.scores) {
        (Some(results), None) => {
            let file = std::fs::File::open(results).with_context(|| format!("reading {}", results.display()))?;
            let parsed = read_results(std::io::BufReader::new(file))
                .with_context(|| format!("parsing {}", results.display()))?;
            let (benign, poison) = scores_by_label(&parsed);
            (results.clone(), (poison, benign))
        }
        (None, Some(scores)) => (scores.clone(), read_scores_csv(scores)?),
        _ => bail!("pass exactly one of --results or --scores"),
    };
    let policy = match a.fixed {
        Some(epsilon) => CalibrationPolicy::Fixed { epsilon },
        None => CalibrationPolicy::Quantile {
            q: a.q,
            fallback: a.fallback,
        },
    };
    let calibration = calibrate_threshold(&poison, &benign, policy)?;
    write_json(
        &a.out,
        &CalibrationReport {
            policy,
            poison_samples: poison.len(),
            benign_samples: benign.len(),
            calibration,
        },
    )?;
    println!("epsilon = {}", calibration.epsilon);
    Ok(Outcome {
        inputs: vec![input],
        outputs: vec![a.out.clone()],
        seed: None,
    })
}

#[derive(Serialize)]
struct EvalReport {
    metrics: bird_core::ProxyMetrics,
    scores: bird_core::ScoreSummary,
}

fn eval(a: &EvalArgs) -> Result<Outcome> {
    let scenario = load(&a.scenario)?;
    let file = std::fs::File::open(&a.results).with_context(|| format!("reading {}", a.results.display()))?;
    let results = read_results(std::io::BufReader::new(file))
        .with_context(|| format!("parsing {}", a.results.display()))?;
    let metrics = proxy_metrics(&results, &scenario)?;
    write_json(
        &a.out,
        &EvalReport {
            metrics,
            scores: score_distributions(&results),
        },
    )?;
    println!(
        "leak {:.3}, gold retention {:.3}, precision {:.3}, recall {:.3} over {} queries",
        metrics.poison_leak_rate,
        metrics.gold_retention,
        metrics.filter_precision,
        metrics.filter_recall,
        metrics.num_queries
    );
    Ok(Outcome {
        inputs: vec![a.scenario.clone(), a.results.clone()],
        outputs: vec![a.out.clone()],
        seed: None,
    })
}
