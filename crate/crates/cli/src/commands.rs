//! The subcommands. Every command writes only under its output directory
//! and produces byte-identical files when rerun with the same inputs.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use blockdistill::data::Splits;
use blockdistill::netgraph::NetworkSpec;
use blockdistill::trainer::{
    evaluate, fine_tune, magnitude_prune, train, Metric, Net, PruneSpec, RunReport, TrainConfig,
};

use crate::config::{ExperimentConfig, SweepParam, SweepValue};
use crate::setup::{acquire_teacher, check_inputs, load_checkpoint, load_data, student_spec, write};
use crate::{CliError, CliResult};

/// Ordered `key=value` pairs of a run's `summary.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary(pub Vec<(String, String)>);

impl Summary {
    fn of_run(variant: &str, net: &Net, report: &RunReport) -> Summary {
        let mut s = Summary(Vec::new());
        s.push("variant", variant);
        s.push("depth", net.spec().weighted_layers());
        s.push("params", net.param_count());
        s.push("metric", metric_name(report.metric));
        s.push("final_val", report.final_val);
        s.push("final_test", report.final_test);
        s
    }

    fn push(&mut self, k: &str, v: impl ToString) {
        self.0.push((k.to_string(), v.to_string()));
    }

    pub fn get(&self, k: &str) -> Option<&str> {
        self.0.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str())
    }

    /// The summary as one space-separated line.
    pub fn line(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
    }

    pub fn parse(text: &str) -> Summary {
        Summary(
            text.split_whitespace()
                .filter_map(|kv| kv.split_once('='))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        )
    }
}

fn metric_name(m: Metric) -> &'static str {
    match m {
        Metric::Accuracy => "accuracy",
        Metric::PixelError => "pixel_error",
    }
}

fn write_run(dir: &Path, net: &Net, report: &RunReport, summary: &Summary) -> CliResult<()> {
    write(&dir.join("metrics.csv"), report.metrics_csv())?;
    net.save(&dir.join("model.litm"))?;
    write(&dir.join("summary.txt"), summary.line() + "\n")
}

fn runtime(e: csv::Error) -> CliError {
    CliError::Runtime(format!("csv: {e}"))
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).map_err(runtime)?;
    for r in rows {
        w.write_record(&r).map_err(runtime)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn thread_pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}

/// Result of `train`: the summary written to `summary.txt`.
pub fn cmd_train(cfg: &ExperimentConfig) -> CliResult<Summary> {
    check_inputs(cfg)?;
    let data = load_data(&cfg.dataset)?;
    let spec = student_spec(cfg, &data)?;
    let out = &cfg.out;
    let teacher = acquire_teacher(cfg, &data, out)?;
    let (net, report) = train(&cfg.train, teacher.as_ref(), &spec, &data)?;
    let summary = Summary::of_run(&cfg.train.variant.to_string(), &net, &report);
    write(&out.join("config.txt"), cfg.echo())?;
    write_run(out, &net, &report, &summary)?;
    Ok(summary)
}

/// One finished sweep point.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: SweepValue,
    pub seed: u64,
    pub final_val: f64,
    pub final_test: f64,
}

fn apply(cfg: &TrainConfig, param: SweepParam, value: SweepValue, seed: u64) -> TrainConfig {
    let mut c = cfg.clone();
    c.seed = seed;
    match (param, value) {
        (SweepParam::Tau, SweepValue::Number(v)) => c.distill.tau = v,
        (SweepParam::Alpha, SweepValue::Number(v)) => c.distill.alpha = v,
        (SweepParam::Beta, SweepValue::Number(v)) => c.distill.beta = v,
        (SweepParam::Penalty, SweepValue::Penalty(p)) => c.distill.penalty = p,
        _ => {}
    }
    c
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Runs every `(value, seed)` point of the configured sweep and writes
/// `sweep.csv` (one row per point) and `sweep_summary.csv` (mean and sample
/// standard deviation per value). Rows are sorted by value, then seed.
pub fn cmd_sweep(cfg: &ExperimentConfig, jobs: usize) -> CliResult<Vec<SweepRow>> {
    let (param, values) = cfg.sweep.grid()?;
    check_inputs(cfg)?;
    let data = load_data(&cfg.dataset)?;
    let spec = student_spec(cfg, &data)?;
    let out = &cfg.out;
    let points: Vec<(SweepValue, u64)> = values
        .iter()
        .flat_map(|&v| cfg.sweep.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let pool = thread_pool(jobs)?;
    let run_dir = |v: &SweepValue, s: u64| out.join("runs").join(format!("{}-{v}-seed{s}", param.as_str()));
    let mut rows: Vec<SweepRow> = if param == SweepParam::Sparsity {
        let base = match &cfg.prune.checkpoint {
            Some(p) => load_checkpoint("prune.checkpoint", p)?,
            None => {
                let teacher = acquire_teacher(cfg, &data, out)?;
                let (net, report) = train(&cfg.train, teacher.as_ref(), &spec, &data)?;
                let summary = Summary::of_run(&cfg.train.variant.to_string(), &net, &report);
                write_run(&out.join("base"), &net, &report, &summary)?;
                net
            }
        };
        pool.install(|| {
            points
                .par_iter()
                .map(|&(v, seed)| {
                    let SweepValue::Number(s) = v else { unreachable!("sparsity is numeric") };
                    let (net, report, summary) = prune_run(cfg, &base, s, seed, &data)?;
                    write_run(&run_dir(&v, seed), &net, &report, &summary)?;
                    Ok(SweepRow {
                        value: v,
                        seed,
                        final_val: report.final_val,
                        final_test: report.final_test,
                    })
                })
                .collect::<CliResult<Vec<_>>>()
        })?
    } else {
        let teacher = acquire_teacher(cfg, &data, out)?;
        pool.install(|| {
            points
                .par_iter()
                .map(|&(v, seed)| {
                    let tc = apply(&cfg.train, param, v, seed);
                    let (net, report) = train(&tc, teacher.as_ref(), &spec, &data)?;
                    let summary = Summary::of_run(&tc.variant.to_string(), &net, &report);
                    write_run(&run_dir(&v, seed), &net, &report, &summary)?;
                    Ok(SweepRow {
                        value: v,
                        seed,
                        final_val: report.final_val,
                        final_test: report.final_test,
                    })
                })
                .collect::<CliResult<Vec<_>>>()
        })?
    };
    rows.sort_by(|a, b| a.value.rank().total_cmp(&b.value.rank()).then(a.seed.cmp(&b.seed)));
    let p = param.as_str();
    let table = csv_text(
        &["param", "value", "seed", "val_acc", "test_acc"],
        rows.iter().map(|r| {
            vec![p.to_string(), r.value.to_string(), r.seed.to_string(), r.final_val.to_string(), r.final_test.to_string()]
        }),
    )?;
    write(&out.join("sweep.csv"), table)?;
    let mut summary_rows = Vec::new();
    for v in &values {
        let group: Vec<&SweepRow> = rows.iter().filter(|r| r.value == *v).collect();
        if group.is_empty() {
            continue;
        }
        let (vm, vs) = mean_std(&group.iter().map(|r| r.final_val).collect::<Vec<_>>());
        let (tm, ts) = mean_std(&group.iter().map(|r| r.final_test).collect::<Vec<_>>());
        summary_rows.push(vec![
            p.to_string(),
            v.to_string(),
            group.len().to_string(),
            vm.to_string(),
            vs.to_string(),
            tm.to_string(),
            ts.to_string(),
        ]);
    }
    let summary = csv_text(
        &["param", "value", "runs", "val_mean", "val_std", "test_mean", "test_std"],
        summary_rows,
    )?;
    write(&out.join("sweep_summary.csv"), summary)?;
    Ok(rows)
}

/// Prunes a copy of `base`, fine-tunes it with `seed` and reports.
fn prune_run(
    cfg: &ExperimentConfig,
    base: &Net,
    sparsity: f64,
    seed: u64,
    data: &Splits,
) -> CliResult<(Net, RunReport, Summary)> {
    let mut net = base.clone();
    let before = evaluate(&net, &data.test)?;
    let spec = PruneSpec {
        sparsity,
        scope: cfg.prune.scope,
        fine_tune_epochs: cfg.prune.fine_tune_epochs,
    };
    let achieved = magnitude_prune(&mut net, &spec)?;
    let pruned = evaluate(&net, &data.test)?;
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let report = fine_tune(&mut net, &tc, spec.fine_tune_epochs, data)?;
    let mut summary = Summary::of_run("pruned", &net, &report);
    summary.push("sparsity", sparsity);
    summary.push("achieved_sparsity", achieved);
    summary.push("test_before", before);
    summary.push("test_pruned", pruned);
    Ok((net, report, summary))
}

/// One evaluated point of the selection procedure.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: &'static str,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub val: f64,
}

/// Outcome of `select-hparams`.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub trace: Vec<TraceRow>,
}

/// Picks τ with a small student, then α at that τ, then β at that (τ, α),
/// each by mean validation score over the selection seeds. Ties go to the
/// smaller value. Writes `trace.csv` and `selected.txt`.
pub fn cmd_select_hparams(cfg: &ExperimentConfig, jobs: usize) -> CliResult<Selection> {
    check_inputs(cfg)?;
    let data = load_data(&cfg.dataset)?;
    let spec = student_spec(cfg, &data)?;
    let small = match &cfg.select.small_blocks {
        Some(b) => {
            let mut s = cfg.clone();
            if b.len() != s.student.blocks.len() {
                return Err(CliError::Config(format!(
                    "select.small_blocks has {} entries, student.blocks {}",
                    b.len(),
                    s.student.blocks.len()
                )));
            }
            s.student.blocks = b.clone();
            student_spec(&s, &data)?
        }
        None => spec.clone(),
    };
    let out = &cfg.out;
    let teacher = acquire_teacher(cfg, &data, out)?;
    let seeds = cfg.select.seeds.clone().unwrap_or_else(|| vec![cfg.train.seed]);
    if seeds.is_empty() {
        return Err(CliError::Config("select.seeds must not be empty".into()));
    }
    let pool = thread_pool(jobs)?;
    let higher_is_better = !spec.is_generator();
    let mut trace = Vec::new();
    let mut chosen = cfg.train.distill;
    for (step, grid) in [("tau", &cfg.select.tau), ("alpha", &cfg.select.alpha), ("beta", &cfg.select.beta)] {
        let net_spec: &NetworkSpec = if step == "tau" { &small } else { &spec };
        let mut grid = grid.clone();
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        let points: Vec<(f64, u64)> = grid.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
        let rows: Vec<TraceRow> = pool.install(|| {
            points
                .par_iter()
                .map(|&(v, seed)| {
                    let mut tc = cfg.train.clone();
                    tc.distill = chosen;
                    tc.seed = seed;
                    match step {
                        "tau" => tc.distill.tau = v,
                        "alpha" => tc.distill.alpha = v,
                        _ => tc.distill.beta = v,
                    }
                    let (_, report) = train(&tc, teacher.as_ref(), net_spec, &data)?;
                    Ok(TraceRow {
                        step,
                        tau: tc.distill.tau,
                        alpha: tc.distill.alpha,
                        beta: tc.distill.beta,
                        seed,
                        val: report.final_val,
                    })
                })
                .collect::<CliResult<Vec<_>>>()
        })?;
        let mut best: Option<(f64, f64)> = None;
        for &v in &grid {
            let scores: Vec<f64> = rows
                .iter()
                .zip(&points)
                .filter(|(_, p)| p.0 == v)
                .map(|(r, _)| r.val)
                .collect();
            let (m, _) = mean_std(&scores);
            let better = match best {
                None => true,
                Some((_, b)) if higher_is_better => m > b,
                Some((_, b)) => m < b,
            };
            if better {
                best = Some((v, m));
            }
        }
        let (v, _) = best.expect("grid is not empty");
        match step {
            "tau" => chosen.tau = v,
            "alpha" => chosen.alpha = v,
            _ => chosen.beta = v,
        }
        trace.extend(rows);
    }
    let table = csv_text(
        &["step", "tau", "alpha", "beta", "seed", "val_acc"],
        trace.iter().map(|r| {
            vec![
                r.step.to_string(),
                r.tau.to_string(),
                r.alpha.to_string(),
                r.beta.to_string(),
                r.seed.to_string(),
                r.val.to_string(),
            ]
        }),
    )?;
    write(&out.join("trace.csv"), table)?;
    write(
        &out.join("selected.txt"),
        format!("tau = {}\nalpha = {}\nbeta = {}\n", chosen.tau, chosen.alpha, chosen.beta),
    )?;
    Ok(Selection {
        tau: chosen.tau,
        alpha: chosen.alpha,
        beta: chosen.beta,
        trace,
    })
}

/// Prunes `prune.checkpoint`, fine-tunes with the masks held and writes the
/// usual run artifacts plus the achieved sparsity.
pub fn cmd_prune(cfg: &ExperimentConfig) -> CliResult<Summary> {
    let path = cfg
        .prune
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("prune.checkpoint is required".into()))?;
    let base = load_checkpoint("prune.checkpoint", path)?;
    check_inputs(cfg)?;
    let data = load_data(&cfg.dataset)?;
    let (net, report, summary) = prune_run(cfg, &base, cfg.prune.sparsity, cfg.train.seed, &data)?;
    write(&cfg.out.join("config.txt"), cfg.echo())?;
    write_run(&cfg.out, &net, &report, &summary)?;
    Ok(summary)
}

/// Evaluates `eval.checkpoint` on the non-empty splits and writes
/// `eval.csv`; returns `(split, value)` pairs.
pub fn cmd_eval(cfg: &ExperimentConfig) -> CliResult<Vec<(String, f64)>> {
    let path = cfg
        .eval_checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("eval.checkpoint is required".into()))?;
    let net = load_checkpoint("eval.checkpoint", path)?;
    check_inputs(cfg)?;
    let data = load_data(&cfg.dataset)?;
    let metric = metric_name(Metric::of(net.spec()));
    let mut rows = Vec::new();
    for ds in [&data.train, &data.val, &data.test] {
        if !ds.is_empty() {
            rows.push((ds.split.as_str().to_string(), evaluate(&net, ds)?));
        }
    }
    let table = csv_text(
        &["split", "metric", "value"],
        rows.iter().map(|(s, v)| vec![s.clone(), metric.to_string(), v.to_string()]),
    )?;
    write(&cfg.out.join("eval.csv"), table)?;
    Ok(rows)
}

/// One row of `table.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub run: String,
    pub variant: String,
    pub depth: String,
    pub params: String,
    pub final_val: String,
    pub final_test: String,
}

/// Merges the summaries of `dirs`, in the given order, into
/// `out/table.csv`.
pub fn cmd_compare(dirs: &[PathBuf], out: &Path) -> CliResult<Vec<CompareRow>> {
    if dirs.is_empty() {
        return Err(CliError::Config("compare needs at least one run directory".into()));
    }
    let mut rows = Vec::new();
    for dir in dirs {
        let path = dir.join("summary.txt");
        let text = std::fs::read_to_string(&path)
            .map_err(|_| CliError::Config(format!("{}: no summary.txt in this directory", dir.display())))?;
        let s = Summary::parse(&text);
        let field = |k: &str| {
            s.get(k)
                .map(str::to_string)
                .ok_or_else(|| CliError::Config(format!("{}: summary has no '{k}'", dir.display())))
        };
        rows.push(CompareRow {
            run: dir.display().to_string(),
            variant: field("variant")?,
            depth: field("depth")?,
            params: field("params")?,
            final_val: field("final_val")?,
            final_test: field("final_test")?,
        });
    }
    let table = csv_text(
        &["run", "variant", "depth", "params", "final_val", "final_test"],
        rows.iter().map(|r| {
            vec![
                r.run.clone(),
                r.variant.clone(),
                r.depth.clone(),
                r.params.clone(),
                r.final_val.clone(),
                r.final_test.clone(),
            ]
        }),
    )?;
    write(&out.join("table.csv"), table)?;
    Ok(rows)
}
