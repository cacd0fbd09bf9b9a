// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use circuitquant::acdc::{run_acdc, write_score_csv, Method};
use circuitquant::eval::{
    epsilon_summary, faithfulness, generate_planted, incremental_quant_sweep, mantissa_diagnostic,
    precision_ablation, resident_weight_bytes, roc_sweep, underflow_diagnostic, write_precision_csv,
    write_quant_csv, write_roc_csv, PlantConfig, RunReport, TaskInfo,
};
use circuitquant::model::{load_weights, save_weights};
use circuitquant::patching::{load_dataset, save_dataset};
use circuitquant::scheduler::{ablate, simulate, write_trace_csv, StreamConfig, Workload};
use circuitquant::PlantedTask32;

use crate::config::Resolved;
use crate::fail::{CliResult, Failure};

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const TASK_FILE: &str = "task.json";

/// Scheduler workload: per-step transfer, low, high and sync seconds.
const SCHED_TIMES: (f64, f64, f64, f64) = (0.006, 0.012, 0.003, 0.0005);
const SCHED_STEPS: usize = 8;

fn io_at(path: &Path) -> impl Fn(circuitquant::Error) -> Failure + '_ {
    move |e| match Failure::from(e) {
        Failure::Io(m) => Failure::Io(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

/// The task named by `--weights` (with `dataset.jsonl` and `task.json`
/// beside it unless `--dataset` says otherwise), or a fresh one from the
/// seed.
fn load_task(cfg: &Resolved) -> CliResult<PlantedTask32> {
    let Some(weights) = &cfg.weights else {
        if cfg.dataset.is_some() {
            return Err(Failure::Config("dataset: needs --weights as well".into()));
        }
        return Ok(generate_planted(&PlantConfig::default(), cfg.seed, cfg.signal_scale)?);
    };
    let dir = weights.parent().map(Path::to_path_buf).unwrap_or_default();
    let dataset_path = cfg.dataset.clone().unwrap_or_else(|| dir.join(DATASET_FILE));
    let info_path = dir.join(TASK_FILE);
    let info: TaskInfo = serde_json::from_reader(
        File::open(&info_path).map_err(|e| Failure::Io(format!("{}: {e}", info_path.display())))?,
    )
    .map_err(|e| Failure::Io(format!("{}: {e}", info_path.display())))?;
    let w = load_weights::<f32>(weights).map_err(io_at(weights))?;
    let dataset = load_dataset(&dataset_path).map_err(io_at(&dataset_path))?;
    Ok(PlantedTask32::from_parts(w, dataset, info)?)
}

fn finish(cfg: &Resolved, mut report: RunReport, started: Instant) -> CliResult<PathBuf> {
    report.runtime_sec = started.elapsed().as_secs_f64();
    if cfg.deterministic_report {
        report = report.deterministic();
    }
    let path = cfg.out.join(format!("{}.json", report.command));
    report.write(create(&path)?).map_err(io_at(&path))?;
    Ok(path)
}

fn new_report(cfg: &Resolved, command: &str, method: &str) -> CliResult<RunReport> {
    Ok(RunReport::new(command, method, cfg.seed, serde_json::to_value(cfg)?))
}

pub fn gen_task(cfg: &Resolved) -> CliResult<()> {
    let started = Instant::now();
    let task = generate_planted::<f32>(&PlantConfig::default(), cfg.seed, cfg.signal_scale)?;
    let w = cfg.out.join(WEIGHTS_FILE);
    let d = cfg.out.join(DATASET_FILE);
    let t = cfg.out.join(TASK_FILE);
    fs::create_dir_all(&cfg.out).map_err(|e| Failure::Io(format!("{}: {e}", cfg.out.display())))?;
    save_weights(task.weights(), &w).map_err(io_at(&w))?;
    save_dataset(&d, &task.dataset).map_err(io_at(&d))?;
    serde_json::to_writer_pretty(create(&t)?, &task.info)?;
    let mut report = new_report(cfg, "gen-task", "none")?;
    report.circuit = task.info.ground_truth.iter().map(ToString::to_string).collect();
    report.extra = json!({ "planted": task.planted_node().to_string(), "retention": task.info.retention });
    let path = finish(cfg, report, started)?;
    println!(
        "planted {} (retention {:.4}); wrote {}, {}, {}, {}",
        task.planted_node(),
        task.info.retention,
        w.display(),
        d.display(),
        t.display(),
        path.display()
    );
    Ok(())
}

pub fn run_acdc_cmd(cfg: &Resolved) -> CliResult<()> {
    let started = Instant::now();
    let task = load_task(cfg)?;
    let method = cfg.method();
    let prune = cfg.prune();
    let graph = task.graph();
    let res = run_acdc(&graph, &task.model, &task.dataset, &prune, &method)?;
    let scores = cfg.out.join("scores.csv");
    write_score_csv(create(&scores)?, &res.tables).map_err(io_at(&scores))?;

    let mut report = new_report(cfg, "run-acdc", method.tag())?;
    report.circuit = res.circuit().iter().map(ToString::to_string).collect();
    report.iterations = res.iterations;
    report.peak_resident_bytes = resident_weight_bytes(method, task.model.weights_arc())?;
    report.epsilon = Some(epsilon_summary(
        &res.swept,
        &task.dataset,
        &graph,
        &task.model,
        &method,
        prune.metric,
    )?);
    let kept = res.kept_swept();
    report.extra = json!({
        "kept_swept": kept.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "faithfulness": faithfulness(&task, &res.graph)?,
        "evaluations": res.evaluations.values().sum::<usize>(),
    });
    let path = finish(cfg, report, started)?;
    println!(
        "{}: {} edges kept ({} swept survive) after {} iterations; wrote {}, {}",
        method.tag(),
        res.graph.present_count(),
        kept.len(),
        res.iterations,
        scores.display(),
        path.display()
    );
    Ok(())
}

pub fn sweep_roc(cfg: &Resolved) -> CliResult<()> {
    let started = Instant::now();
    let task = load_task(cfg)?;
    let grid = cfg.grid().map_err(Failure::Config)?;
    let prune = cfg.prune();
    let chosen = cfg.method();
    let mut report = new_report(cfg, "sweep-roc", chosen.tag())?;
    let mut aucs = serde_json::Map::new();
    for m in Method::ALL {
        let sweep = roc_sweep(&task, &m, &grid, &prune)?;
        let path = cfg.out.join(format!("roc_{m}.csv"));
        write_roc_csv(create(&path)?, &sweep.points).map_err(io_at(&path))?;
        aucs.insert(m.to_string(), json!(sweep.auc));
        println!("{:>6} AUC {:.4} -> {}", m.tag(), sweep.auc, path.display());
        if m == chosen {
            report.auc = Some(sweep.auc);
            report.roc = sweep.points;
        }
    }
    report.extra = json!({ "auc": aucs });
    let path = finish(cfg, report, started)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn ablate_scheduler(cfg: &Resolved) -> CliResult<()> {
    let started = Instant::now();
    let task = load_task(cfg)?;
    let (tr, lo, hi, o) = SCHED_TIMES;
    let c = *task.config();
    let w = Workload::calibrated(task.model.clone(), SCHED_STEPS, 1, c.seq_len, cfg.seed, tr, lo, hi, o)?;
    let rows = ablate(&w, cfg.repeats, &StreamConfig::ALL)?;
    let table = cfg.out.join("scheduler.csv");
    {
        let mut out = csv::Writer::from_writer(create(&table)?);
        let csv_err = |e: csv::Error| Failure::Io(format!("{}: {e}", table.display()));
        out.write_record(["streams", "wall_per_step", "simulated_per_step", "closed_form_step"])
            .map_err(csv_err)?;
        for r in &rows {
            out.write_record([
                r.streams.name().to_string(),
                r.wall_per_step.to_string(),
                r.simulated_per_step.to_string(),
                r.closed_form_step.to_string(),
            ])
            .map_err(csv_err)?;
            println!(
                "{:>8}: wall {:.2} ms/step, simulated {:.2}, closed form {:.2}",
                r.streams.name(),
                r.wall_per_step * 1e3,
                r.simulated_per_step * 1e3,
                r.closed_form_step * 1e3
            );
        }
        out.flush()?;
    }
    let streams = cfg.streams();
    let sim = simulate(&w.costs(), &w.timing, streams);
    let trace = cfg.out.join(format!("trace_{streams}.csv"));
    write_trace_csv(create(&trace)?, &sim.timeline).map_err(io_at(&trace))?;

    let mut report = new_report(cfg, "ablate-scheduler", Method::Pahq.tag())?;
    report.extra = json!({
        "rows": rows.iter().map(|r| json!({
            "streams": r.streams.name(),
            "wall_per_step": r.wall_per_step,
            "simulated_per_step": r.simulated_per_step,
            "closed_form_step": r.closed_form_step,
        })).collect::<Vec<_>>(),
    });
    let path = finish(cfg, report, started)?;
    println!("wrote {}, {}, {}", table.display(), trace.display(), path.display());
    Ok(())
}

pub fn ablate_precision(cfg: &Resolved) -> CliResult<()> {
    let started = Instant::now();
    let task = load_task(cfg)?;
    let grid = cfg.grid().map_err(Failure::Config)?;
    let rows = precision_ablation(&task, &cfg.bits(), &grid, &cfg.prune())?;
    let path = cfg.out.join("precision.csv");
    write_precision_csv(create(&path)?, &rows).map_err(io_at(&path))?;
    for r in &rows {
        println!("{:>2}-bit: AUC {:.4}, accuracy {:.3}, {} edges", r.bits, r.auc, r.accuracy, r.circuit_edges);
    }
    let mut report = new_report(cfg, "ablate-precision", Method::Pahq.tag())?;
    report.extra = json!({ "rows": rows });
    let rp = finish(cfg, report, started)?;
    println!("wrote {}, {}", path.display(), rp.display());
    Ok(())
}

pub fn quant_sweep(cfg: &Resolved) -> CliResult<()> {
    let started = Instant::now();
    let task = load_task(cfg)?;
    let method = cfg.method();
    let found = run_acdc(&task.graph(), &task.model, &task.dataset, &cfg.prune(), &method)?;
    let curve = incremental_quant_sweep(&task, &found.graph)?;
    let path = cfg.out.join("quant.csv");
    write_quant_csv(create(&path)?, &curve).map_err(io_at(&path))?;
    println!(
        "critical heads {:?}; baseline accuracy {:.3}; max drop phase 1 {:.3}, phase 2 {:.3}",
        curve.critical,
        curve.baseline(),
        curve.max_drop(1),
        curve.max_drop(2)
    );
    let mut report = new_report(cfg, "quant-sweep", method.tag())?;
    report.circuit = found.circuit().iter().map(ToString::to_string).collect();
    report.iterations = found.iterations;
    report.extra = json!({
        "phase1_max_drop": curve.max_drop(1),
        "phase2_max_drop": curve.max_drop(2),
        "curve": curve,
    });
    let rp = finish(cfg, report, started)?;
    println!("wrote {}, {}", path.display(), rp.display());
    Ok(())
}

pub fn demo_underflow(cfg: &Resolved) -> CliResult<()> {
    let started = Instant::now();
    let task = load_task(cfg)?;
    let under = underflow_diagnostic(&task, &cfg.prune())?;
    println!(
        "underflow on {}: max planted delta {:.3e} (FP8 step {:.3e}); scores fp32 {:.5}, fp8 {}, pahq {:.5}",
        under.edge, under.max_delta, under.step, under.fp32_score, under.fp8_score, under.pahq_score
    );
    let interfered = generate_planted::<f32>(&PlantConfig::default().with_interference(6), cfg.seed, 1.0)?;
    let mant = mantissa_diagnostic(&interfered)?;
    println!(
        "mantissa loss: interference 2^{} vs planted 2^{}, absorbed {}, fp8 delta {}, fp32 delta {:.4}, pahq {:.1} bits",
        mant.interference_exponent,
        mant.planted_exponent,
        mant.absorbed,
        mant.fp8_input_delta,
        mant.fp32_input_delta,
        mant.pahq_bits
    );
    let mut report = new_report(cfg, "demo-underflow", "all")?;
    report.extra = json!({ "underflow": under, "mantissa": mant });
    let rp = finish(cfg, report, started)?;
    println!("wrote {}", rp.display());
    Ok(())
}
