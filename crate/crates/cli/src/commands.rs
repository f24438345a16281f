//! Implementations behind each CLI subcommand. Every command that writes
//! artifacts finishes by dropping a run manifest beside them; commands that
//! only print (gradcheck, report) write nothing.

use crate::manifest::{now_rfc3339, sha256_hex, RunManifest, MANIFEST_FILE};
use crate::{DatasetSynthArgs, EvalArgs, GradcheckArgs, ReportArgs, TrainArgs};
use la_core::data::synth::{synthesize_dataset, SynthSpec};
use la_core::data::Dataset;
use la_core::eval::{
    ablation_sweep, cross_validate, run_benchmark, run_benchmark_parallel, BenchmarkReport,
    ConstantBackground, EvalProtocol, NeuralSegmenter, OracleSegmenter, Segmenter, ABLATION_AXES,
};
use la_core::train::{train_loop, Checkpoint, TrainConfig, TrainOpts};
use la_core::{bail_config, Error, Result};
use std::fs;
use std::path::{Path, PathBuf};

/// Invocation context shared by all commands: the argv recorded in manifests.
pub struct Ctx {
    pub argv: Vec<String>,
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<String> {
    fs::write(dir.join(name), text)?;
    Ok(name.to_string())
}

fn pretty_json<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Worker count for evaluation: the flag wins, `--deterministic` forces a
/// single worker, and the default is the machine's available parallelism.
/// (Evaluation results are identical for every worker count; the forced
/// single worker only serializes scheduling.)
fn effective_workers(flag: Option<usize>, deterministic: bool) -> usize {
    if deterministic {
        return 1;
    }
    match flag {
        Some(0) => 1,
        Some(w) => w,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    }
}

// ── `la dataset synth` ────────────────────────────────────────────────────

pub fn cmd_dataset_synth(ctx: &Ctx, a: &DatasetSynthArgs) -> Result<()> {
    let spec = SynthSpec {
        classes: a.classes,
        images: a.images,
        size: a.size,
        min_shapes: a.min_shapes,
        max_shapes: a.max_shapes,
        seed: a.seed,
    };
    fs::create_dir_all(&a.out)?;
    let index = synthesize_dataset(&spec, &a.out)?;

    // Synthesis is a pure function of the spec, so the manifest carries no
    // wall-clock fields: the whole output directory is byte-reproducible.
    let spec_json = pretty_json(&spec)?;
    let mut m = RunManifest::new(ctx.argv.clone());
    m.config_file = Some(write_text(&a.out, "synth.json", &spec_json)?);
    m.config_hash = sha256_hex(spec_json.as_bytes());
    m.dataset_hash = index.content_hash();
    m.dataset_path = Some(a.out.display().to_string());
    m.seed = spec.seed;
    m.outputs = vec!["synth.json".into(), "index.json".into()];
    m.save(&a.out)?;

    println!(
        "synthesized {} images × {}px, {} classes → {}",
        index.file.images.len(),
        spec.size,
        index.file.classes.len(),
        a.out.display()
    );
    println!("dataset hash {}", m.dataset_hash);
    Ok(())
}

// ── `la train` ────────────────────────────────────────────────────────────

fn load_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match (&a.config, &a.resume) {
        (Some(path), _) => TrainConfig::from_json(&fs::read_to_string(path)?)?,
        (None, Some(ckpt)) => Checkpoint::<f32>::load(ckpt)?.meta.train,
        (None, None) => {
            bail_config!("--config is required (or --resume to reuse a checkpoint's configuration)")
        }
    };
    for kv in &a.set {
        let Some((key, value)) = kv.split_once('=') else {
            bail_config!("--set expects KEY=VALUE, got '{kv}'");
        };
        cfg.apply_override(key, value)?;
    }
    if let Ok(seed) = std::env::var("LA_SEED") {
        cfg.seed = seed
            .parse()
            .map_err(|_| Error::Config(format!("LA_SEED must be an unsigned integer, got '{seed}'")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let started = if a.deterministic { String::new() } else { now_rfc3339() };
    let cfg = load_train_config(a)?;
    let ds = Dataset::open(&a.data)?;
    fs::create_dir_all(&a.out)?;

    let cfg_json = pretty_json(&cfg)?;
    let config_file = write_text(&a.out, "config.json", &cfg_json)?;

    let outcome = train_loop(
        &ds,
        &cfg,
        &a.out,
        &TrainOpts {
            deterministic: a.deterministic,
            resume: a.resume.clone(),
            quiet: a.quiet,
        },
    )?;

    let mut m = RunManifest::new(ctx.argv.clone());
    m.config_file = Some(config_file.clone());
    m.config_hash = sha256_hex(cfg_json.as_bytes());
    m.dataset_hash = ds.index.content_hash();
    m.dataset_path = Some(a.data.display().to_string());
    m.seed = cfg.seed;
    m.started_at = started;
    m.finished_at = if a.deterministic { String::new() } else { now_rfc3339() };
    m.outputs = vec![config_file, "metrics.csv".into()];
    if let Some(ck) = &outcome.final_checkpoint {
        if let Some(name) = ck.file_name() {
            let name = name.to_string_lossy().to_string();
            m.outputs.push(name.clone());
            m.outputs.push(format!("{}.json", name.trim_end_matches(".latn")));
        }
    }
    m.save(&a.out)?;

    println!(
        "trained to iteration {} (training identity {})",
        outcome.iterations,
        cfg.stable_hash()
    );
    if let Some(last) = outcome.losses.last() {
        println!("final loss {last:.6}");
    }
    println!("metrics {}", outcome.metrics_path.display());
    if let Some(ck) = &outcome.final_checkpoint {
        println!("checkpoint {}", ck.display());
    }
    Ok(())
}

// ── `la eval` ─────────────────────────────────────────────────────────────

fn parse_u64_list(s: &str, what: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("{what} expects comma-separated integers, got '{p}'")))
        })
        .collect()
}

fn protocol_from_args(a: &EvalArgs) -> Result<EvalProtocol> {
    let seeds = match &a.seed_list {
        Some(list) => parse_u64_list(list, "--seed-list")?,
        None => (0..a.seeds as u64).collect(),
    };
    let p = EvalProtocol {
        episodes_per_run: a.episodes,
        seeds,
        n: a.n,
        k: a.k,
        prompts: a.prompts.parse()?,
        fold: a.fold,
        num_folds: a.num_folds,
        split: a.split.parse()?,
        per_example: a.per_example,
        control: a.control,
    };
    p.validate()?;
    Ok(p)
}

fn build_segmenter(a: &EvalArgs) -> Result<Box<dyn Segmenter + Sync>> {
    match a.model.as_deref() {
        Some("oracle") => {
            if !a.ckpt.is_empty() {
                bail_config!("--model oracle does not take --ckpt");
            }
            Ok(Box::new(OracleSegmenter))
        }
        Some("constant-bg") => {
            if !a.ckpt.is_empty() {
                bail_config!("--model constant-bg does not take --ckpt");
            }
            Ok(Box::new(ConstantBackground))
        }
        Some(other) => Err(Error::Config(format!(
            "unknown model '{other}' (expected 'oracle' or 'constant-bg', or pass --ckpt)"
        ))),
        None => {
            let [path] = a.ckpt.as_slice() else {
                bail_config!("pass exactly one --ckpt (or --model oracle|constant-bg)");
            };
            Ok(Box::new(NeuralSegmenter::<f32>::from_checkpoint(path, a.per_example)?))
        }
    }
}

fn bench(
    seg: &(dyn Segmenter + Sync),
    ds: &Dataset,
    protocol: &EvalProtocol,
    workers: usize,
) -> Result<BenchmarkReport> {
    if workers > 1 {
        run_benchmark_parallel(seg, &ds.index, protocol, workers)
    } else {
        run_benchmark(seg, ds, protocol)
    }
}

fn eval_manifest(ctx: &Ctx, a: &EvalArgs, ds: &Dataset, started: String) -> RunManifest {
    let mut m = RunManifest::new(ctx.argv.clone());
    m.dataset_hash = ds.index.content_hash();
    m.dataset_path = Some(a.data.display().to_string());
    m.started_at = started;
    m.finished_at = if a.deterministic { String::new() } else { now_rfc3339() };
    m
}

pub fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let started = if a.deterministic { String::new() } else { now_rfc3339() };
    if !a.set.is_empty() && a.ablation.is_none() {
        bail_config!("--set only applies to the --ablation training config");
    }
    let protocol = protocol_from_args(a)?;
    let workers = effective_workers(a.workers, a.deterministic);
    let ds = Dataset::open(&a.data)?;
    fs::create_dir_all(&a.out)?;

    let protocol_json = pretty_json(&protocol)?;
    let protocol_file = write_text(&a.out, "protocol.json", &protocol_json)?;
    let mut outputs = vec![protocol_file.clone()];

    if let Some(axes_arg) = &a.ablation {
        // Ablation sweep: retrains switched-off variants, so it needs the
        // training budget from --config.
        let Some(cfg_path) = &a.config else {
            bail_config!("--ablation needs --config with the training budget");
        };
        let mut cfg = TrainConfig::from_json(&fs::read_to_string(cfg_path)?)?;
        for kv in &a.set {
            let Some((key, value)) = kv.split_once('=') else {
                bail_config!("--set expects KEY=VALUE, got '{kv}'");
            };
            cfg.apply_override(key, value)?;
        }
        if let Ok(seed) = std::env::var("LA_SEED") {
            cfg.seed = seed
                .parse()
                .map_err(|_| Error::Config(format!("LA_SEED must be an unsigned integer, got '{seed}'")))?;
        }
        let axes: Vec<String> = if axes_arg == "all" {
            ABLATION_AXES.iter().map(|s| s.to_string()).collect()
        } else {
            axes_arg.split(',').map(|s| s.trim().to_string()).collect()
        };
        let report = ablation_sweep(&ds, &cfg, &axes, &protocol, &a.out)?;
        outputs.push(write_text(&a.out, "ablation.json", &pretty_json(&report)?)?);
        outputs.push(write_text(&a.out, "ablation.csv", &report.to_csv())?);
        outputs.push(write_text(&a.out, "report.txt", &report.render_table())?);
        print!("{}", report.render_table());

        let cfg_json = pretty_json(&cfg)?;
        let mut m = eval_manifest(ctx, a, &ds, started);
        m.config_file = Some(write_text(&a.out, "config.json", &cfg_json)?);
        m.config_hash = sha256_hex(cfg_json.as_bytes());
        m.seed = cfg.seed;
        m.outputs = outputs;
        m.outputs.push("config.json".into());
        m.save(&a.out)?;
        return Ok(());
    }

    if a.cross_validate {
        // One checkpoint per fold, in fold order.
        if a.model.is_some() {
            bail_config!("--cross-validate scores trained checkpoints; it does not take --model");
        }
        if a.ckpt.len() != a.num_folds as usize {
            bail_config!(
                "--cross-validate over {} folds needs {} --ckpt flags in fold order, got {}",
                a.num_folds,
                a.num_folds,
                a.ckpt.len()
            );
        }
        let ckpts = a.ckpt.clone();
        let per_example = a.per_example;
        let mut factory = |fold: u32| -> Result<Box<dyn Segmenter>> {
            let seg = NeuralSegmenter::<f32>::from_checkpoint(&ckpts[fold as usize], per_example)?;
            Ok(Box::new(seg))
        };
        let report = cross_validate(&ds, &protocol, &mut factory)?;
        outputs.push(write_text(&a.out, "crossval.json", &pretty_json(&report)?)?);
        outputs.push(write_text(&a.out, "crossval.csv", &report.to_csv())?);
        outputs.push(write_text(&a.out, "report.txt", &report.render_table())?);
        print!("{}", report.render_table());

        let mut m = eval_manifest(ctx, a, &ds, started);
        m.config_file = Some(protocol_file);
        m.config_hash = sha256_hex(protocol_json.as_bytes());
        m.outputs = outputs;
        m.save(&a.out)?;
        return Ok(());
    }

    let seg = build_segmenter(a)?;

    if let Some(sweep_arg) = &a.n_sweep {
        let ways: Vec<usize> = sweep_arg
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("--n-sweep expects comma-separated integers, got '{p}'")))
            })
            .collect::<Result<_>>()?;
        if ways.is_empty() {
            bail_config!("--n-sweep needs at least one way count");
        }
        let mut reports = Vec::with_capacity(ways.len());
        let mut summary = format!("{:<24} {:>6} {:>8}\n", "model", "ways", "mIoU");
        for &n in &ways {
            let mut p = protocol.clone();
            p.n = n;
            p.validate()?;
            let r = bench(&*seg, &ds, &p, workers)?;
            summary.push_str(&format!("{:<24} {:>6} {:>8.4}\n", r.model, n, r.mean_miou));
            reports.push(r);
        }
        outputs.push(write_text(&a.out, "sweep.json", &pretty_json(&reports)?)?);
        let mut csv = String::from("ways,mean_miou,per_seed\n");
        for r in &reports {
            let seeds: Vec<String> = r.per_seed.iter().map(|s| format!("{}", s.miou)).collect();
            csv.push_str(&format!("{},{},{}\n", r.protocol.n, r.mean_miou, seeds.join(";")));
        }
        outputs.push(write_text(&a.out, "sweep.csv", &csv)?);
        outputs.push(write_text(&a.out, "report.txt", &summary)?);
        print!("{summary}");

        let mut m = eval_manifest(ctx, a, &ds, started);
        m.config_file = Some(protocol_file);
        m.config_hash = sha256_hex(protocol_json.as_bytes());
        m.outputs = outputs;
        m.save(&a.out)?;
        return Ok(());
    }

    let report = bench(&*seg, &ds, &protocol, workers)?;
    outputs.push(write_text(&a.out, "report.json", &pretty_json(&report)?)?);
    outputs.push(write_text(&a.out, "report.csv", &report.to_csv())?);
    outputs.push(write_text(&a.out, "per_class.csv", &report.per_class_csv())?);
    outputs.push(write_text(&a.out, "report.txt", &report.render_table())?);
    print!("{}", report.render_table());

    let mut m = eval_manifest(ctx, a, &ds, started);
    m.config_file = Some(protocol_file);
    m.config_hash = sha256_hex(protocol_json.as_bytes());
    m.outputs = outputs;
    m.save(&a.out)?;
    Ok(())
}

// ── `la gradcheck` ────────────────────────────────────────────────────────

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let reports = crate::gradchecks::run_all(a.seed, a.step, a.tolerance, a.inject_sign_flip)?;
    println!("{:<22} {:>8} {:>12}   result", "block", "coords", "max rel err");
    for r in &reports {
        println!(
            "{:<22} {:>8} {:>12.3e}   {}",
            r.name,
            r.checked,
            r.max_rel_err,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    if a.inject_sign_flip {
        let undetected: Vec<&str> = reports.iter().filter(|r| r.passed).map(|r| r.name.as_str()).collect();
        if undetected.is_empty() {
            println!("injected sign-flip fault detected in every block");
            Ok(())
        } else {
            Err(Error::Numeric(format!(
                "injected sign-flip fault went undetected in: {}",
                undetected.join(", ")
            )))
        }
    } else {
        let failed: Vec<String> = reports
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.summary())
            .collect();
        if failed.is_empty() {
            println!("all gradients verified at tolerance {:.1e}", a.tolerance);
            Ok(())
        } else {
            Err(Error::Numeric(format!("gradient check failed: {}", failed.join("; "))))
        }
    }
}

// ── `la report` ───────────────────────────────────────────────────────────

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let m = RunManifest::load(&a.run)?;
    let notes = m.verify(&a.run)?;

    println!("run        {}", a.run.display());
    println!("command    {}", m.command.join(" "));
    println!("revision   {}", m.revision);
    println!("seed       {}", m.seed);
    if m.started_at.is_empty() {
        println!("wall clock not recorded (deterministic run)");
    } else {
        println!("started    {}", m.started_at);
        println!("finished   {}", m.finished_at);
    }
    for note in &notes {
        println!("verified   {note}");
    }

    // Show the stored result for quick reading: the rendered table when the
    // run produced one, else the last metrics row of a training run.
    let table = a.run.join("report.txt");
    if table.is_file() {
        println!();
        print!("{}", fs::read_to_string(table)?);
        return Ok(());
    }
    let metrics = a.run.join("metrics.csv");
    if metrics.is_file() {
        let text = fs::read_to_string(metrics)?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if let Some(last) = lines.last() {
            println!();
            println!("{header}");
            println!("{last}");
        }
    }
    Ok(())
}

/// Shared by tests: path of the manifest inside a run directory.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}
