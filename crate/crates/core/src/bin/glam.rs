//! `glam` command-line tool: dataset generation, training, evaluation,
//! verification suites, cost reports and attention export.
//!
//! Exit codes: 0 on success, 1 on invalid input, 2 on numeric failures and
//! tolerance breaches.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use glam_core::analysis::{self, AttentionTarget};
use glam_core::checkpoint::{load_model, save_model};
use glam_core::config::RunConfig;
use glam_core::data::{batch, read_dataset, write_dataset};
use glam_core::glam::{check_bare_instance, BareInstance};
use glam_core::gradcheck::gradient_suite;
use glam_core::model::SegModel;
use glam_core::train::{evaluate, train};
use glam_core::{GlamError, Result};

/// Largest composition error `verify-glam` accepts.
const COMPOSITION_TOLERANCE: f64 = 1e-10;
/// Largest attention-mass defect `verify-glam` accepts.
const CONSERVATION_TOLERANCE: f64 = 1e-12;
/// Name of the resolved config echoed into every output directory.
const CONFIG_FILE: &str = "config.cfg";

#[derive(Parser, Debug)]
#[command(name = "glam", version, about = "Windowed attention with global tokens: experiments and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a key-patch dataset into --out.
    GenData(Common),
    /// Train on --data and write log, checkpoint and config into --out.
    Train(Common),
    /// Evaluate the run in --out on the eval split of --data.
    Eval(Common),
    /// Finite-difference check of every layer type.
    GradCheck(Common),
    /// Compare the two-step bare forward with the composed attention form.
    VerifyGlam(VerifyArgs),
    /// Write parameter and FLOP reports into --out.
    Flops(Common),
    /// Export one attention map as CSV, PGM and metadata.
    AttnDump(DumpArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Global tokens per window (0 removes them).
    #[arg(long)]
    ng: Option<usize>,
    /// Keep the globals but skip the global attention step.
    #[arg(long)]
    no_gmsa: bool,
    /// Use patch expansion instead of non-local upsampling.
    #[arg(long)]
    no_nlu: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Fixed number of optimiser steps (overrides epochs).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Windows.
    #[arg(long, default_value_t = 4)]
    nr: usize,
    /// Global tokens per window.
    #[arg(long, default_value_t = 2)]
    ng: usize,
    /// Patches per window.
    #[arg(long, default_value_t = 4)]
    np: usize,
    /// Channels.
    #[arg(long, default_value_t = 3)]
    c: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[command(flatten)]
    common: Common,
    /// Run directory holding `config.cfg` and `model.ckpt`; without it a
    /// freshly initialised model is used.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Encoder stage.
    #[arg(long, default_value_t = 0)]
    stage: usize,
    /// Block within the stage (default: last).
    #[arg(long)]
    block: Option<usize>,
    /// Global token `K` of window `R`: its induced attention over the level.
    #[arg(long, value_name = "K,R", value_parser = parse_pair)]
    token: Option<(usize, usize)>,
    /// Visual token `I` of window `R`: its attention inside the window.
    #[arg(long, value_name = "I,R", value_parser = parse_pair, conflicts_with = "token")]
    patch: Option<(usize, usize)>,
    /// Eval sample of --data to run (train samples when there is no eval split).
    #[arg(long, default_value_t = 0)]
    sample: usize,
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected two comma-separated integers, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(a)?, parse(b)?))
}

// ── Config resolution ─────────────────────────────────────────────────────

/// Defaults, then `fallback` (e.g. a dataset's config), then the --config
/// file, then individual flags.
fn resolve(common: &Common, fallback: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => fallback.unwrap_or_default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(ng) = common.ng {
        cfg.model.n_globals = ng;
    }
    if common.no_gmsa {
        cfg.model.gmsa = false;
    }
    if common.no_nlu {
        cfg.model.nlu = false;
    }
    if let Some(e) = common.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = common.batch {
        cfg.train.batch = b;
    }
    if let Some(s) = common.steps {
        cfg.train.steps = s;
    }
    if let Some(lr) = common.lr {
        cfg.train.lr = lr;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn announce(cfg: &RunConfig) {
    println!("seed: {}", cfg.seed);
    println!("# resolved config");
    print!("{}", cfg.to_text());
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value.as_deref().ok_or_else(|| GlamError::Config(format!("--{flag} is required")))
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    Ok(())
}

// ── Commands ──────────────────────────────────────────────────────────────

fn gen_data(c: &Common) -> Result<()> {
    let cfg = resolve(c, None)?;
    announce(&cfg);
    let out = required(&c.out, "out")?;
    write_dataset(out, &cfg)?;
    prepare_out(out, &cfg)?;
    println!(
        "wrote {} train and {} eval samples to {}",
        cfg.task.train_samples,
        cfg.task.eval_samples,
        out.display()
    );
    Ok(())
}

fn run_train(c: &Common) -> Result<()> {
    let ds = read_dataset(required(&c.data, "data")?)?;
    let cfg = resolve(c, Some(ds.config.clone()))?;
    announce(&cfg);
    let out = required(&c.out, "out")?;
    prepare_out(out, &cfg)?;
    let model = SegModel::<f32>::new(&cfg.model, cfg.seed)?;
    let log = train(&model, &ds.train, &cfg.train, cfg.seed, |r| {
        println!("step {:>6}  lr {:.3e}  loss {:.6}  mIoU {:.4}", r.step, r.lr, r.loss, r.miou);
    })?;
    std::fs::write(out.join("log.csv"), log.to_csv())?;
    save_model(&model, &out.join("model.ckpt"))?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Loads a run's checkpoint with the architecture it was trained with, then
/// applies the requested global-attention toggle.
fn load_run_model(cfg: &RunConfig, trained_gmsa: bool, run: &Path) -> Result<SegModel<f32>> {
    let mut arch = cfg.model.clone();
    arch.gmsa = trained_gmsa;
    let mut model = load_model::<f32>(&arch, &run.join("model.ckpt"))?;
    model.set_gmsa(cfg.model.gmsa);
    Ok(model)
}

fn run_eval(c: &Common) -> Result<()> {
    let run = required(&c.out, "out")?;
    let run_cfg = RunConfig::load(&run.join(CONFIG_FILE))?;
    let ds = read_dataset(required(&c.data, "data")?)?;
    let trained_gmsa = run_cfg.model.gmsa;
    let cfg = resolve(c, Some(run_cfg))?;
    announce(&cfg);
    let model = load_run_model(&cfg, trained_gmsa, run)?;
    let samples = if ds.eval.is_empty() { &ds.train } else { &ds.eval };
    let report = evaluate(&model, samples, cfg.train.batch)?;
    let m = &report.metrics;
    let mut csv = String::from("metric,value\n");
    let mut row = |k: &str, v: f64| writeln!(csv, "{k},{v:.9}").expect("write to string");
    row("samples", report.samples as f64);
    row("loss", report.loss);
    row("miou", m.miou);
    row("mean_dice", m.mean_dice);
    row("pixel_accuracy", m.pixel_accuracy);
    row("target_accuracy", report.target_accuracy.unwrap_or(f64::NAN));
    for (k, iou) in m.iou.iter().enumerate() {
        row(&format!("iou_{k}"), iou.unwrap_or(f64::NAN));
    }
    std::fs::write(run.join("eval.csv"), csv)?;
    println!("samples: {}", report.samples);
    println!("loss: {:.6}", report.loss);
    println!("mIoU: {:.4}", m.miou);
    println!("mean Dice: {:.4}", m.mean_dice);
    println!("pixel accuracy: {:.4}", m.pixel_accuracy);
    match report.target_accuracy {
        Some(a) => println!("target-pixel accuracy: {a:.4}"),
        None => println!("target-pixel accuracy: n/a (no target pixels)"),
    }
    Ok(())
}

fn grad_check(c: &Common) -> Result<()> {
    let cfg = resolve(c, None)?;
    announce(&cfg);
    let reports = gradient_suite(cfg.seed, 8)?;
    let mut csv = String::from("tensor,checked,max_rel_error,passed\n");
    let mut failed = Vec::new();
    for r in &reports {
        println!("{:<48} {:>3} coords  max rel err {:.3e}  {}", r.name, r.checked, r.max_rel_error, verdict(r.passed()));
        writeln!(csv, "{},{},{:e},{}", r.name, r.checked, r.max_rel_error, r.passed()).expect("write to string");
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if let Some(out) = &c.out {
        prepare_out(out, &cfg)?;
        std::fs::write(out.join("gradcheck.csv"), csv)?;
    }
    if failed.is_empty() {
        println!("all {} gradient checks passed", reports.len());
        Ok(())
    } else {
        Err(GlamError::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn verify_glam(v: &VerifyArgs) -> Result<()> {
    println!("seed: {}", v.seed);
    println!("N_r = {}, N_g = {}, N_p = {}, C = {}", v.nr, v.ng, v.np, v.c);
    if v.nr == 0 || v.np == 0 || v.c == 0 {
        return Err(GlamError::Config("--nr, --np and --c must be positive".into()));
    }
    let check = check_bare_instance(&BareInstance::random(v.nr, v.ng, v.np, v.c, v.seed)?)?;
    let ok_comp = check.max_abs_diff < COMPOSITION_TOLERANCE;
    let ok_mass = check.max_conservation_error <= CONSERVATION_TOLERANCE;
    println!("max composition error: {:.3e} (< {COMPOSITION_TOLERANCE:e}) {}", check.max_abs_diff, verdict(ok_comp));
    println!(
        "max attention mass defect: {:.3e} (<= {CONSERVATION_TOLERANCE:e}) {}",
        check.max_conservation_error,
        verdict(ok_mass)
    );
    if ok_comp && ok_mass {
        Ok(())
    } else {
        Err(GlamError::Numeric("composed global embedding disagrees with the forward pass".into()))
    }
}

fn flops(c: &Common) -> Result<()> {
    let cfg = resolve(c, None)?;
    announce(&cfg);
    let out = required(&c.out, "out")?;
    prepare_out(out, &cfg)?;
    let report = analysis::cost_report(&cfg.model)?;
    let vanilla_cfg = analysis::vanilla(&cfg.model);
    let vanilla = analysis::cost_report(&vanilla_cfg)?;
    let compare = analysis::comparison_csv(&[("vanilla".to_string(), vanilla), ("glam".to_string(), report.clone())]);
    std::fs::write(out.join("cost.csv"), report.to_csv())?;
    std::fs::write(out.join("compare.csv"), compare)?;
    std::fs::write(out.join("attention_cost.csv"), report.attention_csv())?;
    println!("parameters: {}", report.total_params);
    println!("FLOPs (batch 1): {}", report.total_flops);
    println!("wrote cost.csv, compare.csv and attention_cost.csv to {}", out.display());
    Ok(())
}

fn attn_dump(d: &DumpArgs) -> Result<()> {
    let c = &d.common;
    let (cfg, model) = match &d.run {
        Some(run) => {
            let run_cfg = RunConfig::load(&run.join(CONFIG_FILE))?;
            let trained_gmsa = run_cfg.model.gmsa;
            let cfg = resolve(c, Some(run_cfg))?;
            let model = load_run_model(&cfg, trained_gmsa, run)?;
            (cfg, model)
        }
        None => {
            let cfg = resolve(c, None)?;
            let model = SegModel::<f32>::new(&cfg.model, cfg.seed)?;
            (cfg, model)
        }
    };
    announce(&cfg);
    let out = required(&c.out, "out")?;
    let ds = read_dataset(required(&c.data, "data")?)?;
    let pool = if ds.eval.is_empty() { &ds.train } else { &ds.eval };
    let Some(sample) = pool.get(d.sample) else {
        return Err(GlamError::Index(format!("sample {} out of range ({} samples)", d.sample, pool.len())));
    };
    let (image, _) = batch::<f32>(&[sample], cfg.model.patch)?;
    let (target, stem) = match (d.token, d.patch) {
        (_, Some((i, r))) => (AttentionTarget::Patch { i, r }, format!("attn_s{}_patch{i}_r{r}", d.stage)),
        (Some((k, r)), None) => (AttentionTarget::Token { k, r }, format!("attn_s{}_token{k}_r{r}", d.stage)),
        (None, None) => (AttentionTarget::Token { k: 0, r: 0 }, format!("attn_s{}_token0_r0", d.stage)),
    };
    prepare_out(out, &cfg)?;
    let (map, paths) = analysis::export_attention(&model, &image, d.stage, d.block, target, out, &stem)?;
    println!("global mass: {:.6}", map.global_mass);
    for p in [&paths.csv, &paths.pgm, &paths.meta] {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => run_train(c),
        Command::Eval(c) => run_eval(c),
        Command::GradCheck(c) => grad_check(c),
        Command::VerifyGlam(v) => verify_glam(v),
        Command::Flops(c) => flops(c),
        Command::AttnDump(d) => attn_dump(d),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
