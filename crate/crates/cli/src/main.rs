//! Command-line front end: dataset generation, training, retrieval
//! evaluation, gradient verification, and per-pair distance export.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime error,
//! 3 gradient-check failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dynreid::checkpoint;
use dynreid::config::TrainConfig;
use dynreid::data::{generate_dataset, read_dataset, write_dataset, Dataset, SynthSpec};
use dynreid::error::Error;
use dynreid::eval::{evaluate_model, export_distances_csv};
use dynreid::gradcheck::{full_registry, injected_fault, GradCheck, STEP, TOLERANCE};
use dynreid::model::BranchSet;
use dynreid::train::{render_log, restore, snapshot, train_on};
use dynreid::Tensor;

#[derive(Parser)]
#[command(name = "dynreid", version, about = "Dynamic-kernel re-identification workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic identity dataset and write it as a DYRD file.
    GenData(GenDataArgs),
    /// Train a model from a config file; writes a checkpoint and a loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint: mAP and CMC per branch plus the fused ranking.
    Eval(EvalArgs),
    /// Verify every backward rule against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Dump per-(query,gallery) distances for all branches as CSV.
    ExportDistances(ExportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output DYRD path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    num_ids: usize,
    #[arg(long, default_value_t = 20)]
    imgs_per_id: usize,
    #[arg(long, default_value_t = 3)]
    num_cams: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 0.15)]
    noise: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config (key=value lines).
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint output path; the loss log lands next to it as
    /// <out>.log.csv.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's dataset path.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the enabled branches (subset of global,self,mutual).
    #[arg(long)]
    branches: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset to evaluate on; defaults to the dataset the checkpoint's
    /// config describes.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Write the report here (plus <out>.<branch>.cmc.csv per branch);
    /// the report always goes to stdout as well.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate only these branches (subset of the checkpoint's branches).
    #[arg(long)]
    branches: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Testing hook: add a deliberately corrupted backward rule, which must
    /// make the run fail with exit code 3.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message (also for --help/--version)
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Gradcheck(args) => return cmd_gradcheck(args),
        Cmd::ExportDistances(args) => cmd_export(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ConfigInvalid(_)
        | Error::SpecInvalid(_)
        | Error::CheckpointVersionMismatch { .. } => 1,
        _ => 2,
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), Error> {
    let spec = SynthSpec {
        num_ids: args.num_ids,
        imgs_per_id: args.imgs_per_id,
        num_cams: args.num_cams,
        height: args.height,
        width: args.width,
        noise: args.noise,
        seed: args.seed,
    };
    let dataset = generate_dataset(&spec)?;
    write_dataset(&args.out, &dataset)?;
    println!(
        "wrote {} samples over {} identities to {}",
        dataset.samples.len(),
        dataset.identities().len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let mut cfg = TrainConfig::load(&args.config)?;
    if let Some(dataset) = args.dataset {
        cfg.dataset_path = Some(dataset);
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(branches) = args.branches {
        cfg.branches = BranchSet::parse(&branches)?;
    }
    cfg.validate()?;
    let dataset = dynreid::train::resolve_dataset(&cfg)?;
    let mut artifacts = train_on(&cfg, dataset)?;
    let log_path = log_path_for(&args.out);
    std::fs::write(&log_path, render_log(&cfg, &artifacts.stats))?;
    let ckpt = snapshot(&mut artifacts.model, &artifacts.adam, &cfg, cfg.epochs);
    checkpoint::save(&args.out, &ckpt)?;
    println!(
        "trained {} epochs; checkpoint {} log {}",
        cfg.epochs,
        args.out.display(),
        log_path.display()
    );
    Ok(())
}

fn log_path_for(checkpoint: &std::path::Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".log.csv");
    checkpoint.with_file_name(name)
}

fn load_eval_inputs(
    checkpoint_path: &std::path::Path,
    dataset_path: &Option<PathBuf>,
) -> Result<(dynreid::model::ReidModel, Dataset, TrainConfig), Error> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let (model, _adam) = restore(&ckpt)?;
    let dataset = match dataset_path {
        Some(path) => read_dataset(path)?,
        None => dynreid::train::resolve_dataset(&ckpt.config)?,
    };
    Ok((model, dataset, ckpt.config))
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let (mut model, dataset, cfg) = load_eval_inputs(&args.checkpoint, &args.dataset)?;
    if let Some(list) = &args.branches {
        let keep = BranchSet::parse(list)?;
        let have = model.cfg.branches;
        if (keep.global && !have.global)
            || (keep.self_guided && !have.self_guided)
            || (keep.mutual && !have.mutual)
        {
            return Err(Error::ConfigInvalid(format!(
                "checkpoint trained branches '{}', cannot evaluate '{list}'",
                have.to_list()
            )));
        }
        if !keep.global {
            model.global = None;
        }
        if !keep.self_guided {
            model.self_branch = None;
        }
        if !keep.mutual {
            model.mutual = None;
        }
        model.cfg.branches = keep;
    }
    let outcome = evaluate_model(&model, &dataset, &cfg.fuse_weights, None)?;
    let report = outcome.render();
    print!("{report}");
    if let Some(out) = &args.out {
        std::fs::write(out, &report)?;
        for (name, branch_report) in outcome.reports() {
            let mut file = out.file_name().unwrap_or_default().to_os_string();
            file.push(format!(".{name}.cmc.csv"));
            std::fs::write(out.with_file_name(file), branch_report.render_cmc_csv())?;
        }
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> ExitCode {
    let mut failures = 0usize;
    let mut checks = full_registry();
    let total = checks.len() + usize::from(args.inject_fault);
    println!("running {total} gradient checks at step {STEP:.0e}, tolerance {TOLERANCE:.0e}");
    let run_one = |name: &str, report: Result<GradCheck, Error>, failures: &mut usize| {
        match report {
            Ok(r) => {
                let verdict = if r.passed() { "pass" } else { "FAIL" };
                let note = if r.analytic_zero { " (zero analytic gradient)" } else { "" };
                println!(
                    "{name:<28} max_rel_err {:>12.3e}  {verdict}{note}",
                    r.max_rel_err
                );
                if !r.passed() {
                    *failures += 1;
                }
            }
            Err(e) => {
                println!("{name:<28} errored: {e}");
                *failures += 1;
            }
        }
    };
    for entry in checks.drain(..) {
        run_one(entry.name, (entry.run)(args.seed), &mut failures);
    }
    if args.inject_fault {
        let mut rng = dynreid::data::stream(args.seed, 999, 0);
        let x = Tensor::rand_uniform(&mut rng, &[4], 0.5, 1.0).with_grad();
        run_one(
            "injected_fault",
            dynreid::gradcheck::grad_check(injected_fault, &x, STEP),
            &mut failures,
        );
    }
    if failures > 0 {
        eprintln!("{failures} gradient check(s) failed");
        ExitCode::from(3)
    } else {
        println!("all gradient checks passed");
        ExitCode::SUCCESS
    }
}

fn cmd_export(args: ExportArgs) -> Result<(), Error> {
    let (model, dataset, cfg) = load_eval_inputs(&args.checkpoint, &args.dataset)?;
    let csv = export_distances_csv(&model, &dataset, &cfg.fuse_weights)?;
    std::fs::write(&args.out, &csv)?;
    println!(
        "wrote {} rows to {}",
        csv.lines().count().saturating_sub(1),
        args.out.display()
    );
    Ok(())
}
