//! `istar` command-line entry point: the exact sparse-recovery solver, and
//! training / inference / evaluation / verification for the unfolded
//! super-resolution network.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use istar_core::autodiff::grad_check;
use istar_core::bicubic::bicubic_resize;
use istar_core::checkpoint;
use istar_core::corpus::generate_corpus;
use istar_core::data::{load_dataset, load_png, make_pair, save_png};
use istar_core::model::{self, IstarModel, ModelConfig, REFERENCE_PARAMS_M};
use istar_core::solver::{self, IstaProblem, IstaSolverConfig};
use istar_core::train::{evaluate, evaluate_bicubic, l1_loss, train, EvalReport};
use istar_core::{Error, ParamStore, Result, Tensor};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "istar", version, about = "ISTA sparse recovery and the unfolded ISTAR super-resolution network")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve an l1-regularized least-squares problem from a matrix file.
    IstaSolve {
        /// Plain-text problem: `m n`, m rows of D, then y, then lambda.
        problem: PathBuf,
        /// Step size; default 0.99/L with L estimated by power iteration.
        #[arg(long)]
        alpha: Option<f64>,
        /// Override the lambda stored in the problem file.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 10_000)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        /// Write the per-iteration trace CSV here.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Train a model; progress and checkpoints land in the run directory.
    Train {
        /// key=value configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override single keys, e.g. --set train.batch=8 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Dataset root (overrides data.root).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Seed override (train.seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Resume from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset (PSNR/SSIM, Y channel).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Must match the checkpoint scale when given.
        #[arg(long)]
        scale: Option<usize>,
        /// Write the per-image report CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also evaluate the bicubic baseline.
        #[arg(long)]
        baseline: bool,
        /// Worker threads (capped by ISTAR_THREADS).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Super-resolve one PNG.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write a bicubic | model [| ground truth] comparison sheet.
        #[arg(long)]
        side_by_side: Option<PathBuf>,
        /// Ground-truth HR image for the comparison sheet.
        #[arg(long)]
        hr: Option<PathBuf>,
    },
    /// Finite-difference audit of the analytic gradients (64-bit mode).
    Gradcheck {
        /// Spatial extent of the probe input.
        #[arg(long, default_value_t = 8)]
        size: usize,
        /// Number of unfolded blocks.
        #[arg(long, default_value_t = 1)]
        iters: usize,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        /// Coordinates sampled per tensor (0 = all).
        #[arg(long, default_value_t = 0)]
        samples: usize,
    },
    /// Print the exact parameter count, stage breakdown, and MAC estimate.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        scale: usize,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        iterations: usize,
        #[arg(long)]
        st_channels: Option<usize>,
        /// Input extent for the MAC estimate.
        #[arg(long, default_value_t = 48)]
        height: usize,
        #[arg(long, default_value_t = 48)]
        width: usize,
    },
    /// Generate the offline synthetic mini-corpus.
    MakeDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the degraded LR PNGs into LRx<scale>/.
        #[arg(long)]
        cache_lr: Option<usize>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::CheckpointMismatch(_) => 3,
        Error::NonFinite { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::IstaSolve {
            problem,
            alpha,
            lambda,
            max_iters,
            tol,
            trace_out,
        } => cmd_ista_solve(&problem, alpha, lambda, max_iters, tol, trace_out.as_deref()),
        Cmd::Train {
            config,
            sets,
            data,
            seed,
            out_dir,
            resume,
        } => cmd_train(config.as_deref(), &sets, data, seed, out_dir, resume.as_deref()),
        Cmd::Eval {
            ckpt,
            data,
            scale,
            out,
            baseline,
            threads,
        } => cmd_eval(&ckpt, &data, scale, out.as_deref(), baseline, threads),
        Cmd::Infer {
            ckpt,
            input,
            output,
            side_by_side,
            hr,
        } => cmd_infer(&ckpt, &input, &output, side_by_side.as_deref(), hr.as_deref()),
        Cmd::Gradcheck {
            size,
            iters,
            channels,
            seed,
            eps,
            samples,
        } => cmd_gradcheck(size, iters, channels, seed, eps, samples),
        Cmd::Params {
            config,
            scale,
            channels,
            iterations,
            st_channels,
            height,
            width,
        } => cmd_params(config.as_deref(), scale, channels, iterations, st_channels, height, width),
        Cmd::MakeDataset {
            out,
            count,
            seed,
            cache_lr,
        } => cmd_make_dataset(&out, count, seed, cache_lr),
    }
}

fn cmd_ista_solve(
    problem_path: &Path,
    alpha: Option<f64>,
    lambda: Option<f64>,
    max_iters: usize,
    tol: f64,
    trace_out: Option<&Path>,
) -> Result<()> {
    let mut problem = IstaProblem::from_file(problem_path)?;
    if let Some(l) = lambda {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(Error::invalid("ista-solve", "--lambda must be finite and >= 0"));
        }
        problem.lambda = l;
    }
    let cfg = IstaSolverConfig {
        alpha,
        max_iters,
        tol,
    };
    let (x, trace) = solver::solve(&problem, &cfg)?;

    println!("problem: {} ({}x{}), lambda = {}", problem_path.display(), problem.m(), problem.n(), problem.lambda);
    println!("alpha = {:.6e}", trace.alpha);
    println!(
        "iterations = {}, converged = {}",
        trace.objectives.len() - 1,
        trace.converged
    );
    println!("final objective = {:.12e}", trace.objectives.last().unwrap());
    println!(
        "fixed point = {}",
        solver::check_fixed_point(&problem, &x, trace.alpha)?
    );
    let solution: Vec<String> = x.iter().map(|v| format!("{v:.12e}")).collect();
    println!("solution = {}", solution.join(" "));

    if let Some(path) = trace_out {
        std::fs::write(path, trace.to_csv())?;
        let cfg_text = format!(
            "solver.alpha={}\nsolver.lambda={}\nsolver.max_iters={}\nsolver.tol={:e}\n",
            trace.alpha, problem.lambda, max_iters, tol
        );
        std::fs::write(path.with_extension("cfg"), cfg_text)?;
        println!("trace written to {}", path.display());
    }
    Ok(())
}

fn build_run_config(
    config: Option<&Path>,
    sets: &[String],
    data: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut rc = match config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set {kv}: expected KEY=VALUE")))?;
        rc.set(k.trim(), v.trim())?;
    }
    if let Some(d) = data {
        rc.set("data.root", &d.to_string_lossy())?;
    }
    if let Some(s) = seed {
        rc.set("train.seed", &s.to_string())?;
    }
    Ok(rc)
}

fn cmd_train(
    config: Option<&Path>,
    sets: &[String],
    data: Option<PathBuf>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    resume: Option<&Path>,
) -> Result<()> {
    let rc = build_run_config(config, sets, data, seed)?;
    let model_cfg = rc.model_config()?;
    let train_cfg = rc.train_config()?;
    let data_root = rc.data_root()?;

    let out_dir = out_dir.unwrap_or_else(|| {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        PathBuf::from("runs").join(format!("{stamp}-seed{}", train_cfg.seed))
    });

    let mut model = match resume {
        None => IstarModel::<f32>::new(model_cfg.clone(), train_cfg.seed)?,
        Some(ckpt) => {
            let (m, had_opt) = checkpoint::load::<f32>(ckpt)?;
            if m.config != model_cfg {
                return Err(Error::CheckpointMismatch(format!(
                    "checkpoint config {:?} vs requested {:?}",
                    m.config, model_cfg
                )));
            }
            if !had_opt {
                eprintln!("note: checkpoint has no optimizer state, starting from step 0");
            }
            m
        }
    };

    let pairs = load_dataset(&data_root, model_cfg.scale)?;
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("resolved.cfg"), rc.resolved()?)?;

    let total = train_cfg.total_steps();
    println!(
        "training {} params for steps {}..={} on {} images -> {}",
        model.count_params(),
        model.params.step() + 1,
        total,
        pairs.len(),
        out_dir.display()
    );
    let outcome = train(&mut model, &pairs, &train_cfg, &out_dir, |row| {
        if row.step % 50 == 0 || row.step == total {
            println!(
                "step {:>6}/{total}  epoch {:>4}  lr {:.3e}  loss {:.6}",
                row.step, row.epoch, row.lr, row.loss
            );
        }
    })?;
    println!(
        "done; final loss {:.6}; checkpoint {}",
        outcome.log.last().map(|r| r.loss).unwrap_or(f64::NAN),
        outcome.final_checkpoint.display()
    );
    Ok(())
}

fn print_report(label: &str, report: &EvalReport) {
    println!("{label} (shave {}, mode {}):", report.shave, report.mode);
    println!("  {:<24} {:>10} {:>10}", "image", "psnr_db", "ssim");
    for row in &report.rows {
        println!("  {:<24} {:>10.4} {:>10.5}", row.image, row.psnr_db, row.ssim);
    }
    println!(
        "  {:<24} {:>10.4} {:>10.5}",
        "mean", report.mean_psnr, report.mean_ssim
    );
}

fn env_thread_cap() -> Option<usize> {
    std::env::var("ISTAR_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
}

fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    scale: Option<usize>,
    out: Option<&Path>,
    baseline: bool,
    threads: Option<usize>,
) -> Result<()> {
    let (model, _) = checkpoint::load::<f32>(ckpt)?;
    if let Some(s) = scale {
        if s != model.config.scale {
            return Err(Error::CheckpointMismatch(format!(
                "--scale {s} but checkpoint was trained at scale {}",
                model.config.scale
            )));
        }
    }
    let threads = threads
        .or(env_thread_cap())
        .unwrap_or(4)
        .min(env_thread_cap().unwrap_or(usize::MAX))
        .max(1);
    let pairs = load_dataset(data, model.config.scale)?;
    let report = evaluate(&model, &pairs, threads)?;
    print_report("model", &report);
    if baseline {
        let base = evaluate_bicubic(&pairs, threads)?;
        print_report("bicubic baseline", &base);
        println!(
            "mean Y-PSNR delta = {:+.4} dB",
            report.mean_psnr - base.mean_psnr
        );
    }
    if let Some(path) = out {
        std::fs::write(path, report.to_csv())?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

/// Place `[3, H, W]` images side by side with a 2-pixel white gutter.
fn hconcat(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let h = images[0].shape()[1];
    let gutter = 2usize;
    let mut w_total = 0;
    for img in images {
        let (_, ih, iw) = img.dims3("side-by-side")?;
        if ih != h {
            return Err(Error::shape(
                "side-by-side",
                format!("panel heights differ: {ih} vs {h}"),
            ));
        }
        w_total += iw;
    }
    w_total += gutter * (images.len() - 1);
    let mut out = vec![1.0f32; 3 * h * w_total];
    let mut x0 = 0usize;
    for img in images {
        let (_, _, iw) = img.dims3("side-by-side")?;
        for c in 0..3 {
            for y in 0..h {
                let src = &img.data()[(c * h + y) * iw..][..iw];
                out[(c * h + y) * w_total + x0..][..iw].copy_from_slice(src);
            }
        }
        x0 += iw + gutter;
    }
    Ok(Tensor::from_vec(&[3, h, w_total], out)?)
}

fn cmd_infer(
    ckpt: &Path,
    input: &Path,
    output: &Path,
    side_by_side: Option<&Path>,
    hr: Option<&Path>,
) -> Result<()> {
    let (model, _) = checkpoint::load::<f32>(ckpt)?;
    let lr = load_png(input)?;
    let (c, h, w) = lr.dims3("infer")?;
    let out = model.infer(&lr.reshaped(&[1, c, h, w])?)?;
    let r = model.config.scale;
    let sr = out.reshaped(&[3, r * h, r * w])?;
    save_png(&sr, output)?;
    println!(
        "{} ({h}x{w}) -> {} ({}x{})",
        input.display(),
        output.display(),
        r * h,
        r * w
    );

    if let Some(sheet) = side_by_side {
        let upscaled = bicubic_resize(&lr, r * h, r * w)?.map(|v| v.clamp(0.0, 1.0));
        let mut panels: Vec<&Tensor<f32>> = vec![&upscaled, &sr];
        let truth;
        if let Some(hr_path) = hr {
            truth = load_png(hr_path)?;
            if truth.shape() != sr.shape() {
                return Err(Error::shape(
                    "side-by-side",
                    format!(
                        "ground truth {:?} does not match output {:?}",
                        truth.shape(),
                        sr.shape()
                    ),
                ));
            }
            panels.push(&truth);
        }
        save_png(&hconcat(&panels)?, sheet)?;
        println!("comparison sheet written to {}", sheet.display());
    }
    Ok(())
}

fn cmd_gradcheck(
    size: usize,
    iters: usize,
    channels: usize,
    seed: u64,
    eps: f64,
    samples: usize,
) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let cfg = ModelConfig::with_dims(2, channels, iters);
    let model = IstarModel::<f64>::new(cfg.clone(), seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
    let input = Tensor::from_vec(
        &[1, 3, size, size],
        (0..3 * size * size).map(|_| rng.random_range(0.0..1.0)).collect(),
    )?;
    let target = Tensor::from_vec(
        &[1, 3, 2 * size, 2 * size],
        (0..12 * size * size).map(|_| rng.random_range(0.0..1.0)).collect(),
    )?;

    let build = move |g: &mut istar_core::Graph<f64>, params: &ParamStore<f64>| {
        let m = IstarModel {
            config: cfg.clone(),
            params: params.clone(),
        };
        let out = m.forward(g, &input)?;
        let t = g.constant(target.clone());
        l1_loss(g, out, t)
    };
    let mut params = model.params;
    let report = grad_check(&build, &mut params, eps, samples, seed)?;
    println!(
        "gradcheck: K={iters} C={channels} input {size}x{size}, eps {eps:e}, {} coordinates checked, {} kink-adjacent skipped",
        report.checked, report.skipped
    );
    println!("max relative error = {:.3e}", report.max_rel_error);
    if report.max_rel_error < 1e-4 {
        println!("PASS (threshold 1e-4)");
        Ok(())
    } else {
        println!("FAIL (threshold 1e-4)");
        Err(Error::non_finite(format!(
            "gradient check failed: {:.3e} >= 1e-4",
            report.max_rel_error
        )))
    }
}

fn cmd_params(
    config: Option<&Path>,
    scale: usize,
    channels: usize,
    iterations: usize,
    st_channels: Option<usize>,
    height: usize,
    width: usize,
) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::from_file(p)?.model_config()?,
        None => {
            let mut c = ModelConfig::with_dims(scale, channels, iterations);
            if let Some(s) = st_channels {
                c.st_channels = s;
            }
            c.validate()?;
            c
        }
    };
    let total = model::param_count(&cfg);
    println!(
        "config: scale {} channels {} iterations {} st_channels {} colors {}",
        cfg.scale, cfg.channels, cfg.iterations, cfg.st_channels, cfg.colors
    );
    println!("breakdown:");
    for (stage, n) in model::param_breakdown(&cfg) {
        println!("  {stage:<22} {n:>10}");
    }
    println!("total parameters = {total}");
    let reference = REFERENCE_PARAMS_M * 1e6;
    println!(
        "reference {:.2} M; deviation {:+.2}%",
        REFERENCE_PARAMS_M,
        (total as f64 / reference - 1.0) * 100.0
    );
    let macs = model::estimate_macs(&cfg, height, width);
    println!(
        "mac estimate at {height}x{width} input = {macs} ({:.3} G)",
        macs as f64 / 1e9
    );
    Ok(())
}

fn cmd_make_dataset(out: &Path, count: usize, seed: u64, cache_lr: Option<usize>) -> Result<()> {
    let paths = generate_corpus(out, count, seed)?;
    println!("wrote {} HR images under {}", paths.len(), out.join("HR").display());
    if let Some(scale) = cache_lr {
        let lr_dir = out.join(format!("LRx{scale}"));
        std::fs::create_dir_all(&lr_dir)?;
        for path in &paths {
            let hr = load_png(path)?;
            let pair = make_pair(hr, scale, "")?;
            save_png(&pair.lr, &lr_dir.join(path.file_name().unwrap()))?;
        }
        println!("cached LR images under {}", lr_dir.display());
    }
    Ok(())
}
