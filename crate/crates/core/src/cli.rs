//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 when a computation fails (message on the
//! error stream), 2 on a usage error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::alignment::{align_loss_maps, PatchFeatureMap};
use crate::codebook::{init_codebook, pca_export, quantize, Codebook, InitScheme, UtilizationRecord};
use crate::error::{Error, Result};
use crate::metrics::paired_t_test;
use crate::perturbation::{
    bounds_eps1_with, compare_report, kl_dropout, kl_qpm, perturbed_marginal, report_csv, sample_perturbed,
    transition_kernel_with, KernelDistance, PerturbationKind, ReportRow,
};
use crate::pipeline::{dataset_csv, evaluate_model, gen_synthetic_dataset, load_checkpoint, test_dataset, train, TrainConfig};
use crate::scalar::fmt_sig17;
use crate::tensor::Tensor;

#[derive(Debug, Parser)]
#[command(name = "vqlab", version, about = "Codebook perturbation analytics and semi-supervised segmentation training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Output {
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CodebookArg {
    /// Codebook file: `K D metric` then K lines of D values.
    #[arg(long)]
    codebook: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic segmentation dataset as CSV.
    GenData {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0.1)]
        labeled_ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: Output,
    },
    /// Codebook initialisation and inspection.
    Codebook {
        #[command(subcommand)]
        action: CodebookCommand,
    },
    /// Nearest-codeword assignment of a `[..., D]` feature tensor.
    Quantize {
        #[command(flatten)]
        cb: CodebookArg,
        /// Feature tensor file.
        #[arg(long)]
        features: PathBuf,
        #[command(flatten)]
        out: Output,
    },
    /// Quantize, then resample every index from its transition row.
    Perturb {
        #[command(flatten)]
        cb: CodebookArg,
        #[arg(long)]
        features: PathBuf,
        /// Perturbation strength in [0, 1].
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value = "euclidean")]
        distance: KernelDistance,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: Output,
    },
    /// Dump the K x K transition kernel.
    Kernel {
        #[command(flatten)]
        cb: CodebookArg,
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value = "euclidean")]
        distance: KernelDistance,
        #[command(flatten)]
        out: Output,
    },
    /// KL divergence over a grid of strengths.
    KlCurve {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Comma-separated strengths (eps for qpm, p for dropout).
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        grid: Vec<f64>,
        /// Single strength, appended to the grid.
        #[arg(long, allow_negative_numbers = true)]
        eps: Option<f64>,
        /// Codebook file; required for qpm.
        #[arg(long)]
        codebook: Option<PathBuf>,
        #[arg(long, default_value = "euclidean")]
        distance: KernelDistance,
        #[command(flatten)]
        out: Output,
    },
    /// Marginal bounds at full strength against the realised marginal.
    Bounds {
        #[command(flatten)]
        cb: CodebookArg,
        #[arg(long, default_value = "euclidean")]
        distance: KernelDistance,
        #[command(flatten)]
        out: Output,
    },
    /// KL of QPM and dropout side by side.
    Compare {
        /// Codebook file; a seeded K=64, D=8 uniform codebook when omitted.
        #[arg(long)]
        codebook: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.3,0.5,0.7,0.9,1")]
        eps_grid: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.3,0.5,0.7,0.9")]
        p_grid: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: Output,
    },
    /// Patch contrastive loss between two `[h, w, c]` feature maps.
    AlignLoss {
        #[arg(long)]
        pfa: PathBuf,
        #[arg(long)]
        fm: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
        #[command(flatten)]
        out: Output,
    },
    /// Train student and teacher and write the run directory.
    Train {
        /// Flat key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Config override, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a saved run's student (or teacher) on its held-out set.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        teacher: bool,
        #[command(flatten)]
        out: Output,
    },
    /// Paired two-tailed t-test.
    Ttest {
        #[arg(long, value_delimiter = ',', required = true)]
        a: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        b: Vec<f64>,
        #[command(flatten)]
        out: Output,
    },
}

#[derive(Debug, Subcommand)]
enum CodebookCommand {
    /// Create a codebook.
    Init {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        d: usize,
        #[arg(long, value_enum, default_value_t = Scheme::Uniform)]
        scheme: Scheme,
        /// `[N, D]` sample tensor for k-means.
        #[arg(long)]
        sample: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: Output,
    },
    /// Utilization of the codebook on a feature tensor.
    Report {
        #[command(flatten)]
        cb: CodebookArg,
        #[arg(long)]
        features: PathBuf,
        #[command(flatten)]
        out: Output,
    },
    /// Two-component PCA of the codewords.
    ExportPca {
        #[command(flatten)]
        cb: CodebookArg,
        /// Marks codewords used by these features as active; all are active otherwise.
        #[arg(long)]
        features: Option<PathBuf>,
        #[command(flatten)]
        out: Output,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Qpm,
    Dropout,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scheme {
    Uniform,
    Kmeans,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

fn load_codebook(path: &Path) -> Result<Codebook<f64>> {
    Codebook::from_text(&read(path)?).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

fn load_tensor(path: &Path) -> Result<Tensor<f64>> {
    Tensor::from_text(&read(path)?).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

fn emit(out: &Output, text: &str, stdout: &mut dyn Write) -> Result<()> {
    match &out.out {
        Some(p) => fs::write(p, text)?,
        None => stdout.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn check_unit(name: &'static str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::invalid(name, format!("{v} is outside [0, 1]")));
    }
    Ok(())
}

fn execute(cmd: Command, stdout: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::GenData {
            n,
            size,
            labeled_ratio,
            seed,
            out,
        } => {
            let data = gen_synthetic_dataset::<f64>(n, size, seed, labeled_ratio)?;
            emit(&out, &dataset_csv(&data), stdout)
        }
        Command::Codebook { action } => codebook_command(action, stdout),
        Command::Quantize { cb, features, out } => {
            let cb = load_codebook(&cb.codebook)?;
            let qm = quantize(&load_tensor(&features)?, &cb)?;
            let mut s = String::from("position,index\n");
            for (p, i) in qm.indices.iter().enumerate() {
                s.push_str(&format!("{p},{i}\n"));
            }
            emit(&out, &s, stdout)
        }
        Command::Perturb {
            cb,
            features,
            eps,
            distance,
            seed,
            out,
        } => {
            check_unit("eps", eps)?;
            let cb = load_codebook(&cb.codebook)?;
            let qm = quantize(&load_tensor(&features)?, &cb)?;
            let kernel = transition_kernel_with(&cb, eps, distance)?;
            let pm = sample_perturbed(&qm, &kernel, &cb, seed)?;
            let mut s = String::from("position,index,perturbed\n");
            for (p, (i, j)) in qm.indices.iter().zip(&pm.indices).enumerate() {
                s.push_str(&format!("{p},{i},{j}\n"));
            }
            emit(&out, &s, stdout)
        }
        Command::Kernel { cb, eps, distance, out } => {
            check_unit("eps", eps)?;
            let cb = load_codebook(&cb.codebook)?;
            emit(&out, &transition_kernel_with(&cb, eps, distance)?.to_text(), stdout)
        }
        Command::KlCurve {
            mode,
            mut grid,
            eps,
            codebook,
            distance,
            out,
        } => {
            grid.extend(eps);
            if grid.is_empty() {
                return Err(Error::invalid("grid", "give --grid or --eps"));
            }
            let mut rows = Vec::with_capacity(grid.len());
            match mode {
                Mode::Dropout => {
                    for p in grid {
                        rows.push(ReportRow {
                            kind: PerturbationKind::Dropout,
                            param: p,
                            kl: kl_dropout(p)?.kl,
                        });
                    }
                }
                Mode::Qpm => {
                    let path = codebook.ok_or_else(|| Error::invalid("codebook", "qpm mode needs --codebook"))?;
                    let cb = load_codebook(&path)?;
                    for e in grid {
                        check_unit("eps", e)?;
                        let kernel = transition_kernel_with(&cb, e, distance)?;
                        rows.push(ReportRow {
                            kind: PerturbationKind::Qpm,
                            param: e,
                            kl: kl_qpm(&perturbed_marginal(&kernel))?,
                        });
                    }
                }
            }
            emit(&out, &report_csv(&rows), stdout)
        }
        Command::Bounds { cb, distance, out } => {
            let cb = load_codebook(&cb.codebook)?;
            let b = bounds_eps1_with(&cb, distance)?;
            let q = perturbed_marginal(&transition_kernel_with(&cb, 1.0, distance)?).q();
            let min_q = q.iter().copied().fold(f64::INFINITY, f64::min);
            let max_q = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s = format!(
                "k,dmin,dmax,lower,upper,min_q,max_q\n{},{},{},{},{},{},{}\n",
                cb.k(),
                fmt_sig17(b.dmin),
                fmt_sig17(b.dmax),
                fmt_sig17(b.lower),
                fmt_sig17(b.upper),
                fmt_sig17(min_q),
                fmt_sig17(max_q)
            );
            emit(&out, &s, stdout)
        }
        Command::Compare {
            codebook,
            eps_grid,
            p_grid,
            seed,
            out,
        } => {
            let cb = match codebook {
                Some(p) => load_codebook(&p)?,
                None => init_codebook(64, 8, InitScheme::UniformRandom, seed, None)?,
            };
            for &e in &eps_grid {
                check_unit("eps", e)?;
            }
            emit(&out, &report_csv(&compare_report(&cb, &eps_grid, &p_grid)?), stdout)
        }
        Command::AlignLoss { pfa, fm, tau, out } => {
            let a = PatchFeatureMap::from_tensor(&load_tensor(&pfa)?)?;
            let b = PatchFeatureMap::from_tensor(&load_tensor(&fm)?)?;
            let loss = align_loss_maps(&a, &b, tau)?;
            emit(&out, &format!("loss\n{}\n", fmt_sig17(loss)), stdout)
        }
        Command::Train {
            config,
            set,
            iters,
            seed,
            out,
        } => {
            let mut cfg = match config {
                Some(p) => TrainConfig::from_text(&read(&p)?)?,
                None => TrainConfig::default(),
            };
            for kv in &set {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::parse("--set", format!("expected KEY=VALUE, got `{kv}`")))?;
                cfg.set(k, v)?;
            }
            if let Some(i) = iters {
                cfg.iters = i;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let run = train::<f64>(cfg)?;
            run.write_artifacts(&out)?;
            stdout.write_all(run.metrics.to_json().as_bytes())?;
            stdout.write_all(b"\n")?;
            Ok(())
        }
        Command::Eval { run, teacher, out } => {
            let cfg = TrainConfig::from_text(&read(&run.join("config.txt"))?)?;
            let which = if teacher { "teacher" } else { "student" };
            let model = load_checkpoint::<f64>(&run.join("checkpoint").join(which))?;
            let report = evaluate_model(&model, &test_dataset(&cfg)?)?;
            emit(&out, &(report.to_json() + "\n"), stdout)
        }
        Command::Ttest { a, b, out } => {
            let t = paired_t_test(&a, &b)?;
            let s = format!(
                "t,p,df,mean_diff,degenerate\n{},{},{},{},{}\n",
                fmt_sig17(t.t),
                fmt_sig17(t.p),
                t.df,
                fmt_sig17(t.mean_diff),
                t.degenerate
            );
            emit(&out, &s, stdout)
        }
    }
}

fn codebook_command(action: CodebookCommand, stdout: &mut dyn Write) -> Result<()> {
    match action {
        CodebookCommand::Init {
            k,
            d,
            scheme,
            sample,
            seed,
            out,
        } => {
            let cb = match scheme {
                Scheme::Uniform => init_codebook::<f64>(k, d, InitScheme::UniformRandom, seed, None)?,
                Scheme::Kmeans => {
                    let path = sample.ok_or_else(|| Error::invalid("sample", "k-means needs --sample"))?;
                    let t = load_tensor(&path)?;
                    init_codebook(k, d, InitScheme::KmeansOnSample, seed, Some(t.data()))?
                }
            };
            emit(&out, &cb.to_text(), stdout)
        }
        CodebookCommand::Report { cb, features, out } => {
            let cb = load_codebook(&cb.codebook)?;
            let qm = quantize(&load_tensor(&features)?, &cb)?;
            let mut hist = vec![0usize; cb.k()];
            qm.indices.iter().for_each(|&i| hist[i] += 1);
            let rec = UtilizationRecord::from_histogram(0, hist);
            emit(&out, &format!("{}\n{}\n", UtilizationRecord::csv_header(), rec.csv_row()), stdout)
        }
        CodebookCommand::ExportPca { cb, features, out } => {
            let cb = load_codebook(&cb.codebook)?;
            let active = match features {
                Some(p) => {
                    let qm = quantize(&load_tensor(&p)?, &cb)?;
                    let mut a = vec![false; cb.k()];
                    qm.indices.iter().for_each(|&i| a[i] = true);
                    a
                }
                None => vec![true; cb.k()],
            };
            let mut s = String::from("index,x,y,active\n");
            for (i, p) in pca_export(&cb, &active)?.iter().enumerate() {
                s.push_str(&format!("{i},{},{},{}\n", fmt_sig17(p.x), fmt_sig17(p.y), u8::from(p.active)));
            }
            emit(&out, &s, stdout)
        }
    }
}

/// Parses `args` (program name first) and runs the command, writing results
/// to `stdout` and diagnostics to `stderr`. Returns the exit code.
pub fn run_with<I, S>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = stdout.write_all(text.as_bytes());
            } else {
                let _ = stderr.write_all(text.as_bytes());
            }
            return code;
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            1
        }
    }
}

/// Runs against the process streams.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let mut out = std::io::stdout().lock();
    let mut err = std::io::stderr().lock();
    let code = run_with(args, &mut out, &mut err);
    let _ = out.flush();
    code
}
