//! `genlayer`: data generation, training runs, bound analysis and the
//! property-check suite.
//!
//! Exit codes: 0 success, 1 property failure, 2 config or flag error,
//! 3 data or shape error.

mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use genlayer::bregman::{BregmanLoss, LossKind};
use genlayer::data::{gen_regression, Dataset, TargetFn};
use genlayer::experiments::presets::{self, Scale};
use genlayer::experiments::{ExperimentSpec, BUILD_ID};
use genlayer::geometry::analyze_bounds;
use genlayer::network::load_checkpoint;
use genlayer::Error;

#[derive(Parser)]
#[command(name = "genlayer", version = BUILD_ID, about = "Generalization-layer experiments and bound analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FnArg {
    Quadratic,
    Cubic,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    /// Negate the output-layer Fisher metric.
    HessianSignFlip,
}

#[derive(Subcommand)]
enum Command {
    /// Write a noisy regression dataset as CSV.
    #[command(allow_negative_numbers = true)]
    GenData {
        #[arg(long = "fn", value_enum)]
        function: FnArg,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = -8.0)]
        lo: f64,
        #[arg(long, default_value_t = 8.0)]
        hi: f64,
        #[arg(long, default_value_t = 10.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment config and write its report directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Replaces every seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Report directory; overrides `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the bound chain of a checkpoint at every row of a dataset.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// squared | softmax_ce | bernoulli
        #[arg(long)]
        loss: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the property suite; exits 1 naming any failing property.
    Verify {
        #[arg(long)]
        quick: bool,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<Fault>,
    },
    /// Run a built-in experiment preset.
    Run {
        /// overfit | gl | longskip | histogram | gld | linear_regression
        preset: String,
        #[arg(long, value_enum, default_value_t = ScaleArg::Desk)]
        scale: ScaleArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a preset's config file, as a starting point for `train`.
    Preset {
        name: String,
        #[arg(long, value_enum, default_value_t = ScaleArg::Desk)]
        scale: ScaleArg,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. } => 2,
            Error::BoundChain { .. } | Error::Diverged { .. } => 1,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

fn scale(s: ScaleArg) -> Scale {
    match s {
        ScaleArg::Desk => Scale::Desk,
        ScaleArg::Full => Scale::Full,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenData {
            function,
            n,
            lo,
            hi,
            sigma,
            seed,
            out,
        } => {
            let f = match function {
                FnArg::Quadratic => TargetFn::Quadratic,
                FnArg::Cubic => TargetFn::Cubic,
            };
            let ds = gen_regression(f, n, lo, hi, sigma, seed).map_err(|e| fail(2, e.to_string()))?;
            ds.write_csv(&out)?;
            println!("wrote {} rows to {} (sha256 {})", ds.len(), out.display(), ds.checksum());
            Ok(())
        }
        Command::Train { config, seed, out } => {
            let mut spec = ExperimentSpec::load(&config)?;
            if let Some(s) = seed {
                spec.override_seed(s);
            }
            let out = out
                .or_else(|| spec.out_dir.clone())
                .ok_or_else(|| fail(2, "no output directory: pass --out or set out_dir in the config"))?;
            spec.out_dir = Some(out.clone());
            run_spec(&spec, &out)
        }
        Command::Run {
            preset,
            scale: s,
            seed,
            out,
        } => {
            let mut spec = presets::by_name(&preset, scale(s))
                .ok_or_else(|| fail(2, format!("unknown preset {preset:?}")))?;
            if let Some(seed) = seed {
                spec.override_seed(seed);
            }
            spec.out_dir = Some(out.clone());
            run_spec(&spec, &out)
        }
        Command::Preset { name, scale: s, out } => {
            let spec = presets::by_name(&name, scale(s)).ok_or_else(|| fail(2, format!("unknown preset {name:?}")))?;
            std::fs::write(&out, spec.to_json() + "\n").map_err(Error::from)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Analyze {
            checkpoint,
            data,
            loss,
            out,
        } => analyze(&checkpoint, &data, &loss, &out),
        Command::Verify { quick, inject_fault } => {
            if let Some(Fault::HessianSignFlip) = inject_fault {
                genlayer::bregman::fault::set_hessian_sign_flip(true);
            }
            let report = verify::run_suite(quick);
            report.print();
            match report.failures() {
                names if names.is_empty() => Ok(()),
                names => Err(fail(1, format!("failing properties: {}", names.join(", ")))),
            }
        }
    }
}

fn run_spec(spec: &ExperimentSpec, out: &Path) -> Result<(), Failure> {
    spec.validate()?;
    // Echo the resolved config before doing any work.
    println!("{}", spec.to_json());
    let report = spec.run(out)?;
    let summary = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    println!("{summary}");
    println!("reports written to {}", out.display());
    Ok(())
}

fn analyze(checkpoint: &Path, data: &Path, loss: &str, out: &Path) -> Result<(), Failure> {
    let kind: LossKind = loss.parse().map_err(|e: Error| fail(2, e.to_string()))?;
    let ckpt = load_checkpoint(checkpoint)?;
    let net = ckpt.network;
    let ds = Dataset::read_csv(data)?;
    if ds.dim_in() != net.input_dim() {
        return Err(fail(
            3,
            format!(
                "data has {} input columns but the checkpoint expects {}",
                ds.dim_in(),
                net.input_dim()
            ),
        ));
    }
    let loss = BregmanLoss::from_kind(kind, net.output_dim());
    let xs: Vec<Vec<f64>> = (0..ds.len()).map(|r| ds.inputs.row(r).to_vec()).collect();
    let report = analyze_bounds(&net, &loss, &xs)?;
    std::fs::create_dir_all(out).map_err(Error::from)?;
    std::fs::write(out.join("bounds.csv"), report.to_csv_string()).map_err(Error::from)?;
    let summary = serde_json::json!({
        "build_id": BUILD_ID,
        "checkpoint": checkpoint,
        "data": data,
        "data_sha256": ds.checksum(),
        "loss": kind,
        "points": report.points.len(),
        "violations": report.violations,
        "sigma_product": report.sigma_product,
        "ln_sigma_product": report.ln_sigma_product,
        "layer_sigmas": report.layer_sigmas,
    });
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(Error::from)? + "\n",
    )
    .map_err(Error::from)?;
    println!(
        "{} points, {} bound-chain violations; wrote {}",
        report.points.len(),
        report.violations,
        out.join("bounds.csv").display()
    );
    if let Some(p) = report.first_violation() {
        return Err(fail(
            1,
            format!("bound chain violated at row {}: {}", p.index, p.violation.as_deref().unwrap_or("")),
        ));
    }
    Ok(())
}
