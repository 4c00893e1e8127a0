use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use opmt::bench::experiment::{default_tolerance, DatasetSpec, ExperimentConfig};
use opmt::bench::{evaluate, results_table, run_experiment};
use opmt::layers::ForwardMode;
use opmt::model_io::{contract_model, count_params, load_model, save_model, verify_equivalence, TensorArchive};
use opmt::trainer::Mode;

/// Overparameterised multitask training with exact contraction.
#[derive(Parser, Debug)]
#[command(name = "opmt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from a config file; writes metrics, archives and results.json.
    Train {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate an archived model on the validation split of a dataset spec,
    /// e.g. "shapes val=100 size=64 seed=0".
    Eval { archive: PathBuf, dataset: String },
    /// Contract every factorized layer and write the compact model.
    Contract { input: PathBuf, output: PathBuf },
    /// Compare a factorized archive with its compact export.
    Verify {
        factorized: PathBuf,
        compact: PathBuf,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        /// Max-abs tolerance; defaults to 1e-5 (float32) or 1e-10 (float64).
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// How the factorized model evaluates its factors.
        #[arg(long, value_enum, default_value_t = Eval::Contracted)]
        forward: Eval,
    },
    /// List the tensors of an archive.
    Inspect { archive: PathBuf },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Eval {
    Contracted,
    Sequential,
}

fn run(cli: Cli) -> opmt::Result<bool> {
    match cli.command {
        Command::Train {
            config,
            seed,
            mode,
            epochs,
            out_dir,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(m) = mode {
                cfg.train.mode = Mode::parse(&m)?;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(d) = out_dir {
                cfg.out_dir = d;
            }
            let result = run_experiment(&cfg)?;
            print!("{}", results_table(std::slice::from_ref(&result)));
            eprintln!("outputs written to {}", cfg.out_dir.display());
            Ok(true)
        }
        Command::Eval { archive, dataset } => {
            let model = load_model(&archive)?;
            let spec = DatasetSpec::parse(&dataset)?;
            let (_, val) = spec.build(model.dtype())?;
            let report = evaluate(&model, &val)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("plain data"));
            Ok(true)
        }
        Command::Contract { input, output } => {
            let model = load_model(&input)?;
            let compact = contract_model(&model)?;
            save_model(&compact, &output)?;
            println!(
                "{{\"factorized_layers\": {}, \"params_before\": {}, \"params_after\": {}}}",
                model.factorized_layers(),
                model.param_count(),
                count_params(&compact)?.param_count
            );
            Ok(true)
        }
        Command::Verify {
            factorized,
            compact,
            samples,
            tol,
            seed,
            forward,
        } => {
            let fac = load_model(&factorized)?;
            let cmp = load_model(&compact)?;
            let tol = tol.unwrap_or_else(|| default_tolerance(cmp.dtype()));
            let mode = match forward {
                Eval::Contracted => ForwardMode::Contracted,
                Eval::Sequential => ForwardMode::Sequential,
            };
            let report = verify_equivalence(&fac, &cmp, samples, tol, seed, mode)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("plain data"));
            if let Some(w) = &report.warning {
                eprintln!("warning: {w}");
            }
            if !report.passed {
                eprintln!("max abs delta {:e} exceeds tolerance {tol:e}", report.max_abs);
            }
            Ok(report.passed)
        }
        Command::Inspect { archive } => {
            let ar = TensorArchive::load(&archive)?;
            for name in ar.names() {
                let t = ar.get(name).expect("listed name");
                println!("{name}\t{}\t{:?}", t.dtype(), t.shape());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
