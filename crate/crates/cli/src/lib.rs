//! The `easynlp` application layer: flag parsing, the app registry and the
//! train / evaluate / predict pipelines.

pub mod apps;
pub mod config;
pub mod error;
pub mod state;

pub use config::{parse_cli, AppKind, AppName, CliConfig, RunMode, APPS};
pub use error::{CliError, UsageError, EXIT_DATA, EXIT_MODEL, EXIT_OK, EXIT_USAGE};

const USAGE: &str = "usage: easynlp --mode=train|evaluate|predict --tables=TRAIN[,DEV] --input_schema=COL:TYPE:N,... \
--first_sequence=COL [--second_sequence=COL] [--label_name=COL --label_enumerate_values=A,B,...] \
--checkpoint_dir=DIR [--outputs=FILE] [--app_name=APP] [--user_defined_parameters='k=v ...']";

/// Runs one invocation and returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let cfg = match parse_cli(argv) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}\n{USAGE}");
            return EXIT_USAGE;
        }
    };
    match dispatch(&cfg) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cfg: &CliConfig) -> Result<(), CliError> {
    match cfg.mode {
        RunMode::Train => {
            let r = apps::run_train(cfg)?;
            println!(
                "{}: best {} {:.4} at epoch {} of {}; checkpoint in {}",
                r.app_name,
                r.dev_metric_name,
                r.best_dev_metric,
                r.best_epoch,
                r.epochs.len(),
                r.checkpoint_dir
            );
        }
        RunMode::Evaluate => {
            let r = apps::run_evaluate(cfg)?;
            let parts: Vec<String> = r.metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
            println!("{} on {} examples: {}", r.app_name, r.num_examples, parts.join(" "));
        }
        RunMode::Predict => {
            let n = apps::run_predict(cfg)?;
            let out = cfg.outputs.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
            println!("wrote {n} predictions to {out}");
        }
    }
    Ok(())
}
