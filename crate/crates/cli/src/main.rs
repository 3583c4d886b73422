//! `sobomap`: runs one named experiment and writes its artifacts plus a manifest.

#![allow(clippy::neg_cmp_op_on_partial_ord)]
mod config;
mod experiments;

use clap::Parser;
use config::{Experiment, ExperimentConfig, SchemaError};
use serde_json::{json, Map, Value};
use sobomap_core::error::Error as CoreError;
use std::path::PathBuf;
use std::process::ExitCode;

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("SOBOMAP_GIT_DESCRIBE"), ")");

#[derive(Debug, Parser)]
#[command(name = "sobomap", version = VERSION, about = "Density experiments for manifold-valued Sobolev maps")]
struct Cli {
    #[arg(value_enum)]
    experiment: Experiment,
    /// JSON config or a previous run's manifest; its keys take precedence over flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    eta: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    mu: Option<Vec<f64>>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    shifts: Option<usize>,
    #[arg(long)]
    per_band: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    field: Option<String>,
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    estimator: Option<String>,
    #[arg(long)]
    class: Option<String>,
    /// Report failed class checks instead of aborting the ladder.
    #[arg(long)]
    keep_going: bool,
}

impl Cli {
    fn flags(&self) -> Value {
        let mut o = Map::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                o.insert(k.into(), v);
            }
        };
        put("target", self.target.clone().map(Value::from));
        put("m", self.m.map(Value::from));
        put("l", self.l.map(Value::from));
        put("s", self.s.map(Value::from));
        put("p", self.p.map(Value::from));
        put("eta", self.eta.clone().map(Value::from));
        put("mu", self.mu.clone().map(Value::from));
        put("samples", self.samples.map(Value::from));
        put("shifts", self.shifts.map(Value::from));
        put("per_band", self.per_band.map(Value::from));
        put("seed", self.seed.map(Value::from));
        put("out", self.out.as_ref().map(|p| Value::from(p.to_string_lossy().into_owned())));
        put("field", self.field.clone().map(Value::from));
        put("domain", self.domain.clone().map(Value::from));
        put("estimator", self.estimator.clone().map(Value::from));
        put("class", self.class.clone().map(Value::from));
        put("keep_going", self.keep_going.then_some(Value::Bool(true)));
        Value::Object(o)
    }
}

enum Failure {
    Schema(SchemaError),
    Divergence(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        if let Some(s) = e.downcast_ref::<SchemaError>() {
            return Failure::Schema(s.clone());
        }
        if let Some(CoreError::Divergence(msg)) = e.downcast_ref::<CoreError>() {
            return Failure::Divergence(msg.clone());
        }
        Failure::Other(e)
    }
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::defaults(cli.experiment);
    cfg.overlay(&cli.flags()).map_err(Failure::Schema)?;
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Schema(SchemaError::new("$", &format!("cannot read {}: {e}", path.display()))))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Failure::Schema(SchemaError::new("$", &format!("invalid JSON in {}: {e}", path.display()))))?;
        // a manifest carries the resolved config under "config"
        let v = match v.get("config") {
            Some(inner) if v.get("version").is_some() => inner.clone(),
            _ => v,
        };
        cfg.overlay(&v).map_err(Failure::Schema)?;
    }
    cfg.validate().map_err(Failure::Schema)?;
    Ok(cfg)
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("SOBOMAP_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| Failure::Schema(SchemaError::new("SOBOMAP_THREADS", &format!("{v:?} is not a positive integer"))))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Other(e.into()))
}

fn run(cli: &Cli) -> Result<bool, Failure> {
    configure_threads()?;
    let cfg = resolve(cli)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| Failure::Other(anyhow::anyhow!("creating {}: {e}", cfg.out.display())))?;
    let manifest = json!({"version": VERSION, "config": cfg});
    std::fs::write(cfg.out.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest serializes")).map_err(|e| Failure::Other(e.into()))?;
    let out = cfg.out.clone();
    let outcome = match cfg.experiment {
        Experiment::Project => experiments::project(&cfg, &out),
        Experiment::Uncross => experiments::uncross(&cfg, &out),
        Experiment::Energy => experiments::energy(&cfg, &out),
        Experiment::RetractionDemo => experiments::retraction_demo(&cfg, &out),
        Experiment::ClassVerify => experiments::class_verify(&cfg, &out),
    }?;
    let summary = json!({"experiment": cfg.experiment.to_string(), "pass": outcome.pass, "result": outcome.summary});
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary).expect("summary serializes")).map_err(|e| Failure::Other(e.into()))?;
    println!("{} {}: artifacts in {}", if outcome.pass { "PASS" } else { "FAIL" }, cfg.experiment, out.display());
    Ok(outcome.pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Schema(e)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(Failure::Divergence(msg)) => {
            eprintln!("numerical divergence: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
