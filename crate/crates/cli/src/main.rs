use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use harmap::experiments::{error_exit_code, run, Command, ExperimentConfig};
use serde_json::{json, Value};

/// Runs one experiment from a JSON config or from command-line parameters.
#[derive(Debug, Parser)]
#[command(name = "harmap", version)]
struct Args {
    /// Experiment to run; taken from the config when omitted.
    #[arg(value_enum)]
    command: Option<CommandArg>,

    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory, overriding the config.
    #[arg(long)]
    output: Option<PathBuf>,

    #[arg(long)]
    seed: Option<u64>,

    /// Worker threads; 0 uses every core.
    #[arg(long, env = "HARMAP_THREADS", default_value_t = 0)]
    threads: usize,

    /// Global quadrature grid, as <n_phi>x<n_theta>.
    #[arg(long, value_parser = parse_resolution)]
    resolution: Option<[usize; 2]>,

    /// Lattice spacing.
    #[arg(long)]
    h: Option<f64>,

    /// Boundary data file: a construction plan or a map descriptor.
    #[arg(long)]
    boundary: Option<PathBuf>,

    /// Map descriptor file.
    #[arg(long)]
    map: Option<PathBuf>,

    /// Exported field for `detect` and `verify-coarea`.
    #[arg(long)]
    field: Option<PathBuf>,

    #[arg(long)]
    restarts: Option<usize>,

    #[arg(long)]
    max_sweeps: Option<usize>,

    /// Exponents for `verify-lemma34`.
    #[arg(long, value_delimiter = ',')]
    p: Option<Vec<f64>>,

    /// Scale indices for `verify-lemma34`.
    #[arg(long, value_delimiter = ',')]
    j: Option<Vec<u32>>,

    /// Extra parameter as key=JSON, repeatable.
    #[arg(long = "set", value_parser = parse_assignment)]
    set: Vec<(String, Value)>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum CommandArg {
    Construct,
    Energy,
    Degree,
    Minimize,
    Detect,
    VerifyLemma34,
    VerifyCoarea,
    VerifyCaps,
    SweepHomotopy,
}

impl From<CommandArg> for Command {
    fn from(c: CommandArg) -> Self {
        match c {
            CommandArg::Construct => Command::Construct,
            CommandArg::Energy => Command::Energy,
            CommandArg::Degree => Command::Degree,
            CommandArg::Minimize => Command::Minimize,
            CommandArg::Detect => Command::Detect,
            CommandArg::VerifyLemma34 => Command::VerifyLemma34,
            CommandArg::VerifyCoarea => Command::VerifyCoarea,
            CommandArg::VerifyCaps => Command::VerifyCaps,
            CommandArg::SweepHomotopy => Command::SweepHomotopy,
        }
    }
}

fn parse_resolution(s: &str) -> Result<[usize; 2], String> {
    let (a, b) = s.split_once('x').ok_or_else(|| format!("expected <n_phi>x<n_theta>, got `{s}`"))?;
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}"));
    Ok([parse(a)?, parse(b)?])
}

fn parse_assignment(s: &str) -> Result<(String, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=JSON, got `{s}`"))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

fn absolute(p: &Path) -> std::io::Result<PathBuf> {
    std::path::absolute(p)
}

/// Merges the command line into a config; returns it with the directory that
/// relative input paths are resolved against.
fn assemble(args: &Args) -> Result<(ExperimentConfig, PathBuf), String> {
    let (mut cfg, base_dir) = match &args.config {
        Some(path) => {
            let cfg = ExperimentConfig::load(path).map_err(|e| format!("{}: {e}", path.display()))?;
            let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (cfg, dir)
        }
        None => {
            let command = args.command.ok_or("give a command or --config")?;
            let output_dir = args.output.clone().ok_or("--output is required without --config")?;
            let cfg = ExperimentConfig {
                command: command.into(),
                params: json!({}),
                output_dir,
                seed: 0,
            };
            (cfg, PathBuf::from("."))
        }
    };
    if let Some(c) = args.command {
        if Command::from(c) != cfg.command {
            return Err(format!("command {c:?} disagrees with the config's {:?}", cfg.command));
        }
    }
    if let Some(out) = &args.output {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let mut params: Vec<(String, Value)> = Vec::new();
    if let Some(r) = args.resolution {
        params.push(("resolution".into(), json!(r)));
    }
    if let Some(h) = args.h {
        params.push(("h".into(), json!(h)));
    }
    if let Some(n) = args.restarts {
        params.push(("restarts".into(), json!(n)));
    }
    if let Some(n) = args.max_sweeps {
        params.push(("max_sweeps".into(), json!(n)));
    }
    if let Some(p) = &args.p {
        params.push(("p".into(), json!(p)));
    }
    if let Some(j) = &args.j {
        params.push(("j".into(), json!(j)));
    }
    let path_value = |p: &Path| -> Result<Value, String> {
        Ok(json!(absolute(p).map_err(|e| e.to_string())?.to_string_lossy()))
    };
    if let Some(b) = &args.boundary {
        let text = std::fs::read(b).map_err(|e| format!("{}: {e}", b.display()))?;
        let v: Value = serde_json::from_slice(&text).map_err(|e| format!("{}: {e}", b.display()))?;
        let key = if v.get("N").is_some() { "plan" } else { "map" };
        params.push((key.into(), path_value(b)?));
    }
    if let Some(m) = &args.map {
        params.push(("map".into(), path_value(m)?));
    }
    if let Some(f) = &args.field {
        params.push(("field".into(), path_value(f)?));
    }
    params.extend(args.set.iter().cloned());
    for (k, v) in params {
        cfg.set_param(&k, v).map_err(|e| e.to_string())?;
    }
    Ok((cfg, base_dir))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(args.threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(3);
    }
    let (cfg, base_dir) = match assemble(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    };
    match run(&cfg, &base_dir) {
        Ok(report) => {
            for c in report.summary.checks.iter().filter(|c| !c.pass) {
                eprintln!("FAIL {}: {} (want {} {})", c.name, c.value, c.relation, c.bound);
            }
            println!(
                "{}: {} checks, {} failed; summary in {}",
                serde_json::to_string(&cfg.command).unwrap_or_default().trim_matches('"'),
                report.summary.checks.len(),
                report.summary.checks.iter().filter(|c| !c.pass).count(),
                cfg.output_dir.join("summary.json").display()
            );
            ExitCode::from(report.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(error_exit_code(&e) as u8)
        }
    }
}
