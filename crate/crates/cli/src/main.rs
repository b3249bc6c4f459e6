use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{Map, Value};
use tempfile::NamedTempFile;

use cswitch::grids::write_grid_csv;
use cswitch::model::SwitchingProblem;
use cswitch::solver::{backward_induction_into, read_solution, DumpSink};
use cswitch_cli::config::{manifest, Config, ConfigError};
use cswitch_cli::run::{bounds_csv, table_preset, table_variants, Experiment, Solution};

#[derive(Parser)]
#[command(name = "cswitch", version, about = "Optimal switching experiments with primal/dual bounds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON); defaults to the gbm-bs preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Use single-neighbour acceleration in the solver.
    #[arg(long, global = true)]
    fast: bool,
    /// Output directory (default: output.dir of the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Backward induction; writes solution.bin and grid.csv.
    Solve,
    /// Primal/dual estimates per (z0, mode) from a solution dump.
    Bounds {
        /// Solution dump (default: <out>/solution.bin).
        #[arg(long)]
        solution: Option<PathBuf>,
    },
    /// Policy switching prices per reserve level from a solution dump.
    Policy {
        #[arg(long)]
        solution: Option<PathBuf>,
    },
    /// Simulated state paths.
    Paths,
    /// The solver grid as CSV.
    Grid,
    /// Solve and bound every variant of one results table.
    ReproTable {
        #[arg(value_parser = clap::value_parser!(u8).range(1..=5))]
        table: u8,
    },
}

/// Files are staged next to their destination and only renamed into place
/// once the whole command has succeeded.
struct Staging {
    dir: PathBuf,
    files: Vec<(NamedTempFile, PathBuf)>,
}

impl Staging {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn temp(&self) -> Result<NamedTempFile> {
        let mut b = tempfile::Builder::new();
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            b.permissions(std::fs::Permissions::from_mode(0o644));
        }
        Ok(b.prefix(".cswitch").tempfile_in(&self.dir)?)
    }

    fn stage(&mut self, file: NamedTempFile, name: &str) {
        self.files.push((file, self.dir.join(name)));
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let mut f = self.temp()?;
        f.write_all(text.as_bytes())?;
        self.stage(f, name);
        Ok(())
    }

    fn commit(self) -> Result<()> {
        for (f, dest) in self.files {
            f.persist(&dest).with_context(|| format!("writing {}", dest.display()))?;
        }
        Ok(())
    }
}

fn resolve(cli: &Cli, preset_name: Option<&str>) -> Result<Config> {
    let mut doc = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(ConfigError::from)?;
            serde_json::from_str::<Value>(&text).map_err(ConfigError::from)?
        }
        None => Value::Object(Map::new()),
    };
    if let Some(name) = preset_name {
        if doc.get("preset").is_some_and(|p| p != name) {
            return Err(ConfigError::Invalid(format!("this table uses the {name} preset")).into());
        }
        if let Value::Object(m) = &mut doc {
            m.insert("preset".into(), Value::from(name));
        }
    }
    let mut cfg = Config::from_value(doc)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.fast {
        cfg.solver.fast = true;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &Config) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir))
}

fn load_solution(path: &Path) -> Result<Solution> {
    let f = File::open(path).with_context(|| format!("opening solution dump {}", path.display()))?;
    let (values, cont) = read_solution(BufReader::new(f)).context("reading solution dump")?;
    Ok(Solution { values, cont })
}

fn write_manifest(stage: &mut Staging, cfg: &Config, command: &str, timings: Map<String, Value>) -> Result<()> {
    let mut extra = Map::new();
    extra.insert("timings_s".into(), Value::Object(timings));
    let m = manifest(cfg, command, extra);
    stage.text(&format!("manifest-{command}.json"), &serde_json::to_string_pretty(&m)?)
}

fn secs(t: Instant) -> Value {
    Value::from(t.elapsed().as_secs_f64())
}

fn execute(cli: &Cli) -> Result<()> {
    let preset_name = match &cli.command {
        Command::ReproTable { table } => table_preset(*table),
        _ => None,
    };
    let cfg = resolve(cli, preset_name)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(ConfigError::Invalid("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let dir = out_dir(cli, &cfg);
    let exp = Experiment::new(cfg.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let mut timings = Map::new();
    let mut stage = Staging::new(&dir)?;
    let name = match &cli.command {
        Command::Solve => {
            let t = Instant::now();
            let grid = exp.grid()?;
            let sampling = exp.sampling()?;
            timings.insert("setup".into(), secs(t));
            let t = Instant::now();
            let tmp = stage.temp()?;
            let mut sink = DumpSink::new(BufWriter::new(tmp), &grid, exp.model.n_positions(), exp.horizon())?;
            backward_induction_into(&exp.model, &grid, &sampling, &exp.solver_options(), &mut sink)?;
            let tmp = sink.into_inner()?.into_inner().map_err(|e| e.into_error())?;
            timings.insert("solve".into(), secs(t));
            stage.stage(tmp, "solution.bin");
            let mut g = Vec::new();
            write_grid_csv(&grid, &mut g)?;
            stage.text("grid.csv", std::str::from_utf8(&g)?)?;
            "solve"
        }
        Command::Bounds { solution } => {
            let path = solution.clone().unwrap_or_else(|| dir.join("solution.bin"));
            let sol = load_solution(&path)?;
            let t = Instant::now();
            let rows = exp.bounds(&sol)?;
            timings.insert("bounds".into(), secs(t));
            stage.text("bounds.csv", &bounds_csv(&cfg.name, &rows, true))?;
            "bounds"
        }
        Command::Policy { solution } => {
            let path = solution.clone().unwrap_or_else(|| dir.join("solution.bin"));
            let sol = load_solution(&path)?;
            stage.text("policy.csv", &exp.policy_csv(&sol.cont)?)?;
            "policy"
        }
        Command::Paths => {
            let paths = exp.paths()?;
            let mut buf = Vec::new();
            paths.write_csv(&mut buf)?;
            stage.text("paths.csv", std::str::from_utf8(&buf)?)?;
            "paths"
        }
        Command::Grid => {
            let grid = exp.grid()?;
            let mut buf = Vec::new();
            write_grid_csv(&grid, &mut buf)?;
            stage.text("grid.csv", std::str::from_utf8(&buf)?)?;
            "grid"
        }
        Command::ReproTable { table } => {
            let mut csv = String::from(cswitch::duality::CSV_HEADER);
            csv.push('\n');
            for variant in table_variants(*table, &cfg) {
                let t = Instant::now();
                let label = variant.name.clone();
                let e = Experiment::new(variant)?;
                let sol = e.solve()?;
                let rows = e.bounds(&sol)?;
                csv.push_str(&bounds_csv(&label, &rows, false));
                timings.insert(label, secs(t));
            }
            stage.text(&format!("table{table}.csv"), &csv)?;
            return finish(stage, &cfg, &format!("table{table}"), timings);
        }
    };
    finish(stage, &cfg, name, timings)
}

fn finish(mut stage: Staging, cfg: &Config, command: &str, timings: Map<String, Value>) -> Result<()> {
    write_manifest(&mut stage, cfg, command, timings)?;
    stage.commit()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<cswitch::Error>() {
        Some(cswitch::Error::NotEnoughPoints { .. } | cswitch::Error::InvalidGrid(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
