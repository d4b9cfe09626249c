//! `msrom` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use msrom::config::{parse_config, RunConfig};
use msrom::pipeline::{self, build_model, mean_field, RunOutput};
use msrom::randfield::{self, ingest_field, write_field, write_raster, RasterRecord};
use msrom::{Error, Result};

#[derive(Parser)]
#[command(name = "msrom", version, about = "Multiscale model reduction for transient flow in random media")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; every key has a default.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set mesh.nx=80`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `pod.l`.
    #[arg(long)]
    l: Option<usize>,
    /// Sample seed. Runs use it for training and `seed + 1` for evaluation.
    #[arg(long)]
    seed: Option<u64>,
    /// Cap on worker threads (default: all logical cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Permeability field tooling.
    #[command(subcommand)]
    Field(FieldCmd),
    /// Karhunen-Loève model of the log-permeability.
    #[command(subcommand)]
    Kle(KleCmd),
    /// Pipeline runs.
    #[command(subcommand)]
    Run(RunCmd),
    /// Recompute `stats.csv` from an `errors.csv`.
    Report {
        /// Input errors file.
        errors: PathBuf,
        /// Directory for `stats.csv` (default: next to the input).
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum FieldCmd {
    /// Write the mean field described by the `field` section.
    Synth(Common),
    /// Read a raster or CSV field, check it against the mesh and store it as a raster.
    Ingest {
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum KleCmd {
    /// Eigenpairs of the truncated expansion.
    Build(Common),
    /// Draw permeability samples.
    Sample {
        /// Number of samples.
        #[arg(long, default_value_t = 1)]
        count: u64,
        /// First stream index.
        #[arg(long, default_value_t = 0)]
        first: u64,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum RunCmd {
    /// Fine solves of the evaluation samples.
    Fine(Common),
    /// Multiscale solves without POD.
    Gmsfem(Common),
    /// Offline enrichment on the mean field.
    Method1(Common),
    /// Offline enrichment driven by training samples.
    Method2(Common),
}

impl Common {
    fn overrides(&self, seed_keys: &[&str]) -> Vec<String> {
        let mut o = self.set.clone();
        if let Some(l) = self.l {
            o.push(format!("pod.l={l}"));
        }
        if let Some(w) = self.workers {
            o.push(format!("solver.workers={w}"));
        }
        if let Some(s) = self.seed {
            for (k, key) in seed_keys.iter().enumerate() {
                o.push(format!("{key}={}", s + k as u64));
            }
        }
        o
    }

    fn config(&self, seed_keys: &[&str]) -> Result<RunConfig> {
        parse_config(self.config.as_deref(), &self.overrides(seed_keys))
    }
}

const RUN_SEEDS: [&str; 2] = ["samples.train_seed", "samples.eval_seed"];

#[derive(Serialize)]
struct FieldMeta {
    schema: &'static str,
    nx: usize,
    ny: usize,
    min: f64,
    max: f64,
    config: RunConfig,
}

#[derive(Serialize)]
struct KleMeta {
    schema: &'static str,
    modes: usize,
    captured_energy: f64,
    eigenvalues: Vec<f64>,
    seed: Option<u64>,
    streams: Option<[u64; 2]>,
    config: RunConfig,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn field_meta(cfg: RunConfig, field: &msrom::assembly::PermeabilityField) -> FieldMeta {
    let v = field.values();
    FieldMeta {
        schema: "msrom-field-meta v1",
        nx: field.nx(),
        ny: field.ny(),
        min: v.iter().copied().fold(f64::INFINITY, f64::min),
        max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        config: cfg,
    }
}

fn store_field(out: &Path, cfg: RunConfig, field: &msrom::assembly::PermeabilityField) -> Result<()> {
    std::fs::create_dir_all(out)?;
    write_field(&out.join("field.bin"), field)?;
    let meta = field_meta(cfg, field);
    println!("field {}x{} written to {} (min {:.3e}, max {:.3e})", meta.nx, meta.ny, out.display(), meta.min, meta.max);
    write_json(&out.join("field.json"), &meta)
}

fn kle_meta(cfg: RunConfig, model: &randfield::KleModel, seed: Option<u64>, streams: Option<[u64; 2]>) -> KleMeta {
    KleMeta {
        schema: "msrom-kle v1",
        modes: model.num_modes(),
        captured_energy: model.captured_energy(),
        eigenvalues: model.eigenvalues.clone(),
        seed,
        streams,
        config: cfg,
    }
}

fn finish_run(common: &Common, cfg: &RunConfig, out: RunOutput) -> Result<()> {
    out.write(&common.out, &cfg.build_mesh()?)?;
    for row in out.stats.iter().filter(|r| r.t == out.stats.iter().map(|s| s.t).fold(f64::MIN, f64::max)) {
        println!("{:>6} t = {:.4}: mean e_a = {:.4e}, mean e_L2 = {:.4e}", row.step, row.t, row.mean_ea, row.mean_el2);
    }
    println!("artifacts written to {}", common.out.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Field(FieldCmd::Synth(c)) => {
            let cfg = c.config(&["field.seed"])?;
            let field = mean_field(&cfg)?;
            store_field(&c.out, cfg, &field)
        }
        Command::Field(FieldCmd::Ingest { input, common }) => {
            let cfg = common.config(&[])?;
            let field = ingest_field(&input, cfg.mesh.nx, cfg.mesh.ny)?;
            store_field(&common.out, cfg, &field)
        }
        Command::Kle(KleCmd::Build(c)) => {
            let cfg = c.config(&[])?;
            let model = build_model(&cfg, &mean_field(&cfg)?)?;
            std::fs::create_dir_all(&c.out)?;
            let modes: Vec<RasterRecord> = (0..model.num_modes())
                .map(|i| RasterRecord { nx: model.nx, ny: model.ny, values: model.modes.column(i).iter().copied().collect() })
                .collect();
            write_raster(std::io::BufWriter::new(std::fs::File::create(c.out.join("kle_modes.bin"))?), &modes)?;
            println!("{} modes, captured energy {:.4}", model.num_modes(), model.captured_energy());
            write_json(&c.out.join("kle.json"), &kle_meta(cfg, &model, None, None))
        }
        Command::Kle(KleCmd::Sample { count, first, common }) => {
            let cfg = common.config(&RUN_SEEDS)?;
            let seed = cfg.samples.train_seed;
            let model = build_model(&cfg, &mean_field(&cfg)?)?;
            std::fs::create_dir_all(&common.out)?;
            let records = (first..first + count)
                .map(|s| {
                    let f = model.sample(seed, s)?;
                    Ok(RasterRecord { nx: f.nx(), ny: f.ny(), values: f.values().to_vec() })
                })
                .collect::<Result<Vec<_>>>()?;
            write_raster(std::io::BufWriter::new(std::fs::File::create(common.out.join("samples.bin"))?), &records)?;
            println!("{count} samples (seed {seed}, streams {first}..{}) written to {}", first + count, common.out.display());
            write_json(&common.out.join("samples.json"), &kle_meta(cfg, &model, Some(seed), Some([first, first + count])))
        }
        Command::Run(cmd) => {
            let (c, run): (Common, fn(&RunConfig) -> Result<RunOutput>) = match cmd {
                RunCmd::Fine(c) => (c, pipeline::run_fine),
                RunCmd::Gmsfem(c) => (c, pipeline::run_gmsfem),
                RunCmd::Method1(c) => (c, pipeline::run_method1),
                RunCmd::Method2(c) => (c, pipeline::run_method2),
            };
            let cfg = c.config(&RUN_SEEDS)?;
            let out = run(&cfg)?;
            finish_run(&c, &cfg, out)
        }
        Command::Report { errors, out } => {
            let stats = match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)?;
                    dir.join("stats.csv")
                }
                None => errors.with_file_name("stats.csv"),
            };
            let rows = pipeline::report(&errors, &stats)?;
            println!("{} rows written to {}", rows.len(), stats.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
