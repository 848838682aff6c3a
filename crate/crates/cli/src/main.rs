use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use meshfuse::body_model::forward;
use meshfuse::fusion::{AggregationKind, FusionDims, FusionWeights};
use meshfuse::io::{read_tensors, write_tensors};
use meshfuse::report::{run_report, Report};
use meshfuse::{ablate, generate_scenario, run, EngineConfig, Mode, Scenario, ScenarioConfig, Suite};

mod selftest;

#[derive(Parser)]
#[command(name = "meshfuse", version, about = "Multi-view body-mesh regression on synthetic calibrated rigs")]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "MESHFUSE_OUT", default_value = "meshfuse-out")]
    out: PathBuf,
    /// Worker threads for scenario batches; 0 lets the pool decide.
    #[arg(long, global = true, env = "MESHFUSE_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Descent,
    Neural,
}

#[derive(clap::Args)]
struct Setup {
    /// Scenario configuration (JSON); unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Engine configuration (JSON); unset keys keep their defaults.
    #[arg(long)]
    engine: Option<PathBuf>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// MP, AP, SOFTMAX_SUM or Transformer+MP.
    #[arg(long, value_parser = parse_kind)]
    aggregation: Option<AggregationKind>,
}

#[derive(Subcommand)]
enum Command {
    /// Write scenario files `scenario_<seed>.json`.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: u64,
        #[command(flatten)]
        setup: Setup,
    },
    /// Run the engine on scenarios and write the report.
    Run {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: u64,
        /// Take config and seed from a generated scenario file instead.
        #[arg(long, conflicts_with_all = ["seed", "count", "config"])]
        scenario: Option<PathBuf>,
        /// Tensor file stem of the neural-mode weights.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Write the mesh of every trace record as OBJ.
        #[arg(long)]
        obj: bool,
        #[command(flatten)]
        setup: Setup,
    },
    /// Run one ablation suite (T3, T4 or T5).
    Ablate {
        #[arg(long)]
        suite: String,
        /// Number of scenarios, seeds `seed..seed + seeds`.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        setup: Setup,
    },
    /// Write randomly initialized neural-mode weights for the default template.
    Weights {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "weights")]
        name: String,
    },
    /// Check the core invariants; exits nonzero on any failure.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_kind(s: &str) -> std::result::Result<AggregationKind, String> {
    s.parse().map_err(|e: meshfuse::Error| e.to_string())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

impl Setup {
    fn configs(&self) -> Result<(ScenarioConfig, EngineConfig)> {
        let mut scenario: ScenarioConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => ScenarioConfig::default(),
        };
        let mut engine: EngineConfig = match &self.engine {
            Some(p) => read_json(p)?,
            None => EngineConfig::default(),
        };
        if let Some(n) = self.views {
            scenario.n_views = n;
            engine.n_views = n;
        }
        if let Some(m) = self.mode {
            engine.mode = match m {
                ModeArg::Descent => Mode::Descent,
                ModeArg::Neural => Mode::Neural,
            };
        }
        if let Some(k) = self.aggregation {
            engine.aggregation = k;
        }
        engine.validate()?;
        Ok((scenario, engine))
    }
}

fn dims_path(stem: &Path) -> PathBuf {
    PathBuf::from(format!("{}-dims.json", stem.display()))
}

fn template_dims(scenario: &ScenarioConfig) -> Result<FusionDims> {
    let tpl = meshfuse::body_model::make_template::<f64>(&scenario.template)?;
    Ok(FusionDims { n_down: tpl.n_down(), n_pose: tpl.n_joints() - 1, n_shape: tpl.n_shape(), ..Default::default() })
}

fn load_weights(stem: &Path) -> Result<FusionWeights<f64>> {
    let dims: FusionDims = read_json(&dims_path(stem))?;
    let (tensors, _) = read_tensors(stem).with_context(|| format!("reading weights {}", stem.display()))?;
    Ok(FusionWeights::from_tensors(&dims, &tensors)?)
}

fn write(out: &Path, name: &str, text: &str) -> Result<()> {
    let path = out.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_report(out: &Path, prefix: &str, report: &Report) -> Result<()> {
    write(out, &format!("{prefix}.json"), &report.to_json()?)?;
    write(out, &format!("{prefix}_summary.csv"), &report.summary_csv())?;
    write(out, &format!("{prefix}_scenarios.csv"), &report.scenarios_csv())?;
    print!("{}", report.summary_csv());
    Ok(())
}

fn write_objs(out: &Path, scenario: &Scenario, engine: &EngineConfig, weights: Option<&FusionWeights<f64>>) -> Result<()> {
    let tpl = scenario.template::<f64>()?;
    let output = run(scenario, engine, weights)?;
    for (k, record) in output.trace.records.iter().enumerate() {
        let (vertices, _) = forward(&tpl, &record.state)?;
        write(out, &format!("mesh_{}_{k}.obj", scenario.seed), &meshfuse::body_model::to_obj(&vertices, &tpl))?;
    }
    let (gt, _) = forward(&tpl, &scenario.gt)?;
    write(out, &format!("mesh_{}_gt.obj", scenario.seed), &meshfuse::body_model::to_obj(&gt, &tpl))
}

fn execute(cli: Cli) -> Result<ExitCode> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global()?;
    }
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Generate { seed, count, setup } => {
            let (config, _) = setup.configs()?;
            for s in seed..seed + count {
                write(out, &format!("scenario_{s}.json"), &generate_scenario(&config, s)?.to_json()?)?;
            }
        }
        Command::Run { seed, count, scenario, weights, obj, setup } => {
            let (mut config, engine) = setup.configs()?;
            let mut seeds: Vec<u64> = (seed..seed + count).collect();
            if let Some(path) = scenario {
                let file = Scenario::from_json(&fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?)?;
                if generate_scenario(&file.config, file.seed)? != file {
                    bail!("{} differs from the scenario its config and seed generate; regenerate it", path.display());
                }
                config = file.config;
                if let Some(n) = setup.views {
                    if n != config.n_views {
                        bail!("--views {n} does not match the scenario's {} views", config.n_views);
                    }
                }
                seeds = vec![file.seed];
            }
            if engine.n_views != config.n_views {
                bail!("engine expects {} views, scenario has {}", engine.n_views, config.n_views);
            }
            let weights = match (&weights, engine.mode) {
                (Some(stem), _) => Some(load_weights(stem)?),
                (None, Mode::Neural) => bail!("neural mode needs --weights"),
                (None, Mode::Descent) => None,
            };
            let report = run_report(&config, &engine, &seeds, weights.as_ref())?;
            write_report(out, "run", &report)?;
            if obj {
                for &s in &seeds {
                    write_objs(out, &generate_scenario(&config, s)?, &engine, weights.as_ref())?;
                }
            }
        }
        Command::Ablate { suite, seeds, seed, setup } => {
            let suite: Suite = suite.parse()?;
            let (config, engine) = setup.configs()?;
            let seeds: Vec<u64> = (seed..seed + seeds).collect();
            let report = ablate(suite, &config, &engine, &seeds)?;
            write_report(out, &format!("ablate_{}", suite.id()), &report)?;
        }
        Command::Weights { seed, name } => {
            let dims = template_dims(&ScenarioConfig::default())?;
            let w = FusionWeights::<f64>::init(&dims, seed)?;
            let stem = out.join(name);
            write_tensors(&stem, &w.to_tensors())?;
            fs::write(dims_path(&stem), serde_json::to_string_pretty(&dims)?)?;
            println!("{}", stem.display());
        }
        Command::Selftest { seed } => {
            let failures = selftest::run(seed, out)?;
            if failures > 0 {
                eprintln!("{failures} check(s) failed");
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
