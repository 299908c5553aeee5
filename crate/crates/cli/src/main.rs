//! `dualmem`: data generation, training stages, bank construction and
//! evaluation over one output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dualmem::binio::sha256_hex;
use dualmem::eval::{default_grid, evaluate, sweep, write_trace, PolicyStack, RolloutConfig, StrategyRegistry, Summary};
use dualmem::flow::FlowPolicy;
use dualmem::gpm::{MemoryBank, PriorHead};
use dualmem::lcm::LocalConsistency;
use dualmem::taskgen::{build_dataset, Dataset, FamilyRegistry, Split};
use dualmem::train::{build_memory_bank, stage1_train, stage2_train, stage3_train, stage_seed, PipelineConfig};
use dualmem::{Error, Result};

const DATA_DIR: &str = "data";
const POLICY: &str = "policy.ckpt";
const HEAD: &str = "prior_head.ckpt";
const BANK: &str = "bank.bin";
const LCM: &str = "lcm.ckpt";

#[derive(Parser)]
#[command(name = "dualmem", version, about = "Retrieval-primed flow-matching policies on synthetic 2-D tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; absent keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value = "runs/default")]
    out_dir: PathBuf,
}

#[derive(Args, Clone)]
struct EvalArgs {
    /// Initialization mode: gaussian-init, gpm-init or gpm+lcm.
    #[arg(long, default_value = "gpm+lcm")]
    mode: String,
    /// Fixed step count; omitted means the mode's own rule.
    #[arg(long)]
    nfe: Option<usize>,
    #[arg(long, value_enum, default_value_t = SplitArg::Seen)]
    split: SplitArg,
    #[arg(long)]
    episodes: Option<usize>,
    /// Write per-episode schedule traces as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SweepArgs {
    #[arg(long, value_enum, default_value_t = SplitArg::Seen)]
    split: SplitArg,
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Seen,
    Unseen,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Seen => Split::Seen,
            SplitArg::Unseen => Split::Unseen,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the task suite and expert demonstrations.
    GenData(#[command(flatten)] Common),
    /// Stage 1: flow-matching policy.
    TrainPolicy(#[command(flatten)] Common),
    /// Stage 2: contrastive prior head.
    TrainPriorHead(#[command(flatten)] Common),
    /// Embed every training demo into the memory bank.
    BuildMemory(#[command(flatten)] Common),
    /// Stage 3: local consistency model.
    TrainLcm(#[command(flatten)] Common),
    /// Roll out one mode on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: EvalArgs,
    },
    /// Every mode at every configured step count.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: SweepArgs,
    },
    /// Summarize a memory bank file.
    InspectBank {
        #[command(flatten)]
        common: Common,
        /// Bank file; defaults to the one in --out-dir.
        bank: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    seed: u64,
    config: PipelineConfig,
    /// Path → SHA-256 of every file read.
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    /// Headline numbers of the run.
    results: serde_json::Map<String, serde_json::Value>,
    /// Seconds since the Unix epoch.
    timestamp: u64,
}

struct Run {
    command: &'static str,
    common: Common,
    config: PipelineConfig,
    registry: FamilyRegistry,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    results: serde_json::Map<String, serde_json::Value>,
}

impl Run {
    fn new(command: &'static str, common: Common) -> Result<Self> {
        let config = match &common.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        std::fs::create_dir_all(&common.out_dir)?;
        Ok(Self {
            command,
            common,
            config,
            registry: FamilyRegistry::default(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            results: serde_json::Map::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.common.out_dir.join(name)
    }

    /// Path of a prerequisite; records its hash as an input.
    fn input(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.path(name);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let files = if path.is_dir() {
            let mut v: Vec<PathBuf> = std::fs::read_dir(&path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
            v.sort();
            v
        } else {
            vec![path.clone()]
        };
        for f in files {
            self.inputs.insert(f.display().to_string(), sha256_hex(&std::fs::read(&f)?));
        }
        Ok(path)
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    fn result(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.results.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    fn dataset(&mut self) -> Result<Dataset> {
        let dir = self.input(DATA_DIR)?;
        Dataset::load(&dir, &self.registry)
    }

    fn head(&mut self, data: &Dataset) -> Result<PriorHead> {
        PriorHead::load(&self.input(HEAD)?, Some(&data.suite_fingerprint))
    }

    fn bank(&mut self) -> Result<MemoryBank> {
        MemoryBank::load(&self.input(BANK)?)
    }

    fn finish(self) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.into(),
            seed: self.common.seed,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            results: self.results,
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        let path = self.common.out_dir.join(format!("manifest-{}.json", self.command));
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
        log::info!("wrote {}", path.display());
        Ok(())
    }
}

fn gen_data(mut run: Run) -> Result<Run> {
    let data = build_dataset(&run.registry, &run.config.data, stage_seed(run.common.seed, "data"))?;
    let dir = run.path(DATA_DIR);
    data.save(&dir)?;
    run.result("dataset_fingerprint", data.fingerprint())?;
    println!("dataset: {} tasks, {} demos, fingerprint {}", data.tasks.len(), data.demos.len(), data.fingerprint());
    run.output(&dir);
    Ok(run)
}

fn train_policy(mut run: Run) -> Result<Run> {
    let data = run.dataset()?;
    let out = stage1_train(&data, &run.registry, &run.config.stage1, stage_seed(run.common.seed, "stage1"))?;
    let (ckpt, log) = (run.path(POLICY), run.path("stage1_log.csv"));
    out.policy.save(&ckpt)?;
    out.log.write_csv(&log)?;
    println!("stage 1: final smoothed loss {:.5}", out.log.final_smoothed().unwrap_or(f64::NAN));
    run.output(&ckpt);
    run.output(&log);
    Ok(run)
}

fn train_prior_head(mut run: Run) -> Result<Run> {
    let data = run.dataset()?;
    let out = stage2_train(&data, &run.registry, &run.config.stage2, stage_seed(run.common.seed, "stage2"))?;
    let (ckpt, log) = (run.path(HEAD), run.path("stage2_log.csv"));
    out.head.save(&ckpt)?;
    out.log.write_csv(&log)?;
    run.result("margin", out.margin.margin)?;
    println!(
        "stage 2: held-out margin {:.3} (intra {:.3}, inter {:.3})",
        out.margin.margin, out.margin.intra, out.margin.inter
    );
    run.output(&ckpt);
    run.output(&log);
    Ok(run)
}

fn build_memory(mut run: Run) -> Result<Run> {
    let data = run.dataset()?;
    let head = run.head(&data)?;
    let bank = build_memory_bank(&data, &run.registry, &head)?;
    let path = run.path(BANK);
    bank.save(&path)?;
    println!("bank: {} entries", bank.len());
    run.result("entries", bank.len())?;
    run.output(&path);
    Ok(run)
}

fn train_lcm(mut run: Run) -> Result<Run> {
    let data = run.dataset()?;
    let head = run.head(&data)?;
    let bank = run.bank()?;
    let out = stage3_train(
        &data,
        &run.registry,
        &bank,
        &head,
        run.config.gpm,
        run.config.lcm,
        &run.config.stage3,
        stage_seed(run.common.seed, "stage3"),
    )?;
    let (ckpt, log) = (run.path(LCM), run.path("stage3_log.csv"));
    out.lcm.save(&ckpt)?;
    out.log.write_csv(&log)?;
    println!("stage 3: final smoothed loss {:.5}", out.log.final_smoothed().unwrap_or(f64::NAN));
    run.output(&ckpt);
    run.output(&log);
    Ok(run)
}

/// Loaded models; the memory and consistency parts only when asked for.
struct Models {
    policy: FlowPolicy,
    memory: Option<(PriorHead, MemoryBank)>,
    lcm: Option<LocalConsistency>,
}

impl Models {
    fn load(run: &mut Run, data: &Dataset, memory: bool, lcm: bool) -> Result<Self> {
        let suite = Some(data.suite_fingerprint.as_str());
        let policy = FlowPolicy::load(&run.input(POLICY)?, suite)?;
        let memory = if memory { Some((run.head(data)?, run.bank()?)) } else { None };
        let lcm = if lcm { Some(LocalConsistency::load(&run.input(LCM)?, suite)?) } else { None };
        Ok(Self { policy, memory, lcm })
    }

    fn stack(&self, config: &PipelineConfig) -> PolicyStack<'_> {
        PolicyStack {
            generator: &self.policy,
            memory: self.memory.as_ref().map(|(h, b)| (h, b)),
            lcm: self.lcm.as_ref(),
            gpm: config.gpm,
        }
    }
}

fn eval(mut run: Run, args: EvalArgs) -> Result<Run> {
    if let Some(n) = args.episodes {
        run.config.eval.episodes = n;
    }
    run.config.validate()?;
    let strategies = StrategyRegistry::default();
    let strategy = strategies.get(&args.mode)?;
    let data = run.dataset()?;
    let models = Models::load(&mut run, &data, strategy.needs_memory(), strategy.needs_lcm())?;
    let rollout = RolloutConfig {
        mode: args.mode.clone(),
        nfe: args.nfe,
        episodes: run.config.eval.episodes,
        seed: stage_seed(run.common.seed, "eval"),
        split: args.split.into(),
    };
    let results = evaluate(
        &run.registry,
        &data,
        models.stack(&run.config),
        &strategies,
        &rollout,
        run.config.eval.success_threshold,
    )?;
    let summary = Summary::of(&results)?;
    run.result("summary", &summary)?;
    let path = run.path(&format!("eval-{}.json", args.mode));
    std::fs::write(&path, serde_json::to_vec_pretty(&serde_json::json!({ "rollout": rollout, "summary": summary }))?)?;
    run.output(&path);
    if let Some(trace) = &args.trace {
        write_trace(trace, &results)?;
        run.output(trace);
    }
    println!(
        "{}: median error {:.4}, success {:.3}, mean NFE per episode {:.2}, median discontinuity {}",
        args.mode,
        summary.median_error,
        summary.success_rate,
        summary.mean_nfe,
        summary.median_discontinuity.map(|d| format!("{d:.5}")).unwrap_or_else(|| "-".into())
    );
    Ok(run)
}

fn run_sweep(mut run: Run, args: SweepArgs) -> Result<Run> {
    if let Some(n) = args.episodes {
        run.config.eval.episodes = n;
    }
    run.config.validate()?;
    let data = run.dataset()?;
    let models = Models::load(&mut run, &data, true, true)?;
    let strategies = StrategyRegistry::default();
    let grid = default_grid(&strategies, &run.config.eval.sweep_nfe);
    let report = sweep(
        &run.registry,
        &data,
        models.stack(&run.config),
        &strategies,
        &grid,
        args.split.into(),
        run.config.eval.episodes,
        stage_seed(run.common.seed, "eval"),
        run.config.eval.success_threshold,
    )?;
    let (csv, timing) = (run.path("sweep.csv"), run.path("sweep_timing.csv"));
    std::fs::write(&csv, report.to_csv()?)?;
    std::fs::write(&timing, report.timing_csv()?)?;
    run.output(&csv);
    run.output(&timing);
    for row in &report.rows {
        println!(
            "{:>14} @ {:>8}: median error {:.4}, success {:.3}, mean NFE {:.2}",
            row.cell.mode,
            row.cell.nfe.map(|n| n.to_string()).unwrap_or_else(|| "adaptive".into()),
            row.summary.median_error,
            row.summary.success_rate,
            row.summary.mean_nfe
        );
    }
    Ok(run)
}

fn inspect_bank(mut run: Run, file: Option<PathBuf>) -> Result<Run> {
    let path = match file {
        Some(p) if p.exists() => p,
        Some(p) => return Err(Error::MissingArtifact(p)),
        None => run.input(BANK)?,
    };
    run.inputs.insert(path.display().to_string(), sha256_hex(&std::fs::read(&path)?));
    let bank = MemoryBank::load(&path)?;
    let mut per_task: BTreeMap<&str, usize> = BTreeMap::new();
    for e in bank.entries() {
        *per_task.entry(&e.task_id).or_default() += 1;
    }
    let bad_keys = bank
        .entries()
        .iter()
        .filter(|e| (e.key.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() > 1e-9)
        .count();
    println!("entries: {}", bank.len());
    println!("embedding dim: {}", bank.embed_dim());
    println!("window: {}, stride: {}", bank.window(), bank.stride());
    println!("tasks: {}", per_task.len());
    for (task, n) in &per_task {
        println!("  {task}: {n}");
    }
    println!("key norms: {}", if bad_keys == 0 { "all unit".to_string() } else { format!("{bad_keys} off unit") });
    run.result("entries", bank.len())?;
    run.result("bad_keys", bad_keys)?;
    if let Some(recorded) = built_entries(&run.path("manifest-build-memory.json"), &path) {
        println!("build manifest entries: {recorded} ({})", if recorded == bank.len() { "match" } else { "MISMATCH" });
        if recorded != bank.len() {
            return Err(Error::Corrupt {
                what: "memory bank".into(),
                reason: format!("{} entries, build manifest recorded {recorded}", bank.len()),
            });
        }
    }
    if bad_keys > 0 {
        return Err(Error::Corrupt {
            what: "memory bank".into(),
            reason: format!("{bad_keys} keys are not unit norm"),
        });
    }
    Ok(run)
}

/// Entry count recorded by the build run that wrote `bank`, if any.
fn built_entries(manifest: &Path, bank: &Path) -> Option<usize> {
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(manifest).ok()?).ok()?;
    let wrote = m["outputs"].as_array()?.iter().any(|o| o.as_str().is_some_and(|o| Path::new(o) == bank));
    if !wrote {
        return None;
    }
    m["results"]["entries"].as_u64().map(|n| n as usize)
}

fn dispatch(command: Command) -> Result<()> {
    let run = match command {
        Command::GenData(c) => gen_data(Run::new("gen-data", c)?)?,
        Command::TrainPolicy(c) => train_policy(Run::new("train-policy", c)?)?,
        Command::TrainPriorHead(c) => train_prior_head(Run::new("train-prior-head", c)?)?,
        Command::BuildMemory(c) => build_memory(Run::new("build-memory", c)?)?,
        Command::TrainLcm(c) => train_lcm(Run::new("train-lcm", c)?)?,
        Command::Eval { common, args } => eval(Run::new("eval", common)?, args)?,
        Command::Sweep { common, args } => run_sweep(Run::new("sweep", common)?, args)?,
        Command::InspectBank { common, bank } => inspect_bank(Run::new("inspect-bank", common)?, bank)?,
    };
    run.finish()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
