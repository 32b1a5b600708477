//! The `cdl` command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::codec::{self, CompressedModel};
use crate::data::{self, ClusterSpec, Dataset};
use crate::error::{Error, Result};
use crate::gradcheck::{self, Suite};
use crate::net::{checkpoint, Mode};
use crate::parsim::{Cadence, DataParallelSim, ParallelMode, ParallelPlan, PayloadPolicy, PipelineSim, Topology};
use crate::train::{self, metrics, Arch, Observer, PenaltyScale, SweepRow, TrainConfig, TrainState};

/// Schema of every JSON file written by `export-metrics`.
pub const EXPORT_SCHEMA_VERSION: &str = "1.0";

#[derive(Parser, Debug)]
#[command(name = "cdl", version, about = "Trainable probabilistic quantization with entropy-coded weights and activations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model and write model.ckpt, metrics.csv and metrics.json.
    Train(TrainCmd),
    /// Train over a λ/γ/mode grid; writes one run directory per point plus sweep.csv and frontier.csv.
    Sweep(SweepCmd),
    /// Test accuracy and entropy report of a checkpoint.
    Eval(EvalCmd),
    /// Huffman-code a checkpoint's sampled weights.
    Compress(CompressCmd),
    /// Decode a compressed model and check it re-encodes bit-exactly.
    Verify(VerifyCmd),
    /// Finite-difference checks of every analytic derivative.
    Gradcheck(GradcheckCmd),
    /// Train while accounting simulated parallel communication.
    Parsim(ParsimCmd),
    /// Plot-ready tables from one or more run directories.
    ExportMetrics(ExportCmd),
}

fn non_negative(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("must be a finite value ≥ 0, got {v}"))
    }
}

/// Comma-separated flag value.
#[derive(Clone, Debug)]
pub struct List<T>(pub Vec<T>);

impl<T: std::str::FromStr> std::str::FromStr for List<T>
where
    T::Err: std::fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|x| x.trim().parse::<T>().map_err(|e| format!("'{x}': {e}")))
            .collect::<std::result::Result<_, _>>()
            .map(List)
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Directory holding the four MNIST IDX files (.gz accepted). Falls back
    /// to $CDL_DATA_DIR, then to the bundled 5k subset.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Use the synthetic Gaussian-clusters dataset instead of MNIST.
    #[arg(long)]
    pub synthetic: bool,
}

impl DataArgs {
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        if self.synthetic {
            return data::gaussian_clusters(&ClusterSpec {
                seed,
                ..Default::default()
            });
        }
        let dir = self
            .data_dir
            .clone()
            .or_else(|| std::env::var_os(data::DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(data::bundled_mnist_dir);
        info!("loading MNIST from {}", dir.display());
        data::load_mnist_dir(&dir)
    }
}

/// One flag per `TrainConfig` field; flags override `--config`.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML file with `TrainConfig` keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long, value_parser = non_negative)]
    pub lambda: Option<f64>,
    #[arg(long, value_parser = non_negative)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub bits: Option<u8>,
    /// per_symbol or total.
    #[arg(long)]
    pub penalty_scale: Option<PenaltyScale>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_w: Option<f64>,
    #[arg(long)]
    pub lr_q: Option<f64>,
    #[arg(long)]
    pub lr_s: Option<f64>,
    #[arg(long)]
    pub lr_alpha: Option<f64>,
    #[arg(long)]
    pub lr_beta: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Comma-separated fractions of the epoch budget.
    #[arg(long)]
    pub lr_milestones: Option<List<f64>>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub exempt_first_last: Option<bool>,
    #[arg(long)]
    pub arch: Option<ArchArg>,
    /// Comma-separated hidden widths.
    #[arg(long)]
    pub mlp_hidden: Option<List<usize>>,
    #[arg(long)]
    pub act_topk: Option<usize>,
    #[arg(long)]
    pub alpha_init: Option<f64>,
    #[arg(long)]
    pub beta_init: Option<f64>,
    #[arg(long)]
    pub probe_size: Option<usize>,
    #[arg(long)]
    pub act_batch_index: Option<usize>,
    #[arg(long)]
    pub measure_huffman: Option<bool>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ArchArg {
    Cnn,
    Mlp,
}

impl ConfigArgs {
    pub fn resolve(&self, synthetic: bool) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::from_file(p)?,
            None => TrainConfig::default(),
        };
        macro_rules! take {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f.clone() {
                    c.$f = v;
                }
            )*};
        }
        take!(
            mode, lambda, gamma, penalty_scale, bits, epochs, batch_size, lr_w, lr_q, lr_s, lr_alpha, lr_beta, momentum,
            weight_decay, lr_decay, seed, exempt_first_last, act_topk, alpha_init, beta_init, probe_size,
            act_batch_index, measure_huffman
        );
        if let Some(List(v)) = &self.lr_milestones {
            c.lr_milestones = v.clone();
        }
        if let Some(List(v)) = &self.mlp_hidden {
            c.mlp_hidden = v.clone();
        }
        match self.arch {
            Some(ArchArg::Cnn) => c.arch = Arch::Cnn,
            Some(ArchArg::Mlp) => c.arch = Arch::Mlp,
            None if synthetic => c.arch = Arch::Mlp,
            None => {}
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
pub struct TrainCmd {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepCmd {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "0,0.05")]
    pub lambdas: List<f64>,
    #[arg(long, default_value = "0,0.05")]
    pub gammas: List<f64>,
    #[arg(long, default_value = "rcdl")]
    pub modes: List<Mode>,
    #[arg(long)]
    pub seeds: Option<List<u64>>,
    #[arg(long, default_value = "sweep")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalCmd {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "rcdl")]
    pub mode: Mode,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct CompressCmd {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "model.cdlz")]
    pub out: PathBuf,
    /// Seed of the Q_p sampling stream.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct VerifyCmd {
    pub file: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckCmd {
    /// Comma-separated subset of quant, entropy, rcdl, prop1.
    #[arg(long)]
    pub suites: Option<List<Suite>>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Random instances for the quant and prop1 suites.
    #[arg(long, default_value_t = 1000)]
    pub instances: usize,
    /// Hidden width of the rcdl suite network.
    #[arg(long, default_value_t = 10)]
    pub hidden: usize,
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ParallelArg {
    Data,
    Pipeline,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TopologyArg {
    ParameterServer,
    AllReduce,
}

#[derive(Args, Debug)]
pub struct ParsimCmd {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "data")]
    pub parallel: ParallelArg,
    /// Workers (data) or stages (pipeline).
    #[arg(long, default_value_t = 2)]
    pub workers: usize,
    /// `epoch` or a step count.
    #[arg(long, default_value = "epoch")]
    pub cadence: String,
    #[arg(long, default_value = "huffman_coded")]
    pub policy: PayloadPolicy,
    #[arg(long, value_enum, default_value = "parameter-server")]
    pub topology: TopologyArg,
    /// Comma-separated layer indices at which pipeline stages split.
    #[arg(long)]
    pub cuts: Option<List<usize>>,
    #[arg(long, default_value = "parsim")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportCmd {
    /// Run directories written by `train`, `sweep` or `parsim`.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, default_value = "export")]
    pub out: PathBuf,
}

/// Outcome of a command that completed without an error.
pub enum Verdict {
    Pass,
    Fail,
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Verdict::Pass) => ExitCode::SUCCESS,
        Ok(Verdict::Fail) => ExitCode::from(1),
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

pub fn run(cli: Cli) -> Result<Verdict> {
    match cli.command {
        Command::Train(c) => cmd_train(&c),
        Command::Sweep(c) => cmd_sweep(&c),
        Command::Eval(c) => cmd_eval(&c),
        Command::Compress(c) => cmd_compress(&c),
        Command::Verify(c) => cmd_verify(&c),
        Command::Gradcheck(c) => cmd_gradcheck(&c),
        Command::Parsim(c) => cmd_parsim(&c),
        Command::ExportMetrics(c) => cmd_export(&c),
    }
}

/// Trains to completion; on a non-finite abort the last good checkpoint is
/// written to `model.abort.ckpt` before the error is returned.
fn train_into(cfg: TrainConfig, train: &Dataset, test: &Dataset, out: &Path, obs: &mut dyn Observer) -> Result<TrainState> {
    let mut state = TrainState::new(cfg, train)?;
    for w in &state.warnings {
        warn!("{w}");
    }
    if let Err(e) = state.run(train, test, obs) {
        if let Some(bytes) = &state.abort_snapshot {
            std::fs::create_dir_all(out)?;
            crate::util::write_atomic(&out.join("model.abort.ckpt"), bytes)?;
        }
        return Err(e);
    }
    state.write_outputs(out)?;
    Ok(state)
}

fn cmd_train(c: &TrainCmd) -> Result<Verdict> {
    let cfg = c.cfg.resolve(c.data.synthetic)?;
    let (train, test) = c.data.load(cfg.seed)?;
    let state = train_into(cfg, &train, &test, &c.out, &mut ())?;
    let last = state.history.last().expect("epochs ≥ 1");
    println!("{}", serde_json::to_string(last)?);
    Ok(Verdict::Pass)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    crate::util::write_atomic(path, &bytes)
}

/// Bits per weight used to rank runs; unquantized runs count as fp64.
fn frontier_bits(r: &SweepRow) -> Option<f64> {
    Some(r.avg_bits_per_weight.unwrap_or(64.0))
}

fn cmd_sweep(c: &SweepCmd) -> Result<Verdict> {
    let base = c.cfg.resolve(c.data.synthetic)?;
    let seeds = c.seeds.clone().map_or_else(|| vec![base.seed], |l| l.0);
    let (train, test) = c.data.load(base.seed)?;
    let mut rows = Vec::new();
    for &mode in &c.modes.0 {
        for &lambda in &c.lambdas.0 {
            for &gamma in &c.gammas.0 {
                for &seed in &seeds {
                    let cfg = TrainConfig {
                        mode,
                        lambda,
                        gamma,
                        seed,
                        ..base.clone()
                    };
                    if let Err(e) = cfg.validate() {
                        warn!("skipping {mode} λ={lambda} γ={gamma}: {e}");
                        continue;
                    }
                    let dir = c.out.join(format!("{mode}_l{lambda}_g{gamma}_s{seed}"));
                    info!("sweep point {}", dir.display());
                    let state = train_into(cfg.clone(), &train, &test, &dir, &mut ())?;
                    rows.push(SweepRow::from_run(&cfg, state.history.last().expect("epochs ≥ 1")));
                }
            }
        }
    }
    write_rows(&c.out.join("sweep.csv"), &rows)?;
    write_rows(&c.out.join("frontier.csv"), &train::frontier(&rows, frontier_bits))?;
    Ok(Verdict::Pass)
}

#[derive(Serialize)]
struct EvalReport {
    schema_version: &'static str,
    mode: Mode,
    test_acc: f64,
    entropy: Option<crate::entropy::EntropyReport>,
}

fn cmd_eval(c: &EvalCmd) -> Result<Verdict> {
    let model = checkpoint::load(&c.checkpoint)?;
    let (_, test) = c.data.load(c.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let test_acc = train::accuracy(&model, c.mode, &test, &mut rng)?;
    let entropy = if c.mode == Mode::Fp {
        None
    } else {
        let mut stats = model.activation_stats();
        train::probe_objective(&model, Mode::Rcdl, &test, 0.0, 0.0, Some(&mut stats))?;
        Some(model.entropy_report(&stats)?)
    };
    let report = EvalReport {
        schema_version: EXPORT_SCHEMA_VERSION,
        mode: c.mode,
        test_acc,
        entropy,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(Verdict::Pass)
}

fn print_bits(label: &str, m: &codec::BitsSummary) {
    println!(
        "{label}: symbols={} avg_bits_per_weight={:.6} avg_bits_per_weight_with_overhead={:.6}",
        m.symbols, m.avg_bits, m.avg_bits_with_overhead
    );
}

fn cmd_compress(c: &CompressCmd) -> Result<Verdict> {
    let model = checkpoint::load(&c.checkpoint)?;
    let bits = (0..model.num_stages())
        .map(|l| model.quant(l).map(|q| q.weight_bits))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .max()
        .ok_or(Error::Empty("weighted layers"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let cm = codec::compress_model(&model, bits, &mut rng)?;
    cm.save(&c.out)?;
    print_bits("compress", &cm.metrics());
    Ok(Verdict::Pass)
}

fn cmd_verify(c: &VerifyCmd) -> Result<Verdict> {
    let bytes = std::fs::read(&c.file)?;
    let cm = CompressedModel::from_bytes(&bytes)?;
    print_bits("verify", &cm.metrics());
    if cm.to_bytes() != bytes {
        eprintln!("re-encoding differs from {}", c.file.display());
        return Ok(Verdict::Fail);
    }
    println!("verify: OK");
    Ok(Verdict::Pass)
}

fn cmd_gradcheck(c: &GradcheckCmd) -> Result<Verdict> {
    let opts = gradcheck::Options {
        seed: c.seed,
        instances: c.instances,
        hidden: c.hidden,
        corrupt: c.corrupt,
        ..Default::default()
    };
    let suites = c.suites.clone().map_or_else(|| Suite::ALL.to_vec(), |l| l.0);
    let mut ok = true;
    for s in suites {
        for line in gradcheck::run(s, &opts)? {
            println!("{line}");
            ok &= line.passed();
        }
    }
    Ok(if ok { Verdict::Pass } else { Verdict::Fail })
}

fn parse_cadence(s: &str) -> Result<Cadence> {
    if s == "epoch" {
        return Ok(Cadence::Epoch);
    }
    s.parse::<u64>()
        .map(Cadence::Steps)
        .map_err(|_| Error::Config(format!("cadence must be 'epoch' or a step count, got '{s}'")))
}

fn cmd_parsim(c: &ParsimCmd) -> Result<Verdict> {
    let cfg = c.cfg.resolve(c.data.synthetic)?;
    let plan = ParallelPlan {
        mode: match c.parallel {
            ParallelArg::Data => ParallelMode::DataParallel,
            ParallelArg::Pipeline => ParallelMode::PipelineModelParallel,
        },
        workers: c.workers,
        cadence: parse_cadence(&c.cadence)?,
        policy: c.policy,
        topology: match c.topology {
            TopologyArg::ParameterServer => Topology::ParameterServer,
            TopologyArg::AllReduce => Topology::AllReduce,
        },
        bits: cfg.bits,
        cuts: c.cuts.clone().map(|l| l.0).unwrap_or_default(),
        seed: cfg.seed,
    };
    plan.validate()?;
    let (train, test) = c.data.load(cfg.seed)?;
    let ledger = match plan.mode {
        ParallelMode::DataParallel => {
            let mut sim = DataParallelSim::new(plan.clone())?;
            train_into(cfg, &train, &test, &c.out, &mut sim)?;
            sim.ledger
        }
        ParallelMode::PipelineModelParallel => {
            // Boundaries depend only on the architecture.
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let probe = train::build_model(&cfg, &train, &mut rng)?;
            let mut sim = PipelineSim::new(plan.clone(), &probe)?;
            train_into(cfg, &train, &test, &c.out, &mut sim)?;
            sim.ledger
        }
    };
    ledger.check_conservation()?;
    ledger.write_csv(&c.out.join("comm_events.csv"))?;
    ledger.write_json(&plan, &c.out.join("comm_summary.json"))?;
    for (e, t) in ledger.epoch_totals.iter().enumerate() {
        println!("epoch {} bytes {t}", e + 1);
    }
    println!("total bytes {}", ledger.total());
    Ok(Verdict::Pass)
}

#[derive(Serialize)]
struct BitsRow<'a> {
    run: &'a str,
    epoch: usize,
    #[serde(rename = "H_w_bits_per_weight")]
    h_w: Option<f64>,
    #[serde(rename = "H_x_bits_per_activation")]
    h_x: Option<f64>,
    huffman_w_bits: Option<f64>,
    huffman_x_bits: Option<f64>,
    huffman_w_bits_with_overhead: Option<f64>,
    huffman_w_bytes: Option<f64>,
}

#[derive(Serialize)]
struct ObjectiveRow<'a> {
    run: &'a str,
    epoch: usize,
    objective: f64,
    train_loss: f64,
    test_acc: f64,
}

#[derive(Serialize)]
struct HistRow<'a> {
    run: &'a str,
    epoch: usize,
    layer: usize,
    bin: usize,
    lo: f64,
    hi: f64,
    count: u64,
}

#[derive(Serialize)]
struct FrontierRow {
    run: String,
    mode: Mode,
    lambda: f64,
    gamma: f64,
    bits: u8,
    seed: u64,
    test_acc: f64,
    avg_bits_per_weight: Option<f64>,
    avg_bits_per_activation: Option<f64>,
    avg_bits_per_weight_with_overhead: Option<f64>,
}

impl FrontierRow {
    fn new(run: String, r: SweepRow) -> Self {
        Self {
            run,
            mode: r.mode,
            lambda: r.lambda,
            gamma: r.gamma,
            bits: r.bits,
            seed: r.seed,
            test_acc: r.test_acc,
            avg_bits_per_weight: r.avg_bits_per_weight,
            avg_bits_per_activation: r.avg_bits_per_activation,
            avg_bits_per_weight_with_overhead: r.avg_bits_per_weight_with_overhead,
        }
    }
}

#[derive(Serialize)]
struct ExportIndex {
    schema_version: &'static str,
    runs: Vec<String>,
    files: Vec<&'static str>,
}

const RUN_FILES: [&str; 3] = ["metrics.json", "metrics.csv", "model.ckpt"];

fn cmd_export(c: &ExportCmd) -> Result<Verdict> {
    let mut logs = Vec::new();
    for dir in &c.runs {
        let path = dir.join("metrics.json");
        if !path.is_file() {
            return Err(Error::Input(format!(
                "{} is not a run directory; expected {}",
                dir.display(),
                RUN_FILES.join(", ")
            )));
        }
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        logs.push((name, metrics::RunLog::load(&path)?));
    }
    let (mut bits, mut objective, mut hists, mut rows) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (name, log) in &logs {
        for m in &log.epochs {
            bits.push(BitsRow {
                run: name,
                epoch: m.epoch,
                h_w: m.h_w_bits_per_weight,
                h_x: m.h_x_bits_per_activation,
                huffman_w_bits: m.huffman_w_bits,
                huffman_x_bits: m.huffman_x_bits,
                huffman_w_bits_with_overhead: m.huffman_w_bits_with_overhead,
                huffman_w_bytes: m.huffman_w_bytes,
            });
            objective.push(ObjectiveRow {
                run: name,
                epoch: m.epoch,
                objective: m.objective,
                train_loss: m.train_loss,
                test_acc: m.test_acc,
            });
        }
        for h in &log.histograms {
            for (layer, lh) in h.layers.iter().enumerate() {
                let width = (lh.hi - lh.lo) / lh.counts.len() as f64;
                for (bin, &count) in lh.counts.iter().enumerate() {
                    hists.push(HistRow {
                        run: name,
                        epoch: h.epoch,
                        layer,
                        bin,
                        lo: lh.lo + bin as f64 * width,
                        hi: lh.lo + (bin + 1) as f64 * width,
                        count,
                    });
                }
            }
        }
        let last = log
            .epochs
            .last()
            .ok_or_else(|| Error::Input(format!("run {name} has no completed epochs")))?;
        rows.push((name.clone(), SweepRow::from_run(&log.config, last)));
    }
    let plain: Vec<SweepRow> = rows.iter().map(|(_, r)| r.clone()).collect();
    let kept = train::frontier(&plain, frontier_bits);
    let frontier: Vec<FrontierRow> = kept
        .into_iter()
        .map(|row| {
            let run = rows.iter().find(|(_, r)| *r == row).map(|(n, _)| n.clone()).unwrap_or_default();
            FrontierRow::new(run, row)
        })
        .collect();
    std::fs::create_dir_all(&c.out)?;
    write_rows(&c.out.join("frontier.csv"), &frontier)?;
    write_rows(&c.out.join("bits_vs_epoch.csv"), &bits)?;
    write_rows(&c.out.join("objective_vs_epoch.csv"), &objective)?;
    write_rows(&c.out.join("histograms.csv"), &hists)?;
    let index = ExportIndex {
        schema_version: EXPORT_SCHEMA_VERSION,
        runs: logs.iter().map(|(n, _)| n.clone()).collect(),
        files: vec!["frontier.csv", "bits_vs_epoch.csv", "objective_vs_epoch.csv", "histograms.csv"],
    };
    crate::util::write_atomic(&c.out.join("export.json"), &serde_json::to_vec_pretty(&index)?)?;
    println!("exported {} runs, {} frontier rows", logs.len(), frontier.len());
    Ok(Verdict::Pass)
}
