//! Byte accounting for simulated data- and pipeline-parallel training.
//!
//! Nothing is transported. The simulators observe a single training run and
//! record what each link would carry.
//!
//! Data parallelism counts the traffic of one worker link per sync: an upload
//! of the local weights and a download of the averaged weights. Full-precision
//! master weights stay with the optimizer, so a sync never changes training.
//! * Parameter server: both directions carry the full payload, so `raw_fp64`
//!   with `n` weights costs `2·n·8` bytes per sync whatever the worker count.
//! * Ring all-reduce: each direction carries `2·(W−1)/W` of the payload
//!   (reduce-scatter then all-gather), rounded up to whole bytes.
//!
//! Pipeline parallelism counts, per mini-batch and per stage boundary, the
//! forward activations and the backward gradients. Gradients have no coding
//! scheme and travel at the fixed width (or as fp64 under `raw_fp64`).

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::CompressedLayer;
use crate::error::{Error, Result};
use crate::net::{ForwardTrace, LayerKind, Model, Mode};
use crate::quant::Window;
use crate::train::{Observer, StepContext};

pub const SCHEMA_VERSION: &str = "1.0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParallelMode {
    DataParallel,
    PipelineModelParallel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cadence {
    Steps(u64),
    Epoch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadPolicy {
    RawFp64,
    RawFixedBBits,
    HuffmanCoded,
}

impl fmt::Display for PayloadPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PayloadPolicy::RawFp64 => "raw_fp64",
            PayloadPolicy::RawFixedBBits => "raw_fixed_b_bits",
            PayloadPolicy::HuffmanCoded => "huffman_coded",
        })
    }
}

impl std::str::FromStr for PayloadPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw_fp64" => Ok(PayloadPolicy::RawFp64),
            "raw_fixed_b_bits" => Ok(PayloadPolicy::RawFixedBBits),
            "huffman_coded" => Ok(PayloadPolicy::HuffmanCoded),
            _ => Err(Error::Config(format!(
                "unknown payload policy '{s}' (raw_fp64, raw_fixed_b_bits, huffman_coded)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    ParameterServer,
    AllReduce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParallelPlan {
    pub mode: ParallelMode,
    /// Workers (data parallel) or pipeline stages.
    pub workers: usize,
    /// Sync cadence; pipelines communicate on every batch.
    pub cadence: Cadence,
    pub policy: PayloadPolicy,
    pub topology: Topology,
    /// Symbol width for unquantized layers and pipeline gradients.
    pub bits: u8,
    /// Explicit pipeline cuts as indices into the layer list; a cut `i`
    /// splits between layers `i−1` and `i`. Empty splits evenly.
    pub cuts: Vec<usize>,
    /// Seed of the observer's private sampling stream.
    pub seed: u64,
}

impl ParallelPlan {
    pub fn data_parallel(workers: usize, cadence: Cadence, policy: PayloadPolicy, bits: u8) -> Result<Self> {
        let plan = Self {
            mode: ParallelMode::DataParallel,
            workers,
            cadence,
            policy,
            topology: Topology::ParameterServer,
            bits,
            cuts: Vec::new(),
            seed: 0,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn pipeline(stages: usize, policy: PayloadPolicy, bits: u8) -> Result<Self> {
        let plan = Self {
            mode: ParallelMode::PipelineModelParallel,
            workers: stages,
            cadence: Cadence::Steps(1),
            policy,
            topology: Topology::ParameterServer,
            bits,
            cuts: Vec::new(),
            seed: 0,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Data parallelism needs two workers; a single pipeline stage is the
    /// degenerate no-communication case.
    pub fn validate(&self) -> Result<()> {
        let min_workers = match self.mode {
            ParallelMode::DataParallel => 2,
            ParallelMode::PipelineModelParallel => 1,
        };
        if self.workers < min_workers {
            return Err(Error::Config(format!(
                "{:?} needs at least {min_workers} workers, got {}",
                self.mode, self.workers
            )));
        }
        if self.cadence == Cadence::Steps(0) {
            return Err(Error::Config("sync cadence must be at least 1".into()));
        }
        if self.bits == 0 || self.bits > 16 {
            return Err(Error::Config(format!("bits must be in 1..=16, got {}", self.bits)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Upload,
    Download,
    Forward,
    Backward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommEvent {
    /// Zero-based epoch.
    pub epoch: usize,
    pub step: u64,
    pub direction: Direction,
    /// Weighted stage (data parallel) or boundary activation (pipeline).
    pub layer: usize,
    pub bytes: u64,
    pub policy: PayloadPolicy,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    pub events: Vec<CommEvent>,
    /// Indexed by zero-based epoch.
    pub epoch_totals: Vec<u64>,
}

#[derive(Serialize)]
struct CsvEvent<'a> {
    epoch: usize,
    step: u64,
    direction: Direction,
    layer: usize,
    bytes: u64,
    policy: &'a str,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub schema_version: String,
    pub plan: ParallelPlan,
    pub epoch_totals: Vec<u64>,
    pub cumulative: Vec<u64>,
    pub total_bytes: u64,
    pub events: usize,
}

impl CommLedger {
    pub fn record(&mut self, event: CommEvent) {
        if self.epoch_totals.len() <= event.epoch {
            self.epoch_totals.resize(event.epoch + 1, 0);
        }
        self.epoch_totals[event.epoch] += event.bytes;
        self.events.push(event);
    }

    /// Extends the per-epoch totals through `epoch` with zero entries.
    pub fn close_epoch(&mut self, epoch: usize) {
        if self.epoch_totals.len() <= epoch {
            self.epoch_totals.resize(epoch + 1, 0);
        }
    }

    pub fn total(&self) -> u64 {
        self.events.iter().map(|e| e.bytes).sum()
    }

    pub fn cumulative(&self) -> Vec<u64> {
        self.epoch_totals
            .iter()
            .scan(0u64, |acc, &t| {
                *acc += t;
                Some(*acc)
            })
            .collect()
    }

    pub fn bytes_in(&self, epoch: usize, direction: Direction) -> u64 {
        self.events
            .iter()
            .filter(|e| e.epoch == epoch && e.direction == direction)
            .map(|e| e.bytes)
            .sum()
    }

    /// Checks that every epoch total is the sum of its events.
    pub fn check_conservation(&self) -> Result<()> {
        let mut sums = vec![0u64; self.epoch_totals.len()];
        for e in &self.events {
            *sums
                .get_mut(e.epoch)
                .ok_or_else(|| Error::Consistency(format!("event in untracked epoch {}", e.epoch)))? += e.bytes;
        }
        if sums != self.epoch_totals {
            return Err(Error::Consistency(format!(
                "epoch totals {:?} differ from event sums {sums:?}",
                self.epoch_totals
            )));
        }
        Ok(())
    }

    pub fn summary(&self, plan: &ParallelPlan) -> LedgerSummary {
        LedgerSummary {
            schema_version: SCHEMA_VERSION.into(),
            plan: plan.clone(),
            epoch_totals: self.epoch_totals.clone(),
            cumulative: self.cumulative(),
            total_bytes: self.total(),
            events: self.events.len(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.events {
            w.serialize(CsvEvent {
                epoch: e.epoch,
                step: e.step,
                direction: e.direction,
                layer: e.layer,
                bytes: e.bytes,
                policy: &e.policy.to_string(),
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, plan: &ParallelPlan, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.summary(plan))?;
        crate::util::write_atomic(path, text.as_bytes())
    }
}

/// `⌈n·bits/8⌉`.
pub fn fixed_bytes(n: usize, bits: u8) -> u64 {
    (n as u64 * bits as u64).div_ceil(8)
}

/// Payload plus codebook bytes of one Huffman-coded symbol stream.
pub fn coded_bytes(layer: &CompressedLayer) -> u64 {
    layer.payload.len() as u64 + layer.codebook.serialized_bytes() as u64
}

fn link_bytes(plan: &ParallelPlan, payload: u64) -> u64 {
    match plan.topology {
        Topology::ParameterServer => payload,
        Topology::AllReduce => {
            let w = plan.workers as u64;
            (2 * (w - 1) * payload).div_ceil(w)
        }
    }
}

/// Data-parallel observer; attach it to a training run.
pub struct DataParallelSim {
    plan: ParallelPlan,
    pub ledger: CommLedger,
    rng: ChaCha8Rng,
}

impl DataParallelSim {
    pub fn new(plan: ParallelPlan) -> Result<Self> {
        plan.validate()?;
        if plan.mode != ParallelMode::DataParallel {
            return Err(Error::Config("data-parallel simulation needs a data_parallel plan".into()));
        }
        let rng = ChaCha8Rng::seed_from_u64(plan.seed);
        Ok(Self {
            plan,
            ledger: CommLedger::default(),
            rng,
        })
    }

    pub fn plan(&self) -> &ParallelPlan {
        &self.plan
    }

    /// Records one sync. Under `huffman_coded` the payload is a fresh `Q_p`
    /// sample of every layer; the master weights stay untouched.
    pub fn sync(&mut self, epoch: usize, step: u64, model: &Model) -> Result<()> {
        let payloads: Vec<u64> = match self.plan.policy {
            PayloadPolicy::RawFp64 => model.weighted_layers().map(|l| 8 * l.weights.len() as u64).collect(),
            PayloadPolicy::RawFixedBBits => model
                .weighted_layers()
                .map(|l| {
                    let bits = l.quant.and_then(|q| q.weight_grid().ok()).map_or(self.plan.bits, |g| g.bits());
                    fixed_bytes(l.weights.len(), bits)
                })
                .collect(),
            PayloadPolicy::HuffmanCoded => {
                if model.weighted_layers().any(|l| l.quant.is_none()) {
                    return Err(Error::Config("huffman_coded sync needs quantizer parameters".into()));
                }
                let snap = model.quantize_weights(Mode::Cdl, &mut self.rng)?;
                let mut out = Vec::with_capacity(snap.layers.len());
                for (l, sl) in snap.layers.into_iter().enumerate() {
                    let layer = CompressedLayer::encode(model.quant(l)?.weight_grid()?, &sl.symbols)?;
                    out.push(coded_bytes(&layer));
                }
                out
            }
        };
        for (layer, payload) in payloads.into_iter().enumerate() {
            for direction in [Direction::Upload, Direction::Download] {
                self.ledger.record(CommEvent {
                    epoch,
                    step,
                    direction,
                    layer,
                    bytes: link_bytes(&self.plan, payload),
                    policy: self.plan.policy,
                });
            }
        }
        Ok(())
    }
}

impl Observer for DataParallelSim {
    fn after_update(&mut self, ctx: &StepContext, model: &mut Model) -> Result<()> {
        let due = match self.plan.cadence {
            Cadence::Steps(k) => (ctx.step + 1) % k == 0,
            Cadence::Epoch => ctx.epoch_end,
        };
        if due {
            self.sync(ctx.epoch, ctx.step, model)?;
        }
        Ok(())
    }

    fn on_epoch_end(&mut self, epoch: usize, _model: &Model) -> Result<()> {
        self.ledger.close_epoch(epoch - 1);
        Ok(())
    }
}

/// Activation indices (into `Model::act_widths`) at which stages meet.
///
/// A cut must fall right after an activation; splitting a weighted layer
/// from its nonlinearity, or cutting at either end, is rejected.
pub fn pipeline_boundaries(model: &Model, plan: &ParallelPlan) -> Result<Vec<usize>> {
    let n_acts = model.act_widths().len();
    if plan.cuts.is_empty() {
        if plan.workers > n_acts + 1 {
            return Err(Error::Config(format!(
                "{} stages requested but the model has only {} layers to split",
                plan.workers,
                n_acts + 1
            )));
        }
        let s = n_acts + 1;
        return Ok((1..plan.workers).map(|i| i * s / plan.workers - 1).collect());
    }
    if plan.cuts.len() + 1 != plan.workers {
        return Err(Error::Config(format!(
            "{} cuts do not make {} stages",
            plan.cuts.len(),
            plan.workers
        )));
    }
    // Activation `a` leaves the relu that follows weighted stage `a`.
    let mut after_act = Vec::new();
    let mut seen = 0usize;
    for (i, layer) in model.layers().iter().enumerate() {
        if matches!(layer.kind, LayerKind::Relu) {
            after_act.push((i + 1, seen));
        }
        if layer.kind.has_weights() {
            seen += 1;
        }
    }
    let mut out = Vec::with_capacity(plan.cuts.len());
    for &cut in &plan.cuts {
        let act = after_act
            .iter()
            .find(|&&(pos, _)| pos == cut)
            .map(|&(_, a)| a - 1)
            .ok_or_else(|| Error::Config(format!("cut {cut} falls inside a layer or at the model's edge")))?;
        out.push(act);
    }
    if out.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("pipeline cuts must be strictly increasing".into()));
    }
    Ok(out)
}

/// Pipeline observer; attach it to a training run.
pub struct PipelineSim {
    plan: ParallelPlan,
    boundaries: Vec<usize>,
    pub ledger: CommLedger,
    /// Per boundary: this batch's symbols (coded) or value count (raw).
    pending: Vec<Vec<i32>>,
    counts: Vec<usize>,
    rng: ChaCha8Rng,
}

impl PipelineSim {
    pub fn new(plan: ParallelPlan, model: &Model) -> Result<Self> {
        plan.validate()?;
        if plan.mode != ParallelMode::PipelineModelParallel {
            return Err(Error::Config("pipeline simulation needs a pipeline_model_parallel plan".into()));
        }
        let boundaries = pipeline_boundaries(model, &plan)?;
        if plan.policy == PayloadPolicy::HuffmanCoded
            && boundaries.iter().any(|&a| model.quant(a).is_err())
        {
            return Err(Error::Config("huffman_coded activations need quantizer parameters".into()));
        }
        let rng = ChaCha8Rng::seed_from_u64(plan.seed);
        let n = boundaries.len();
        Ok(Self {
            plan,
            boundaries,
            ledger: CommLedger::default(),
            pending: vec![Vec::new(); n],
            counts: vec![0; n],
            rng,
        })
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// Adds one sample's boundary activations to the current batch.
    pub fn observe(&mut self, model: &Model, trace: &ForwardTrace) -> Result<()> {
        for (k, &a) in self.boundaries.iter().enumerate() {
            let act = &trace.acts[a];
            self.counts[k] += act.raw.len();
            if self.plan.policy != PayloadPolicy::HuffmanCoded {
                continue;
            }
            if !act.symbols.is_empty() {
                self.pending[k].extend_from_slice(&act.symbols);
                continue;
            }
            // Q_d forwards carry no symbols; sample the ones Q_p would send.
            let qp = model.quant(a)?;
            let grid = qp.act_grid()?;
            for &x in &act.raw {
                let w = Window::new(x, &grid, qp.beta(), model.act_topk());
                let pos = w.sample_pos(&mut self.rng);
                self.pending[k].push(grid.index(pos));
            }
        }
        Ok(())
    }

    /// Emits the current batch's forward and backward events.
    pub fn flush(&mut self, epoch: usize, step: u64, model: &Model) -> Result<()> {
        for k in 0..self.boundaries.len() {
            let a = self.boundaries[k];
            let n = std::mem::take(&mut self.counts[k]);
            let symbols = std::mem::take(&mut self.pending[k]);
            if n == 0 {
                continue;
            }
            let bits = model.quant(a).map_or(self.plan.bits, |q| q.act_bits);
            let forward = match self.plan.policy {
                PayloadPolicy::RawFp64 => 8 * n as u64,
                PayloadPolicy::RawFixedBBits => fixed_bytes(n, bits),
                PayloadPolicy::HuffmanCoded => coded_bytes(&CompressedLayer::encode(model.quant(a)?.act_grid()?, &symbols)?),
            };
            let backward = match self.plan.policy {
                PayloadPolicy::RawFp64 => 8 * n as u64,
                _ => fixed_bytes(n, self.plan.bits),
            };
            for (direction, bytes) in [(Direction::Forward, forward), (Direction::Backward, backward)] {
                self.ledger.record(CommEvent {
                    epoch,
                    step,
                    direction,
                    layer: a,
                    bytes,
                    policy: self.plan.policy,
                });
            }
        }
        Ok(())
    }
}

impl Observer for PipelineSim {
    fn on_forward(&mut self, _ctx: &StepContext, model: &Model, trace: &ForwardTrace) -> Result<()> {
        self.observe(model, trace)
    }

    fn after_update(&mut self, ctx: &StepContext, model: &mut Model) -> Result<()> {
        self.flush(ctx.epoch, ctx.step, model)
    }

    fn on_epoch_end(&mut self, epoch: usize, _model: &Model) -> Result<()> {
        self.ledger.close_epoch(epoch - 1);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gaussian_clusters, ClusterSpec};
    use crate::net::{arch, LayerQuantParams};
    use crate::train::{TrainConfig, TrainState};
    use crate::net::checkpoint;

    fn mlp(rng_seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut m = Model::init(16, &arch::mlp(&[16, 12, 8, 4]), Some(5), &mut rng).unwrap();
        m.set_uniform_quant(LayerQuantParams::new(0.05, 0.1, 500.0, 500.0, 6, 6).unwrap());
        m
    }

    #[test]
    fn raw_fp64_sync_costs_two_n_eight() {
        let m = mlp(1);
        let n = m.num_weights() as u64;
        let plan = ParallelPlan::data_parallel(2, Cadence::Epoch, PayloadPolicy::RawFp64, 6).unwrap();
        let mut sim = DataParallelSim::new(plan).unwrap();
        sim.sync(0, 0, &m).unwrap();
        assert_eq!(sim.ledger.total(), 2 * n * 8);
        sim.ledger.check_conservation().unwrap();
    }

    #[test]
    fn all_reduce_with_two_workers_matches_server() {
        let m = mlp(1);
        let mut plan = ParallelPlan::data_parallel(2, Cadence::Epoch, PayloadPolicy::RawFp64, 6).unwrap();
        plan.topology = Topology::AllReduce;
        let mut sim = DataParallelSim::new(plan.clone()).unwrap();
        sim.sync(0, 0, &m).unwrap();
        assert_eq!(sim.ledger.total(), 2 * 8 * m.num_weights() as u64);
        plan.workers = 4;
        let mut sim = DataParallelSim::new(plan).unwrap();
        sim.sync(0, 0, &m).unwrap();
        assert!(sim.ledger.total() > 2 * 8 * m.num_weights() as u64);
    }

    #[test]
    fn collapsed_weights_code_at_one_bit() {
        let mut m = mlp(1);
        m.set_uniform_quant(LayerQuantParams::new(0.05, 0.1, 1e6, 1e6, 6, 6).unwrap());
        for l in 0..m.num_stages() {
            m.stage_mut(l).weights.data_mut().fill(0.0);
        }
        let plan = ParallelPlan::data_parallel(2, Cadence::Epoch, PayloadPolicy::HuffmanCoded, 6).unwrap();
        let mut sim = DataParallelSim::new(plan).unwrap();
        sim.sync(0, 0, &m).unwrap();
        for (l, layer) in m.weighted_layers().enumerate() {
            let up = sim.ledger.events.iter().find(|e| e.layer == l && e.direction == Direction::Upload).unwrap();
            // one-entry codebook is 9 bytes
            assert_eq!(up.bytes, fixed_bytes(layer.weights.len(), 1) + 9);
        }
    }

    #[test]
    fn syncs_leave_the_model_unchanged() {
        let m = mlp(2);
        let before = m.clone();
        for policy in [PayloadPolicy::RawFixedBBits, PayloadPolicy::HuffmanCoded] {
            let plan = ParallelPlan::data_parallel(3, Cadence::Steps(1), policy, 6).unwrap();
            let mut sim = DataParallelSim::new(plan).unwrap();
            sim.sync(0, 0, &m).unwrap();
            assert_eq!(m, before);
            assert!(sim.ledger.total() > 0);
        }
    }

    #[test]
    fn plan_validation() {
        assert!(ParallelPlan::data_parallel(1, Cadence::Epoch, PayloadPolicy::RawFp64, 6).is_err());
        assert!(ParallelPlan::data_parallel(2, Cadence::Steps(0), PayloadPolicy::RawFp64, 6).is_err());
        let plan = ParallelPlan::pipeline(2, PayloadPolicy::RawFp64, 6).unwrap();
        assert!(DataParallelSim::new(plan).is_err());
    }

    #[test]
    fn pipeline_forward_payload_is_m_k_b_over_8() {
        let m = mlp(3);
        let plan = ParallelPlan::pipeline(2, PayloadPolicy::RawFixedBBits, 6).unwrap();
        let mut sim = PipelineSim::new(plan, &m).unwrap();
        let a = sim.boundaries()[0];
        let k = m.act_widths()[a];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let snap = m.quantize_weights(Mode::Rcdl, &mut rng).unwrap();
        let batch = 5;
        for i in 0..batch {
            let x: Vec<f64> = (0..16).map(|j| ((i * 16 + j) as f64).sin()).collect();
            let t = m.forward(&snap, &x, 0, &mut rng).unwrap();
            sim.observe(&m, &t).unwrap();
        }
        sim.flush(0, 0, &m).unwrap();
        assert_eq!(sim.ledger.bytes_in(0, Direction::Forward), (batch * k * 6 / 8) as u64);
    }

    #[test]
    fn pipeline_cuts() {
        let m = mlp(3);
        let mut plan = ParallelPlan::pipeline(1, PayloadPolicy::RawFp64, 6).unwrap();
        assert!(PipelineSim::new(plan.clone(), &m).unwrap().boundaries().is_empty());
        // layers: dense relu dense relu dense
        plan.workers = 2;
        plan.cuts = vec![2];
        assert_eq!(pipeline_boundaries(&m, &plan).unwrap(), vec![0]);
        plan.cuts = vec![4];
        assert_eq!(pipeline_boundaries(&m, &plan).unwrap(), vec![1]);
        for bad in [0, 1, 3, 5] {
            plan.cuts = vec![bad];
            assert!(pipeline_boundaries(&m, &plan).is_err(), "cut {bad}");
        }
        plan.workers = 3;
        plan.cuts = vec![];
        assert_eq!(pipeline_boundaries(&m, &plan).unwrap(), vec![0, 1]);
        plan.workers = 4;
        assert!(pipeline_boundaries(&m, &plan).is_err());
    }

    fn cluster_run(observer: &mut dyn Observer) -> (Vec<u8>, TrainState) {
        let spec = ClusterSpec {
            train: 96,
            test: 32,
            ..Default::default()
        };
        let (train, test) = gaussian_clusters(&spec).unwrap();
        let cfg = TrainConfig {
            arch: crate::train::Arch::Mlp,
            mlp_hidden: vec![8],
            epochs: 2,
            bits: 4,
            lambda: 0.05,
            gamma: 0.05,
            probe_size: 16,
            ..Default::default()
        };
        let mut st = TrainState::new(cfg, &train).unwrap();
        st.run(&train, &test, observer).unwrap();
        (checkpoint::encode(&st.model), st)
    }

    #[test]
    fn observers_leave_training_untouched() {
        let (plain, _) = cluster_run(&mut ());
        let plan = ParallelPlan::data_parallel(2, Cadence::Steps(2), PayloadPolicy::HuffmanCoded, 4).unwrap();
        let mut dp = DataParallelSim::new(plan).unwrap();
        let (watched, _) = cluster_run(&mut dp);
        assert_eq!(plain, watched);
        assert_eq!(dp.ledger.epoch_totals.len(), 2);
        dp.ledger.check_conservation().unwrap();

        let (_, st) = cluster_run(&mut ());
        let plan = ParallelPlan::pipeline(2, PayloadPolicy::HuffmanCoded, 4).unwrap();
        let mut pp = PipelineSim::new(plan, &st.model).unwrap();
        let (watched, _) = cluster_run(&mut pp);
        assert_eq!(plain, watched);
        pp.ledger.check_conservation().unwrap();
        let cum = pp.ledger.cumulative();
        assert!(cum.windows(2).all(|w| w[0] <= w[1]));
    }
}
