//! Experiment orchestration: configuration loading, the end-to-end
//! schedule -> assign -> allocate -> train -> evaluate loop, sweeps with
//! repetition statistics, assignment-strategy comparisons, and clustering
//! evaluation. All outputs are CSV plus a JSON run manifest; every run is
//! fully determined by its configuration and seed.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::allocate_all;
use crate::assigner::{assign_exhaustive, assign_geographic, assign_hfel, Budgets};
use crate::cost::{AssignmentPattern, CostParams};
use crate::d3qn::{assign_drl, derive_seed, Agent};
use crate::error::{Error, Result};
use crate::fl::{
    evaluate, generate_synthetic, local_train, partition_with_sizes,
    run_global_iteration, DataPartition, Dataset, Learner, MiniLearner, MlpLearner,
};
use crate::scheduler::{
    adjusted_rand_index, cluster_devices, schedule_round, ClusterSet, Policy, Schedule,
    SchedulerState,
};
use crate::topology::{generate_topology, Device, ParamRanges, Topology};

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TopologyConfig {
    pub n_devices: usize,
    pub n_edges: usize,
    pub side_length: f64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            n_devices: 40,
            n_edges: 3,
            side_length: 1000.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub policy: Policy,
    /// Cluster count K.
    pub clusters: usize,
    /// Devices per cluster per round h; H = K * h.
    pub per_cluster: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            policy: Policy::Ikc,
            clusters: 10,
            per_cluster: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AssignmentConfig {
    /// geographic | hfel | exhaustive | drl
    pub strategy: String,
    pub transfer_budget: usize,
    pub exchange_budget: usize,
    /// Checkpoint path, required for the drl strategy.
    pub agent_path: Option<PathBuf>,
    /// Allocator tolerance used during runs.
    pub tolerance: f64,
}

impl Default for AssignmentConfig {
    fn default() -> Self {
        AssignmentConfig {
            strategy: "geographic".into(),
            transfer_budget: 100,
            exchange_budget: 300,
            agent_path: None,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerSetup {
    /// Feature dimension of the synthetic data.
    pub dim: usize,
    pub hidden: usize,
    pub classes: usize,
    /// Class-mean separation of the Gaussian mixture.
    pub separation: f64,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    /// Majority fraction rho of the non-IID partition.
    pub rho: f64,
    /// Gradient step size beta.
    pub beta: f64,
    /// Leading features seen by the clustering mini model.
    pub mini_dim: usize,
}

impl Default for LearnerSetup {
    fn default() -> Self {
        LearnerSetup {
            dim: 8,
            hidden: 16,
            classes: 10,
            separation: 3.0,
            samples_per_class: 3000,
            test_per_class: 200,
            rho: 0.8,
            beta: 0.01,
            mini_dim: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunControl {
    /// A^target; the run stops at the first round reaching it.
    pub target_accuracy: f64,
    pub max_rounds: usize,
    pub base_seed: u64,
}

impl Default for RunControl {
    fn default() -> Self {
        RunControl {
            target_accuracy: 0.8,
            max_rounds: 30,
            base_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub topology: TopologyConfig,
    pub cost: CostParams,
    pub ranges: ParamRanges,
    pub scheduler: SchedulerConfig,
    pub assignment: AssignmentConfig,
    pub learner: LearnerSetup,
    pub run: RunControl,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn schedule_size(&self) -> usize {
        self.scheduler.clusters * self.scheduler.per_cluster
    }

    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        c(self.topology.n_devices >= 1, "need at least one device")?;
        c(self.topology.n_edges >= 1, "need at least one edge")?;
        c(
            self.schedule_size() <= self.topology.n_devices,
            "H = clusters * per_cluster exceeds the device count",
        )?;
        c(self.scheduler.per_cluster >= 1, "per_cluster must be >= 1")?;
        c(
            (0.0..1.0).contains(&self.run.target_accuracy),
            "target_accuracy must be in [0, 1)",
        )?;
        c(self.run.max_rounds >= 1, "max_rounds must be >= 1")?;
        c(self.learner.classes >= 2, "need at least two classes")?;
        c(
            self.learner.mini_dim >= 1 && self.learner.mini_dim <= self.learner.dim,
            "mini_dim must be in [1, dim]",
        )?;
        c(self.assignment.tolerance > 0.0, "tolerance must be > 0")?;
        match self.assignment.strategy.as_str() {
            "geographic" | "hfel" | "exhaustive" => Ok(()),
            "drl" => c(
                self.assignment.agent_path.is_some(),
                "drl strategy requires assignment.agent_path",
            ),
            other => Err(Error::Config(format!("unknown strategy '{other}'"))),
        }
    }

    /// FNV-1a hash of the canonical serialized configuration.
    pub fn hash(&self) -> Result<String> {
        let text =
            toml::to_string(self).map_err(|e| Error::Serde(format!("config serialize: {e}")))?;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        Ok(format!("{h:016x}"))
    }
}

// ---------------------------------------------------------------------------
// workload: everything one run shares across rounds
// ---------------------------------------------------------------------------

/// Split a class-balanced pool into train/test: the first `per_class_train`
/// samples of each class (in pool order) train, the rest are held out.
fn split_holdout(pool: &Dataset, per_class_train: usize) -> (Dataset, Dataset) {
    let mut seen = vec![0usize; pool.n_classes];
    let mut train = Dataset {
        features: Vec::new(),
        labels: Vec::new(),
        n_classes: pool.n_classes,
    };
    let mut test = Dataset {
        features: Vec::new(),
        labels: Vec::new(),
        n_classes: pool.n_classes,
    };
    for (x, &y) in pool.features.iter().zip(&pool.labels) {
        let dst = if seen[y] < per_class_train {
            &mut train
        } else {
            &mut test
        };
        seen[y] += 1;
        dst.features.push(x.clone());
        dst.labels.push(y);
    }
    (train, test)
}

pub struct Workload {
    pub topology: Topology,
    pub data: Dataset,
    pub test: Dataset,
    pub partition: DataPartition,
    pub learner: MlpLearner,
    pub mini: MiniLearner,
}

impl Workload {
    /// Deterministic build from the config and one run seed. The non-IID
    /// partition reuses the topology's per-device sample counts so the cost
    /// model's D_n and the training data sizes agree.
    pub fn build(cfg: &ExperimentConfig, seed: u64) -> Result<Workload> {
        let topology = generate_topology(
            cfg.topology.n_devices,
            cfg.topology.n_edges,
            cfg.topology.side_length,
            derive_seed(seed, 10, 0),
            &cfg.ranges,
        )?;
        let l = &cfg.learner;
        // Train and test must share the same class means, so draw one pool
        // and hold out test_per_class samples of each class.
        let pool = generate_synthetic(
            l.samples_per_class + l.test_per_class,
            l.classes,
            l.dim,
            l.separation,
            derive_seed(seed, 11, 0),
        );
        let (data, test) = split_holdout(&pool, l.samples_per_class);
        let sizes: Vec<usize> = topology
            .devices
            .iter()
            .map(|d| d.num_samples as usize)
            .collect();
        let partition = partition_with_sizes(&data, &sizes, l.rho, derive_seed(seed, 13, 0))?;
        Ok(Workload {
            topology,
            data,
            test,
            partition,
            learner: MlpLearner {
                in_dim: l.dim,
                hidden: l.hidden,
                classes: l.classes,
            },
            mini: MiniLearner {
                sub_dim: l.mini_dim,
                classes: l.classes,
            },
        })
    }

    /// Auxiliary-model trainer used for device clustering: every device
    /// trains the given learner from the same initialization on its own data.
    pub fn aux_trainer<'a, L: Learner + Sync>(
        &'a self,
        aux: &'a L,
        local_iters: u32,
        beta: f64,
    ) -> impl Fn(&Device) -> Vec<f64> + Sync + 'a {
        let init = aux.init_params(0);
        move |device: &Device| {
            let idx = &self.partition.device_samples[device.dataset_id];
            local_train(aux, &init, &self.data, idx, local_iters, beta)
                .map(|p| p.weights)
                .unwrap_or_else(|_| init.weights.clone())
        }
    }
}

// ---------------------------------------------------------------------------
// run_experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: usize,
    pub accuracy: f64,
    pub time_s: f64,
    pub energy_j: f64,
    pub objective: f64,
    pub uplink_bytes: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub rows: Vec<RoundRow>,
    pub converged: bool,
    pub rounds: usize,
    pub total_time_s: f64,
    pub total_energy_j: f64,
    pub total_objective: f64,
    pub total_uplink_bytes: f64,
    pub final_accuracy: f64,
}

impl RunRecord {
    pub fn csv_header() -> &'static str {
        "round,accuracy,time_s,energy_j,objective,uplink_bytes"
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::csv_header());
        for r in &self.rows {
            out.push('\n');
            out.push_str(&format!(
                "{},{},{},{},{},{}",
                r.round, r.accuracy, r.time_s, r.energy_j, r.objective, r.uplink_bytes
            ));
        }
        out.push('\n');
        out
    }
}

/// Uplink bytes of one global round: Q*H local uploads plus M edge-to-cloud
/// uploads of z bits each (downloads are free).
pub fn round_uplink_bytes(params: &CostParams, h: usize, n_edges: usize) -> f64 {
    (params.edge_iters as f64 * h as f64 + n_edges as f64) * params.model_size / 8.0
}

enum StrategyImpl {
    Geographic,
    Hfel(Budgets),
    Exhaustive,
    Drl(Box<Agent>),
}

impl StrategyImpl {
    fn from_config(cfg: &AssignmentConfig) -> Result<StrategyImpl> {
        Ok(match cfg.strategy.as_str() {
            "geographic" => StrategyImpl::Geographic,
            "hfel" => StrategyImpl::Hfel(Budgets {
                transfers: cfg.transfer_budget,
                exchanges: cfg.exchange_budget,
            }),
            "exhaustive" => StrategyImpl::Exhaustive,
            "drl" => {
                let path = cfg.agent_path.as_ref().ok_or_else(|| {
                    Error::Config("drl strategy requires assignment.agent_path".into())
                })?;
                StrategyImpl::Drl(Box::new(crate::d3qn::load_checkpoint(path)?))
            }
            other => return Err(Error::Config(format!("unknown strategy '{other}'"))),
        })
    }

    fn assign(
        &self,
        schedule: &Schedule,
        topology: &Topology,
        params: &CostParams,
        tolerance: f64,
    ) -> Result<AssignmentPattern> {
        Ok(match self {
            StrategyImpl::Geographic => assign_geographic(schedule, topology)?,
            StrategyImpl::Hfel(b) => {
                assign_hfel(schedule, topology, params, *b, tolerance)?.pattern
            }
            StrategyImpl::Exhaustive => {
                assign_exhaustive(schedule, topology, params, tolerance)?.pattern
            }
            StrategyImpl::Drl(agent) => assign_drl(agent, schedule, topology)?.0,
        })
    }
}

fn build_clusters(cfg: &ExperimentConfig, workload: &Workload, seed: u64) -> Result<ClusterSet> {
    let k = cfg.scheduler.clusters;
    match cfg.scheduler.policy {
        // random scheduling ignores cluster membership; a fixed striping
        // keeps the SchedulerState bookkeeping uniform
        Policy::Random => {
            let labels: BTreeMap<usize, usize> = (0..cfg.topology.n_devices)
                .map(|d| (d, d % k))
                .collect();
            Ok(ClusterSet::from_labels(labels, k))
        }
        // VKC clusters on the full model's trained weights
        Policy::Vkc => cluster_devices(
            &workload.topology,
            workload.aux_trainer(&workload.learner, cfg.cost.local_iters, cfg.learner.beta),
            k,
            derive_seed(seed, 14, 0),
        ),
        // IKC clusters on the mini model's trained weights
        Policy::Ikc => cluster_devices(
            &workload.topology,
            workload.aux_trainer(&workload.mini, cfg.cost.local_iters, cfg.learner.beta),
            k,
            derive_seed(seed, 14, 0),
        ),
    }
}

/// One full experiment: schedule -> assign -> allocate -> train -> evaluate
/// until the accuracy target or the round limit.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    cfg.validate()?;
    let workload = Workload::build(cfg, seed)?;
    let clusters = build_clusters(cfg, &workload, seed)?;
    let mut state = SchedulerState::new(
        cfg.scheduler.policy,
        &clusters,
        cfg.scheduler.per_cluster,
        derive_seed(seed, 15, 0),
    )?;
    let strategy = StrategyImpl::from_config(&cfg.assignment)?;
    let all_devices: Vec<usize> = (0..cfg.topology.n_devices).collect();
    let mut global = workload.learner.init_params(derive_seed(seed, 16, 0));
    let mut rows = Vec::new();
    let mut converged = false;

    for round in 1..=cfg.run.max_rounds {
        let schedule = schedule_round(&mut state, &clusters, &all_devices, round);
        let pattern = strategy.assign(
            &schedule,
            &workload.topology,
            &cfg.cost,
            cfg.assignment.tolerance,
        )?;
        pattern.validate(&schedule.members)?;
        let (_alloc, report) = allocate_all(
            &pattern,
            &workload.topology,
            &cfg.cost,
            cfg.assignment.tolerance,
        )?;
        global = run_global_iteration(
            &workload.learner,
            &global,
            &pattern,
            &workload.data,
            &workload.partition,
            cfg.cost.local_iters,
            cfg.cost.edge_iters,
            cfg.learner.beta,
        )?;
        let accuracy = evaluate(&workload.learner, &global, &workload.test);
        rows.push(RoundRow {
            round,
            accuracy,
            time_s: report.round_time,
            energy_j: report.round_energy,
            objective: report.objective,
            uplink_bytes: round_uplink_bytes(
                &cfg.cost,
                schedule.members.len(),
                cfg.topology.n_edges,
            ),
        });
        if accuracy >= cfg.run.target_accuracy {
            converged = true;
            break;
        }
    }

    Ok(RunRecord {
        rounds: rows.len(),
        converged,
        total_time_s: rows.iter().map(|r| r.time_s).sum(),
        total_energy_j: rows.iter().map(|r| r.energy_j).sum(),
        total_objective: rows.iter().map(|r| r.objective).sum(),
        total_uplink_bytes: rows.iter().map(|r| r.uplink_bytes).sum(),
        final_accuracy: rows.last().map(|r| r.accuracy).unwrap_or(0.0),
        rows,
    })
}

/// JSON manifest accompanying every run's CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub base_seed: u64,
    pub run_seed: u64,
    pub version: String,
    pub converged: bool,
    pub rounds: usize,
    pub total_objective: f64,
    pub final_accuracy: f64,
}

pub fn manifest_for(cfg: &ExperimentConfig, seed: u64, record: &RunRecord) -> Result<RunManifest> {
    Ok(RunManifest {
        config_hash: cfg.hash()?,
        base_seed: cfg.run.base_seed,
        run_seed: seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        converged: record.converged,
        rounds: record.rounds,
        total_objective: record.total_objective,
        final_accuracy: record.final_accuracy,
    })
}

/// Write a file atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into())
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub policy: String,
    pub schedule_size: usize,
    pub repetitions: usize,
    pub completed: usize,
    pub converged: usize,
    pub mean_rounds: f64,
    pub std_rounds: f64,
    pub mean_time_s: f64,
    pub std_time_s: f64,
    pub mean_energy_j: f64,
    pub std_energy_j: f64,
    pub mean_objective: f64,
    pub std_objective: f64,
    pub mean_uplink_bytes: f64,
}

impl SweepRow {
    pub fn csv_header() -> &'static str {
        "label,policy,schedule_size,repetitions,completed,converged,mean_rounds,std_rounds,\
         mean_time_s,std_time_s,mean_energy_j,std_energy_j,mean_objective,std_objective,\
         mean_uplink_bytes"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.label,
            self.policy,
            self.schedule_size,
            self.repetitions,
            self.completed,
            self.converged,
            self.mean_rounds,
            self.std_rounds,
            self.mean_time_s,
            self.std_time_s,
            self.mean_energy_j,
            self.std_energy_j,
            self.mean_objective,
            self.std_objective,
            self.mean_uplink_bytes
        )
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / values.len() as f64;
    (mean, var.sqrt())
}

/// Run each labeled config `repetitions` times (seed_r = base_seed + r) and
/// summarize. Failed runs are reported in the error list; the sweep
/// continues past them.
pub fn sweep(
    configs: &[(String, ExperimentConfig)],
    repetitions: usize,
) -> Result<(Vec<SweepRow>, Vec<String>)> {
    if repetitions == 0 {
        return Err(Error::Config("repetitions must be >= 1".into()));
    }
    // one independent, fully-seeded job per (config, repetition)
    let jobs: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|c| (0..repetitions).map(move |r| (c, r)))
        .collect();
    let results: Vec<(usize, usize, Result<RunRecord>)> = jobs
        .par_iter()
        .map(|&(c, r)| {
            let cfg = &configs[c].1;
            let seed = cfg.run.base_seed + r as u64;
            (c, r, run_experiment(cfg, seed))
        })
        .collect();

    let mut rows = Vec::with_capacity(configs.len());
    let mut errors = Vec::new();
    for (c, (label, cfg)) in configs.iter().enumerate() {
        let mut records = Vec::new();
        for (jc, r, res) in &results {
            if *jc != c {
                continue;
            }
            match res {
                Ok(rec) => records.push(rec.clone()),
                Err(e) => errors.push(format!("{label} repetition {r}: {e}")),
            }
        }
        let rounds: Vec<f64> = records.iter().map(|r| r.rounds as f64).collect();
        let times: Vec<f64> = records.iter().map(|r| r.total_time_s).collect();
        let energies: Vec<f64> = records.iter().map(|r| r.total_energy_j).collect();
        let objectives: Vec<f64> = records.iter().map(|r| r.total_objective).collect();
        let bytes: Vec<f64> = records.iter().map(|r| r.total_uplink_bytes).collect();
        let (mean_rounds, std_rounds) = mean_std(&rounds);
        let (mean_time_s, std_time_s) = mean_std(&times);
        let (mean_energy_j, std_energy_j) = mean_std(&energies);
        let (mean_objective, std_objective) = mean_std(&objectives);
        let (mean_uplink_bytes, _) = mean_std(&bytes);
        rows.push(SweepRow {
            label: label.clone(),
            policy: format!("{:?}", cfg.scheduler.policy).to_lowercase(),
            schedule_size: cfg.schedule_size(),
            repetitions,
            completed: records.len(),
            converged: records.iter().filter(|r| r.converged).count(),
            mean_rounds,
            std_rounds,
            mean_time_s,
            std_time_s,
            mean_energy_j,
            std_energy_j,
            mean_objective,
            std_objective,
            mean_uplink_bytes,
        });
    }
    Ok((rows, errors))
}

// ---------------------------------------------------------------------------
// compare_assignment
// ---------------------------------------------------------------------------

/// A strategy under comparison, with a display label.
pub enum Strategy<'a> {
    Geographic,
    Hfel(Budgets),
    Exhaustive,
    Drl(&'a Agent),
}

impl Strategy<'_> {
    pub fn label(&self) -> String {
        match self {
            Strategy::Geographic => "geographic".into(),
            Strategy::Hfel(b) => format!("hfel-{}-{}", b.transfers, b.exchanges),
            Strategy::Exhaustive => "exhaustive".into(),
            Strategy::Drl(_) => "drl".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareRow {
    pub strategy: String,
    pub instances: usize,
    pub mean_time_s: f64,
    pub mean_energy_j: f64,
    pub mean_objective: f64,
    pub mean_assign_latency_s: f64,
}

impl CompareRow {
    pub fn csv_header() -> &'static str {
        "strategy,instances,mean_time_s,mean_energy_j,mean_objective,mean_assign_latency_s"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.strategy,
            self.instances,
            self.mean_time_s,
            self.mean_energy_j,
            self.mean_objective,
            self.mean_assign_latency_s
        )
    }
}

/// Per-instance results of one strategy in a comparison.
#[derive(Debug, Clone)]
pub struct CompareDetail {
    pub strategy: String,
    pub objectives: Vec<f64>,
    pub latencies: Vec<f64>,
}

/// The assignment-comparison protocol: fresh random instances of H devices
/// and M edges; every strategy assigns the identical schedule on each and is
/// scored by a full allocation of its pattern.
pub fn compare_assignment(
    instances: usize,
    strategies: &[Strategy<'_>],
    topo_cfg: &TopologyConfig,
    ranges: &ParamRanges,
    params: &CostParams,
    tolerance: f64,
    seed: u64,
) -> Result<(Vec<CompareRow>, Vec<CompareDetail>)> {
    if instances == 0 {
        return Err(Error::Config("need at least one instance".into()));
    }
    let mut details: Vec<CompareDetail> = strategies
        .iter()
        .map(|s| CompareDetail {
            strategy: s.label(),
            objectives: Vec::with_capacity(instances),
            latencies: Vec::with_capacity(instances),
        })
        .collect();
    let mut sums: Vec<(f64, f64, f64, f64)> = vec![(0.0, 0.0, 0.0, 0.0); strategies.len()];
    for i in 0..instances {
        let topology = generate_topology(
            topo_cfg.n_devices,
            topo_cfg.n_edges,
            topo_cfg.side_length,
            derive_seed(seed, 20, i as u64),
            ranges,
        )?;
        let schedule = Schedule {
            round: i,
            members: (0..topo_cfg.n_devices).collect(),
        };
        for (s, strat) in strategies.iter().enumerate() {
            let start = std::time::Instant::now();
            let pattern = match strat {
                Strategy::Geographic => assign_geographic(&schedule, &topology)?,
                Strategy::Hfel(b) => {
                    assign_hfel(&schedule, &topology, params, *b, tolerance)?.pattern
                }
                Strategy::Exhaustive => {
                    assign_exhaustive(&schedule, &topology, params, tolerance)?.pattern
                }
                Strategy::Drl(agent) => assign_drl(agent, &schedule, &topology)?.0,
            };
            let latency = start.elapsed().as_secs_f64();
            let (_, report) = allocate_all(&pattern, &topology, params, tolerance)?;
            sums[s].0 += report.round_time;
            sums[s].1 += report.round_energy;
            sums[s].2 += report.objective;
            sums[s].3 += latency;
            details[s].objectives.push(report.objective);
            details[s].latencies.push(latency);
        }
    }
    let rows = strategies
        .iter()
        .zip(&sums)
        .map(|(strat, &(t, e, o, w))| CompareRow {
            strategy: strat.label(),
            instances,
            mean_time_s: t / instances as f64,
            mean_energy_j: e / instances as f64,
            mean_objective: o / instances as f64,
            mean_assign_latency_s: w / instances as f64,
        })
        .collect();
    Ok((rows, details))
}

// ---------------------------------------------------------------------------
// clustering evaluation
// ---------------------------------------------------------------------------

/// Communication cost of one clustering phase: every device uploads the
/// auxiliary model to its nearest edge over an equal bandwidth split, then
/// each edge forwards one copy to the cloud.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusteringCost {
    pub uplink_bytes: f64,
    pub energy_j: f64,
    pub time_s: f64,
}

pub fn clustering_cost(
    topology: &Topology,
    params: &CostParams,
    aux_model_bits: f64,
) -> Result<ClusteringCost> {
    let schedule = Schedule {
        round: 0,
        members: (0..topology.devices.len()).collect(),
    };
    let pattern = assign_geographic(&schedule, topology)?;
    let mut aux_params = params.clone();
    aux_params.model_size = aux_model_bits;
    let mut time = 0.0f64;
    let mut energy = 0.0f64;
    for (&m, group) in &pattern.groups {
        if group.is_empty() {
            continue;
        }
        let edge = topology.edge(m);
        let share = edge.bandwidth / group.len() as f64;
        let mut t_edge = 0.0f64;
        for &n in group {
            let device = topology.device(n);
            let (t, e) = crate::cost::comm_time_energy(
                device,
                edge,
                share,
                &aux_params,
                &topology.channel,
            )?;
            t_edge = t_edge.max(t);
            energy += e;
        }
        let (t_cloud, e_cloud) = crate::cost::cloud_cost(edge, &aux_params, &topology.channel)?;
        time = time.max(t_edge + t_cloud);
        energy += e_cloud;
    }
    let n = topology.devices.len() as f64;
    let m = pattern.groups.values().filter(|g| !g.is_empty()).count() as f64;
    Ok(ClusteringCost {
        uplink_bytes: (n + m) * aux_model_bits / 8.0,
        energy_j: energy,
        time_s: time,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterEvalReport {
    /// ARI of mini-model clustering vs ground-truth majority labels.
    pub ari_mini: f64,
    /// ARI of full-model clustering vs ground-truth majority labels.
    pub ari_full: f64,
    /// Clustering-phase cost with the mini model (IKC).
    pub mini_cost: ClusteringCost,
    /// Clustering-phase cost with the full model (VKC).
    pub full_cost: ClusteringCost,
}

/// Cluster the workload's devices with both auxiliary models and score each
/// against the ground-truth majority-class labels.
pub fn cluster_eval(
    cfg: &ExperimentConfig,
    full_model_bits: f64,
    mini_model_bits: f64,
    seed: u64,
) -> Result<ClusterEvalReport> {
    let workload = Workload::build(cfg, seed)?;
    let k = cfg.scheduler.clusters;
    let truth: BTreeMap<usize, usize> = workload
        .partition
        .majority_label
        .iter()
        .enumerate()
        .map(|(d, &c)| (d, c))
        .collect();
    let mini_clusters = cluster_devices(
        &workload.topology,
        workload.aux_trainer(&workload.mini, cfg.cost.local_iters, cfg.learner.beta),
        k,
        derive_seed(seed, 14, 0),
    )?;
    let full_clusters = cluster_devices(
        &workload.topology,
        workload.aux_trainer(&workload.learner, cfg.cost.local_iters, cfg.learner.beta),
        k,
        derive_seed(seed, 14, 0),
    )?;
    Ok(ClusterEvalReport {
        ari_mini: adjusted_rand_index(&mini_clusters.labels, &truth)?,
        ari_full: adjusted_rand_index(&full_clusters.labels, &truth)?,
        mini_cost: clustering_cost(&workload.topology, &cfg.cost, mini_model_bits)?,
        full_cost: clustering_cost(&workload.topology, &cfg.cost, full_model_bits)?,
    })
}
