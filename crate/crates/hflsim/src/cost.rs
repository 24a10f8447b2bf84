//! Pure evaluation of the per-round latency and energy model.
//!
//! All functions here are stateless. Per-edge time is `Q * max(T_cmp + T_com)`
//! over the edge's members plus the constant edge-to-cloud upload; per-edge
//! energy is `Q * sum(E_cmp + E_com)` plus the cloud upload energy. The round
//! time is the max over edges, the round energy the sum.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{ChannelTable, Device, EdgeServer, Topology};

/// Background noise spectral density: -174 dBm/Hz as linear W/Hz.
pub const NOISE_PSD_W_PER_HZ: f64 = 3.9810717055349693e-21;

/// Bits in one kilobyte of model weights (1 KB = 1024 bytes).
pub const BITS_PER_KB: f64 = 8192.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    /// Effective capacitance coefficient alpha (the model uses alpha/2).
    pub alpha: f64,
    /// Trade-off weight lambda between energy (J) and time (s).
    pub lambda: f64,
    /// Noise power spectral density N0 in W/Hz.
    pub noise_psd: f64,
    /// Model size z in bits.
    pub model_size: f64,
    /// Local iterations per edge iteration (L).
    pub local_iters: u32,
    /// Edge iterations per global iteration (Q).
    pub edge_iters: u32,
    /// Bandwidth the cloud allocates to each edge server (B), Hz.
    pub cloud_bandwidth: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            alpha: 2e-28,
            lambda: 1.0,
            noise_psd: NOISE_PSD_W_PER_HZ,
            model_size: 448.0 * BITS_PER_KB,
            local_iters: 5,
            edge_iters: 5,
            cloud_bandwidth: 10e6,
        }
    }
}

/// Per-device bandwidth and CPU frequency choices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub bandwidth: BTreeMap<usize, f64>,
    pub frequency: BTreeMap<usize, f64>,
}

impl Allocation {
    pub fn bandwidth_of(&self, device: usize) -> Result<f64> {
        self.bandwidth
            .get(&device)
            .copied()
            .ok_or_else(|| Error::Contract(format!("no bandwidth allocated to device {device}")))
    }

    pub fn frequency_of(&self, device: usize) -> Result<f64> {
        self.frequency
            .get(&device)
            .copied()
            .ok_or_else(|| Error::Contract(format!("no frequency allocated to device {device}")))
    }

    pub fn merge(&mut self, other: Allocation) {
        self.bandwidth.extend(other.bandwidth);
        self.frequency.extend(other.frequency);
    }
}

/// Partition of the scheduled devices across edge servers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentPattern {
    /// edge id -> sorted device ids assigned to that edge.
    pub groups: BTreeMap<usize, Vec<usize>>,
}

impl AssignmentPattern {
    pub fn new(n_edges: usize) -> Self {
        let groups = (0..n_edges).map(|m| (m, Vec::new())).collect();
        AssignmentPattern { groups }
    }

    pub fn assign(&mut self, device: usize, edge: usize) {
        let g = self.groups.entry(edge).or_default();
        match g.binary_search(&device) {
            Ok(_) => {}
            Err(pos) => g.insert(pos, device),
        }
    }

    pub fn edge_of(&self, device: usize) -> Option<usize> {
        self.groups
            .iter()
            .find(|(_, g)| g.binary_search(&device).is_ok())
            .map(|(m, _)| *m)
    }

    pub fn scheduled(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.groups.values().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    /// Disjointness plus coverage of exactly `schedule`.
    pub fn validate(&self, schedule: &[usize]) -> Result<()> {
        let all = self.scheduled();
        for w in all.windows(2) {
            if w[0] == w[1] {
                return Err(Error::Contract(format!(
                    "device {} appears in more than one group",
                    w[0]
                )));
            }
        }
        let mut sched = schedule.to_vec();
        sched.sort_unstable();
        if all != sched {
            return Err(Error::Contract(
                "assignment groups do not cover exactly the scheduled set".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub per_edge_time: BTreeMap<usize, f64>,
    pub per_edge_energy: BTreeMap<usize, f64>,
    /// T_i = max over edges.
    pub round_time: f64,
    /// E_i = sum over edges.
    pub round_energy: f64,
    /// E_i + lambda * T_i.
    pub objective: f64,
}

impl CostReport {
    pub fn empty() -> Self {
        CostReport {
            per_edge_time: BTreeMap::new(),
            per_edge_energy: BTreeMap::new(),
            round_time: 0.0,
            round_energy: 0.0,
            objective: 0.0,
        }
    }

    /// CSV header matching [`CostReport::csv_row`]. Per-edge columns are emitted
    /// in ascending edge-id order for the `n_edges` known edges.
    pub fn csv_header(n_edges: usize) -> String {
        let mut cols = vec![
            "round".to_string(),
            "time_s".to_string(),
            "energy_j".to_string(),
            "objective".to_string(),
        ];
        for m in 0..n_edges {
            cols.push(format!("edge{m}_time_s"));
            cols.push(format!("edge{m}_energy_j"));
        }
        cols.join(",")
    }

    pub fn csv_row(&self, round: usize, n_edges: usize) -> String {
        let mut cols = vec![
            round.to_string(),
            format!("{}", self.round_time),
            format!("{}", self.round_energy),
            format!("{}", self.objective),
        ];
        for m in 0..n_edges {
            cols.push(format!("{}", self.per_edge_time.get(&m).copied().unwrap_or(0.0)));
            cols.push(format!("{}", self.per_edge_energy.get(&m).copied().unwrap_or(0.0)));
        }
        cols.join(",")
    }
}

/// Compute time for L local iterations over D_n samples: L*u*D/f.
pub fn compute_time(device: &Device, f: f64, local_iters: u32) -> Result<f64> {
    if f <= 0.0 {
        return Err(Error::Domain(format!("cpu frequency must be > 0, got {f}")));
    }
    Ok(local_iters as f64 * device.cycles_per_sample * device.num_samples as f64 / f)
}

/// Compute energy: (alpha/2)*L*f^2*u*D.
pub fn compute_energy(device: &Device, f: f64, local_iters: u32, alpha: f64) -> f64 {
    0.5 * alpha
        * local_iters as f64
        * f
        * f
        * device.cycles_per_sample
        * device.num_samples as f64
}

/// Shannon-style uplink rate: b*log2(1 + gain*p/(N0*b)).
pub fn tx_rate(b: f64, gain: f64, p: f64, noise_psd: f64) -> Result<f64> {
    if b <= 0.0 {
        return Err(Error::Domain(format!("bandwidth must be > 0, got {b}")));
    }
    Ok(b * (1.0 + gain * p / (noise_psd * b)).log2())
}

/// Upload time and energy for one model transfer of `params.model_size` bits.
pub fn comm_time_energy(
    device: &Device,
    edge: &EdgeServer,
    b: f64,
    params: &CostParams,
    channel: &ChannelTable,
) -> Result<(f64, f64)> {
    let gain = channel.gain(device.id, edge.id)?;
    let rate = tx_rate(b, gain, device.tx_power, params.noise_psd)?;
    if rate <= 0.0 {
        return Err(Error::InfeasibleLink(format!(
            "device {} -> edge {}: zero uplink rate",
            device.id, edge.id
        )));
    }
    let time = params.model_size / rate;
    Ok((time, device.tx_power * time))
}

/// Time and energy for the edge's members to finish Q edge iterations.
/// An empty member set contributes (0, 0).
pub fn edge_round_cost(
    edge: &EdgeServer,
    members: &[usize],
    alloc: &Allocation,
    params: &CostParams,
    topology: &Topology,
) -> Result<(f64, f64)> {
    let mut t_max = 0.0f64;
    let mut e_sum = 0.0f64;
    for &n in members {
        let device = topology.device(n);
        let f = alloc.frequency_of(n)?;
        let b = alloc.bandwidth_of(n)?;
        let t_cmp = compute_time(device, f, params.local_iters)?;
        let e_cmp = compute_energy(device, f, params.local_iters, params.alpha);
        let (t_com, e_com) = comm_time_energy(device, edge, b, params, &topology.channel)?;
        t_max = t_max.max(t_cmp + t_com);
        e_sum += e_cmp + e_com;
    }
    let q = params.edge_iters as f64;
    Ok((q * t_max, q * e_sum))
}

/// Constant edge-to-cloud upload time and energy.
pub fn cloud_cost(
    edge: &EdgeServer,
    params: &CostParams,
    channel: &ChannelTable,
) -> Result<(f64, f64)> {
    let gain = channel.cloud_gain(edge.id)?;
    let rate = tx_rate(params.cloud_bandwidth, gain, edge.tx_power, params.noise_psd)?;
    if rate <= 0.0 {
        return Err(Error::InfeasibleLink(format!(
            "edge {} -> cloud: zero uplink rate",
            edge.id
        )));
    }
    let time = params.model_size / rate;
    Ok((time, edge.tx_power * time))
}

/// Assemble the full per-round report for a pattern and allocation.
///
/// Edges with no assigned devices contribute nothing, including no cloud
/// upload.
pub fn round_report(
    pattern: &AssignmentPattern,
    alloc: &Allocation,
    topology: &Topology,
    params: &CostParams,
) -> Result<CostReport> {
    let mut report = CostReport::empty();
    for (&m, members) in &pattern.groups {
        if members.is_empty() {
            continue;
        }
        let edge = topology.edge(m);
        let (t_edge, e_edge) = edge_round_cost(edge, members, alloc, params, topology)?;
        let (t_cloud, e_cloud) = cloud_cost(edge, params, &topology.channel)?;
        let t_m = t_cloud + t_edge;
        let e_m = e_cloud + e_edge;
        report.per_edge_time.insert(m, t_m);
        report.per_edge_energy.insert(m, e_m);
        report.round_time = report.round_time.max(t_m);
        report.round_energy += e_m;
    }
    report.objective = report.round_energy + params.lambda * report.round_time;
    Ok(report)
}
