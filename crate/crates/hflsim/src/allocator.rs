//! Per-edge bandwidth and CPU-frequency allocation.
//!
//! Minimizes `E_edge + lambda * T_edge` (plus the constant cloud-upload terms)
//! over per-device bandwidth b_n and frequency f_n, subject to
//! `sum b_n <= B_m` and `f_min <= f_n <= f_max`.
//!
//! The problem is convex, so a decomposition solves it to tolerance:
//! an outer golden-section search over the per-edge-iteration deadline t,
//! and for each candidate deadline a bandwidth-price bisection that spreads
//! B_m across devices. Given (t, b_n) the frequency is forced:
//! f_n = clamp(L u_n D_n / (t - t_com), f_min, f_max).

use serde::{Deserialize, Serialize};

use crate::cost::{
    cloud_cost, compute_energy, compute_time, round_report, tx_rate, Allocation,
    AssignmentPattern, CostParams, CostReport,
};
use crate::error::{Error, Result};
use crate::topology::{Device, EdgeServer, Topology};

/// Lower bound on CPU frequency. The formal constraint allows f_n = 0, which
/// makes compute time infinite; the solver regularizes to this floor.
pub const F_MIN_HZ: f64 = 1e6;

const GOLDEN: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Clone)]
pub struct AllocRequest<'a> {
    pub edge: &'a EdgeServer,
    /// Scheduled members of this edge with their uplink channel gains.
    pub members: Vec<(&'a Device, f64)>,
    pub params: &'a CostParams,
    /// Relative objective tolerance.
    pub tolerance: f64,
    /// Constant edge-to-cloud upload time added to the reported objective.
    pub cloud_time: f64,
    /// Constant edge-to-cloud upload energy added to the reported objective.
    pub cloud_energy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AllocResult {
    pub allocation: Allocation,
    /// E_m + lambda * T_m for this edge, cloud constants included.
    pub objective: f64,
    /// Outer deadline evaluations performed.
    pub iterations: usize,
    pub converged: bool,
}

/// Per-member constants derived once per solve.
struct Member {
    id: usize,
    /// L * u * D, cycles for one edge iteration's local work.
    cycles: f64,
    /// (alpha/2) * L * u * D, so E_cmp = e_coef * f^2.
    e_coef: f64,
    /// gain * p / N0 in Hz.
    y: f64,
    tx_power: f64,
    f_max: f64,
}

impl Member {
    fn rate(&self, b: f64) -> f64 {
        b * (1.0 + self.y / b).log2()
    }

    /// Smallest bandwidth achieving `rate`, or None when the rate exceeds the
    /// link's capacity limit y/ln2.
    fn bandwidth_for_rate(&self, rate: f64) -> Option<f64> {
        let cap = self.y / std::f64::consts::LN_2;
        if rate >= cap * (1.0 - 1e-12) {
            return None;
        }
        let mut lo = 0.0f64;
        let mut hi = 1.0f64;
        let mut guard = 0;
        while self.rate(hi) < rate {
            hi *= 2.0;
            guard += 1;
            if guard > 200 {
                return None;
            }
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if self.rate(mid) < rate {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(hi)
    }

    /// Minimum bandwidth that lets this member meet deadline `t` at f_max.
    fn min_bandwidth(&self, t: f64, z: f64) -> Option<f64> {
        let t_com_budget = t - self.cycles / self.f_max;
        if t_com_budget <= 0.0 {
            return None;
        }
        self.bandwidth_for_rate(z / t_com_budget)
    }

    /// Energy at bandwidth b under deadline t, with the forced frequency.
    /// Returns None when the deadline cannot be met.
    fn energy(&self, b: f64, t: f64, z: f64) -> Option<(f64, f64)> {
        let t_com = z / self.rate(b);
        let rem = t - t_com;
        if rem * self.f_max < self.cycles * (1.0 - 1e-12) {
            return None;
        }
        let f = (self.cycles / rem).clamp(F_MIN_HZ, self.f_max);
        Some((self.e_coef * f * f + self.tx_power * t_com, f))
    }
}

/// Golden-section minimum of a unimodal function on [lo, hi].
fn golden_min<F: FnMut(f64) -> f64>(mut lo: f64, mut hi: f64, iters: usize, mut f: F) -> f64 {
    let mut x1 = hi - GOLDEN * (hi - lo);
    let mut x2 = lo + GOLDEN * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..iters {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - GOLDEN * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + GOLDEN * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

struct Solver<'a> {
    members: Vec<Member>,
    bandwidth: f64,
    z: f64,
    lambda: f64,
    q: f64,
    /// Iteration counts scaled from the requested tolerance.
    outer_iters: usize,
    price_iters: usize,
    device_iters: usize,
    /// Relative width at which the feasibility bracket stops shrinking.
    bracket_tol: f64,
    req: &'a AllocRequest<'a>,
}

impl<'a> Solver<'a> {
    /// Bandwidth split for deadline t: price bisection on the coupling
    /// constraint. Returns (total energy, per-member bandwidth, frequency).
    fn split(&self, t: f64) -> Option<(f64, Vec<f64>, Vec<f64>)> {
        let mut lbs = Vec::with_capacity(self.members.len());
        for m in &self.members {
            let lb = m.min_bandwidth(t, self.z)? * (1.0 + 1e-12);
            lbs.push(lb);
        }
        let total_lb: f64 = lbs.iter().sum();
        if total_lb > self.bandwidth {
            return None;
        }

        let n = self.members.len();
        let alloc: Vec<f64> = if n == 1 {
            vec![self.bandwidth]
        } else {
            // b_n(mu) = argmin E_n(b) + mu*b on [lb_n, B]; sum decreases in mu.
            let best_b = |mu: f64| -> Vec<f64> {
                self.members
                    .iter()
                    .zip(&lbs)
                    .map(|(m, &lb)| {
                        golden_min(lb, self.bandwidth, self.device_iters, |b| {
                            match m.energy(b, t, self.z) {
                                Some((e, _)) => e + mu * b,
                                None => f64::INFINITY,
                            }
                        })
                    })
                    .collect()
            };
            let mut mu_hi = 1e-18;
            let mut guard = 0;
            while best_b(mu_hi).iter().sum::<f64>() > self.bandwidth {
                mu_hi *= 4.0;
                guard += 1;
                if guard > 120 {
                    break;
                }
            }
            let mut mu_lo = 0.0;
            for _ in 0..self.price_iters {
                let mid = 0.5 * (mu_lo + mu_hi);
                if best_b(mid).iter().sum::<f64>() > self.bandwidth {
                    mu_lo = mid;
                } else {
                    mu_hi = mid;
                }
            }
            let mut b = best_b(mu_hi);
            let total: f64 = b.iter().sum();
            if total < self.bandwidth && total > 0.0 {
                // hand the slack back pro-rata; energy never increases in b
                let scale = self.bandwidth / total;
                for x in b.iter_mut() {
                    *x *= scale;
                }
            }
            b
        };

        let mut e_sum = 0.0;
        let mut freqs = Vec::with_capacity(n);
        for (m, &b) in self.members.iter().zip(&alloc) {
            let (e, f) = m.energy(b, t, self.z)?;
            e_sum += e;
            freqs.push(f);
        }
        Some((e_sum, alloc, freqs))
    }

    fn objective_terms(&self, t: f64) -> f64 {
        match self.split(t) {
            Some((e, _, _)) => self.q * e + self.lambda * self.q * t,
            None => f64::INFINITY,
        }
    }

    fn solve(&self) -> Result<AllocResult> {
        let n = self.members.len();
        // Coarse feasibility bracket on t.
        let t_floor = self
            .members
            .iter()
            .map(|m| m.cycles / m.f_max)
            .fold(0.0f64, f64::max);
        let equal_share = self.bandwidth / n as f64;
        let mut t_hi = self
            .members
            .iter()
            .map(|m| m.cycles / F_MIN_HZ + self.z / m.rate(equal_share))
            .fold(0.0f64, f64::max);
        let mut guard = 0;
        while self.split(t_hi).is_none() {
            t_hi *= 2.0;
            guard += 1;
            if guard > 60 {
                return Err(Error::Infeasible(format!(
                    "edge {}: no finite-time feasible point",
                    self.req.edge.id
                )));
            }
        }
        // Smallest feasible deadline by bisection, to the requested
        // relative width.
        let mut lo = t_floor;
        let mut hi = t_hi;
        for _ in 0..60 {
            if hi - lo <= self.bracket_tol * hi {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if self.split(mid).is_none() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t_lo = hi;

        let t_star = golden_min(t_lo, t_hi, self.outer_iters, |t| self.objective_terms(t));
        let (_, bands, freqs) = self
            .split(t_star)
            .or_else(|| self.split(t_hi))
            .ok_or_else(|| {
                Error::Infeasible(format!("edge {}: deadline search collapsed", self.req.edge.id))
            })?;

        let mut allocation = Allocation::default();
        for (m, (&b, &f)) in self.members.iter().zip(bands.iter().zip(freqs.iter())) {
            allocation.bandwidth.insert(m.id, b);
            allocation.frequency.insert(m.id, f);
        }

        // Report the objective through the cost formulas so it is consistent
        // with round_report to floating precision.
        let params = self.req.params;
        let mut t_max = 0.0f64;
        let mut e_sum = 0.0;
        for ((dev, gain), m) in self.req.members.iter().zip(&self.members) {
            let b = allocation.bandwidth_of(m.id)?;
            let f = allocation.frequency_of(m.id)?;
            let t_cmp = compute_time(dev, f, params.local_iters)?;
            let e_cmp = compute_energy(dev, f, params.local_iters, params.alpha);
            let rate = tx_rate(b, *gain, dev.tx_power, params.noise_psd)?;
            let t_com = params.model_size / rate;
            t_max = t_max.max(t_cmp + t_com);
            e_sum += e_cmp + dev.tx_power * t_com;
        }
        let t_edge = self.q * t_max + self.req.cloud_time;
        let e_edge = self.q * e_sum + self.req.cloud_energy;
        let objective = e_edge + self.lambda * t_edge;

        Ok(AllocResult {
            allocation,
            objective,
            iterations: self.outer_iters,
            converged: objective.is_finite(),
        })
    }
}

fn iters_for(tol: f64, floor: usize, cap: usize) -> usize {
    let n = (tol.max(1e-12).ln() / GOLDEN.ln()).ceil() as usize;
    n.clamp(floor, cap)
}

/// Solve the resource-allocation problem for one edge.
pub fn solve_edge(req: &AllocRequest<'_>) -> Result<AllocResult> {
    if req.members.is_empty() {
        return Err(Error::Contract("solve_edge requires a non-empty member set".into()));
    }
    if req.tolerance <= 0.0 {
        return Err(Error::Config(format!(
            "tolerance must be > 0, got {}",
            req.tolerance
        )));
    }
    let params = req.params;
    let mut members = Vec::with_capacity(req.members.len());
    for (dev, gain) in &req.members {
        if *gain <= 0.0 || dev.tx_power <= 0.0 {
            return Err(Error::InfeasibleLink(format!(
                "device {}: zero uplink capacity",
                dev.id
            )));
        }
        let lud = params.local_iters as f64 * dev.cycles_per_sample * dev.num_samples as f64;
        members.push(Member {
            id: dev.id,
            cycles: lud,
            e_coef: 0.5 * params.alpha * lud,
            y: gain * dev.tx_power / params.noise_psd,
            tx_power: dev.tx_power,
            f_max: dev.f_max,
        });
    }

    let tol = req.tolerance;
    let solver = Solver {
        members,
        bandwidth: req.edge.bandwidth,
        z: params.model_size,
        lambda: params.lambda,
        q: params.edge_iters as f64,
        outer_iters: iters_for(tol * 0.2, 12, 64),
        price_iters: iters_for(tol * 0.2, 14, 64),
        device_iters: iters_for(tol * 0.5, 10, 48),
        bracket_tol: (tol * 0.1).clamp(1e-12, 1e-2),
        req,
    };
    solver.solve()
}

/// Run [`solve_edge`] independently for every non-empty edge of `pattern`,
/// merge the allocations in edge-id order, and assemble the round report.
pub fn allocate_all(
    pattern: &AssignmentPattern,
    topology: &Topology,
    params: &CostParams,
    tolerance: f64,
) -> Result<(Allocation, CostReport)> {
    let mut allocation = Allocation::default();
    for (&m, group) in &pattern.groups {
        if group.is_empty() {
            continue;
        }
        let edge = topology.edge(m);
        let members: Vec<(&Device, f64)> = group
            .iter()
            .map(|&n| Ok((topology.device(n), topology.channel.gain(n, m)?)))
            .collect::<Result<_>>()?;
        let (cloud_time, cloud_energy) = cloud_cost(edge, params, &topology.channel)?;
        let req = AllocRequest {
            edge,
            members,
            params,
            tolerance,
            cloud_time,
            cloud_energy,
        };
        let result = solve_edge(&req)
            .map_err(|e| Error::Infeasible(format!("edge {m}: {e}")))?;
        allocation.merge(result.allocation);
    }
    let report = round_report(pattern, &allocation, topology, params)?;
    Ok((allocation, report))
}
