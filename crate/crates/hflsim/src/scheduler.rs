//! Device clustering and per-round scheduling policies.
//!
//! Devices are clustered by the weights of a small auxiliary model each
//! trains locally: devices with similar data land in the same cluster. Three
//! policies pick the round's participants — uniform random, VKC (h fresh
//! random picks per cluster each round), and IKC (per-cluster rotation with a
//! record set so every member is visited before any repeats).

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{Device, Topology};

/// A partition of the device set into K clusters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterSet {
    /// Sorted device ids per cluster.
    pub clusters: Vec<Vec<usize>>,
    /// device id -> cluster index.
    pub labels: BTreeMap<usize, usize>,
}

impl ClusterSet {
    pub fn from_labels(labels: BTreeMap<usize, usize>, k: usize) -> ClusterSet {
        let mut clusters = vec![Vec::new(); k];
        for (&dev, &c) in &labels {
            clusters[c].push(dev);
        }
        ClusterSet { clusters, labels }
    }

    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_devices(&self) -> usize {
        self.labels.len()
    }
}

/// Scheduling policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Random,
    Vkc,
    Ikc,
}

impl std::str::FromStr for Policy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Policy> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(Policy::Random),
            "vkc" => Ok(Policy::Vkc),
            "ikc" => Ok(Policy::Ikc),
            other => Err(Error::Config(format!("unknown scheduling policy '{other}'"))),
        }
    }
}

/// Mutable per-experiment scheduler state.
#[derive(Debug, Clone)]
pub struct SchedulerState {
    pub policy: Policy,
    /// Devices per cluster per round.
    pub h: usize,
    pub k: usize,
    /// Working copies C_k (IKC removes scheduled devices from these).
    working: Vec<Vec<usize>>,
    /// Record sets G_k of devices scheduled since the last rotation reset.
    record: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

/// One round's participant set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schedule {
    pub round: usize,
    /// Sorted scheduled device ids.
    pub members: Vec<usize>,
}

impl SchedulerState {
    pub fn new(policy: Policy, clusters: &ClusterSet, h: usize, seed: u64) -> Result<SchedulerState> {
        if h == 0 {
            return Err(Error::Config("h must be at least 1".into()));
        }
        let k = clusters.k();
        if h * k > clusters.n_devices() {
            return Err(Error::Config(format!(
                "h*K = {} exceeds device count {}",
                h * k,
                clusters.n_devices()
            )));
        }
        Ok(SchedulerState {
            policy,
            h,
            k,
            working: clusters.clusters.clone(),
            record: vec![Vec::new(); k],
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn target_size(&self) -> usize {
        self.h * self.k
    }
}

/// Draw `count` distinct elements from `pool` without replacement
/// (partial Fisher–Yates on a scratch copy; `pool` order is preserved).
fn sample_without_replacement(pool: &[usize], count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut scratch: Vec<usize> = pool.to_vec();
    let count = count.min(scratch.len());
    for i in 0..count {
        let j = rng.gen_range(i..scratch.len());
        scratch.swap(i, j);
    }
    scratch.truncate(count);
    scratch
}

/// Select the round's participants under the state's policy.
pub fn schedule_round(
    state: &mut SchedulerState,
    clusters: &ClusterSet,
    all_devices: &[usize],
    round: usize,
) -> Schedule {
    let target = state.target_size().min(all_devices.len());
    let mut members: BTreeSet<usize> = BTreeSet::new();
    match state.policy {
        Policy::Random => {
            members.extend(sample_without_replacement(all_devices, target, &mut state.rng));
        }
        Policy::Vkc => {
            for ck in &clusters.clusters {
                members.extend(sample_without_replacement(ck, state.h, &mut state.rng));
            }
        }
        Policy::Ikc => {
            for k in 0..state.k {
                let picks = ikc_cluster_picks(state, k);
                members.extend(picks);
            }
        }
    }
    // global top-up: cover any per-cluster shortfall with random unscheduled
    // devices so |H_i| = K·h whenever enough devices exist
    if members.len() < target {
        let remaining: Vec<usize> = all_devices
            .iter()
            .copied()
            .filter(|d| !members.contains(d))
            .collect();
        members.extend(sample_without_replacement(
            &remaining,
            target - members.len(),
            &mut state.rng,
        ));
    }
    Schedule {
        round,
        members: members.into_iter().collect(),
    }
}

/// One cluster's IKC picks, mutating the working set C_k and record G_k.
fn ikc_cluster_picks(state: &mut SchedulerState, k: usize) -> Vec<usize> {
    let h = state.h;
    let c_len = state.working[k].len();
    let g_len = state.record[k].len();
    if c_len >= h {
        // transfer h devices from C_k to both the schedule and G_k
        let picks = sample_without_replacement(&state.working[k], h, &mut state.rng);
        state.working[k].retain(|d| !picks.contains(d));
        state.record[k].extend(picks.iter().copied());
        state.record[k].sort_unstable();
        picks
    } else if c_len + g_len >= h {
        // rotation boundary: exhaust C_k, top up from G_k, return the
        // remainder of G_k to C_k, and restart the record with this round
        let mut picks = std::mem::take(&mut state.working[k]);
        let reused = sample_without_replacement(&state.record[k], h - picks.len(), &mut state.rng);
        let leftover: Vec<usize> = state.record[k]
            .iter()
            .copied()
            .filter(|d| !reused.contains(d))
            .collect();
        picks.extend(reused);
        state.working[k] = leftover;
        state.working[k].sort_unstable();
        let mut new_record = picks.clone();
        new_record.sort_unstable();
        state.record[k] = new_record;
        picks
    } else {
        // cluster smaller than h: schedule everyone, no bookkeeping needed
        state.working[k].clone()
    }
}

/// Train the auxiliary model on every device and cluster the resulting weight
/// vectors with k-means (k-means++ init, Euclidean distance, seeded).
pub fn cluster_devices<F>(
    topology: &Topology,
    trainer: F,
    k: usize,
    seed: u64,
) -> Result<ClusterSet>
where
    F: Fn(&Device) -> Vec<f64> + Sync,
{
    let n = topology.devices.len();
    if k == 0 {
        return Err(Error::Config("cluster count must be at least 1".into()));
    }
    if k > n {
        return Err(Error::Config(format!("K = {k} exceeds device count {n}")));
    }
    let weights: Vec<Vec<f64>> = topology.devices.par_iter().map(&trainer).collect();
    let dim = weights.first().map(|w| w.len()).unwrap_or(0);
    if weights.iter().any(|w| w.len() != dim || w.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical(
            "auxiliary-model weight vectors are ragged or non-finite".into(),
        ));
    }
    let assignment = kmeans(&weights, k, seed);
    let labels: BTreeMap<usize, usize> = topology
        .devices
        .iter()
        .zip(&assignment)
        .map(|(d, &c)| (d.id, c))
        .collect();
    Ok(ClusterSet::from_labels(labels, k))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// From-scratch k-means: k-means++ seeding, Lloyd iterations until the total
/// centroid shift drops below 1e-6 or 300 iterations.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    assert!(k >= 1 && k <= n, "kmeans requires 1 <= k <= n");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ initialization
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all remaining points coincide with a centroid; pick any
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.last().unwrap()));
        }
    }

    let dim = points[0].len();
    let mut labels = vec![0usize; n];
    for _ in 0..300 {
        // assignment step
        for (i, p) in points.iter().enumerate() {
            let mut best = (0usize, f64::INFINITY);
            for (c, cent) in centroids.iter().enumerate() {
                let d = sq_dist(p, cent);
                if d < best.1 {
                    best = (c, d);
                }
            }
            labels[i] = best.0;
        }
        // update step
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed an empty cluster at the point farthest from its centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centroids[labels[a]])
                            .partial_cmp(&sq_dist(&points[b], &centroids[labels[b]]))
                            .unwrap()
                    })
                    .unwrap();
                shift += sq_dist(&centroids[c], &points[far]).sqrt();
                centroids[c] = points[far].clone();
                labels[far] = c;
                continue;
            }
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift += sq_dist(&centroids[c], &new).sqrt();
            centroids[c] = new;
        }
        if shift < 1e-6 {
            break;
        }
    }
    labels
}

/// Adjusted Rand index between two labelings of the same device set, via pair
/// counts: sigma_11 pairs co-clustered in both, sigma_10 only in truth,
/// sigma_01 only in predicted, sigma_00 in neither.
pub fn adjusted_rand_index(
    predicted: &BTreeMap<usize, usize>,
    truth: &BTreeMap<usize, usize>,
) -> Result<f64> {
    if predicted.len() != truth.len() || predicted.keys().any(|k| !truth.contains_key(k)) {
        return Err(Error::Contract(
            "clusterings cover different device sets".into(),
        ));
    }
    let ids: Vec<usize> = predicted.keys().copied().collect();
    let (mut s11, mut s10, mut s01, mut s00) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            let same_t = truth[&ids[i]] == truth[&ids[j]];
            let same_p = predicted[&ids[i]] == predicted[&ids[j]];
            match (same_t, same_p) {
                (true, true) => s11 += 1,
                (true, false) => s10 += 1,
                (false, true) => s01 += 1,
                (false, false) => s00 += 1,
            }
        }
    }
    let (s11, s10, s01, s00) = (s11 as f64, s10 as f64, s01 as f64, s00 as f64);
    let denom = (s00 + s01) * (s01 + s11) + (s00 + s10) * (s10 + s11);
    if denom == 0.0 {
        // degenerate partitions (all pairs agree trivially)
        return Ok(1.0);
    }
    Ok(2.0 * (s00 * s11 - s01 * s10) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{generate_topology, ParamRanges};

    fn labels_of(pairs: &[(usize, usize)]) -> BTreeMap<usize, usize> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn ari_identical_is_one() {
        let a = labels_of(&[(1, 0), (2, 0), (3, 1), (4, 1)]);
        assert_eq!(adjusted_rand_index(&a, &a).unwrap(), 1.0);
        // relabeled but identical partition
        let b = labels_of(&[(1, 7), (2, 7), (3, 2), (4, 2)]);
        assert_eq!(adjusted_rand_index(&b, &a).unwrap(), 1.0);
    }

    #[test]
    fn ari_hand_traced_cross_pairing() {
        // truth {1,2},{3,4}; predicted {1,3},{2,4}
        // pairs: (1,2) T only; (3,4) T only; (1,3) P only; (2,4) P only;
        // (1,4) neither; (2,3) neither -> s11=0 s10=2 s01=2 s00=2 -> -0.5
        let truth = labels_of(&[(1, 0), (2, 0), (3, 1), (4, 1)]);
        let pred = labels_of(&[(1, 0), (3, 0), (2, 1), (4, 1)]);
        assert_eq!(adjusted_rand_index(&pred, &truth).unwrap(), -0.5);
    }

    #[test]
    fn ari_all_in_one_vs_two_clusters() {
        // truth {1,2},{3,4}; predicted all-in-one
        // s11 = 2 (pairs (1,2),(3,4)); s01 = 4; s10 = 0; s00 = 0
        // ARI = 2(0*2 - 4*0) / [(0+4)(4+2) + (0+0)(0+2)] = 0
        let truth = labels_of(&[(1, 0), (2, 0), (3, 1), (4, 1)]);
        let pred = labels_of(&[(1, 0), (2, 0), (3, 0), (4, 0)]);
        assert_eq!(adjusted_rand_index(&pred, &truth).unwrap(), 0.0);
    }

    #[test]
    fn ari_rejects_mismatched_sets() {
        let a = labels_of(&[(1, 0), (2, 0)]);
        let b = labels_of(&[(1, 0), (3, 0)]);
        assert!(adjusted_rand_index(&a, &b).is_err());
    }

    #[test]
    fn kmeans_separable_blobs() {
        // three tight blobs far apart must be recovered exactly
        let mut points = Vec::new();
        for (cx, cy) in [(0.0, 0.0), (50.0, 0.0), (0.0, 50.0)] {
            for i in 0..10 {
                points.push(vec![cx + (i as f64) * 0.01, cy - (i as f64) * 0.01]);
            }
        }
        let labels = kmeans(&points, 3, 42);
        for blob in 0..3 {
            let first = labels[blob * 10];
            assert!(labels[blob * 10..(blob + 1) * 10].iter().all(|&l| l == first));
        }
        let distinct: BTreeSet<usize> = labels.iter().copied().collect();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn kmeans_k_equals_n_singletons() {
        let points: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 10.0]).collect();
        let labels = kmeans(&points, 5, 0);
        let distinct: BTreeSet<usize> = labels.iter().copied().collect();
        assert_eq!(distinct.len(), 5);
    }

    #[test]
    fn cluster_devices_on_weight_signal() {
        // trainer returns a vector keyed by device id parity: two clusters
        let topo = generate_topology(10, 2, 1.0, 3, &ParamRanges::default()).unwrap();
        let clusters = cluster_devices(
            &topo,
            |d: &Device| vec![(d.id % 2) as f64 * 10.0, 1.0],
            2,
            7,
        )
        .unwrap();
        let truth: BTreeMap<usize, usize> = (0..10).map(|d| (d, d % 2)).collect();
        assert_eq!(adjusted_rand_index(&clusters.labels, &truth).unwrap(), 1.0);
        // K=1 -> everything in one cluster
        let single = cluster_devices(&topo, |_d: &Device| vec![1.0], 1, 0).unwrap();
        assert_eq!(single.clusters[0].len(), 10);
        // K > N rejected
        assert!(cluster_devices(&topo, |_d: &Device| vec![1.0], 11, 0).is_err());
    }

    fn uniform_clusters(n: usize, k: usize) -> ClusterSet {
        let labels: BTreeMap<usize, usize> = (0..n).map(|d| (d, d % k)).collect();
        ClusterSet::from_labels(labels, k)
    }

    #[test]
    fn schedule_sizes_and_determinism() {
        let n = 20;
        let clusters = uniform_clusters(n, 4);
        let all: Vec<usize> = (0..n).collect();
        for policy in [Policy::Random, Policy::Vkc, Policy::Ikc] {
            let mut s1 = SchedulerState::new(policy, &clusters, 2, 99).unwrap();
            let mut s2 = SchedulerState::new(policy, &clusters, 2, 99).unwrap();
            for r in 0..12 {
                let a = schedule_round(&mut s1, &clusters, &all, r);
                let b = schedule_round(&mut s2, &clusters, &all, r);
                assert_eq!(a.members, b.members, "policy {policy:?} not deterministic");
                assert_eq!(a.members.len(), 8, "|H_i| must equal K*h");
                let distinct: BTreeSet<usize> = a.members.iter().copied().collect();
                assert_eq!(distinct.len(), 8);
            }
        }
    }

    #[test]
    fn random_full_participation() {
        let clusters = uniform_clusters(6, 3);
        let all: Vec<usize> = (0..6).collect();
        let mut st = SchedulerState::new(Policy::Random, &clusters, 2, 1).unwrap();
        let sched = schedule_round(&mut st, &clusters, &all, 0);
        assert_eq!(sched.members, all);
    }

    #[test]
    fn vkc_balance_and_small_cluster_topup() {
        // balanced case: exactly h from each cluster
        let clusters = uniform_clusters(20, 4);
        let all: Vec<usize> = (0..20).collect();
        let mut st = SchedulerState::new(Policy::Vkc, &clusters, 2, 5).unwrap();
        for r in 0..10 {
            let sched = schedule_round(&mut st, &clusters, &all, r);
            for (c, ck) in clusters.clusters.iter().enumerate() {
                let from_c = sched.members.iter().filter(|d| ck.contains(d)).count();
                assert_eq!(from_c, 2, "round {r} cluster {c}");
            }
        }
        // skewed case: cluster 1 = {9} only; top-up keeps |H_i| = K*h
        let mut labels: BTreeMap<usize, usize> = (0..9).map(|d| (d, 0)).collect();
        labels.insert(9, 1);
        let skew = ClusterSet::from_labels(labels, 2);
        let all10: Vec<usize> = (0..10).collect();
        let mut st = SchedulerState::new(Policy::Vkc, &skew, 2, 5).unwrap();
        let sched = schedule_round(&mut st, &skew, &all10, 0);
        assert_eq!(sched.members.len(), 4);
        assert!(sched.members.contains(&9), "lone cluster member always scheduled");
    }

    #[test]
    fn ikc_hand_trace_rotation() {
        // single cluster {0..4}, h=2: rounds 1-2 pick 4 distinct fresh
        // devices; round 3 picks the last fresh device plus one recorded one
        let clusters = uniform_clusters(5, 1);
        let all: Vec<usize> = (0..5).collect();
        let mut st = SchedulerState::new(Policy::Ikc, &clusters, 2, 17).unwrap();
        let r1 = schedule_round(&mut st, &clusters, &all, 0);
        let r2 = schedule_round(&mut st, &clusters, &all, 1);
        assert_eq!(r1.members.len(), 2);
        assert_eq!(r2.members.len(), 2);
        assert!(r1.members.iter().all(|d| !r2.members.contains(d)));
        let r3 = schedule_round(&mut st, &clusters, &all, 2);
        let seen: BTreeSet<usize> = r1.members.iter().chain(&r2.members).copied().collect();
        let fresh: Vec<usize> = all.iter().copied().filter(|d| !seen.contains(d)).collect();
        assert_eq!(fresh.len(), 1);
        assert!(r3.members.contains(&fresh[0]), "last fresh device must appear");
        let reused: Vec<usize> = r3
            .members
            .iter()
            .copied()
            .filter(|d| seen.contains(d))
            .collect();
        assert_eq!(reused.len(), 1, "exactly one recorded device reused");
        // the three unused recorded devices are back in the working set:
        // rounds 4-5 must cover exactly those three plus one from round 3
        let r4 = schedule_round(&mut st, &clusters, &all, 3);
        let r5 = schedule_round(&mut st, &clusters, &all, 4);
        let returned: BTreeSet<usize> = seen
            .iter()
            .copied()
            .filter(|d| !r3.members.contains(d))
            .collect();
        let next_two: BTreeSet<usize> = r4.members.iter().chain(&r5.members).copied().collect();
        assert!(returned.iter().all(|d| next_two.contains(d)),
            "returned devices {returned:?} must be rescheduled in rounds 4-5, got {next_two:?}");
    }

    #[test]
    fn ikc_freshness() {
        // (a) no device receives its second scheduling before every cluster
        //     peer has received its first (inclusive of the repeat round);
        // (b) every window of 3*ceil(|C_k|/h) consecutive rounds schedules
        //     every device at least once (rotation discipline bounds gaps)
        let n = 15;
        let clusters = uniform_clusters(n, 3);
        let all: Vec<usize> = (0..n).collect();
        for seed in [23u64, 97, 1234] {
            let mut st = SchedulerState::new(Policy::Ikc, &clusters, 2, seed).unwrap();
            let rounds = 5 * 3; // >= 5 * ceil(|C_k| / h)
            let history: Vec<Vec<usize>> = (0..rounds)
                .map(|r| schedule_round(&mut st, &clusters, &all, r).members)
                .collect();
            for d in 0..n {
                let hits: Vec<usize> = history
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| m.contains(&d))
                    .map(|(r, _)| r)
                    .collect();
                let cluster = &clusters.clusters[d % 3];
                if let Some(&second) = hits.get(1) {
                    for &other in cluster {
                        let covered = (0..=second).any(|r| history[r].contains(&other));
                        assert!(
                            covered,
                            "seed {seed}: {d} repeated at round {second} before peer {other} ran once"
                        );
                    }
                }
                let window = 3 * 3; // 3 * ceil(5/2)
                for start in 0..=rounds - window {
                    let seen = (start..start + window).any(|r| history[r].contains(&d));
                    assert!(seen, "seed {seed}: device {d} starved in window starting {start}");
                }
            }
        }
    }

    #[test]
    fn ikc_tiny_cluster_always_scheduled() {
        // cluster of size 1 < h: its device is scheduled every round
        let mut labels: BTreeMap<usize, usize> = (0..7).map(|d| (d, 0)).collect();
        labels.insert(7, 1);
        let clusters = ClusterSet::from_labels(labels, 2);
        let all: Vec<usize> = (0..8).collect();
        let mut st = SchedulerState::new(Policy::Ikc, &clusters, 2, 4).unwrap();
        for r in 0..8 {
            let sched = schedule_round(&mut st, &clusters, &all, r);
            assert!(sched.members.contains(&7));
            assert_eq!(sched.members.len(), 4);
        }
    }

    #[test]
    fn state_rejects_oversubscription() {
        let clusters = uniform_clusters(5, 2);
        assert!(SchedulerState::new(Policy::Vkc, &clusters, 3, 0).is_err());
        assert!(SchedulerState::new(Policy::Vkc, &clusters, 0, 0).is_err());
    }
}
