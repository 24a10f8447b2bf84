//! Physical deployment: devices, edge servers, cloud, and frozen channel gains.
//!
//! Positions are sampled uniformly in a square, the cloud sits at the center,
//! and every link gets a single shadow-fading draw that stays fixed for the
//! lifetime of the run. Gains are linear power gains derived from the
//! `128.1 + 37.6 log10(d_km)` path-loss model with 8 dB log-normal shadowing.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Convert a dBm figure to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Linear power gain of a link at `distance_km` with a fixed shadowing draw in dB.
pub fn path_loss_gain(distance_km: f64, shadow_db: f64) -> Result<f64> {
    if distance_km <= 0.0 {
        return Err(Error::Domain(format!(
            "path loss requires distance > 0, got {distance_km} km"
        )));
    }
    let loss_db = 128.1 + 37.6 * distance_km.log10() + shadow_db;
    Ok(10f64.powf(-loss_db / 10.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn distance(&self, other: &Position) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Device {
    pub id: usize,
    pub position: Position,
    /// CPU cycles needed to process one sample (u_n).
    pub cycles_per_sample: f64,
    /// Number of local samples (D_n).
    pub num_samples: u64,
    /// Transmit power in watts (p_n).
    pub tx_power: f64,
    /// Maximum CPU frequency in Hz (f_n^max).
    pub f_max: f64,
    /// Reference into the data module.
    pub dataset_id: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeServer {
    pub id: usize,
    pub position: Position,
    /// Total bandwidth in Hz (B_m).
    pub bandwidth: f64,
    /// Transmit power toward the cloud in watts (p^m).
    pub tx_power: f64,
}

mod pair_map {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    // JSON objects need string keys, so the (device, edge) map round-trips
    // through a list of (device, edge, gain) entries.
    pub fn serialize<S: Serializer>(
        map: &BTreeMap<(usize, usize), f64>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let entries: Vec<(usize, usize, f64)> =
            map.iter().map(|(&(d, e), &g)| (d, e, g)).collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<(usize, usize), f64>, D::Error> {
        let entries = Vec::<(usize, usize, f64)>::deserialize(d)?;
        Ok(entries.into_iter().map(|(a, b, g)| ((a, b), g)).collect())
    }
}

/// Frozen mean channel gains for every device-edge and edge-cloud link.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ChannelTable {
    /// (device id, edge id) -> linear power gain.
    #[serde(with = "pair_map")]
    pub device_edge_gain: BTreeMap<(usize, usize), f64>,
    /// edge id -> linear power gain to the cloud.
    pub edge_cloud_gain: BTreeMap<usize, f64>,
}

impl ChannelTable {
    pub fn gain(&self, device: usize, edge: usize) -> Result<f64> {
        self.device_edge_gain
            .get(&(device, edge))
            .copied()
            .ok_or_else(|| Error::Contract(format!("no gain for device {device} / edge {edge}")))
    }

    pub fn cloud_gain(&self, edge: usize) -> Result<f64> {
        self.edge_cloud_gain
            .get(&edge)
            .copied()
            .ok_or_else(|| Error::Contract(format!("no cloud gain for edge {edge}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Topology {
    pub devices: Vec<Device>,
    pub edges: Vec<EdgeServer>,
    pub cloud_position: Position,
    pub channel: ChannelTable,
    pub side_length: f64,
}

impl Topology {
    pub fn device(&self, id: usize) -> &Device {
        &self.devices[id]
    }

    pub fn edge(&self, id: usize) -> &EdgeServer {
        &self.edges[id]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Topology> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Uniform sampling bounds for per-device and per-edge parameters.
///
/// Defaults follow the reference parameter table: u_n in [1,10]x10^4
/// cycles/sample, D_n in [400,700] samples, p_n in [0,23] dBm, f_max 2 GHz,
/// B_m in [0.5,3] MHz, edge uplink power 23 dBm.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ParamRanges {
    pub cycles_per_sample: (f64, f64),
    pub num_samples: (u64, u64),
    pub tx_power_dbm: (f64, f64),
    pub f_max: (f64, f64),
    pub edge_bandwidth: (f64, f64),
    pub edge_tx_power_dbm: f64,
    /// Standard deviation of log-normal shadow fading, in dB.
    pub shadow_std_db: f64,
}

impl Default for ParamRanges {
    fn default() -> Self {
        ParamRanges {
            cycles_per_sample: (1e4, 1e5),
            num_samples: (400, 700),
            tx_power_dbm: (0.0, 23.0),
            f_max: (2e9, 2e9),
            edge_bandwidth: (0.5e6, 3e6),
            edge_tx_power_dbm: 23.0,
            shadow_std_db: 8.0,
        }
    }
}

impl ParamRanges {
    fn validate(&self) -> Result<()> {
        let check = |name: &str, lo: f64, hi: f64| {
            if lo > hi {
                Err(Error::Config(format!("range {name}: min {lo} > max {hi}")))
            } else {
                Ok(())
            }
        };
        check(
            "cycles_per_sample",
            self.cycles_per_sample.0,
            self.cycles_per_sample.1,
        )?;
        check(
            "num_samples",
            self.num_samples.0 as f64,
            self.num_samples.1 as f64,
        )?;
        check("tx_power_dbm", self.tx_power_dbm.0, self.tx_power_dbm.1)?;
        check("f_max", self.f_max.0, self.f_max.1)?;
        check(
            "edge_bandwidth",
            self.edge_bandwidth.0,
            self.edge_bandwidth.1,
        )?;
        if self.shadow_std_db < 0.0 {
            return Err(Error::Config("shadow_std_db must be >= 0".into()));
        }
        Ok(())
    }
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// One zero-mean normal draw via Box-Muller.
fn normal_draw(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
}

/// Minimum link distance in km; co-located nodes are pushed to one meter so
/// the path-loss formula stays finite.
const MIN_LINK_KM: f64 = 1e-3;

/// Generate a deployment of `n_devices` devices and `n_edges` edge servers
/// uniformly placed in a `side` x `side` square, with the cloud at the center.
pub fn generate_topology(
    n_devices: usize,
    n_edges: usize,
    side: f64,
    seed: u64,
    ranges: &ParamRanges,
) -> Result<Topology> {
    if n_devices == 0 || n_edges == 0 || n_devices < n_edges {
        return Err(Error::Config(format!(
            "need n_devices >= n_edges >= 1, got {n_devices}/{n_edges}"
        )));
    }
    if side <= 0.0 {
        return Err(Error::Config(format!("side must be > 0, got {side}")));
    }
    ranges.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = Position {
        x: side / 2.0,
        y: side / 2.0,
    };

    let devices: Vec<Device> = (0..n_devices)
        .map(|id| Device {
            id,
            position: Position {
                x: rng.gen_range(0.0..side),
                y: rng.gen_range(0.0..side),
            },
            cycles_per_sample: sample_range(&mut rng, ranges.cycles_per_sample),
            num_samples: if ranges.num_samples.0 == ranges.num_samples.1 {
                ranges.num_samples.0
            } else {
                rng.gen_range(ranges.num_samples.0..=ranges.num_samples.1)
            },
            tx_power: dbm_to_watts(sample_range(&mut rng, ranges.tx_power_dbm)),
            f_max: sample_range(&mut rng, ranges.f_max),
            dataset_id: id,
        })
        .collect();

    let edges: Vec<EdgeServer> = (0..n_edges)
        .map(|id| EdgeServer {
            id,
            position: Position {
                x: rng.gen_range(0.0..side),
                y: rng.gen_range(0.0..side),
            },
            bandwidth: sample_range(&mut rng, ranges.edge_bandwidth),
            tx_power: dbm_to_watts(ranges.edge_tx_power_dbm),
        })
        .collect();

    let mut channel = ChannelTable::default();
    for d in &devices {
        for e in &edges {
            let dist_km = (d.position.distance(&e.position) / 1000.0).max(MIN_LINK_KM);
            let shadow = normal_draw(&mut rng, ranges.shadow_std_db);
            channel
                .device_edge_gain
                .insert((d.id, e.id), path_loss_gain(dist_km, shadow)?);
        }
    }
    for e in &edges {
        let dist_km = (e.position.distance(&cloud) / 1000.0).max(MIN_LINK_KM);
        let shadow = normal_draw(&mut rng, ranges.shadow_std_db);
        channel
            .edge_cloud_gain
            .insert(e.id, path_loss_gain(dist_km, shadow)?);
    }

    Ok(Topology {
        devices,
        edges,
        cloud_position: cloud,
        channel,
        side_length: side,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_loss_hand_values() {
        // d = 1 km, no shadowing: 10^(-12.81)
        let g = path_loss_gain(1.0, 0.0).unwrap();
        assert!((g - 10f64.powf(-12.81)).abs() / g < 1e-12);
        // d = 0.1 km: 10^(-(128.1 - 37.6)/10) = 10^(-9.05)
        let g = path_loss_gain(0.1, 0.0).unwrap();
        assert!((g - 10f64.powf(-9.05)).abs() / g < 1e-12);
    }

    #[test]
    fn path_loss_monotone_in_distance() {
        let mut prev = f64::INFINITY;
        for i in 1..200 {
            let d = i as f64 * 0.01;
            let g = path_loss_gain(d, 3.0).unwrap();
            assert!(g < prev, "gain must strictly decrease with distance");
            prev = g;
        }
    }

    #[test]
    fn path_loss_rejects_nonpositive_distance() {
        assert!(path_loss_gain(0.0, 0.0).is_err());
        assert!(path_loss_gain(-1.0, 0.0).is_err());
    }

    #[test]
    fn dbm_conversion() {
        assert!((dbm_to_watts(30.0) - 1.0).abs() < 1e-12);
        assert!((dbm_to_watts(0.0) - 1e-3).abs() < 1e-15);
        assert!((dbm_to_watts(23.0) - 0.199526231496888).abs() < 1e-12);
    }

    #[test]
    fn generation_deterministic_and_in_range() {
        let ranges = ParamRanges::default();
        let a = generate_topology(100, 5, 1000.0, 7, &ranges).unwrap();
        let b = generate_topology(100, 5, 1000.0, 7, &ranges).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());

        for d in &a.devices {
            assert!(d.cycles_per_sample >= 1e4 && d.cycles_per_sample <= 1e5);
            assert!(d.num_samples >= 400 && d.num_samples <= 700);
            assert!(d.tx_power >= dbm_to_watts(0.0) && d.tx_power <= dbm_to_watts(23.0));
            assert!(d.position.x >= 0.0 && d.position.x <= 1000.0);
            assert!(d.position.y >= 0.0 && d.position.y <= 1000.0);
            assert!((d.f_max - 2e9).abs() < 1.0);
        }
        for e in &a.edges {
            assert!(e.bandwidth >= 0.5e6 && e.bandwidth <= 3e6);
        }
        assert_eq!(a.channel.device_edge_gain.len(), 100 * 5);
        assert_eq!(a.channel.edge_cloud_gain.len(), 5);
        for g in a.channel.device_edge_gain.values() {
            assert!(*g > 0.0);
        }
    }

    #[test]
    fn singleton_topology() {
        let t = generate_topology(1, 1, 1000.0, 3, &ParamRanges::default()).unwrap();
        assert_eq!(t.devices.len(), 1);
        assert_eq!(t.channel.device_edge_gain.len(), 1);
        assert_eq!(t.channel.edge_cloud_gain.len(), 1);
    }

    #[test]
    fn invalid_range_rejected() {
        let mut ranges = ParamRanges::default();
        ranges.cycles_per_sample = (10.0, 1.0);
        assert!(generate_topology(5, 2, 100.0, 0, &ranges).is_err());
    }

    #[test]
    fn json_round_trip() {
        let t = generate_topology(10, 2, 500.0, 11, &ParamRanges::default()).unwrap();
        let back = Topology::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(t.to_json().unwrap(), back.to_json().unwrap());
    }
}
