//! Surrogate safety metrics over trajectories: time to collision per
//! follower/leader pair, post-encroachment time over conflict zones, and the
//! aggregations used by the sensitivity sweep.
//!
//! All pairing is done at shared sample timestamps: two tracks interact at
//! time t only if both carry a sample with exactly that timestamp (true for
//! simulated data, where every vehicle is sampled on the same clock).

use std::collections::BTreeMap;

use serde::Serialize;

use crate::trajdata::{Track, TrajectoryDataset};

/// Time to collision in seconds: net gap over closing speed. Defined only
/// for a non-negative gap and a follower strictly faster than its leader.
pub fn ttc(dx_net: f64, v_follower: f64, v_leader: f64) -> Option<f64> {
    if dx_net >= 0.0 && v_follower > v_leader {
        Some(dx_net / (v_follower - v_leader))
    } else {
        None
    }
}

/// TTC of one vehicle against its same-lane leader over time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TtcSeries {
    pub id: u64,
    /// (t, ttc) pairs in ascending time order, defined samples only.
    pub samples: Vec<(f64, f64)>,
    pub min_ttc: f64,
    pub mean_ttc: f64,
}

impl TtcSeries {
    fn from_samples(id: u64, samples: Vec<(f64, f64)>) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let min_ttc = samples
            .iter()
            .map(|(_, v)| *v)
            .fold(f64::INFINITY, f64::min);
        let mean_ttc = samples.iter().map(|(_, v)| *v).sum::<f64>() / samples.len() as f64;
        Some(Self {
            id,
            samples,
            min_ttc,
            mean_ttc,
        })
    }
}

/// f64 map key ordered by total_cmp, for grouping samples by timestamp.
#[derive(PartialEq)]
struct TimeKey(f64);

impl Eq for TimeKey {}

impl PartialOrd for TimeKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TimeKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// One vehicle's state at a shared timestamp.
struct Participant {
    lane: u32,
    s: f64,
    v: f64,
    length: f64,
    track_index: usize,
}

fn time_groups(dataset: &TrajectoryDataset) -> BTreeMap<TimeKey, Vec<Participant>> {
    let mut groups: BTreeMap<TimeKey, Vec<Participant>> = BTreeMap::new();
    for (track_index, track) in dataset.tracks.iter().enumerate() {
        for sample in &track.samples {
            groups
                .entry(TimeKey(sample.t))
                .or_default()
                .push(Participant {
                    lane: sample.lane,
                    s: sample.s,
                    v: sample.v,
                    length: track.length_m,
                    track_index,
                });
        }
    }
    groups
}

/// Calls `visit(t, follower, leader)` for every same-lane adjacent pair at
/// every shared timestamp, follower behind leader.
fn for_each_adjacency(
    dataset: &TrajectoryDataset,
    mut visit: impl FnMut(f64, &Participant, &Participant),
) {
    for (time, mut participants) in time_groups(dataset) {
        participants.sort_by(|a, b| a.lane.cmp(&b.lane).then(a.s.total_cmp(&b.s)));
        for pair in participants.windows(2) {
            let (follower, leader) = (&pair[0], &pair[1]);
            if follower.lane == leader.lane {
                visit(time.0, follower, leader);
            }
        }
    }
}

/// Per-vehicle TTC series against the same-lane leader at every timestamp
/// where TTC is defined. Vehicles with no defined sample get no series.
/// Output is ordered by track id.
pub fn ttc_series(dataset: &TrajectoryDataset) -> Vec<TtcSeries> {
    let mut per_track: Vec<Vec<(f64, f64)>> = vec![Vec::new(); dataset.tracks.len()];
    for_each_adjacency(dataset, |t, follower, leader| {
        let gap = leader.s - leader.length - follower.s;
        if let Some(value) = ttc(gap, follower.v, leader.v) {
            per_track[follower.track_index].push((t, value));
        }
    });
    let mut series: Vec<TtcSeries> = per_track
        .into_iter()
        .enumerate()
        .filter_map(|(track_index, samples)| {
            TtcSeries::from_samples(dataset.tracks[track_index].id, samples)
        })
        .collect();
    series.sort_by_key(|s| s.id);
    series
}

/// Minimum TTC per (follower id, leader id) encounter across all shared
/// timestamps, for near-miss tagging.
pub(crate) fn pairwise_min_ttc(dataset: &TrajectoryDataset) -> BTreeMap<(u64, u64), f64> {
    let mut minima: BTreeMap<(u64, u64), f64> = BTreeMap::new();
    for_each_adjacency(dataset, |_, follower, leader| {
        let gap = leader.s - leader.length - follower.s;
        if let Some(value) = ttc(gap, follower.v, leader.v) {
            let key = (
                dataset.tracks[follower.track_index].id,
                dataset.tracks[leader.track_index].id,
            );
            minima
                .entry(key)
                .and_modify(|m| *m = m.min(value))
                .or_insert(value);
        }
    });
    minima
}

/// The two sweep aggregates over a set of vehicles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepAggregate {
    /// Smallest per-vehicle mean TTC (s).
    pub min_mean_ttc: f64,
    /// Smallest TTC observed in any timestep (s).
    pub min_min_ttc: f64,
}

/// Aggregates (mean_ttc, min_ttc) pairs, one per vehicle. `None` when the
/// input is empty (reported as absent in CSV output).
pub fn sweep_aggregate_parts(
    parts: impl IntoIterator<Item = (f64, f64)>,
) -> Option<SweepAggregate> {
    let mut aggregate: Option<SweepAggregate> = None;
    for (mean_ttc, min_ttc) in parts {
        let entry = aggregate.get_or_insert(SweepAggregate {
            min_mean_ttc: f64::INFINITY,
            min_min_ttc: f64::INFINITY,
        });
        entry.min_mean_ttc = entry.min_mean_ttc.min(mean_ttc);
        entry.min_min_ttc = entry.min_min_ttc.min(min_ttc);
    }
    aggregate
}

/// Aggregates TTC series: the smallest per-vehicle mean TTC and the global
/// minimum over all samples.
pub fn sweep_aggregate(series: &[TtcSeries]) -> Option<SweepAggregate> {
    sweep_aggregate_parts(series.iter().map(|s| (s.mean_ttc, s.min_ttc)))
}

/// A conflict zone: a closed longitudinal interval on one lane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConflictZone {
    pub s_min: f64,
    pub s_max: f64,
    pub lane: u32,
}

impl ConflictZone {
    fn occupied_by(&self, sample: &crate::trajdata::Sample) -> bool {
        sample.lane == self.lane && sample.s >= self.s_min && sample.s <= self.s_max
    }
}

/// Post-encroachment time: time between the first occupant's last sample in
/// the zone and the second occupant's first sample in it. Negative values
/// mean the occupancies overlapped in time (collision-grade conflict).
/// `None` if either track never occupies the zone. Occupancy is judged by
/// the front-bumper s coordinate.
pub fn pet(track_a: &Track, track_b: &Track, zone: &ConflictZone) -> Option<f64> {
    let span = |track: &Track| -> Option<(f64, f64)> {
        let mut enter = None;
        let mut exit = None;
        for sample in &track.samples {
            if zone.occupied_by(sample) {
                enter.get_or_insert(sample.t);
                exit = Some(sample.t);
            }
        }
        enter.zip(exit)
    };
    let (enter_a, exit_a) = span(track_a)?;
    let (enter_b, exit_b) = span(track_b)?;
    if enter_a <= enter_b {
        Some(enter_b - exit_a)
    } else {
        Some(enter_a - exit_b)
    }
}
