//! Highway geometry: parallel lanes along one longitudinal axis.
//!
//! The network is a straight 1-D axis. Positions are measured in meters from
//! the upstream end of the inflow segment; the measurement region is the
//! mainline `[inflow_length, inflow_length + mainline_length)`, and samples
//! taken on the inflow segment are excluded from analysis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A multi-lane highway section: `lane_count` parallel lanes over an inflow
/// (warm-up) segment followed by the mainline. Lane 0 is the rightmost lane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadNetwork {
    pub lane_count: usize,
    /// Mainline (measurement region) length in meters.
    pub mainline_length: f64,
    /// Inflow segment length in meters; vehicles spawn at its upstream end.
    pub inflow_length: f64,
    /// Lane width in meters. Presentation only; the dynamics are 1-D.
    #[serde(default = "default_lane_width")]
    pub lane_width: f64,
}

fn default_lane_width() -> f64 {
    3.5
}

/// A longitudinal position on the network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LanePosition {
    /// Meters along the axis from the upstream end of the inflow segment.
    pub s: f64,
    pub lane: usize,
}

impl RoadNetwork {
    pub fn validate(&self) -> Result<()> {
        if self.lane_count < 1 {
            return Err(Error::Config("lane_count must be at least 1".into()));
        }
        if !self.mainline_length.is_finite() || self.mainline_length <= 0.0 {
            return Err(Error::Config(format!(
                "mainline_length must be positive, got {}",
                self.mainline_length
            )));
        }
        if !self.inflow_length.is_finite() || self.inflow_length < 0.0 {
            return Err(Error::Config(format!(
                "inflow_length must be non-negative, got {}",
                self.inflow_length
            )));
        }
        if !self.lane_width.is_finite() || self.lane_width <= 0.0 {
            return Err(Error::Config(format!(
                "lane_width must be positive, got {}",
                self.lane_width
            )));
        }
        Ok(())
    }

    /// Total longitudinal extent (inflow plus mainline) in meters.
    pub fn total_length(&self) -> f64 {
        self.inflow_length + self.mainline_length
    }

    /// True iff `s` lies inside the measurement region
    /// `[inflow_length, inflow_length + mainline_length)`.
    pub fn in_measurement_region(&self, s: f64) -> bool {
        s >= self.inflow_length && s < self.total_length()
    }

    /// Geographic coordinates for a lane position. The axis runs along x;
    /// lane centers stack in y, lane 0 (rightmost) lowest.
    pub fn xy_of(&self, pos: LanePosition) -> (f64, f64) {
        (pos.s, (pos.lane as f64 + 0.5) * self.lane_width)
    }
}

/// Builds a highway with `lane_count` lanes, a mainline of `mainline_length`
/// meters and an inflow segment of `inflow_length` meters.
pub fn build_highway(
    lane_count: usize,
    mainline_length: f64,
    inflow_length: f64,
) -> Result<RoadNetwork> {
    let network = RoadNetwork {
        lane_count,
        mainline_length,
        inflow_length,
        lane_width: default_lane_width(),
    };
    network.validate()?;
    Ok(network)
}

/// One vehicle as seen by neighbor queries: enough state for car following,
/// lane changing and TTC, copied from the pre-step snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occupant {
    pub id: u64,
    /// Front-bumper position in meters.
    pub s: f64,
    /// Vehicle length in meters; the rear bumper is at `s - length`.
    pub length: f64,
    /// Speed in m/s.
    pub v: f64,
    /// Acceleration applied on the previous step, in m/s².
    pub a: f64,
}

impl Occupant {
    /// Bumper-to-bumper gap from a follower at front-bumper position `s_follower`.
    pub fn net_gap_from(&self, s_follower: f64) -> f64 {
        self.s - self.length - s_follower
    }
}

/// Per-lane occupancy snapshot, sorted by position, for leader/follower
/// queries. Rebuilt from the vehicle state at the start of every step.
#[derive(Debug, Clone, Default)]
pub struct LaneMap {
    lanes: Vec<Vec<Occupant>>,
}

impl LaneMap {
    pub fn new(lane_count: usize) -> Self {
        Self {
            lanes: vec![Vec::new(); lane_count],
        }
    }

    pub fn lane_count(&self) -> usize {
        self.lanes.len()
    }

    pub fn clear(&mut self) {
        for lane in &mut self.lanes {
            lane.clear();
        }
    }

    pub fn insert(&mut self, lane: usize, occupant: Occupant) {
        self.lanes[lane].push(occupant);
    }

    /// Inserts into an already-sorted lane, keeping ascending position order.
    pub fn insert_sorted(&mut self, lane: usize, occupant: Occupant) {
        let entries = &mut self.lanes[lane];
        let idx = entries.partition_point(|o| o.s < occupant.s);
        entries.insert(idx, occupant);
    }

    /// Removes the occupant with the given id from a sorted lane. `s` must
    /// be its current position (it locates the entry).
    pub fn remove(&mut self, lane: usize, s: f64, id: u64) -> Option<Occupant> {
        let entries = &mut self.lanes[lane];
        let idx = entries.partition_point(|o| o.s < s);
        // Same-position occupants cannot coexist on one lane, but be safe.
        for i in idx..entries.len() {
            if entries[i].s > s {
                break;
            }
            if entries[i].id == id {
                return Some(entries.remove(i));
            }
        }
        None
    }

    /// Sorts every lane by position. Must be called after the last `insert`
    /// and before any query.
    pub fn finish(&mut self) {
        for lane in &mut self.lanes {
            lane.sort_unstable_by(|a, b| a.s.total_cmp(&b.s));
        }
    }

    pub fn occupancy(&self, lane: usize) -> usize {
        self.lanes[lane].len()
    }

    /// Occupants of `lane` in ascending position order.
    pub fn lane(&self, lane: usize) -> &[Occupant] {
        &self.lanes[lane]
    }

    /// The nearest occupant of `lane` strictly ahead of `s`, if any.
    pub fn leader_of(&self, lane: usize, s: f64) -> Option<&Occupant> {
        let entries = &self.lanes[lane];
        let idx = entries.partition_point(|o| o.s <= s);
        entries.get(idx)
    }

    /// The nearest occupant of `lane` strictly behind `s`, if any.
    pub fn follower_of(&self, lane: usize, s: f64) -> Option<&Occupant> {
        let entries = &self.lanes[lane];
        let idx = entries.partition_point(|o| o.s < s);
        idx.checked_sub(1).map(|i| &entries[i])
    }

    /// The last occupant of `lane` (smallest position), i.e. the vehicle a
    /// new entrant at the upstream end would follow.
    pub fn rearmost(&self, lane: usize) -> Option<&Occupant> {
        self.lanes[lane].first()
    }
}
