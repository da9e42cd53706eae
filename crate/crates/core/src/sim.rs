//! Deterministic fixed-timestep highway engine.
//!
//! Vehicles arrive as per-class Poisson processes on the upstream end of the
//! inflow segment, receive a desired speed drawn from a truncated per-class
//! Gaussian, follow their leaders under the cc0..cc9 car-following rules,
//! and change lanes by the rules in [`crate::lanechange`]. State advances by
//! explicit Euler steps; every run is a pure function of its config
//! (including the seed), so identical inputs give byte-identical outputs.
//!
//! Per step, in order: arrivals and queued entries are admitted, then
//! accelerations are computed from a consistent snapshot, positions and
//! speeds integrate forward, finished vehicles leave, lane-change decisions
//! apply, and finally the post-step state is recorded. Trajectories and
//! statistics only cover the measurement region after the warmup period.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::carfollow::{self, acceleration, FollowState, W99Params};
use crate::lanechange::{
    evaluate_lane_change, execute_lane_change, LaneChangeParams, LaneShift, Mover,
};
use crate::metrics;
use crate::roadnet::{LaneMap, LanePosition, Occupant, RoadNetwork};
use crate::trajdata::{DatasetMeta, Provenance, Sample, Track, TrajectoryDataset, VehicleClass};
use crate::{Error, Result, KMH_PER_MPS};

/// Entry gap beyond the standstill distance required to admit a vehicle (m).
const ENTRY_MARGIN_M: f64 = 1.0;

/// Comfortable deceleration assumed when capping the entry speed (m/s²).
const ENTRY_BRAKE: f64 = 4.0;

/// A queued entry older than this aborts the run as congested (s).
const MAX_ENTRY_WAIT_S: f64 = 120.0;

/// Per-class Gaussian over desired speeds in km/h, truncated to
/// [0.5·mu, 1.5·mu] to exclude non-physical draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesiredSpeedDistribution {
    pub mu_kmh: f64,
    pub sigma_kmh: f64,
}

impl DesiredSpeedDistribution {
    pub fn validate(&self, label: &str) -> Result<()> {
        if !(self.mu_kmh.is_finite() && self.mu_kmh > 0.0) {
            return Err(Error::Config(format!(
                "desired_speed.{label}.mu_kmh must be finite and > 0, got {}",
                self.mu_kmh
            )));
        }
        if !(self.sigma_kmh.is_finite() && self.sigma_kmh > 0.0) {
            return Err(Error::Config(format!(
                "desired_speed.{label}.sigma_kmh must be finite and > 0, got {}",
                self.sigma_kmh
            )));
        }
        Ok(())
    }

    /// Maps a uniform draw u in [0, 1) to a desired speed via the inverse
    /// CDF of the truncated Gaussian. For a fixed u the result is a smooth
    /// function of (mu, sigma), which keeps simplex descent on the
    /// calibration objective well behaved under common random numbers.
    pub fn sample_kmh(&self, u: f64) -> f64 {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        // Truncation at ±0.5·mu, expressed in sigma units.
        let z = 0.5 * self.mu_kmh / self.sigma_kmh;
        let lo = normal.cdf(-z);
        let hi = normal.cdf(z);
        let p = (lo + u * (hi - lo)).clamp(1e-12, 1.0 - 1e-12);
        self.mu_kmh + self.sigma_kmh * normal.inverse_cdf(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassFlow {
    /// Hourly volume over all lanes (vehicles/hour).
    pub volume_vph: f64,
    pub length_m: f64,
    pub width_m: f64,
}

impl ClassFlow {
    fn validate(&self, label: &str) -> Result<()> {
        if !(self.volume_vph.is_finite() && self.volume_vph >= 0.0) {
            return Err(Error::Config(format!(
                "flows.{label}.volume_vph must be finite and >= 0, got {}",
                self.volume_vph
            )));
        }
        if !(self.length_m.is_finite() && self.length_m > 0.0)
            || !(self.width_m.is_finite() && self.width_m > 0.0)
        {
            return Err(Error::Config(format!(
                "flows.{label}: vehicle dimensions must be finite and > 0"
            )));
        }
        Ok(())
    }
}

/// A pair of per-class values keyed by vehicle class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerClass<T> {
    pub car: T,
    pub truck: T,
}

impl<T> PerClass<T> {
    pub fn get(&self, class: VehicleClass) -> &T {
        match class {
            VehicleClass::Truck => &self.truck,
            _ => &self.car,
        }
    }
}

impl<T: Default> Default for PerClass<T> {
    fn default() -> Self {
        Self {
            car: T::default(),
            truck: T::default(),
        }
    }
}

/// A behavior-altered subset of cars: each spawned car joins it with the
/// given probability and then drives with `w99` instead of the regular car
/// parameter set. Trucks are never altered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlteredSpec {
    pub fraction: f64,
    #[serde(default)]
    pub w99: W99Params,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdeConfig {
    /// Fixed kernel bandwidth in km/h; absent means Silverman's rule.
    #[serde(default)]
    pub bandwidth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "d_network")]
    pub network: RoadNetwork,
    #[serde(default = "d_flows")]
    pub flows: PerClass<ClassFlow>,
    #[serde(default = "d_desired_speed")]
    pub desired_speed: PerClass<DesiredSpeedDistribution>,
    #[serde(default)]
    pub w99: PerClass<W99Params>,
    #[serde(default)]
    pub altered: Option<AlteredSpec>,
    #[serde(default)]
    pub lane_change: LaneChangeParams,
    #[serde(default)]
    pub kde: KdeConfig,
    /// TTC threshold (s) below which an encounter counts as a near miss.
    #[serde(default = "d_near_miss")]
    pub near_miss_ttc_s: f64,
    #[serde(default = "d_dt")]
    pub dt_s: f64,
    /// Simulated time before statistics and trajectory recording start.
    #[serde(default = "d_warmup")]
    pub warmup_s: f64,
    /// Total simulated time including warmup. A horizon at or below the
    /// warmup yields empty statistics and trajectories.
    #[serde(default = "d_horizon")]
    pub horizon_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_timestamp")]
    pub timestamp: String,
    #[serde(default = "d_location")]
    pub location: String,
}

fn d_network() -> RoadNetwork {
    RoadNetwork {
        lane_count: 3,
        mainline_length: 4000.0,
        inflow_length: 1500.0,
        lane_width: 3.5,
    }
}

fn d_flows() -> PerClass<ClassFlow> {
    PerClass {
        car: ClassFlow {
            volume_vph: 1680.0,
            length_m: 4.5,
            width_m: 1.8,
        },
        truck: ClassFlow {
            volume_vph: 320.0,
            length_m: 12.0,
            width_m: 2.5,
        },
    }
}

fn d_desired_speed() -> PerClass<DesiredSpeedDistribution> {
    PerClass {
        car: DesiredSpeedDistribution {
            mu_kmh: 131.05,
            sigma_kmh: 17.48,
        },
        truck: DesiredSpeedDistribution {
            mu_kmh: 89.22,
            sigma_kmh: 6.20,
        },
    }
}

fn d_near_miss() -> f64 {
    crate::trajdata::DEFAULT_NEAR_MISS_TTC_S
}
fn d_dt() -> f64 {
    0.1
}
fn d_warmup() -> f64 {
    600.0
}
fn d_horizon() -> f64 {
    2400.0
}
fn d_timestamp() -> String {
    "1970-01-01T00:00:00Z".into()
}
fn d_location() -> String {
    "simulated-highway".into()
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            network: d_network(),
            flows: d_flows(),
            desired_speed: d_desired_speed(),
            w99: PerClass::default(),
            altered: None,
            lane_change: LaneChangeParams::default(),
            kde: KdeConfig::default(),
            near_miss_ttc_s: d_near_miss(),
            dt_s: d_dt(),
            warmup_s: d_warmup(),
            horizon_s: d_horizon(),
            seed: 0,
            timestamp: d_timestamp(),
            location: d_location(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if !(self.dt_s.is_finite() && self.dt_s > 0.0) {
            return Err(Error::Config(format!(
                "dt_s must be finite and > 0, got {}",
                self.dt_s
            )));
        }
        if !(self.warmup_s.is_finite() && self.warmup_s >= 0.0) {
            return Err(Error::Config(format!(
                "warmup_s must be finite and >= 0, got {}",
                self.warmup_s
            )));
        }
        if !(self.horizon_s.is_finite() && self.horizon_s >= 0.0) {
            return Err(Error::Config(format!(
                "horizon_s must be finite and >= 0, got {}",
                self.horizon_s
            )));
        }
        self.flows.car.validate("car")?;
        self.flows.truck.validate("truck")?;
        self.desired_speed.car.validate("car")?;
        self.desired_speed.truck.validate("truck")?;
        self.w99.car.validate()?;
        self.w99.truck.validate()?;
        if let Some(altered) = &self.altered {
            if !(altered.fraction.is_finite() && (0.0..=1.0).contains(&altered.fraction)) {
                return Err(Error::Config(format!(
                    "altered.fraction must lie in [0, 1], got {}",
                    altered.fraction
                )));
            }
            altered.w99.validate()?;
        }
        self.lane_change.validate()?;
        if let Some(h) = self.kde.bandwidth {
            if !(h.is_finite() && h > 0.0) {
                return Err(Error::Config(format!(
                    "kde.bandwidth must be finite and > 0, got {h}"
                )));
            }
        }
        if !(self.near_miss_ttc_s.is_finite() && self.near_miss_ttc_s > 0.0) {
            return Err(Error::Config(format!(
                "near_miss_ttc_s must be finite and > 0, got {}",
                self.near_miss_ttc_s
            )));
        }
        Ok(())
    }

    /// Whether the analysis window [warmup, horizon] is empty.
    pub fn analysis_window_is_empty(&self) -> bool {
        steps_of(self.horizon_s, self.dt_s) <= steps_of(self.warmup_s, self.dt_s)
    }
}

/// Number of whole steps covering `duration`, robust to float jitter in
/// duration/dt ratios that are meant to be integral.
fn steps_of(duration: f64, dt: f64) -> u64 {
    (duration / dt + 1e-9).floor() as u64
}

/// Per-vehicle summary over the measurement region after warmup. Emitted
/// only for vehicles with at least two in-region samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleStats {
    pub id: u64,
    pub class: VehicleClass,
    pub altered: bool,
    pub desired_speed_kmh: f64,
    pub mean_speed_kmh: f64,
    pub n_region_samples: u32,
    pub min_ttc_s: Option<f64>,
    pub mean_ttc_s: Option<f64>,
    pub completed: bool,
}

/// Flow bookkeeping for a run, including entry denials under jam.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub arrivals_car: u64,
    pub arrivals_truck: u64,
    pub admitted_car: u64,
    pub admitted_truck: u64,
    pub completed: u64,
    pub in_network_at_end: u64,
    pub queued_at_end: u64,
    pub max_entry_wait_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    pub trajectories: TrajectoryDataset,
    pub stats: Vec<VehicleStats>,
    pub meta: RunMeta,
}

/// What a run records. Statistics are always collected; trajectory samples
/// are only stored at `Full` (objective evaluations and sweeps skip them).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recording {
    StatsOnly,
    Full,
}

struct Pending {
    arrival_t: f64,
    class: VehicleClass,
    length: f64,
    width: f64,
    v_desired: f64,
    r: f64,
    altered: bool,
}

struct Vehicle {
    id: u64,
    class: VehicleClass,
    altered: bool,
    length: f64,
    width: f64,
    lane: usize,
    s: f64,
    v: f64,
    a: f64,
    v_desired: f64,
    r: f64,
    cooldown_until: f64,
    region_speed_sum: f64,
    region_samples: u32,
    ttc_sum: f64,
    ttc_min: f64,
    ttc_samples: u32,
    samples: Vec<Sample>,
}

/// Poisson arrival generator: exponential inter-arrival times driven by one
/// dedicated RNG stream.
struct ArrivalStream {
    rng: ChaCha8Rng,
    rate_per_s: f64,
    next_t: f64,
}

impl ArrivalStream {
    fn new(mut rng: ChaCha8Rng, volume_vph: f64) -> Self {
        let rate_per_s = volume_vph / 3600.0;
        let next_t = if rate_per_s > 0.0 {
            exponential_gap(&mut rng, rate_per_s)
        } else {
            f64::INFINITY
        };
        Self {
            rng,
            rate_per_s,
            next_t,
        }
    }

    /// The next arrival time if it is due at or before `t`.
    fn due(&mut self, t: f64) -> Option<f64> {
        if self.next_t <= t {
            let arrival = self.next_t;
            self.next_t += exponential_gap(&mut self.rng, self.rate_per_s);
            Some(arrival)
        } else {
            None
        }
    }
}

fn exponential_gap(rng: &mut ChaCha8Rng, rate_per_s: f64) -> f64 {
    // u in [0, 1) keeps 1 - u in (0, 1], so the log is finite.
    let u: f64 = rng.random();
    -(1.0 - u).ln() / rate_per_s
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub struct World {
    config: SimConfig,
    vehicles: Vec<Vehicle>,
    map: LaneMap,
    queue: VecDeque<Pending>,
    arrivals: PerClass<ArrivalStream>,
    attrs: PerClass<ChaCha8Rng>,
    recording: Recording,
    next_id: u64,
    step_index: u64,
    n_steps: u64,
    warmup_steps: u64,
    admitted: u64,
    removed: u64,
    scratch_a: Vec<f64>,
    finished_stats: Vec<VehicleStats>,
    finished_tracks: Vec<Track>,
    meta: RunMeta,
}

/// Read-only view of one vehicle's dynamic state, for tests and tooling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleView {
    pub id: u64,
    pub class: VehicleClass,
    pub altered: bool,
    pub lane: usize,
    pub s: f64,
    pub v: f64,
    pub a: f64,
    pub v_desired: f64,
}

impl World {
    pub fn new(config: &SimConfig, recording: Recording) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        Ok(Self {
            map: LaneMap::new(config.network.lane_count),
            vehicles: Vec::new(),
            queue: VecDeque::new(),
            arrivals: PerClass {
                car: ArrivalStream::new(stream_rng(seed, 1), config.flows.car.volume_vph),
                truck: ArrivalStream::new(stream_rng(seed, 3), config.flows.truck.volume_vph),
            },
            attrs: PerClass {
                car: stream_rng(seed, 2),
                truck: stream_rng(seed, 4),
            },
            recording,
            next_id: 1,
            step_index: 0,
            n_steps: steps_of(config.horizon_s, config.dt_s),
            warmup_steps: steps_of(config.warmup_s, config.dt_s),
            admitted: 0,
            removed: 0,
            scratch_a: Vec::new(),
            finished_stats: Vec::new(),
            finished_tracks: Vec::new(),
            meta: RunMeta::default(),
            config: config.clone(),
        })
    }

    pub fn time(&self) -> f64 {
        self.step_index as f64 * self.config.dt_s
    }

    pub fn steps_total(&self) -> u64 {
        self.n_steps
    }

    pub fn vehicles(&self) -> Vec<VehicleView> {
        self.vehicles
            .iter()
            .map(|v| VehicleView {
                id: v.id,
                class: v.class,
                altered: v.altered,
                lane: v.lane,
                s: v.s,
                v: v.v,
                a: v.a,
                v_desired: v.v_desired,
            })
            .collect()
    }

    /// Places a vehicle directly into the network, bypassing arrivals.
    /// Intended for controlled scenarios in tests; uses a neutral behavior
    /// draw (r = 0.5) and class dimensions from the flow spec.
    pub fn seed_vehicle(
        &mut self,
        lane: usize,
        s: f64,
        v: f64,
        v_desired_kmh: f64,
        class: VehicleClass,
    ) -> u64 {
        let flow = self.config.flows.get(class);
        let id = self.next_id;
        self.next_id += 1;
        let vehicle = Vehicle {
            id,
            class,
            altered: false,
            length: flow.length_m,
            width: flow.width_m,
            lane,
            s,
            v,
            a: 0.0,
            v_desired: v_desired_kmh / KMH_PER_MPS,
            r: 0.5,
            cooldown_until: 0.0,
            region_speed_sum: 0.0,
            region_samples: 0,
            ttc_sum: 0.0,
            ttc_min: f64::INFINITY,
            ttc_samples: 0,
            samples: Vec::new(),
        };
        self.map.insert_sorted(
            lane,
            Occupant {
                id,
                s,
                length: vehicle.length,
                v,
                a: 0.0,
            },
        );
        self.vehicles.push(vehicle);
        self.admitted += 1;
        match class {
            VehicleClass::Truck => self.meta.admitted_truck += 1,
            _ => self.meta.admitted_car += 1,
        }
        id
    }

    fn w99_for(&self, class: VehicleClass, altered: bool) -> &W99Params {
        if altered {
            if let Some(spec) = &self.config.altered {
                return &spec.w99;
            }
        }
        self.config.w99.get(class)
    }

    fn collect_arrivals(&mut self, t: f64) {
        while let Some(arrival_t) = self.arrivals.car.due(t) {
            self.meta.arrivals_car += 1;
            let u_speed: f64 = self.attrs.car.random();
            let u_r: f64 = self.attrs.car.random();
            let u_alt: f64 = self.attrs.car.random();
            let altered = self
                .config
                .altered
                .as_ref()
                .is_some_and(|a| u_alt < a.fraction);
            self.queue.push_back(Pending {
                arrival_t,
                class: VehicleClass::Car,
                length: self.config.flows.car.length_m,
                width: self.config.flows.car.width_m,
                v_desired: self.config.desired_speed.car.sample_kmh(u_speed) / KMH_PER_MPS,
                r: u_r,
                altered,
            });
        }
        while let Some(arrival_t) = self.arrivals.truck.due(t) {
            self.meta.arrivals_truck += 1;
            let u_speed: f64 = self.attrs.truck.random();
            let u_r: f64 = self.attrs.truck.random();
            let _u_alt: f64 = self.attrs.truck.random();
            self.queue.push_back(Pending {
                arrival_t,
                class: VehicleClass::Truck,
                length: self.config.flows.truck.length_m,
                width: self.config.flows.truck.width_m,
                v_desired: self.config.desired_speed.truck.sample_kmh(u_speed) / KMH_PER_MPS,
                r: u_r,
                altered: false,
            });
        }
        // Keep strict arrival order across the two class streams. The tail
        // is already sorted; only freshly pushed entries can be out of order.
        self.queue
            .make_contiguous()
            .sort_by(|a, b| a.arrival_t.total_cmp(&b.arrival_t));
    }

    fn least_occupied_lane(&self) -> usize {
        let mut best = 0;
        let mut best_count = usize::MAX;
        for lane in 0..self.map.lane_count() {
            let count = self.map.occupancy(lane);
            if count < best_count {
                best = lane;
                best_count = count;
            }
        }
        best
    }

    fn admit_queued(&mut self, t: f64) -> Result<()> {
        while let Some(head) = self.queue.front() {
            let lane = self.least_occupied_lane();
            let s0 = head.length;
            let entry_speed = match self.map.rearmost(lane) {
                None => Some(head.v_desired),
                Some(rear) => {
                    let gap = rear.net_gap_from(s0);
                    let min_gap = self.w99_for(head.class, head.altered).cc0 + ENTRY_MARGIN_M;
                    if gap >= min_gap {
                        // Cap entry speed so matching the rear vehicle's
                        // speed needs at most a comfortable deceleration.
                        let v2 = rear.v * rear.v + 2.0 * ENTRY_BRAKE * (gap - min_gap);
                        Some(head.v_desired.min(v2.max(0.0).sqrt()))
                    } else {
                        None
                    }
                }
            };
            match entry_speed {
                Some(v0) => {
                    let head = self.queue.pop_front().expect("non-empty queue");
                    let wait = t - head.arrival_t;
                    if wait > self.meta.max_entry_wait_s {
                        self.meta.max_entry_wait_s = wait;
                    }
                    let id = self.next_id;
                    self.next_id += 1;
                    self.map.insert_sorted(
                        lane,
                        Occupant {
                            id,
                            s: s0,
                            length: head.length,
                            v: v0,
                            a: 0.0,
                        },
                    );
                    self.vehicles.push(Vehicle {
                        id,
                        class: head.class,
                        altered: head.altered,
                        length: head.length,
                        width: head.width,
                        lane,
                        s: s0,
                        v: v0,
                        a: 0.0,
                        v_desired: head.v_desired,
                        r: head.r,
                        cooldown_until: 0.0,
                        region_speed_sum: 0.0,
                        region_samples: 0,
                        ttc_sum: 0.0,
                        ttc_min: f64::INFINITY,
                        ttc_samples: 0,
                        samples: Vec::new(),
                    });
                    self.admitted += 1;
                    match head.class {
                        VehicleClass::Truck => self.meta.admitted_truck += 1,
                        _ => self.meta.admitted_car += 1,
                    }
                }
                None => {
                    let wait = t - head.arrival_t;
                    if wait > MAX_ENTRY_WAIT_S {
                        return Err(Error::Congestion { sim_time_s: t });
                    }
                    break;
                }
            }
        }
        Ok(())
    }

    fn integrate(&mut self) {
        let dt = self.config.dt_s;
        self.scratch_a.clear();
        for veh in &self.vehicles {
            let w99 = self.w99_for(veh.class, veh.altered);
            let a = match self.map.leader_of(veh.lane, veh.s) {
                Some(lead) => {
                    let gap = lead.net_gap_from(veh.s);
                    let state = FollowState::with_leader(veh.v, veh.v_desired, gap, lead.v, lead.a);
                    let raw = acceleration(w99, &state, veh.r).0;
                    carfollow::no_overlap_cap(raw, veh.v, lead.v, gap, dt)
                }
                None => {
                    let state = FollowState::free(veh.v, veh.v_desired);
                    acceleration(w99, &state, veh.r).0
                }
            };
            self.scratch_a.push(a);
        }
        for (veh, &a) in self.vehicles.iter_mut().zip(&self.scratch_a) {
            veh.a = a;
            veh.v = (veh.v + a * dt).max(0.0);
            veh.s += veh.v * dt;
        }
    }

    fn remove_finished(&mut self) {
        let total = self.config.network.total_length();
        let mut idx = 0;
        while idx < self.vehicles.len() {
            if self.vehicles[idx].s - self.vehicles[idx].length > total {
                let veh = self.vehicles.remove(idx);
                self.removed += 1;
                self.meta.completed += 1;
                self.finalize(veh, true);
            } else {
                idx += 1;
            }
        }
    }

    fn rebuild_map(&mut self) {
        self.map.clear();
        for veh in &self.vehicles {
            self.map.insert(
                veh.lane,
                Occupant {
                    id: veh.id,
                    s: veh.s,
                    length: veh.length,
                    v: veh.v,
                    a: veh.a,
                },
            );
        }
        self.map.finish();
    }

    fn apply_lane_changes(&mut self, t_next: f64) {
        if self.config.lane_change.effectively_disabled() {
            return;
        }
        let cooldown = self.config.lane_change.cooldown_s;
        for idx in 0..self.vehicles.len() {
            let veh = &self.vehicles[idx];
            let mover = Mover {
                s: veh.s,
                length: veh.length,
                v: veh.v,
                a: veh.a,
                v_desired: veh.v_desired,
                lane: veh.lane,
                r: veh.r,
                cooldown_until: veh.cooldown_until,
            };
            let w99 = *self.w99_for(veh.class, veh.altered);
            let params_of = |id: u64| {
                let i = self
                    .vehicles
                    .binary_search_by_key(&id, |v| v.id)
                    .expect("occupant tracked in vehicle list");
                let other = &self.vehicles[i];
                *self.w99_for(other.class, other.altered)
            };
            let decision = evaluate_lane_change(
                &mover,
                t_next,
                &self.map,
                &w99,
                &self.config.lane_change,
                params_of,
            );
            if decision.direction == LaneShift::Keep {
                continue;
            }
            let veh = &mut self.vehicles[idx];
            let old_lane = veh.lane;
            execute_lane_change(
                &mut veh.lane,
                &mut veh.cooldown_until,
                &decision,
                t_next,
                cooldown,
            );
            if veh.lane != old_lane {
                let occ = self
                    .map
                    .remove(old_lane, veh.s, veh.id)
                    .expect("occupant tracked in lane map");
                self.map.insert_sorted(veh.lane, occ);
            }
        }
    }

    fn check_consistency(&self, t_next: f64) -> Result<()> {
        if self.admitted != self.vehicles.len() as u64 + self.removed {
            return Err(Error::Internal(format!(
                "vehicle conservation violated at t = {t_next:.1} s: admitted {} != {} present + {} removed",
                self.admitted,
                self.vehicles.len(),
                self.removed
            )));
        }
        for lane in 0..self.map.lane_count() {
            for pair in self.map.lane(lane).windows(2) {
                let gap = pair[1].net_gap_from(pair[0].s);
                if gap < 0.0 {
                    return Err(Error::Internal(format!(
                        "overlap on lane {lane} at t = {t_next:.1} s: vehicle {} into {} by {:.3} m",
                        pair[0].id, pair[1].id, -gap
                    )));
                }
            }
        }
        Ok(())
    }

    fn record(&mut self, t_next: f64) {
        // TTC against the same-lane leader, while both are in the region.
        for lane in 0..self.map.lane_count() {
            for pair in self.map.lane(lane).windows(2) {
                let (follower, leader) = (&pair[0], &pair[1]);
                if !self.config.network.in_measurement_region(follower.s)
                    || !self.config.network.in_measurement_region(leader.s)
                {
                    continue;
                }
                let gap = leader.s - leader.length - follower.s;
                if let Some(ttc) = metrics::ttc(gap, follower.v, leader.v) {
                    let idx = self
                        .vehicles
                        .binary_search_by_key(&follower.id, |v| v.id)
                        .expect("occupant tracked in vehicle list");
                    let veh = &mut self.vehicles[idx];
                    veh.ttc_sum += ttc;
                    veh.ttc_samples += 1;
                    if ttc < veh.ttc_min {
                        veh.ttc_min = ttc;
                    }
                }
            }
        }
        let full = self.recording == Recording::Full;
        for veh in &mut self.vehicles {
            if !self.config.network.in_measurement_region(veh.s) {
                continue;
            }
            veh.region_speed_sum += veh.v;
            veh.region_samples += 1;
            if full {
                let (x, y) = self.config.network.xy_of(LanePosition {
                    s: veh.s,
                    lane: veh.lane,
                });
                veh.samples.push(Sample {
                    t: t_next,
                    x,
                    y,
                    s: veh.s,
                    lane: veh.lane as u32,
                    v: veh.v,
                });
            }
        }
    }

    fn finalize(&mut self, veh: Vehicle, completed: bool) {
        if veh.region_samples >= 2 {
            let mean_speed = veh.region_speed_sum / veh.region_samples as f64 * KMH_PER_MPS;
            let (min_ttc, mean_ttc) = if veh.ttc_samples > 0 {
                (
                    Some(veh.ttc_min),
                    Some(veh.ttc_sum / veh.ttc_samples as f64),
                )
            } else {
                (None, None)
            };
            self.finished_stats.push(VehicleStats {
                id: veh.id,
                class: veh.class,
                altered: veh.altered,
                desired_speed_kmh: veh.v_desired * KMH_PER_MPS,
                mean_speed_kmh: mean_speed,
                n_region_samples: veh.region_samples,
                min_ttc_s: min_ttc,
                mean_ttc_s: mean_ttc,
                completed,
            });
        }
        if !veh.samples.is_empty() {
            self.finished_tracks.push(Track {
                id: veh.id,
                class: veh.class,
                class_pmf: None,
                length_m: veh.length,
                width_m: veh.width,
                samples: veh.samples,
                sigma: None,
            });
        }
    }

    /// Advances the world by one step. The step spans [time, time + dt];
    /// recording applies to the post-step instant.
    pub fn step(&mut self) -> Result<()> {
        let t = self.time();
        let t_next = (self.step_index + 1) as f64 * self.config.dt_s;
        self.collect_arrivals(t);
        self.admit_queued(t)?;
        self.integrate();
        self.remove_finished();
        self.rebuild_map();
        self.apply_lane_changes(t_next);
        self.check_consistency(t_next)?;
        if self.step_index + 1 > self.warmup_steps {
            self.record(t_next);
        }
        self.step_index += 1;
        Ok(())
    }

    /// Finalizes all remaining vehicles and assembles the output.
    pub fn finish(mut self) -> Result<SimOutput> {
        let remaining = std::mem::take(&mut self.vehicles);
        self.meta.in_network_at_end = remaining.len() as u64;
        for veh in remaining {
            self.finalize(veh, false);
        }
        self.meta.queued_at_end = self.queue.len() as u64;
        self.finished_stats.sort_by_key(|s| s.id);
        self.finished_tracks.sort_by_key(|t| t.id);
        let trajectories = TrajectoryDataset {
            meta: DatasetMeta {
                timestamp: self.config.timestamp.clone(),
                location: self.config.location.clone(),
                lat: None,
                lon: None,
                provenance: Provenance::Simulated,
                source_method: "microsimulation".into(),
            },
            tracks: self.finished_tracks,
            occlusions: Vec::new(),
        };
        Ok(SimOutput {
            trajectories,
            stats: self.finished_stats,
            meta: self.meta,
        })
    }
}

/// Runs a full simulation: a pure function of the config.
pub fn run(config: &SimConfig, recording: Recording) -> Result<SimOutput> {
    let mut world = World::new(config, recording)?;
    for _ in 0..world.steps_total() {
        world.step()?;
    }
    world.finish()
}
