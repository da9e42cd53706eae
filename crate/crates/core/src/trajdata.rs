//! Map-referenced trajectory datasets: schema, parsing, validation, and the
//! per-vehicle observables consumed by calibration.
//!
//! A dataset is a JSON document with three top-level keys: `meta` (recording
//! metadata), `tracks` (per-vehicle trajectories), and `occlusions` (regions
//! and time spans where recording was blocked). Sample rows are fixed-order
//! six-element arrays `[t, x, y, s, lane, v]` to keep large files compact:
//! time (s), geographic coordinates (m), longitudinal road coordinate (m),
//! lane index, and speed (m/s). Units are SI throughout the file; speeds are
//! converted to km/h only in [`ObservedSpeeds`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationError, ValidationKind};
use crate::roadnet::RoadNetwork;
use crate::KMH_PER_MPS;

/// Default TTC threshold (s) below which an encounter is tagged a near miss.
pub const DEFAULT_NEAR_MISS_TTC_S: f64 = 2.0;

/// Slack (s) added to the sample-rate limits so that timestamps formed as
/// `step * dt` do not trip the checks on float jitter alone.
const RATE_EPS: f64 = 1e-9;

/// Origin of a recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Natural,
    Staged,
    Simulated,
}

/// Coarse participant classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleClass {
    Car,
    Truck,
    Bicycle,
    Pedestrian,
    Other,
}

impl std::fmt::Display for VehicleClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            VehicleClass::Car => "car",
            VehicleClass::Truck => "truck",
            VehicleClass::Bicycle => "bicycle",
            VehicleClass::Pedestrian => "pedestrian",
            VehicleClass::Other => "other",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    /// ISO-8601 timestamp of the recording.
    pub timestamp: String,
    /// Free-form location description.
    pub location: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lon: Option<f64>,
    pub provenance: Provenance,
    /// How the data was obtained (sensor setup, simulator name, ...).
    pub source_method: String,
}

/// One trajectory sample. Serialized as the array `[t, x, y, s, lane, v]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub s: f64,
    pub lane: u32,
    pub v: f64,
}

impl Serialize for Sample {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeTuple;
        let mut row = serializer.serialize_tuple(6)?;
        row.serialize_element(&self.t)?;
        row.serialize_element(&self.x)?;
        row.serialize_element(&self.y)?;
        row.serialize_element(&self.s)?;
        row.serialize_element(&self.lane)?;
        row.serialize_element(&self.v)?;
        row.end()
    }
}

impl<'de> Deserialize<'de> for Sample {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let (t, x, y, s, lane, v) = <(f64, f64, f64, f64, u32, f64)>::deserialize(deserializer)?;
        Ok(Sample {
            t,
            x,
            y,
            s,
            lane,
            v,
        })
    }
}

/// Per-field Gaussian standard deviations of the measured quantities.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sigma {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Track {
    pub id: u64,
    pub class: VehicleClass,
    /// Classifier output over all classes; must sum to 1 and assign its mode
    /// to `class`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_pmf: Option<BTreeMap<VehicleClass, f64>>,
    pub length_m: f64,
    pub width_m: f64,
    pub samples: Vec<Sample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Sigma>,
}

/// A region and time span where recording was blocked. Stored and
/// round-tripped; not interpreted by calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionInterval {
    pub s_min: f64,
    pub s_max: f64,
    pub t_min: f64,
    pub t_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryDataset {
    pub meta: DatasetMeta,
    pub tracks: Vec<Track>,
    #[serde(default)]
    pub occlusions: Vec<OcclusionInterval>,
}

/// Per-class per-vehicle mean speeds in km/h, the observations entering the
/// calibration likelihood. Counts are the list lengths.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ObservedSpeeds {
    pub car_speeds: Vec<f64>,
    pub truck_speeds: Vec<f64>,
}

/// A half-open longitudinal interval `[s_min, s_max)` over which statistics
/// are collected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub s_min: f64,
    pub s_max: f64,
}

impl Region {
    pub fn new(s_min: f64, s_max: f64) -> Self {
        Self { s_min, s_max }
    }

    pub fn contains(&self, s: f64) -> bool {
        s >= self.s_min && s < self.s_max
    }
}

impl From<&RoadNetwork> for Region {
    /// The network's measurement region (the mainline).
    fn from(network: &RoadNetwork) -> Self {
        Region::new(network.inflow_length, network.total_length())
    }
}

/// A same-lane encounter whose minimum TTC fell below a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NearMiss {
    pub follower_id: u64,
    pub leader_id: u64,
    pub min_ttc_s: f64,
}

impl TrajectoryDataset {
    /// Checks every dataset invariant, returning the first violation.
    pub fn validate(&self) -> Result<()> {
        let mut seen_ids = std::collections::HashSet::with_capacity(self.tracks.len());
        for (index, track) in self.tracks.iter().enumerate() {
            let at = |detail: &str| format!("track {index} (id {}): {detail}", track.id);
            if !seen_ids.insert(track.id) {
                return Err(ValidationError::new(
                    ValidationKind::DuplicateTrackId,
                    at("id already used by an earlier track"),
                )
                .into());
            }
            if !(track.length_m.is_finite() && track.width_m.is_finite()) {
                return Err(ValidationError::new(
                    ValidationKind::NonFiniteValue,
                    at("length_m and width_m must be finite"),
                )
                .into());
            }
            if track.length_m <= 0.0 || track.width_m <= 0.0 {
                return Err(ValidationError::new(
                    ValidationKind::NonPositiveSize,
                    at(&format!(
                        "length_m = {}, width_m = {} must both be > 0",
                        track.length_m, track.width_m
                    )),
                )
                .into());
            }
            if let Some(pmf) = &track.class_pmf {
                let sum: f64 = pmf.values().sum();
                if pmf.values().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                    return Err(ValidationError::new(
                        ValidationKind::ClassPmfSum,
                        at(&format!("class_pmf sums to {sum}, expected 1 within 1e-9")),
                    )
                    .into());
                }
                let own = pmf.get(&track.class).copied().unwrap_or(0.0);
                if pmf.values().any(|p| *p > own) {
                    return Err(ValidationError::new(
                        ValidationKind::ClassPmfMode,
                        at(&format!(
                            "class_pmf mode does not match class {}",
                            track.class
                        )),
                    )
                    .into());
                }
            }
            if track.samples.is_empty() {
                return Err(ValidationError::new(
                    ValidationKind::EmptyTrack,
                    at("track has no samples"),
                )
                .into());
            }
            for (k, sample) in track.samples.iter().enumerate() {
                let finite = sample.t.is_finite()
                    && sample.x.is_finite()
                    && sample.y.is_finite()
                    && sample.s.is_finite()
                    && sample.v.is_finite();
                if !finite {
                    return Err(ValidationError::new(
                        ValidationKind::NonFiniteValue,
                        at(&format!("sample {k} contains a non-finite value")),
                    )
                    .into());
                }
                if k > 0 && sample.t <= track.samples[k - 1].t {
                    return Err(ValidationError::new(
                        ValidationKind::NonIncreasingTime,
                        at(&format!(
                            "sample {k} timestamp {} does not increase past {}",
                            sample.t,
                            track.samples[k - 1].t
                        )),
                    )
                    .into());
                }
            }
            if let Some(median_dt) = median_sample_interval(&track.samples) {
                if median_dt > 0.5 + RATE_EPS {
                    return Err(ValidationError::new(
                        ValidationKind::SampleRate,
                        at(&format!(
                            "median sample interval {median_dt:.3} s exceeds 0.5 s"
                        )),
                    )
                    .into());
                }
                if median_dt > 0.1 + RATE_EPS {
                    log::warn!(
                        "track {index} (id {}): median sample interval {median_dt:.3} s is coarser \
                         than the preferred 0.1 s",
                        track.id
                    );
                }
            }
            if let Some(sigma) = &track.sigma {
                for (name, value) in [
                    ("x", sigma.x),
                    ("y", sigma.y),
                    ("s", sigma.s),
                    ("v", sigma.v),
                ] {
                    let Some(value) = value else { continue };
                    if !value.is_finite() {
                        return Err(ValidationError::new(
                            ValidationKind::NonFiniteValue,
                            at(&format!("sigma.{name} must be finite")),
                        )
                        .into());
                    }
                    if value < 0.0 {
                        return Err(ValidationError::new(
                            ValidationKind::NegativeSigma,
                            at(&format!("sigma.{name} = {value} must be >= 0")),
                        )
                        .into());
                    }
                }
            }
        }
        for (name, value) in [("lat", self.meta.lat), ("lon", self.meta.lon)] {
            if let Some(value) = value {
                if !value.is_finite() {
                    return Err(ValidationError::new(
                        ValidationKind::NonFiniteValue,
                        format!("meta.{name} must be finite"),
                    )
                    .into());
                }
            }
        }
        for (index, occlusion) in self.occlusions.iter().enumerate() {
            let finite = occlusion.s_min.is_finite()
                && occlusion.s_max.is_finite()
                && occlusion.t_min.is_finite()
                && occlusion.t_max.is_finite();
            if !finite || occlusion.s_min > occlusion.s_max || occlusion.t_min > occlusion.t_max {
                return Err(ValidationError::new(
                    ValidationKind::OcclusionBounds,
                    format!(
                        "occlusion {index}: require finite s_min <= s_max and t_min <= t_max, got \
                         s = [{}, {}], t = [{}, {}]",
                        occlusion.s_min, occlusion.s_max, occlusion.t_min, occlusion.t_max
                    ),
                )
                .into());
            }
        }
        if self.meta.provenance == Provenance::Simulated {
            self.validate_simulated_geometry()?;
        }
        Ok(())
    }

    /// Simulated recordings have exact geometry: x equals s and y is a fixed
    /// strictly increasing function of the lane index.
    fn validate_simulated_geometry(&self) -> Result<()> {
        let mut lane_y: BTreeMap<u32, f64> = BTreeMap::new();
        for (index, track) in self.tracks.iter().enumerate() {
            for (k, sample) in track.samples.iter().enumerate() {
                if sample.x != sample.s {
                    return Err(ValidationError::new(
                        ValidationKind::SimulatedGeometry,
                        format!(
                            "track {index} (id {}): sample {k} has x = {} but s = {}",
                            track.id, sample.x, sample.s
                        ),
                    )
                    .into());
                }
                let y = *lane_y.entry(sample.lane).or_insert(sample.y);
                if y != sample.y {
                    return Err(ValidationError::new(
                        ValidationKind::SimulatedGeometry,
                        format!(
                            "track {index} (id {}): sample {k} on lane {} has y = {}, expected {}",
                            track.id, sample.lane, sample.y, y
                        ),
                    )
                    .into());
                }
            }
        }
        let ys: Vec<f64> = lane_y.values().copied().collect();
        if ys.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ValidationError::new(
                ValidationKind::SimulatedGeometry,
                "lane center y coordinates are not strictly increasing with lane index",
            )
            .into());
        }
        Ok(())
    }

    /// Tracks per class, for summaries.
    pub fn class_counts(&self) -> BTreeMap<VehicleClass, usize> {
        let mut counts = BTreeMap::new();
        for track in &self.tracks {
            *counts.entry(track.class).or_insert(0) += 1;
        }
        counts
    }
}

fn median_sample_interval(samples: &[Sample]) -> Option<f64> {
    if samples.len() < 2 {
        return None;
    }
    let mut diffs: Vec<f64> = samples.windows(2).map(|w| w[1].t - w[0].t).collect();
    diffs.sort_unstable_by(f64::total_cmp);
    let n = diffs.len();
    Some(if n % 2 == 1 {
        diffs[n / 2]
    } else {
        0.5 * (diffs[n / 2 - 1] + diffs[n / 2])
    })
}

/// Parses and validates a dataset from JSON text. Schema violations report
/// the JSON path of the offending field; invariant violations report the
/// violated rule.
pub fn parse_dataset(text: &str) -> Result<TrajectoryDataset> {
    let deserializer = &mut serde_json::Deserializer::from_str(text);
    let dataset: TrajectoryDataset =
        serde_path_to_error::deserialize(deserializer).map_err(|e| Error::Parse {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
    dataset.validate()?;
    Ok(dataset)
}

/// Serializes a dataset to compact JSON. The output parses back to a
/// field-for-field identical dataset (floats bit-identical).
pub fn serialize_dataset(dataset: &TrajectoryDataset) -> Result<String> {
    serde_json::to_string(dataset).map_err(|e| Error::Internal(format!("serialize dataset: {e}")))
}

/// Mean speed (km/h) of a track over its samples inside `region`, or `None`
/// if fewer than 2 samples fall inside.
pub fn mean_speed(track: &Track, region: &Region) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for sample in &track.samples {
        if region.contains(sample.s) {
            sum += sample.v;
            n += 1;
        }
    }
    if n < 2 {
        None
    } else {
        Some(sum / n as f64 * KMH_PER_MPS)
    }
}

/// Per-class lists of per-track mean speeds inside `region`. Classes other
/// than car and truck are ignored, as are tracks with fewer than 2 in-region
/// samples or a non-positive mean.
pub fn observed_speeds(dataset: &TrajectoryDataset, region: &Region) -> ObservedSpeeds {
    let mut observed = ObservedSpeeds::default();
    for track in &dataset.tracks {
        let bucket = match track.class {
            VehicleClass::Car => &mut observed.car_speeds,
            VehicleClass::Truck => &mut observed.truck_speeds,
            _ => continue,
        };
        if let Some(speed) = mean_speed(track, region) {
            if speed.is_finite() && speed > 0.0 {
                bucket.push(speed);
            }
        }
    }
    observed
}

/// All same-lane follower/leader encounters whose minimum TTC falls below
/// `ttc_threshold` (seconds), sorted by follower then leader id.
pub fn tag_near_miss(dataset: &TrajectoryDataset, ttc_threshold: f64) -> Vec<NearMiss> {
    let mut tagged: Vec<NearMiss> = crate::metrics::pairwise_min_ttc(dataset)
        .into_iter()
        .filter(|(_, min_ttc)| *min_ttc < ttc_threshold)
        .map(|((follower_id, leader_id), min_ttc)| NearMiss {
            follower_id,
            leader_id,
            min_ttc_s: min_ttc,
        })
        .collect();
    tagged.sort_by_key(|m| (m.follower_id, m.leader_id));
    tagged
}
