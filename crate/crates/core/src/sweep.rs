//! One-at-a-time sensitivity sweeps: vary a single car-following parameter
//! over its documented range for an altered subset of cars and aggregate
//! how the subset's TTC statistics respond.
//!
//! Every grid point reruns the same seeded simulation, so arrival times,
//! desired speeds, and subset membership are identical across points; the
//! only difference is the altered subset's parameter value.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::carfollow::W99Params;
use crate::exec;
use crate::metrics::sweep_aggregate_parts;
use crate::sim::{run, AlteredSpec, Recording, SimConfig};
use crate::{Error, Result};

/// Identifies one of the ten car-following parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum W99ParamId {
    Cc0,
    Cc1,
    Cc2,
    Cc3,
    Cc4,
    Cc5,
    Cc6,
    Cc7,
    Cc8,
    Cc9,
}

use W99ParamId::*;

impl W99ParamId {
    pub const ALL: [W99ParamId; 10] = [Cc0, Cc1, Cc2, Cc3, Cc4, Cc5, Cc6, Cc7, Cc8, Cc9];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn get(self, params: &W99Params) -> f64 {
        match self {
            Cc0 => params.cc0,
            Cc1 => params.cc1,
            Cc2 => params.cc2,
            Cc3 => params.cc3,
            Cc4 => params.cc4,
            Cc5 => params.cc5,
            Cc6 => params.cc6,
            Cc7 => params.cc7,
            Cc8 => params.cc8,
            Cc9 => params.cc9,
        }
    }

    pub fn apply(self, params: &mut W99Params, value: f64) {
        match self {
            Cc0 => params.cc0 = value,
            Cc1 => params.cc1 = value,
            Cc2 => params.cc2 = value,
            Cc3 => params.cc3 = value,
            Cc4 => params.cc4 = value,
            Cc5 => params.cc5 = value,
            Cc6 => params.cc6 = value,
            Cc7 => params.cc7 = value,
            Cc8 => params.cc8 = value,
            Cc9 => params.cc9 = value,
        }
    }

    pub fn default_value(self) -> f64 {
        self.get(&W99Params::DEFAULT)
    }

    /// The documented variation range (start, end). For the deceleration
    /// parameters the end is the more negative value.
    pub fn sweep_range(self) -> (f64, f64) {
        match self {
            Cc0 => (0.25, 2.5),
            Cc1 => (0.1, 1.0),
            Cc2 => (1.0, 5.5),
            Cc3 => (-2.0, -11.0),
            Cc4 => (-0.1, -0.55),
            Cc5 => (0.1, 0.55),
            Cc6 => (8.44, 12.94),
            Cc7 => (0.1, 0.55),
            Cc8 => (1.0, 5.5),
            Cc9 => (0.5, 5.0),
        }
    }
}

impl fmt::Display for W99ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cc{}", self.index())
    }
}

impl FromStr for W99ParamId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        W99ParamId::ALL
            .iter()
            .copied()
            .find(|p| p.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown parameter {s:?}, expected cc0..cc9")))
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub param: W99ParamId,
    pub start: f64,
    pub end: f64,
    /// Grid size; 1 evaluates the start value only.
    pub steps: usize,
    /// Fraction of spawned cars assigned to the altered subset.
    pub fraction: f64,
    pub base: SimConfig,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sweep needs at least one grid point".into()));
        }
        if !self.start.is_finite() || !self.end.is_finite() {
            return Err(Error::Config(format!(
                "sweep range [{}, {}] must be finite",
                self.start, self.end
            )));
        }
        // Endpoint validity implies validity of the interpolated interior,
        // since each parameter's sign constraint is one-sided.
        for (label, value) in [("start", self.start), ("end", self.end)] {
            let mut probe = W99Params::DEFAULT;
            self.param.apply(&mut probe, value);
            if let Err(e) = probe.validate() {
                let detail = match e {
                    Error::Config(message) => message,
                    other => other.to_string(),
                };
                return Err(Error::Config(format!(
                    "sweep {label} {value} for {}: {detail}",
                    self.param
                )));
            }
        }
        if !(self.fraction.is_finite() && (0.0..=1.0).contains(&self.fraction)) {
            return Err(Error::Config(format!(
                "sweep fraction must lie in [0, 1], got {}",
                self.fraction
            )));
        }
        self.base.validate()
    }

    /// The evaluation grid, linear from start to end with exact endpoints.
    pub fn grid(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![self.start];
        }
        (0..self.steps)
            .map(|k| {
                if k == self.steps - 1 {
                    self.end
                } else {
                    self.start + (self.end - self.start) * k as f64 / (self.steps - 1) as f64
                }
            })
            .collect()
    }
}

/// One grid point's outcome. Aggregates are absent when the altered subset
/// produced no defined TTC (or the run failed with congestion).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub min_mean_ttc_s: Option<f64>,
    pub min_min_ttc_s: Option<f64>,
    /// Altered vehicles that contributed statistics at this point.
    pub n_altered: u64,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub param: W99ParamId,
    pub rows: Vec<SweepRow>,
}

/// Runs the sweep. Grid points are independent seeded simulations and may
/// execute concurrently; the table is assembled in grid order either way.
/// Congestion at a grid point marks that row failed and the sweep goes on.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepTable> {
    spec.validate()?;
    let grid = spec.grid();
    let rows: Vec<Result<SweepRow>> = exec::map_indexed(grid.len(), |i| {
        let value = grid[i];
        let mut altered = W99Params::DEFAULT;
        spec.param.apply(&mut altered, value);
        let mut config = spec.base.clone();
        config.altered = Some(AlteredSpec {
            fraction: spec.fraction,
            w99: altered,
        });
        match run(&config, Recording::StatsOnly) {
            Ok(output) => {
                let n_altered = output.stats.iter().filter(|s| s.altered).count() as u64;
                let aggregate = sweep_aggregate_parts(output.stats.iter().filter_map(|s| {
                    if !s.altered {
                        return None;
                    }
                    match (s.mean_ttc_s, s.min_ttc_s) {
                        (Some(mean), Some(min)) => Some((mean, min)),
                        _ => None,
                    }
                }));
                Ok(SweepRow {
                    value,
                    min_mean_ttc_s: aggregate.map(|a| a.min_mean_ttc),
                    min_min_ttc_s: aggregate.map(|a| a.min_min_ttc),
                    n_altered,
                    failed: false,
                })
            }
            Err(Error::Congestion { sim_time_s }) => {
                log::warn!(
                    "sweep {} = {value}: congestion abort at t = {sim_time_s:.1} s",
                    spec.param
                );
                Ok(SweepRow {
                    value,
                    min_mean_ttc_s: None,
                    min_min_ttc_s: None,
                    n_altered: 0,
                    failed: true,
                })
            }
            Err(other) => Err(other),
        }
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(SweepTable {
        param: spec.param,
        rows,
    })
}

/// Orders parameters by how strongly they move the minimal observed minimum
/// TTC: descending range over each table's defined rows, ties by parameter
/// index. Expects one table per parameter.
pub fn rank_sensitivity(tables: &[SweepTable]) -> Result<Vec<(W99ParamId, f64)>> {
    if tables.len() != W99ParamId::ALL.len() {
        return Err(Error::Config(format!(
            "ranking needs one table per parameter ({} expected, got {})",
            W99ParamId::ALL.len(),
            tables.len()
        )));
    }
    let mut seen = [false; 10];
    let mut ranked: Vec<(W99ParamId, f64)> = Vec::with_capacity(tables.len());
    for table in tables {
        if seen[table.param.index()] {
            return Err(Error::Config(format!(
                "duplicate table for {}",
                table.param
            )));
        }
        seen[table.param.index()] = true;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut defined = 0usize;
        for row in &table.rows {
            if let (false, Some(v)) = (row.failed, row.min_min_ttc_s) {
                lo = lo.min(v);
                hi = hi.max(v);
                defined += 1;
            }
        }
        let range = if defined >= 2 { hi - lo } else { 0.0 };
        ranked.push((table.param, range));
    }
    ranked.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| a.0.index().cmp(&b.0.index()))
    });
    Ok(ranked)
}
