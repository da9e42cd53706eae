//! Rule-based lane selection: overtaking desire, keep-right compliance, and
//! gap-acceptance safety.
//!
//! The rule set is a deterministic approximation of classic two-sided desire
//! models: a vehicle moves left when its current-lane leader caps it clearly
//! below its desired speed and the left lane is safe; it returns right when
//! the right lane sustains near-desired speed for the next ten seconds of
//! travel. Lane switches are instantaneous (the dynamics are longitudinal)
//! and rate-limited by a per-vehicle cooldown.

use serde::{Deserialize, Serialize};

use crate::carfollow::{acceleration, FollowState, Regime, W99Params};
use crate::roadnet::LaneMap;
use crate::KMH_PER_MPS;

/// How far ahead (m) a leader can be and still trigger overtaking desire.
const LOOKAHEAD_M: f64 = 150.0;

/// Travel-time window (s) the right lane must sustain before a return.
const KEEP_RIGHT_HORIZON_S: f64 = 10.0;

/// Minimum acceptable net gap (m) on the target lane, both sides.
const MIN_GAP_M: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneChangeParams {
    #[serde(default = "d_enabled")]
    pub enabled: bool,
    /// Move back right when the right lane is fast enough.
    #[serde(default = "d_keep_right")]
    pub keep_right: bool,
    /// Overtaking desire triggers when the leader's speed is this far (km/h)
    /// below the desired speed. A non-finite value disables lane changing
    /// entirely.
    #[serde(default = "d_desire_threshold")]
    pub desire_threshold_kmh: f64,
    /// Time (s) after a change during which a vehicle keeps its lane.
    #[serde(default = "d_cooldown")]
    pub cooldown_s: f64,
}

fn d_enabled() -> bool {
    true
}
fn d_keep_right() -> bool {
    true
}
fn d_desire_threshold() -> f64 {
    10.0
}
fn d_cooldown() -> f64 {
    3.0
}

impl Default for LaneChangeParams {
    fn default() -> Self {
        Self {
            enabled: d_enabled(),
            keep_right: d_keep_right(),
            desire_threshold_kmh: d_desire_threshold(),
            cooldown_s: d_cooldown(),
        }
    }
}

impl LaneChangeParams {
    pub fn validate(&self) -> crate::Result<()> {
        if self.cooldown_s < 0.0 || self.cooldown_s.is_nan() {
            return Err(crate::Error::Config(format!(
                "lane_change.cooldown_s must be >= 0, got {}",
                self.cooldown_s
            )));
        }
        if self.desire_threshold_kmh.is_nan() {
            return Err(crate::Error::Config(
                "lane_change.desire_threshold_kmh must not be NaN (use a large or infinite value \
                 to disable overtaking)"
                    .into(),
            ));
        }
        Ok(())
    }

    /// True when no vehicle may ever leave its spawn lane.
    pub fn effectively_disabled(&self) -> bool {
        !self.enabled || !self.desire_threshold_kmh.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaneShift {
    Keep,
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChangeReason {
    Overtake,
    KeepRight,
    Blocked,
    None,
}

/// The outcome of one lane-change evaluation. Keeping the lane always pairs
/// with reason `Blocked` (desire present, unsafe) or `None`; a move always
/// pairs with its motive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LaneChangeDecision {
    pub direction: LaneShift,
    pub reason: ChangeReason,
}

impl LaneChangeDecision {
    pub const KEEP: Self = Self {
        direction: LaneShift::Keep,
        reason: ChangeReason::None,
    };
    pub const BLOCKED: Self = Self {
        direction: LaneShift::Keep,
        reason: ChangeReason::Blocked,
    };
    pub const OVERTAKE: Self = Self {
        direction: LaneShift::Left,
        reason: ChangeReason::Overtake,
    };
    pub const KEEP_RIGHT: Self = Self {
        direction: LaneShift::Right,
        reason: ChangeReason::KeepRight,
    };
}

/// The moving vehicle as seen by the lane-change rules.
#[derive(Debug, Clone, Copy)]
pub struct Mover {
    /// Front-bumper position (m).
    pub s: f64,
    pub length: f64,
    pub v: f64,
    /// Acceleration applied on the previous step (m/s²), shown to the
    /// prospective new follower.
    pub a: f64,
    pub v_desired: f64,
    pub lane: usize,
    /// Per-vehicle uniform draw used by the car-following thresholds.
    pub r: f64,
    /// Simulation time before which this vehicle keeps its lane.
    pub cooldown_until: f64,
}

/// True iff moving `mover` onto `target_lane` leaves open gaps on both sides
/// and forces neither the mover nor the new follower into an emergency
/// regime or a deceleration beyond that driver's cc8.
///
/// The mover judges its prospective leader with its own parameters; the new
/// follower's reaction is judged with the follower's own set, resolved via
/// `params_of`, since following thresholds differ across classes and drivers.
pub fn gap_acceptable(
    mover: &Mover,
    target_lane: usize,
    map: &LaneMap,
    w99: &W99Params,
    params_of: impl Fn(u64) -> W99Params,
) -> bool {
    if let Some(leader) = map.leader_of(target_lane, mover.s) {
        let gap = leader.net_gap_from(mover.s);
        if gap <= MIN_GAP_M {
            return false;
        }
        let state = FollowState::with_leader(mover.v, mover.v_desired, gap, leader.v, leader.a);
        let (a, regime) = acceleration(w99, &state, mover.r);
        if regime == Regime::Emergency || a < -w99.cc8 {
            return false;
        }
    }
    if let Some(follower) = map.follower_of(target_lane, mover.s) {
        let gap = mover.s - mover.length - follower.s;
        if gap <= MIN_GAP_M {
            return false;
        }
        let theirs = params_of(follower.id);
        // The follower's desired speed is unknown here; its current speed is
        // the conservative stand-in (a higher desired speed could only raise
        // the commanded acceleration). Neutral r.
        let state = FollowState::with_leader(follower.v, follower.v, gap, mover.v, mover.a);
        let (a, regime) = acceleration(&theirs, &state, 0.5);
        if regime == Regime::Emergency || a < -theirs.cc8 {
            return false;
        }
    }
    true
}

/// Decides whether `mover` should change lanes, from a consistent snapshot
/// of all lanes. `now` is the current simulation time.
pub fn evaluate_lane_change(
    mover: &Mover,
    now: f64,
    map: &LaneMap,
    w99: &W99Params,
    params: &LaneChangeParams,
    params_of: impl Fn(u64) -> W99Params,
) -> LaneChangeDecision {
    if params.effectively_disabled() || now < mover.cooldown_until {
        return LaneChangeDecision::KEEP;
    }
    let threshold = params.desire_threshold_kmh / KMH_PER_MPS;

    // Overtaking: the current-lane leader is close and clearly slower than
    // we want to go.
    let wants_left = map.leader_of(mover.lane, mover.s).is_some_and(|leader| {
        leader.net_gap_from(mover.s) < LOOKAHEAD_M && leader.v < mover.v_desired - threshold
    });
    if wants_left {
        let target = mover.lane + 1;
        if target < map.lane_count() && gap_acceptable(mover, target, map, w99, params_of) {
            return LaneChangeDecision::OVERTAKE;
        }
        return LaneChangeDecision::BLOCKED;
    }

    // Keep-right: return right when that lane sustains at least 90% of the
    // desired speed over the next ten seconds of travel.
    if params.keep_right && mover.lane > 0 {
        let target = mover.lane - 1;
        if right_lane_sustains(mover, target, map, w99)
            && gap_acceptable(mover, target, map, w99, params_of)
        {
            return LaneChangeDecision::KEEP_RIGHT;
        }
    }
    LaneChangeDecision::KEEP
}

fn right_lane_sustains(mover: &Mover, target: usize, map: &LaneMap, w99: &W99Params) -> bool {
    let want = 0.9 * mover.v_desired;
    match map.leader_of(target, mover.s) {
        None => true,
        Some(leader) => {
            // After the horizon at the wanted speed, the projected gap must
            // still cover a comfortable following distance.
            let gap = leader.net_gap_from(mover.s);
            let follow_dist = w99.cc0 + w99.cc1 * want;
            gap + (leader.v - want) * KEEP_RIGHT_HORIZON_S >= follow_dist
        }
    }
}

/// Applies a decision: instantaneous lane switch plus cooldown start. During
/// cooldown the lane never changes. Returns the (possibly updated) lane.
pub fn execute_lane_change(
    lane: &mut usize,
    cooldown_until: &mut f64,
    decision: &LaneChangeDecision,
    now: f64,
    cooldown_s: f64,
) -> usize {
    if now >= *cooldown_until {
        match decision.direction {
            LaneShift::Keep => {}
            LaneShift::Left => {
                *lane += 1;
                *cooldown_until = now + cooldown_s;
            }
            LaneShift::Right => {
                *lane -= 1;
                *cooldown_until = now + cooldown_s;
            }
        }
    }
    *lane
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roadnet::Occupant;

    fn occ(id: u64, s: f64, v: f64) -> Occupant {
        Occupant {
            id,
            s,
            length: 4.5,
            v,
            a: 0.0,
        }
    }

    fn mover(s: f64, v: f64, v_desired: f64, lane: usize) -> Mover {
        Mover {
            s,
            length: 4.5,
            v,
            a: 0.0,
            v_desired,
            lane,
            r: 0.5,
            cooldown_until: 0.0,
        }
    }

    fn check_invariant(decision: &LaneChangeDecision) {
        let keeps = decision.direction == LaneShift::Keep;
        let keep_reason = matches!(decision.reason, ChangeReason::Blocked | ChangeReason::None);
        assert_eq!(keeps, keep_reason, "decision/reason mismatch: {decision:?}");
    }

    #[test]
    fn single_vehicle_single_lane_keeps() {
        let mut map = LaneMap::new(1);
        let me = mover(100.0, 30.0, 36.0, 0);
        map.insert(0, occ(1, me.s, me.v));
        map.finish();
        let d = evaluate_lane_change(
            &me,
            0.0,
            &map,
            &W99Params::DEFAULT,
            &LaneChangeParams::default(),
            |_| W99Params::DEFAULT,
        );
        assert_eq!(d, LaneChangeDecision::KEEP);
        check_invariant(&d);
    }

    #[test]
    fn slow_leader_with_empty_left_lane_triggers_overtake() {
        let mut map = LaneMap::new(2);
        let me = mover(100.0, 30.0, 36.0, 0);
        map.insert(0, occ(1, me.s, me.v));
        map.insert(0, occ(2, 160.0, 20.0));
        map.finish();
        let d = evaluate_lane_change(
            &me,
            0.0,
            &map,
            &W99Params::DEFAULT,
            &LaneChangeParams::default(),
            |_| W99Params::DEFAULT,
        );
        assert_eq!(d, LaneChangeDecision::OVERTAKE);
        check_invariant(&d);
    }

    #[test]
    fn occupied_left_lane_blocks_overtake() {
        let mut map = LaneMap::new(2);
        let me = mover(100.0, 30.0, 36.0, 0);
        map.insert(0, occ(1, me.s, me.v));
        map.insert(0, occ(2, 160.0, 20.0));
        // A fast vehicle right behind the merge point on the left lane.
        map.insert(1, occ(3, 97.0, 35.0));
        map.finish();
        let d = evaluate_lane_change(
            &me,
            0.0,
            &map,
            &W99Params::DEFAULT,
            &LaneChangeParams::default(),
            |_| W99Params::DEFAULT,
        );
        assert_eq!(d, LaneChangeDecision::BLOCKED);
        check_invariant(&d);
    }

    #[test]
    fn top_lane_with_desire_is_blocked() {
        let mut map = LaneMap::new(2);
        let me = mover(100.0, 30.0, 36.0, 1);
        map.insert(1, occ(1, me.s, me.v));
        map.insert(1, occ(2, 160.0, 20.0));
        map.finish();
        let d = evaluate_lane_change(
            &me,
            0.0,
            &map,
            &W99Params::DEFAULT,
            &LaneChangeParams::default(),
            |_| W99Params::DEFAULT,
        );
        assert_eq!(d, LaneChangeDecision::BLOCKED);
    }

    #[test]
    fn empty_right_lane_attracts_keep_right() {
        let mut map = LaneMap::new(2);
        let me = mover(100.0, 36.0, 36.0, 1);
        map.insert(1, occ(1, me.s, me.v));
        map.finish();
        let d = evaluate_lane_change(
            &me,
            0.0,
            &map,
            &W99Params::DEFAULT,
            &LaneChangeParams::default(),
            |_| W99Params::DEFAULT,
        );
        assert_eq!(d, LaneChangeDecision::KEEP_RIGHT);
        check_invariant(&d);
    }

    #[test]
    fn slow_right_lane_is_not_attractive() {
        let mut map = LaneMap::new(2);
        let me = mover(100.0, 36.0, 36.0, 1);
        map.insert(1, occ(1, me.s, me.v));
        map.insert(0, occ(2, 140.0, 22.0));
        map.finish();
        let d = evaluate_lane_change(
            &me,
            0.0,
            &map,
            &W99Params::DEFAULT,
            &LaneChangeParams::default(),
            |_| W99Params::DEFAULT,
        );
        assert_eq!(d, LaneChangeDecision::KEEP);
    }

    #[test]
    fn keep_right_respects_config_flag() {
        let mut map = LaneMap::new(2);
        let me = mover(100.0, 36.0, 36.0, 1);
        map.insert(1, occ(1, me.s, me.v));
        map.finish();
        let params = LaneChangeParams {
            keep_right: false,
            ..LaneChangeParams::default()
        };
        let d = evaluate_lane_change(&me, 0.0, &map, &W99Params::DEFAULT, &params, |_| {
            W99Params::DEFAULT
        });
        assert_eq!(d, LaneChangeDecision::KEEP);
    }

    #[test]
    fn infinite_threshold_disables_everything() {
        let params = LaneChangeParams {
            desire_threshold_kmh: f64::INFINITY,
            ..LaneChangeParams::default()
        };
        assert!(params.effectively_disabled());
        // Even a textbook overtaking setup stays put, and so does keep-right.
        let mut map = LaneMap::new(3);
        let me = mover(100.0, 30.0, 36.0, 1);
        map.insert(1, occ(1, me.s, me.v));
        map.insert(1, occ(2, 140.0, 15.0));
        map.finish();
        let d = evaluate_lane_change(&me, 0.0, &map, &W99Params::DEFAULT, &params, |_| {
            W99Params::DEFAULT
        });
        assert_eq!(d, LaneChangeDecision::KEEP);
    }

    #[test]
    fn cooldown_gates_evaluation_and_execution() {
        let mut map = LaneMap::new(2);
        let mut me = mover(100.0, 30.0, 36.0, 0);
        me.cooldown_until = 5.0;
        map.insert(0, occ(1, me.s, me.v));
        map.insert(0, occ(2, 160.0, 20.0));
        map.finish();
        let d = evaluate_lane_change(
            &me,
            2.0,
            &map,
            &W99Params::DEFAULT,
            &LaneChangeParams::default(),
            |_| W99Params::DEFAULT,
        );
        assert_eq!(d, LaneChangeDecision::KEEP);

        // Execution applies the same gate.
        let mut lane = 0usize;
        let mut until = 5.0;
        let lane_after = execute_lane_change(
            &mut lane,
            &mut until,
            &LaneChangeDecision::OVERTAKE,
            2.0,
            3.0,
        );
        assert_eq!(lane_after, 0);
        // After the cooldown the same decision goes through and restarts it.
        let lane_after = execute_lane_change(
            &mut lane,
            &mut until,
            &LaneChangeDecision::OVERTAKE,
            5.0,
            3.0,
        );
        assert_eq!(lane_after, 1);
        assert_eq!(until, 8.0);
    }

    #[test]
    fn execute_applies_direction() {
        let mut lane = 1usize;
        let mut until = 0.0;
        assert_eq!(
            execute_lane_change(&mut lane, &mut until, &LaneChangeDecision::KEEP, 1.0, 3.0),
            1
        );
        assert_eq!(
            execute_lane_change(
                &mut lane,
                &mut until,
                &LaneChangeDecision::KEEP_RIGHT,
                1.0,
                3.0
            ),
            0
        );
        assert_eq!(until, 4.0);
    }

    #[test]
    fn close_follower_in_target_lane_fails_gap_acceptance() {
        let mut map = LaneMap::new(2);
        let me = mover(100.0, 25.0, 36.0, 0);
        map.insert(0, occ(1, me.s, me.v));
        // Follower on the left lane closing fast, 3 m behind our rear bumper.
        map.insert(1, occ(3, 92.5, 34.0));
        map.finish();
        assert!(!gap_acceptable(&me, 1, &map, &W99Params::DEFAULT, |_| {
            W99Params::DEFAULT
        }));
        // The same follower far behind is fine.
        let mut map = LaneMap::new(2);
        map.insert(0, occ(1, me.s, me.v));
        map.insert(1, occ(3, 20.0, 30.0));
        map.finish();
        assert!(gap_acceptable(&me, 1, &map, &W99Params::DEFAULT, |_| {
            W99Params::DEFAULT
        }));
    }

    #[test]
    fn follower_acceptance_uses_the_followers_own_params() {
        // A follower closing at 8 m/s from 45 m back tolerates the cut-in
        // with the default headway but not with a much longer one.
        let mut map = LaneMap::new(2);
        let me = mover(100.0, 25.0, 36.0, 0);
        map.insert(0, occ(1, me.s, me.v));
        map.insert(1, occ(3, 50.5, 33.0));
        map.finish();
        assert!(gap_acceptable(&me, 1, &map, &W99Params::DEFAULT, |_| {
            W99Params::DEFAULT
        }));
        let timid = W99Params {
            cc1: 2.2,
            ..W99Params::DEFAULT
        };
        assert!(!gap_acceptable(&me, 1, &map, &W99Params::DEFAULT, |id| {
            assert_eq!(id, 3);
            timid
        }));
    }
}
