//! Wiedemann99 psycho-physical car following.
//!
//! The model classifies each follower into one of four regimes (free,
//! approaching, following, emergency) by comparing the gap and speed
//! difference to perception thresholds derived from the ten constants
//! cc0–cc9, then emits an acceleration for the regime. All functions here are
//! pure: the only randomness is a per-vehicle uniform draw `r` in [0, 1],
//! sampled once at spawn and passed in by the caller.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hard braking bound in m/s². Service braking never exceeds this.
pub const A_MAX_BRAKE: f64 = 8.0;

/// Speed (m/s) at which the acceleration ramp reaches cc9 (80 km/h).
const RAMP_SPEED: f64 = 22.2;

/// Width (m/s) of the linear taper band below the desired speed (5 km/h).
const TAPER_BAND: f64 = 5.0 / 3.6;

/// The ten Wiedemann99 constants.
///
/// Units: cc0 m, cc1 s, cc2 m, cc3 s, cc4 m/s, cc5 m/s, cc6 1/(m·s),
/// cc7 m/s², cc8 m/s², cc9 m/s².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct W99Params {
    /// Standstill distance (m).
    #[serde(default = "d_cc0")]
    pub cc0: f64,
    /// Headway time (s).
    #[serde(default = "d_cc1")]
    pub cc1: f64,
    /// Following band width (m).
    #[serde(default = "d_cc2")]
    pub cc2: f64,
    /// Approach perception gain (s); negative.
    #[serde(default = "d_cc3")]
    pub cc3: f64,
    /// Closing-speed perception offset (m/s); negative.
    #[serde(default = "d_cc4")]
    pub cc4: f64,
    /// Opening-speed perception offset (m/s); positive.
    #[serde(default = "d_cc5")]
    pub cc5: f64,
    /// Speed-difference perception sensitivity to distance (1/(m·s)).
    #[serde(default = "d_cc6")]
    pub cc6: f64,
    /// Following oscillation acceleration (m/s²).
    #[serde(default = "d_cc7")]
    pub cc7: f64,
    /// Standstill acceleration (m/s²).
    #[serde(default = "d_cc8")]
    pub cc8: f64,
    /// Acceleration at 80 km/h (m/s²).
    #[serde(default = "d_cc9")]
    pub cc9: f64,
}

impl W99Params {
    pub const DEFAULT: W99Params = W99Params {
        cc0: 1.5,
        cc1: 0.9,
        cc2: 4.0,
        cc3: -8.0,
        cc4: -0.35,
        cc5: 0.35,
        cc6: 11.44,
        cc7: 0.25,
        cc8: 3.5,
        cc9: 1.5,
    };

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.cc0 > 0.0, "cc0 must be > 0"),
            (self.cc1 > 0.0, "cc1 must be > 0"),
            (self.cc2 >= 0.0, "cc2 must be >= 0"),
            (self.cc3 < 0.0, "cc3 must be < 0"),
            (self.cc4 < 0.0, "cc4 must be < 0"),
            (self.cc5 > 0.0, "cc5 must be > 0"),
            (self.cc6 >= 0.0, "cc6 must be >= 0"),
            (self.cc7 > 0.0, "cc7 must be > 0"),
            (self.cc8 > 0.0, "cc8 must be > 0"),
            (self.cc9 > 0.0, "cc9 must be > 0"),
        ];
        for (ok, message) in checks {
            if !ok {
                return Err(Error::Config(format!("w99: {message}")));
            }
        }
        let values = [
            self.cc0, self.cc1, self.cc2, self.cc3, self.cc4, self.cc5, self.cc6, self.cc7,
            self.cc8, self.cc9,
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("w99: all parameters must be finite".into()));
        }
        Ok(())
    }

    /// The hardest acceleration the model can emit, m/s².
    pub fn a_max(&self) -> f64 {
        self.cc8.max(self.cc9)
    }
}

impl Default for W99Params {
    fn default() -> Self {
        Self::DEFAULT
    }
}

fn d_cc0() -> f64 {
    W99Params::DEFAULT.cc0
}
fn d_cc1() -> f64 {
    W99Params::DEFAULT.cc1
}
fn d_cc2() -> f64 {
    W99Params::DEFAULT.cc2
}
fn d_cc3() -> f64 {
    W99Params::DEFAULT.cc3
}
fn d_cc4() -> f64 {
    W99Params::DEFAULT.cc4
}
fn d_cc5() -> f64 {
    W99Params::DEFAULT.cc5
}
fn d_cc6() -> f64 {
    W99Params::DEFAULT.cc6
}
fn d_cc7() -> f64 {
    W99Params::DEFAULT.cc7
}
fn d_cc8() -> f64 {
    W99Params::DEFAULT.cc8
}
fn d_cc9() -> f64 {
    W99Params::DEFAULT.cc9
}

/// Follower-centric kinematic state for one car-following evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FollowState {
    /// Follower speed, m/s.
    pub v: f64,
    /// Leader speed, m/s. 0 when there is no leader.
    pub v_lead: f64,
    /// Leader acceleration from the previous step, m/s². 0 when no leader.
    pub a_lead: f64,
    /// Net gap (leader rear bumper minus follower front bumper), m.
    /// `f64::INFINITY` when there is no leader.
    pub dx: f64,
    /// Speed difference v_lead − v, m/s. Negative when closing.
    pub dv: f64,
    /// Follower desired speed, m/s.
    pub v_desired: f64,
}

impl FollowState {
    /// State of a vehicle with no leader.
    pub fn free(v: f64, v_desired: f64) -> Self {
        Self {
            v,
            v_lead: 0.0,
            a_lead: 0.0,
            dx: f64::INFINITY,
            dv: 0.0,
            v_desired,
        }
    }

    /// State of a vehicle behind a leader at net gap `dx`.
    pub fn with_leader(v: f64, v_desired: f64, dx: f64, v_lead: f64, a_lead: f64) -> Self {
        Self {
            v,
            v_lead,
            a_lead,
            dx,
            dv: v_lead - v,
            v_desired,
        }
    }
}

/// Perception thresholds for one (state, params, r) triple.
///
/// Distances: sdxc is the minimum comfortable following distance, sdxo the
/// upper edge of the following band, sdxv the distance at which an approach
/// to a slower leader is first perceived. Speed differences: dv below sdvc
/// reads as closing, above sdvo as opening; sdv is the perception floor that
/// widens with distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub sdxc: f64,
    pub sdxo: f64,
    pub sdxv: f64,
    pub sdv: f64,
    pub sdvc: f64,
    pub sdvo: f64,
}

/// Car-following regime. Exactly one applies per state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    Free,
    Approaching,
    Following,
    Emergency,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Regime::Free => "free",
            Regime::Approaching => "approaching",
            Regime::Following => "following",
            Regime::Emergency => "emergency",
        };
        f.write_str(name)
    }
}

/// Computes the perception thresholds. `r` is the per-vehicle uniform draw
/// in [0, 1]. All outputs are finite for any state with finite speeds.
pub fn thresholds(params: &W99Params, state: &FollowState, r: f64) -> Thresholds {
    let sdxc = if state.v_lead <= 0.0 {
        params.cc0
    } else {
        // Perceived speed: own speed unless closing on a leader that is not
        // braking hard, in which case a randomized blend around the leader's.
        let v_slow = if state.dv >= 0.0 || state.a_lead < -1.0 {
            state.v
        } else {
            state.v_lead + state.dv * (r - 0.5)
        };
        params.cc0 + params.cc1 * v_slow
    };
    let sdxo = sdxc + params.cc2;
    let sdxv = sdxo + params.cc3 * (state.dv - params.cc4);
    // Perception widens with the square of distance; an absent leader
    // (infinite dx) contributes no speed-difference perception at all.
    let sdv = if state.dx.is_finite() {
        params.cc6 * 1e-4 * state.dx * state.dx
    } else {
        0.0
    };
    let sdvc = if state.v_lead > 0.0 {
        params.cc4 - sdv
    } else {
        0.0
    };
    let sdvo = if state.v > params.cc5 {
        sdv + params.cc5
    } else {
        sdv
    };
    Thresholds {
        sdxc,
        sdxo,
        sdxv,
        sdv,
        sdvc,
        sdvo,
    }
}

/// Classifies the state into a regime. Precedence: emergency, approaching,
/// following, free. A vehicle with no leader is always free.
pub fn regime(state: &FollowState, th: &Thresholds) -> Regime {
    if !state.dx.is_finite() {
        return Regime::Free;
    }
    if state.dx <= th.sdxc && state.dv < th.sdvo {
        Regime::Emergency
    } else if state.dv < th.sdvc && state.dx < th.sdxv {
        Regime::Approaching
    } else if state.dv < th.sdvo && state.dx < th.sdxo {
        Regime::Following
    } else {
        Regime::Free
    }
}

/// Acceleration toward the desired speed when unconstrained by a leader:
/// cc8 at standstill, blending to cc9 at 80 km/h, tapered to zero over the
/// last 5 km/h below the desired speed. Above the desired speed the vehicle
/// trims back gently.
fn free_acceleration(params: &W99Params, v: f64, v_desired: f64) -> f64 {
    if v > v_desired {
        return (v_desired - v).max(-1.0);
    }
    let ramp = params.cc8 + (params.cc9 - params.cc8) * (v.min(RAMP_SPEED) / RAMP_SPEED);
    let taper = ((v_desired - v) / TAPER_BAND).clamp(0.0, 1.0);
    ramp * taper
}

/// Computes the commanded acceleration and the regime it came from.
/// Output is clamped to [−A_MAX_BRAKE, max(cc8, cc9)].
pub fn acceleration(params: &W99Params, state: &FollowState, r: f64) -> (f64, Regime) {
    let th = thresholds(params, state, r);
    let regime = regime(state, &th);
    let a = match regime {
        Regime::Free => free_acceleration(params, state.v, state.v_desired),
        Regime::Following => {
            if state.dv < 0.0 {
                -params.cc7
            } else if state.dv > 0.0 {
                params
                    .cc7
                    .min(free_acceleration(params, state.v, state.v_desired))
            } else {
                0.0
            }
        }
        // The constant deceleration that zeroes the speed difference exactly
        // at sdxc. dx > sdxc here (closer states classify as emergency), so
        // the quotient is never positive.
        Regime::Approaching => 0.5 * state.dv * state.dv / (th.sdxc - state.dx),
        Regime::Emergency => {
            let base = if state.dx > params.cc0 {
                state.a_lead + state.dv * state.dv / (params.cc0 - state.dx)
            } else {
                state.a_lead + 0.5 * (state.dv - th.sdvo)
            };
            base.min(-params.cc7)
        }
    };
    (a.clamp(-A_MAX_BRAKE, params.a_max()), regime)
}

/// Caps a commanded acceleration so the follower always keeps enough room
/// to stop behind the leader at the physical braking limit B = A_MAX_BRAKE,
/// even if the leader itself brakes at B from now on.
///
/// Under semi-implicit Euler (v += a dt, then s += v dt) the cap maintains
/// the invariant 2 B gap >= v^2 - v_lead^2 together with gap >= 0: with
/// reach = max(v_lead, B dt) it allows at most
///
///   v' = sqrt(reach^2 + 2 B gap) - B dt,
///
/// which makes the invariant hold after the step for the worst-case leader
/// speed max(0, v_lead - B dt), and any milder leader only widens the
/// margin. Given the invariant, the required deceleration never exceeds B,
/// so the physical floor below does not compromise the guarantee. Gaps at
/// or above the stopping-distance difference leave the command untouched;
/// the psycho-physical regimes operate well inside that envelope.
pub fn no_overlap_cap(a: f64, v: f64, v_lead: f64, net_gap: f64, dt: f64) -> f64 {
    let reach = v_lead.max(A_MAX_BRAKE * dt);
    let v_safe = (reach * reach + 2.0 * A_MAX_BRAKE * net_gap)
        .max(0.0)
        .sqrt()
        - A_MAX_BRAKE * dt;
    a.min((v_safe - v) / dt).max(-A_MAX_BRAKE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    const DT: f64 = 0.1;

    #[test]
    fn default_params_are_valid() {
        W99Params::default().validate().unwrap();
    }

    #[test]
    fn invalid_params_rejected() {
        let p = W99Params {
            cc3: 0.5,
            ..W99Params::default()
        };
        assert!(matches!(p.validate(), Err(Error::Config(_))));
        let p = W99Params {
            cc0: 0.0,
            ..W99Params::default()
        };
        assert!(p.validate().is_err());
        let p = W99Params {
            cc6: f64::NAN,
            ..W99Params::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let p: W99Params = serde_json::from_str(r#"{"cc1": 1.3}"#).unwrap();
        assert_eq!(p.cc1, 1.3);
        assert_eq!(p.cc0, 1.5);
        assert_eq!(p.cc9, 1.5);
    }

    #[test]
    fn standstill_leader_collapses_sdxc_to_cc0() {
        let p = W99Params::default();
        let st = FollowState::with_leader(20.0, 30.0, 50.0, 0.0, 0.0);
        let th = thresholds(&p, &st, 0.7);
        assert_eq!(th.sdxc, 1.5);
    }

    #[test]
    fn matched_speed_thresholds() {
        let p = W99Params::default();
        let st = FollowState::with_leader(30.0, 35.0, 40.0, 30.0, 0.0);
        assert_eq!(st.dv, 0.0);
        // dv >= 0 makes v_slow the follower's own speed; r must not matter.
        for r in [0.0, 0.33, 1.0] {
            let th = thresholds(&p, &st, r);
            assert_relative_eq!(th.sdxc, 28.5, max_relative = 1e-12);
            assert_relative_eq!(th.sdxo, 32.5, max_relative = 1e-12);
        }
    }

    #[test]
    fn zero_cc2_collapses_following_band() {
        let p = W99Params {
            cc2: 0.0,
            ..W99Params::default()
        };
        for (v, v_lead, dx) in [(10.0, 8.0, 20.0), (30.0, 30.0, 50.0), (5.0, 0.0, 3.0)] {
            let st = FollowState::with_leader(v, 40.0, dx, v_lead, 0.0);
            let th = thresholds(&p, &st, 0.5);
            assert_eq!(th.sdxo, th.sdxc);
        }
    }

    #[test]
    fn regime_no_leader_is_free() {
        let p = W99Params::default();
        let st = FollowState::free(25.0, 30.0);
        let th = thresholds(&p, &st, 0.5);
        assert_eq!(regime(&st, &th), Regime::Free);
    }

    #[test]
    fn regime_close_and_closing_is_emergency() {
        let p = W99Params::default();
        // Follower 3 m behind a slow leader, closing at 5 m/s.
        let st = FollowState::with_leader(15.0, 30.0, 3.0, 10.0, 0.0);
        let th = thresholds(&p, &st, 0.5);
        assert!(st.dx < th.sdxc && st.dv < th.sdvo);
        assert_eq!(regime(&st, &th), Regime::Emergency);
        let (a, _) = acceleration(&p, &st, 0.5);
        assert!(a <= -p.cc7);
        assert!(a >= -A_MAX_BRAKE);
    }

    #[test]
    fn regime_mid_band_zero_dv_is_following() {
        let p = W99Params::default();
        let v = 25.0;
        let probe = FollowState::with_leader(v, 35.0, 0.0, v, 0.0);
        let sdxc = thresholds(&p, &probe, 0.5).sdxc;
        let st = FollowState::with_leader(v, 35.0, sdxc + p.cc2 / 2.0, v, 0.0);
        let th = thresholds(&p, &st, 0.5);
        assert_eq!(regime(&st, &th), Regime::Following);
        let (a, _) = acceleration(&p, &st, 0.5);
        assert_eq!(a, 0.0);
    }

    #[test]
    fn free_standstill_acceleration_is_cc8() {
        let p = W99Params::default();
        let (a, regime) = acceleration(&p, &FollowState::free(0.0, 30.0), 0.5);
        assert_eq!(regime, Regime::Free);
        assert_eq!(a, 3.5);
    }

    #[test]
    fn free_at_desired_speed_holds() {
        let p = W99Params::default();
        let (a, _) = acceleration(&p, &FollowState::free(30.0, 30.0), 0.5);
        assert_abs_diff_eq!(a, 0.0, epsilon = 1e-12);
        // Slightly above desired: trim back, never harder than 1 m/s².
        let (a, _) = acceleration(&p, &FollowState::free(30.4, 30.0), 0.5);
        assert!((-1.0..0.0).contains(&a));
    }

    #[test]
    fn free_ramp_blends_cc8_to_cc9() {
        let p = W99Params::default();
        let (a, _) = acceleration(&p, &FollowState::free(RAMP_SPEED, 60.0), 0.5);
        assert_relative_eq!(a, 1.5, max_relative = 1e-12);
        let (a_mid, _) = acceleration(&p, &FollowState::free(RAMP_SPEED / 2.0, 60.0), 0.5);
        assert_relative_eq!(a_mid, 2.5, max_relative = 1e-12);
    }

    /// One Euler step of a scripted-leader platoon; cars[0] is the leader.
    /// Mirrors the engine's update: v' = max(0, v + a·dt), s' = s + v'·dt.
    struct Car {
        s: f64,
        v: f64,
        a: f64,
        v_desired: f64,
        r: f64,
        length: f64,
    }

    fn step_platoon(p: &W99Params, cars: &mut [Car], leader_a: f64) {
        let snapshot: Vec<(f64, f64, f64, f64)> =
            cars.iter().map(|c| (c.s, c.v, c.a, c.length)).collect();
        for i in 0..cars.len() {
            let a = if i == 0 {
                leader_a
            } else {
                let (ls, lv, la, ll) = snapshot[i - 1];
                let gap = ls - ll - snapshot[i].0;
                let st = FollowState::with_leader(snapshot[i].1, cars[i].v_desired, gap, lv, la);
                let raw = acceleration(p, &st, cars[i].r).0;
                no_overlap_cap(raw, snapshot[i].1, lv, gap, DT)
            };
            cars[i].a = a;
            cars[i].v = (cars[i].v + a * DT).max(0.0);
            cars[i].s += cars[i].v * DT;
        }
    }

    fn platoon(n_followers: usize, v0: f64, gap0: f64, v_desired: f64, rs: &[f64]) -> Vec<Car> {
        let length = 4.5;
        (0..=n_followers)
            .map(|i| Car {
                s: -(i as f64) * (gap0 + length),
                v: v0,
                a: 0.0,
                v_desired: if i == 0 { v0 } else { v_desired },
                r: rs[i % rs.len()],
                length,
            })
            .collect()
    }

    fn net_gaps(cars: &[Car]) -> Vec<f64> {
        cars.windows(2)
            .map(|w| w[0].s - w[0].length - w[1].s)
            .collect()
    }

    #[test]
    fn equilibrium_following_oscillation_stays_within_cc7() {
        let p = W99Params::default();
        let v = 25.0;
        let probe = FollowState::with_leader(v, 35.0, 0.0, v, 0.0);
        let sdxc = thresholds(&p, &probe, 0.5).sdxc;
        let mut cars = platoon(1, v, sdxc + p.cc2 / 2.0, 35.0, &[0.5]);
        for _ in 0..100 {
            step_platoon(&p, &mut cars, 0.0);
            assert!(
                cars[1].a.abs() <= p.cc7 + 1e-12,
                "following acceleration {} left the oscillation band",
                cars[1].a
            );
        }
    }

    #[test]
    fn platoon_converges_to_equilibrium_band() {
        let p = W99Params::default();
        let v = 20.0;
        // Followers start 100 m apart, want 30 m/s, leader holds 20 m/s.
        let mut cars = platoon(4, v, 100.0, 30.0, &[0.2, 0.5, 0.8, 0.35]);
        for _ in 0..1200 {
            step_platoon(&p, &mut cars, 0.0);
        }
        let lo = p.cc0 + p.cc1 * v - 0.5;
        let hi = p.cc0 + p.cc1 * v + p.cc2 + 0.5;
        for (i, gap) in net_gaps(&cars).iter().enumerate() {
            assert!(
                (lo..=hi).contains(gap),
                "follower {} settled at gap {:.2}, outside [{:.2}, {:.2}]",
                i + 1,
                gap,
                lo,
                hi
            );
        }
    }

    #[test]
    fn steady_gap_nondecreasing_in_cc1() {
        let v = 20.0;
        let mut previous = f64::NEG_INFINITY;
        for cc1 in [0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
            let p = W99Params {
                cc1,
                ..W99Params::default()
            };
            let mut cars = platoon(1, v, 80.0, 30.0, &[0.5]);
            let mut mean_gap = 0.0;
            let tail = 500;
            for step in 0..3000 {
                step_platoon(&p, &mut cars, 0.0);
                if step >= 3000 - tail {
                    mean_gap += net_gaps(&cars)[0];
                }
            }
            mean_gap /= tail as f64;
            assert!(
                mean_gap >= previous - 1e-6,
                "mean gap {mean_gap:.3} at cc1 = {cc1} dropped below {previous:.3}"
            );
            previous = mean_gap;
        }
    }

    #[test]
    fn randomized_platoons_never_overlap() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x57EE7);
        let p = W99Params::default();
        for scenario in 0..1000 {
            let n_followers = rng.random_range(1..=4usize);
            let v_lead0: f64 = rng.random_range(5.0..35.0);
            let mut cars = vec![Car {
                s: 0.0,
                v: v_lead0,
                a: 0.0,
                v_desired: v_lead0,
                r: 0.5,
                length: 4.5,
            }];
            for _ in 0..n_followers {
                let v0: f64 = rng.random_range(5.0..35.0);
                let ahead = cars.last().unwrap();
                // Gap that covers the stopping-distance difference when both
                // vehicles brake at the physical limit.
                let feasible = ((v0 * v0 - ahead.v * ahead.v) / (2.0 * A_MAX_BRAKE) + 2.0).max(3.0);
                let gap = feasible + rng.random_range(0.0..30.0);
                cars.push(Car {
                    s: ahead.s - ahead.length - gap,
                    v: v0,
                    a: 0.0,
                    v_desired: rng.random_range(25.0..45.0),
                    r: rng.random_range(0.0..1.0),
                    length: 4.5,
                });
            }
            // Leader accel re-drawn every 5 s from [-5, 2] m/s².
            let mut leader_a = 0.0f64;
            for step in 0..600 {
                if step % 50 == 0 {
                    leader_a = rng.random_range(-5.0..2.0);
                }
                let applied = if cars[0].v == 0.0 {
                    leader_a.max(0.0)
                } else {
                    leader_a
                };
                step_platoon(&p, &mut cars, applied);
                for (i, gap) in net_gaps(&cars).iter().enumerate() {
                    assert!(
                        *gap >= 0.0,
                        "scenario {scenario}: follower {} overlapped (gap {gap:.3}) at step {step}",
                        i + 1
                    );
                }
            }
        }
    }

    #[test]
    fn overlap_cap_binds_only_near_contact() {
        // Generous gap: the cap is far above any commanded acceleration.
        assert_eq!(no_overlap_cap(1.2, 25.0, 25.0, 30.0, 0.1), 1.2);
        // Matched speeds near contact: allowed speed is the stopping-margin
        // bound sqrt(10^2 + 16 * 0.05) - 0.8, requiring ~ 7.6 m/s^2 braking.
        let a = no_overlap_cap(0.5, 10.0, 10.0, 0.05, 0.1);
        let v_next = (100.0f64 + 16.0 * 0.05).sqrt() - 0.8;
        assert_abs_diff_eq!(a, (v_next - 10.0) / 0.1, epsilon = 1e-12);
        // The step preserves the stopping-margin invariant against a leader
        // braking at the physical limit.
        let lead_worst = 10.0 - A_MAX_BRAKE * 0.1;
        let gap_next = 0.05 + (lead_worst - v_next) * 0.1;
        assert!(2.0 * A_MAX_BRAKE * gap_next >= v_next * v_next - lead_worst * lead_worst - 1e-9);
        // Demands beyond the physical limit are floored there.
        assert_eq!(no_overlap_cap(-2.0, 30.0, 0.0, 0.05, 0.1), -A_MAX_BRAKE);
        // Stopped pair in contact cannot creep forward.
        assert_eq!(no_overlap_cap(3.5, 0.0, 0.0, 0.0, 0.1), 0.0);
    }

    fn arb_state() -> impl Strategy<Value = (FollowState, f64)> {
        (
            0.0..60.0f64, // v
            0.0..60.0f64, // v_lead
            -8.0..4.0f64, // a_lead
            prop_oneof![0.1..500.0f64, Just(f64::INFINITY)],
            5.0..60.0f64, // v_desired
            0.0..1.0f64,  // r
        )
            .prop_map(|(v, v_lead, a_lead, dx, v_desired, r)| {
                (
                    FollowState::with_leader(v, v_desired, dx, v_lead, a_lead),
                    r,
                )
            })
    }

    proptest! {
        #[test]
        fn thresholds_finite_and_ordered((st, r) in arb_state()) {
            let p = W99Params::default();
            let th = thresholds(&p, &st, r);
            for value in [th.sdxc, th.sdxo, th.sdxv, th.sdv, th.sdvc, th.sdvo] {
                prop_assert!(value.is_finite());
            }
            prop_assert!(th.sdxc <= th.sdxo);
            // cc3 < 0 widens the approach distance once dv drops below cc4.
            if st.dv <= p.cc4 {
                prop_assert!(th.sdxo <= th.sdxv);
            }
        }

        #[test]
        fn acceleration_bounded_and_regime_consistent((st, r) in arb_state()) {
            let p = W99Params::default();
            let (a, regime) = acceleration(&p, &st, r);
            prop_assert!(a.is_finite());
            prop_assert!(a >= -A_MAX_BRAKE - 1e-12);
            prop_assert!(a <= p.a_max() + 1e-12);
            match regime {
                Regime::Emergency => prop_assert!(a <= -p.cc7 + 1e-12),
                Regime::Approaching => prop_assert!(a <= 0.0),
                Regime::Following => prop_assert!(a.abs() <= p.cc7 + 1e-12),
                Regime::Free => {
                    if st.v < st.v_desired {
                        prop_assert!(a >= 0.0);
                    }
                }
            }
        }

        #[test]
        fn no_leader_is_always_free(v in 0.0..60.0f64, v_desired in 5.0..60.0f64, r in 0.0..1.0f64) {
            let p = W99Params::default();
            let st = FollowState::free(v, v_desired);
            let (_, regime) = acceleration(&p, &st, r);
            prop_assert_eq!(regime, Regime::Free);
        }
    }
}
