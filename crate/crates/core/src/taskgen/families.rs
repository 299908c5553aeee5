//! Parametric planar trajectory families.
//!
//! Each family maps task parameters to a smooth path `P(s)`, `s ∈ [0, 1]`,
//! with `P(0) = start` and `P(1) = goal`. The expert traverses the path with
//! a minimum-jerk time law.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};

pub const PARAM_NAMES: [&str; 7] = ["start_x", "start_y", "goal_x", "goal_y", "via_x", "via_y", "scale"];

/// Task parameters in workspace units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct TaskParams {
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub via: [f64; 2],
    pub scale: f64,
}

impl TaskParams {
    pub fn to_array(&self) -> [f64; 7] {
        [
            self.start[0],
            self.start[1],
            self.goal[0],
            self.goal[1],
            self.via[0],
            self.via[1],
            self.scale,
        ]
    }

    pub fn from_array(v: [f64; 7]) -> Self {
        Self {
            start: [v[0], v[1]],
            goal: [v[2], v[3]],
            via: [v[4], v[5]],
            scale: v[6],
        }
    }

    fn delta(&self) -> [f64; 2] {
        [self.goal[0] - self.start[0], self.goal[1] - self.start[1]]
    }

    fn unit_normal(&self) -> [f64; 2] {
        let d = self.delta();
        let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
        [-d[1] / n, d[0] / n]
    }

    fn lerp(&self, s: f64) -> [f64; 2] {
        let d = self.delta();
        [self.start[0] + s * d[0], self.start[1] + s * d[1]]
    }
}

/// Inclusive `(lo, hi)` range per parameter, in [`PARAM_NAMES`] order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParamRanges(pub [(f64, f64); 7]);

/// Ranges shared by all families unless overridden.
pub const BASE_RANGES: ParamRanges = ParamRanges([
    (0.05, 0.35),
    (0.05, 0.35),
    (0.65, 0.95),
    (0.65, 0.95),
    (0.5, 0.5),
    (0.5, 0.5),
    (0.05, 0.2),
]);

/// Largest start-to-goal distance under [`BASE_RANGES`].
const MAX_REACH: f64 = 0.9 * std::f64::consts::SQRT_2;
const MAX_SCALE: f64 = 0.2;

/// Peak speed and acceleration of the minimum-jerk law `10τ³ − 15τ⁴ + 6τ⁵`.
const MIN_JERK_SPEED: f64 = 1.875;
const MIN_JERK_ACCEL: f64 = 5.773_502_691_896_258;

pub fn min_jerk(tau: f64) -> f64 {
    tau * tau * tau * (10.0 - 15.0 * tau + 6.0 * tau * tau)
}

pub trait TaskFamily: Send + Sync {
    fn name(&self) -> &'static str;

    /// Demonstration length `T` in actions.
    fn episode_len(&self) -> usize;

    fn ranges(&self) -> ParamRanges {
        BASE_RANGES
    }

    /// Geometric path; must satisfy `P(0) = start`, `P(1) = goal`.
    fn path(&self, p: &TaskParams, s: f64) -> [f64; 2];

    /// Upper bounds on `|P'(s)|` and `|P''(s)|` over the family's ranges.
    fn path_derivative_bounds(&self) -> (f64, f64);

    /// Bound on the second difference of a noise-free `T`-step expert path.
    fn curvature_bound(&self, t_len: usize) -> f64 {
        let (d1, d2) = self.path_derivative_bounds();
        let h = 1.0 / (t_len.max(2) - 1) as f64;
        (d2 * MIN_JERK_SPEED * MIN_JERK_SPEED + d1 * MIN_JERK_ACCEL) * h * h
    }
}

struct Reach;
struct Arc;
struct Lift;
struct SCurve;
struct ViaPoint;
struct Wave;
struct Hook;
struct Loop;

impl TaskFamily for Reach {
    fn name(&self) -> &'static str {
        "reach"
    }
    fn episode_len(&self) -> usize {
        32
    }
    fn ranges(&self) -> ParamRanges {
        let mut r = BASE_RANGES;
        r.0[6] = (0.0, 0.0);
        r
    }
    fn path(&self, p: &TaskParams, s: f64) -> [f64; 2] {
        p.lerp(s)
    }
    fn path_derivative_bounds(&self) -> (f64, f64) {
        (MAX_REACH, 0.0)
    }
}

impl TaskFamily for Arc {
    fn name(&self) -> &'static str {
        "arc"
    }
    fn episode_len(&self) -> usize {
        40
    }
    fn path(&self, p: &TaskParams, s: f64) -> [f64; 2] {
        let base = p.lerp(s);
        let n = p.unit_normal();
        let bump = p.scale * 4.0 * s * (1.0 - s);
        [base[0] + bump * n[0], base[1] + bump * n[1]]
    }
    fn path_derivative_bounds(&self) -> (f64, f64) {
        (MAX_REACH + 4.0 * MAX_SCALE, 8.0 * MAX_SCALE)
    }
}

/// Pick-and-place analogue: lift, carry, lower.
impl TaskFamily for Lift {
    fn name(&self) -> &'static str {
        "lift"
    }
    fn episode_len(&self) -> usize {
        48
    }
    fn path(&self, p: &TaskParams, s: f64) -> [f64; 2] {
        let base = p.lerp(s);
        let u = 2.0 * s - 1.0;
        [base[0], base[1] + p.scale * (1.0 - u * u * u * u)]
    }
    fn path_derivative_bounds(&self) -> (f64, f64) {
        (MAX_REACH + 8.0 * MAX_SCALE, 48.0 * MAX_SCALE)
    }
}

impl TaskFamily for SCurve {
    fn name(&self) -> &'static str {
        "s-curve"
    }
    fn episode_len(&self) -> usize {
        48
    }
    fn path(&self, p: &TaskParams, s: f64) -> [f64; 2] {
        let base = p.lerp(s);
        let n = p.unit_normal();
        let off = p.scale * (2.0 * PI * s).sin();
        [base[0] + off * n[0], base[1] + off * n[1]]
    }
    fn path_derivative_bounds(&self) -> (f64, f64) {
        (MAX_REACH + 2.0 * PI * MAX_SCALE, 4.0 * PI * PI * MAX_SCALE)
    }
}

/// Quadratic Bézier through a free control point.
impl TaskFamily for ViaPoint {
    fn name(&self) -> &'static str {
        "via-point"
    }
    fn episode_len(&self) -> usize {
        40
    }
    fn ranges(&self) -> ParamRanges {
        let mut r = BASE_RANGES;
        r.0[4] = (0.2, 0.8);
        r.0[5] = (0.2, 0.8);
        r.0[6] = (0.0, 0.0);
        r
    }
    fn path(&self, p: &TaskParams, s: f64) -> [f64; 2] {
        let (a, b, c) = ((1.0 - s) * (1.0 - s), 2.0 * s * (1.0 - s), s * s);
        [
            a * p.start[0] + b * p.via[0] + c * p.goal[0],
            a * p.start[1] + b * p.via[1] + c * p.goal[1],
        ]
    }
    fn path_derivative_bounds(&self) -> (f64, f64) {
        // |via − start| and |goal − via| are at most 0.75·√2 per the ranges;
        // start − 2·via + goal lies in [−0.9, 0.9]².
        (2.0 * 0.75 * std::f64::consts::SQRT_2, 2.0 * 0.9 * std::f64::consts::SQRT_2)
    }
}

impl TaskFamily for Wave {
    fn name(&self) -> &'static str {
        "wave"
    }
    fn episode_len(&self) -> usize {
        56
    }
    fn path(&self, p: &TaskParams, s: f64) -> [f64; 2] {
        let base = p.lerp(s);
        let n = p.unit_normal();
        let off = p.scale * (3.0 * PI * s).sin();
        [base[0] + off * n[0], base[1] + off * n[1]]
    }
    fn path_derivative_bounds(&self) -> (f64, f64) {
        (MAX_REACH + 3.0 * PI * MAX_SCALE, 9.0 * PI * PI * MAX_SCALE)
    }
}

/// Overshoots the goal along the reach direction, then settles back.
impl TaskFamily for Hook {
    fn name(&self) -> &'static str {
        "hook"
    }
    fn episode_len(&self) -> usize {
        40
    }
    fn path(&self, p: &TaskParams, s: f64) -> [f64; 2] {
        let k = 2.0 * p.scale;
        p.lerp(s + k * s * (PI * s).sin())
    }
    fn path_derivative_bounds(&self) -> (f64, f64) {
        let k = 2.0 * MAX_SCALE;
        (MAX_REACH * (1.0 + k * (1.0 + PI)), MAX_REACH * k * (2.0 * PI + PI * PI))
    }
}

impl TaskFamily for Loop {
    fn name(&self) -> &'static str {
        "loop"
    }
    fn episode_len(&self) -> usize {
        64
    }
    fn path(&self, p: &TaskParams, s: f64) -> [f64; 2] {
        let base = p.lerp(s);
        let n = p.unit_normal();
        let t = [n[1], -n[0]];
        let a = 0.5 * p.scale * (2.0 * PI * s).sin();
        let b = 0.5 * p.scale * (1.0 - (2.0 * PI * s).cos());
        [base[0] + a * t[0] + b * n[0], base[1] + a * t[1] + b * n[1]]
    }
    fn path_derivative_bounds(&self) -> (f64, f64) {
        (MAX_REACH + PI * MAX_SCALE * std::f64::consts::SQRT_2, 2.0 * PI * PI * MAX_SCALE * std::f64::consts::SQRT_2)
    }
}

/// Families registered by name; registration order fixes the one-hot layout.
pub struct FamilyRegistry {
    families: Vec<Box<dyn TaskFamily>>,
}

impl Default for FamilyRegistry {
    fn default() -> Self {
        let mut reg = Self::empty();
        for f in [
            Box::new(Reach) as Box<dyn TaskFamily>,
            Box::new(Arc),
            Box::new(Lift),
            Box::new(SCurve),
            Box::new(ViaPoint),
            Box::new(Wave),
            Box::new(Hook),
            Box::new(Loop),
        ] {
            reg.register(f).expect("built-in family names are unique");
        }
        reg
    }
}

impl FamilyRegistry {
    pub fn empty() -> Self {
        Self { families: Vec::new() }
    }

    pub fn register(&mut self, family: Box<dyn TaskFamily>) -> Result<()> {
        if self.index_of(family.name()).is_some() {
            return Err(Error::invalid(format!("family {} already registered", family.name())));
        }
        self.families.push(family);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.families.len()
    }

    pub fn is_empty(&self) -> bool {
        self.families.is_empty()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.families.iter().map(|f| f.name()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.families.iter().position(|f| f.name() == name)
    }

    pub fn get(&self, name: &str) -> Result<&dyn TaskFamily> {
        self.families
            .iter()
            .find(|f| f.name() == name)
            .map(|f| f.as_ref())
            .ok_or_else(|| Error::Unknown {
                kind: "task family",
                name: name.to_string(),
            })
    }

    /// Canonical description used in the suite fingerprint.
    pub fn describe(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.families
                .iter()
                .map(|f| {
                    serde_json::json!({
                        "name": f.name(),
                        "episode_len": f.episode_len(),
                        "ranges": f.ranges(),
                    })
                })
                .collect(),
        )
    }
}
