//! Fourth-order (snap-limited) point-to-point setpoints and trajectory classes.
//!
//! A profile is a sequence of constant-snap segments with values in
//! `{-s, 0, +s}`. Continuous phase durations are planned against the five
//! bounds, rounded up to whole samples, and the snap magnitude is then
//! rescaled so the move lands exactly on the requested displacement. Rounding
//! up can only lower every peak, so the bounds stay satisfied.
//!
//! Samples are exact: between samples the snap is constant, so each step
//! integrates the quadruple-integrator chain in closed form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BOUND_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionProfileParams {
    /// Signed move length, m.
    pub displacement: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub j_max: f64,
    pub s_max: f64,
}

impl MotionProfileParams {
    pub fn new(displacement: f64, v_max: f64, a_max: f64, j_max: f64, s_max: f64) -> Self {
        Self { displacement, v_max, a_max, j_max, s_max }
    }

    fn validate(&self) -> Result<()> {
        let bounds = [self.v_max, self.a_max, self.j_max, self.s_max];
        if !self.displacement.is_finite() || bounds.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "motion bounds must be finite and positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Whole-sample durations of the four phase types: constant snap, constant
/// jerk, constant acceleration, constant velocity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCounts {
    pub snap: usize,
    pub jerk: usize,
    pub acc: usize,
    pub cruise: usize,
}

impl PhaseCounts {
    /// Number of sample intervals in the move (excluding dwell).
    pub fn steps(&self) -> usize {
        8 * self.snap + 4 * self.jerk + 2 * self.acc + self.cruise
    }

    /// Displacement produced by unit snap at sample time `ts`.
    fn unit_displacement(&self, ts: f64) -> f64 {
        let (s, j, a, v) = (self.snap as f64, self.jerk as f64, self.acc as f64, self.cruise as f64);
        s * (s + j) * (2.0 * s + j + a) * (4.0 * s + 2.0 * j + a + v) * ts.powi(4)
    }

    /// Snap sign pattern of the move, one entry per sample interval.
    fn snap_pattern(&self) -> Vec<f64> {
        let mut accel = Vec::with_capacity(4 * self.snap + 2 * self.jerk + self.acc);
        for (value, count) in [
            (1.0, self.snap),
            (0.0, self.jerk),
            (-1.0, self.snap),
            (0.0, self.acc),
            (-1.0, self.snap),
            (0.0, self.jerk),
            (1.0, self.snap),
        ] {
            accel.extend(std::iter::repeat_n(value, count));
        }
        let mut out = accel.clone();
        out.extend(std::iter::repeat_n(0.0, self.cruise));
        out.extend(accel.iter().map(|v| -v));
        out
    }
}

/// Continuous phase durations `[t_snap, t_jerk, t_acc, t_cruise]` of the
/// time-optimal symmetric profile for a positive distance.
fn plan_durations(distance: f64, p: &MotionProfileParams) -> [f64; 4] {
    let (v, a, j, s) = (p.v_max, p.a_max, p.j_max, p.s_max);

    let t_s = (j / s)
        .min((a / s).sqrt())
        .min((v / (2.0 * s)).cbrt())
        .min((distance / (8.0 * s)).powf(0.25));
    let jp = s * t_s;

    let tj_acc = (a / jp - t_s).max(0.0);
    let tj_vel = ((-3.0 * t_s + (t_s * t_s + 4.0 * v / jp).sqrt()) / 2.0).max(0.0);
    let mut t_j = tj_acc.min(tj_vel);
    let dist_at = |tj: f64| 2.0 * jp * (t_s + tj) * (2.0 * t_s + tj).powi(2);
    if dist_at(t_j) > distance {
        let (mut lo, mut hi) = (0.0, t_j);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if dist_at(mid) > distance {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        t_j = lo;
    }

    let ap = jp * (t_s + t_j);
    let b = 2.0 * t_s + t_j;
    let ta_vel = (v / ap - b).max(0.0);
    let ta_dist = ((-3.0 * b + (b * b + 4.0 * distance / ap).sqrt()) / 2.0).max(0.0);
    let t_a = ta_vel.min(ta_dist);

    let vp = ap * (b + t_a);
    let t_v = (distance / vp - (4.0 * t_s + 2.0 * t_j + t_a)).max(0.0);
    [t_s, t_j, t_a, t_v]
}

fn samples_for(t: f64, ts: f64) -> usize {
    let n = t / ts;
    (n - 1e-9 * n.max(1.0)).ceil().max(0.0) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub ts: f64,
    pub r: Vec<f64>,
    pub vel: Vec<f64>,
    pub acc: Vec<f64>,
    pub jerk: Vec<f64>,
    pub snap: Vec<f64>,
    pub params: MotionProfileParams,
    pub phases: PhaseCounts,
    /// Magnitude of the snap actually used, at most `s_max`.
    pub snap_level: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    /// Number of sample intervals `n_d`; the profile has `n_d + 1` samples.
    pub fn n_d(&self) -> usize {
        self.r.len().saturating_sub(1)
    }

    pub fn duration(&self) -> f64 {
        self.n_d() as f64 * self.ts
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| k as f64 * self.ts).collect()
    }

    /// Largest velocity magnitude reached.
    pub fn peak_velocity(&self) -> f64 {
        self.vel.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Sample indices of the constant-velocity interval, located from the
    /// profile's own velocity array.
    pub fn cruise_window(&self) -> std::ops::Range<usize> {
        let vp = self.peak_velocity();
        if vp == 0.0 {
            return 0..0;
        }
        let tol = 1e-6 * vp;
        let first = self.vel.iter().position(|v| (v.abs() - vp).abs() < tol);
        let last = self.vel.iter().rposition(|v| (v.abs() - vp).abs() < tol);
        match (first, last) {
            (Some(a), Some(b)) => a..b + 1,
            _ => 0..0,
        }
    }

    /// Appends a terminal dwell so the profile has `len` samples.
    pub fn pad_to(&mut self, len: usize) {
        if len <= self.len() {
            return;
        }
        let end = *self.r.last().unwrap_or(&0.0);
        self.r.resize(len, end);
        self.vel.resize(len, 0.0);
        self.acc.resize(len, 0.0);
        self.jerk.resize(len, 0.0);
        self.snap.resize(len, 0.0);
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv_to(std::fs::File::create(path)?)
    }

    /// Columns `t, r, v, a, j, s`, one row per sample.
    pub fn write_csv_to<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "r", "v", "a", "j", "s"])?;
        for k in 0..self.len() {
            w.write_record(
                [k as f64 * self.ts, self.r[k], self.vel[k], self.acc[k], self.jerk[k], self.snap[k]]
                    .iter()
                    .map(|v| format!("{v:e}")),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Samples the profile for `params` at sample time `ts`.
pub fn generate_fourth_order(params: MotionProfileParams, ts: f64) -> Result<Trajectory> {
    params.validate()?;
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(Error::InvalidParameter(format!("sample time must be positive, got {ts}")));
    }
    let distance = params.displacement.abs();
    if distance == 0.0 {
        return Ok(Trajectory {
            ts,
            r: vec![0.0],
            vel: vec![0.0],
            acc: vec![0.0],
            jerk: vec![0.0],
            snap: vec![0.0],
            params,
            phases: PhaseCounts::default(),
            snap_level: 0.0,
        });
    }

    let [t_s, t_j, t_a, t_v] = plan_durations(distance, &params);
    let phases = PhaseCounts {
        snap: samples_for(t_s, ts).max(1),
        jerk: samples_for(t_j, ts),
        acc: samples_for(t_a, ts),
        cruise: samples_for(t_v, ts),
    };
    let level = distance / phases.unit_displacement(ts);
    let sign = params.displacement.signum();

    let pattern = phases.snap_pattern();
    let m = pattern.len();
    let (mut r, mut vel, mut acc, mut jerk, mut snap) =
        (vec![0.0; m + 1], vec![0.0; m + 1], vec![0.0; m + 1], vec![0.0; m + 1], vec![0.0; m + 1]);
    let (t2, t3, t4) = (ts * ts / 2.0, ts.powi(3) / 6.0, ts.powi(4) / 24.0);
    for k in 0..m {
        let s = sign * level * pattern[k];
        snap[k] = s;
        jerk[k + 1] = jerk[k] + ts * s;
        acc[k + 1] = acc[k] + ts * jerk[k] + t2 * s;
        vel[k + 1] = vel[k] + ts * acc[k] + t2 * jerk[k] + t3 * s;
        r[k + 1] = r[k] + ts * vel[k] + t2 * acc[k] + t3 * jerk[k] + t4 * s;
    }

    let traj = Trajectory { ts, r, vel, acc, jerk, snap, params, phases, snap_level: level };
    check_bounds(&traj)?;
    Ok(traj)
}

fn check_bounds(t: &Trajectory) -> Result<()> {
    let p = &t.params;
    let peak = |xs: &[f64]| xs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let checks = [
        ("snap", peak(&t.snap), p.s_max),
        ("jerk", peak(&t.jerk), p.j_max),
        ("acceleration", peak(&t.acc), p.a_max),
        ("velocity", peak(&t.vel), p.v_max),
    ];
    for (name, value, bound) in checks {
        if value > bound * (1.0 + BOUND_EPS) {
            return Err(Error::InvalidParameter(format!(
                "{name} peak {value:e} exceeds bound {bound:e} for {p:?}"
            )));
        }
    }
    Ok(())
}

/// Value lists swept lexicographically; `displacement` varies slowest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterGrid {
    pub displacement: Vec<f64>,
    pub v_max: Vec<f64>,
    pub a_max: Vec<f64>,
    pub j_max: Vec<f64>,
    pub s_max: Vec<f64>,
}

impl ParameterGrid {
    pub fn single(p: MotionProfileParams) -> Self {
        Self {
            displacement: vec![p.displacement],
            v_max: vec![p.v_max],
            a_max: vec![p.a_max],
            j_max: vec![p.j_max],
            s_max: vec![p.s_max],
        }
    }

    fn lists(&self) -> [&[f64]; 5] {
        [&self.displacement, &self.v_max, &self.a_max, &self.j_max, &self.s_max]
    }

    pub fn len(&self) -> usize {
        self.lists().iter().map(|l| l.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-parameter indices of the `flat`-th tuple.
    pub fn indices(&self, flat: usize) -> [usize; 5] {
        let lists = self.lists();
        let mut out = [0; 5];
        let mut rem = flat;
        for d in (0..5).rev() {
            out[d] = rem % lists[d].len();
            rem /= lists[d].len();
        }
        out
    }

    pub fn params(&self, flat: usize) -> MotionProfileParams {
        let i = self.indices(flat);
        MotionProfileParams::new(
            self.displacement[i[0]],
            self.v_max[i[1]],
            self.a_max[i[2]],
            self.j_max[i[3]],
            self.s_max[i[4]],
        )
    }
}

/// Family of fourth-order references sharing a sample time and length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryClass {
    pub ts: f64,
    pub grid: ParameterGrid,
    /// Flat grid index of each member.
    pub tuple_ids: Vec<usize>,
    pub members: Vec<Trajectory>,
}

impl TrajectoryClass {
    /// Profile order shared by all members.
    pub const ORDER: usize = 4;

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Common sample count `n_d + 1`.
    pub fn samples(&self) -> usize {
        self.members.first().map_or(0, Trajectory::len)
    }

    fn subset(&self, picks: &[usize]) -> TrajectoryClass {
        TrajectoryClass {
            ts: self.ts,
            grid: self.grid.clone(),
            tuple_ids: picks.iter().map(|&i| self.tuple_ids[i]).collect(),
            members: picks.iter().map(|&i| self.members[i].clone()).collect(),
        }
    }
}

/// One member per grid tuple, padded with terminal dwell to a common length.
pub fn build_class(grid: &ParameterGrid, ts: f64) -> Result<TrajectoryClass> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("parameter grid is empty".into()));
    }
    let mut members = (0..grid.len())
        .map(|i| {
            generate_fourth_order(grid.params(i), ts).map_err(|e| {
                Error::InvalidParameter(format!("grid tuple {:?}: {e}", grid.indices(i)))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let len = members.iter().map(Trajectory::len).max().unwrap_or(0);
    for m in &mut members {
        m.pad_to(len);
    }
    Ok(TrajectoryClass { ts, grid: grid.clone(), tuple_ids: (0..grid.len()).collect(), members })
}

/// Picks the held-out members of a class by position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestSelector {
    /// Positions `n-1, 2n-1, ...`.
    EveryNth(usize),
    Indices(Vec<usize>),
}

impl TestSelector {
    fn picks(&self, len: usize) -> Result<Vec<usize>> {
        match self {
            TestSelector::EveryNth(0) => Err(Error::InvalidParameter("EveryNth(0)".into())),
            TestSelector::EveryNth(n) => Ok((0..len).filter(|i| (i + 1) % n == 0).collect()),
            TestSelector::Indices(ix) => {
                let mut sorted = ix.clone();
                sorted.sort_unstable();
                if sorted.windows(2).any(|w| w[0] == w[1]) {
                    return Err(Error::InvalidParameter("test selection lists a member twice".into()));
                }
                if sorted.last().is_some_and(|&i| i >= len) {
                    return Err(Error::InvalidParameter("test selection index out of range".into()));
                }
                Ok(sorted)
            }
        }
    }
}

/// Splits into `(train, test)`; both parts must be nonempty.
pub fn split_class(class: &TrajectoryClass, selector: &TestSelector) -> Result<(TrajectoryClass, TrajectoryClass)> {
    let test = selector.picks(class.len())?;
    if test.is_empty() || test.len() == class.len() {
        return Err(Error::InvalidParameter(format!(
            "split must leave both sides nonempty ({} of {} selected)",
            test.len(),
            class.len()
        )));
    }
    let train: Vec<usize> = (0..class.len()).filter(|i| test.binary_search(i).is_err()).collect();
    Ok((class.subset(&train), class.subset(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn desk() -> MotionProfileParams {
        MotionProfileParams::new(0.12, 0.2, 3.0, 100.0, 5000.0)
    }

    fn peak(xs: &[f64]) -> f64 {
        xs.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn zero_displacement_is_all_zero() {
        let t = generate_fourth_order(MotionProfileParams::new(0.0, 1.0, 1.0, 1.0, 1.0), 1e-3).unwrap();
        for xs in [&t.r, &t.vel, &t.acc, &t.jerk, &t.snap] {
            assert!(xs.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn cruise_phase_hits_velocity_bound() {
        // Durations chosen to be whole samples: t_s = 10 ms, t_j = 10 ms,
        // t_a = 20 ms, t_v = 500 ms, so no rescaling is needed.
        let ts = 1e-3;
        let p = MotionProfileParams::new(0.058, 0.1, 2.0, 100.0, 1e4);
        let t = generate_fourth_order(p, ts).unwrap();
        assert_eq!(t.phases, PhaseCounts { snap: 10, jerk: 10, acc: 20, cruise: 500 });

        // independent oracle: fine Euler integration of the snap sequence
        let sub = 200;
        let h = ts / sub as f64;
        let (mut j, mut a, mut v) = (0.0, 0.0, 0.0);
        let mut v_oracle = vec![0.0];
        for k in 0..t.len() - 1 {
            for _ in 0..sub {
                v += h * a + 0.5 * h * h * j;
                a += h * j;
                j += h * t.snap[k];
            }
            v_oracle.push(v);
        }
        let window = t.cruise_window();
        assert!(window.len() >= 500, "{window:?}");
        for k in window {
            assert!((v_oracle[k] - p.v_max).abs() < 1e-6);
            assert!((t.vel[k] - p.v_max).abs() < 1e-9 * p.v_max);
            assert!(t.acc[k].abs() < 1e-12);
        }
    }

    #[test]
    fn bounds_and_finite_differences() {
        // Fine sampling keeps the central-difference truncation term
        // ts^2 * s_max / 6 below 1e-6 of a_max for every set below.
        let ts = 2e-5;
        for p in [
            desk(),
            MotionProfileParams::new(0.01, 0.5, 5.0, 300.0, 2e4),
            MotionProfileParams::new(-0.3, 0.25, 2.0, 50.0, 1000.0),
            MotionProfileParams::new(2e-4, 1.0, 10.0, 1000.0, 1e5),
        ] {
            let t = generate_fourth_order(p, ts).unwrap();
            assert!(peak(&t.snap) <= p.s_max * (1.0 + 1e-12));
            assert!(peak(&t.jerk) <= p.j_max * (1.0 + 1e-9));
            assert!(peak(&t.acc) <= p.a_max * (1.0 + 1e-9));
            assert!(peak(&t.vel) <= p.v_max * (1.0 + 1e-9));
            assert_eq!(t.r[0], 0.0);
            assert_relative_eq!(*t.r.last().unwrap(), p.displacement, max_relative = 1e-9);
            for k in 1..t.len() - 1 {
                let fd = (t.vel[k + 1] - t.vel[k - 1]) / (2.0 * ts);
                assert!((fd - t.acc[k]).abs() <= 1e-6 * p.a_max, "k={k} fd={fd} a={}", t.acc[k]);
            }
        }
    }

    #[test]
    fn snap_takes_three_levels() {
        let t = generate_fourth_order(desk(), 1e-3).unwrap();
        assert!(t.snap_level <= desk().s_max);
        assert!(t
            .snap
            .iter()
            .all(|s| *s == 0.0 || *s == t.snap_level || *s == -t.snap_level));
    }

    #[test]
    fn jerk_is_cumulative_snap() {
        let t = generate_fourth_order(desk(), 1e-3).unwrap();
        let mut j = 0.0;
        for k in 0..t.len() {
            assert!((t.jerk[k] - j).abs() <= 1e-9 * desk().j_max);
            j += t.snap[k] * t.ts;
        }
    }

    #[test]
    fn velocity_is_time_symmetric() {
        let t = generate_fourth_order(desk(), 1e-3).unwrap();
        let n = t.len() - 1;
        for k in 0..=n {
            assert!((t.vel[k] - t.vel[n - k]).abs() < 1e-9, "k={k}");
        }
    }

    #[test]
    fn doubling_all_limits_doubles_positions() {
        let p = desk();
        let q = MotionProfileParams::new(2.0 * p.displacement, 2.0 * p.v_max, 2.0 * p.a_max, 2.0 * p.j_max, 2.0 * p.s_max);
        let a = generate_fourth_order(p, 1e-3).unwrap();
        let b = generate_fourth_order(q, 1e-3).unwrap();
        assert_eq!(a.phases, b.phases);
        for (x, y) in a.r.iter().zip(&b.r) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn short_moves_have_degenerate_phases() {
        let t = generate_fourth_order(MotionProfileParams::new(1e-6, 1.0, 10.0, 1000.0, 1e5), 1e-3).unwrap();
        assert_eq!(t.phases.cruise, 0);
        assert_relative_eq!(*t.r.last().unwrap(), 1e-6, max_relative = 1e-9);
    }

    #[test]
    fn invalid_bounds_are_rejected() {
        assert!(generate_fourth_order(MotionProfileParams::new(1.0, 0.0, 1.0, 1.0, 1.0), 1e-3).is_err());
        assert!(generate_fourth_order(MotionProfileParams::new(1.0, 1.0, -1.0, 1.0, 1.0), 1e-3).is_err());
        assert!(generate_fourth_order(desk(), 0.0).is_err());
    }

    fn desk_grid() -> ParameterGrid {
        ParameterGrid {
            displacement: vec![0.06, 0.08, 0.10, 0.12, 0.14],
            v_max: vec![0.15, 0.2],
            a_max: vec![2.0, 3.0],
            j_max: vec![60.0, 80.0, 100.0],
            s_max: vec![5000.0],
        }
    }

    #[test]
    fn class_sizes() {
        let one = build_class(&ParameterGrid::single(desk()), 1e-3).unwrap();
        assert_eq!(one.len(), 1);

        let class = build_class(&desk_grid(), 1e-3).unwrap();
        assert_eq!(class.len(), 60);
        let n = class.samples();
        assert!(class.members.iter().all(|m| m.len() == n));
        // lexicographic ordering: displacement varies slowest
        assert_eq!(class.members[0].params.displacement, 0.06);
        assert_eq!(class.members[12].params.displacement, 0.08);
        assert_eq!(class.members[1].params.j_max, 80.0);
    }

    #[test]
    fn bad_grid_tuple_is_named() {
        let mut g = desk_grid();
        g.a_max.push(-1.0);
        let err = build_class(&g, 1e-3).unwrap_err().to_string();
        assert!(err.contains("grid tuple"), "{err}");
    }

    #[test]
    fn split_examples() {
        let mut g = desk_grid();
        g.displacement.truncate(1);
        g.j_max.truncate(1);
        g.a_max.truncate(1);
        g.v_max = vec![0.1, 0.11, 0.12, 0.13, 0.14, 0.15, 0.16, 0.17, 0.18, 0.19];
        let class = build_class(&g, 1e-3).unwrap();
        let (train, test) = split_class(&class, &TestSelector::Indices(vec![9])).unwrap();
        assert_eq!((train.len(), test.len()), (9, 1));
        assert_eq!(test.tuple_ids, vec![9]);

        assert!(split_class(&class, &TestSelector::Indices(vec![])).is_err());
        assert!(split_class(&class, &TestSelector::Indices(vec![1, 1])).is_err());
        assert!(split_class(&class, &TestSelector::Indices((0..10).collect())).is_err());

        let a = split_class(&class, &TestSelector::EveryNth(7)).unwrap();
        let b = split_class(&class, &TestSelector::EveryNth(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.tuple_ids, vec![6]);
        assert!(a.0.tuple_ids.iter().all(|i| !a.1.tuple_ids.contains(i)));
    }

    #[test]
    fn csv_has_expected_columns() {
        let dir = std::env::temp_dir().join(format!("traj-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.csv");
        let t = generate_fourth_order(desk(), 1e-3).unwrap();
        t.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,r,v,a,j,s\n"));
        assert_eq!(text.lines().count(), t.len() + 1);
        std::fs::remove_dir_all(dir).ok();
    }
}
