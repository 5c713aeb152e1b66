use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub center: [f64; 2],
    pub radius: f64,
}

/// Kinematic obstacle course: reach the finish line from the start point
/// while threading two rows of circular obstacles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AvoidTask {
    pub start: [f64; 2],
    pub finish_y: f64,
    pub row_y: [f64; 2],
    pub centers_x: [f64; 3],
    pub radius: f64,
    /// Waypoints per trajectory.
    pub horizon: usize,
    /// Lateral jitter applied to the gap crossings of demos.
    pub demo_noise: f64,
    /// Distance covered past the finish line by the last waypoint.
    pub overshoot: f64,
}

impl Default for AvoidTask {
    fn default() -> Self {
        Self {
            start: [0.5, 0.0],
            finish_y: 1.0,
            row_y: [0.35, 0.7],
            centers_x: [0.2, 0.5, 0.8],
            radius: 0.08,
            horizon: 16,
            demo_noise: 0.015,
            overshoot: 0.05,
        }
    }
}

/// Gap-index pairs `(row 1, row 2)` used by default.
pub const DEFAULT_FAMILIES: [(usize, usize); 6] = [(1, 0), (1, 1), (1, 2), (2, 1), (2, 2), (2, 3)];

pub type Waypoints = Vec<[f64; 2]>;

impl AvoidTask {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 8 {
            return Err(Error::config("avoid.horizon", "must be at least 8"));
        }
        if !(self.radius > 0.0) {
            return Err(Error::config("avoid.radius", "must be positive"));
        }
        let r = self.radius;
        if !(self.start[1] < self.row_y[0] - r
            && self.row_y[0] + r < self.row_y[1] - r
            && self.row_y[1] + r < self.finish_y)
        {
            return Err(Error::config(
                "avoid.row_y",
                "obstacle rows must be disjoint and lie between start and finish",
            ));
        }
        if !self.centers_x.windows(2).all(|w| w[1] - w[0] > 2.0 * self.radius) {
            return Err(Error::config("avoid.centers_x", "circles in a row must not overlap"));
        }
        if !(self.demo_noise >= 0.0 && self.overshoot >= 0.0) {
            return Err(Error::config("avoid.demo_noise", "noise and overshoot must be >= 0"));
        }
        Ok(())
    }

    pub fn obstacles(&self) -> Vec<Circle> {
        self.row_y
            .iter()
            .flat_map(|&y| {
                self.centers_x.iter().map(move |&x| Circle {
                    center: [x, y],
                    radius: self.radius,
                })
            })
            .collect()
    }

    /// Lateral midpoint of gap `g` in a row; gaps 0 and 3 are the outer
    /// passages bounded by the unit square.
    pub fn gap_center(&self, g: usize) -> Result<f64> {
        let c = &self.centers_x;
        let r = self.radius;
        Ok(match g {
            0 => 0.5 * (c[0] - r),
            1 | 2 => 0.5 * (c[g - 1] + c[g]),
            3 => 0.5 * (c[2] + r + 1.0),
            _ => return Err(Error::usage(format!("gap index {g} out of range 0..4"))),
        })
    }

    /// Waypoints evenly spaced in height. The path holds each row's lateral
    /// position across that row's obstacle band and eases between rows.
    pub fn path_through(&self, xs: [f64; 2]) -> Waypoints {
        let r = self.radius;
        let knots_y = [
            self.start[1],
            self.row_y[0] - r,
            self.row_y[0] + r,
            self.row_y[1] - r,
            self.row_y[1] + r,
            self.finish_y + self.overshoot,
        ];
        let knots_x = [self.start[0], xs[0], xs[0], xs[1], xs[1], xs[1]];
        let h = self.horizon;
        let last = knots_y.len() - 2;
        (0..h)
            .map(|i| {
                let y = knots_y[0] + (knots_y[last + 1] - knots_y[0]) * i as f64 / (h - 1) as f64;
                let seg = (0..=last).find(|&s| y <= knots_y[s + 1] + 1e-12).unwrap_or(last);
                let t = ((y - knots_y[seg]) / (knots_y[seg + 1] - knots_y[seg])).clamp(0.0, 1.0);
                let ease = 0.5 * (1.0 - (std::f64::consts::PI * t).cos());
                [knots_x[seg] + (knots_x[seg + 1] - knots_x[seg]) * ease, y]
            })
            .collect()
    }

    /// Scripted demos: `per_family` jittered paths for each gap pair.
    pub fn gen_demos<R: Rng + ?Sized>(
        &self,
        families: &[(usize, usize)],
        per_family: usize,
        rng: &mut R,
    ) -> Result<Vec<(Waypoints, (usize, usize))>> {
        self.validate()?;
        let mut out = Vec::with_capacity(families.len() * per_family);
        for &(g1, g2) in families {
            let base = [self.gap_center(g1)?, self.gap_center(g2)?];
            let nominal = self.path_through(base);
            if !self.success(&nominal) || self.family(&nominal) != Some((g1, g2)) {
                return Err(Error::config(
                    "avoid.families",
                    format!("family ({g1}, {g2}) has no collision-free path"),
                ));
            }
            for _ in 0..per_family {
                let mut accepted = None;
                for _ in 0..100 {
                    let jittered = [
                        base[0] + self.demo_noise * rng::gaussian(rng),
                        base[1] + self.demo_noise * rng::gaussian(rng),
                    ];
                    let path = self.path_through(jittered);
                    if self.success(&path) && self.family(&path) == Some((g1, g2)) {
                        accepted = Some(path);
                        break;
                    }
                }
                let path = accepted.ok_or_else(|| {
                    Error::config("avoid.demo_noise", "jitter too large to keep demos collision-free")
                })?;
                out.push((path, (g1, g2)));
            }
        }
        Ok(out)
    }

    /// True iff no segment enters an obstacle's open disk and the last
    /// waypoint is at or beyond the finish line.
    pub fn success(&self, path: &[[f64; 2]]) -> bool {
        if path.is_empty() || path.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return false;
        }
        if path[path.len() - 1][1] < self.finish_y {
            return false;
        }
        let obstacles = self.obstacles();
        let hit = |a: [f64; 2], b: [f64; 2]| {
            obstacles
                .iter()
                .any(|c| segment_point_distance(a, b, c.center) < c.radius)
        };
        if path.len() == 1 {
            return !hit(path[0], path[0]);
        }
        !path.windows(2).any(|w| hit(w[0], w[1]))
    }

    /// Gap index crossed in each row, from the first upward crossing of the
    /// row height.
    pub fn family(&self, path: &[[f64; 2]]) -> Option<(usize, usize)> {
        let cross = |y_row: f64| -> Option<usize> {
            for w in path.windows(2) {
                let (a, b) = (w[0], w[1]);
                if a[1] < y_row && b[1] >= y_row {
                    let t = (y_row - a[1]) / (b[1] - a[1]);
                    let x = a[0] + t * (b[0] - a[0]);
                    return Some(self.centers_x.iter().filter(|&&c| c < x).count());
                }
            }
            None
        };
        Some((cross(self.row_y[0])?, cross(self.row_y[1])?))
    }

    /// Family of a successful path, `None` for failures.
    pub fn label(&self, path: &[[f64; 2]]) -> Option<(usize, usize)> {
        if self.success(path) {
            self.family(path)
        } else {
            None
        }
    }

    /// Height of waypoint `i` on the nominal evenly spaced ladder.
    pub fn nominal_y(&self, i: usize) -> f64 {
        let top = self.finish_y + self.overshoot;
        self.start[1] + (top - self.start[1]) * i as f64 / (self.horizon.max(2) - 1) as f64
    }

    /// Flattened generative variable: lateral position centred on the
    /// course, height relative to the nominal ladder.
    pub fn encode(&self, path: &[[f64; 2]]) -> Vec<f64> {
        path.iter()
            .enumerate()
            .flat_map(|(i, p)| [2.0 * (p[0] - 0.5), 2.0 * (p[1] - self.nominal_y(i))])
            .collect()
    }

    pub fn decode(&self, x: &[f64]) -> Waypoints {
        x.chunks(2)
            .enumerate()
            .map(|(i, c)| [0.5 + 0.5 * c[0], self.nominal_y(i) + 0.5 * c[1]])
            .collect()
    }

    /// Conditioning vector: the encoded start point.
    pub fn cond(&self) -> Vec<f64> {
        self.encode(&[self.start])
    }

    pub fn dataset<R: Rng + ?Sized>(
        &self,
        families: &[(usize, usize)],
        per_family: usize,
        rng: &mut R,
    ) -> Result<Dataset> {
        let demos = self.gen_demos(families, per_family, rng)?;
        let cond = self.cond();
        let (x0, labels): (Vec<_>, Vec<_>) = demos
            .iter()
            .map(|(p, (g1, g2))| (self.encode(p), format!("{g1}-{g2}")))
            .unzip();
        Dataset::new(x0, vec![cond; demos.len()], labels)
    }
}

pub fn segment_point_distance(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    };
    let q = [a[0] + t * d[0] - p[0], a[1] + t * d[1] - p[1]];
    (q[0] * q[0] + q[1] * q[1]).sqrt()
}
