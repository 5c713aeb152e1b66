use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::exec;
use crate::rng::{self, StreamRng};
use crate::teacher::EpsPredictor;

/// Rows processed together in one lockstep batch.
pub(crate) const ROLLOUT_CHUNK: usize = 64;

/// Per-sample states for every step, `[sample][k][dim]`, from teacher
/// ancestral rollouts started at the noisiest step. Sample `i` uses stream
/// `i` of `seed` for its initial draw and every step's noise.
pub fn collect_ensemble<T: EpsPredictor>(
    teacher: &T,
    cond: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if n == 0 {
        return Err(Error::usage("ensemble needs at least one sample"));
    }
    let k_top = teacher.schedule().num_steps() - 1;
    let dim = teacher.data_dim();
    let n_chunks = n.div_ceil(ROLLOUT_CHUNK);
    let chunks = exec::map_range(n_chunks, |c| -> Result<Vec<Vec<Vec<f64>>>> {
        let lo = c * ROLLOUT_CHUNK;
        let hi = (lo + ROLLOUT_CHUNK).min(n);
        let mut rngs: Vec<StreamRng> = (lo..hi).map(|i| rng::stream(seed, i as u64)).collect();
        let mut xs: Vec<Vec<f64>> = rngs.iter_mut().map(|r| rng::gaussian_vec(r, dim)).collect();
        let mut traj: Vec<Vec<Vec<f64>>> = xs
            .iter()
            .map(|x| {
                let mut t = vec![Vec::new(); k_top + 1];
                t[k_top] = x.clone();
                t
            })
            .collect();
        let conds = vec![cond; xs.len()];
        teacher.ancestral_lockstep(&mut xs, &mut rngs, &conds, k_top, 0, |k, states| {
            for (t, s) in traj.iter_mut().zip(states) {
                t[k] = s.clone();
            }
        })?;
        Ok(traj)
    });
    let mut out = Vec::with_capacity(n);
    for chunk in chunks {
        out.extend(chunk?);
    }
    Ok(out)
}

/// How multi-dimensional states are reduced to one coordinate.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Axis(usize),
    /// First principal axis of the clean-step states.
    Principal { mean: Vec<f64>, direction: Vec<f64> },
}

impl Projection {
    pub fn tag(&self) -> String {
        match self {
            Projection::Axis(i) => format!("axis{i}"),
            Projection::Principal { .. } => "pc1".to_string(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> f64 {
        match self {
            Projection::Axis(i) => x[*i],
            Projection::Principal { mean, direction } => x
                .iter()
                .zip(mean)
                .zip(direction)
                .map(|((v, m), d)| (v - m) * d)
                .sum(),
        }
    }

    /// `axis0` for scalar data, otherwise the leading principal axis of `states`.
    pub fn fit(states: &[Vec<f64>]) -> Result<Self> {
        let first = states
            .first()
            .ok_or_else(|| Error::usage("cannot fit a projection to no states"))?;
        if first.len() == 1 {
            return Ok(Projection::Axis(0));
        }
        let (mean, direction) = leading_axis(states);
        Ok(Projection::Principal { mean, direction })
    }
}

fn leading_axis(states: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = states[0].len();
    let n = states.len() as f64;
    let mut mean = vec![0.0; d];
    for s in states {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for s in states {
        for i in 0..d {
            let di = s[i] - mean[i];
            for j in 0..d {
                cov[i][j] += di * (s[j] - mean[j]) / n;
            }
        }
    }
    // power iteration from a fixed start
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 * 1e-3).collect();
    for _ in 0..500 {
        let mut w: Vec<f64> = cov.iter().map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        w.iter_mut().for_each(|x| *x /= norm);
        let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = w;
        if delta < 1e-13 {
            break;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let (imax, _) = v
        .iter()
        .enumerate()
        .fold((0, 0.0), |acc, (i, x)| if x.abs() > acc.1 { (i, x.abs()) } else { acc });
    if v[imax] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    (mean, v)
}

/// Project raw `[sample][k][dim]` states with a projection fitted on the
/// clean step.
pub fn project_states(states: &[Vec<Vec<f64>>]) -> Result<TrajectoryEnsemble> {
    let clean: Vec<Vec<f64>> = states.iter().map(|t| t[0].clone()).collect();
    let projection = Projection::fit(&clean)?;
    let rows = states
        .iter()
        .map(|t| t.iter().map(|x| projection.apply(x)).collect())
        .collect();
    TrajectoryEnsemble::new(rows, projection.tag())
}

/// Scalar trajectories, one row per sample, columns ordered clean to noisy.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    rows: Vec<Vec<f64>>,
    projection: String,
}

impl TrajectoryEnsemble {
    pub fn new(rows: Vec<Vec<f64>>, projection: impl Into<String>) -> Result<Self> {
        let projection = projection.into();
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::usage("ensemble must be non-empty"));
        }
        let k = rows[0].len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::usage("ensemble rows differ in length"));
        }
        if projection.is_empty() || projection.contains(char::is_whitespace) {
            return Err(Error::usage("projection tag must be a single word"));
        }
        Ok(Self { rows, projection })
    }

    pub fn n_samples(&self) -> usize {
        self.rows.len()
    }

    pub fn num_steps(&self) -> usize {
        self.rows[0].len()
    }

    pub fn projection(&self) -> &str {
        &self.projection
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Column `k` holds every sample's value at step `k`.
    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.num_steps())
            .map(|k| self.rows.iter().map(|r| r[k]).collect())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}\n", self.n_samples(), self.num_steps(), self.projection);
        for row in &self.rows {
            let mut first = true;
            for v in row {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::artifact("empty ensemble file"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::artifact("ensemble header must be `N K projection`"));
        }
        let n: usize = fields[0]
            .parse()
            .map_err(|_| Error::artifact(format!("bad sample count {:?}", fields[0])))?;
        let k: usize = fields[1]
            .parse()
            .map_err(|_| Error::artifact(format!("bad step count {:?}", fields[1])))?;
        let mut rows = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            let row = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::artifact(format!("row {i}: {e}")))?;
            if row.len() != k {
                return Err(Error::artifact(format!(
                    "row {i} has {} values, expected {k}",
                    row.len()
                )));
            }
            rows.push(row);
        }
        if rows.len() != n {
            return Err(Error::artifact(format!(
                "ensemble has {} rows, header says {n}",
                rows.len()
            )));
        }
        Self::new(rows, fields[2]).map_err(|e| Error::artifact(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip_is_exact() {
        let rows = vec![vec![0.1, -2.5e-7, 3.0], vec![1.0 / 3.0, 7.0, -0.0]];
        let e = TrajectoryEnsemble::new(rows, "axis0").unwrap();
        let back = TrajectoryEnsemble::from_text(&e.to_text()).unwrap();
        assert_eq!(e, back);
        assert!(e.to_text().starts_with("2 3 axis0\n"));
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(TrajectoryEnsemble::from_text("").is_err());
        assert!(TrajectoryEnsemble::from_text("2 2 axis0\n1 2\n").is_err());
        assert!(TrajectoryEnsemble::from_text("1 2 axis0\n1 x\n").is_err());
        assert!(TrajectoryEnsemble::from_text("1 2 axis0\n1 2 3\n").is_err());
    }

    #[test]
    fn principal_axis_of_a_line() {
        let states: Vec<Vec<f64>> = (0..50)
            .map(|i| {
                let t = i as f64 / 10.0 - 2.5;
                vec![3.0 * t + 1.0, -4.0 * t]
            })
            .collect();
        let p = Projection::fit(&states).unwrap();
        let Projection::Principal { direction, .. } = &p else {
            panic!("expected a principal axis");
        };
        assert!((direction[0].abs() - 0.6).abs() < 1e-9);
        assert!((direction[1].abs() - 0.8).abs() < 1e-9);
        assert!(direction[1] > 0.0);
        assert_eq!(Projection::fit(&[vec![1.0]]).unwrap(), Projection::Axis(0));
    }
}
