use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::generator::Scene;

pub const CSV_HEADER: &str = "step,stage,t,sigma,view,loss,grad_norm,denoiser_evals,wall_ms";

/// One optimizer update.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub stage: String,
    pub t: f64,
    pub sigma: f64,
    pub view: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Denoiser evaluations spent by this update.
    pub denoiser_evals: usize,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    Aborted { step: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub rows: Vec<TrajectoryRow>,
    pub final_scene: Option<Scene>,
    pub status: RunStatus,
}

impl Default for TrajectoryRecord {
    fn default() -> Self {
        Self { rows: Vec::new(), final_scene: None, status: RunStatus::Completed }
    }
}

impl TrajectoryRecord {
    pub fn total_denoiser_evals(&self) -> usize {
        self.rows.iter().map(|r| r.denoiser_evals).sum()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    pub fn grad_norms(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.grad_norm).collect()
    }

    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    /// Appends `other`, renumbering its steps to continue this record.
    pub fn extend_from(&mut self, other: TrajectoryRecord) {
        let offset = self.rows.last().map_or(0, |r| r.step + 1);
        for mut r in other.rows {
            r.step += offset;
            self.rows.push(r);
        }
        self.final_scene = other.final_scene;
        if let RunStatus::Aborted { step, reason } = other.status {
            self.status = RunStatus::Aborted { step: step + offset, reason };
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.step, r.stage, r.t, r.sigma, r.view, r.loss, r.grad_norm, r.denoiser_evals, r.wall_ms
            );
        }
        out
    }

    /// Parses the CSV produced by [`to_csv`](Self::to_csv).
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == CSV_HEADER => {}
            other => return Err(Error::Format(format!("unexpected trajectory header {other:?}"))),
        }
        let bad = |n: usize, what: &str| Error::Format(format!("trajectory line {n}: bad {what}"));
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad(n + 2, "field count"));
            }
            rows.push(TrajectoryRow {
                step: f[0].parse().map_err(|_| bad(n + 2, "step"))?,
                stage: f[1].to_string(),
                t: f[2].parse().map_err(|_| bad(n + 2, "t"))?,
                sigma: f[3].parse().map_err(|_| bad(n + 2, "sigma"))?,
                view: f[4].parse().map_err(|_| bad(n + 2, "view"))?,
                loss: f[5].parse().map_err(|_| bad(n + 2, "loss"))?,
                grad_norm: f[6].parse().map_err(|_| bad(n + 2, "grad_norm"))?,
                denoiser_evals: f[7].parse().map_err(|_| bad(n + 2, "denoiser_evals"))?,
                wall_ms: f[8].parse().map_err(|_| bad(n + 2, "wall_ms"))?,
            });
        }
        Ok(Self { rows, final_scene: None, status: RunStatus::Completed })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize, loss: f64) -> TrajectoryRow {
        TrajectoryRow {
            step,
            stage: "nerf".into(),
            t: 0.5,
            sigma: 2.5,
            view: 3,
            loss,
            grad_norm: 0.1,
            denoiser_evals: 2,
            wall_ms: 0,
        }
    }

    #[test]
    fn golden_csv() {
        let rec = TrajectoryRecord { rows: vec![row(0, 1.5), row(1, 0.25)], ..Default::default() };
        assert_eq!(
            rec.to_csv(),
            "step,stage,t,sigma,view,loss,grad_norm,denoiser_evals,wall_ms\n\
             0,nerf,0.5,2.5,3,1.5,0.1,2,0\n\
             1,nerf,0.5,2.5,3,0.25,0.1,2,0\n"
        );
    }

    #[test]
    fn csv_round_trip_exact() {
        let rec = TrajectoryRecord { rows: vec![row(0, 1.0 / 3.0), row(1, f64::NAN), row(2, 1e-300)], ..Default::default() };
        let back = TrajectoryRecord::from_csv(&rec.to_csv()).unwrap();
        assert_eq!(back.rows[0].loss.to_bits(), rec.rows[0].loss.to_bits());
        assert!(back.rows[1].loss.is_nan());
        assert_eq!(back.rows[2].loss, 1e-300);
        assert!(TrajectoryRecord::from_csv("a,b\n").is_err());
    }

    #[test]
    fn concatenation_renumbers() {
        let mut a = TrajectoryRecord { rows: vec![row(0, 1.0), row(1, 1.0)], ..Default::default() };
        let b = TrajectoryRecord { rows: vec![row(0, 1.0), row(1, 1.0)], ..Default::default() };
        a.extend_from(b);
        let steps: Vec<usize> = a.rows.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 1, 2, 3]);
    }
}
