//! CSV outputs: per-epoch metrics, the search trajectory and its
//! plot-ready expansion.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::search::TrajectoryRow;

pub const METRICS_HEADER: &str = "phase,epoch,loss,accuracy,lr,params,macs,wall_time_s";
pub const TRAJECTORY_HEADER: &str = "epoch,train_loss,val_loss,rank_fingerprint,q,lr";
pub const PLOT_HEADER: &str = "epoch,train_loss,val_loss,best_val_loss,rank_changed,q,lr";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Search,
    Eval,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Search => "search",
            Phase::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub loss: f32,
    /// Top-1 accuracy in `[0, 1]`.
    pub accuracy: f64,
    pub lr: f32,
    pub params: usize,
    pub macs: u64,
    pub wall_time_s: f64,
}

pub fn metrics_csv(records: &[MetricRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{:.3}",
            r.phase.name(),
            r.epoch,
            r.loss,
            r.accuracy,
            r.lr,
            r.params,
            r.macs,
            r.wall_time_s
        );
    }
    s
}

pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut s = format!("{TRAJECTORY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:016x},{},{}",
            r.epoch, r.train_loss, r.val_loss, r.fingerprint, r.q, r.lr
        );
    }
    s
}

fn field<T: std::str::FromStr>(line: usize, name: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::Data(format!("trajectory line {line}: bad {name} value \"{raw}\"")))
}

pub fn parse_trajectory_csv(text: &str) -> Result<Vec<TrajectoryRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == TRAJECTORY_HEADER => {}
        Some((_, h)) => {
            return Err(Error::Data(format!(
                "trajectory header is \"{h}\", expected \"{TRAJECTORY_HEADER}\""
            )))
        }
        None => return Err(Error::Data("trajectory file is empty".into())),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let n = i + 1;
            let cols: Vec<&str> = l.split(',').collect();
            if cols.len() != 6 {
                return Err(Error::Data(format!("trajectory line {n}: {} columns, expected 6", cols.len())));
            }
            Ok(TrajectoryRow {
                epoch: field(n, "epoch", cols[0])?,
                train_loss: field(n, "train_loss", cols[1])?,
                val_loss: field(n, "val_loss", cols[2])?,
                fingerprint: u64::from_str_radix(cols[3].trim(), 16)
                    .map_err(|_| Error::Data(format!("trajectory line {n}: bad rank_fingerprint \"{}\"", cols[3])))?,
                q: field(n, "q", cols[4])?,
                lr: field(n, "lr", cols[5])?,
                val_accuracy: None,
            })
        })
        .collect()
}

/// Adds best-so-far validation loss and a rank-change indicator per epoch.
pub fn plot_csv(rows: &[TrajectoryRow]) -> String {
    let mut s = format!("{PLOT_HEADER}\n");
    let mut best = f32::INFINITY;
    let mut prev = None;
    for r in rows {
        best = best.min(r.val_loss);
        let changed = prev != Some(r.fingerprint);
        prev = Some(r.fingerprint);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.val_loss, best, changed as u8, r.q, r.lr
        );
    }
    s
}
