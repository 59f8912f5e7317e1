//! Two-stage coarse-to-fine grid search over two positive hyperparameters.
//!
//! Stage one evaluates a log-spaced coarse grid; stage two re-grids an
//! interval of one coarse cell (in log space) centered on the best point.
//! Evaluations are cached, every score lands in the result table, and grid
//! points can be evaluated on multiple threads (`SPS_THREADS`).

use std::collections::HashMap;
use std::sync::Mutex;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl GridAxis {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo > 0.0) || !(self.hi >= self.lo) || self.points == 0 {
            bail!("grid axis needs 0 < lo <= hi and at least one point");
        }
        Ok(())
    }

    fn values(&self) -> Vec<f64> {
        if self.points == 1 || self.lo == self.hi {
            return vec![self.lo];
        }
        let l0 = self.lo.ln();
        let l1 = self.hi.ln();
        (0..self.points)
            .map(|i| (l0 + (l1 - l0) * i as f64 / (self.points - 1) as f64).exp())
            .collect()
    }

    /// Log-space half width of one grid cell.
    fn half_cell(&self) -> f64 {
        if self.points == 1 || self.lo == self.hi {
            0.0
        } else {
            0.5 * (self.hi.ln() - self.lo.ln()) / (self.points - 1) as f64
        }
    }

    fn refined_around(&self, center: f64) -> GridAxis {
        let h = self.half_cell();
        GridAxis { lo: (center.ln() - h).exp(), hi: (center.ln() + h).exp(), points: self.points }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridEntry {
    pub a: f64,
    pub b: f64,
    pub score: f64,
    /// 0 = coarse stage, 1 = refined stage.
    pub stage: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridOutcome {
    pub best_a: f64,
    pub best_b: f64,
    pub best_score: f64,
    pub table: Vec<GridEntry>,
}

fn thread_count() -> usize {
    std::env::var("SPS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n >= 1)
        .unwrap_or(1)
}

fn eval_stage(
    pairs: &[(f64, f64)],
    score: &(dyn Fn(f64, f64) -> Result<f64> + Sync),
    cache: &Mutex<HashMap<(u64, u64), f64>>,
) -> Result<Vec<f64>> {
    let todo: Vec<(usize, f64, f64)> = pairs
        .iter()
        .enumerate()
        .filter(|(_, (a, b))| !cache.lock().unwrap().contains_key(&(a.to_bits(), b.to_bits())))
        .map(|(i, (a, b))| (i, *a, *b))
        .collect();
    let threads = thread_count().min(todo.len().max(1));
    let results: Mutex<Vec<(usize, Result<f64>)>> = Mutex::new(Vec::new());
    if threads <= 1 {
        for (i, a, b) in &todo {
            results.lock().unwrap().push((*i, score(*a, *b)));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let k = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if k >= todo.len() {
                        break;
                    }
                    let (i, a, b) = todo[k];
                    let s = score(a, b);
                    results.lock().unwrap().push((i, s));
                });
            }
        });
    }
    for (i, s) in results.into_inner().unwrap() {
        let (a, b) = pairs[i];
        let v = s?;
        cache.lock().unwrap().insert((a.to_bits(), b.to_bits()), v);
    }
    Ok(pairs
        .iter()
        .map(|(a, b)| cache.lock().unwrap()[&(a.to_bits(), b.to_bits())])
        .collect())
}

/// Maximize `score` over the two axes with one refinement stage.
pub fn coarse_to_fine(
    axis_a: GridAxis,
    axis_b: GridAxis,
    score: impl Fn(f64, f64) -> Result<f64> + Sync,
) -> Result<GridOutcome> {
    axis_a.validate()?;
    axis_b.validate()?;
    let cache = Mutex::new(HashMap::new());
    let mut table = Vec::new();

    let run_stage = |axis_a: &GridAxis,
                     axis_b: &GridAxis,
                     stage: u8,
                     table: &mut Vec<GridEntry>|
     -> Result<(f64, f64, f64)> {
        let mut pairs = Vec::new();
        for a in axis_a.values() {
            for b in axis_b.values() {
                pairs.push((a, b));
            }
        }
        let scores = eval_stage(&pairs, &score, &cache)?;
        let mut best = (f64::NEG_INFINITY, pairs[0].0, pairs[0].1);
        for ((a, b), s) in pairs.iter().zip(&scores) {
            table.push(GridEntry { a: *a, b: *b, score: *s, stage });
            if *s > best.0 {
                best = (*s, *a, *b);
            }
        }
        Ok((best.1, best.2, best.0))
    };

    let (ca, cb, _cs) = run_stage(&axis_a, &axis_b, 0, &mut table)?;
    let (fa, fb, fs) = run_stage(
        &axis_a.refined_around(ca),
        &axis_b.refined_around(cb),
        1,
        &mut table,
    )?;
    Ok(GridOutcome { best_a: fa, best_b: fb, best_score: fs, table })
}

pub fn write_table_csv(outcome: &GridOutcome, path: &std::path::Path) -> Result<()> {
    let mut out = String::from("stage,a,b,score\n");
    for e in &outcome.table {
        out.push_str(&format!("{},{},{},{}\n", e.stage, e.a, e.b, e.score));
    }
    std::fs::write(path, out)?;
    Ok(())
}
