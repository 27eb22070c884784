//! Monte-Carlo study of motion averaging against the number of retrieved
//! pairs and the rotation averaging mode.
//!
//! Each trial draws a general-position scene with one query, ranks the
//! database cameras by distance to the query and, for every `K`, localizes
//! the query from the `K` nearest cameras with both averaging modes. Noise
//! for a given (query, database) pair is identical across `K` and modes, so
//! the comparisons are paired.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::averaging::{solve_absolute_pose, AveragingConfig, PairObservation, RotationMode};
use crate::metrics::{absolute_error, median_of, AbsoluteError};
use crate::pipeline::retrieve_oracle;
use crate::synthetic::{
    derive_seed, generate_scene, oracle_sample, pair_seed, Layout, NoiseModel, SyntheticError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchError {
    #[error("invalid benchmark parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Synthetic(#[from] SyntheticError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub trials: usize,
    pub k_list: Vec<usize>,
    /// Degrees.
    pub rotation_sigma: f64,
    /// Degrees.
    pub direction_sigma: f64,
    /// Share of the `K` pairs replaced by rotation outliers, rounded to the
    /// nearest count.
    pub outlier_fraction: f64,
    /// Degrees.
    pub outlier_rotation: f64,
    /// Database cameras per trial scene; the `K` nearest are retrieved.
    pub database_size: usize,
    pub extent: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            k_list: vec![2, 5, 10],
            rotation_sigma: 2.0,
            direction_sigma: 2.0,
            outlier_fraction: 0.0,
            outlier_rotation: 90.0,
            database_size: 50,
            extent: 10.0,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::InvalidParameter(m));
        if self.trials == 0 {
            return bad("trials must be positive".into());
        }
        if self.k_list.is_empty() || self.k_list.iter().any(|&k| k < 2) {
            return bad(format!("every K must be at least 2, got {:?}", self.k_list));
        }
        if self.database_size < self.max_k() {
            return bad(format!(
                "database_size {} is smaller than the largest K {}",
                self.database_size,
                self.max_k()
            ));
        }
        if !(self.extent.is_finite() && self.extent > 0.0) {
            return bad(format!("extent must be positive, got {}", self.extent));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return bad(format!(
                "outlier_fraction {} not in [0, 1]",
                self.outlier_fraction
            ));
        }
        self.noise(0, false).validate()?;
        Ok(())
    }

    fn max_k(&self) -> usize {
        self.k_list.iter().copied().max().unwrap_or(2)
    }

    fn noise(&self, seed: u64, outlier: bool) -> NoiseModel {
        NoiseModel {
            rotation_sigma: self.rotation_sigma,
            direction_sigma: self.direction_sigma,
            outlier_fraction: if outlier { 1.0 } else { 0.0 },
            outlier_rotation: self.outlier_rotation,
            seed,
        }
    }

    fn outlier_count(&self, k: usize) -> usize {
        (self.outlier_fraction * k as f64).round() as usize
    }
}

/// Errors of one trial for one `K`, per averaging mode (`None` when the
/// solver failed).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialErrors {
    pub median: Option<AbsoluteError>,
    pub mean: Option<AbsoluteError>,
}

/// Summary for one (`K`, mode) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchCell {
    pub k: usize,
    pub mode: RotationMode,
    pub trials: usize,
    pub failures: usize,
    pub median_translation: Option<f64>,
    pub median_rotation: Option<f64>,
    /// Trials where this mode's rotation error is strictly below the other mode's.
    pub wins: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub cells: Vec<BenchCell>,
    /// `trials[t][i]` holds trial `t` for `k_list[i]`.
    pub trials: Vec<Vec<TrialErrors>>,
}

impl BenchReport {
    pub fn cell(&self, k: usize, mode: RotationMode) -> Option<&BenchCell> {
        self.cells.iter().find(|c| c.k == k && c.mode == mode)
    }
}

fn run_trial(cfg: &BenchConfig, trial: u64) -> Result<Vec<TrialErrors>, BenchError> {
    let seed = derive_seed(cfg.seed, trial);
    let scene = generate_scene(cfg.database_size, 1, cfg.extent, Layout::General, seed)?;
    let db = scene.database_db();
    let (query_id, query) = &scene.queries[0];
    let ranked = retrieve_oracle(&db, query, cfg.max_k())
        .map_err(|e| BenchError::InvalidParameter(e.to_string()))?;

    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX)));

    let mut out = Vec::with_capacity(cfg.k_list.len());
    for &k in &cfg.k_list {
        let outliers: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&i| i < k)
            .take(cfg.outlier_count(k))
            .collect();
        let mut obs = Vec::with_capacity(k);
        for (i, db_id) in ranked.iter().take(k).enumerate() {
            let database_pose = *db.get(db_id).expect("ranked ids come from the database");
            let noise = cfg.noise(seed, outliers.contains(&i));
            let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(seed, query_id, db_id));
            let sample = oracle_sample(query, &database_pose, &noise, &mut rng)?;
            obs.push(PairObservation {
                database_pose,
                rel: sample.pose,
            });
        }
        let solve = |mode| {
            solve_absolute_pose(&obs, &AveragingConfig::with_mode(mode))
                .ok()
                .map(|p| absolute_error(&p, query))
        };
        out.push(TrialErrors {
            median: solve(RotationMode::Median),
            mean: solve(RotationMode::Mean),
        });
    }
    Ok(out)
}

pub fn run_averaging_bench(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    cfg.validate()?;
    let trials: Vec<Vec<TrialErrors>> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|t| run_trial(cfg, t))
        .collect::<Result<_, _>>()?;

    let mut cells = Vec::new();
    for (i, &k) in cfg.k_list.iter().enumerate() {
        for mode in [RotationMode::Median, RotationMode::Mean] {
            let pick = |e: &TrialErrors| match mode {
                RotationMode::Median => (e.median, e.mean),
                RotationMode::Mean => (e.mean, e.median),
            };
            let own: Vec<AbsoluteError> = trials.iter().filter_map(|t| pick(&t[i]).0).collect();
            let wins = trials
                .iter()
                .filter(|t| match pick(&t[i]) {
                    (Some(a), Some(b)) => a.rotation_error < b.rotation_error,
                    _ => false,
                })
                .count();
            let t: Vec<f64> = own.iter().map(|e| e.translation_error).collect();
            let r: Vec<f64> = own.iter().map(|e| e.rotation_error).collect();
            cells.push(BenchCell {
                k,
                mode,
                trials: trials.len(),
                failures: trials.len() - own.len(),
                median_translation: median_of(&t),
                median_rotation: median_of(&r),
                wins,
            });
        }
    }
    Ok(BenchReport { cells, trials })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_bench_is_exact() {
        let cfg = BenchConfig {
            trials: 10,
            rotation_sigma: 0.0,
            direction_sigma: 0.0,
            ..BenchConfig::default()
        };
        let report = run_averaging_bench(&cfg).unwrap();
        for cell in &report.cells {
            assert_eq!(cell.failures, 0);
            assert!(cell.median_translation.unwrap() < 1e-6, "{cell:?}");
            assert!(cell.median_rotation.unwrap() < 1e-6);
        }
    }

    #[test]
    fn outlier_count_is_rounded_share_of_k() {
        let cfg = BenchConfig {
            outlier_fraction: 0.1,
            ..BenchConfig::default()
        };
        assert_eq!(cfg.outlier_count(2), 0);
        assert_eq!(cfg.outlier_count(5), 1);
        assert_eq!(cfg.outlier_count(10), 1);
    }

    #[test]
    fn deterministic_and_validated() {
        let cfg = BenchConfig {
            trials: 5,
            ..BenchConfig::default()
        };
        assert_eq!(
            run_averaging_bench(&cfg).unwrap(),
            run_averaging_bench(&cfg).unwrap()
        );
        let bad = BenchConfig {
            k_list: vec![1],
            ..BenchConfig::default()
        };
        assert!(run_averaging_bench(&bad).is_err());
    }
}
