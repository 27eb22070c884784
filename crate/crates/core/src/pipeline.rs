//! End-to-end localization: retrieved pairs → relative poses from a provider
//! → motion averaging → absolute query poses.

use std::collections::{BTreeMap, HashMap};

use indexmap::IndexMap;
use rayon::prelude::*;
use thiserror::Error;

use crate::averaging::{
    solve_absolute_pose_detailed, AveragingConfig, AveragingError, PairObservation,
};
use crate::geometry::{rotation_angle, DirectionalPose, Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("duplicate image id `{0}`")]
    DuplicateId(String),
    #[error("unknown image id `{id}` referenced by query `{query}`")]
    UnknownId { query: String, id: String },
    #[error("query `{query}` has {found} retrieved pairs, at least {required} required")]
    TooFewRetrieved {
        query: String,
        found: usize,
        required: usize,
    },
    #[error("database has {available} images, {requested} requested")]
    InsufficientDatabase { available: usize, requested: usize },
    #[error(transparent)]
    Config(#[from] AveragingError),
}

/// Posed images keyed by id, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneDatabase {
    entries: IndexMap<String, Pose>,
    pub metadata: BTreeMap<String, String>,
}

impl SceneDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, pose: Pose) -> Result<(), PipelineError> {
        let id = id.into();
        if self.entries.contains_key(&id) {
            return Err(PipelineError::DuplicateId(id));
        }
        self.entries.insert(id, pose);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Pose> {
        self.entries.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Pose)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

impl FromIterator<(String, Pose)> for SceneDatabase {
    /// Later duplicates overwrite earlier entries.
    fn from_iter<I: IntoIterator<Item = (String, Pose)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
            metadata: BTreeMap::new(),
        }
    }
}

/// Ordered database ids retrieved for each query.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievalPlan {
    queries: IndexMap<String, Vec<String>>,
}

impl RetrievalPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        query: impl Into<String>,
        retrieved: Vec<String>,
    ) -> Result<(), PipelineError> {
        let query = query.into();
        if self.queries.contains_key(&query) {
            return Err(PipelineError::DuplicateId(query));
        }
        self.queries.insert(query, retrieved);
        Ok(())
    }

    pub fn get(&self, query: &str) -> Option<&[String]> {
        self.queries.get(query).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.queries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Every query retrieves at least `min_pairs` ids, all present in `db`.
    pub fn validate(&self, db: &SceneDatabase, min_pairs: usize) -> Result<(), PipelineError> {
        for (query, ids) in &self.queries {
            if ids.len() < min_pairs {
                return Err(PipelineError::TooFewRetrieved {
                    query: query.clone(),
                    found: ids.len(),
                    required: min_pairs,
                });
            }
            if let Some(id) = ids.iter().find(|id| !db.contains(id)) {
                return Err(PipelineError::UnknownId {
                    query: query.clone(),
                    id: id.clone(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("no estimate for pair ({query}, {database})")]
    Missing { query: String, database: String },
    #[error("{0}")]
    Failed(String),
}

/// Source of query→database relative pose estimates.
pub trait RelativePoseProvider: Sync {
    fn relative_pose(&self, query_id: &str, db_id: &str) -> Result<DirectionalPose, ProviderError>;
}

/// Precomputed estimates keyed by `(query_id, db_id)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimateTable {
    entries: IndexMap<(String, String), DirectionalPose>,
}

impl EstimateTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the id pair back as an error if it is already present.
    pub fn insert(
        &mut self,
        query: impl Into<String>,
        database: impl Into<String>,
        pose: DirectionalPose,
    ) -> Result<(), (String, String)> {
        let key = (query.into(), database.into());
        if self.entries.contains_key(&key) {
            return Err(key);
        }
        self.entries.insert(key, pose);
        Ok(())
    }

    pub fn get(&self, query: &str, database: &str) -> Option<&DirectionalPose> {
        self.entries.get(&(query.to_owned(), database.to_owned()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &DirectionalPose)> {
        self.entries
            .iter()
            .map(|((q, d), p)| (q.as_str(), d.as_str(), p))
    }
}

impl RelativePoseProvider for EstimateTable {
    fn relative_pose(&self, query_id: &str, db_id: &str) -> Result<DirectionalPose, ProviderError> {
        self.get(query_id, db_id)
            .copied()
            .ok_or_else(|| ProviderError::Missing {
                query: query_id.to_owned(),
                database: db_id.to_owned(),
            })
    }
}

impl<P: RelativePoseProvider + ?Sized> RelativePoseProvider for &P {
    fn relative_pose(&self, query_id: &str, db_id: &str) -> Result<DirectionalPose, ProviderError> {
        (**self).relative_pose(query_id, db_id)
    }
}

/// Why a query could not be localized.
#[derive(Debug, Clone, PartialEq)]
pub enum LocalizationFailure {
    DegenerateGeometry { condition_ratio: f64 },
    TooFewPairs { found: usize, required: usize },
    DegenerateMean,
    ProviderFailure(String),
}

impl LocalizationFailure {
    /// Stable tag used in report files.
    pub fn tag(&self) -> &'static str {
        match self {
            Self::DegenerateGeometry { .. } => "DegenerateGeometry",
            Self::TooFewPairs { .. } => "TooFewPairs",
            Self::DegenerateMean => "DegenerateMean",
            Self::ProviderFailure(_) => "ProviderFailure",
        }
    }
}

impl std::fmt::Display for LocalizationFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::DegenerateGeometry { condition_ratio } => {
                write!(
                    f,
                    "degenerate geometry (condition ratio {condition_ratio:e})"
                )
            }
            Self::TooFewPairs { found, required } => {
                write!(f, "{found} usable pairs, {required} required")
            }
            Self::DegenerateMean => f.write_str("rotation average is degenerate"),
            Self::ProviderFailure(msg) => write!(f, "provider failure: {msg}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics {
    pub condition_ratio: f64,
    pub rotation_spread_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub query_id: String,
    pub outcome: Result<Pose, LocalizationFailure>,
    pub pairs_used: usize,
    pub diagnostics: Option<Diagnostics>,
}

impl LocalizationResult {
    pub fn is_ok(&self) -> bool {
        self.outcome.is_ok()
    }

    pub fn pose(&self) -> Option<&Pose> {
        self.outcome.as_ref().ok()
    }
}

/// Ids of the `k` database cameras nearest to `query_gt`, by center distance,
/// then rotation angle, then id.
pub fn retrieve_oracle(
    db: &SceneDatabase,
    query_gt: &Pose,
    k: usize,
) -> Result<Vec<String>, PipelineError> {
    if k > db.len() {
        return Err(PipelineError::InsufficientDatabase {
            available: db.len(),
            requested: k,
        });
    }
    let center = query_gt.camera_center();
    let mut ranked: Vec<(f64, f64, &str)> = db
        .iter()
        .map(|(id, pose)| {
            (
                (pose.camera_center() - center).norm(),
                rotation_angle(&pose.rotation, &query_gt.rotation),
                id,
            )
        })
        .collect();
    ranked.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then_with(|| a.2.cmp(b.2))
    });
    Ok(ranked
        .into_iter()
        .take(k)
        .map(|(_, _, id)| id.to_owned())
        .collect())
}

/// Oracle retrieval for every query in `queries`.
pub fn oracle_plan(
    db: &SceneDatabase,
    queries: &SceneDatabase,
    k: usize,
) -> Result<RetrievalPlan, PipelineError> {
    let mut plan = RetrievalPlan::new();
    for (id, pose) in queries.iter() {
        plan.insert(id, retrieve_oracle(db, pose, k)?)?;
    }
    Ok(plan)
}

fn localize_query<P: RelativePoseProvider + ?Sized>(
    db: &SceneDatabase,
    query_id: &str,
    retrieved: &[String],
    provider: &P,
    cfg: &AveragingConfig,
) -> LocalizationResult {
    let mut observations = Vec::with_capacity(retrieved.len());
    let mut last_error = None;
    for db_id in retrieved {
        let database_pose = *db.get(db_id).expect("plan validated against database");
        match provider.relative_pose(query_id, db_id) {
            Ok(rel) => observations.push(PairObservation { database_pose, rel }),
            Err(e) => {
                log::debug!("dropping pair ({query_id}, {db_id}): {e}");
                last_error = Some(e);
            }
        }
    }
    let pairs_used = observations.len();
    let fail = |failure| LocalizationResult {
        query_id: query_id.to_owned(),
        outcome: Err(failure),
        pairs_used,
        diagnostics: None,
    };
    if pairs_used < cfg.min_pairs {
        return fail(match last_error {
            Some(e) if pairs_used == 0 => LocalizationFailure::ProviderFailure(e.to_string()),
            _ => LocalizationFailure::TooFewPairs {
                found: pairs_used,
                required: cfg.min_pairs,
            },
        });
    }
    match solve_absolute_pose_detailed(&observations, cfg) {
        Ok(sol) => LocalizationResult {
            query_id: query_id.to_owned(),
            outcome: Ok(sol.pose),
            pairs_used,
            diagnostics: Some(Diagnostics {
                condition_ratio: sol.condition_ratio,
                rotation_spread_deg: sol.rotation_spread_deg,
            }),
        },
        Err(AveragingError::DegenerateGeometry(condition_ratio)) => {
            let mut r = fail(LocalizationFailure::DegenerateGeometry { condition_ratio });
            r.diagnostics = Some(Diagnostics {
                condition_ratio,
                rotation_spread_deg: f64::NAN,
            });
            r
        }
        Err(AveragingError::TooFewPairs { found, required }) => {
            fail(LocalizationFailure::TooFewPairs { found, required })
        }
        Err(AveragingError::DegenerateMean(_) | AveragingError::EmptyInput) => {
            fail(LocalizationFailure::DegenerateMean)
        }
        Err(AveragingError::InvalidConfig(msg)) => fail(LocalizationFailure::ProviderFailure(msg)),
    }
}

/// Localizes every query of `plan`. Per-query failures are reported in the
/// results; only an invalid plan or config fails the batch. Output order
/// follows the plan.
pub fn localize<P: RelativePoseProvider + ?Sized>(
    db: &SceneDatabase,
    plan: &RetrievalPlan,
    provider: &P,
    cfg: &AveragingConfig,
) -> Result<Vec<LocalizationResult>, PipelineError> {
    cfg.validate()?;
    plan.validate(db, cfg.min_pairs)?;
    let items: Vec<_> = plan.iter().collect();
    Ok(items
        .par_iter()
        .map(|(q, ids)| localize_query(db, q, ids, provider, cfg))
        .collect())
}

/// Ground truth lookup by query id.
pub type GroundTruth = HashMap<String, Pose>;
