//! Text formats for poses, retrieval pairs and relative-pose estimates, and
//! the JSON report file.
//!
//! Pose lines: `<id> r11 r12 r13 tx r21 r22 r23 ty r31 r32 r33 tz`.
//! Pair lines: `<query_id> <db_id_1> ... <db_id_K>` with `K >= 2`.
//! Estimate lines: `<query_id> <db_id> r11 r12 r13 r21 r22 r23 r31 r32 r33 tx ty tz`.
//!
//! `#` starts a comment, blank lines are skipped. Floats are written with 17
//! significant digits (`%.17g`), so save followed by load is exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    orthogonality_residual, orthogonalize_9d, DirectionalPose, Mat3, Pose, Rotation9D,
    RotationMatrix, Vec3, MIN_NORM,
};
use crate::metrics::MetricReport;
use crate::pipeline::{
    EstimateTable, LocalizationFailure, LocalizationResult, RetrievalPlan, SceneDatabase,
};

/// Largest accepted orthogonality residual of an input rotation.
pub const INPUT_ROTATION_TOLERANCE: f64 = 1e-4;
pub const MIN_PAIRS_PER_QUERY: usize = 2;
/// Metadata key listing ids whose rotation was re-orthogonalized on load.
pub const REORTHOGONALIZED_KEY: &str = "reorthogonalized";

pub const REPORT_FORMAT: &str = "relockit-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}:{line}: {message}")]
    Parse {
        origin: String,
        line: usize,
        message: String,
    },
    #[error("{origin}:{line}: duplicate id `{id}`")]
    DuplicateId {
        origin: String,
        line: usize,
        id: String,
    },
    #[error(
        "{origin}:{line}: not a rotation (orthogonality residual {residual:e}, determinant {det})"
    )]
    InvalidRotation {
        origin: String,
        line: usize,
        residual: f64,
        det: f64,
    },
    #[error("{origin}: invalid report: {message}")]
    Report { origin: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn write(path: &Path, contents: &str) -> Result<(), IoError> {
    std::fs::write(path, contents).map_err(io_err(path))
}

/// `printf("%.17g")`: 17 significant digits, trailing zeros removed, exponent
/// form when the decimal exponent is below -4 or at least 17.
pub fn format_float(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0" } else { "0" }.into();
    }
    let sci = format!("{x:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..17).contains(&exp) {
        let mantissa = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let fixed = format!("{x:.*}", (16 - exp) as usize);
        trim_fraction(&fixed).to_owned()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Non-comment, non-blank lines with their 1-based numbers, split on whitespace.
fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let content = line.split('#').next().unwrap_or("");
        let fields: Vec<&str> = content.split_whitespace().collect();
        (!fields.is_empty()).then_some((i + 1, fields))
    })
}

struct LineCtx<'a> {
    origin: &'a str,
    line: usize,
}

impl LineCtx<'_> {
    fn parse_err(&self, message: impl Into<String>) -> IoError {
        IoError::Parse {
            origin: self.origin.to_owned(),
            line: self.line,
            message: message.into(),
        }
    }

    fn floats<const N: usize>(&self, fields: &[&str]) -> Result<[f64; N], IoError> {
        let mut out = [0.0; N];
        for (slot, f) in out.iter_mut().zip(fields) {
            let v: f64 = f
                .parse()
                .map_err(|_| self.parse_err(format!("`{f}` is not a number")))?;
            if !v.is_finite() {
                return Err(self.parse_err(format!("`{f}` is not finite")));
            }
            *slot = v;
        }
        Ok(out)
    }

    /// Accepts rotations within `INPUT_ROTATION_TOLERANCE`, re-orthogonalizing
    /// those outside the strict invariant. Returns whether that happened.
    fn rotation(&self, rows: [f64; 9]) -> Result<(RotationMatrix, bool), IoError> {
        let m = Mat3::from_row_slice(&rows);
        let residual = orthogonality_residual(&m);
        let det = m.determinant();
        if let Ok(r) = RotationMatrix::new(m) {
            return Ok((r, false));
        }
        if residual <= INPUT_ROTATION_TOLERANCE && det > 0.0 {
            if let Ok(r) = orthogonalize_9d(&Rotation9D(rows)) {
                return Ok((r, true));
            }
        }
        Err(IoError::InvalidRotation {
            origin: self.origin.to_owned(),
            line: self.line,
            residual,
            det,
        })
    }
}

pub fn parse_poses(text: &str, origin: &str) -> Result<SceneDatabase, IoError> {
    let mut db = SceneDatabase::new();
    let mut fixed = Vec::new();
    for (line, fields) in records(text) {
        let ctx = LineCtx { origin, line };
        if fields.len() != 13 {
            return Err(ctx.parse_err(format!(
                "expected an id and 12 numbers, found {} fields",
                fields.len()
            )));
        }
        let v: [f64; 12] = ctx.floats(&fields[1..])?;
        let rows = [v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]];
        let (rotation, reorthogonalized) = ctx.rotation(rows)?;
        let id = fields[0];
        if reorthogonalized {
            log::warn!("{origin}:{line}: rotation of `{id}` re-orthogonalized");
            fixed.push(id.to_owned());
        }
        db.insert(id, Pose::new(rotation, Vec3::new(v[3], v[7], v[11])))
            .map_err(|_| IoError::DuplicateId {
                origin: origin.to_owned(),
                line,
                id: id.to_owned(),
            })?;
    }
    if !fixed.is_empty() {
        db.metadata
            .insert(REORTHOGONALIZED_KEY.into(), fixed.join(","));
    }
    Ok(db)
}

fn push_floats(out: &mut String, values: &[f64]) {
    for v in values {
        out.push(' ');
        out.push_str(&format_float(*v));
    }
}

fn pose_fields(p: &Pose) -> [f64; 12] {
    let r = p.rotation.to_row_array();
    let t = p.translation;
    [
        r[0], r[1], r[2], t.x, r[3], r[4], r[5], t.y, r[6], r[7], r[8], t.z,
    ]
}

pub fn format_poses<'a>(poses: impl IntoIterator<Item = (&'a str, &'a Pose)>) -> String {
    let mut out = String::from("# image_id r11 r12 r13 tx r21 r22 r23 ty r31 r32 r33 tz\n");
    for (id, pose) in poses {
        out.push_str(id);
        push_floats(&mut out, &pose_fields(pose));
        out.push('\n');
    }
    out
}

pub fn load_pose_file(path: impl AsRef<Path>) -> Result<SceneDatabase, IoError> {
    let path = path.as_ref();
    parse_poses(&read(path)?, &path.display().to_string())
}

pub fn save_pose_file(db: &SceneDatabase, path: impl AsRef<Path>) -> Result<(), IoError> {
    write(path.as_ref(), &format_poses(db.iter()))
}

fn check_id(ctx: &LineCtx, id: &str) -> Result<(), IoError> {
    if id.is_empty() {
        return Err(ctx.parse_err("empty id"));
    }
    Ok(())
}

pub fn parse_pairs(text: &str, origin: &str) -> Result<RetrievalPlan, IoError> {
    let mut plan = RetrievalPlan::new();
    for (line, fields) in records(text) {
        let ctx = LineCtx { origin, line };
        let k = fields.len() - 1;
        if k < MIN_PAIRS_PER_QUERY {
            return Err(ctx.parse_err(format!(
                "query `{}` lists {k} database ids, at least {MIN_PAIRS_PER_QUERY} required",
                fields[0]
            )));
        }
        for f in &fields {
            check_id(&ctx, f)?;
        }
        plan.insert(
            fields[0],
            fields[1..].iter().map(|s| (*s).to_owned()).collect(),
        )
        .map_err(|_| IoError::DuplicateId {
            origin: origin.to_owned(),
            line,
            id: fields[0].to_owned(),
        })?;
    }
    Ok(plan)
}

pub fn format_pairs(plan: &RetrievalPlan) -> String {
    let mut out = String::from("# query_id db_id_1 ... db_id_K\n");
    for (q, ids) in plan.iter() {
        out.push_str(q);
        for id in ids {
            out.push(' ');
            out.push_str(id);
        }
        out.push('\n');
    }
    out
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<RetrievalPlan, IoError> {
    let path = path.as_ref();
    parse_pairs(&read(path)?, &path.display().to_string())
}

pub fn save_pairs(plan: &RetrievalPlan, path: impl AsRef<Path>) -> Result<(), IoError> {
    write(path.as_ref(), &format_pairs(plan))
}

/// Relative poses keyed by `(query_id, db_id)`, translation kept as given.
pub type RelativePoseTable = IndexMap<(String, String), Pose>;

fn parse_relative_lines(
    text: &str,
    origin: &str,
    mut accept: impl FnMut(&LineCtx, &str, &str, RotationMatrix, Vec3) -> Result<bool, IoError>,
) -> Result<(), IoError> {
    for (line, fields) in records(text) {
        let ctx = LineCtx { origin, line };
        if fields.len() != 14 {
            return Err(ctx.parse_err(format!(
                "expected two ids and 12 numbers, found {} fields",
                fields.len()
            )));
        }
        let v: [f64; 12] = ctx.floats(&fields[2..])?;
        let rows: [f64; 9] = v[..9].try_into().expect("nine entries");
        let (rotation, fixed) = ctx.rotation(rows)?;
        if fixed {
            log::warn!("{origin}:{line}: rotation re-orthogonalized");
        }
        let inserted = accept(
            &ctx,
            fields[0],
            fields[1],
            rotation,
            Vec3::new(v[9], v[10], v[11]),
        )?;
        if !inserted {
            return Err(IoError::DuplicateId {
                origin: origin.to_owned(),
                line,
                id: format!("{} {}", fields[0], fields[1]),
            });
        }
    }
    Ok(())
}

/// Estimates with translation directions normalized on load.
pub fn parse_estimates(text: &str, origin: &str) -> Result<EstimateTable, IoError> {
    let mut table = EstimateTable::new();
    parse_relative_lines(text, origin, |ctx, q, d, rotation, t| {
        let norm = t.norm();
        if norm <= MIN_NORM {
            return Err(ctx.parse_err(format!("translation direction has norm {norm:e}")));
        }
        let pose = DirectionalPose::new(rotation, t).map_err(|e| ctx.parse_err(e.to_string()))?;
        Ok(table.insert(q, d, pose).is_ok())
    })?;
    Ok(table)
}

pub fn parse_relative_poses(text: &str, origin: &str) -> Result<RelativePoseTable, IoError> {
    let mut table = RelativePoseTable::new();
    parse_relative_lines(text, origin, |_, q, d, rotation, t| {
        let key = (q.to_owned(), d.to_owned());
        if table.contains_key(&key) {
            return Ok(false);
        }
        table.insert(key, Pose::new(rotation, t));
        Ok(true)
    })?;
    Ok(table)
}

const ESTIMATE_HEADER: &str = "# query_id db_id r11 r12 r13 r21 r22 r23 r31 r32 r33 tx ty tz\n";

fn push_relative(out: &mut String, q: &str, d: &str, r: &RotationMatrix, t: &Vec3) {
    let _ = write!(out, "{q} {d}");
    push_floats(out, &r.to_row_array());
    push_floats(out, t.as_slice());
    out.push('\n');
}

pub fn format_estimates(table: &EstimateTable) -> String {
    let mut out = String::from(ESTIMATE_HEADER);
    for (q, d, p) in table.iter() {
        push_relative(&mut out, q, d, &p.rotation, p.direction());
    }
    out
}

pub fn format_relative_poses(table: &RelativePoseTable) -> String {
    let mut out = String::from(ESTIMATE_HEADER);
    for ((q, d), p) in table {
        push_relative(&mut out, q, d, &p.rotation, &p.translation);
    }
    out
}

pub fn load_estimates(path: impl AsRef<Path>) -> Result<EstimateTable, IoError> {
    let path = path.as_ref();
    parse_estimates(&read(path)?, &path.display().to_string())
}

pub fn save_estimates(table: &EstimateTable, path: impl AsRef<Path>) -> Result<(), IoError> {
    write(path.as_ref(), &format_estimates(table))
}

pub fn load_relative_poses(path: impl AsRef<Path>) -> Result<RelativePoseTable, IoError> {
    let path = path.as_ref();
    parse_relative_poses(&read(path)?, &path.display().to_string())
}

pub fn save_relative_poses(
    table: &RelativePoseTable,
    path: impl AsRef<Path>,
) -> Result<(), IoError> {
    write(path.as_ref(), &format_relative_poses(table))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Localization,
    Relpose,
    Synth,
    AvgBench,
    ToyTrain,
}

/// One localized query. `status` is `ok` or a failure tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<[f64; 9]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation: Option<[f64; 3]>,
    pub pairs_used: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation_spread_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation_error_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation_error_deg: Option<f64>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl QueryRecord {
    pub fn from_result(r: &LocalizationResult) -> Self {
        let (status, message, rotation, translation) = match &r.outcome {
            Ok(p) => (
                "ok".to_owned(),
                None,
                Some(p.rotation.to_row_array()),
                Some([p.translation.x, p.translation.y, p.translation.z]),
            ),
            Err(f) => (f.tag().to_owned(), Some(f.to_string()), None, None),
        };
        Self {
            query_id: r.query_id.clone(),
            status,
            message,
            rotation,
            translation,
            pairs_used: r.pairs_used,
            condition_ratio: r.diagnostics.and_then(|d| finite(d.condition_ratio)),
            rotation_spread_deg: r.diagnostics.and_then(|d| finite(d.rotation_spread_deg)),
            translation_error_m: None,
            rotation_error_deg: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    /// Pose of a successful record.
    pub fn pose(&self) -> Option<Pose> {
        let r = RotationMatrix::from_row_slice(&self.rotation?).ok()?;
        Some(Pose::new(r, Vec3::from(self.translation?)))
    }
}

/// Failure tags produced by `LocalizationFailure::tag`.
pub fn is_degenerate_tag(status: &str) -> bool {
    status
        == LocalizationFailure::DegenerateGeometry {
            condition_ratio: 0.0,
        }
        .tag()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub k: usize,
    pub mode: String,
    pub trials: usize,
    pub failures: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_translation_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_rotation_deg: Option<f64>,
    /// Trials where this mode's rotation error beat the other mode's, when compared.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wins_vs_other_mode: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub head: String,
    pub steps: usize,
    pub learning_rate: f64,
    pub parameter_count: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub swap_symmetric: bool,
}

/// Versioned JSON report shared by every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub format: String,
    pub version: u32,
    pub kind: ReportKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub parameters: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub queries: Vec<QueryRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bench: Vec<BenchRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingRecord>,
}

impl ReportFile {
    pub fn new(kind: ReportKind) -> Self {
        Self {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            kind,
            seed: None,
            parameters: BTreeMap::new(),
            queries: Vec::new(),
            metrics: None,
            bench: Vec::new(),
            training: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self, IoError> {
        let report: Self = serde_json::from_str(text).map_err(|e| IoError::Report {
            origin: origin.to_owned(),
            message: e.to_string(),
        })?;
        if report.format != REPORT_FORMAT || report.version != REPORT_VERSION {
            return Err(IoError::Report {
                origin: origin.to_owned(),
                message: format!(
                    "unsupported format `{}` version {} (expected `{REPORT_FORMAT}` version {REPORT_VERSION})",
                    report.format, report.version
                ),
            });
        }
        Ok(report)
    }
}

pub fn write_report(report: &ReportFile, path: impl AsRef<Path>) -> Result<(), IoError> {
    write(path.as_ref(), &report.to_json())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<ReportFile, IoError> {
    let path = path.as_ref();
    ReportFile::from_json(&read(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_rotation, RotationMatrix};
    use crate::pipeline::Diagnostics;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn float_format_matches_printf_g17() {
        let cases = [
            (1.0, "1"),
            (0.1, "0.10000000000000001"),
            (-2.5, "-2.5"),
            (1e-5, "1.0000000000000001e-05"),
            (123456789.0, "123456789"),
            (1e17, "1e+17"),
            (1.5e300, "1.5000000000000001e+300"),
            (0.0001, "0.0001"),
            (-0.0, "-0"),
            (0.0, "0"),
            (f64::MIN_POSITIVE, "2.2250738585072014e-308"),
        ];
        for (x, expected) in cases {
            assert_eq!(format_float(x), expected, "{x:e}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let x = f64::from_bits(rng.random::<u64>());
            if x.is_finite() {
                assert_eq!(
                    format_float(x).parse::<f64>().unwrap().to_bits(),
                    x.to_bits()
                );
            }
        }
    }

    #[test]
    fn identity_pose_line() {
        let db = parse_poses("q0 1 0 0 0 0 1 0 0 0 0 1 0\n", "t").unwrap();
        assert_eq!(db.get("q0"), Some(&Pose::identity()));
        assert!(db.metadata.is_empty());
    }

    #[test]
    fn short_pose_line_names_the_line() {
        let err = parse_poses(
            "# header\nq0 1 0 0 0 0 1 0 0 0 0 1 0\nq1 1 0 0 0 0 1 0 0 0 0 1\n",
            "poses.txt",
        )
        .unwrap_err();
        match err {
            IoError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other}"),
        }
        assert!(err.to_string().starts_with("poses.txt:3:"));
    }

    #[test]
    fn pose_file_errors() {
        let dup = "a 1 0 0 0 0 1 0 0 0 0 1 0\na 1 0 0 0 0 1 0 0 0 0 1 0\n";
        assert!(matches!(
            parse_poses(dup, "t"),
            Err(IoError::DuplicateId { line: 2, .. })
        ));
        let skewed = "a 1 0.1 0 0 0 1 0 0 0 0 1 0\n";
        assert!(matches!(
            parse_poses(skewed, "t"),
            Err(IoError::InvalidRotation { .. })
        ));
        let reflection = "a -1 0 0 0 0 1 0 0 0 0 1 0\n";
        assert!(matches!(
            parse_poses(reflection, "t"),
            Err(IoError::InvalidRotation { .. })
        ));
        let nan = "a nan 0 0 0 0 1 0 0 0 0 1 0\n";
        assert!(matches!(parse_poses(nan, "t"), Err(IoError::Parse { .. })));
    }

    #[test]
    fn slightly_skewed_rotation_is_repaired_and_recorded() {
        let db = parse_poses("a 1 1e-6 0 0 0 1 0 0 0 0 1 0  # almost identity\n", "t").unwrap();
        let r = db.get("a").unwrap().rotation;
        assert!(orthogonality_residual(r.matrix()) < 1e-12);
        assert_eq!(
            db.metadata.get(REORTHOGONALIZED_KEY).map(String::as_str),
            Some("a")
        );
    }

    #[test]
    fn pairs_require_two_ids() {
        assert!(matches!(
            parse_pairs("q0 d0\n", "t"),
            Err(IoError::Parse { line: 1, .. })
        ));
        let plan = parse_pairs("q0 d0 d1\n\nq1 d2 d0 d1 # comment\n", "t").unwrap();
        assert_eq!(plan.get("q1").unwrap(), ["d2", "d0", "d1"]);
        assert!(matches!(
            parse_pairs("q0 d0 d1\nq0 d1 d2\n", "t"),
            Err(IoError::DuplicateId { line: 2, .. })
        ));
    }

    #[test]
    fn estimates_are_normalized() {
        let table = parse_estimates("q0 d0 1 0 0 0 1 0 0 0 1 0 0 5\n", "t").unwrap();
        assert_eq!(*table.get("q0", "d0").unwrap().direction(), Vec3::z());
        assert!(matches!(
            parse_estimates("q0 d0 1 0 0 0 1 0 0 0 1 0 0 0\n", "t"),
            Err(IoError::Parse { .. })
        ));
        let rel = parse_relative_poses("q0 d0 1 0 0 0 1 0 0 0 1 0 0 0\n", "t").unwrap();
        assert_eq!(
            rel[&("q0".to_owned(), "d0".to_owned())].translation,
            Vec3::zeros()
        );
    }

    #[test]
    fn pose_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut db = SceneDatabase::new();
        for i in 0..1000 {
            let t = Vec3::from_fn(|_, _| {
                rng.random_range(-1e3..1e3) * 10f64.powi(rng.random_range(-8..4))
            });
            db.insert(format!("img_{i}"), Pose::new(random_rotation(&mut rng), t))
                .unwrap();
        }
        let text = format_poses(db.iter());
        let back = parse_poses(&text, "t").unwrap();
        assert_eq!(back, db);
        assert_eq!(format_poses(back.iter()), text);
    }

    #[test]
    fn report_round_trip() {
        let mut report = ReportFile::new(ReportKind::Localization);
        report.seed = Some(7);
        let ok = LocalizationResult {
            query_id: "q0".into(),
            outcome: Ok(Pose::new(
                RotationMatrix::identity(),
                Vec3::new(0.1, 0.2, 1.0 / 3.0),
            )),
            pairs_used: 10,
            diagnostics: Some(Diagnostics {
                condition_ratio: 0.25,
                rotation_spread_deg: 1.5,
            }),
        };
        let bad = LocalizationResult {
            query_id: "q1".into(),
            outcome: Err(LocalizationFailure::DegenerateGeometry {
                condition_ratio: 1e-17,
            }),
            pairs_used: 10,
            diagnostics: Some(Diagnostics {
                condition_ratio: 1e-17,
                rotation_spread_deg: f64::NAN,
            }),
        };
        report.queries = vec![
            QueryRecord::from_result(&ok),
            QueryRecord::from_result(&bad),
        ];
        report.metrics = Some(MetricReport {
            median_t: Some(0.1 + 0.2),
            n_total: 2,
            n_failed: 1,
            ..MetricReport::default()
        });
        let json = report.to_json();
        let back = ReportFile::from_json(&json, "t").unwrap();
        assert_eq!(back, report);
        assert_eq!(back.to_json(), json);
        assert_eq!(back.queries[0].pose(), ok.pose().copied());
        assert!(is_degenerate_tag(&back.queries[1].status));
        assert_eq!(back.queries[1].rotation_spread_deg, None);

        let wrong = json.replace(REPORT_FORMAT, "other");
        assert!(matches!(
            ReportFile::from_json(&wrong, "t"),
            Err(IoError::Report { .. })
        ));
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_pose_file("/nonexistent/poses.txt").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/poses.txt"));
    }
}
