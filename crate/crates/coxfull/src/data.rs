//! Counting-process survival data: CSV ingestion, dummy encoding of factor
//! columns, episode splitting for time-varying covariates, and validation
//! diagnostics.
//!
//! Input layout is long format with one row per covariate-constant interval:
//! required columns `id, cluster, start, stop, event`, everything else a
//! covariate. Intervals of a subject must be contiguous from time 0 and the
//! event flag may only sit on the final interval.

use crate::error::DataError;
use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::path::Path;

/// Column mapping for ingestion. Factor columns are dummy-encoded with the
/// first observed level as reference.
#[derive(Debug, Clone)]
pub struct Schema {
    pub id: String,
    pub cluster: String,
    pub start: String,
    pub stop: String,
    pub event: String,
    pub factors: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            id: "id".into(),
            cluster: "cluster".into(),
            start: "start".into(),
            stop: "stop".into(),
            event: "event".into(),
            factors: Vec::new(),
        }
    }
}

impl Schema {
    pub fn with_factors<I: IntoIterator<Item = S>, S: Into<String>>(factors: I) -> Self {
        Self {
            factors: factors.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }
}

/// One subject: a contiguous covariate track on [0, exit_time] plus the
/// terminal event indicator.
#[derive(Debug, Clone)]
pub struct Subject {
    pub subject_id: String,
    pub cluster_id: String,
    pub entry_time: f64,
    pub exit_time: f64,
    pub event: bool,
    /// (change_time, covariate values); change times strictly increasing,
    /// first entry at `entry_time`, all strictly below `exit_time`.
    pub covariate_track: Vec<(f64, Vec<f64>)>,
}

/// One covariate-constant interval of a subject.
#[derive(Debug, Clone)]
pub struct Episode {
    pub subject: usize,
    pub cluster: usize,
    pub start: f64,
    pub stop: f64,
    pub event: bool,
    pub x: Vec<f64>,
}

/// A group of encoded covariate columns that is penalized jointly: metric
/// columns form singleton groups, each factor contributes one group of
/// dummies with df = number of dummies.
#[derive(Debug, Clone)]
pub struct CovGroup {
    pub label: String,
    pub cols: Range<usize>,
    pub df: usize,
    pub is_factor: bool,
}

/// Levels of a factor column in first-observed order; index 0 is the
/// reference level.
#[derive(Debug, Clone)]
pub struct FactorLevels {
    pub column: String,
    pub levels: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Cluster {
    pub id: String,
    pub subjects: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub subjects: Vec<Subject>,
    pub episodes: Vec<Episode>,
    /// Episode range of each subject inside `episodes`.
    pub episode_ranges: Vec<Range<usize>>,
    pub clusters: Vec<Cluster>,
    /// Encoded covariate column labels (dummies expanded in place).
    pub covariate_names: Vec<String>,
    pub groups: Vec<CovGroup>,
    pub factors: Vec<FactorLevels>,
}

impl Dataset {
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn n_events(&self) -> usize {
        self.subjects.iter().filter(|s| s.event).count()
    }

    pub fn max_stop(&self) -> f64 {
        self.subjects.iter().fold(0.0, |m, s| m.max(s.exit_time))
    }

    pub fn group_of_column(&self, col: usize) -> Option<&CovGroup> {
        self.groups.iter().find(|g| g.cols.contains(&col))
    }

    pub fn group_index(&self, label: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.label == label)
    }

    /// Restrict the dataset to the clusters where `keep` is true,
    /// reindexing subjects, clusters, and episodes.
    pub fn subset_by_clusters(&self, keep: &[bool]) -> Dataset {
        assert_eq!(keep.len(), self.clusters.len());
        let mut subjects = Vec::new();
        let mut clusters = Vec::new();
        for (ci, cluster) in self.clusters.iter().enumerate() {
            if !keep[ci] {
                continue;
            }
            let mut members = Vec::new();
            for &si in &cluster.subjects {
                members.push(subjects.len());
                subjects.push(self.subjects[si].clone());
            }
            clusters.push(Cluster {
                id: cluster.id.clone(),
                subjects: members,
            });
        }
        build_dataset(
            subjects,
            clusters,
            self.covariate_names.clone(),
            self.groups.clone(),
            self.factors.clone(),
        )
    }
}

/// Split a subject into episodes: one per covariate-constant interval, the
/// event flag only on the final interval.
pub fn split_episodes(subject: &Subject, subject_idx: usize, cluster_idx: usize) -> Vec<Episode> {
    let track = &subject.covariate_track;
    let mut out = Vec::with_capacity(track.len());
    for (i, (t, x)) in track.iter().enumerate() {
        let stop = if i + 1 < track.len() {
            track[i + 1].0
        } else {
            subject.exit_time
        };
        out.push(Episode {
            subject: subject_idx,
            cluster: cluster_idx,
            start: *t,
            stop,
            event: subject.event && i + 1 == track.len(),
            x: x.clone(),
        });
    }
    out
}

fn build_dataset(
    subjects: Vec<Subject>,
    clusters: Vec<Cluster>,
    covariate_names: Vec<String>,
    groups: Vec<CovGroup>,
    factors: Vec<FactorLevels>,
) -> Dataset {
    let mut episodes = Vec::new();
    let mut episode_ranges = vec![0..0; subjects.len()];
    let cluster_of: Vec<usize> = {
        let mut v = vec![0; subjects.len()];
        for (ci, c) in clusters.iter().enumerate() {
            for &si in &c.subjects {
                v[si] = ci;
            }
        }
        v
    };
    for (si, s) in subjects.iter().enumerate() {
        let lo = episodes.len();
        episodes.extend(split_episodes(s, si, cluster_of[si]));
        episode_ranges[si] = lo..episodes.len();
    }
    Dataset {
        subjects,
        episodes,
        episode_ranges,
        clusters,
        covariate_names,
        groups,
        factors,
    }
}

/// Assemble a dataset from already-validated subjects (used by the simulation
/// lab and tests). Cluster ids are collected in first-observed order.
pub fn dataset_from_subjects(
    subjects: Vec<Subject>,
    covariate_names: Vec<String>,
    groups: Vec<CovGroup>,
) -> Result<Dataset, DataError> {
    if subjects.is_empty() {
        return Err(DataError::Empty);
    }
    for s in &subjects {
        validate_subject(s)?;
    }
    let mut cluster_index: HashMap<String, usize> = HashMap::new();
    let mut clusters: Vec<Cluster> = Vec::new();
    for (si, s) in subjects.iter().enumerate() {
        let ci = *cluster_index.entry(s.cluster_id.clone()).or_insert_with(|| {
            clusters.push(Cluster {
                id: s.cluster_id.clone(),
                subjects: Vec::new(),
            });
            clusters.len() - 1
        });
        clusters[ci].subjects.push(si);
    }
    Ok(build_dataset(
        subjects,
        clusters,
        covariate_names,
        groups,
        Vec::new(),
    ))
}

fn validate_subject(s: &Subject) -> Result<(), DataError> {
    let id = &s.subject_id;
    if s.entry_time > 0.0 {
        return Err(DataError::LeftTruncated(id.clone()));
    }
    if s.covariate_track.is_empty()
        || s.covariate_track[0].0 != s.entry_time
        || !s.exit_time.is_finite()
        || s.exit_time <= s.entry_time
    {
        return Err(DataError::NonMonotoneTimes(id.clone()));
    }
    let mut prev = s.covariate_track[0].0;
    for (t, _) in s.covariate_track.iter().skip(1) {
        if *t <= prev {
            return Err(DataError::NonMonotoneTimes(id.clone()));
        }
        prev = *t;
    }
    if prev >= s.exit_time {
        return Err(DataError::EmptyInterval(id.clone()));
    }
    Ok(())
}

struct RawRow {
    cluster: String,
    start: f64,
    stop: f64,
    event: u8,
    values: Vec<f64>,
}

/// Load counting-process CSV data: merge the rows of each subject into a
/// covariate track, dummy-encode factor columns, and split episodes.
pub fn load_dataset<P: AsRef<Path>>(path: P, schema: &Schema) -> Result<Dataset, crate::error::Error> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.to_string()).collect();
    let dataset = parse_records(&headers, reader.records(), schema)?;
    Ok(dataset)
}

/// Parse CSV content from a string; handy for tests.
pub fn load_dataset_from_str(content: &str, schema: &Schema) -> Result<Dataset, crate::error::Error> {
    let mut reader = csv::Reader::from_reader(content.as_bytes());
    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.to_string()).collect();
    let dataset = parse_records(&headers, reader.records(), schema)?;
    Ok(dataset)
}

fn parse_records<R: std::io::Read>(
    headers: &[String],
    records: csv::StringRecordsIter<'_, R>,
    schema: &Schema,
) -> Result<Dataset, crate::error::Error> {
    let col = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let id_col = col(&schema.id)?;
    let cluster_col = col(&schema.cluster)?;
    let start_col = col(&schema.start)?;
    let stop_col = col(&schema.stop)?;
    let event_col = col(&schema.event)?;
    for f in &schema.factors {
        col(f)?;
    }
    let reserved = [id_col, cluster_col, start_col, stop_col, event_col];
    let covariate_cols: Vec<usize> = (0..headers.len())
        .filter(|i| !reserved.contains(i))
        .collect();
    let factor_cols: Vec<usize> = covariate_cols
        .iter()
        .copied()
        .filter(|&i| schema.factors.iter().any(|f| f == &headers[i]))
        .collect();

    // First pass: collect raw string rows grouped by subject, and factor levels.
    let mut order: Vec<String> = Vec::new();
    let mut rows_by_id: HashMap<String, Vec<(usize, Vec<String>)>> = HashMap::new();
    for (row_no, record) in records.enumerate() {
        let record = record?;
        let fields: Vec<String> = record.iter().map(|s| s.trim().to_string()).collect();
        let id = fields
            .get(id_col)
            .cloned()
            .unwrap_or_default();
        if id.is_empty() {
            return Err(DataError::MissingValue {
                row: row_no + 2,
                column: schema.id.clone(),
            }
            .into());
        }
        rows_by_id
            .entry(id.clone())
            .or_insert_with(|| {
                order.push(id.clone());
                Vec::new()
            })
            .push((row_no + 2, fields));
    }
    if order.is_empty() {
        return Err(DataError::Empty.into());
    }

    // Factor levels in first-observed order (file order).
    let mut factor_levels: HashMap<usize, Vec<String>> = HashMap::new();
    for id in &order {
        for (row_no, fields) in &rows_by_id[id] {
            for &fc in &factor_cols {
                let v = &fields[fc];
                if v.is_empty() {
                    return Err(DataError::MissingValue {
                        row: *row_no,
                        column: headers[fc].clone(),
                    }
                    .into());
                }
                let levels = factor_levels.entry(fc).or_default();
                if !levels.contains(v) {
                    levels.push(v.clone());
                }
            }
        }
    }

    // Encoded column layout: metric columns pass through, factors expand to
    // level dummies (reference = first observed level).
    let mut covariate_names = Vec::new();
    let mut groups = Vec::new();
    let mut encoders: Vec<ColumnEncoder> = Vec::new();
    for &c in &covariate_cols {
        let name = headers[c].clone();
        if factor_cols.contains(&c) {
            let levels = factor_levels.get(&c).cloned().unwrap_or_default();
            if levels.len() < 2 {
                // Single-level factor carries no information; skip it.
                continue;
            }
            let lo = covariate_names.len();
            for level in levels.iter().skip(1) {
                covariate_names.push(format!("{name}={level}"));
            }
            groups.push(CovGroup {
                label: name.clone(),
                cols: lo..covariate_names.len(),
                df: levels.len() - 1,
                is_factor: true,
            });
            encoders.push(ColumnEncoder::Factor { col: c, levels });
        } else {
            let lo = covariate_names.len();
            covariate_names.push(name.clone());
            groups.push(CovGroup {
                label: name,
                cols: lo..lo + 1,
                df: 1,
                is_factor: false,
            });
            encoders.push(ColumnEncoder::Metric { col: c });
        }
    }
    let factors = encoders
        .iter()
        .filter_map(|e| match e {
            ColumnEncoder::Factor { col, levels } => Some(FactorLevels {
                column: headers[*col].clone(),
                levels: levels.clone(),
            }),
            _ => None,
        })
        .collect();

    // Second pass: numeric parsing and per-subject assembly.
    let parse_num = |row_no: usize, column: &str, v: &str| -> Result<f64, DataError> {
        if v.is_empty() {
            return Err(DataError::MissingValue {
                row: row_no,
                column: column.to_string(),
            });
        }
        v.parse::<f64>().map_err(|_| DataError::BadNumber {
            row: row_no,
            column: column.to_string(),
            value: v.to_string(),
        })
    };

    let mut subjects = Vec::with_capacity(order.len());
    for id in &order {
        let mut raw: Vec<RawRow> = Vec::new();
        for (row_no, fields) in &rows_by_id[id] {
            let start = parse_num(*row_no, &schema.start, &fields[start_col])?;
            let stop = parse_num(*row_no, &schema.stop, &fields[stop_col])?;
            let event_val = parse_num(*row_no, &schema.event, &fields[event_col])?;
            let event = if event_val == 0.0 {
                0
            } else if event_val == 1.0 {
                1
            } else {
                return Err(DataError::BadEventFlag(id.clone()).into());
            };
            let mut values = Vec::with_capacity(covariate_names.len());
            for enc in &encoders {
                match enc {
                    ColumnEncoder::Metric { col } => {
                        values.push(parse_num(*row_no, &headers[*col], &fields[*col])?);
                    }
                    ColumnEncoder::Factor { col, levels } => {
                        let v = &fields[*col];
                        let li = levels.iter().position(|l| l == v).ok_or_else(|| {
                            DataError::UnknownLevel {
                                column: headers[*col].clone(),
                                level: v.clone(),
                            }
                        })?;
                        for k in 1..levels.len() {
                            values.push(if li == k { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
            raw.push(RawRow {
                cluster: fields[cluster_col].clone(),
                start,
                stop,
                event,
                values,
            });
        }
        let subject = assemble_subject(id, raw)?;
        subjects.push(subject);
    }

    let mut ds = dataset_from_subjects(subjects, covariate_names, groups)
        .map_err(crate::error::Error::from)?;
    ds.factors = factors;
    Ok(ds)
}

enum ColumnEncoder {
    Metric { col: usize },
    Factor { col: usize, levels: Vec<String> },
}

fn assemble_subject(id: &str, rows: Vec<RawRow>) -> Result<Subject, DataError> {
    let first = &rows[0];
    if first.start > 0.0 {
        return Err(DataError::LeftTruncated(id.to_string()));
    }
    if first.start < 0.0 {
        return Err(DataError::NonMonotoneTimes(id.to_string()));
    }
    let cluster = first.cluster.clone();
    let mut track = Vec::with_capacity(rows.len());
    let mut prev_stop = 0.0;
    for (i, row) in rows.iter().enumerate() {
        if row.cluster != cluster {
            return Err(DataError::InconsistentCluster(id.to_string()));
        }
        if i > 0 && row.start != prev_stop {
            return Err(DataError::NonMonotoneTimes(id.to_string()));
        }
        if row.stop == row.start {
            return Err(DataError::EmptyInterval(id.to_string()));
        }
        if row.stop < row.start || !row.stop.is_finite() {
            return Err(DataError::NonMonotoneTimes(id.to_string()));
        }
        if row.event == 1 && i + 1 < rows.len() {
            return Err(DataError::EventBeforeEnd(id.to_string()));
        }
        track.push((row.start, row.values.clone()));
        prev_stop = row.stop;
    }
    Ok(Subject {
        subject_id: id.to_string(),
        cluster_id: cluster,
        entry_time: 0.0,
        exit_time: prev_stop,
        event: rows.last().unwrap().event == 1,
        covariate_track: track,
    })
}

/// Per-covariate and per-cluster diagnostics with data-quality flags.
#[derive(Debug, Clone)]
pub struct DataReport {
    pub n_subjects: usize,
    pub n_clusters: usize,
    pub n_episodes: usize,
    pub n_events: usize,
    pub covariates: Vec<CovariateSummary>,
    pub cluster_sizes: Vec<usize>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CovariateSummary {
    pub name: String,
    pub mean: f64,
    pub variance: f64,
}

impl fmt::Display for DataReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} subjects in {} clusters, {} episodes, {} events",
            self.n_subjects, self.n_clusters, self.n_episodes, self.n_events
        )?;
        for c in &self.covariates {
            writeln!(f, "  {}: mean {:.4}, variance {:.4}", c.name, c.mean, c.variance)?;
        }
        for flag in &self.flags {
            writeln!(f, "  flag: {flag}")?;
        }
        Ok(())
    }
}

/// Diagnostics over episode rows; reporting only, never fails.
pub fn validate(dataset: &Dataset) -> DataReport {
    let n_episodes = dataset.episodes.len();
    let p = dataset.n_covariates();
    let mut mean = vec![0.0; p];
    let mut m2 = vec![0.0; p];
    for (k, ep) in dataset.episodes.iter().enumerate() {
        let k1 = (k + 1) as f64;
        for j in 0..p {
            let d = ep.x[j] - mean[j];
            mean[j] += d / k1;
            m2[j] += d * (ep.x[j] - mean[j]);
        }
    }
    let denom = (n_episodes.max(2) - 1) as f64;
    let covariates: Vec<CovariateSummary> = (0..p)
        .map(|j| CovariateSummary {
            name: dataset.covariate_names[j].clone(),
            mean: mean[j],
            variance: m2[j] / denom,
        })
        .collect();
    let mut flags = Vec::new();
    for c in &covariates {
        if c.variance < 1e-12 {
            flags.push(format!("zero variance: {}", c.name));
        }
    }
    let n_events = dataset.n_events();
    if n_events == 0 {
        flags.push("no events".to_string());
    }
    DataReport {
        n_subjects: dataset.subjects.len(),
        n_clusters: dataset.n_clusters(),
        n_episodes,
        n_events,
        covariates,
        cluster_sizes: dataset.clusters.iter().map(|c| c.subjects.len()).collect(),
        flags,
    }
}
