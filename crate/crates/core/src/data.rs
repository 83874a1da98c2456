//! Clustered ordinal data: clusters of members carrying one ordinal outcome
//! and three ordinal auxiliaries, plus the two cluster-level covariates.
//!
//! Category codes are 1-based throughout. A missing value is `None`.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordinal category code, 1-based.
pub type Category = u8;

/// Number of member-level ordinal variables (outcome plus three auxiliaries).
pub const N_VARIABLES: usize = 4;

/// One of the four member-level ordinal variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variable {
    Y,
    M1,
    M2,
    M3,
}

impl Variable {
    pub const ALL: [Variable; N_VARIABLES] = [Variable::Y, Variable::M1, Variable::M2, Variable::M3];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Variable::Y => "y",
            Variable::M1 => "m1",
            Variable::M2 => "m2",
            Variable::M3 => "m3",
        }
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A level-1 unit. The member exists even when its outcome is missing.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Member {
    /// Indexed by [`Variable::index`]: `y`, `m1`, `m2`, `m3`.
    pub values: [Option<Category>; N_VARIABLES],
}

impl Member {
    pub fn new(y: Option<Category>, m1: Option<Category>, m2: Option<Category>, m3: Option<Category>) -> Self {
        Member { values: [y, m1, m2, m3] }
    }

    pub fn complete(values: [Category; N_VARIABLES]) -> Self {
        Member { values: values.map(Some) }
    }

    pub fn y(&self) -> Option<Category> {
        self.values[0]
    }

    pub fn get(&self, v: Variable) -> Option<Category> {
        self.values[v.index()]
    }

    pub fn set(&mut self, v: Variable, value: Option<Category>) {
        self.values[v.index()] = value;
    }
}

/// A level-2 unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: u64,
    /// Continuous cluster-level covariate.
    pub x: f64,
    /// Binary cluster-level covariate, stored as 0.0 or 1.0.
    pub z: f64,
    /// Recorded cluster size `n_i`; equals `members.len()` in a valid dataset.
    pub size: usize,
    /// Size before any complete-case reduction. Equal to `size` otherwise.
    pub original_size: usize,
    pub members: Vec<Member>,
}

impl Cluster {
    pub fn new(id: u64, x: f64, z: f64, members: Vec<Member>) -> Self {
        let size = members.len();
        Cluster { id, x, z, size, original_size: size, members }
    }

    pub fn n_observed(&self, v: Variable) -> usize {
        self.members.iter().filter(|m| m.get(v).is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredDataset {
    pub clusters: Vec<Cluster>,
    /// Category counts for `y`, `m1`, `m2`, `m3`.
    pub n_categories: [u8; N_VARIABLES],
}

impl ClusteredDataset {
    pub fn new(clusters: Vec<Cluster>, n_categories: [u8; N_VARIABLES]) -> Self {
        ClusteredDataset { clusters, n_categories }
    }

    pub fn n_categories_y(&self) -> u8 {
        self.n_categories[0]
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_members(&self) -> usize {
        self.clusters.iter().map(|c| c.members.len()).sum()
    }

    pub fn members(&self) -> impl Iterator<Item = (&Cluster, &Member)> {
        self.clusters.iter().flat_map(|c| c.members.iter().map(move |m| (c, m)))
    }

    pub fn n_missing(&self, v: Variable) -> usize {
        self.members().filter(|(_, m)| m.get(v).is_none()).count()
    }

    pub fn has_missing(&self) -> bool {
        self.members().any(|(_, m)| m.values.iter().any(Option::is_none))
    }

    /// Boolean mask of missing cells, one `[bool; 4]` per member in storage order.
    pub fn missing_mask(&self) -> Vec<[bool; N_VARIABLES]> {
        self.members().map(|(_, m)| m.values.map(|v| v.is_none())).collect()
    }

    pub fn validate(&self) -> ValidationReport {
        validate_dataset(self)
    }
}

/// Strictly increasing cutpoints plus slopes of a proportional-odds model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub cutpoints: Vec<f64>,
    pub slopes: Vec<f64>,
}

impl ParamVector {
    pub fn new(cutpoints: Vec<f64>, slopes: Vec<f64>) -> Result<Self> {
        let p = ParamVector { cutpoints, slopes };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<()> {
        if self.cutpoints.is_empty() {
            return Err(Error::Domain("at least one cutpoint is required".into()));
        }
        if self.cutpoints.iter().chain(&self.slopes).any(|v| !v.is_finite()) {
            return Err(Error::Domain("parameters must be finite".into()));
        }
        if !strictly_increasing(&self.cutpoints) {
            return Err(Error::Domain(format!(
                "cutpoints must be strictly increasing: {:?}",
                self.cutpoints
            )));
        }
        Ok(())
    }

    /// `η₁ … η_{C−1}, β₁ …` as one flat vector.
    pub fn to_vec(&self) -> Vec<f64> {
        self.cutpoints.iter().chain(&self.slopes).copied().collect()
    }

    pub fn from_slice(values: &[f64], n_cutpoints: usize) -> Self {
        ParamVector {
            cutpoints: values[..n_cutpoints].to_vec(),
            slopes: values[n_cutpoints..].to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.cutpoints.len() + self.slopes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameter labels in flat order: `eta1`, `eta2`, …, `beta1`, `beta2`.
    pub fn names(&self) -> Vec<String> {
        param_names(self.cutpoints.len(), self.slopes.len())
    }
}

pub fn param_names(n_cutpoints: usize, n_slopes: usize) -> Vec<String> {
    (1..=n_cutpoints)
        .map(|c| format!("eta{c}"))
        .chain((1..=n_slopes).map(|k| format!("beta{k}")))
        .collect()
}

pub(crate) fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DuplicateId { id: u64 },
    SizeMismatch { id: u64, size: usize, members: usize },
    EmptyCluster { id: u64 },
    CategoryOutOfRange { id: u64, member: usize, variable: Variable, value: Category, max: u8 },
    NonBinaryZ { id: u64, z: f64 },
    NonFiniteX { id: u64 },
    TooFewCategories { variable: Variable, n: u8 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId { id } => write!(f, "duplicate cluster id {id}"),
            Violation::SizeMismatch { id, size, members } => {
                write!(f, "size mismatch in cluster {id}: size {size} but {members} members")
            }
            Violation::EmptyCluster { id } => write!(f, "cluster {id} has no members"),
            Violation::CategoryOutOfRange { id, member, variable, value, max } => write!(
                f,
                "category out of range in cluster {id} member {member}: {variable}={value} not in 1..={max}"
            ),
            Violation::NonBinaryZ { id, z } => write!(f, "non-binary z={z} in cluster {id}"),
            Violation::NonFiniteX { id } => write!(f, "non-finite x in cluster {id}"),
            Violation::TooFewCategories { variable, n } => {
                write!(f, "variable {variable} declares {n} categories")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            let msg = self.violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
            Err(Error::Data(msg))
        }
    }
}

/// Checks the structural invariants. Violations are returned as data.
pub fn validate_dataset(d: &ClusteredDataset) -> ValidationReport {
    let mut violations = Vec::new();
    let min_categories = [3u8, 2, 2, 2];
    for (v, (&n, &min)) in Variable::ALL.iter().zip(d.n_categories.iter().zip(&min_categories)) {
        if n < min {
            violations.push(Violation::TooFewCategories { variable: *v, n });
        }
    }
    let mut seen = HashSet::with_capacity(d.clusters.len());
    for c in &d.clusters {
        if !seen.insert(c.id) {
            violations.push(Violation::DuplicateId { id: c.id });
        }
        if c.members.is_empty() {
            violations.push(Violation::EmptyCluster { id: c.id });
        }
        if c.size != c.members.len() {
            violations.push(Violation::SizeMismatch { id: c.id, size: c.size, members: c.members.len() });
        }
        if !c.x.is_finite() {
            violations.push(Violation::NonFiniteX { id: c.id });
        }
        if c.z != 0.0 && c.z != 1.0 {
            violations.push(Violation::NonBinaryZ { id: c.id, z: c.z });
        }
        for (j, m) in c.members.iter().enumerate() {
            for v in Variable::ALL {
                let max = d.n_categories[v.index()];
                if let Some(value) = m.get(v) {
                    if value < 1 || value > max {
                        violations.push(Violation::CategoryOutOfRange { id: c.id, member: j, variable: v, value, max });
                    }
                }
            }
        }
    }
    ValidationReport { violations }
}

// ---------------------------------------------------------------------------
// Informative-cluster-size diagnostic

/// Spearman correlation between each cluster's mean observed outcome and its size.
///
/// Only clusters with at least one observed `y` participate; at least three are
/// required. Ties receive average ranks.
pub fn ics_diagnostic(d: &ClusteredDataset) -> Result<f64> {
    let (means, sizes): (Vec<f64>, Vec<f64>) = d
        .clusters
        .iter()
        .filter_map(|c| {
            let obs: Vec<f64> = c.members.iter().filter_map(|m| m.y()).map(f64::from).collect();
            (!obs.is_empty()).then(|| (obs.iter().sum::<f64>() / obs.len() as f64, c.size as f64))
        })
        .unzip();
    if means.len() < 3 {
        return Err(Error::TooFewClusters { needed: 3, found: means.len() });
    }
    spearman(&means, &sizes)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("{} vs {} observations", a.len(), b.len())));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - mean) * (y - mean);
        saa += (x - mean) * (x - mean);
        sbb += (y - mean) * (y - mean);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::DegenerateRanks("a variable has zero rank variance".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub(crate) fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        // 1-based ranks start+1..=end share their mean
        let avg = (start + 1 + end) as f64 / 2.0;
        for &k in &idx[start..end] {
            ranks[k] = avg;
        }
        start = end;
    }
    ranks
}

// ---------------------------------------------------------------------------
// Complete cases

/// Drops members with missing `y` and clusters left empty.
///
/// Each retained cluster's `size` becomes its observed member count; the
/// pre-deletion size stays available as `original_size`.
pub fn complete_cases(d: &ClusteredDataset) -> Result<ClusteredDataset> {
    let clusters: Vec<Cluster> = d
        .clusters
        .iter()
        .filter_map(|c| {
            let members: Vec<Member> = c.members.iter().filter(|m| m.y().is_some()).cloned().collect();
            (!members.is_empty()).then(|| Cluster {
                id: c.id,
                x: c.x,
                z: c.z,
                size: members.len(),
                original_size: c.original_size,
                members,
            })
        })
        .collect();
    if clusters.is_empty() {
        return Err(Error::EmptyResult);
    }
    Ok(ClusteredDataset { clusters, n_categories: d.n_categories })
}

// ---------------------------------------------------------------------------
// CSV interchange: cluster_id, x, z, cluster_size, y, m1, m2, m3

pub const CSV_HEADER: [&str; 8] = ["cluster_id", "x", "z", "cluster_size", "y", "m1", "m2", "m3"];

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    cluster_id: u64,
    x: f64,
    z: f64,
    cluster_size: usize,
    y: Option<i64>,
    m1: Option<i64>,
    m2: Option<i64>,
    m3: Option<i64>,
}

/// Reads the member-per-row CSV. Rows of one cluster must be contiguous.
///
/// Schema problems (unparseable fields, out-of-range categories, non-binary
/// `z`, cluster attributes that change within a cluster, a size column that
/// disagrees with the row count) are reported with the 1-based data row.
pub fn read_csv<R: Read>(reader: R, n_categories: [u8; N_VARIABLES]) -> Result<ClusteredDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let found: Vec<&str> = headers.iter().collect();
    if found != CSV_HEADER {
        return Err(Error::Schema { row: 0, message: format!("expected header {CSV_HEADER:?}, found {found:?}") });
    }
    let mut clusters: Vec<Cluster> = Vec::new();
    let mut first_row_of_cluster = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in rdr.deserialize::<CsvRow>().enumerate() {
        let row = i + 1;
        let r = rec.map_err(|e| Error::Schema { row, message: e.to_string() })?;
        if !r.x.is_finite() {
            return Err(Error::Schema { row, message: "x is not finite".into() });
        }
        if r.z != 0.0 && r.z != 1.0 {
            return Err(Error::Schema { row, message: format!("z={} is not binary", r.z) });
        }
        let mut values = [None; N_VARIABLES];
        for (k, (raw, name)) in [r.y, r.m1, r.m2, r.m3].into_iter().zip(["y", "m1", "m2", "m3"]).enumerate() {
            if let Some(v) = raw {
                let max = n_categories[k];
                if v < 1 || v > i64::from(max) {
                    return Err(Error::Schema {
                        row,
                        message: format!("category out of range: {name}={v} not in 1..={max}"),
                    });
                }
                values[k] = Some(v as Category);
            }
        }
        let member = Member { values };
        match clusters.last_mut() {
            Some(c) if c.id == r.cluster_id => {
                if c.x != r.x || c.z != r.z || c.size != r.cluster_size {
                    return Err(Error::Schema { row, message: "cluster-level fields vary within cluster".into() });
                }
                c.members.push(member);
            }
            _ => {
                if !seen.insert(r.cluster_id) {
                    return Err(Error::Schema {
                        row,
                        message: format!("rows of cluster {} are not contiguous", r.cluster_id),
                    });
                }
                first_row_of_cluster.push(row);
                clusters.push(Cluster {
                    id: r.cluster_id,
                    x: r.x,
                    z: r.z,
                    size: r.cluster_size,
                    original_size: r.cluster_size,
                    members: vec![member],
                });
            }
        }
    }
    for (c, row) in clusters.iter().zip(first_row_of_cluster) {
        if c.size != c.members.len() {
            return Err(Error::Schema {
                row,
                message: format!("size mismatch: cluster {} has cluster_size {} but {} rows", c.id, c.size, c.members.len()),
            });
        }
    }
    let d = ClusteredDataset { clusters, n_categories };
    d.validate().into_result()?;
    Ok(d)
}

pub fn read_csv_path(path: impl AsRef<Path>, n_categories: [u8; N_VARIABLES]) -> Result<ClusteredDataset> {
    read_csv(std::fs::File::open(path)?, n_categories)
}

pub fn write_csv<W: Write>(d: &ClusteredDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for c in &d.clusters {
        for m in &c.members {
            let [y, m1, m2, m3] = m.values.map(|v| v.map(i64::from));
            w.serialize(CsvRow { cluster_id: c.id, x: c.x, z: c.z, cluster_size: c.size, y, m1, m2, m3 })?;
        }
    }
    if d.clusters.is_empty() {
        w.write_record(CSV_HEADER)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_path(d: &ClusteredDataset, path: impl AsRef<Path>) -> Result<()> {
    write_csv(d, std::fs::File::create(path)?)
}
