//! Clustered long-format data, model specification and validation.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MamError, Result};
use crate::family::{Family, Link};

/// One observation: response, fixed covariates and random-effect design row.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub y: f64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: String,
    pub rows: Vec<Observation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredDataset {
    pub clusters: Vec<Cluster>,
    pub n_total: usize,
    /// Number of fixed covariates per row.
    pub p: usize,
    /// Random-effect design dimension.
    pub m: usize,
    pub covariate_names: Vec<String>,
}

impl ClusteredDataset {
    /// Builds a dataset from rows already grouped into clusters; `z` is derived
    /// from `re` for every row.
    pub fn from_clusters(
        groups: Vec<(String, Vec<(f64, Vec<f64>)>)>,
        covariate_names: Vec<String>,
        re: &ReStructure,
    ) -> Self {
        let p = covariate_names.len();
        let m = re.dim();
        let mut n_total = 0;
        let clusters = groups
            .into_iter()
            .map(|(id, rows)| {
                n_total += rows.len();
                let rows = rows
                    .into_iter()
                    .map(|(y, x)| {
                        let z = re.design_row(&x);
                        Observation { y, x, z }
                    })
                    .collect();
                Cluster { id, rows }
            })
            .collect();
        ClusteredDataset {
            clusters,
            n_total,
            p,
            m,
            covariate_names,
        }
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn rows(&self) -> impl Iterator<Item = &Observation> {
        self.clusters.iter().flat_map(|c| c.rows.iter())
    }

    /// Values of covariate `j` over all rows, in cluster order.
    pub fn covariate(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r.x[j]).collect()
    }

    /// Copy of the dataset with the random-effect design rebuilt from `re`.
    pub fn with_re_structure(&self, re: &ReStructure) -> Self {
        let mut out = self.clone();
        out.m = re.dim();
        for c in &mut out.clusters {
            for r in &mut c.rows {
                r.z = re.design_row(&r.x);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmoothTermSpec {
    pub covariate: usize,
    pub basis_dim: usize,
    #[serde(default = "default_penalty_order")]
    pub penalty_order: usize,
}

fn default_penalty_order() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ReStructure {
    None,
    Intercept,
    InterceptSlope { covariate: usize },
}

impl ReStructure {
    pub fn dim(&self) -> usize {
        match self {
            ReStructure::None => 0,
            ReStructure::Intercept => 1,
            ReStructure::InterceptSlope { .. } => 2,
        }
    }

    pub fn design_row(&self, x: &[f64]) -> Vec<f64> {
        match self {
            ReStructure::None => Vec::new(),
            ReStructure::Intercept => vec![1.0],
            ReStructure::InterceptSlope { covariate } => {
                vec![1.0, x.get(*covariate).copied().unwrap_or(f64::NAN)]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub link: Link,
    pub smooth_terms: Vec<SmoothTermSpec>,
    pub linear_terms: Vec<usize>,
    pub re_structure: ReStructure,
    pub ghq_k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    EmptyCluster,
    DuplicateClusterId,
    CountMismatch,
    CovariateArity,
    ReArity,
    ResponseSupport,
    NonFiniteCovariate,
    LinkFamily,
    CovariateIndex,
    DuplicateTerm,
    GhqNodes,
    BasisTooSmall,
    TooFewDistinct,
    NoObservations,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    fn push(&mut self, kind: ViolationKind, message: impl Into<String>) {
        self.violations.push(Violation {
            kind,
            message: message.into(),
        });
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(MamError::Validation(self))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "  - {}", v.message)?;
        }
        Ok(())
    }
}

/// Checks every dataset and specification invariant; the report is empty iff a
/// fit may proceed.
pub fn validate(dataset: &ClusteredDataset, spec: &ModelSpec) -> ValidationReport {
    use ViolationKind::*;
    let mut report = ValidationReport::default();

    if dataset.clusters.is_empty() {
        report.push(NoObservations, "no observations");
    }
    let mut seen = BTreeSet::new();
    let mut count = 0;
    for c in &dataset.clusters {
        if c.rows.is_empty() {
            report.push(EmptyCluster, format!("cluster '{}' has no rows", c.id));
        }
        if !seen.insert(c.id.as_str()) {
            report.push(DuplicateClusterId, format!("cluster id '{}' is repeated", c.id));
        }
        count += c.rows.len();
    }
    if count != dataset.n_total {
        report.push(
            CountMismatch,
            format!("n_total is {} but clusters hold {count} rows", dataset.n_total),
        );
    }

    let mut bad_support = 0;
    let mut bad_x = 0;
    let mut bad_z = 0;
    let mut first_support = None;
    for (i, r) in dataset.rows().enumerate() {
        if r.x.len() != dataset.p {
            report.push(
                CovariateArity,
                format!("row {i} has {} covariates, expected {}", r.x.len(), dataset.p),
            );
        }
        if r.z.len() != dataset.m {
            bad_z += 1;
        }
        if !spec.family.in_support(r.y) {
            bad_support += 1;
            first_support.get_or_insert((i, r.y));
        }
        if r.x.iter().chain(r.z.iter()).any(|v| !v.is_finite()) {
            bad_x += 1;
        }
    }
    if let Some((i, y)) = first_support {
        report.push(
            ResponseSupport,
            format!(
                "response outside support of {:?}: {bad_support} row(s), first at row {i} (y = {y})",
                spec.family
            ),
        );
    }
    if bad_x > 0 {
        report.push(
            NonFiniteCovariate,
            format!("{bad_x} row(s) carry non-finite covariate values"),
        );
    }
    if bad_z > 0 || dataset.m != spec.re_structure.dim() {
        report.push(
            ReArity,
            format!(
                "random-effect design has dimension {} but the structure needs {}",
                dataset.m,
                spec.re_structure.dim()
            ),
        );
    }

    if !spec.family.supports(spec.link) {
        report.push(
            LinkFamily,
            format!("link {:?} is not compatible with family {:?}", spec.link, spec.family),
        );
    }
    if spec.ghq_k < 1 {
        report.push(GhqNodes, "ghq_k must be at least 1");
    }

    let mut used = BTreeSet::new();
    let check_index = |idx: usize, what: &str, report: &mut ValidationReport| {
        if idx >= dataset.p {
            report.push(
                CovariateIndex,
                format!("{what} refers to covariate {idx}, but only {} exist", dataset.p),
            );
        }
    };
    for t in &spec.smooth_terms {
        check_index(t.covariate, "smooth term", &mut report);
        if !used.insert(t.covariate) {
            report.push(
                DuplicateTerm,
                format!("covariate {} appears in more than one term", t.covariate),
            );
        }
        if t.basis_dim < t.penalty_order + 2 {
            report.push(
                BasisTooSmall,
                format!(
                    "basis too small: dimension {} needs at least penalty order + 2 = {}",
                    t.basis_dim,
                    t.penalty_order + 2
                ),
            );
        }
        if t.covariate < dataset.p {
            let mut vals = dataset.covariate(t.covariate);
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            if vals.len() < t.basis_dim {
                report.push(
                    TooFewDistinct,
                    format!(
                        "covariate {} has {} distinct values, fewer than basis dimension {}",
                        t.covariate,
                        vals.len(),
                        t.basis_dim
                    ),
                );
            }
        }
    }
    for &j in &spec.linear_terms {
        check_index(j, "linear term", &mut report);
        if !used.insert(j) {
            report.push(
                DuplicateTerm,
                format!("covariate {j} appears in more than one term"),
            );
        }
    }
    if let ReStructure::InterceptSlope { covariate } = spec.re_structure {
        check_index(covariate, "random slope", &mut report);
    }
    report
}

/// Column mapping for long-format CSV input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub cluster: String,
    pub response: String,
    pub covariates: Vec<String>,
    /// Name of the random-slope covariate, if any; `None` with
    /// `random_intercept = false` disables random effects.
    #[serde(default)]
    pub slope: Option<String>,
    #[serde(default = "default_true")]
    pub random_intercept: bool,
}

fn default_true() -> bool {
    true
}

impl CsvSchema {
    pub fn re_structure(&self) -> Result<ReStructure> {
        match (&self.slope, self.random_intercept) {
            (None, false) => Ok(ReStructure::None),
            (None, true) => Ok(ReStructure::Intercept),
            (Some(name), true) => {
                let covariate = self
                    .covariates
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| {
                        MamError::Schema(format!("slope covariate '{name}' is not a covariate"))
                    })?;
                Ok(ReStructure::InterceptSlope { covariate })
            }
            (Some(_), false) => Err(MamError::Schema(
                "a random slope requires a random intercept".into(),
            )),
        }
    }
}

/// Reads a long-format CSV (one row per observation), grouping rows by cluster
/// id in order of first appearance and keeping the file order within clusters.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<ClusteredDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| {
        MamError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<ClusteredDataset> {
    let re = schema.re_structure()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(_) => return Err(MamError::NoObservations),
    };
    if headers.is_empty() {
        return Err(MamError::NoObservations);
    }
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| MamError::Schema(format!("missing column '{name}'")))
    };
    let cluster_col = col(&schema.cluster)?;
    let y_col = col(&schema.response)?;
    let x_cols = schema
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<(String, Vec<(f64, Vec<f64>)>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (k, record) in rdr.records().enumerate() {
        // header is line 1
        let line = k + 2;
        let record = record.map_err(|e| MamError::Parse {
            line,
            message: e.to_string(),
        })?;
        let field = |j: usize| {
            record.get(j).ok_or_else(|| MamError::Parse {
                line,
                message: format!("missing field {}", j + 1),
            })
        };
        let number = |j: usize, name: &str| -> Result<f64> {
            let raw = field(j)?;
            raw.parse::<f64>().map_err(|_| MamError::Parse {
                line,
                message: format!("column '{name}': cannot parse '{raw}' as a number"),
            })
        };
        let id = field(cluster_col)?.to_string();
        let y = number(y_col, &schema.response)?;
        let x = x_cols
            .iter()
            .zip(&schema.covariates)
            .map(|(&j, name)| number(j, name))
            .collect::<Result<Vec<_>>>()?;
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            order.push((id, Vec::new()));
            order.len() - 1
        });
        order[slot].1.push((y, x));
    }
    if order.is_empty() {
        return Err(MamError::NoObservations);
    }
    Ok(ClusteredDataset::from_clusters(
        order,
        schema.covariates.clone(),
        &re,
    ))
}

/// Writes the dataset back in long format. Floats use the shortest
/// representation that parses back to the same bits.
pub fn write_csv<W: std::io::Write>(
    dataset: &ClusteredDataset,
    schema: &CsvSchema,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![schema.cluster.clone(), schema.response.clone()];
    header.extend(schema.covariates.iter().cloned());
    w.write_record(&header)?;
    for c in &dataset.clusters {
        for r in &c.rows {
            let mut rec = vec![c.id.clone(), format!("{:?}", r.y)];
            rec.extend(r.x.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub const SCHEMA_VERSION: u32 = 1;

/// JSON model configuration: column names plus the model specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub cluster: String,
    pub response: String,
    pub family: Family,
    pub link: Link,
    #[serde(default)]
    pub smooth_terms: Vec<SmoothTermConfig>,
    #[serde(default)]
    pub linear_terms: Vec<String>,
    pub random_effects: RandomEffectsConfig,
    #[serde(default = "default_ghq_k")]
    pub ghq_k: usize,
    /// Reporting grid size per smooth covariate.
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

fn default_ghq_k() -> usize {
    20
}

fn default_grid_points() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmoothTermConfig {
    pub covariate: String,
    #[serde(default = "default_basis_dim")]
    pub basis_dim: usize,
    #[serde(default = "default_penalty_order")]
    pub penalty_order: usize,
}

fn default_basis_dim() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RandomEffectsConfig {
    None,
    Intercept,
    InterceptSlope { covariate: String },
}

impl ModelConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            MamError::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Covariates in order of first mention: smooth terms, linear terms, slope.
    pub fn covariates(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut add = |name: &String| {
            if !out.contains(name) {
                out.push(name.clone());
            }
        };
        self.smooth_terms.iter().for_each(|t| add(&t.covariate));
        self.linear_terms.iter().for_each(&mut add);
        if let RandomEffectsConfig::InterceptSlope { covariate } = &self.random_effects {
            add(covariate);
        }
        out
    }

    pub fn csv_schema(&self) -> CsvSchema {
        let (slope, random_intercept) = match &self.random_effects {
            RandomEffectsConfig::None => (None, false),
            RandomEffectsConfig::Intercept => (None, true),
            RandomEffectsConfig::InterceptSlope { covariate } => (Some(covariate.clone()), true),
        };
        CsvSchema {
            cluster: self.cluster.clone(),
            response: self.response.clone(),
            covariates: self.covariates(),
            slope,
            random_intercept,
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let covs = self.covariates();
        let idx = |name: &String| covs.iter().position(|c| c == name).expect("listed covariate");
        let re_structure = self.csv_schema().re_structure()?;
        Ok(ModelSpec {
            family: self.family,
            link: self.link,
            smooth_terms: self
                .smooth_terms
                .iter()
                .map(|t| SmoothTermSpec {
                    covariate: idx(&t.covariate),
                    basis_dim: t.basis_dim,
                    penalty_order: t.penalty_order,
                })
                .collect(),
            linear_terms: self.linear_terms.iter().map(idx).collect(),
            re_structure,
            ghq_k: self.ghq_k,
        })
    }
}
