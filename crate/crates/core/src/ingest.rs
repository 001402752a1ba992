//! Report and ontology parsing, filtering, and aggregation of report-level
//! binary outcomes into binomial cells by covariate stratum.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Study arm of a report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Arm {
    Control,
    Target,
}

impl Arm {
    pub fn indicator(self) -> u8 {
        match self {
            Arm::Control => 0,
            Arm::Target => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CovariateValue {
    Level(String),
    Numeric(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRecord {
    pub report_id: String,
    pub arm: Arm,
    /// Raw vaccine codes listed on the report.
    pub vaccine_codes: Vec<String>,
    pub covariates: Vec<CovariateValue>,
    pub ae_terms: BTreeSet<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    #[default]
    Categorical,
    /// Numeric column binned by the age breaks.
    Binned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateColumn {
    pub column: String,
    #[serde(default)]
    pub kind: CovariateKind,
    /// Reference level for dummy coding; defaults to the lowest level.
    #[serde(default)]
    pub reference: Option<String>,
}

/// Column mapping for the reports file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSchema {
    pub id_column: String,
    pub vaccine_column: String,
    pub ae_column: String,
    #[serde(default)]
    pub covariates: Vec<CovariateColumn>,
    pub target_codes: Vec<String>,
    pub control_codes: Vec<String>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default = "default_list_delimiter")]
    pub list_delimiter: char,
}

fn default_delimiter() -> char {
    ','
}

fn default_list_delimiter() -> char {
    ';'
}

/// A row that could not be turned into a record.
#[derive(Clone, Debug, PartialEq)]
pub struct RowDiagnostic {
    pub line: u64,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedReports {
    pub records: Vec<ReportRecord>,
    pub diagnostics: Vec<RowDiagnostic>,
    pub warnings: Vec<String>,
}

fn read_utf8(path: &Path) -> Result<String> {
    let mut s = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| Error::io(path, e))?;
    Ok(s)
}

fn split_list(field: &str, delim: char) -> Vec<String> {
    field
        .split(delim)
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn parse_reports(path: &Path, schema: &ReportSchema) -> Result<ParsedReports> {
    let text = read_utf8(path)?;
    parse_reports_str(&text, schema).map_err(|e| match e {
        Error::Format { message, .. } => Error::Format {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

/// Parses report rows from in-memory text.
pub fn parse_reports_str(text: &str, schema: &ReportSchema) -> Result<ParsedReports> {
    let mut out = ParsedReports::default();
    if text.trim().is_empty() {
        out.warnings.push("reports file is empty".to_string());
        warn!("reports file is empty");
        return Ok(out);
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Format {
            path: Default::default(),
            message: e.to_string(),
        })?
        .clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("reports file has no column `{name}`")))
    };
    let id_idx = find(&schema.id_column)?;
    let vac_idx = find(&schema.vaccine_column)?;
    let ae_idx = find(&schema.ae_column)?;
    let cov_idx = schema
        .covariates
        .iter()
        .map(|c| find(&c.column))
        .collect::<Result<Vec<_>>>()?;

    let target: BTreeSet<&str> = schema.target_codes.iter().map(String::as_str).collect();
    let control: BTreeSet<&str> = schema.control_codes.iter().map(String::as_str).collect();

    for row in reader.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                out.diagnostics.push(RowDiagnostic {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let mut fail = |message: String| {
            out.diagnostics.push(RowDiagnostic { line, message });
        };
        let get = |i: usize| row.get(i);
        let (Some(id), Some(vac), Some(aes)) = (get(id_idx), get(vac_idx), get(ae_idx)) else {
            fail(format!("expected {} fields, found {}", headers.len(), row.len()));
            continue;
        };
        let codes = split_list(vac, schema.list_delimiter);
        if codes.is_empty() {
            fail("empty vaccine code".to_string());
            continue;
        }
        let mut arms = BTreeSet::new();
        let mut unknown = None;
        for code in &codes {
            if target.contains(code.as_str()) {
                arms.insert(Arm::Target);
            } else if control.contains(code.as_str()) {
                arms.insert(Arm::Control);
            } else {
                unknown = Some(code.clone());
            }
        }
        if let Some(code) = unknown {
            fail(format!("unknown vaccine code `{code}`"));
            continue;
        }
        if arms.len() > 1 {
            fail(format!("report `{id}` mentions both study arms"));
            continue;
        }
        let arm = *arms.iter().next().expect("non-empty");

        let mut covariates = Vec::with_capacity(cov_idx.len());
        let mut bad = None;
        for (spec, &idx) in schema.covariates.iter().zip(&cov_idx) {
            let Some(raw) = get(idx) else {
                bad = Some(format!("missing covariate `{}`", spec.column));
                break;
            };
            if raw.is_empty() {
                bad = Some(format!("empty covariate `{}`", spec.column));
                break;
            }
            match spec.kind {
                CovariateKind::Categorical => covariates.push(CovariateValue::Level(raw.to_string())),
                CovariateKind::Binned => match raw.parse::<f64>() {
                    Ok(v) if v.is_finite() => covariates.push(CovariateValue::Numeric(v)),
                    _ => {
                        bad = Some(format!("non-numeric `{}` value `{raw}`", spec.column));
                        break;
                    }
                },
            }
        }
        if let Some(msg) = bad {
            fail(msg);
            continue;
        }

        out.records.push(ReportRecord {
            report_id: id.to_string(),
            arm,
            vaccine_codes: codes,
            covariates,
            ae_terms: split_list(aes, schema.list_delimiter).into_iter().collect(),
        });
    }
    if out.records.is_empty() {
        out.warnings.push("no valid report rows".to_string());
        warn!("no valid report rows");
    }
    Ok(out)
}

/// Report-level exclusion rules applied before aggregation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Exclusion {
    /// Drop reports whose numeric covariate is below `threshold`.
    Below { covariate: String, threshold: f64 },
    /// Drop reports whose covariate level is one of `levels`.
    LevelIn { covariate: String, levels: Vec<String> },
    /// Drop reports listing more than `max` vaccine codes.
    MoreCodesThan { max: usize },
    /// Drop reports listing any of these vaccine codes.
    CodeIn { codes: Vec<String> },
}

impl Exclusion {
    fn matches(&self, rec: &ReportRecord, schema: &ReportSchema) -> bool {
        let cov = |name: &str| {
            schema
                .covariates
                .iter()
                .position(|c| c.column == name)
                .and_then(|i| rec.covariates.get(i))
        };
        match self {
            Exclusion::Below { covariate, threshold } => {
                matches!(cov(covariate), Some(CovariateValue::Numeric(v)) if v < threshold)
            }
            Exclusion::LevelIn { covariate, levels } => match cov(covariate) {
                Some(CovariateValue::Level(l)) => levels.contains(l),
                _ => false,
            },
            Exclusion::MoreCodesThan { max } => rec.vaccine_codes.len() > *max,
            Exclusion::CodeIn { codes } => rec.vaccine_codes.iter().any(|c| codes.contains(c)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterOptions {
    pub min_ae_count: u64,
    /// Ascending cut points for binned covariates.
    pub age_breaks: Vec<f64>,
    pub exclusions: Vec<Exclusion>,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self {
            min_ae_count: 25,
            age_breaks: vec![30.0, 50.0, 65.0],
            exclusions: Vec::new(),
        }
    }
}

/// Bin index of `value` for ascending `breaks`: `[b_{i-1}, b_i)`.
pub fn bin_index(value: f64, breaks: &[f64]) -> usize {
    breaks.partition_point(|&b| b <= value)
}

/// Label of bin `idx`.
pub fn bin_label(idx: usize, breaks: &[f64]) -> String {
    let fmt = |v: f64| format!("{v}");
    if breaks.is_empty() {
        "all".to_string()
    } else if idx == 0 {
        format!("<{}", fmt(breaks[0]))
    } else if idx == breaks.len() {
        format!(">={}", fmt(breaks[idx - 1]))
    } else {
        format!("[{},{})", fmt(breaks[idx - 1]), fmt(breaks[idx]))
    }
}

/// One covariate after level resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateCoding {
    pub name: String,
    /// Levels in canonical order.
    pub levels: Vec<String>,
    pub reference: usize,
}

impl CovariateCoding {
    /// Number of dummy columns.
    pub fn width(&self) -> usize {
        self.levels.len().saturating_sub(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    /// Level index per covariate.
    pub levels: Vec<usize>,
    pub arm: Arm,
    /// Intercept followed by dummy columns.
    pub design: Vec<f64>,
    pub trials: u32,
}

impl Stratum {
    pub fn v(&self) -> f64 {
        self.arm.indicator() as f64
    }
}

/// Binomial sufficient statistics per covariate stratum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratifiedCells {
    pub covariates: Vec<CovariateCoding>,
    pub strata: Vec<Stratum>,
    /// `counts[s * n_aes + j]`
    pub counts: Vec<u32>,
    pub ae_vocabulary: Vec<String>,
}

impl StratifiedCells {
    pub fn n_strata(&self) -> usize {
        self.strata.len()
    }

    pub fn n_aes(&self) -> usize {
        self.ae_vocabulary.len()
    }

    /// Design width `p + 1`.
    pub fn n_coef(&self) -> usize {
        1 + self.covariates.iter().map(CovariateCoding::width).sum::<usize>()
    }

    pub fn count(&self, s: usize, j: usize) -> u32 {
        self.counts[s * self.n_aes() + j]
    }

    pub fn total_trials(&self) -> u64 {
        self.strata.iter().map(|s| s.trials as u64).sum()
    }

    /// Builds cells directly from strata and counts (simulation, tests).
    pub fn from_parts(
        covariates: Vec<CovariateCoding>,
        strata: Vec<Stratum>,
        counts: Vec<u32>,
        ae_vocabulary: Vec<String>,
    ) -> Result<Self> {
        let j = ae_vocabulary.len();
        if counts.len() != strata.len() * j {
            return Err(Error::InvalidArgument(format!(
                "counts has {} entries, expected {}",
                counts.len(),
                strata.len() * j
            )));
        }
        let width = 1 + covariates.iter().map(CovariateCoding::width).sum::<usize>();
        for (s, st) in strata.iter().enumerate() {
            if st.design.len() != width {
                return Err(Error::InvalidArgument(format!("stratum {s} design width mismatch")));
            }
            for jj in 0..j {
                if counts[s * j + jj] > st.trials {
                    return Err(Error::InvalidArgument(format!(
                        "count exceeds trials at stratum {s}, AE {jj}"
                    )));
                }
            }
        }
        Ok(Self {
            covariates,
            strata,
            counts,
            ae_vocabulary,
        })
    }

    /// Intercept-only cells with one stratum per arm.
    pub fn two_arm(
        trials: [u32; 2],
        control_counts: &[u32],
        target_counts: &[u32],
        ae_vocabulary: Vec<String>,
    ) -> Result<Self> {
        let strata = vec![
            Stratum {
                levels: vec![],
                arm: Arm::Control,
                design: vec![1.0],
                trials: trials[0],
            },
            Stratum {
                levels: vec![],
                arm: Arm::Target,
                design: vec![1.0],
                trials: trials[1],
            },
        ];
        let mut counts = control_counts.to_vec();
        counts.extend_from_slice(target_counts);
        Self::from_parts(vec![], strata, counts, ae_vocabulary)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StratifySummary {
    pub excluded_reports: usize,
    /// Retained reports that mention no modeled AE (kept as all-zero trials).
    pub reports_without_modeled_aes: usize,
    pub dropped_aes: usize,
}

/// Filters reports and AEs, then aggregates into canonical strata.
pub fn filter_and_stratify(
    records: &[ReportRecord],
    schema: &ReportSchema,
    options: &FilterOptions,
) -> Result<(StratifiedCells, StratifySummary)> {
    let mut summary = StratifySummary::default();
    if options.age_breaks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("age breaks must be strictly ascending".into()));
    }
    let kept: Vec<&ReportRecord> = records
        .iter()
        .filter(|r| !options.exclusions.iter().any(|e| e.matches(r, schema)))
        .collect();
    summary.excluded_reports = records.len() - kept.len();

    // AE totals over retained reports
    let mut totals: BTreeMap<&str, u64> = BTreeMap::new();
    for r in &kept {
        for t in &r.ae_terms {
            *totals.entry(t.as_str()).or_default() += 1;
        }
    }
    let candidates = totals.len();
    let mut vocab: Vec<(&str, u64)> = totals
        .into_iter()
        .filter(|&(_, c)| c >= options.min_ae_count)
        .collect();
    summary.dropped_aes = candidates - vocab.len();
    if vocab.is_empty() {
        return Err(Error::EmptyVocabulary {
            min_count: options.min_ae_count,
            candidates,
        });
    }
    vocab.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let ae_vocabulary: Vec<String> = vocab.iter().map(|(t, _)| t.to_string()).collect();
    let ae_index: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, (t, _))| (*t, i)).collect();

    // Resolve covariate levels per record
    let level_of = |r: &ReportRecord, c: usize| -> String {
        match &r.covariates[c] {
            CovariateValue::Level(l) => l.clone(),
            CovariateValue::Numeric(v) => bin_label(bin_index(*v, &options.age_breaks), &options.age_breaks),
        }
    };
    let mut codings = Vec::with_capacity(schema.covariates.len());
    for (c, spec) in schema.covariates.iter().enumerate() {
        let levels: Vec<String> = match spec.kind {
            CovariateKind::Categorical => {
                let set: BTreeSet<String> = kept.iter().map(|r| level_of(r, c)).collect();
                set.into_iter().collect()
            }
            CovariateKind::Binned => {
                let set: BTreeSet<usize> = kept
                    .iter()
                    .filter_map(|r| match r.covariates[c] {
                        CovariateValue::Numeric(v) => Some(bin_index(v, &options.age_breaks)),
                        _ => None,
                    })
                    .collect();
                set.into_iter().map(|i| bin_label(i, &options.age_breaks)).collect()
            }
        };
        let reference = match &spec.reference {
            Some(name) => levels.iter().position(|l| l == name).ok_or_else(|| {
                Error::Config(format!("reference level `{name}` not observed for `{}`", spec.column))
            })?,
            None => 0,
        };
        codings.push(CovariateCoding {
            name: spec.column.clone(),
            levels,
            reference,
        });
    }

    // Aggregate
    let j = ae_vocabulary.len();
    let mut cells: BTreeMap<(Vec<usize>, Arm), (u32, Vec<u32>)> = BTreeMap::new();
    for r in &kept {
        let key_levels: Vec<usize> = codings
            .iter()
            .enumerate()
            .map(|(c, coding)| {
                let l = level_of(r, c);
                coding.levels.iter().position(|x| *x == l).expect("level collected")
            })
            .collect();
        let entry = cells
            .entry((key_levels, r.arm))
            .or_insert_with(|| (0, vec![0; j]));
        entry.0 += 1;
        let mut any = false;
        for t in &r.ae_terms {
            if let Some(&idx) = ae_index.get(t.as_str()) {
                entry.1[idx] += 1;
                any = true;
            }
        }
        if !any {
            summary.reports_without_modeled_aes += 1;
        }
    }

    let mut strata = Vec::with_capacity(cells.len());
    let mut counts = Vec::with_capacity(cells.len() * j);
    for ((levels, arm), (trials, y)) in cells {
        strata.push(Stratum {
            design: design_row(&codings, &levels),
            levels,
            arm,
            trials,
        });
        counts.extend(y);
    }
    let cells = StratifiedCells::from_parts(codings, strata, counts, ae_vocabulary)?;
    Ok((cells, summary))
}

/// Intercept plus treatment-coded dummies.
pub fn design_row(codings: &[CovariateCoding], levels: &[usize]) -> Vec<f64> {
    let mut row = vec![1.0];
    for (coding, &l) in codings.iter().zip(levels) {
        for k in 0..coding.levels.len() {
            if k != coding.reference {
                row.push(if k == l { 1.0 } else { 0.0 });
            }
        }
    }
    row
}

/// Raw AE term to group mapping, deduplicated.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OntologyMapping {
    pub pairs: BTreeSet<(String, String)>,
    pub warnings: Vec<String>,
}

impl OntologyMapping {
    pub fn from_pairs<I, A, B>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        Self {
            pairs: pairs.into_iter().map(|(a, b)| (a.into(), b.into())).collect(),
            warnings: Vec::new(),
        }
    }
}

/// Reads a two-column `term_id,group_id` file with a header row.
pub fn parse_ontology(path: &Path) -> Result<OntologyMapping> {
    let text = read_utf8(path)?;
    parse_ontology_str(&text).map_err(|e| match e {
        Error::Format { message, .. } => Error::Format {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

pub fn parse_ontology_str(text: &str) -> Result<OntologyMapping> {
    let mut mapping = OntologyMapping::default();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    for row in reader.records() {
        let row = row.map_err(|e| Error::Format {
            path: Default::default(),
            message: e.to_string(),
        })?;
        if row.iter().all(str::is_empty) {
            continue;
        }
        match (row.get(0), row.get(1)) {
            (Some(t), Some(g)) if !t.is_empty() && !g.is_empty() => {
                mapping.pairs.insert((t.to_string(), g.to_string()));
            }
            _ => {
                let line = row.position().map(|p| p.line()).unwrap_or(0);
                return Err(Error::Format {
                    path: Default::default(),
                    message: format!("line {line}: expected `term_id,group_id`"),
                });
            }
        }
    }
    if mapping.pairs.is_empty() {
        warn!("ontology mapping is empty; every AE is isolated");
        mapping
            .warnings
            .push("ontology mapping is empty; every AE is isolated".to_string());
    }
    Ok(mapping)
}

/// Reads one AE term per line; blank lines and `#` comments ignored.
pub fn parse_term_list(path: &Path) -> Result<Vec<String>> {
    let text = read_utf8(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// Writes records in the reports-file layout understood by `parse_reports`.
pub fn write_reports<W: std::io::Write>(
    out: W,
    records: &[ReportRecord],
    schema: &ReportSchema,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(schema.delimiter as u8)
        .from_writer(out);
    let io_err = |e: csv::Error| Error::Format {
        path: Default::default(),
        message: e.to_string(),
    };
    let mut header = vec![schema.id_column.clone(), schema.vaccine_column.clone()];
    header.extend(schema.covariates.iter().map(|c| c.column.clone()));
    header.push(schema.ae_column.clone());
    w.write_record(&header).map_err(io_err)?;
    let sep = schema.list_delimiter.to_string();
    for r in records {
        let mut row = vec![r.report_id.clone(), r.vaccine_codes.join(&sep)];
        for c in &r.covariates {
            row.push(match c {
                CovariateValue::Level(l) => l.clone(),
                CovariateValue::Numeric(v) => format!("{v}"),
            });
        }
        row.push(r.ae_terms.iter().cloned().collect::<Vec<_>>().join(&sep));
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io("<writer>", e))?;
    Ok(())
}
