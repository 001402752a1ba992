//! AE relation graph, its normalized Laplacian, and the correlation matrix
//! obtained by standardizing `(L + εI)⁻¹`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::ingest::OntologyMapping;
use crate::linalg::{dense_cholesky, SparseCholesky, SymmetricSparse};

/// Undirected graph over the modeled AEs; `j ~ k` iff they share a group.
#[derive(Clone, Debug, PartialEq)]
pub struct OntologyGraph {
    pub terms: Vec<String>,
    /// Sorted neighbor lists.
    pub neighbors: Vec<Vec<usize>>,
    /// Group id to sorted member AE indices (members in the vocabulary only).
    pub groups: BTreeMap<String, Vec<usize>>,
}

impl OntologyGraph {
    pub fn n_vertices(&self) -> usize {
        self.neighbors.len()
    }

    pub fn degree(&self, j: usize) -> usize {
        self.neighbors[j].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn n_isolated(&self) -> usize {
        self.neighbors.iter().filter(|n| n.is_empty()).count()
    }

    pub fn has_edge(&self, j: usize, k: usize) -> bool {
        self.neighbors[j].binary_search(&k).is_ok()
    }

    /// Graph from explicit group memberships over `n` vertices.
    pub fn from_groups(terms: Vec<String>, groups: BTreeMap<String, Vec<usize>>) -> Self {
        let n = terms.len();
        let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        let mut clean = BTreeMap::new();
        for (g, members) in groups {
            let m: BTreeSet<usize> = members.into_iter().filter(|&i| i < n).collect();
            for &a in &m {
                for &b in &m {
                    if a != b {
                        sets[a].insert(b);
                    }
                }
            }
            if !m.is_empty() {
                clean.insert(g, m.into_iter().collect());
            }
        }
        Self {
            terms,
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
            groups: clean,
        }
    }
}

/// Restricts the mapping to the vocabulary and links AEs sharing a group.
/// Returns the graph and a warning when no modeled AE is mapped.
pub fn build_graph(mapping: &OntologyMapping, ae_vocabulary: &[String]) -> (OntologyGraph, Option<String>) {
    let index: HashMap<&str, usize> = ae_vocabulary
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i))
        .collect();
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (term, group) in &mapping.pairs {
        if let Some(&i) = index.get(term.as_str()) {
            groups.entry(group.clone()).or_default().push(i);
        }
    }
    let warning = groups
        .is_empty()
        .then(|| "ontology covers none of the modeled AEs; graph is edgeless".to_string());
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    (OntologyGraph::from_groups(ae_vocabulary.to_vec(), groups), warning)
}

/// Normalized graph Laplacian: unit diagonal, `-1/sqrt(d_j d_k)` on edges.
pub fn laplacian(graph: &OntologyGraph) -> DMatrix<f64> {
    let n = graph.n_vertices();
    let mut l = DMatrix::identity(n, n);
    let d = graph.degrees();
    for j in 0..n {
        for &k in &graph.neighbors[j] {
            l[(j, k)] = -1.0 / ((d[j] * d[k]) as f64).sqrt();
        }
    }
    l
}

/// Strength of information borrowing; `Infinite` means independent logORs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Epsilon {
    Finite(f64),
    Infinite,
}

impl Epsilon {
    pub fn new(v: f64) -> Result<Self> {
        if v == f64::INFINITY {
            Ok(Epsilon::Infinite)
        } else if v > 0.0 && v.is_finite() {
            Ok(Epsilon::Finite(v))
        } else {
            Err(Error::InvalidEpsilon(v))
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Epsilon::Finite(v) => v,
            Epsilon::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Epsilon::Infinite)
    }

    /// Default tuning grid.
    pub fn default_grid() -> Vec<Epsilon> {
        [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0]
            .into_iter()
            .map(Epsilon::Finite)
            .chain(std::iter::once(Epsilon::Infinite))
            .collect()
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Epsilon::Finite(v) => write!(f, "{v}"),
            Epsilon::Infinite => write!(f, "inf"),
        }
    }
}

impl FromStr for Epsilon {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "∞" => Ok(Epsilon::Infinite),
            other => {
                let v: f64 = other
                    .parse()
                    .map_err(|_| Error::Config(format!("cannot parse epsilon `{s}`")))?;
                Epsilon::new(v)
            }
        }
    }
}

impl Serialize for Epsilon {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Epsilon::Finite(v) => s.serialize_f64(*v),
            Epsilon::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Epsilon {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Epsilon::new(v).map_err(serde::de::Error::custom),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Correlation matrix `Ω_ε` with the sparse precision `Ω_ε⁻¹ = D^{1/2}(L+εI)D^{1/2}`.
#[derive(Clone, Debug)]
pub struct CorrelationStructure {
    pub epsilon: Epsilon,
    pub omega: DMatrix<f64>,
    /// `diag((L + εI)⁻¹)`; all ones when ε is infinite.
    pub scale: DVector<f64>,
    /// Inverse correlation in the Laplacian's sparsity pattern.
    pub precision: SymmetricSparse,
    /// Factor of `precision`.
    pub precision_factor: SparseCholesky,
}

impl CorrelationStructure {
    pub fn dim(&self) -> usize {
        self.omega.nrows()
    }

    /// Dense inverse correlation.
    pub fn precision_dense(&self) -> DMatrix<f64> {
        self.precision.to_dense()
    }

    /// `L⁻ᵀ z`: a `N(0, Ω_ε)` draw when `z` is standard normal.
    pub fn sample_prior(&self, z: &[f64]) -> Vec<f64> {
        if self.epsilon.is_infinite() {
            z.to_vec()
        } else {
            self.precision_factor.sample_zero_mean(z)
        }
    }

    /// Writes `Ω_ε` as delimited text with AE labels.
    pub fn write_omega<W: Write>(&self, out: W, labels: &[String]) -> Result<()> {
        write_matrix(out, &self.omega, labels)
    }
}

pub fn write_matrix<W: Write>(mut out: W, m: &DMatrix<f64>, labels: &[String]) -> Result<()> {
    let err = |e| Error::io("<matrix dump>", e);
    write!(out, "ae").map_err(err)?;
    for l in labels {
        write!(out, ",{l}").map_err(err)?;
    }
    writeln!(out).map_err(err)?;
    for i in 0..m.nrows() {
        write!(out, "{}", labels.get(i).map(String::as_str).unwrap_or("")).map_err(err)?;
        for k in 0..m.ncols() {
            write!(out, ",{}", m[(i, k)]).map_err(err)?;
        }
        writeln!(out).map_err(err)?;
    }
    Ok(())
}

/// Builds `Ω_ε` from the graph. `P = L + εI`, `M = P⁻¹`, `D = diag(M)`,
/// `Ω = D^{-1/2} M D^{-1/2}`; the inverse is kept as `D^{1/2} P D^{1/2}`.
pub fn correlation_from_precision(graph: &OntologyGraph, epsilon: Epsilon) -> Result<CorrelationStructure> {
    let n = graph.n_vertices();
    let eps = match epsilon {
        Epsilon::Infinite => {
            let precision = SymmetricSparse::identity(n);
            let mut precision_factor = SparseCholesky::analyze(&precision);
            precision_factor.factor(&precision, None)?;
            return Ok(CorrelationStructure {
                epsilon,
                omega: DMatrix::identity(n, n),
                scale: DVector::from_element(n, 1.0),
                precision,
                precision_factor,
            });
        }
        Epsilon::Finite(v) if v > 0.0 && v.is_finite() => v,
        Epsilon::Finite(v) => return Err(Error::InvalidEpsilon(v)),
    };

    let mut p = laplacian(graph);
    for i in 0..n {
        p[(i, i)] += eps;
    }
    let chol = dense_cholesky(&p, "L + εI")?;
    let m = chol.inverse();
    let scale = m.diagonal();
    let inv_sqrt = scale.map(|d| 1.0 / d.sqrt());
    let mut omega = DMatrix::zeros(n, n);
    for i in 0..n {
        for k in 0..n {
            omega[(i, k)] = if i == k {
                1.0
            } else {
                m[(i, k)] * inv_sqrt[i] * inv_sqrt[k]
            };
        }
    }
    // symmetrize against rounding
    for i in 0..n {
        for k in (i + 1)..n {
            let v = 0.5 * (omega[(i, k)] + omega[(k, i)]);
            omega[(i, k)] = v;
            omega[(k, i)] = v;
        }
    }

    let sqrt_d = scale.map(f64::sqrt);
    let diag = (0..n).map(|i| scale[i] * (1.0 + eps)).collect();
    let rows = (0..n)
        .map(|i| {
            graph.neighbors[i]
                .iter()
                .map(|&k| (k, sqrt_d[i] * sqrt_d[k] * p[(i, k)]))
                .collect()
        })
        .collect();
    let precision = SymmetricSparse { diag, rows };
    let mut precision_factor = SparseCholesky::analyze(&precision);
    precision_factor.factor(&precision, None)?;
    Ok(CorrelationStructure {
        epsilon,
        omega,
        scale,
        precision,
        precision_factor,
    })
}
