//! Synthetic data for the two simulation studies and their scoring metrics.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{run_chains, Hyperparams, Schedule};
use crate::error::{Error, Result};
use crate::ingest::{
    bin_label, design_row, Arm, CovariateCoding, CovariateColumn, CovariateKind, CovariateValue, ReportRecord,
    ReportSchema, StratifiedCells, Stratum,
};
use crate::ontology::{correlation_from_precision, Epsilon, OntologyGraph};
use crate::posterior::{convergence, fdr_select, summarize};
use crate::select::grid_search;

pub const TARGET_CODE: &str = "TARGET";
pub const CONTROL_CODE: &str = "CONTROL";

/// One simulated report: arm, covariate levels and AE indices.
#[derive(Clone, Debug, PartialEq)]
pub struct SimReport {
    pub arm: Arm,
    pub levels: Vec<usize>,
    pub aes: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct SimData {
    pub cells: StratifiedCells,
    pub graph: OntologyGraph,
    /// True composed logORs.
    pub truth: Vec<f64>,
    /// True α, `j * n_coef + l`.
    pub alpha: Vec<f64>,
    pub reports: Vec<SimReport>,
    /// Age values per report when an age covariate is present.
    ages: Vec<f64>,
}

pub fn ae_term(j: usize) -> String {
    format!("AE{:03}", j + 1)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Draws per-report outcomes and aggregates them into strata.
fn simulate_reports<R: Rng>(
    rng: &mut R,
    n_reports: usize,
    codings: &[CovariateCoding],
    level_probs: &[Vec<f64>],
    alpha: &[f64],
    beta: &[f64],
) -> (Vec<SimReport>, StratifiedCells) {
    let j_n = beta.len();
    let p = 1 + codings.iter().map(CovariateCoding::width).sum::<usize>();
    let mut reports = Vec::with_capacity(n_reports);
    let mut cells: BTreeMap<(Vec<usize>, Arm), (u32, Vec<u32>)> = BTreeMap::new();
    let mut prob_cache: BTreeMap<(Vec<usize>, Arm), Vec<f64>> = BTreeMap::new();
    for i in 0..n_reports {
        let arm = if i < n_reports / 2 { Arm::Control } else { Arm::Target };
        let levels: Vec<usize> = level_probs.iter().map(|probs| categorical(rng, probs)).collect();
        let key = (levels.clone(), arm);
        let probs = prob_cache.entry(key.clone()).or_insert_with(|| {
            let x = design_row(codings, &levels);
            let v = arm.indicator() as f64;
            (0..j_n)
                .map(|j| {
                    let eta: f64 = alpha[j * p..(j + 1) * p].iter().zip(&x).map(|(a, b)| a * b).sum();
                    logistic(eta + v * beta[j])
                })
                .collect()
        });
        let entry = cells.entry(key).or_insert_with(|| (0, vec![0; j_n]));
        entry.0 += 1;
        let mut aes = Vec::new();
        for (j, &pr) in probs.iter().enumerate() {
            if rng.random::<f64>() < pr {
                aes.push(j as u32);
                entry.1[j] += 1;
            }
        }
        reports.push(SimReport { arm, levels, aes });
    }
    let mut strata = Vec::with_capacity(cells.len());
    let mut counts = Vec::with_capacity(cells.len() * j_n);
    for ((levels, arm), (trials, y)) in cells {
        strata.push(Stratum {
            design: design_row(codings, &levels),
            levels,
            arm,
            trials,
        });
        counts.extend(y);
    }
    let vocab = (0..j_n).map(ae_term).collect();
    let cells = StratifiedCells::from_parts(codings.to_vec(), strata, counts, vocab).expect("consistent simulated cells");
    (reports, cells)
}

fn categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sim1Design {
    pub n_reports: usize,
    pub group_sizes: Vec<usize>,
    pub group_effects: Vec<f64>,
    pub n_isolated: usize,
    /// Per-AE baseline log-odds drawn uniformly from this range.
    pub intercept_range: (f64, f64),
    /// Seed for the fixed parts of the design (intercepts).
    pub design_seed: u64,
}

impl Default for Sim1Design {
    fn default() -> Self {
        Self {
            n_reports: 5000,
            group_sizes: vec![30, 15],
            group_effects: vec![1.0, -1.0],
            n_isolated: 25,
            intercept_range: (-4.5, -3.0),
            design_seed: 2020,
        }
    }
}

impl Sim1Design {
    pub fn n_aes(&self) -> usize {
        self.group_sizes.iter().sum::<usize>() + self.n_isolated
    }

    pub fn graph(&self) -> OntologyGraph {
        let mut groups = BTreeMap::new();
        let mut start = 0;
        for (g, &size) in self.group_sizes.iter().enumerate() {
            groups.insert(format!("group{}", g + 1), (start..start + size).collect());
            start += size;
        }
        OntologyGraph::from_groups((0..self.n_aes()).map(ae_term).collect(), groups)
    }

    pub fn truth(&self) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.n_aes());
        for (&size, &b) in self.group_sizes.iter().zip(&self.group_effects) {
            t.extend(std::iter::repeat_n(b, size));
        }
        t.extend(std::iter::repeat_n(0.0, self.n_isolated));
        t
    }

    /// Indices of grouped AEs.
    pub fn grouped(&self) -> Vec<usize> {
        (0..self.group_sizes.iter().sum()).collect()
    }

    fn intercepts(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.design_seed);
        let (lo, hi) = self.intercept_range;
        (0..self.n_aes()).map(|_| rng.random_range(lo..=hi)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_sizes.len() != self.group_effects.len() {
            return Err(Error::InvalidArgument("group_sizes and group_effects differ in length".into()));
        }
        if self.n_aes() == 0 || self.n_reports < 2 {
            return Err(Error::InvalidArgument("simulation needs AEs and at least 2 reports".into()));
        }
        Ok(())
    }
}

/// Grouped AEs with fixed logORs, intercept-only model, balanced arms.
pub fn generate_sim1(design: &Sim1Design, seed: u64) -> Result<SimData> {
    design.validate()?;
    let truth = design.truth();
    let alpha = design.intercepts();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (reports, cells) = simulate_reports(&mut rng, design.n_reports, &[], &[], &alpha, &truth);
    Ok(SimData {
        cells,
        graph: design.graph(),
        truth,
        alpha,
        reports,
        ages: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sim2Design {
    pub n_reports: usize,
    /// Probability that an AE carries a nonzero logOR.
    pub signal_frac: f64,
    pub eps_true: Epsilon,
    /// Prior variance multiplier `v` of the true logORs.
    pub beta_var: f64,
    pub female_prob: f64,
    /// Probabilities of the age bins `<30, [30,50), [50,65), >=65`.
    pub age_probs: Vec<f64>,
    pub intercept_range: (f64, f64),
    /// Mean male-vs-female effect.
    pub sex_effect: f64,
    /// Mean age effects relative to `<30`.
    pub age_effects: Vec<f64>,
    /// SD of per-AE covariate effects around their means.
    pub covariate_sd: f64,
}

impl Default for Sim2Design {
    fn default() -> Self {
        Self {
            n_reports: 5000,
            signal_frac: 0.5,
            eps_true: Epsilon::Finite(0.1),
            beta_var: 0.1,
            female_prob: 0.7,
            age_probs: vec![0.126, 0.346, 0.271, 0.258],
            intercept_range: (-4.0, -2.5),
            sex_effect: -0.2,
            age_effects: vec![0.1, 0.2, 0.3],
            covariate_sd: 0.2,
        }
    }
}

pub const AGE_BREAKS: [f64; 3] = [30.0, 50.0, 65.0];
const AGE_RANGES: [(f64, f64); 4] = [(18.0, 30.0), (30.0, 50.0), (50.0, 65.0), (65.0, 90.0)];

fn sim2_codings() -> Vec<CovariateCoding> {
    vec![
        CovariateCoding {
            name: "sex".into(),
            levels: vec!["F".into(), "M".into()],
            reference: 0,
        },
        CovariateCoding {
            name: "age".into(),
            levels: (0..4).map(|i| bin_label(i, &AGE_BREAKS)).collect(),
            reference: 0,
        },
    ]
}

/// Correlated spike-and-slab logORs over a supplied graph, sex and age covariates.
pub fn generate_sim2(graph: &OntologyGraph, design: &Sim2Design, seed: u64) -> Result<SimData> {
    if !(0.0..=1.0).contains(&design.signal_frac) {
        return Err(Error::InvalidArgument("signal_frac must lie in [0,1]".into()));
    }
    if !(design.beta_var > 0.0) {
        return Err(Error::InvalidArgument("beta_var must be positive".into()));
    }
    if design.age_probs.len() != 4 || design.age_effects.len() != 3 {
        return Err(Error::InvalidArgument("age design needs 4 bin probabilities and 3 effects".into()));
    }
    let eps = Epsilon::new(design.eps_true.value())?;
    let corr = correlation_from_precision(graph, eps)?;
    let j_n = graph.n_vertices();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let z: Vec<f64> = (0..j_n).map(|_| rng.sample(StandardNormal)).collect();
    let beta_star = corr.sample_prior(&z);
    let scale = design.beta_var.sqrt();
    let truth: Vec<f64> = beta_star
        .iter()
        .map(|b| if rng.random::<f64>() < design.signal_frac { scale * b } else { 0.0 })
        .collect();

    let codings = sim2_codings();
    let p = 5;
    let mut alpha = Vec::with_capacity(j_n * p);
    let (lo, hi) = design.intercept_range;
    for _ in 0..j_n {
        alpha.push(rng.random_range(lo..=hi));
        let mut jitter = |m: f64| m + design.covariate_sd * rng.sample::<f64, _>(StandardNormal);
        alpha.push(jitter(design.sex_effect));
        for &e in &design.age_effects {
            alpha.push(jitter(e));
        }
    }
    let level_probs = vec![vec![design.female_prob, 1.0 - design.female_prob], design.age_probs.clone()];
    let (reports, mut cells) = simulate_reports(&mut rng, design.n_reports, &codings, &level_probs, &alpha, &truth);
    cells.ae_vocabulary = graph.terms.clone();
    let ages = reports
        .iter()
        .map(|r| {
            let (a, b) = AGE_RANGES[r.levels[1]];
            (a + (b - a) * rng.random::<f64>()).floor()
        })
        .collect();
    Ok(SimData {
        cells,
        graph: graph.clone(),
        truth,
        alpha,
        reports,
        ages,
    })
}

/// Random grouping: each AE joins one primary group, and a second one with
/// probability `overlap`; `n_isolated` trailing AEs stay ungrouped.
pub fn random_group_graph(n_aes: usize, n_groups: usize, n_isolated: usize, overlap: f64, seed: u64) -> OntologyGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grouped = n_aes.saturating_sub(n_isolated);
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let name = |g: usize| format!("G{:02}", g + 1);
    for j in 0..grouped {
        let g = if j < n_groups { j } else { rng.random_range(0..n_groups.max(1)) };
        groups.entry(name(g)).or_default().push(j);
        if n_groups > 1 && rng.random::<f64>() < overlap {
            let mut h = rng.random_range(0..n_groups);
            while h == g {
                h = rng.random_range(0..n_groups);
            }
            groups.entry(name(h)).or_default().push(j);
        }
    }
    for members in groups.values_mut() {
        members.sort_unstable();
        members.dedup();
    }
    OntologyGraph::from_groups((0..n_aes).map(ae_term).collect(), groups)
}

impl SimData {
    /// Reports file schema for `to_records`.
    pub fn schema(&self) -> ReportSchema {
        let covariates = if self.ages.is_empty() {
            Vec::new()
        } else {
            vec![
                CovariateColumn {
                    column: "sex".into(),
                    kind: CovariateKind::Categorical,
                    reference: None,
                },
                CovariateColumn {
                    column: "age".into(),
                    kind: CovariateKind::Binned,
                    reference: None,
                },
            ]
        };
        ReportSchema {
            id_column: "report_id".into(),
            vaccine_column: "vaccine".into(),
            ae_column: "ae_terms".into(),
            covariates,
            target_codes: vec![TARGET_CODE.into()],
            control_codes: vec![CONTROL_CODE.into()],
            delimiter: ',',
            list_delimiter: ';',
        }
    }

    /// Report records in the layout ingest consumes.
    pub fn to_records(&self) -> Vec<ReportRecord> {
        let codings = &self.cells.covariates;
        self.reports
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let covariates = if self.ages.is_empty() {
                    Vec::new()
                } else {
                    vec![
                        CovariateValue::Level(codings[0].levels[r.levels[0]].clone()),
                        CovariateValue::Numeric(self.ages[i]),
                    ]
                };
                ReportRecord {
                    report_id: format!("R{:06}", i + 1),
                    arm: r.arm,
                    vaccine_codes: vec![if r.arm == Arm::Target { TARGET_CODE } else { CONTROL_CODE }.into()],
                    covariates,
                    ae_terms: r.aes.iter().map(|&j| self.cells.ae_vocabulary[j as usize].clone()).collect::<BTreeSet<_>>(),
                }
            })
            .collect()
    }

    /// Ontology pairs (term, group) matching the graph.
    pub fn ontology_pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (g, members) in &self.graph.groups {
            for &j in members {
                out.push((self.graph.terms[j].clone(), g.clone()));
            }
        }
        out.sort();
        out
    }
}

pub fn rsse(truth: &[f64], estimate: &[f64]) -> f64 {
    squared_errors(truth, estimate).iter().sum::<f64>().sqrt()
}

pub fn squared_errors(truth: &[f64], estimate: &[f64]) -> Vec<f64> {
    assert_eq!(truth.len(), estimate.len(), "dimension mismatch");
    truth.iter().zip(estimate).map(|(t, e)| (t - e).powi(2)).collect()
}

/// Mann-Whitney AUC with ties counted one half; `None` when one class is empty.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "dimension mismatch");
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut k = i;
        while k + 1 < idx.len() && scores[idx[k + 1]] == scores[idx[i]] {
            k += 1;
        }
        let avg = (i + k) as f64 / 2.0 + 1.0;
        for &m in &idx[i..=k] {
            ranks[m] = avg;
        }
        i = k + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Per-AE ratio of mean squared errors over replicates, `a / b`.
pub fn mmse_ratio(se_a: &[Vec<f64>], se_b: &[Vec<f64>]) -> Vec<f64> {
    let j_n = se_a.first().map_or(0, Vec::len);
    let mean = |se: &[Vec<f64>], j: usize| se.iter().map(|r| r[j]).sum::<f64>() / se.len() as f64;
    (0..j_n).map(|j| mean(se_a, j) / mean(se_b, j)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub hyper: Hyperparams,
    pub schedule: Schedule,
    pub chains: usize,
    pub grid: Vec<Epsilon>,
    pub fdr_alpha: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            hyper: Hyperparams::default(),
            schedule: Schedule {
                iters: 20_000,
                burn_in: 10_000,
                thin: 2,
            },
            chains: 3,
            grid: Epsilon::default_grid(),
            fdr_alpha: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model: String,
    pub epsilon: Epsilon,
    pub beta_mean: Vec<f64>,
    pub prob_positive: Vec<f64>,
    pub selection_prob: Vec<f64>,
    pub rsse: f64,
    pub auc: Option<f64>,
    pub squared_errors: Vec<f64>,
    pub n_selected: usize,
    /// False selections over selections (0 when nothing is selected).
    pub realized_fdr: f64,
    pub max_r_hat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateScore {
    pub replicate: usize,
    pub seed: u64,
    pub bgrass: ModelScore,
    pub bss: ModelScore,
}

fn score(model: &str, sim: &SimData, store: &crate::engine::DrawStore, settings: &FitSettings) -> Result<ModelScore> {
    let terms = &sim.cells.ae_vocabulary;
    let summary = summarize(store, terms)?;
    let beta_mean: Vec<f64> = summary.iter().map(|s| s.mean).collect();
    let prob_positive: Vec<f64> = summary.iter().map(|s| s.prob_positive).collect();
    let selection_prob: Vec<f64> = summary.iter().map(|s| s.selection_prob).collect();
    let labels: Vec<bool> = sim.truth.iter().map(|&b| b > 0.0).collect();
    let sel = fdr_select(&selection_prob, settings.fdr_alpha, None);
    let false_sel = sel.selected.iter().filter(|&&j| sim.truth[j] == 0.0).count();
    let max_r_hat = if store.chains.len() >= 2 {
        convergence(store, terms)?.max_r_hat
    } else {
        f64::NAN
    };
    Ok(ModelScore {
        model: model.into(),
        epsilon: store.epsilon,
        rsse: rsse(&sim.truth, &beta_mean),
        auc: auc(&prob_positive, &labels),
        squared_errors: squared_errors(&sim.truth, &beta_mean),
        n_selected: sel.selected.len(),
        realized_fdr: if sel.selected.is_empty() {
            0.0
        } else {
            false_sel as f64 / sel.selected.len() as f64
        },
        beta_mean,
        prob_positive,
        selection_prob,
        max_r_hat,
    })
}

/// Fits BGrass (DIC-selected ε) and Bss (ε = ∞) to one simulated dataset.
pub fn fit_and_score(sim: &SimData, settings: &FitSettings, seed: u64) -> Result<(ModelScore, ModelScore)> {
    let seeds: Vec<u64> = (0..settings.chains as u64).map(|c| seed.wrapping_mul(1000).wrapping_add(c + 1)).collect();
    let (_, store) = grid_search(
        &sim.cells,
        &sim.graph,
        &settings.hyper,
        &settings.grid,
        &settings.schedule,
        &seeds,
        None,
    )?;
    let bgrass = score("BGrass", sim, &store, settings)?;
    drop(store);
    let corr = correlation_from_precision(&sim.graph, Epsilon::Infinite)?;
    let store = run_chains(&sim.cells, &corr, &settings.hyper, &settings.schedule, &seeds, None)?;
    let bss = score("Bss", sim, &store, settings)?;
    Ok((bgrass, bss))
}

/// Generates and fits replicates in parallel, seeds `base_seed + r`.
pub fn run_replicates<F>(n: usize, base_seed: u64, settings: &FitSettings, generate: F) -> Result<Vec<ReplicateScore>>
where
    F: Fn(u64) -> Result<SimData> + Sync,
{
    (0..n)
        .into_par_iter()
        .map(|r| {
            let seed = base_seed + r as u64;
            let sim = generate(seed)?;
            let (bgrass, bss) = fit_and_score(&sim, settings, seed)?;
            log::info!(
                "replicate {r}: BGrass eps {} rsse {:.3}, Bss rsse {:.3}",
                bgrass.epsilon,
                bgrass.rsse,
                bss.rsse
            );
            Ok(ReplicateScore {
                replicate: r,
                seed,
                bgrass,
                bss,
            })
        })
        .collect()
}
