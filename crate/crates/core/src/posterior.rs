//! Posterior summaries, Bayesian FDR selection, negative-control
//! adjustment, group enrichment and Gelman-Rubin diagnostics.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::engine::{ChainDraws, DrawStore};
use crate::error::{Error, Result};

/// Linear-interpolation quantile of sorted data (R type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty sample");
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeSummary {
    pub term: String,
    pub mean: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    /// Posterior mean of δ_j.
    pub selection_prob: f64,
    /// Fraction of draws with β_j > 0.
    pub prob_positive: f64,
    pub ncprob: Option<f64>,
    pub fdr_signal: bool,
    pub nc_signal: bool,
}

/// Pooled per-AE summaries with 95% equal-tailed intervals.
pub fn summarize(draws: &DrawStore, terms: &[String]) -> Result<Vec<AeSummary>> {
    let n = draws.total_draws();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "posterior summaries need at least 2 draws, have {n}"
        )));
    }
    let j_n = draws.n_aes();
    if terms.len() != j_n {
        return Err(Error::InvalidArgument("term list does not match draws".into()));
    }
    let mut out = Vec::with_capacity(j_n);
    let mut buf = Vec::with_capacity(n);
    for (j, term) in terms.iter().enumerate() {
        buf.clear();
        let mut sel = 0usize;
        for (c, t) in draws.iter_draws() {
            buf.push(c.beta_at(t, j));
            sel += c.delta_at(t, j) as usize;
        }
        let mean = buf.iter().sum::<f64>() / n as f64;
        let pos = buf.iter().filter(|&&b| b > 0.0).count();
        buf.sort_by(f64::total_cmp);
        out.push(AeSummary {
            term: term.clone(),
            mean,
            median: quantile_sorted(&buf, 0.5),
            lower: quantile_sorted(&buf, 0.025),
            upper: quantile_sorted(&buf, 0.975),
            selection_prob: sel as f64 / n as f64,
            prob_positive: pos as f64 / n as f64,
            ncprob: None,
            fdr_signal: false,
            nc_signal: false,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrStat {
    pub r_hat: f64,
    pub degenerate: bool,
}

/// Split-chain potential scale reduction, `sqrt((W + B/n) / W)`.
pub fn gelman_rubin(chains: &[&[f64]]) -> Result<GrStat> {
    if chains.len() < 2 {
        return Err(Error::InvalidArgument("Gelman-Rubin needs at least 2 chains".into()));
    }
    let len = chains[0].len();
    if chains.iter().any(|c| c.len() != len) {
        return Err(Error::InvalidArgument("chains differ in length".into()));
    }
    let n = len / 2;
    if n < 2 {
        return Err(Error::InvalidArgument("chains too short to split".into()));
    }
    let mut halves: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        halves.push(&c[..n]);
        halves.push(&c[len - n..]);
    }
    let m = halves.len() as f64;
    let nf = n as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / nf).collect();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m;
    let grand = means.iter().sum::<f64>() / m;
    let b_over_n = means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m - 1.0);
    if !(w > 0.0) {
        return Ok(GrStat {
            r_hat: 1.0,
            degenerate: true,
        });
    }
    Ok(GrStat {
        r_hat: ((w + b_over_n) / w).sqrt(),
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    /// Parameter label and statistic.
    pub parameters: Vec<(String, GrStat)>,
    pub max_r_hat: f64,
    pub n_degenerate: usize,
}

impl Convergence {
    pub fn converged(&self, threshold: f64) -> bool {
        self.max_r_hat < threshold
    }
}

/// R̂ for every β_j, every α_jl and the deviance.
pub fn convergence(draws: &DrawStore, terms: &[String]) -> Result<Convergence> {
    let chains: &[ChainDraws] = &draws.chains;
    let mut parameters = Vec::new();
    let mut push = |label: String, traces: Vec<Vec<f64>>| -> Result<()> {
        let refs: Vec<&[f64]> = traces.iter().map(Vec::as_slice).collect();
        parameters.push((label, gelman_rubin(&refs)?));
        Ok(())
    };
    for (j, term) in terms.iter().enumerate() {
        push(format!("beta[{term}]"), chains.iter().map(|c| c.beta_trace(j)).collect())?;
        for l in 0..draws.n_coef() {
            push(format!("alpha[{term},{l}]"), chains.iter().map(|c| c.alpha_trace(j, l)).collect())?;
        }
    }
    push("deviance".into(), chains.iter().map(|c| c.deviance.clone()).collect())?;
    let max_r_hat = parameters.iter().map(|p| p.1.r_hat).fold(1.0, f64::max);
    let n_degenerate = parameters.iter().filter(|p| p.1.degenerate).count();
    Ok(Convergence {
        parameters,
        max_r_hat,
        n_degenerate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdrSelection {
    /// Selected indices, by descending probability.
    pub selected: Vec<usize>,
    /// Smallest probability admitted by the threshold rule.
    pub cutoff: Option<f64>,
    /// Size before the effect filter.
    pub m: usize,
}

/// Largest `m` with mean of `1 - p_(i)` over the top `m` at most `alpha`,
/// then optionally intersected with `effect[j] > threshold`.
pub fn fdr_select(probs: &[f64], alpha: f64, effect: Option<(&[f64], f64)>) -> FdrSelection {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut m = 0;
    let mut acc = 0.0;
    for (i, &j) in order.iter().enumerate() {
        acc += 1.0 - probs[j];
        if acc / (i + 1) as f64 <= alpha {
            m = i + 1;
        }
    }
    let cutoff = (m > 0).then(|| probs[order[m - 1]]);
    let selected = order[..m]
        .iter()
        .copied()
        .filter(|&j| effect.is_none_or(|(e, thr)| e[j] > thr))
        .collect();
    FdrSelection { selected, cutoff, m }
}

/// Maps negative-control terms to indices; unknown terms produce warnings.
pub fn resolve_negative_controls(vocab: &[String], terms: &[String]) -> Result<(Vec<usize>, Vec<String>)> {
    let mut idx = Vec::new();
    let mut warnings = Vec::new();
    for t in terms {
        match vocab.iter().position(|v| v == t) {
            Some(i) if !idx.contains(&i) => idx.push(i),
            Some(_) => {}
            None => warnings.push(format!("negative control `{t}` not in the AE vocabulary; dropped")),
        }
    }
    if idx.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 negative controls in the vocabulary, found {}",
            idx.len()
        )));
    }
    Ok((idx, warnings))
}

/// Fraction of draws where β_j exceeds the NC mean plus two NC SDs.
pub fn nc_adjust(draws: &DrawStore, nc: &[usize]) -> Result<Vec<f64>> {
    if nc.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 negative controls".into()));
    }
    let j_n = draws.n_aes();
    if let Some(&bad) = nc.iter().find(|&&j| j >= j_n) {
        return Err(Error::InvalidArgument(format!("negative control index {bad} out of range")));
    }
    let n = draws.total_draws();
    let mut hits = vec![0usize; j_n];
    let k = nc.len() as f64;
    for (c, t) in draws.iter_draws() {
        let row = c.beta_row(t);
        let mu = nc.iter().map(|&j| row[j]).sum::<f64>() / k;
        let sd = (nc.iter().map(|&j| (row[j] - mu).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
        let thr = mu + 2.0 * sd;
        for (h, &b) in hits.iter_mut().zip(row) {
            if b > thr {
                *h += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / n.max(1) as f64).collect())
}

/// Log odds ratio of the corrected 2×2 table of (signaled) × (in group).
pub fn gamma_g(signaled: &[bool], in_group: &[bool]) -> f64 {
    let (mut a, mut b, mut c, mut d) = (0.5f64, 0.5, 0.5, 0.5);
    for (&s, &g) in signaled.iter().zip(in_group) {
        match (s, g) {
            (true, true) => a += 1.0,
            (true, false) => b += 1.0,
            (false, true) => c += 1.0,
            (false, false) => d += 1.0,
        }
    }
    (a * d / (b * c)).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEnrichment {
    pub group: String,
    pub size: usize,
    pub e_g: f64,
    pub signal: bool,
}

/// `e_G = P(γ_G > log 2)` for groups with more than `min_group_size` members.
pub fn enrichment(
    draws: &DrawStore,
    groups: &BTreeMap<String, Vec<usize>>,
    min_group_size: usize,
) -> (Vec<GroupEnrichment>, Vec<String>) {
    let j_n = draws.n_aes();
    let n = draws.total_draws().max(1) as f64;
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    let mut signaled = vec![false; j_n];
    for (name, members) in groups {
        if members.len() <= min_group_size {
            continue;
        }
        let mut in_group = vec![false; j_n];
        for &m in members {
            in_group[m] = true;
        }
        if in_group.iter().all(|&g| g) {
            warnings.push(format!("group `{name}` spans the whole vocabulary; excluded from enrichment"));
            continue;
        }
        let mut hits = 0usize;
        for (c, t) in draws.iter_draws() {
            for (j, s) in signaled.iter_mut().enumerate() {
                *s = c.delta_at(t, j);
            }
            if gamma_g(&signaled, &in_group) > std::f64::consts::LN_2 {
                hits += 1;
            }
        }
        out.push(GroupEnrichment {
            group: name.clone(),
            size: members.len(),
            e_g: hits as f64 / n,
            signal: false,
        });
    }
    (out, warnings)
}

/// Flags groups by Bayesian FDR on their enrichment probabilities.
pub fn flag_groups(groups: &mut [GroupEnrichment], alpha: f64) {
    let probs: Vec<f64> = groups.iter().map(|g| g.e_g).collect();
    for j in fdr_select(&probs, alpha, None).selected {
        groups[j].signal = true;
    }
}

/// Applies FDR and NC flags to AE summaries.
pub fn flag_aes(summaries: &mut [AeSummary], fdr_alpha: f64, effect_threshold: Option<f64>, ncprob: Option<&[f64]>) {
    let probs: Vec<f64> = summaries.iter().map(|s| s.selection_prob).collect();
    let means: Vec<f64> = summaries.iter().map(|s| s.mean).collect();
    let sel = fdr_select(&probs, fdr_alpha, effect_threshold.map(|t| (means.as_slice(), t)));
    for &j in &sel.selected {
        summaries[j].fdr_signal = true;
    }
    if let Some(nc) = ncprob {
        for (s, &p) in summaries.iter_mut().zip(nc) {
            s.ncprob = Some(p);
        }
        let sel = fdr_select(nc, fdr_alpha, effect_threshold.map(|t| (means.as_slice(), t)));
        for &j in &sel.selected {
            summaries[j].nc_signal = true;
        }
    }
}

fn csv_err(name: &str) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Format {
        path: name.into(),
        message: e.to_string(),
    }
}

/// Writes `summary.csv`, with a `logOR [95% CI]` column in two decimals.
pub fn write_summary_csv<W: Write>(out: W, rows: &[AeSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = csv_err("summary.csv");
    w.write_record([
        "ae",
        "logor_ci",
        "mean",
        "median",
        "lower",
        "upper",
        "selection_prob",
        "prob_positive",
        "ncprob",
        "fdr_signal",
        "nc_signal",
    ])
    .map_err(&err)?;
    for r in rows {
        w.write_record([
            r.term.clone(),
            format!("{:.2} [{:.2},{:.2}]", r.mean, r.lower, r.upper),
            format!("{:.6}", r.mean),
            format!("{:.6}", r.median),
            format!("{:.6}", r.lower),
            format!("{:.6}", r.upper),
            format!("{:.6}", r.selection_prob),
            format!("{:.6}", r.prob_positive),
            r.ncprob.map_or(String::new(), |p| format!("{p:.6}")),
            (r.fdr_signal as u8).to_string(),
            (r.nc_signal as u8).to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io("summary.csv", e))?;
    Ok(())
}

pub fn write_enrichment_csv<W: Write>(out: W, rows: &[GroupEnrichment]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = csv_err("enrichment.csv");
    w.write_record(["group", "size", "e_g", "signal"]).map_err(&err)?;
    for r in rows {
        w.write_record([
            r.group.clone(),
            r.size.to_string(),
            format!("{:.6}", r.e_g),
            (r.signal as u8).to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io("enrichment.csv", e))?;
    Ok(())
}
