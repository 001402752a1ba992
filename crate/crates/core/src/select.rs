//! DIC and the ε grid search.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{deviance_at, run_chains, DrawStore, Hyperparams, Schedule};
use crate::error::{Error, Result};
use crate::ingest::StratifiedCells;
use crate::ontology::{correlation_from_precision, Epsilon, OntologyGraph};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dic {
    pub dic: f64,
    pub dbar: f64,
    pub pd: f64,
}

/// Posterior means of α (`j * n_coef + l`) and of the composed logOR.
pub fn posterior_means(draws: &DrawStore) -> (Vec<f64>, Vec<f64>) {
    let (j_n, p) = (draws.n_aes(), draws.n_coef());
    let mut alpha = vec![0.0; j_n * p];
    let mut beta = vec![0.0; j_n];
    let n = draws.total_draws() as f64;
    for (c, t) in draws.iter_draws() {
        for (a, x) in alpha.iter_mut().zip(&c.alpha[t * j_n * p..(t + 1) * j_n * p]) {
            *a += x;
        }
        for (b, x) in beta.iter_mut().zip(c.beta_row(t)) {
            *b += x;
        }
    }
    alpha.iter_mut().for_each(|a| *a /= n);
    beta.iter_mut().for_each(|b| *b /= n);
    (alpha, beta)
}

/// DIC with the posterior-mean linear predictor as plug-in. ψ is linear in
/// (α, β), so the mean of ψ draws equals ψ at the mean parameters.
pub fn dic(draws: &DrawStore, cells: &StratifiedCells) -> Result<Dic> {
    let n = draws.total_draws();
    if n == 0 {
        return Err(Error::InvalidArgument("DIC needs at least one stored draw".into()));
    }
    let dbar = draws
        .chains
        .iter()
        .flat_map(|c| c.deviance.iter())
        .sum::<f64>()
        / n as f64;
    let (alpha, beta) = posterior_means(draws);
    let dhat = deviance_at(cells, &alpha, &beta);
    let pd = dbar - dhat;
    if pd < 0.0 {
        log::warn!("negative effective number of parameters (p_D = {pd:.3}) at epsilon {}", draws.epsilon);
    }
    Ok(Dic {
        dic: dbar + pd,
        dbar,
        pd,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub epsilon: Epsilon,
    pub dic: Option<Dic>,
    pub error: Option<String>,
    pub chosen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonGrid {
    /// Ascending in ε, ∞ last.
    pub entries: Vec<GridEntry>,
    pub chosen: Epsilon,
}

impl EpsilonGrid {
    pub fn chosen_entry(&self) -> &GridEntry {
        self.entries.iter().find(|e| e.chosen).expect("one chosen entry")
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Format {
            path: "grid.csv".into(),
            message: e.to_string(),
        };
        w.write_record(["epsilon", "dbar", "pd", "dic", "chosen", "status"]).map_err(err)?;
        for e in &self.entries {
            let (dbar, pd, dic) = match e.dic {
                Some(d) => (format!("{:.6}", d.dbar), format!("{:.6}", d.pd), format!("{:.6}", d.dic)),
                None => (String::new(), String::new(), String::new()),
            };
            let status = e.error.as_deref().map_or("ok".to_string(), |m| format!("failed: {m}"));
            w.write_record([
                e.epsilon.to_string(),
                dbar,
                pd,
                dic,
                e.chosen.to_string(),
                status,
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io("grid.csv", e))?;
        Ok(())
    }
}

fn sort_key(e: Epsilon) -> f64 {
    e.value()
}

/// Whether `a` beats `b`: smaller DIC, exact ties to the larger ε.
fn better(a: (Epsilon, f64), b: (Epsilon, f64)) -> bool {
    a.1 < b.1 || (a.1 == b.1 && sort_key(a.0) > sort_key(b.0))
}

/// Fits every ε (in parallel) and keeps the draws of the minimum-DIC fit.
pub fn grid_search(
    cells: &StratifiedCells,
    graph: &OntologyGraph,
    hyper: &Hyperparams,
    grid: &[Epsilon],
    schedule: &Schedule,
    seeds: &[u64],
    progress_every: Option<usize>,
) -> Result<(EpsilonGrid, DrawStore)> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("epsilon grid is empty".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(|a, b| sort_key(*a).total_cmp(&sort_key(*b)));
    grid.dedup();

    let fit = |eps: Epsilon| -> Result<(Dic, DrawStore)> {
        let corr = correlation_from_precision(graph, eps)?;
        let store = run_chains(cells, &corr, hyper, schedule, seeds, progress_every)?;
        let d = dic(&store, cells)?;
        Ok((d, store))
    };

    type Best = Option<(Epsilon, f64, DrawStore)>;
    let (mut entries, best): (Vec<GridEntry>, Best) = grid
        .par_iter()
        .map(|&eps| match fit(eps) {
            Ok((d, store)) => (
                vec![GridEntry {
                    epsilon: eps,
                    dic: Some(d),
                    error: None,
                    chosen: false,
                }],
                Some((eps, d.dic, store)),
            ),
            Err(e) => {
                log::warn!("epsilon {eps} failed: {e}");
                (
                    vec![GridEntry {
                        epsilon: eps,
                        dic: None,
                        error: Some(e.to_string()),
                        chosen: false,
                    }],
                    None,
                )
            }
        })
        .reduce(
            || (Vec::new(), None),
            |(mut ea, ba), (eb, bb)| {
                ea.extend(eb);
                let best = match (ba, bb) {
                    (Some(a), Some(b)) => {
                        if better((b.0, b.1), (a.0, a.1)) {
                            Some(b)
                        } else {
                            Some(a)
                        }
                    }
                    (a, b) => a.or(b),
                };
                (ea, best)
            },
        );
    entries.sort_by(|a, b| sort_key(a.epsilon).total_cmp(&sort_key(b.epsilon)));
    let Some((chosen, _, store)) = best else {
        let msgs: Vec<String> = entries
            .iter()
            .map(|e| format!("{}: {}", e.epsilon, e.error.as_deref().unwrap_or("?")))
            .collect();
        return Err(Error::AllGridPointsFailed(msgs.join("; ")));
    };
    for e in &mut entries {
        e.chosen = e.epsilon == chosen;
    }
    Ok((EpsilonGrid { entries, chosen }, store))
}
