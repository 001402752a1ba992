//! `simulate`: replicate harness for the two simulation designs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use bgrass::ingest::{parse_ontology, write_reports};
use bgrass::ontology::{build_graph, OntologyGraph};
use bgrass::simgen::{
    generate_sim1, generate_sim2, mmse_ratio, random_group_graph, run_replicates, FitSettings, ModelScore,
    ReplicateScore, Sim1Design, Sim2Design, SimData,
};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Design {
    Sim1,
    Sim2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum GraphSpec {
    Random {
        n_aes: usize,
        n_groups: usize,
        n_isolated: usize,
        overlap: f64,
        seed: u64,
    },
    File(PathBuf),
}

impl GraphSpec {
    pub fn build(&self) -> Result<OntologyGraph> {
        match self {
            GraphSpec::Random {
                n_aes,
                n_groups,
                n_isolated,
                overlap,
                seed,
            } => Ok(random_group_graph(*n_aes, *n_groups, *n_isolated, *overlap, *seed)),
            GraphSpec::File(p) => {
                let mapping = parse_ontology(p)?;
                let mut terms: Vec<String> = mapping.pairs.iter().map(|(t, _)| t.clone()).collect();
                terms.sort();
                terms.dedup();
                Ok(build_graph(&mapping, &terms).0)
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimulateOptions {
    pub design: Design,
    pub replicates: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub settings: FitSettings,
    pub sim1: Sim1Design,
    pub sim2: Sim2Design,
    pub graph: GraphSpec,
    /// Writes replicate 0 as reports and ontology files.
    pub export_data: bool,
}

#[derive(Debug)]
pub struct SimulateOutcome {
    pub scores: Vec<ReplicateScore>,
    /// Mean per-model metrics: (model, metric, mean).
    pub means: Vec<(String, String, f64)>,
    /// Per-AE MMSE ratio BGrass / Bss.
    pub mmse_ratio: Vec<f64>,
}

fn metric_rows(m: &ModelScore) -> Vec<(&'static str, f64)> {
    vec![
        ("rsse", m.rsse),
        ("auc", m.auc.unwrap_or(f64::NAN)),
        ("realized_fdr", m.realized_fdr),
        ("n_selected", m.n_selected as f64),
        ("max_r_hat", m.max_r_hat),
        ("epsilon", m.epsilon.value()),
    ]
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.6}")
    }
}

pub fn generate(opts: &SimulateOptions, graph: &OntologyGraph, seed: u64) -> bgrass::Result<SimData> {
    match opts.design {
        Design::Sim1 => generate_sim1(&opts.sim1, seed),
        Design::Sim2 => generate_sim2(graph, &opts.sim2, seed),
    }
}

pub fn export(sim: &SimData, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let f = File::create(dir.join("reports.csv"))?;
    write_reports(BufWriter::new(f), &sim.to_records(), &sim.schema())?;
    let mut w = BufWriter::new(File::create(dir.join("ontology.csv"))?);
    writeln!(w, "term,group")?;
    for (t, g) in sim.ontology_pairs() {
        writeln!(w, "{t},{g}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn run_simulate(opts: &SimulateOptions) -> Result<SimulateOutcome> {
    if opts.replicates == 0 {
        anyhow::bail!("replicates must be at least 1");
    }
    let graph = match opts.design {
        Design::Sim1 => opts.sim1.graph(),
        Design::Sim2 => opts.graph.build()?,
    };
    let dir = &opts.out_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    if opts.export_data {
        let sim = generate(opts, &graph, opts.seed)?;
        export(&sim, &dir.join("data"))?;
    }
    let scores = run_replicates(opts.replicates, opts.seed, &opts.settings, |s| generate(opts, &graph, s))?;

    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    w.write_record(["replicate", "seed", "model", "metric", "value"])?;
    for r in &scores {
        for m in [&r.bgrass, &r.bss] {
            for (name, v) in metric_rows(m) {
                w.write_record([r.replicate.to_string(), r.seed.to_string(), m.model.clone(), name.into(), fmt(v)])?;
            }
        }
    }
    w.flush()?;

    let truth = generate(opts, &graph, opts.seed)?.truth;
    let mut w = csv::Writer::from_path(dir.join("per_ae.csv"))?;
    w.write_record(["replicate", "model", "ae", "estimate", "squared_error", "prob_positive", "selection_prob"])?;
    for r in &scores {
        for m in [&r.bgrass, &r.bss] {
            for j in 0..m.beta_mean.len() {
                w.write_record([
                    r.replicate.to_string(),
                    m.model.clone(),
                    graph.terms[j].clone(),
                    fmt(m.beta_mean[j]),
                    fmt(m.squared_errors[j]),
                    fmt(m.prob_positive[j]),
                    fmt(m.selection_prob[j]),
                ])?;
            }
        }
    }
    w.flush()?;

    let se_a: Vec<Vec<f64>> = scores.iter().map(|r| r.bgrass.squared_errors.clone()).collect();
    let se_b: Vec<Vec<f64>> = scores.iter().map(|r| r.bss.squared_errors.clone()).collect();
    let ratio = mmse_ratio(&se_a, &se_b);
    let mut w = csv::Writer::from_path(dir.join("mmse.csv"))?;
    w.write_record(["ae", "truth_replicate0", "mmse_ratio"])?;
    for (j, r) in ratio.iter().enumerate() {
        w.write_record([graph.terms[j].clone(), fmt(truth[j]), fmt(*r)])?;
    }
    w.flush()?;

    let n = scores.len() as f64;
    let mut means = Vec::new();
    for (model, pick) in [("BGrass", 0usize), ("Bss", 1)] {
        let rows: Vec<Vec<(&str, f64)>> = scores
            .iter()
            .map(|r| metric_rows(if pick == 0 { &r.bgrass } else { &r.bss }))
            .collect();
        for k in 0..rows[0].len() {
            let name = rows[0][k].0;
            let mean = rows.iter().map(|r| r[k].1).sum::<f64>() / n;
            means.push((model.to_string(), name.to_string(), mean));
        }
    }
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(["model", "metric", "mean"])?;
    for (m, k, v) in &means {
        w.write_record([m.clone(), k.clone(), fmt(*v)])?;
    }
    w.flush()?;
    std::fs::write(dir.join("options.json"), serde_json::to_string_pretty(opts)? + "\n")?;

    Ok(SimulateOutcome {
        scores,
        means,
        mmse_ratio: ratio,
    })
}
