//! `fit`: reports and ontology in, run directory out.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use bgrass::engine::{run_chains, DrawStore};
use bgrass::ingest::{filter_and_stratify, parse_ontology, parse_reports, parse_term_list, StratifiedCells};
use bgrass::ontology::{build_graph, correlation_from_precision, Epsilon, OntologyGraph};
use bgrass::posterior::{
    convergence, enrichment, flag_aes, flag_groups, nc_adjust, resolve_negative_controls, summarize,
    write_enrichment_csv, write_summary_csv, AeSummary, Convergence, GroupEnrichment,
};
use bgrass::select::{dic, grid_search, EpsilonGrid, GridEntry};
use bgrass::store::{write_draws_file, FileHash, Manifest};
use serde::Serialize;

use crate::config::RunConfig;

pub const OUTPUT_FILES: [&str; 5] = ["summary.csv", "enrichment.csv", "grid.csv", "diagnostics.json", "draws.bin"];

pub fn model_label(eps: Epsilon) -> &'static str {
    if eps.is_infinite() {
        "Bss"
    } else {
        "BGrass"
    }
}

#[derive(Debug, Serialize)]
struct GraphStats {
    vertices: usize,
    edges: usize,
    isolated: usize,
    groups: usize,
}

impl GraphStats {
    fn of(g: &OntologyGraph) -> Self {
        Self {
            vertices: g.n_vertices(),
            edges: g.n_edges(),
            isolated: g.n_isolated(),
            groups: g.groups.len(),
        }
    }
}

#[derive(Debug, Serialize)]
struct ConvergenceReport {
    max_r_hat: f64,
    threshold: f64,
    converged: bool,
    n_degenerate: usize,
    /// Ten largest R̂ values.
    worst: Vec<(String, f64)>,
}

#[derive(Debug, Serialize)]
struct Diagnostics {
    model: &'static str,
    epsilon: Epsilon,
    n_reports: usize,
    n_rejected_rows: usize,
    rejected_rows: Vec<String>,
    excluded_reports: usize,
    reports_without_modeled_aes: usize,
    dropped_aes: usize,
    n_aes: usize,
    n_strata: usize,
    n_coef: usize,
    graph: GraphStats,
    grid: Vec<GridEntry>,
    convergence: ConvergenceReport,
    negative_controls: Option<Vec<String>>,
    warnings: Vec<String>,
}

/// Result of a fit, as seen by the caller.
#[derive(Debug)]
pub struct FitOutcome {
    pub run_dir: PathBuf,
    pub epsilon: Epsilon,
    pub max_r_hat: f64,
    pub converged: bool,
    pub summaries: Vec<AeSummary>,
    pub groups: Vec<GroupEnrichment>,
}

/// Loaded and aggregated inputs.
pub struct Prepared {
    pub cells: StratifiedCells,
    pub graph: OntologyGraph,
    pub n_reports: usize,
    pub rejected_rows: Vec<String>,
    pub excluded_reports: usize,
    pub reports_without_modeled_aes: usize,
    pub dropped_aes: usize,
    pub negative_controls: Option<Vec<String>>,
    pub warnings: Vec<String>,
}

fn ensure_exists(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        anyhow::bail!("{what} file not found: {}", path.display());
    }
    Ok(())
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    ensure_exists(&cfg.input.reports, "reports")?;
    ensure_exists(&cfg.input.ontology, "ontology")?;
    if let Some(nc) = &cfg.input.negative_controls {
        ensure_exists(nc, "negative-control")?;
    }
    let parsed = parse_reports(&cfg.input.reports, &cfg.schema)?;
    let mut warnings = parsed.warnings.clone();
    let rejected_rows: Vec<String> = parsed
        .diagnostics
        .iter()
        .map(|d| format!("line {}: {}", d.line, d.message))
        .collect();
    if !rejected_rows.is_empty() {
        log::warn!("{} report rows rejected; see diagnostics.json", rejected_rows.len());
    }
    let (cells, summary) = filter_and_stratify(&parsed.records, &cfg.schema, &cfg.filter)?;
    let mapping = parse_ontology(&cfg.input.ontology)?;
    warnings.extend(mapping.warnings.iter().cloned());
    let (graph, gw) = build_graph(&mapping, &cells.ae_vocabulary);
    warnings.extend(gw);
    let negative_controls = match &cfg.input.negative_controls {
        Some(p) => Some(parse_term_list(p)?),
        None => None,
    };
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(Prepared {
        n_reports: parsed.records.len(),
        cells,
        graph,
        rejected_rows,
        excluded_reports: summary.excluded_reports,
        reports_without_modeled_aes: summary.reports_without_modeled_aes,
        dropped_aes: summary.dropped_aes,
        negative_controls,
        warnings,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

/// Runs the sampler for a fixed ε or over the grid.
pub fn sample(cfg: &RunConfig, prep: &Prepared) -> Result<(EpsilonGrid, DrawStore)> {
    let seeds = cfg.mcmc.chain_seeds();
    let schedule = cfg.mcmc.schedule();
    let progress = (cfg.mcmc.progress_every > 0).then_some(cfg.mcmc.progress_every);
    match cfg.epsilon.fixed {
        Some(eps) => {
            let corr = correlation_from_precision(&prep.graph, eps)?;
            let store = run_chains(&prep.cells, &corr, &cfg.model, &schedule, &seeds, progress)?;
            let d = dic(&store, &prep.cells)?;
            let grid = EpsilonGrid {
                entries: vec![GridEntry {
                    epsilon: eps,
                    dic: Some(d),
                    error: None,
                    chosen: true,
                }],
                chosen: eps,
            };
            Ok((grid, store))
        }
        None => Ok(grid_search(
            &prep.cells,
            &prep.graph,
            &cfg.model,
            &cfg.epsilon.grid,
            &schedule,
            &seeds,
            progress,
        )?),
    }
}

pub fn run_fit(cfg: &RunConfig, command_line: &str) -> Result<FitOutcome> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    let mut warnings = prep.warnings.clone();
    log::info!(
        "{} reports, {} AEs, {} strata, {} graph edges",
        prep.n_reports,
        prep.cells.n_aes(),
        prep.cells.n_strata(),
        prep.graph.n_edges()
    );
    let (grid, store) = sample(cfg, &prep)?;
    let eps = grid.chosen;
    log::info!("selected epsilon {eps} ({})", model_label(eps));

    let terms = &prep.cells.ae_vocabulary;
    let mut summaries = summarize(&store, terms)?;
    let ncprob = match &prep.negative_controls {
        Some(nc) => {
            let (idx, w) = resolve_negative_controls(terms, nc)?;
            warnings.extend(w);
            Some(nc_adjust(&store, &idx)?)
        }
        None => None,
    };
    flag_aes(&mut summaries, cfg.report.fdr_alpha, cfg.report.effect_threshold, ncprob.as_deref());
    let (mut groups, gw) = enrichment(&store, &prep.graph.groups, cfg.report.min_group_size);
    warnings.extend(gw);
    flag_groups(&mut groups, cfg.report.fdr_alpha);

    let conv: Option<Convergence> = if store.chains.len() >= 2 {
        Some(convergence(&store, terms)?)
    } else {
        warnings.push("single chain: Gelman-Rubin diagnostics unavailable".into());
        None
    };
    let max_r_hat = conv.as_ref().map_or(f64::NAN, |c| c.max_r_hat);
    let converged = conv.as_ref().is_some_and(|c| c.converged(cfg.report.rhat_threshold));

    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_summary_csv(create(&dir.join("summary.csv"))?, &summaries)?;
    write_enrichment_csv(create(&dir.join("enrichment.csv"))?, &groups)?;
    grid.write_csv(create(&dir.join("grid.csv"))?)?;
    write_draws_file(&dir.join("draws.bin"), &store.chains, &store.seeds)?;

    let mut worst: Vec<(String, f64)> = conv
        .as_ref()
        .map(|c| c.parameters.iter().map(|(n, g)| (n.clone(), g.r_hat)).collect())
        .unwrap_or_default();
    worst.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    worst.truncate(10);
    let diagnostics = Diagnostics {
        model: model_label(eps),
        epsilon: eps,
        n_reports: prep.n_reports,
        n_rejected_rows: prep.rejected_rows.len(),
        rejected_rows: prep.rejected_rows.iter().take(100).cloned().collect(),
        excluded_reports: prep.excluded_reports,
        reports_without_modeled_aes: prep.reports_without_modeled_aes,
        dropped_aes: prep.dropped_aes,
        n_aes: prep.cells.n_aes(),
        n_strata: prep.cells.n_strata(),
        n_coef: prep.cells.n_coef(),
        graph: GraphStats::of(&prep.graph),
        grid: grid.entries.clone(),
        convergence: ConvergenceReport {
            max_r_hat,
            threshold: cfg.report.rhat_threshold,
            converged,
            n_degenerate: conv.as_ref().map_or(0, |c| c.n_degenerate),
            worst,
        },
        negative_controls: prep.negative_controls.clone(),
        warnings,
    };
    let text = serde_json::to_string_pretty(&diagnostics)? + "\n";
    std::fs::write(dir.join("diagnostics.json"), text)?;

    let mut inputs = vec![FileHash::of(&cfg.input.reports)?, FileHash::of(&cfg.input.ontology)?];
    if let Some(nc) = &cfg.input.negative_controls {
        inputs.push(FileHash::of(nc)?);
    }
    let outputs = OUTPUT_FILES
        .iter()
        .map(|f| {
            Ok(FileHash {
                path: PathBuf::from(f),
                sha256: bgrass::store::sha256_file(&dir.join(f))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        tool: "bgrass".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command_line.into(),
        config: serde_json::to_value(cfg)?,
        seeds: store.seeds.clone(),
        epsilon: Some(eps),
        inputs,
        outputs,
    };
    manifest.write(&dir.join("manifest.json"))?;

    Ok(FitOutcome {
        run_dir: dir.clone(),
        epsilon: eps,
        max_r_hat,
        converged,
        summaries,
        groups,
    })
}
