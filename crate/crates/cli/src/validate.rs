//! `validate`: dry-run parse, graph statistics and Ω conditioning.

use std::fmt::Write as _;

use anyhow::Result;
use bgrass::linalg::condition_number;
use bgrass::ontology::correlation_from_precision;

use crate::config::RunConfig;
use crate::fit::prepare;

#[derive(Debug)]
pub struct ValidationReport {
    pub n_reports: usize,
    pub n_rejected_rows: usize,
    pub n_aes: usize,
    pub n_strata: usize,
    pub n_edges: usize,
    pub n_groups: usize,
    pub n_isolated: usize,
    /// ε and the condition number of Ω_ε.
    pub conditioning: Vec<(String, f64)>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "reports: {} ({} rows rejected)", self.n_reports, self.n_rejected_rows);
        let _ = writeln!(s, "AEs: J={}", self.n_aes);
        let _ = writeln!(s, "strata: {}", self.n_strata);
        let _ = writeln!(
            s,
            "graph: |E|={}, groups={}, isolated={}",
            self.n_edges, self.n_groups, self.n_isolated
        );
        for (eps, k) in &self.conditioning {
            let _ = writeln!(s, "omega condition number at epsilon {eps}: {k:.4e}");
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }
}

pub fn run_validate(cfg: &RunConfig) -> Result<ValidationReport> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    let mut conditioning = Vec::new();
    for eps in cfg.grid() {
        let corr = correlation_from_precision(&prep.graph, eps)?;
        conditioning.push((eps.to_string(), condition_number(&corr.omega)));
    }
    Ok(ValidationReport {
        n_reports: prep.n_reports,
        n_rejected_rows: prep.rejected_rows.len(),
        n_aes: prep.cells.n_aes(),
        n_strata: prep.cells.n_strata(),
        n_edges: prep.graph.n_edges(),
        n_groups: prep.graph.groups.len(),
        n_isolated: prep.graph.n_isolated(),
        conditioning,
        warnings: prep.warnings,
    })
}
