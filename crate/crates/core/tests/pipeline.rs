use std::fs::File;
use std::io::BufWriter;

use bgrass::engine::{run_chains, Hyperparams, Schedule};
use bgrass::ingest::{filter_and_stratify, parse_reports, write_reports, FilterOptions};
use bgrass::ontology::{correlation_from_precision, Epsilon};
use bgrass::posterior::{summarize, write_summary_csv};
use bgrass::simgen::{generate_sim2, random_group_graph, Sim2Design};
use bgrass::store::{read_draws_file, write_draws_file};
use tempfile::TempDir;

#[test]
fn reports_file_round_trip_preserves_cells() {
    let graph = random_group_graph(12, 3, 2, 0.2, 5);
    let design = Sim2Design {
        n_reports: 800,
        ..Default::default()
    };
    let sim = generate_sim2(&graph, &design, 9).unwrap();
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("reports.csv");
    write_reports(BufWriter::new(File::create(&path).unwrap()), &sim.to_records(), &sim.schema()).unwrap();

    let parsed = parse_reports(&path, &sim.schema()).unwrap();
    assert!(parsed.diagnostics.is_empty());
    assert_eq!(parsed.records.len(), 800);
    let options = FilterOptions {
        min_ae_count: 0,
        ..Default::default()
    };
    let (cells, _) = filter_and_stratify(&parsed.records, &sim.schema(), &options).unwrap();

    let total = |c: &bgrass::ingest::StratifiedCells, term: &str| -> u32 {
        let j = c.ae_vocabulary.iter().position(|t| t == term);
        j.map_or(0, |j| (0..c.n_strata()).map(|s| c.count(s, j)).sum())
    };
    for term in &sim.cells.ae_vocabulary {
        assert_eq!(total(&cells, term), total(&sim.cells, term), "{term}");
    }
    let trials: u32 = cells.strata.iter().map(|s| s.trials).sum();
    assert_eq!(trials, 800);
}

#[test]
fn short_fit_summary_and_draw_file() {
    let graph = random_group_graph(8, 2, 1, 0.0, 3);
    let design = Sim2Design {
        n_reports: 1500,
        ..Default::default()
    };
    let sim = generate_sim2(&graph, &design, 4).unwrap();
    let corr = correlation_from_precision(&sim.graph, Epsilon::Finite(0.1)).unwrap();
    let schedule = Schedule {
        iters: 300,
        burn_in: 100,
        thin: 2,
    };
    let store = run_chains(&sim.cells, &corr, &Hyperparams::default(), &schedule, &[1, 2], None).unwrap();
    assert_eq!(store.total_draws(), 200);

    let summaries = summarize(&store, &sim.cells.ae_vocabulary).unwrap();
    assert_eq!(summaries.len(), 8);
    for s in &summaries {
        assert!(s.lower <= s.median && s.median <= s.upper);
        assert!((0.0..=1.0).contains(&s.selection_prob));
    }
    let mut csv = Vec::new();
    write_summary_csv(&mut csv, &summaries).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 9);

    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("draws.bin");
    write_draws_file(&path, &store.chains, &store.seeds).unwrap();
    let (chains, seeds) = read_draws_file(&path).unwrap();
    assert_eq!(seeds, store.seeds);
    assert_eq!(chains, store.chains);
}
