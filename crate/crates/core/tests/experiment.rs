use std::fs;
use std::path::Path;

use alforge::experiment::csvio;
use alforge::experiment::plotdata::write_plot_data;
use alforge::experiment::report::{build_report, default_criteria, load_runs};
use alforge::experiment::{run_experiment, ExperimentConfig};
use alforge::Strategy;

fn small_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = 11;
    c.repetitions = 2;
    c.strategies = vec![Strategy::Random, Strategy::EnsEntropy, Strategy::McMi];
    c.data.n_train = 400;
    c.data.n_test = 200;
    c.protocol.seed_per_class = 4;
    c.protocol.query_size = 50;
    c.protocol.max_steps = 3;
    c.protocol.passes = 4;
    c.protocol.ensemble = 3;
    c.protocol.dump_predictions = true;
    c.network.fc_widths = Some(vec![12]);
    c.network.epochs = Some(4);
    c
}

fn run_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != "run.log")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn runs_are_bitwise_reproducible_and_feed_reports_and_plots() {
    let cfg = small_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let summary = run_experiment(&cfg, a.path()).unwrap();
    run_experiment(&cfg, b.path()).unwrap();
    let fa = run_files(a.path());
    assert_eq!(fa, run_files(b.path()));
    // 3 strategies x 2 reps x (metrics, querylog, calibration, errorcurve, predictions) + echo,
    // pool counts and 2 references.
    assert_eq!(fa.len(), 3 * 2 * 5 + 4);

    for j in &summary.jobs {
        assert_eq!(j.labeled, vec![20, 70, 120, 170]);
        let want = if j.strategy == Strategy::EnsEntropy { 3 } else { 1 };
        assert!(j.members_trained.iter().all(|&m| m == want));
    }
    let log = fs::read_to_string(a.path().join("run.log")).unwrap();
    assert!(log.contains("strategy=ens-entropy rep=1 step=2 labeled=120 members_trained=3"));

    // Every strategy of a repetition shares the seed set.
    let q = |s: &str, r| fs::read_to_string(a.path().join(format!("querylog_{s}_{r}.txt"))).unwrap();
    assert_eq!(q("random", 0).lines().next(), q("mc-mi", 0).lines().next());
    assert_ne!(q("random", 0).lines().next(), q("random", 1).lines().next());

    // The echoed config reproduces the run.
    let echo = fs::read_to_string(a.path().join("config.echo")).unwrap();
    let back = ExperimentConfig::from_toml(&echo, "config.echo").unwrap();
    assert_eq!(back, cfg);
    let c = tempfile::tempdir().unwrap();
    run_experiment(&back, c.path()).unwrap();
    assert_eq!(fa, run_files(c.path()));

    let runs = load_runs(a.path()).unwrap();
    assert_eq!(runs.hash, cfg.comparison_hash().unwrap());
    let rep = build_report(&runs, "random", &default_criteria()).unwrap();
    for r in rep.rows.iter().filter(|r| r.strategy == "random" && r.paired()) {
        assert!(r.savings.is_none() || r.savings == Some(0.0));
    }

    let plots = a.path().join("plots");
    let written = write_plot_data(a.path(), &plots, "random", None).unwrap();
    assert_eq!(written.len(), 6);
    let lc = csvio::read_table(&plots.join("learning_curve.csv")).unwrap();
    assert_eq!(lc.rows.len(), 3 * 2 * 4);
    let cal = csvio::read_table(&plots.join("calibration_step3.csv")).unwrap();
    let cc = cal.column("count").unwrap();
    for s in ["random", "ens-entropy", "mc-mi"] {
        let total: usize = (0..cal.rows.len())
            .filter(|&i| cal.rows[i][0] == s && cal.rows[i][1] == "0")
            .map(|i| cal.get::<usize>(i, cc).unwrap())
            .sum();
        assert_eq!(total, 200);
    }
    let cd = csvio::read_table(&plots.join("classdelta.csv")).unwrap();
    for row in cd.rows.iter().filter(|r| r[0] == "random") {
        assert!(row[4..].iter().all(|v| v.parse::<f64>().unwrap() == 0.0), "{row:?}");
    }
    assert!(cd.rows.iter().filter(|r| r[0] == "ens-entropy").any(|r| r[4..].iter().any(|v| v.parse::<f64>().unwrap() != 0.0)));

    // A second run with cached references gives identical files.
    run_experiment(&cfg, a.path()).unwrap();
    assert_eq!(fa, run_files(a.path()));
}

#[test]
fn plot_data_lists_missing_inputs() {
    let cfg = ExperimentConfig {
        strategies: vec![Strategy::Random],
        repetitions: 1,
        ..small_config()
    };
    let a = tempfile::tempdir().unwrap();
    run_experiment(&cfg, a.path()).unwrap();
    fs::remove_file(a.path().join("querylog_random_0.txt")).unwrap();
    fs::remove_file(a.path().join("poolcounts.csv")).unwrap();
    let e = write_plot_data(a.path(), &a.path().join("p"), "random", None).unwrap_err().to_string();
    assert!(e.contains("querylog_random_0.txt") && e.contains("poolcounts.csv"), "{e}");
}
