use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use alforge::experiment::csvio;

fn alforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alforge")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = alforge(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_prints_rounded_class_counts_and_is_repeatable() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    let args = |o: &Path| vec!["gen-data", "--preset", "kitti-ratios", "--n-train", "1000", "--seed", "7", "--out", s(o)]
        .into_iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    let out = ok(&args(&a).iter().map(String::as_str).collect::<Vec<_>>());
    assert!(
        out.contains("train: 1000 samples; Small Vehicle=780, Human=156, Truck=27, Tram=13, Misc=24"),
        "{out}"
    );
    ok(&args(&b).iter().map(String::as_str).collect::<Vec<_>>());
    for split in ["train", "test"] {
        for f in ["manifest", "features.bin", "labels.bin", "locations.bin", "locmask.bin"] {
            assert_eq!(fs::read(a.join(split).join(f)).unwrap(), fs::read(b.join(split).join(f)).unwrap(), "{split}/{f}");
        }
    }
}

#[test]
fn missing_out_is_a_usage_error() {
    let o = alforge(&["gen-data", "--preset", "kitti-ratios", "--n-train", "1000"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--out"));
}

#[test]
fn run_from_container_then_report_and_plot_data() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    let out = t.path().join("run");
    ok(&["gen-data", "--n-train", "400", "--n-test", "200", "--seed", "3", "--out", s(&data)]);
    let cfg = t.path().join("small.toml");
    fs::write(&cfg, "repetitions = 2\n[network]\nfc_widths = [12]\nepochs = 3\n[protocol]\nseed_per_class = 4\n").unwrap();
    let run = [
        "--config", s(&cfg), "--out", s(&out), "run", "--data", s(&data), "--strategy", "random,ens-mi", "--steps", "3",
        "--query", "50", "--ensemble", "5",
    ];
    ok(&run);
    for r in 0..2 {
        for st in ["random", "ens-mi"] {
            let (_, _, recs) = csvio::read_metrics(&out.join(format!("metrics_{st}_{r}.csv"))).unwrap();
            assert_eq!(recs.len(), 4);
            assert_eq!(recs.iter().map(|m| m.labeled).collect::<Vec<_>>(), vec![20, 70, 120, 170]);
        }
    }
    let log = fs::read_to_string(out.join("run.log")).unwrap();
    let ens: Vec<&str> = log.lines().filter(|l| l.contains("strategy=ens-mi")).collect();
    assert_eq!(ens.len(), 8);
    assert!(ens.iter().all(|l| l.contains("members_trained=5")));
    assert!(log.lines().filter(|l| l.contains("strategy=random")).all(|l| l.contains("members_trained=1")));

    let echo = fs::read_to_string(out.join("config.echo")).unwrap();
    assert!(echo.contains("epochs = 3") && echo.contains("query_size = 50"), "{echo}");

    let first: Vec<Vec<u8>> = ["metrics_ens-mi_1.csv", "querylog_ens-mi_1.txt"]
        .iter()
        .map(|f| fs::read(out.join(f)).unwrap())
        .collect();
    ok(&run);
    for (f, before) in ["metrics_ens-mi_1.csv", "querylog_ens-mi_1.txt"].iter().zip(first) {
        assert_eq!(fs::read(out.join(f)).unwrap(), before, "{f}");
    }

    let table = ok(&["report", "--out", s(&out)]);
    assert!(table.contains("baseline-final") && table.contains("ens-mi"), "{table}");
    assert!(out.join("report.csv").is_file() && out.join("report_summary.csv").is_file());

    let plots = t.path().join("plots");
    ok(&["plot-data", "--out", s(&out), "--dest", s(&plots), "--steps", "0,1,3"]);
    let lc = csvio::read_table(&plots.join("learning_curve.csv")).unwrap();
    assert_eq!(lc.rows.len(), 2 * 2 * 4);
    for k in [0, 1, 3] {
        let cal = csvio::read_table(&plots.join(format!("calibration_step{k}.csv"))).unwrap();
        let c = cal.column("count").unwrap();
        let total: usize = (0..cal.rows.len()).map(|i| cal.get::<usize>(i, c).unwrap()).sum();
        assert_eq!(total, 2 * 2 * 200);
        assert!(plots.join(format!("errorcurve_step{k}.csv")).is_file());
    }
    let text = fs::read_to_string(plots.join("classdelta.csv")).unwrap();
    assert!(text.starts_with("# schema=1\n"));
}

#[test]
fn report_refuses_mixed_configs_with_exit_1() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path();
    let base = ["--out", s(out), "run", "--n-train", "300", "--n-test", "100", "--steps", "1", "--reps", "1", "--epochs", "2"];
    ok(&[&base[..], &["--strategy", "random"]].concat());
    ok(&[&base[..], &["--strategy", "mc-entropy", "--query", "20"]].concat());
    let o = alforge(&["report", "--out", s(out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("different configurations"));
}

#[test]
fn plot_data_without_runs_names_expected_files() {
    let t = tempfile::tempdir().unwrap();
    let o = alforge(&["plot-data", "--out", s(t.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("metrics_<strategy>_<rep>.csv"));
}

#[test]
fn bad_config_and_thread_settings_are_usage_errors() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("bad.toml");
    fs::write(&cfg, "repetitons = 2\n").unwrap();
    assert_eq!(alforge(&["--config", s(&cfg), "--out", s(t.path()), "run"]).status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_alforge"))
        .args(["--out", s(t.path()), "report"])
        .env("ALFORGE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(alforge(&["run", "--out", s(t.path()), "--query", "0"]).status.code(), Some(2));
}
