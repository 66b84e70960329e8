use std::fs;
use std::process::Command;

use cobf::harness::{parse_csv_file, Algo, CSV_HEADER};
use cobf::model::ChannelStats;

fn cobf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cobf"))
}

const BENCH: &str = r#"
num_users = 2
num_antennas = 2
eta = [0.5]
snr_db = [0.0, 10.0]
utility = "wsr"
trials = 2
seed = 21
algorithms = ["poa", "dwmmse", "dbsum", "tdma"]
timing = false
"#;

#[test]
fn bench_is_reproducible_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bench.toml");
    fs::write(&cfg, BENCH).unwrap();
    let mut outputs = Vec::new();
    for workers in ["1", "3"] {
        let out = dir.path().join(format!("r{workers}.csv"));
        let status = cobf().arg("bench").arg(&cfg).arg("--out").arg(&out).env("COBF_WORKERS", workers).status().unwrap();
        assert!(status.success());
        outputs.push(fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let recs = parse_csv_file(&dir.path().join("r1.csv")).unwrap();
    assert_eq!(recs.len(), 2 * 2 * 4);
    assert_eq!(recs[0].algo, Algo::Dbsum);
    for r in recs.iter().filter(|r| matches!(r.algo, Algo::Dbsum | Algo::Dwmmse)) {
        assert!(r.value <= r.bound.unwrap() + 1e-9);
    }
}

#[test]
fn gen_then_run_writes_traces() {
    let dir = tempfile::tempdir().unwrap();
    let stats = dir.path().join("stats.txt");
    assert!(cobf().args(["gen", "--users", "3", "--antennas", "2", "--eta", "0.4", "--seed", "9", "--out"]).arg(&stats).status().unwrap().success());
    let parsed = ChannelStats::from_text(&fs::read_to_string(&stats).unwrap()).unwrap();
    assert_eq!(parsed.num_users(), 3);

    let trace = dir.path().join("dbsum.csv");
    let ok = cobf().args(["run", "--algo", "dbsum", "--utility", "hm", "--stats"]).arg(&stats).arg("--trace").arg(&trace).status().unwrap();
    assert!(ok.success());
    let text = fs::read_to_string(&trace).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("iter,user,utility,elapsed_s,messages"));
    assert_eq!(lines.next().unwrap().split(',').nth(4), Some("6"));

    let trace = dir.path().join("dwmmse.csv");
    let ok = cobf().args(["run", "--algo", "dwmmse", "--weights", "0.2,0.3,0.5", "--stats"]).arg(&stats).arg("--trace").arg(&trace).status().unwrap();
    assert!(ok.success());
    assert!(fs::read_to_string(&trace).unwrap().starts_with("iter,user,utility,elapsed_s,messages,parallel_width\n"));
}

#[test]
fn configuration_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, BENCH.replace("trials = 2", "trials = 0")).unwrap();
    let out = cobf().arg("bench").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = cobf().args(["run", "--algo", "dwmmse", "--utility", "pf"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("weighted sum rate"));
}

#[test]
fn bench_to_stdout_has_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("b.toml");
    fs::write(&cfg, BENCH.replace("[\"poa\", \"dwmmse\", \"dbsum\", \"tdma\"]", "[\"tdma\"]")).unwrap();
    let out = cobf().arg("bench").arg(&cfg).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().starts_with(CSV_HEADER));
}
