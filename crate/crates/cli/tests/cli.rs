use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ftccl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ftccl")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = ftccl(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

fn ccl(dir: &Path, graph: &str, extra: &[&str]) -> String {
    let g = dir.join("g.txt");
    let out = dir.join("labels.txt");
    std::fs::write(&g, graph).unwrap();
    let mut args = vec!["ccl", "--graph", s(&g), "--output", s(&out)];
    args.extend(extra);
    ok(&args);
    read(&out)
}

fn small_volume(dir: &Path) -> PathBuf {
    let vol = dir.join("vol");
    ok(&["generate", "--dims", "8x24x24", "--seed", "3", "--output", s(&vol)]);
    vol
}

#[test]
fn generate_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["generate", "--dims", "4x16x16", "--seed", "9", "--output", s(&a)]);
    ok(&["generate", "--dims", "4x16x16", "--seed", "9", "--output", s(&b)]);
    let raw_a = std::fs::read(a.with_extension("raw")).unwrap();
    assert_eq!(raw_a.len(), 4 * 16 * 16 * 4);
    assert_eq!(raw_a, std::fs::read(b.with_extension("raw")).unwrap());
    assert_eq!(read(&a.with_extension("json")), read(&b.with_extension("json")));
}

#[test]
fn generate_128_cube_is_8_mib() {
    let dir = tempfile::tempdir().unwrap();
    let v = dir.path().join("cube");
    ok(&["generate", "--dims", "128x128x128", "--output", s(&v)]);
    assert_eq!(std::fs::metadata(v.with_extension("raw")).unwrap().len(), 8 << 20);
}

#[test]
fn ccl_small_examples() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ccl(dir.path(), "1 2\n2 3\n", &[]), "1 1\n2 1\n3 1\n");
    assert_eq!(ccl(dir.path(), "0\n1\n2\n3\n4\n", &["--ranks", "3"]), "0 0\n1 1\n2 2\n3 3\n4 4\n");
}

#[test]
fn ccl_matches_oracle_across_ranks_modes_and_transports() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut graph = String::new();
    for e in (0..600).step_by(2) {
        graph.push_str(&format!("{e}\n"));
    }
    for _ in 0..250 {
        graph.push_str(&format!("{} {}\n", 2 * rng.gen_range(0..300), 2 * rng.gen_range(0..300)));
    }
    let g = dir.path().join("graph.txt");
    let want_path = dir.path().join("oracle.txt");
    std::fs::write(&g, &graph).unwrap();
    ok(&["oracle", "--graph", s(&g), "--output", s(&want_path)]);
    let want = read(&want_path);
    for ranks in ["1", "4", "7"] {
        for mode in ["sync", "async"] {
            for transport in ["sim", "sockets"] {
                let got = ccl(
                    dir.path(),
                    &graph,
                    &["--ranks", ranks, "--mode", mode, "--seed", "2", "--transport", transport],
                );
                assert_eq!(got, want, "ranks {ranks} {mode} {transport}");
            }
        }
    }
}

#[test]
fn ccl_explicit_partition_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let part = dir.path().join("part.txt");
    let metrics = dir.path().join("m.json");
    std::fs::write(&part, "1 1\n2 0\n3 1\n4 0\n").unwrap();
    let got = ccl(
        dir.path(),
        "1 3\n4 2\n",
        &["--ranks", "2", "--partition", s(&part), "--metrics", s(&metrics)],
    );
    assert_eq!(got, "1 1\n2 2\n3 1\n4 2\n");
    let m: serde_json::Value = serde_json::from_str(&read(&metrics)).unwrap();
    assert_eq!(m["command"], "ccl");
    assert_eq!(m["n_components"], 2);
    assert_eq!(m["engine"]["per_rank"].as_array().unwrap().len(), 2);
}

#[test]
fn track_output_is_independent_of_ranks_mode_and_balance() {
    let dir = tempfile::tempdir().unwrap();
    let vol = small_volume(dir.path());
    for (feature, extra) in [("critical", vec![]), ("levelset", vec!["--threshold", "0.5"])] {
        let mut outputs = Vec::new();
        for (ranks, mode, lb, transport) in [
            ("1", "sync", "off", "sim"),
            ("8", "sync", "off", "sim"),
            ("8", "async", "off", "sim"),
            ("4", "async", "on", "sim"),
            ("3", "sync", "auto", "sockets"),
        ] {
            let out = dir.path().join(format!("{feature}-{ranks}-{mode}-{lb}.jsonl"));
            let mut args = vec![
                "track", "--input", s(&vol), "--output", s(&out), "--feature", feature, "--ranks", ranks,
                "--mode", mode, "--load-balance", lb, "--transport", transport,
            ];
            args.extend(&extra);
            ok(&args);
            outputs.push(read(&out));
        }
        assert!(!outputs[0].is_empty(), "{feature}");
        assert!(outputs.iter().all(|o| *o == outputs[0]), "{feature}");
    }
}

#[test]
fn track_csv_summary_and_assignment() {
    let dir = tempfile::tempdir().unwrap();
    let vol = small_volume(dir.path());
    let out = dir.path().join("t.csv");
    let summary = dir.path().join("summary.json");
    let assignment = dir.path().join("kd.json");
    ok(&[
        "track", "--input", s(&vol), "--output", s(&out), "--feature", "critical", "--format", "csv",
        "--ranks", "4", "--load-balance", "on", "--summary", s(&summary), "--assignment", s(&assignment),
    ]);
    let csv = read(&out);
    assert_eq!(csv.lines().next().unwrap(), "component_id,kind,id,t,z,y,x,value,type");
    let sm: serde_json::Value = serde_json::from_str(&read(&summary)).unwrap();
    assert_eq!(sm["n_features"].as_u64().unwrap() as usize, csv.lines().count() - 1);
    let kd: serde_json::Value = serde_json::from_str(&read(&assignment)).unwrap();
    assert_eq!(kd["num_ranks"], 4);
}

#[test]
fn levelset_without_threshold_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let vol = small_volume(dir.path());
    let out = dir.path().join("t.jsonl");
    let res = ftccl(&["track", "--input", s(&vol), "--output", s(&out), "--feature", "levelset"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("--threshold"));
}

#[test]
fn malformed_graph_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("bad.txt");
    std::fs::write(&g, "1 2\n# ok\n3 x\n").unwrap();
    let res = ftccl(&["ccl", "--graph", s(&g), "--output", s(&dir.path().join("o"))]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn message_cap_from_environment_aborts() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.txt");
    std::fs::write(&g, "1 2\n2 3\n3 4\n4 5\n").unwrap();
    let res = Command::new(env!("CARGO_BIN_EXE_ftccl"))
        .args(["ccl", "--graph", s(&g), "--output", s(&dir.path().join("o")), "--ranks", "4"])
        .env("FTCCL_MSG_CAP", "1")
        .output()
        .unwrap();
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("message cap"));
}
