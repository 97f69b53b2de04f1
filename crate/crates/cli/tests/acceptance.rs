//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use ftccl::balance::{kd_partition, FeaturePoint, LoadBalance};
use ftccl::dufind::{finish_forests, init_states, render_labels, sequential_oracle, Forest, RankState};
use ftccl::idspace::{decode_face_id, partition_raw_graph, Dims, ElementId, FacePlane, GraphPartition, RankId, RawGraph};
use ftccl::mesh::{decompose, detect_critical_points, detect_level_set, CriticalKind, Volume};
use ftccl::pipeline::{track, TrackConfig};
use ftccl::trajectory::FeatureKind;
use ftccl::transport::{audit_no_progress, run_ranks, Schedule, DEFAULT_MSG_CAP};

const ORACLE_FIXTURES: u64 = 200;
const ORACLE_N_RANGE: (f64, f64) = (10.0, 50_000.0);
const ORACLE_DEGREE_RANGE: (f64, f64) = (0.5, 16.0);
const PINNED_DEGREES: [f64; 2] = [1.99, 11.82];
const RANKS: [usize; 7] = [1, 2, 3, 4, 8, 16, 64];
const ASYNC_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const ORACLE_BUDGET: Duration = Duration::from_secs(300);
const MAX_HOPS: usize = 2;

const PIPELINE_DIMS: &str = "32x64x64";
const PIPELINE_RANKS: [usize; 3] = [1, 4, 8];
const LEVELSET_THRESHOLD: &str = "0.8";
const PIPELINE_BUDGET: Duration = Duration::from_secs(120);

const KD_POINTS: usize = 10_000;
const KD_RANKS: usize = 16;
const KD_BOUND: usize = 625;

const GAUSS_T: usize = 16;
const GAUSS_SIGMA: f64 = 4.0;
const GAUSS_MAX_ERROR: f64 = 1.0;

const FUZZ_GRAPHS: u64 = 1000;
const FUZZ_MAX_N: u64 = 200;

const SCALE_ELEMENTS: u64 = 1_000_000;
const SCALE_EDGES: u64 = 2_000_000;
const SCALE_RANKS: usize = 16;
const SCALE_BUDGET: Duration = Duration::from_secs(60);

struct Verdict {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(id: u8, name: &'static str, pass: bool, detail: String) -> Verdict {
    Verdict { id, name, pass, detail }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_ftccl")
}

fn ftccl(args: &[&str]) -> Result<(), String> {
    let out = Command::new(bin())
        .args(args)
        .output()
        .map_err(|e| format!("spawn: {e}"))?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "ftccl {} exited {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

// Criteria 1-3: random graphs against the sequential oracle.

struct Fixture {
    graph: RawGraph,
    scatter: bool,
    seed: u64,
}

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    (rng.gen_range(lo.ln()..=hi.ln())).exp()
}

fn oracle_fixture(i: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce_0000 + i);
    let n = match i {
        0 => ORACLE_N_RANGE.0 as u64,
        1 => ORACLE_N_RANGE.1 as u64,
        _ => log_uniform(&mut rng, ORACLE_N_RANGE).round() as u64,
    };
    let degree = match i % 10 {
        2 => PINNED_DEGREES[0],
        3 => PINNED_DEGREES[1],
        _ => log_uniform(&mut rng, ORACLE_DEGREE_RANGE),
    };
    // strided ids so some fixtures are not contiguous
    let stride = 1 + i % 3;
    let base = i % 7;
    let id = |k: u64| ElementId(base + k * stride);
    let m = (n as f64 * degree / 2.0).round() as u64;
    let mut edges = Vec::with_capacity(m as usize);
    while (edges.len() as u64) < m {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b {
            edges.push((id(a), id(b)));
        }
    }
    Fixture {
        graph: RawGraph {
            elements: (0..n).map(id).collect(),
            edges,
        },
        scatter: i % 2 == 1,
        seed: i,
    }
}

fn partition_for(f: &Fixture, ranks: usize) -> GraphPartition {
    let table: Option<HashMap<ElementId, RankId>> = f.scatter.then(|| {
        f.graph
            .elements
            .iter()
            .map(|&e| {
                let h = e.0.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ f.seed;
                (e, RankId((h % ranks as u64) as u32))
            })
            .collect()
    });
    partition_raw_graph(&f.graph, ranks, table.as_ref()).expect("fixture partition")
}

/// Element count more than `MAX_HOPS` parent links from its root, checked
/// across the union of all ranks' forests.
fn deep_elements(forests: &[Forest]) -> usize {
    let parent: HashMap<ElementId, ElementId> = forests
        .iter()
        .flat_map(|f| f.ids.iter().copied().zip(f.parent.iter().copied()))
        .collect();
    parent
        .keys()
        .filter(|&&e| {
            let mut x = e;
            for _ in 0..MAX_HOPS {
                x = parent[&x];
            }
            parent[&x] != x
        })
        .count()
}

struct EngineRun {
    labels: String,
    deep: usize,
}

fn run_audited(part: &GraphPartition, schedule: &Schedule) -> Result<EngineRun, String> {
    let mut states = init_states(part).map_err(|e| e.to_string())?;
    let out = run_ranks(&mut states, schedule, DEFAULT_MSG_CAP).map_err(|e| e.to_string())?;
    out.transport.audit_empty().map_err(|e| e.to_string())?;
    audit_no_progress(&states).map_err(|e| e.to_string())?;
    let pre: Vec<Forest> = states.into_iter().map(RankState::into_forest).collect();
    let deep = deep_elements(&pre);
    let labels = if deep == 0 {
        let (_, labels) = finish_forests(pre).map_err(|e| e.to_string())?;
        render_labels(&labels)
    } else {
        String::new()
    };
    Ok(EngineRun { labels, deep })
}

#[derive(Default)]
struct FixtureReport {
    runs: usize,
    mismatches: Vec<String>,
    variant_outputs: usize,
    deep: usize,
    errors: Vec<String>,
    degree: f64,
    n: usize,
}

fn check_fixture(i: u64) -> FixtureReport {
    let f = oracle_fixture(i);
    let want = render_labels(&sequential_oracle(&f.graph.elements, &f.graph.edges));
    let mut rep = FixtureReport {
        n: f.graph.elements.len(),
        degree: 2.0 * f.graph.edges.len() as f64 / f.graph.elements.len() as f64,
        ..Default::default()
    };
    let mut outputs: Vec<String> = Vec::new();
    for ranks in RANKS {
        let part = partition_for(&f, ranks);
        let schedules = std::iter::once(Schedule::sync()).chain(ASYNC_SEEDS.map(Schedule::asynchronous));
        for schedule in schedules {
            rep.runs += 1;
            match run_audited(&part, &schedule) {
                Ok(run) => {
                    rep.deep += run.deep;
                    if run.deep == 0 && run.labels != want {
                        rep.mismatches
                            .push(format!("fixture {i} ranks {ranks} {:?} seed {}", schedule.mode, schedule.seed));
                    }
                    if run.deep == 0 && !outputs.contains(&run.labels) {
                        outputs.push(run.labels);
                    }
                }
                Err(e) => rep.errors.push(format!("fixture {i} ranks {ranks}: {e}")),
            }
        }
    }
    rep.variant_outputs = outputs.len();
    rep
}

fn criteria_oracle() -> Vec<Verdict> {
    let start = Instant::now();
    let reports: Vec<FixtureReport> = (0..ORACLE_FIXTURES).into_par_iter().map(check_fixture).collect();
    let elapsed = start.elapsed();
    let runs: usize = reports.iter().map(|r| r.runs).sum();
    let mismatches: Vec<&String> = reports.iter().flat_map(|r| &r.mismatches).collect();
    let errors: Vec<&String> = reports.iter().flat_map(|r| &r.errors).collect();
    let variant = reports.iter().filter(|r| r.variant_outputs > 1).count();
    let deep: usize = reports.iter().map(|r| r.deep).sum();
    let n_min = reports.iter().map(|r| r.n).min().unwrap_or(0);
    let n_max = reports.iter().map(|r| r.n).max().unwrap_or(0);
    let deg_min = reports.iter().map(|r| r.degree).fold(f64::INFINITY, f64::min);
    let deg_max = reports.iter().map(|r| r.degree).fold(0.0, f64::max);
    let near = |d: f64| reports.iter().filter(|r| (r.degree - d).abs() < 0.02).count();
    let first = |v: &[&String]| v.first().map(|s| format!("; first: {s}")).unwrap_or_default();
    let in_budget = elapsed <= ORACLE_BUDGET;
    vec![
        verdict(
            1,
            "oracle equivalence",
            mismatches.is_empty() && errors.is_empty() && in_budget,
            format!(
                "{runs} runs over {ORACLE_FIXTURES} graphs (n {n_min}..{n_max}, degree {deg_min:.2}..{deg_max:.2}, \
                 {} near 1.99, {} near 11.82), {} mismatches, {} errors, {:.1}s (budget {}s){}{}",
                near(PINNED_DEGREES[0]),
                near(PINNED_DEGREES[1]),
                mismatches.len(),
                errors.len(),
                elapsed.as_secs_f64(),
                ORACLE_BUDGET.as_secs(),
                first(&mismatches),
                first(&errors),
            ),
        ),
        verdict(
            2,
            "mode and schedule invariance",
            variant == 0 && errors.is_empty(),
            format!(
                "{variant} of {ORACLE_FIXTURES} graphs produced more than one distinct label file across ranks {RANKS:?}, sync and seeds {ASYNC_SEEDS:?}"
            ),
        ),
        verdict(
            3,
            "three-layer property",
            deep == 0 && errors.is_empty(),
            format!("{deep} elements more than {MAX_HOPS} hops from their root before finalization, over {runs} runs"),
        ),
    ]
}

// Criteria 4-5: pipeline transparency and load balancing.

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_default()
}

fn criterion_pipeline(dir: &Path) -> (Verdict, Vec<String>) {
    let start = Instant::now();
    let vol = dir.join("synthetic");
    let mut problems = Vec::new();
    if let Err(e) = ftccl(&["generate", "--dims", PIPELINE_DIMS, "--seed", "7", "--output", p(&vol)]) {
        problems.push(e);
    }
    let mut balance_problems = Vec::new();
    let mut files = 0;
    for (kind, extra) in [("levelset", vec!["--threshold", LEVELSET_THRESHOLD]), ("critical", vec![])] {
        let mut reference: Option<Vec<u8>> = None;
        for ranks in PIPELINE_RANKS {
            for (mode, lb) in [("sync", "off"), ("async", "off"), ("sync", "on"), ("async", "auto")] {
                let out = dir.join(format!("{kind}-{ranks}-{mode}-{lb}.jsonl"));
                let r = ranks.to_string();
                let mut args = vec![
                    "track", "--input", p(&vol), "--output", p(&out), "--feature", kind, "--ranks", &r,
                    "--mode", mode, "--seed", "11", "--load-balance", lb,
                ];
                args.extend(&extra);
                if let Err(e) = ftccl(&args) {
                    problems.push(e);
                    continue;
                }
                files += 1;
                let bytes = read(&out);
                match &reference {
                    None => reference = Some(bytes),
                    Some(want) if *want != bytes => {
                        let msg = format!("{kind} ranks {ranks} {mode} balance {lb} differs from ranks 1 sync");
                        if lb == "off" {
                            problems.push(msg);
                        } else {
                            balance_problems.push(msg);
                        }
                    }
                    Some(_) => {}
                }
            }
        }
        if reference.as_ref().is_some_and(|r| r.is_empty()) {
            problems.push(format!("{kind} produced no trajectories"));
        }
    }
    let elapsed = start.elapsed();
    let pass = problems.is_empty() && elapsed <= PIPELINE_BUDGET;
    (
        verdict(
            4,
            "pipeline distribution transparency",
            pass,
            format!(
                "{files} trajectory files for {PIPELINE_DIMS}, ranks {PIPELINE_RANKS:?}, both feature kinds; {:.1}s (budget {}s){}",
                elapsed.as_secs_f64(),
                PIPELINE_BUDGET.as_secs(),
                problems.first().map(|s| format!("; {s}")).unwrap_or_default()
            ),
        ),
        balance_problems,
    )
}

fn criterion_balance(cli_problems: Vec<String>) -> Verdict {
    let mut problems = cli_problems;
    let vol = moving_gaussian();
    let base = track(&vol, &TrackConfig::new(FeatureKind::Critical, None, 1)).map(|o| o.trajectories);
    for ranks in [2, 4, 8] {
        let mut cfg = TrackConfig::new(FeatureKind::Critical, None, ranks);
        cfg.load_balance = LoadBalance::On;
        let got = track(&vol, &cfg).map(|o| o.trajectories);
        match (&base, got) {
            (Ok(a), Ok(b)) if *a == b => {}
            _ => problems.push(format!("moving gaussian ranks {ranks} balanced differs")),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let points: Vec<FeaturePoint> = (0..KD_POINTS as u64)
        .map(|id| FeaturePoint {
            id: ElementId(id),
            coords: vec![rng.gen(), rng.gen(), rng.gen()],
        })
        .collect();
    let counts = kd_partition(&points, KD_RANKS).map(|a| a.counts()).unwrap_or_default();
    let max = counts.iter().copied().max().unwrap_or(usize::MAX);
    let min = counts.iter().copied().min().unwrap_or(0);
    let ok_kd = counts.len() == KD_RANKS && max <= KD_BOUND && max - min <= 1;
    verdict(
        5,
        "load-balance invariance and quality",
        problems.is_empty() && ok_kd,
        format!(
            "balanced pipeline outputs identical: {}; kd {KD_POINTS} points over {KD_RANKS} ranks: max leaf {max}, min {min} (bound {KD_BOUND}){}",
            problems.is_empty(),
            problems.first().map(|s| format!("; {s}")).unwrap_or_default()
        ),
    )
}

// Criterion 6: detector against analytic fields.

fn gauss_peak(t: usize) -> (f64, f64) {
    (8.3 + 0.6 * t as f64, 10.7 + 0.35 * t as f64)
}

fn moving_gaussian() -> Volume {
    let dims = Dims::new(vec![GAUSS_T, 32, 32]).unwrap();
    Volume::from_fn(dims, |c| {
        let (px, py) = gauss_peak(c[0]);
        let d2 = (c[2] as f64 - px).powi(2) + (c[1] as f64 - py).powi(2);
        (-d2 / (2.0 * GAUSS_SIGMA * GAUSS_SIGMA)).exp() as f32
    })
}

fn criterion_detector() -> Verdict {
    let vol = moving_gaussian();
    let mut problems = Vec::new();
    let mut worst: f64 = 0.0;
    let block = &decompose(vol.dims(), 1).unwrap()[0];
    match detect_critical_points(&vol, block) {
        Ok(det) => {
            for t in 0..GAUSS_T {
                let maxima: Vec<_> = det
                    .points
                    .iter()
                    .filter(|p| p.position[0] == t as f64 && p.kind == CriticalKind::Maximum)
                    .filter(|p| decode_face_id(p.face_id, vol.dims()).is_ok_and(|f| f.plane == FacePlane::Xy))
                    .collect();
                if maxima.len() != 1 {
                    problems.push(format!("t={t}: {} in-slice maxima", maxima.len()));
                    continue;
                }
                let (px, py) = gauss_peak(t);
                let err = ((maxima[0].position[2] - px).powi(2) + (maxima[0].position[1] - py).powi(2)).sqrt();
                worst = worst.max(err);
            }
        }
        Err(e) => problems.push(e.to_string()),
    }
    let mut spanning = 0;
    match track(&vol, &TrackConfig::new(FeatureKind::Critical, None, 4)) {
        Ok(out) => {
            let max_traj: Vec<_> = out
                .trajectories
                .iter()
                .filter(|t| t.records.iter().any(|r| r.kind == Some(CriticalKind::Maximum)))
                .collect();
            if max_traj.len() != 1 {
                problems.push(format!("{} maximum-type trajectories", max_traj.len()));
            } else if max_traj[0].time_span() == Some((0.0, (GAUSS_T - 1) as f64)) {
                spanning = 1;
            } else {
                problems.push(format!("trajectory spans {:?}", max_traj[0].time_span()));
            }
        }
        Err(e) => problems.push(e.to_string()),
    }
    // boundary fixture: values equal to the threshold are not features
    let dims = Dims::new(vec![2, 4, 4]).unwrap();
    let edge = Volume::from_fn(dims.clone(), |c| match c[2] {
        0 => 0.8,
        1 => 0.800_000_1,
        _ => 0.0,
    });
    let whole = &decompose(&dims, 1).unwrap()[0];
    let members = detect_level_set(&edge, whole, 0.8).map(|v| v.len()).unwrap_or(usize::MAX);
    if members != 8 {
        problems.push(format!("strict threshold kept {members} vertices, expected 8"));
    }
    verdict(
        6,
        "detector correctness",
        problems.is_empty() && worst < GAUSS_MAX_ERROR,
        format!(
            "{spanning} maximum trajectory spanning t=0..{}; worst in-slice position error {worst:.3} cells (limit {GAUSS_MAX_ERROR}); strict threshold kept {members}/8{}",
            GAUSS_T - 1,
            problems.first().map(|s| format!("; {s}")).unwrap_or_default()
        ),
    )
}

// Criterion 7: termination soundness under adversarial schedules.

fn criterion_termination() -> Verdict {
    let results: Vec<Result<bool, String>> = (0..FUZZ_GRAPHS)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(0xf022_0000 + i);
            let n = rng.gen_range(1..=FUZZ_MAX_N);
            let m = rng.gen_range(0..=2 * n);
            let elements: Vec<ElementId> = (0..n).map(ElementId).collect();
            let edges: Vec<(ElementId, ElementId)> = (0..m)
                .map(|_| (ElementId(rng.gen_range(0..n)), ElementId(rng.gen_range(0..n))))
                .collect();
            let ranks = [2usize, 3, 4, 5, 8][rng.gen_range(0..5)];
            let owners: Vec<u32> = (0..n).map(|_| rng.gen_range(0..ranks as u32)).collect();
            let part = GraphPartition::from_owners(ranks, elements.clone(), edges.clone(), |e| {
                Ok(RankId(owners[e.0 as usize]))
            })
            .map_err(|e| e.to_string())?;
            let run = run_audited(&part, &Schedule::adversarial(i))?;
            Ok(run.deep == 0 && run.labels == render_labels(&sequential_oracle(&elements, &edges)))
        })
        .collect();
    let violations = results.iter().filter(|r| r.is_err()).count();
    let wrong = results.iter().filter(|r| matches!(r, Ok(false))).count();
    let first = results.iter().find_map(|r| r.as_ref().err().cloned());
    verdict(
        7,
        "termination soundness",
        violations == 0 && wrong == 0,
        format!(
            "{FUZZ_GRAPHS} graphs (n <= {FUZZ_MAX_N}) under adversarial schedules: {violations} audit violations, {wrong} wrong labelings{}",
            first.map(|s| format!("; first: {s}")).unwrap_or_default()
        ),
    )
}

// Criterion 8: scale smoke test through the CLI.

fn criterion_scale(dir: &Path) -> Verdict {
    let graph = dir.join("scale.txt");
    let mut text = String::with_capacity(40 * SCALE_EDGES as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for e in 0..SCALE_ELEMENTS {
        writeln!(text, "{e}").unwrap();
    }
    for _ in 0..SCALE_EDGES {
        writeln!(
            text,
            "{} {}",
            rng.gen_range(0..SCALE_ELEMENTS),
            rng.gen_range(0..SCALE_ELEMENTS)
        )
        .unwrap();
    }
    std::fs::write(&graph, text).expect("write scale graph");
    let (labels, oracle, metrics) = (dir.join("scale.labels"), dir.join("scale.oracle"), dir.join("scale.json"));
    let ranks = SCALE_RANKS.to_string();
    let start = Instant::now();
    let run = ftccl(&[
        "ccl", "--graph", p(&graph), "--output", p(&labels), "--ranks", &ranks, "--mode", "async", "--seed", "1",
        "--metrics", p(&metrics),
    ]);
    let elapsed = start.elapsed();
    let oracle_run = ftccl(&["oracle", "--graph", p(&graph), "--output", p(&oracle)]);
    let same = run.is_ok() && oracle_run.is_ok() && read(&labels) == read(&oracle) && !read(&labels).is_empty();
    let m: serde_json::Value = serde_json::from_slice(&read(&metrics)).unwrap_or_default();
    let per_rank = m["engine"]["per_rank"].as_array().map_or(0, |v| v.len());
    let per_rank_ok = m["engine"]["per_rank"]
        .as_array()
        .is_some_and(|v| v.iter().all(|r| r["rounds"].is_u64() && r["msgs_sent"].is_u64()));
    let totals = &m["engine"]["totals"];
    verdict(
        8,
        "scale smoke test",
        same && elapsed <= SCALE_BUDGET && per_rank == SCALE_RANKS && per_rank_ok,
        format!(
            "{SCALE_ELEMENTS} elements, {SCALE_EDGES} edges, {SCALE_RANKS} ranks async: {:.1}s (budget {}s), matches oracle: {same}, \
             rounds {}, messages {}, components {}{}",
            elapsed.as_secs_f64(),
            SCALE_BUDGET.as_secs(),
            totals["rounds"],
            totals["msgs_sent"],
            m["n_components"],
            run.err().or(oracle_run.err()).map(|s| format!("; {s}")).unwrap_or_default()
        ),
    )
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let root: PathBuf = dir.path().to_path_buf();
    let mut verdicts = Vec::new();
    let mut report = |v: Verdict| {
        println!(
            "criterion {}: {:<36} {}  {}",
            v.id,
            v.name,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        verdicts.push(v.pass);
    };
    for v in criteria_oracle() {
        report(v);
    }
    let (v4, balance_problems) = criterion_pipeline(&root);
    report(v4);
    report(criterion_balance(balance_problems));
    report(criterion_detector());
    report(criterion_termination());
    report(criterion_scale(&root));
    let failed = verdicts.iter().filter(|&&p| !p).count();
    println!("acceptance: {} passed, {failed} failed", verdicts.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
