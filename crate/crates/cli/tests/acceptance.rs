//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on
//! any failure. Run with `cargo test -p hm-cli --test acceptance`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use healthmap::affinity::{compute_affinity, TaskRequirement};
use healthmap::fault_manager::{prune, report_detection, ClassifierConfig, DetectionReport};
use healthmap::footprint::{estimate, synthesize_map};
use healthmap::hierarchy::{ChildMapping, Scenario, Simulation};
use healthmap::{
    compiler, shm, Fault, FaultDetection, HealthMap, ModuleStatus, Persistence, ResourceMap,
    RmEntry, Severity,
};
use hm_oracles::gen::{self, Shape};
use hm_oracles::propagation::expected_rm;
use hm_oracles::{crc, layout};
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn hm(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hm"))
        .args(args)
        .output()
        .map_err(|e| format!("spawn hm: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "hm {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    check(took < limit, || format!("took {took:?}, limit {limit:?}"))
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Rows of the resource map example, top to bottom.
const TABLE_I: [(&str, &str, &str, &str); 9] = [
    ("CPU", "LOW", "TRANSIENT", "PROPAGATED FAULT"),
    ("CPU.C0", "LOW", "TRANSIENT", "PROPAGATED FAULT"),
    ("CPU.C0.FPU", "HIGH", "TRANSIENT", "OWN FAULT"),
    ("CPU.C1", "ZERO", "ZERO", "AVAILABLE"),
    ("CPU.C1.FPU", "ZERO", "ZERO", "AVAILABLE"),
    ("CPU.C2", "ZERO", "ZERO", "AVAILABLE"),
    ("CPU.C2.FPU", "ZERO", "ZERO", "AVAILABLE"),
    ("CPU.C3", "ZERO", "ZERO", "MAINTENANCE"),
    ("CPU.C3.FPU", "ZERO", "ZERO", "MAINTENANCE"),
];

fn table1_image(dir: &Path) -> Result<(PathBuf, PathBuf), String> {
    let shm_path = dir.join("t1.shm");
    let sym = dir.join("t1.sym");
    let xml = fixtures().join("table1.xml");
    hm(&["compile", s(&xml), "-o", s(&shm_path), "--sym", s(&sym)])?;
    hm(&["validate", s(&shm_path)])?;
    hm(&[
        "inject", s(&shm_path), "--detector", "301", "--sev", "HIGH", "--class", "1", "--t", "1000",
    ])?;
    Ok((shm_path, sym))
}

fn table_i() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let (shm_path, sym) = table1_image(dir.path())?;
    let text = hm(&["rm", s(&shm_path), "--sym", s(&sym), "--maintenance", "CPU.C3"])?;
    let rows: Vec<Vec<String>> = text
        .lines()
        .skip(2)
        .map(|l| l.split('|').map(|c| c.trim().to_string()).collect())
        .collect();
    check(rows.len() == 9, || format!("expected 9 rows, got {}", rows.len()))?;
    for (row, want) in rows.iter().zip(TABLE_I) {
        let want = [want.0, want.1, want.2, want.3];
        check(row.as_slice() == want, || format!("row {row:?} != {want:?}"))?;
    }
    let expected = format!(
        "Module name | Worst severity | Worst persistence | Status\n\
         ------------+----------------+-------------------+-----------------\n{}",
        TABLE_I
            .iter()
            .map(|r| format!("{:<11} | {:<14} | {:<17} | {}\n", r.0, r.1, r.2, r.3))
            .collect::<String>()
    );
    check(text == expected, || format!("rendering differs:\n{text}"))?;
    within(start, Duration::from_secs(1))?;
    Ok("9/9 rows exact".into())
}

fn footprint() -> Outcome {
    let start = Instant::now();
    let e = estimate(8).map_err(err)?;
    let got = (
        e.modules,
        e.diag_resources,
        e.dependencies,
        e.faults,
        e.detections,
        e.total_shm_bytes,
        e.rm_bytes,
    );
    check(got == (138, 414, 138, 276, 2760, 82418, 966), || {
        format!("estimate(8) = {got:?}")
    })?;
    let map = synthesize_map(8).map_err(err)?;
    let image = shm::serialize(&map).map_err(err)?;
    check(image.len() == 82418, || format!("serialized {} bytes", image.len()))?;
    let rm = ResourceMap::init(&map).encode();
    check(rm.len() == 966, || format!("RM {} bytes", rm.len()))?;
    let text = hm(&["estimate", "--cores", "8"])?;
    check(text.contains("Total 82418"), || format!("estimate output:\n{text}"))?;
    within(start, Duration::from_secs(1))?;
    Ok("M=138 R=414 D=138 F=276 FD=2760 total=82418 RM=966".into())
}

fn round_trip() -> Outcome {
    let start = Instant::now();
    let shape = Shape {
        max_modules: 50,
        ..Shape::default()
    };
    let trials = 1000;
    for seed in 0..trials {
        let map = gen::random_map(&mut gen::rng(0xA11CE ^ seed), &shape);
        let image = shm::serialize(&map).map_err(err)?;
        let back = shm::deserialize(&image).map_err(|e| format!("seed {seed}: {e}"))?;
        check(back == map, || format!("seed {seed}: decoded map differs"))?;
        let again = shm::serialize(&back).map_err(err)?;
        check(again == image, || format!("seed {seed}: re-serialization differs"))?;
    }
    within(start, Duration::from_secs(30))?;
    Ok(format!("{trials} maps, 0 failures"))
}

fn corruption() -> Outcome {
    let start = Instant::now();
    let map = synthesize_map(1).map_err(err)?;
    let image = shm::serialize(&map).map_err(err)?;
    let mut rng = gen::rng(0xC0FFEE);
    let trials = 10_000;
    let mut bad = image.clone();
    for _ in 0..trials {
        let at = rng.gen_range(0..image.len());
        let mask: u8 = rng.gen_range(1..=255);
        bad[at] ^= mask;
        if shm::validate(&bad).is_ok() {
            return Err(format!("corruption at byte {at} (xor {mask:#04x}) accepted"));
        }
        bad[at] = image[at];
    }
    within(start, Duration::from_secs(30))?;
    Ok(format!(
        "{trials} corruptions of a {}-byte image, 0 misses",
        image.len()
    ))
}

fn rows(rm: &ResourceMap) -> Vec<(u32, Severity, Persistence, ModuleStatus)> {
    rm.entries()
        .iter()
        .map(|e: &RmEntry| (e.module_id, e.worst_severity, e.worst_persistence, e.status))
        .collect()
}

fn incremental() -> Outcome {
    let start = Instant::now();
    let shape = Shape {
        max_modules: 12,
        dependency_chance: 0.35,
        ..Shape::default()
    };
    let trials = 500;
    for seed in 0..trials {
        let mut rng = gen::rng(0x5EED ^ seed);
        let mut map = gen::skeleton(&mut rng, &shape);
        let mut rm = ResourceMap::init(&map);
        let ids: Vec<u32> = map.modules().iter().map(|m| m.id).collect();
        for _ in 0..rng.gen_range(0..=30) {
            let id = *ids.choose(&mut rng).unwrap();
            let det = map.module(id).unwrap().diag_resources[0].id;
            let sev = gen::nonzero_severity(&mut rng);
            let pers = gen::nonzero_persistence(&mut rng);
            map.faults_mut(id).unwrap().push(Fault {
                severity: sev,
                persistence: pers,
                classification: rng.gen(),
                detections: vec![FaultDetection::new(det, rng.gen(), 0)],
            });
            rm.update_single_fault(&map, id, sev, pers, ModuleStatus::OwnFault)
                .map_err(err)?;
        }
        let full = ResourceMap::init(&map);
        check(rm == full, || format!("seed {seed}: incremental != full"))?;
        let oracle: Vec<_> = expected_rm(&map, &[])
            .into_iter()
            .map(|e| (e.module, e.severity, e.persistence, e.status))
            .collect();
        check(rows(&full) == oracle, || {
            format!("seed {seed}: full != path oracle")
        })?;
    }
    within(start, Duration::from_secs(60))?;
    Ok(format!("{trials} sequences, 0 mismatches"))
}

fn pruning() -> Outcome {
    let shape = Shape {
        max_modules: 20,
        max_faults_per_module: 5,
        max_detections_per_fault: 6,
        ..Shape::default()
    };
    let trials = 500;
    for seed in 0..trials {
        let mut map = gen::random_map(&mut gen::rng(0xBEEF ^ seed), &shape);
        let events = map.total_events();
        let rm = ResourceMap::init(&map);
        prune(&mut map);
        check(map.total_events() == events, || {
            format!("seed {seed}: events changed")
        })?;
        check(ResourceMap::init(&map) == rm, || format!("seed {seed}: RM changed"))?;
    }
    Ok(format!("{trials} maps, 0 failures"))
}

fn append_only() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("big.shm");
    let map = synthesize_map(8).map_err(err)?;
    let image = shm::serialize(&map).map_err(err)?;
    check(image.len() == 82418, || format!("fixture is {} bytes", image.len()))?;
    std::fs::write(&path, &image).map_err(err)?;
    let allowed = layout::patchable_bytes(&image);

    // Module 1's class-1 fault ends at t=20000 on detector 4, so this merges.
    hm(&[
        "inject", s(&path), "--detector", "4", "--sev", "MEDIUM", "--class", "1", "--t", "20500",
    ])?;
    // An unseen class appends a new fault with one detection.
    hm(&[
        "inject", s(&path), "--detector", "4", "--sev", "HIGH", "--class", "7", "--t", "30000000",
    ])?;
    let after = std::fs::read(&path).map_err(err)?;

    let grown = layout::FAULT + layout::DETECTION;
    check(after.len() == image.len() + grown, || {
        format!("grew to {} bytes", after.len())
    })?;
    let changed: Vec<usize> = (32..image.len()).filter(|&i| image[i] != after[i]).collect();
    let stray: Vec<usize> = changed
        .iter()
        .copied()
        .filter(|i| !allowed.contains(i))
        .collect();
    check(stray.is_empty(), || {
        format!("bytes outside patch classes changed: {stray:?}")
    })?;
    check(!changed.is_empty(), || "no patch applied".into())?;
    let c = layout::counts(&after);
    check((c.total, c.faults, c.detections) == (after.len(), 277, 2761), || {
        format!("header counts {c:?}")
    })?;
    let body = u32::from_le_bytes(after[24..28].try_into().unwrap());
    let head = u32::from_le_bytes(after[28..32].try_into().unwrap());
    check(
        body == crc::crc32(&after[32..]) && head == crc::crc32(&after[..28]),
        || "stale CRC".into(),
    )?;
    let decoded = shm::deserialize(&after).map_err(err)?;
    let merged = &decoded.module(1).unwrap().faults[1];
    check(merged.detections.last().unwrap().counter == 2, || {
        "merge did not bump the counter".into()
    })?;
    Ok(format!(
        "{} patched bytes in [32, 82418), {grown} bytes appended",
        changed.len()
    ))
}

fn hierarchy() -> Outcome {
    let sim_dir = fixtures().join("sim");
    let scenario_path = sim_dir.join("scenario.txt");
    let text = std::fs::read_to_string(&scenario_path).map_err(err)?;
    let scenario = Scenario::parse(&text).map_err(err)?;
    let period = scenario.nodes.iter().map(|n| n.period).max().unwrap();
    let (out, _) = Simulation::load(&scenario, &sim_dir)
        .and_then(Simulation::run)
        .map_err(err)?;
    check(out.duration == period, || {
        "scenario should span one report period".into()
    })?;

    let leaf_xml = std::fs::read_to_string(sim_dir.join("leaf.xml")).map_err(err)?;
    let mut leaf = compiler::compile_str(&leaf_xml).map_err(err)?.map;
    let fpu = leaf.diag_owner(30).unwrap();
    leaf.add_fault_with_detection(fpu, Severity::High, Persistence::Transient, 1, 30, 100, 0)
        .map_err(err)?;
    let child = expected_rm(&leaf, &[])
        .into_iter()
        .find(|e| e.module == 1)
        .unwrap();

    let root_xml = std::fs::read_to_string(sim_dir.join("root.xml")).map_err(err)?;
    let mut root: HealthMap = compiler::compile_str(&root_xml).map_err(err)?.map;
    let map_text = std::fs::read_to_string(sim_dir.join("root.map")).map_err(err)?;
    let mut mapping = ChildMapping::parse(&map_text).map_err(err)?;
    mapping.install(&mut root).map_err(err)?;
    let target = mapping.target(2, 1).unwrap();
    let downlink = mapping.downlink(2).unwrap();
    root.add_fault_with_detection(
        target,
        child.severity,
        child.persistence,
        0xFF,
        downlink,
        period,
        1,
    )
    .map_err(err)?;
    let want: Vec<_> = expected_rm(&root, &[])
        .into_iter()
        .map(|e| (e.module, e.severity, e.persistence, e.status))
        .collect();
    let got: Vec<_> = out.final_rms[&1]
        .iter()
        .map(|e| (e.module_id, e.worst_severity, e.worst_persistence, e.status))
        .collect();
    check(got == want, || format!("root RM {got:?} != oracle {want:?}"))?;
    let mapped = got.iter().find(|r| r.0 == target).unwrap();
    check(mapped.1 == child.severity, || {
        "mapped module lost the child's severity".into()
    })?;

    let dir = tempfile::tempdir().map_err(err)?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    hm(&["simulate", s(&scenario_path), "--out", s(&a)])?;
    hm(&["simulate", s(&scenario_path), "--out", s(&b)])?;
    for f in ["messages.log", "timeline.txt", "final.txt"] {
        let x = std::fs::read(a.join(f)).map_err(err)?;
        let y = std::fs::read(b.join(f)).map_err(err)?;
        check(x == y && !x.is_empty(), || format!("{f} differs between runs"))?;
    }
    Ok(format!(
        "root module {target} = {}/{} after {period} us; logs byte-identical",
        child.severity, child.persistence
    ))
}

fn affinity() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let (shm_path, sym) = table1_image(dir.path())?;
    let tasks = dir.path().join("tasks");
    std::fs::write(&tasks, "task fpu_task needs=FPU maxSev=ZERO maxPers=ZERO\n").map_err(err)?;
    let text = hm(&[
        "affinity",
        s(&shm_path),
        "--tasks",
        s(&tasks),
        "--sym",
        s(&sym),
        "--maintenance",
        "CPU.C3",
    ])?;
    check(text == "fpu_task 0x6\n", || format!("affinity output {text:?}"))?;

    let xml = std::fs::read_to_string(fixtures().join("table1.xml")).map_err(err)?;
    let compiled = compiler::compile_str(&xml).map_err(err)?;
    let ids: Vec<u32> = compiled.map.modules().iter().map(|m| m.id).collect();
    let detectors: Vec<u32> = compiled
        .map
        .modules()
        .iter()
        .flat_map(|m| m.diag_resources.iter().map(|d| d.id))
        .collect();
    let trials = 500;
    for seed in 0..trials {
        let mut rng = gen::rng(0xAFF ^ seed);
        let mut map = compiled.map.clone();
        let mut rm = ResourceMap::init(&map);
        for t in 0..rng.gen_range(0..6u64) {
            let r = DetectionReport {
                detector: *detectors.choose(&mut rng).unwrap(),
                severity: gen::nonzero_severity(&mut rng),
                classification: rng.gen_range(0..3),
                timestamp: t * 2_000_000,
                payload: 0,
            };
            report_detection(&mut map, &mut rm, &r, &ClassifierConfig::default()).map_err(err)?;
        }
        if rng.gen_bool(0.3) {
            rm.set_maintenance(&map, *ids.choose(&mut rng).unwrap(), true)
                .map_err(err)?;
        }
        let mut tight = TaskRequirement::new("tight");
        if rng.gen() {
            tight.needs.push("FPU".into());
        }
        tight.max_severity = gen::severity(&mut rng);
        tight.max_persistence = Persistence::ALL[rng.gen_range(0..4)];
        let mut loose = tight.clone();
        loose.name = "loose".into();
        loose.max_severity = loose.max_severity.max(gen::severity(&mut rng));
        loose.max_persistence = loose
            .max_persistence
            .max(Persistence::ALL[rng.gen_range(0..4)]);
        let masks = compute_affinity(&rm, &compiled.symbols, &[tight, loose]).map_err(err)?;
        check(masks[0].is_subset_of(&masks[1]), || {
            format!("seed {seed}: tighter mask not a subset")
        })?;
    }
    Ok(format!("mask 0x6; monotone over {trials} random RMs"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("Table I reproduction", "exact string match, < 1 s", table_i),
        ("Footprint reproduction", "exact integers, < 1 s", footprint),
        ("Serialization round-trip", "0 failures in 1000 maps, < 30 s", round_trip),
        ("Corruption detection", "0 misses in 10^4 corruptions, < 30 s", corruption),
        (
            "Incremental/full/oracle equivalence",
            "0 mismatches in 500 sequences, < 60 s",
            incremental,
        ),
        ("Pruning conservation", "0 failures in 500 maps", pruning),
        ("Append-only contract", "byte diff limited to patch classes", append_only),
        ("Hierarchy end-to-end", "exact RM match, byte-identical logs", hierarchy),
        ("Affinity correctness", "exact mask, 0 violations in 500 trials", affinity),
    ];
    let mut failed = 0;
    for (i, (name, tolerance, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = run();
        let ms = start.elapsed().as_millis();
        match result {
            Ok(detail) => println!("PASS {}. {name} [{tolerance}] ({ms} ms): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {}. {name} [{tolerance}] ({ms} ms): {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
