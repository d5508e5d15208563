use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use healthmap::affinity::{compute_affinity, parse_tasks};
use healthmap::fault_manager::{self, ClassifierConfig, DetectionReport};
use healthmap::hierarchy::{Scenario, Simulation};
use healthmap::shm::{self, AppendBatch};
use healthmap::{compiler, footprint, HealthMap, ResourceMap, Severity, SymbolTable};

pub fn parse_id(text: &str) -> Result<u32, String> {
    match text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")) {
        Some(hex) => u32::from_str_radix(hex, 16),
        None => text.parse(),
    }
    .map_err(|e| e.to_string())
}

pub fn parse_hex(text: &str) -> Result<u32, String> {
    let hex = text.trim_start_matches("0x").trim_start_matches("0X");
    u32::from_str_radix(hex, 16).map_err(|e| e.to_string())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_map(path: &Path) -> Result<(Vec<u8>, HealthMap)> {
    let image = read(path)?;
    let map = shm::deserialize(&image).with_context(|| format!("decoding {}", path.display()))?;
    Ok((image, map))
}

/// The explicit sidecar, else the image path with a `.sym` extension if present.
fn load_symbols(shm: &Path, explicit: Option<&Path>) -> Result<Option<SymbolTable>> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let guess = shm.with_extension("sym");
            if !guess.exists() {
                return Ok(None);
            }
            guess
        }
    };
    let table = SymbolTable::parse(&read_text(&path)?)
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(Some(table))
}

fn resource_map(map: &HealthMap, symbols: Option<&SymbolTable>, maintenance: &[String]) -> Result<ResourceMap> {
    let mut rm = ResourceMap::init(map);
    for m in maintenance {
        let id = match symbols.and_then(|s| s.module_named(m)) {
            Some(id) => id,
            None => parse_id(m).map_err(|_| anyhow!("unknown module {m:?}"))?,
        };
        rm.set_maintenance(map, id, true)?;
    }
    Ok(rm)
}

pub fn compile(xml: &Path, output: &Path, sym: Option<&Path>) -> Result<String> {
    let text = read_text(xml)?;
    let compiled = compiler::compile_str(&text).with_context(|| format!("compiling {}", xml.display()))?;
    write(output, &compiled.image)?;
    if let Some(sym) = sym {
        write(sym, compiled.symbols.render().as_bytes())?;
    }
    let c = compiled.map.counts();
    Ok(format!(
        "wrote {} ({} bytes, {} modules, {} instruments, {} dependencies)\n",
        output.display(),
        compiled.image.len(),
        c.modules,
        c.diag_resources,
        c.dependencies
    ))
}

pub fn validate(path: &Path) -> Result<String> {
    let image = read(path)?;
    let h = shm::validate(&image).with_context(|| format!("{} is invalid", path.display()))?;
    Ok(format!(
        "ok: {} bytes, {} modules, {} instruments, {} dependencies, {} faults, {} detections\n",
        h.total_length, h.modules, h.diag_resources, h.dependencies, h.faults, h.detections
    ))
}

pub fn dump(path: &Path, sym: Option<&Path>) -> Result<String> {
    let (image, map) = load_map(path)?;
    let symbols = load_symbols(path, sym)?;
    let h = shm::ShmHeader::parse(&image)?;
    let mut out = String::new();
    writeln!(
        out,
        "image {} bytes, version {}, {} modules, {} instruments, {} dependencies, {} faults, {} detections",
        h.total_length, h.version, h.modules, h.diag_resources, h.dependencies, h.faults, h.detections
    )?;
    for m in map.modules() {
        let name = symbols.as_ref().and_then(|s| s.name(m.id)).unwrap_or("-");
        let parent = m.parent.map_or("-".to_string(), |p| p.to_string());
        writeln!(out, "module {} {} parent={} criticality={}", m.id, name, parent, m.criticality)?;
        for d in &m.diag_resources {
            writeln!(out, "  instrument {} kind={}", d.id, d.kind)?;
        }
        for d in &m.dependencies {
            writeln!(out, "  dependency -> {} severity={}", d.dependent, d.severity)?;
        }
        for f in &m.faults {
            writeln!(
                out,
                "  fault class={} severity={} persistence={} events={}",
                f.classification,
                f.severity,
                f.persistence,
                f.event_count()
            )?;
            for d in &f.detections {
                writeln!(
                    out,
                    "    detection detector={} t={} counter={} payload={:#010x} flags={:#04x}",
                    d.detector, d.timestamp, d.counter, d.payload, d.flags
                )?;
            }
        }
    }
    Ok(out)
}

pub fn inject(path: &Path, detector: u32, severity: Severity, class: u8, time: u64, payload: u32) -> Result<String> {
    if severity == Severity::Zero {
        bail!("severity must be above ZERO");
    }
    let (image, old) = load_map(path)?;
    let mut map = old.clone();
    let mut rm = ResourceMap::init(&map);
    let report = DetectionReport {
        detector,
        severity,
        classification: class,
        timestamp: time,
        payload,
    };
    let outcome = fault_manager::report_detection(&mut map, &mut rm, &report, &ClassifierConfig::default())?;
    let batch = AppendBatch::between(&old, &map)?;
    let updated = shm::append_fault_data(&image, &batch)?;
    write(path, &updated)?;
    let action = if outcome.created {
        "new fault"
    } else if outcome.merged {
        "merged into last detection"
    } else {
        "new detection"
    };
    Ok(format!(
        "module {}: {} ({} {}), image {} -> {} bytes\n",
        outcome.fault.module,
        action,
        outcome.severity,
        outcome.persistence,
        image.len(),
        updated.len()
    ))
}

pub fn rm(path: &Path, sym: Option<&Path>, maintenance: &[String]) -> Result<String> {
    let (_, map) = load_map(path)?;
    let symbols = load_symbols(path, sym)?;
    let rm = resource_map(&map, symbols.as_ref(), maintenance)?;
    Ok(match &symbols {
        Some(s) => rm.render_table(s)?,
        None => rm.render_table_by_id(),
    })
}

pub fn affinity(path: &Path, tasks: &Path, sym: Option<&Path>, maintenance: &[String]) -> Result<String> {
    let (_, map) = load_map(path)?;
    let symbols = load_symbols(path, sym)?
        .ok_or_else(|| anyhow!("affinity needs a symbol sidecar with core ids (--sym)"))?;
    let rm = resource_map(&map, Some(&symbols), maintenance)?;
    let tasks = parse_tasks(&read_text(tasks)?)?;
    let mut out = String::new();
    for mask in compute_affinity(&rm, &symbols, &tasks)? {
        writeln!(out, "{mask}")?;
    }
    Ok(out)
}

pub fn prune(path: &Path) -> Result<String> {
    let (image, mut map) = load_map(path)?;
    let removed = fault_manager::prune(&mut map);
    let rewritten = shm::serialize(&map)?;
    write(path, &rewritten)?;
    Ok(format!(
        "removed {} records, image {} -> {} bytes\n",
        removed,
        image.len(),
        rewritten.len()
    ))
}

pub fn estimate(cores: u32) -> Result<String> {
    Ok(footprint::estimate(cores)?.render())
}

pub fn simulate(path: &Path, out_dir: Option<&Path>) -> Result<String> {
    let scenario = Scenario::parse(&read_text(path)?)?;
    let base = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    let sim = Simulation::load(&scenario, &base)?;
    let (output, nodes) = sim.run()?;

    let mut finals = String::new();
    for (id, node) in &nodes {
        writeln!(finals, "node {id} at {}", output.duration)?;
        finals.push_str(&node.rm.render_table(&node.symbols).unwrap_or_else(|_| node.rm.render_table_by_id()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write(&dir.join("messages.log"), output.render_messages().as_bytes())?;
        write(&dir.join("timeline.txt"), output.render_timeline().as_bytes())?;
        write(&dir.join("final.txt"), finals.as_bytes())?;
    }
    Ok(finals)
}
