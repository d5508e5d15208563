//! `hm`: compile, inspect and operate on Health Map images.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use healthmap::Severity;

#[derive(Parser)]
#[command(name = "hm", version, about = "Health Map / Resource Map toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile an XML description into an image and name sidecar.
    Compile {
        xml: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        sym: Option<PathBuf>,
    },
    /// Check header, CRCs and structure of an image.
    Validate { shm: PathBuf },
    /// Print every record of an image.
    Dump {
        shm: PathBuf,
        #[arg(long)]
        sym: Option<PathBuf>,
    },
    /// Record one detection and append it to the image.
    Inject {
        shm: PathBuf,
        #[arg(long, value_parser = commands::parse_id)]
        detector: u32,
        #[arg(long)]
        sev: Severity,
        #[arg(long)]
        class: u8,
        #[arg(long = "t")]
        time: u64,
        #[arg(long, value_parser = commands::parse_hex)]
        payload: Option<u32>,
    },
    /// Print the Resource Map.
    Rm {
        shm: PathBuf,
        #[arg(long)]
        sym: Option<PathBuf>,
        /// Module (name or id) under maintenance; repeatable.
        #[arg(long)]
        maintenance: Vec<String>,
    },
    /// Print a core affinity mask per task.
    Affinity {
        shm: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        sym: Option<PathBuf>,
        #[arg(long)]
        maintenance: Vec<String>,
    },
    /// Merge redundant faults and detections, rewriting the image.
    Prune { shm: PathBuf },
    /// Estimate memory footprint for an MPSoC.
    Estimate {
        #[arg(long)]
        cores: u32,
    },
    /// Run a hierarchy scenario.
    Simulate {
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Compile { xml, output, sym } => commands::compile(&xml, &output, sym.as_deref()),
        Command::Validate { shm } => commands::validate(&shm),
        Command::Dump { shm, sym } => commands::dump(&shm, sym.as_deref()),
        Command::Inject {
            shm,
            detector,
            sev,
            class,
            time,
            payload,
        } => commands::inject(&shm, detector, sev, class, time, payload.unwrap_or(0)),
        Command::Rm {
            shm,
            sym,
            maintenance,
        } => commands::rm(&shm, sym.as_deref(), &maintenance),
        Command::Affinity {
            shm,
            tasks,
            sym,
            maintenance,
        } => commands::affinity(&shm, &tasks, sym.as_deref(), &maintenance),
        Command::Prune { shm } => commands::prune(&shm),
        Command::Estimate { cores } => commands::estimate(cores),
        Command::Simulate { scenario, out } => commands::simulate(&scenario, out.as_deref()),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
