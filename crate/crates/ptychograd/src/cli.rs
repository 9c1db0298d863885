//! Command-line surface: `simulate`, `reconstruct`, `verify`, `render`, and
//! `metrics`. Outputs are files and stdout tables; every run writes a
//! manifest echoing its parameters.
//!
//! Exit codes: 0 success, 1 validation, 2 verification failure, 3 I/O.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::baseline::{hve_decompose, hve_reconstruct, memory_report_gd, memory_report_hve};
use crate::datastore::{
    read_dataset, read_volume, read_convergence_csv, seam_score, synthesize_dataset, write_dataset,
    write_convergence_csv, write_pgm, write_volume, StoreError, SynthOptions,
};
use crate::geometry::{decompose_mesh, mesh_interiors, MeshSpec, TileSpec};
use crate::gradients::StepSize;
use crate::optics::NoiseModel;
use crate::runtime::{appp_reconstruct, PassFrequency, ReconConfig, RunResult, TimingBreakdown};
use crate::verify::{
    check_accumulation, check_gradient_fd, check_neighbor_insufficiency,
    check_runtime_vs_reference,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_VERIFICATION: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Parser)]
#[command(
    name = "ptychograd",
    about = "Tiled ptychographic reconstruction with gradient accumulation passes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its ground-truth volume.
    Simulate(SimulateArgs),
    /// Reconstruct a dataset on a worker mesh.
    Reconstruct(ReconstructArgs),
    /// Run a verification suite.
    Verify(VerifyArgs),
    /// Render one slice of a volume file as an 8-bit PGM image.
    Render(RenderArgs),
    /// Seam scores, convergence comparisons, and analytic memory counts.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Scan grid, e.g. 7x7.
    #[arg(long, default_value = "7x7")]
    scan: String,
    #[arg(long, default_value_t = 12)]
    step: i64,
    #[arg(long, default_value_t = 24)]
    radius: i64,
    #[arg(long, default_value_t = 64)]
    detector: usize,
    #[arg(long, default_value_t = 2)]
    slices: usize,
    /// Volume lateral extent, e.g. 144x144.
    #[arg(long, default_value = "144x144")]
    volume: String,
    /// Detector noise: none or poisson.
    #[arg(long, default_value = "none")]
    noise: String,
    /// Poisson dose (counts scale) when --noise poisson.
    #[arg(long, default_value_t = 1e4)]
    dose: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    spacing: usize,
    #[arg(long, default_value_t = 0.5)]
    amplitude: f64,
    #[arg(long, default_value_t = 0.12)]
    aperture: f64,
    #[arg(long, default_value_t = 1)]
    edge_order: u32,
    #[arg(long, default_value_t = 60.0)]
    defocus: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 2.0)]
    propagation: f64,
    #[arg(long, default_value_t = 10.0)]
    pitch_y: f64,
    #[arg(long, default_value_t = 10.0)]
    pitch_x: f64,
    #[arg(long, default_value_t = 125.0)]
    pitch_z: f64,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Dataset file written by `simulate`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// single, grad-decomp, or halo-exchange.
    #[arg(long, default_value = "grad-decomp")]
    mode: String,
    /// Worker mesh, e.g. 3x3.
    #[arg(long, default_value = "3x3")]
    mesh: String,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// per-probe, once, twice, or K-per-iter:N.
    #[arg(long, default_value = "once")]
    pass_freq: String,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Halo width in voxels.
    #[arg(long, default_value_t = 24)]
    halo: i64,
    /// Extra probe rows per tile (halo-exchange mode).
    #[arg(long, default_value_t = 2)]
    extra_rows: usize,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    deterministic: std::primitive::bool,
    /// Optional relative cost-decrease stop threshold.
    #[arg(long)]
    converge_tol: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct VerifyArgs {
    /// gradient-fd, accumulation, neighbor-insufficiency, runtime-vs-reference, or all.
    #[arg(long, default_value = "all")]
    check: String,
    #[arg(long, default_value_t = 20)]
    seeds: usize,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    volume: PathBuf,
    #[arg(long, default_value_t = 0)]
    slice: i64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    /// Seam score of a volume file against a mesh's tile borders.
    #[arg(long)]
    seam: Option<PathBuf>,
    /// Worker mesh, e.g. 3x3 (seam and memory modes).
    #[arg(long)]
    mesh: Option<String>,
    /// Convergence CSVs to compare side by side.
    #[arg(long, num_args = 1.., value_name = "LOG")]
    compare_convergence: Option<Vec<PathBuf>>,
    /// Analytic per-worker memory counts (needs --data).
    #[arg(long, action = clap::ArgAction::SetTrue)]
    memory: std::primitive::bool,
    /// Dataset file providing scan/volume shapes.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 24)]
    halo: i64,
    #[arg(long, default_value_t = 2)]
    extra_rows: usize,
}

enum CliError {
    Validation(String),
    Io(String),
    Verification,
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Io(_) => EXIT_IO,
            CliError::Verification => EXIT_VERIFICATION,
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<crate::runtime::RuntimeError> for CliError {
    fn from(e: crate::runtime::RuntimeError) -> Self {
        CliError::Validation(e.to_string())
    }
}

fn parse_pair(text: &str, what: &str) -> Result<(usize, usize), CliError> {
    let parts: Vec<&str> = text.split('x').collect();
    if parts.len() != 2 {
        return Err(CliError::Validation(format!(
            "{what} must look like RxC, got {text}"
        )));
    }
    let a = parts[0]
        .parse()
        .map_err(|_| CliError::Validation(format!("bad {what}: {text}")))?;
    let b = parts[1]
        .parse()
        .map_err(|_| CliError::Validation(format!("bad {what}: {text}")))?;
    if a == 0 || b == 0 {
        return Err(CliError::Validation(format!("{what} must be positive")));
    }
    Ok((a, b))
}

fn parse_pass_freq(text: &str) -> Result<PassFrequency, CliError> {
    match text {
        "per-probe" => Ok(PassFrequency::PerProbe),
        "once" => Ok(PassFrequency::OncePerIteration),
        "twice" => Ok(PassFrequency::TwicePerIteration),
        _ => {
            if let Some(n) = text.strip_prefix("K-per-iter:") {
                let k: usize = n.parse().map_err(|_| {
                    CliError::Validation(format!("bad pass frequency count: {text}"))
                })?;
                if k == 0 {
                    return Err(CliError::Validation("pass count must be >= 1".into()));
                }
                Ok(PassFrequency::TimesPerIteration(k))
            } else {
                Err(CliError::Validation(format!(
                    "unknown pass frequency {text}; use per-probe, once, twice, or K-per-iter:N"
                )))
            }
        }
    }
}

fn write_manifest(path: &Path, entries: BTreeMap<String, serde_json::Value>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(&entries)
        .map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}

fn write_timing_csv(path: &Path, timing: &[TimingBreakdown]) -> Result<(), CliError> {
    let mut text = String::from("worker,compute,wait,comm,messages\n");
    for (i, t) in timing.iter().enumerate() {
        text.push_str(&format!(
            "{},{:e},{:e},{:e},{}\n",
            i, t.compute_units, t.wait_units, t.comm_units, t.messages_sent
        ));
    }
    std::fs::write(path, text).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}

fn write_memory_csv(
    path: &Path,
    rows: &[crate::baseline::MemoryRow],
) -> Result<(), CliError> {
    let mut text = String::from("worker,voxels,measurements\n");
    for r in rows {
        text.push_str(&format!("{},{},{}\n", r.worker, r.voxels, r.measurements));
    }
    std::fs::write(path, text).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let (rows, cols) = parse_pair(&args.scan, "--scan")?;
    let (h, w) = parse_pair(&args.volume, "--volume")?;
    let noise = match args.noise.as_str() {
        "none" => NoiseModel::None,
        "poisson" => NoiseModel::Poisson { dose: args.dose },
        other => {
            return Err(CliError::Validation(format!(
                "unknown noise model {other}; use none or poisson"
            )))
        }
    };
    let opts = SynthOptions {
        grid_rows: rows,
        grid_cols: cols,
        step: args.step,
        radius: args.radius,
        detector: args.detector,
        slices: args.slices,
        height: h as i64,
        width: w as i64,
        origin: None,
        noise,
        seed: args.seed,
        atom_spacing: args.spacing,
        amplitude: args.amplitude,
        pitch: (args.pitch_y, args.pitch_x, args.pitch_z),
        aperture: args.aperture,
        aperture_edge_order: args.edge_order,
        defocus: args.defocus,
        sigma: args.sigma,
        propagation: args.propagation,
    };
    let (dataset, phantom) =
        synthesize_dataset(&opts).map_err(|e| CliError::Validation(e.to_string()))?;
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::Io(e.to_string()))?;
    write_dataset(
        &args.out.join("dataset.ptyg"),
        &dataset.header,
        &dataset.measurements,
    )?;
    write_volume(&args.out.join("ground_truth.ptyv"), &phantom)?;

    let mut manifest = BTreeMap::new();
    for (k, v) in [
        ("scan", args.scan.clone()),
        ("volume", args.volume.clone()),
        ("noise", args.noise.clone()),
    ] {
        manifest.insert(k.to_string(), serde_json::Value::String(v));
    }
    for (k, v) in [
        ("step", args.step as f64),
        ("radius", args.radius as f64),
        ("detector", args.detector as f64),
        ("slices", args.slices as f64),
        ("dose", args.dose),
        ("seed", args.seed as f64),
        ("spacing", args.spacing as f64),
        ("amplitude", args.amplitude),
        ("aperture", args.aperture),
        ("edge_order", args.edge_order as f64),
        ("defocus", args.defocus),
        ("sigma", args.sigma),
        ("propagation", args.propagation),
        ("pitch_y", args.pitch_y),
        ("pitch_x", args.pitch_x),
        ("pitch_z", args.pitch_z),
    ] {
        manifest.insert(
            k.to_string(),
            serde_json::Value::Number(serde_json::Number::from_f64(v).unwrap()),
        );
    }
    write_manifest(&args.out.join("manifest.json"), manifest)?;
    println!(
        "wrote {} probes ({} detector, {} slices) under {}",
        dataset.header.probe_count,
        args.detector,
        args.slices,
        args.out.display()
    );
    Ok(())
}

fn reconstruct_outputs(
    out: &Path,
    result: &RunResult,
    memory: &[crate::baseline::MemoryRow],
) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(e.to_string()))?;
    write_volume(&out.join("volume.ptyv"), &result.volume)?;
    write_convergence_csv(&out.join("convergence.csv"), &result.convergence)?;
    write_timing_csv(&out.join("timing.csv"), &result.timing)?;
    write_memory_csv(&out.join("memory.csv"), memory)?;
    Ok(())
}

fn cmd_reconstruct(args: &ReconstructArgs) -> Result<(), CliError> {
    let dataset = read_dataset(&args.data)?;
    let (rows, cols) = parse_pair(&args.mesh, "--mesh")?;
    let mut mesh = MeshSpec::new(rows, cols);
    match args.mode.as_str() {
        "single" => {
            if mesh.worker_count() > 1 {
                eprintln!("warning: --mode single ignores --mesh {}", args.mesh);
            }
            mesh = MeshSpec::new(1, 1);
        }
        "grad-decomp" | "halo-exchange" => {}
        other => {
            return Err(CliError::Validation(format!(
                "unknown mode {other}; use single, grad-decomp, or halo-exchange"
            )))
        }
    }
    let alpha = StepSize::new(args.alpha)
        .ok_or_else(|| CliError::Validation(format!("bad alpha {}", args.alpha)))?;
    let cfg = ReconConfig {
        iterations: args.iters,
        pass_freq: parse_pass_freq(&args.pass_freq)?,
        alpha,
        seed: args.seed,
        deterministic: args.deterministic,
        halo_width: args.halo,
        converge_tol: args.converge_tol,
        ..ReconConfig::default()
    };

    let (result, memory) = match args.mode.as_str() {
        "halo-exchange" => hve_reconstruct(&dataset, mesh, &cfg, args.extra_rows)?,
        _ => {
            let result = appp_reconstruct(&dataset, mesh, &cfg)?;
            let memory =
                memory_report_gd(&result.tiles, dataset.header.slices as usize, dataset.header.detector as usize);
            (result, memory)
        }
    };
    for warning in &result.warnings {
        eprintln!("warning: {warning}");
    }
    reconstruct_outputs(&args.out, &result, &memory)?;

    let mut manifest = BTreeMap::new();
    for (k, v) in [
        ("data", args.data.display().to_string()),
        ("mode", args.mode.clone()),
        ("mesh", format!("{}x{}", mesh.rows, mesh.cols)),
        ("pass_freq", args.pass_freq.clone()),
        ("deterministic", args.deterministic.to_string()),
    ] {
        manifest.insert(k.to_string(), serde_json::Value::String(v));
    }
    for (k, v) in [
        ("iters", args.iters as f64),
        ("alpha", args.alpha),
        ("halo", args.halo as f64),
        ("extra_rows", args.extra_rows as f64),
        ("seed", args.seed as f64),
    ] {
        manifest.insert(
            k.to_string(),
            serde_json::Value::Number(serde_json::Number::from_f64(v).unwrap()),
        );
    }
    write_manifest(&args.out.join("manifest.json"), manifest)?;

    if let Some(last) = result.convergence.last() {
        println!(
            "final cost {:.6e} after {} iterations ({} workers)",
            last.cost,
            result.convergence.len(),
            mesh.worker_count()
        );
    }
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<(), CliError> {
    let reports = match args.check.as_str() {
        "gradient-fd" => vec![check_gradient_fd(args.seeds)],
        "accumulation" => vec![check_accumulation()],
        "neighbor-insufficiency" => vec![check_neighbor_insufficiency()],
        "runtime-vs-reference" => vec![check_runtime_vs_reference()],
        "all" => vec![
            check_gradient_fd(args.seeds),
            check_accumulation(),
            check_neighbor_insufficiency(),
            check_runtime_vs_reference(),
        ],
        other => {
            return Err(CliError::Validation(format!(
                "unknown check {other}; use gradient-fd, accumulation, neighbor-insufficiency, runtime-vs-reference, or all"
            )))
        }
    };
    let mut all_passed = true;
    for r in &reports {
        for line in &r.lines {
            println!("[{}] {}", r.name, line);
        }
        println!("[{}] {}", r.name, if r.passed { "PASS" } else { "FAIL" });
        all_passed &= r.passed;
    }
    if all_passed {
        Ok(())
    } else {
        Err(CliError::Verification)
    }
}

fn cmd_render(args: &RenderArgs) -> Result<(), CliError> {
    let volume = read_volume(&args.volume)?;
    if args.slice < 0 || args.slice as usize >= volume.slices() {
        return Err(CliError::Validation(format!(
            "slice {} out of range 0..{}",
            args.slice,
            volume.slices()
        )));
    }
    write_pgm(&args.out, &volume, args.slice as usize)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn seam_tiles(extent: (i64, i64), mesh: MeshSpec) -> Vec<TileSpec> {
    mesh_interiors(extent, mesh)
        .into_iter()
        .enumerate()
        .map(|(i, interior)| TileSpec {
            mesh_r: i / mesh.cols,
            mesh_c: i % mesh.cols,
            interior,
            extended: interior,
            halo_width: 0,
            probe_indices: Vec::new(),
        })
        .collect()
}

fn cmd_metrics(args: &MetricsArgs) -> Result<(), CliError> {
    if let Some(volume_path) = &args.seam {
        let mesh_text = args
            .mesh
            .as_ref()
            .ok_or_else(|| CliError::Validation("--seam needs --mesh".into()))?;
        let (rows, cols) = parse_pair(mesh_text, "--mesh")?;
        let volume = read_volume(volume_path)?;
        let tiles = seam_tiles(volume.extent(), MeshSpec::new(rows, cols));
        let score = seam_score(&volume, &tiles);
        println!("volume,mesh,seam_score");
        println!("{},{mesh_text},{:e}", volume_path.display(), score.value);
        return Ok(());
    }
    if let Some(logs) = &args.compare_convergence {
        let mut curves = Vec::new();
        for path in logs {
            curves.push(read_convergence_csv(path)?);
        }
        let iters = curves.iter().map(|c| c.len()).max().unwrap_or(0);
        let mut header = String::from("iteration");
        for path in logs {
            header.push(',');
            header.push_str(&path.display().to_string());
        }
        println!("{header}");
        for i in 0..iters {
            let mut row = format!("{i}");
            for c in &curves {
                row.push(',');
                match c.get(i) {
                    Some(r) => row.push_str(&format!("{:e}", r.cost)),
                    None => row.push_str("NA"),
                }
            }
            println!("{row}");
        }
        return Ok(());
    }
    if args.memory {
        let data = args
            .data
            .as_ref()
            .ok_or_else(|| CliError::Validation("--memory needs --data".into()))?;
        let mesh_text = args
            .mesh
            .as_ref()
            .ok_or_else(|| CliError::Validation("--memory needs --mesh".into()))?;
        let (rows, cols) = parse_pair(mesh_text, "--mesh")?;
        let mesh = MeshSpec::new(rows, cols);
        let dataset = read_dataset(data)?;
        let scan = dataset
            .header
            .scan()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        let extent = dataset.header.volume_extent();
        let slices = dataset.header.slices as usize;
        let detector = dataset.header.detector as usize;

        println!("worker,gd_voxels,gd_measurements,hve_voxels,hve_measurements");
        let gd = decompose_mesh(extent, mesh, args.halo, &scan)
            .map(|tiles| memory_report_gd(&tiles, slices, detector));
        let hve = hve_decompose(extent, mesh, &scan, args.extra_rows)
            .map(|tiles| memory_report_hve(&tiles, slices, detector));
        match (&gd, &hve) {
            (Ok(g), Ok(h)) => {
                for (a, b) in g.iter().zip(h.iter()) {
                    println!(
                        "{},{},{},{},{}",
                        a.worker, a.voxels, a.measurements, b.voxels, b.measurements
                    );
                }
            }
            (Ok(g), Err(e)) => {
                eprintln!("halo-exchange decomposition unavailable: {e}");
                for a in g {
                    println!("{},{},{},NA,NA", a.worker, a.voxels, a.measurements);
                }
            }
            (Err(e), _) => {
                return Err(CliError::Validation(e.to_string()));
            }
        }
        return Ok(());
    }
    Err(CliError::Validation(
        "metrics needs one of --seam, --compare-convergence, or --memory".into(),
    ))
}

/// Parse argv and run; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap prints help/version on stdout with exit 0 semantics
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Render(a) => cmd_render(a),
        Command::Metrics(a) => cmd_metrics(a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            match &e {
                CliError::Validation(m) => eprintln!("error: {m}"),
                CliError::Io(m) => eprintln!("I/O error: {m}"),
                CliError::Verification => eprintln!("verification failed"),
            }
            e.exit_code()
        }
    }
}
