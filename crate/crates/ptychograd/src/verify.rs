//! Self-contained verification suites behind `verify` on the CLI: the
//! finite-difference gradient check, the accumulation-equivalence check, the
//! direct-neighbor insufficiency probe, and the concurrent-vs-sequential
//! buffer comparison.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::datastore::{synthesize_dataset, SynthOptions};
use crate::geometry::{
    build_raster_scan, circle_mask, circle_support_rect, decompose_mesh, MeshSpec, ProbeLocation,
    ScanPattern,
};
use crate::gradients::{grad, grad_fd_oracle, mask_to_circle, rel_l2, GradField, StepSize};
use crate::optics::{make_probe, simulate_measurements, NoiseModel, ProbeParams, Volume};
use crate::passes::{full_pass, global_sum_oracle, neighbor_add_exchange, BufferMesh};
use crate::runtime::{appp_reconstruct, PassFrequency, ReconConfig};

/// Outcome of one verification suite.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub lines: Vec<String>,
}

impl CheckReport {
    fn line(&mut self, s: String) {
        self.lines.push(s);
    }
}

fn random_volume(slices: usize, h: usize, w: usize, seed: u64, amp: f64) -> Volume {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut v = Volume::zeros(slices, h, w);
    for val in v.data.iter_mut() {
        *val = rng.gen_range(0.0..amp);
    }
    v
}

/// Adjoint vs central finite differences on seeded random instances
/// (detector 16-32, slices 1-3). Relative L2 error must stay within 1e-5.
pub fn check_gradient_fd(seeds: usize) -> CheckReport {
    let mut report = CheckReport {
        name: "gradient-fd".into(),
        passed: true,
        lines: Vec::new(),
    };
    let detectors = [16usize, 16, 24, 16, 16, 32];
    let mut worst = 0.0f64;
    for s in 0..seeds {
        let n = detectors[s % detectors.len()];
        let slices = 1 + s % 3;
        let params = ProbeParams {
            grid_size: n,
            aperture: 0.15,
            aperture_edge_order: 1,
            defocus: 12.0,
            sigma: 0.8,
            propagation: 1.1,
        };
        let probe = make_probe(&params);
        let h = 3 * n;
        let volume = random_volume(slices, h, h, 1000 + s as u64, 0.6);
        let truth = random_volume(slices, h, h, 2000 + s as u64, 0.6);
        let loc = ProbeLocation {
            index: 0,
            center_y: (h / 2) as i64,
            center_x: (h / 2) as i64,
        };
        let scan = ScanPattern {
            locations: vec![loc],
            grid_rows: 1,
            grid_cols: 1,
            step_y: 0,
            step_x: 0,
            radius: 0,
        };
        let y = simulate_measurements(&truth, &scan, &probe, NoiseModel::None, 0)
            .expect("window fits")
            .remove(0);
        let g = grad(&y, &probe, &loc, &volume).expect("window fits");
        let fd = grad_fd_oracle(&y, &probe, &loc, &volume, 1e-5).expect("window fits");
        let err = rel_l2(&g.data, &fd.data);
        worst = worst.max(err);
        if err > 1e-5 {
            report.passed = false;
            report.line(format!(
                "seed {s}: detector {n}, slices {slices}: rel L2 {err:.3e} EXCEEDS 1e-5"
            ));
        }
    }
    report.line(format!(
        "{seeds} seeded instances, worst rel L2 {worst:.3e} (bound 1e-5)"
    ));
    report
}

/// A scan + halo pairing used by the accumulation checks.
pub struct AccumulationInstance {
    pub extent: (i64, i64),
    pub scan: ScanPattern,
    pub halo: i64,
    pub slices: usize,
    pub label: &'static str,
}

/// Low overlap ratio (1/3): circles reach direct tile neighbors only.
pub fn instance_low_overlap() -> AccumulationInstance {
    AccumulationInstance {
        extent: (120, 120),
        scan: build_raster_scan(6, 6, 16, (20, 20), 12, (120, 120)).unwrap(),
        halo: 14,
        slices: 2,
        label: "overlap 1/3",
    }
}

/// High overlap ratio (0.75): circles span indirect tile neighbors.
pub fn instance_high_overlap() -> AccumulationInstance {
    AccumulationInstance {
        extent: (96, 96),
        scan: build_raster_scan(7, 7, 9, (18, 18), 18, (96, 96)).unwrap(),
        halo: 24,
        slices: 2,
        label: "overlap 0.75",
    }
}

/// Random gradient field supported exactly on a probe circle.
pub fn masked_random_field(
    loc: &ProbeLocation,
    radius: i64,
    slices: usize,
    seed: u64,
) -> GradField {
    let region = circle_support_rect(loc, radius);
    let mask = circle_mask(loc, radius, &region);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut data = Array3::zeros((slices, region.height() as usize, region.width() as usize));
    for s in 0..slices {
        for ((yy, xx), m) in mask.indexed_iter() {
            if *m {
                data[[s, yy, xx]] = rng.gen_range(-1.0..1.0);
            }
        }
    }
    GradField { data, region }
}

/// Halo capped below the smallest interior side of the mesh.
pub fn capped_halo(inst: &AccumulationInstance, mesh: MeshSpec) -> i64 {
    inst.halo
        .min(inst.extent.0 / mesh.rows as i64 - 4)
        .min(inst.extent.1 / mesh.cols as i64 - 4)
}

fn build_buffer_mesh(
    inst: &AccumulationInstance,
    mesh: MeshSpec,
    halo: i64,
) -> (BufferMesh, Vec<GradField>) {
    let tiles = decompose_mesh(inst.extent, mesh, halo, &inst.scan).expect("valid instance");
    let fields: Vec<GradField> = inst
        .scan
        .locations
        .iter()
        .map(|l| masked_random_field(l, inst.scan.radius, inst.slices, 5000 + l.index as u64))
        .collect();
    let mut buffers = BufferMesh::zeros(&tiles, mesh, inst.slices);
    for t in 0..tiles.len() {
        for &p in &tiles[t].probe_indices {
            buffers.buffers[t].add_field(&fields[p]);
        }
    }
    (buffers, fields)
}

/// Max deviation of every buffer from the oracle over its extended rect,
/// relative to the oracle's max magnitude.
pub fn max_rel_deviation(mesh: &BufferMesh, oracle: &Array3<f64>) -> f64 {
    let scale = oracle.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let mut worst = 0.0f64;
    for b in &mesh.buffers {
        let e = &b.tile.extended;
        for s in 0..b.data.dim().0 {
            for y in e.y0..e.y1 {
                for x in e.x0..e.x1 {
                    let got = b.data[[s, (y - e.y0) as usize, (x - e.x0) as usize]];
                    let want = oracle[[s, y as usize, x as usize]];
                    worst = worst.max((got - want).abs() / scale);
                }
            }
        }
    }
    worst
}

/// After the four directional passes, every buffer must equal the brute-force
/// global gradient sum on its extended rect (2x2, 3x3, 4x3 meshes at overlap
/// ratios 1/3 and 0.75).
pub fn check_accumulation() -> CheckReport {
    let mut report = CheckReport {
        name: "accumulation".into(),
        passed: true,
        lines: Vec::new(),
    };
    for inst in [instance_low_overlap(), instance_high_overlap()] {
        for (rows, cols) in [(2usize, 2usize), (3, 3), (4, 3)] {
            let mesh = MeshSpec::new(rows, cols);
            let halo = capped_halo(&inst, mesh);
            let (mut buffers, fields) = build_buffer_mesh(&inst, mesh, halo);
            full_pass(&mut buffers);
            let oracle = global_sum_oracle(&fields, inst.extent, inst.slices);
            let dev = max_rel_deviation(&buffers, &oracle);
            let ok = dev <= 1e-10;
            report.passed &= ok;
            report.line(format!(
                "{} mesh {rows}x{cols} halo {halo}: max rel dev {dev:.3e} (bound 1e-10) {}",
                inst.label,
                if ok { "ok" } else { "FAIL" }
            ));
        }
    }
    report
}

/// At overlap ratio 0.75 the direct-neighbor exchange alone must leave a
/// visible deficit (> 1e-3) against the oracle; the suite passes by
/// detecting it.
pub fn check_neighbor_insufficiency() -> CheckReport {
    let mut report = CheckReport {
        name: "neighbor-insufficiency".into(),
        passed: true,
        lines: Vec::new(),
    };
    let inst = instance_high_overlap();
    let mesh = MeshSpec::new(3, 3);
    let (mut buffers, fields) = build_buffer_mesh(&inst, mesh, inst.halo);
    neighbor_add_exchange(&mut buffers);
    let oracle = global_sum_oracle(&fields, inst.extent, inst.slices);
    let dev = max_rel_deviation(&buffers, &oracle);
    let detected = dev > 1e-3;
    report.passed = detected;
    report.line(format!(
        "{} mesh 3x3: direct-neighbor exchange deviates by {dev:.3e} from the oracle ({})",
        inst.label,
        if detected {
            "deficit detected as expected"
        } else {
            "FAIL: no deficit found"
        }
    ));
    // control: the full pass has no such deficit
    let (mut buffers2, fields2) = build_buffer_mesh(&inst, mesh, inst.halo);
    full_pass(&mut buffers2);
    let oracle2 = global_sum_oracle(&fields2, inst.extent, inst.slices);
    let dev2 = max_rel_deviation(&buffers2, &oracle2);
    report.line(format!(
        "control with full pass: max rel dev {dev2:.3e}"
    ));
    report.passed &= dev2 <= 1e-10;
    report
}

/// Dataset for the concurrent-vs-sequential comparison: 7x7 probes at
/// overlap 0.75 on a 96^2 volume with a 32-pixel detector window.
pub fn runtime_check_dataset() -> (crate::datastore::Dataset, Volume) {
    let opts = SynthOptions {
        grid_rows: 7,
        grid_cols: 7,
        step: 9,
        radius: 18,
        detector: 32,
        slices: 2,
        height: 96,
        width: 96,
        origin: Some((18, 18)),
        noise: NoiseModel::None,
        seed: 11,
        atom_spacing: 10,
        amplitude: 0.5,
        pitch: (10.0, 10.0, 125.0),
        aperture: 0.15,
        aperture_edge_order: 1,
        defocus: 20.0,
        sigma: 1.0,
        propagation: 1.5,
    };
    synthesize_dataset(&opts).expect("valid synthetic options")
}

/// With frozen updates (alpha = 0) the runtime's post-pass buffers must match
/// the sequential full pass bit-for-bit (within 1e-12), under both engines.
pub fn check_runtime_vs_reference() -> CheckReport {
    let mut report = CheckReport {
        name: "runtime-vs-reference".into(),
        passed: true,
        lines: Vec::new(),
    };
    let (dataset, _) = runtime_check_dataset();
    let scan = dataset.header.scan().unwrap();
    let probe = make_probe(&dataset.header.probe_params());
    let extent = dataset.header.volume_extent();
    let slices = dataset.header.slices as usize;
    let zero = Volume::zeros(slices, extent.0 as usize, extent.1 as usize);

    for (rows, cols, halo) in [(2usize, 2usize, 24i64), (3, 3, 24), (4, 3, 20)] {
        let mesh = MeshSpec::new(rows, cols);
        // sequential reference: per-probe masked gradients accumulated into
        // tile buffers, then the four passes
        let tiles = decompose_mesh(extent, mesh, halo, &scan).expect("valid decomposition");
        let mut reference = BufferMesh::zeros(&tiles, mesh, slices);
        for (t, tile) in tiles.iter().enumerate() {
            for &p in &tile.probe_indices {
                let g = grad(&dataset.measurements[p], &probe, &scan.locations[p], &zero)
                    .expect("window fits");
                let g = mask_to_circle(g, &scan.locations[p], scan.radius);
                reference.buffers[t].add_field(&g);
            }
        }
        full_pass(&mut reference);

        for deterministic in [true, false] {
            let cfg = ReconConfig {
                iterations: 1,
                pass_freq: PassFrequency::OncePerIteration,
                alpha: StepSize(0.0),
                halo_width: halo,
                deterministic,
                capture_buffers: true,
                ..ReconConfig::default()
            };
            let run = appp_reconstruct(&dataset, mesh, &cfg).expect("run succeeds");
            let captured = run.captured.expect("buffers captured");
            let scale = reference
                .buffers
                .iter()
                .flat_map(|b| b.data.iter())
                .fold(0.0f64, |a, &v| a.max(v.abs()));
            let mut worst = 0.0f64;
            for (got, want) in captured.buffers.iter().zip(reference.buffers.iter()) {
                assert_eq!(got.tile.interior, want.tile.interior);
                for (a, b) in got.data.iter().zip(want.data.iter()) {
                    worst = worst.max((a - b).abs() / scale);
                }
            }
            let ok = worst <= 1e-12;
            report.passed &= ok;
            report.line(format!(
                "mesh {rows}x{cols} halo {halo} {}: max rel dev {worst:.3e} (bound 1e-12) {}",
                if deterministic {
                    "cooperative"
                } else {
                    "threaded"
                },
                if ok { "ok" } else { "FAIL" }
            ));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_fd_suite_passes() {
        let r = check_gradient_fd(6);
        assert!(r.passed, "{:?}", r.lines);
    }

    #[test]
    fn accumulation_suite_passes() {
        let r = check_accumulation();
        assert!(r.passed, "{:?}", r.lines);
    }

    #[test]
    fn insufficiency_suite_passes() {
        let r = check_neighbor_insufficiency();
        assert!(r.passed, "{:?}", r.lines);
    }

    #[test]
    fn runtime_reference_suite_passes() {
        let r = check_runtime_vs_reference();
        assert!(r.passed, "{:?}", r.lines);
    }
}
