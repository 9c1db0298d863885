//! Multislice forward model: propagate a probe wavefield through the slices
//! of the scattering potential and read out far-field diffraction magnitudes.
//!
//! Physical constants are collapsed into model units: a transmission constant
//! `sigma` (phase per potential unit) and a per-slice Fresnel coefficient
//! `propagation` (phase per squared normalized frequency). Unitary DFTs
//! everywhere.

use ndarray::{s, Array2, Array3};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::fft::{fftshift, freq_sq_grid, Fft2};
use crate::geometry::{window_rect, ProbeLocation, Rect, ScanPattern};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OpticsError {
    #[error("probe {index} window {y0}..{y1} x {x0}..{x1} exits the {h}x{w} volume")]
    WindowOutOfBounds {
        index: usize,
        y0: i64,
        y1: i64,
        x0: i64,
        x1: i64,
        h: i64,
        w: i64,
    },
}

/// Real-valued 3-D scattering potential: slices x rows x cols, plus voxel
/// pitches in picometers (descriptive metadata only; the model runs in
/// collapsed units).
#[derive(Debug, Clone)]
pub struct Volume {
    pub data: Array3<f64>,
    pub pitch_y: f64,
    pub pitch_x: f64,
    pub slice_thickness: f64,
}

impl Volume {
    pub fn zeros(slices: usize, h: usize, w: usize) -> Volume {
        Volume {
            data: Array3::zeros((slices, h, w)),
            pitch_y: 10.0,
            pitch_x: 10.0,
            slice_thickness: 125.0,
        }
    }

    pub fn slices(&self) -> usize {
        self.data.dim().0
    }

    /// Lateral extent (H, W) in voxels.
    pub fn extent(&self) -> (i64, i64) {
        (self.data.dim().1 as i64, self.data.dim().2 as i64)
    }

    pub fn dynamic_range(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in self.data.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo.is_finite() {
            hi - lo
        } else {
            0.0
        }
    }
}

/// Model parameters of the synthetic microscope probe and medium.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeParams {
    /// Detector / probe window side N (square).
    pub grid_size: usize,
    /// Aperture cutoff in normalized frequency (cycles/voxel, Nyquist = 0.5).
    pub aperture: f64,
    /// Soft-edge exponent p of the aperture exp(-(|f|/a)^(2p)); 0 = hard disk.
    pub aperture_edge_order: u32,
    /// Quadratic defocus phase coefficient.
    pub defocus: f64,
    /// Interaction constant: transmission = exp(i * sigma * V).
    pub sigma: f64,
    /// Per-slice Fresnel propagator coefficient chi: P = exp(-i * chi * f^2).
    pub propagation: f64,
}

impl Default for ProbeParams {
    fn default() -> Self {
        // a gently tapered aperture keeps the probe's 1e-6 intensity support
        // within ~10 voxels on a 64-pixel window
        ProbeParams {
            grid_size: 64,
            aperture: 0.12,
            aperture_edge_order: 1,
            defocus: 60.0,
            sigma: 1.0,
            propagation: 2.0,
        }
    }
}

/// Complex probe wavefield, normalized to unit total intensity, peak centered
/// at (N/2, N/2).
#[derive(Debug, Clone)]
pub struct Probe {
    pub field: Array2<Complex64>,
    pub params: ProbeParams,
}

/// Complex wavefield intermediate of the multislice chain.
#[derive(Debug, Clone)]
pub struct Wavefield {
    pub field: Array2<Complex64>,
}

/// Far-field diffraction magnitudes |y| for one probe location.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub magnitude: Array2<f64>,
    pub probe_index: usize,
}

/// Build the synthetic probe: inverse DFT of (aperture disk x defocus phase),
/// recentered and normalized to unit intensity.
pub fn make_probe(params: &ProbeParams) -> Probe {
    let n = params.grid_size;
    assert!(n >= 2 && params.aperture > 0.0);
    let fft = Fft2::new(n);
    let f2 = freq_sq_grid(n);
    let mut spectrum = Array2::zeros((n, n));
    let a2 = params.aperture * params.aperture;
    for ((j, k), v) in spectrum.indexed_iter_mut() {
        let k2 = f2[[j, k]];
        let amp = if params.aperture_edge_order == 0 {
            if k2 <= a2 {
                1.0
            } else {
                0.0
            }
        } else {
            (-(k2 / a2).powi(params.aperture_edge_order as i32)).exp()
        };
        let phase = Complex64::new(0.0, -params.defocus * k2).exp();
        *v = phase * amp;
    }
    fft.inverse(&mut spectrum);
    let mut field = fftshift(&spectrum);
    let total: f64 = field.iter().map(|v| v.norm_sqr()).sum();
    assert!(total > 0.0, "aperture produced an empty probe");
    let scale = 1.0 / total.sqrt();
    field.mapv_inplace(|v| v * scale);
    Probe {
        field,
        params: *params,
    }
}

/// Largest distance from the window center of any pixel whose intensity
/// exceeds `rel_threshold` times the peak intensity.
pub fn probe_effective_radius(probe: &Probe, rel_threshold: f64) -> f64 {
    let n = probe.field.dim().0;
    let c = (n / 2) as f64;
    let peak = probe
        .field
        .iter()
        .map(|v| v.norm_sqr())
        .fold(0.0f64, f64::max);
    let mut radius = 0.0f64;
    for ((y, x), v) in probe.field.indexed_iter() {
        if v.norm_sqr() > rel_threshold * peak {
            let d = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
            radius = radius.max(d);
        }
    }
    radius
}

/// Free-space Fresnel step: IDFT(P . DFT(field)) with P = exp(-i*coeff*f^2).
/// A zero coefficient is the identity and skips the transform pair.
pub fn free_space_propagate(field: &Array2<Complex64>, coeff: f64) -> Array2<Complex64> {
    if coeff == 0.0 {
        return field.clone();
    }
    let n = field.dim().0;
    let fft = Fft2::new(n);
    let f2 = freq_sq_grid(n);
    let mut a = field.clone();
    fft.forward(&mut a);
    for ((j, k), v) in a.indexed_iter_mut() {
        *v *= Complex64::new(0.0, -coeff * f2[[j, k]]).exp();
    }
    fft.inverse(&mut a);
    a
}

/// Extract the N x N window of the volume centered at a probe location.
pub fn extract_window(
    volume: &Volume,
    loc: &ProbeLocation,
    n: usize,
) -> Result<Array3<f64>, OpticsError> {
    let rect = window_rect(loc, n);
    let (h, w) = volume.extent();
    if rect.y0 < 0 || rect.x0 < 0 || rect.y1 > h || rect.x1 > w {
        return Err(OpticsError::WindowOutOfBounds {
            index: loc.index,
            y0: rect.y0,
            y1: rect.y1,
            x0: rect.x0,
            x1: rect.x1,
            h,
            w,
        });
    }
    Ok(volume
        .data
        .slice(s![
            ..,
            rect.y0 as usize..rect.y1 as usize,
            rect.x0 as usize..rect.x1 as usize
        ])
        .to_owned())
}

pub(crate) struct MultisliceTrace {
    /// Transmitted field psi'_s per slice (after multiplying exp(i sigma V_s)).
    pub transmitted: Vec<Array2<Complex64>>,
    /// Exit field psi_S before the detector transform.
    pub exit: Array2<Complex64>,
}

/// Run the transmit-then-propagate chain over a window of potential data,
/// keeping per-slice intermediates for the adjoint.
pub(crate) fn multislice_window(
    probe: &Probe,
    window: &Array3<f64>,
    fft: &Fft2,
) -> MultisliceTrace {
    let n = probe.params.grid_size;
    debug_assert_eq!(window.dim().1, n);
    debug_assert_eq!(window.dim().2, n);
    let sigma = probe.params.sigma;
    let chi = probe.params.propagation;
    let f2 = freq_sq_grid(n);
    let slices = window.dim().0;

    let mut psi = probe.field.clone();
    let mut transmitted = Vec::with_capacity(slices);
    for s_idx in 0..slices {
        let v = window.slice(s![s_idx, .., ..]);
        let mut t = psi.clone();
        for ((y, x), val) in t.indexed_iter_mut() {
            *val *= Complex64::new(0.0, sigma * v[[y, x]]).exp();
        }
        transmitted.push(t.clone());
        if chi != 0.0 {
            fft.forward(&mut t);
            for ((j, k), val) in t.indexed_iter_mut() {
                *val *= Complex64::new(0.0, -chi * f2[[j, k]]).exp();
            }
            fft.inverse(&mut t);
        }
        psi = t;
    }
    MultisliceTrace {
        transmitted,
        exit: psi,
    }
}

/// Multislice propagation of the probe through the volume at one location.
pub fn multislice_propagate(
    probe: &Probe,
    loc: &ProbeLocation,
    volume: &Volume,
) -> Result<Wavefield, OpticsError> {
    let window = extract_window(volume, loc, probe.params.grid_size)?;
    let fft = Fft2::new(probe.params.grid_size);
    let trace = multislice_window(probe, &window, &fft);
    Ok(Wavefield { field: trace.exit })
}

/// Magnitude of the unitary DFT of the exit wave.
pub fn diffract(w: &Wavefield, probe_index: usize) -> Measurement {
    let n = w.field.dim().0;
    let fft = Fft2::new(n);
    let mut a = w.field.clone();
    fft.forward(&mut a);
    Measurement {
        magnitude: a.mapv(|v| v.norm()),
        probe_index,
    }
}

/// Detector noise options for synthetic data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    None,
    /// Poisson-like perturbation of intensities at the given dose; higher
    /// dose means less noise.
    Poisson { dose: f64 },
}

/// Simulate one measurement per probe location. Deterministic for a fixed
/// seed: probe i draws from its own counter-mode stream.
pub fn simulate_measurements(
    volume: &Volume,
    scan: &ScanPattern,
    probe: &Probe,
    noise: NoiseModel,
    seed: u64,
) -> Result<Vec<Measurement>, OpticsError> {
    let mut out = Vec::with_capacity(scan.locations.len());
    for loc in &scan.locations {
        let wave = multislice_propagate(probe, loc, volume)?;
        let mut m = diffract(&wave, loc.index);
        if let NoiseModel::Poisson { dose } = noise {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(loc.index as u64 + 1);
            for v in m.magnitude.iter_mut() {
                let intensity = *v * *v;
                let std = (intensity / dose).sqrt();
                // Box-Muller keeps the dependency surface small
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen::<f64>();
                let g = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                *v = (intensity + std * g).max(0.0).sqrt();
            }
        }
        out.push(m);
    }
    Ok(out)
}

/// Full window rect helper re-exported for callers that stitch gradients.
pub fn measurement_window(loc: &ProbeLocation, params: &ProbeParams) -> Rect {
    window_rect(loc, params.grid_size)
}
