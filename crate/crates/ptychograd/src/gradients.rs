//! Per-probe amplitude loss, its adjoint gradient through the multislice
//! model, the central finite-difference oracle, circle-support masking, and
//! the plain gradient-descent step.
//!
//! The binding correctness contract for the adjoint is agreement with
//! `grad_fd_oracle`; everything else follows from it.

use ndarray::{Array2, Array3, ArrayViewMut3};
use num_complex::Complex64;
use thiserror::Error;

use crate::fft::{freq_sq_grid, Fft2};
use crate::geometry::{circle_mask, window_rect, ProbeLocation, Rect, ScanPattern};
use crate::optics::{extract_window, multislice_window, Measurement, OpticsError, Probe, Volume};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GradError {
    #[error(transparent)]
    Optics(#[from] OpticsError),
    #[error("shape mismatch: target {target:?} vs gradient {grad:?}")]
    ShapeMismatch {
        target: (usize, usize, usize),
        grad: (usize, usize, usize),
    },
}

/// Gradient of one probe's loss with respect to the potential, restricted to
/// the probe window `region`; zero implied everywhere else.
#[derive(Debug, Clone)]
pub struct GradField {
    pub data: Array3<f64>,
    pub region: Rect,
}

impl GradField {
    pub fn slices(&self) -> usize {
        self.data.dim().0
    }
}

/// Step size for the descent update; zero is allowed (a no-op update is how
/// communication behavior is isolated in tests).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSize(pub f64);

impl StepSize {
    pub fn new(alpha: f64) -> Option<StepSize> {
        (alpha.is_finite() && alpha >= 0.0).then_some(StepSize(alpha))
    }
}

/// Loss and (optionally) adjoint gradient over an N x N x S window of
/// potential values.
pub(crate) fn loss_grad_window(
    y: &Measurement,
    probe: &Probe,
    window: &Array3<f64>,
    fft: &Fft2,
    want_grad: bool,
) -> (f64, Option<Array3<f64>>) {
    let n = probe.params.grid_size;
    let sigma = probe.params.sigma;
    let chi = probe.params.propagation;
    let slices = window.dim().0;
    debug_assert_eq!(y.magnitude.dim(), (n, n));

    let trace = multislice_window(probe, window, fft);
    let mut det = trace.exit.clone();
    fft.forward(&mut det);

    let mut loss = 0.0;
    for (psi, &m) in det.iter().zip(y.magnitude.iter()) {
        let r = psi.norm() - m;
        loss += r * r;
    }
    if !want_grad {
        return (loss, None);
    }

    // Seed at the detector: d loss / d conj(Psi) = (|Psi| - |y|) Psi / |Psi|,
    // zero where |Psi| vanishes.
    let mut g: Array2<Complex64> = det.map(|psi| {
        let m = psi.norm();
        if m == 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            psi / m
        }
    });
    for ((j, k), v) in g.indexed_iter_mut() {
        *v *= det[[j, k]].norm() - y.magnitude[[j, k]];
    }
    // back through the detector transform (adjoint of unitary DFT)
    fft.inverse(&mut g);

    let f2 = freq_sq_grid(n);
    let mut grad = Array3::zeros((slices, n, n));
    for s_idx in (0..slices).rev() {
        // adjoint of the Fresnel step: conjugated propagator phase
        if chi != 0.0 {
            fft.forward(&mut g);
            for ((j, k), v) in g.indexed_iter_mut() {
                *v *= Complex64::new(0.0, chi * f2[[j, k]]).exp();
            }
            fft.inverse(&mut g);
        }
        let transmitted = &trace.transmitted[s_idx];
        for ((yy, xx), gv) in g.indexed_iter() {
            grad[[s_idx, yy, xx]] = 2.0 * sigma * (gv * transmitted[[yy, xx]].conj()).im;
        }
        if s_idx > 0 {
            for ((yy, xx), gv) in g.indexed_iter_mut() {
                let t = Complex64::new(0.0, sigma * window[[s_idx, yy, xx]]).exp();
                *gv *= t.conj();
            }
        }
    }
    (loss, Some(grad))
}

/// Squared-error amplitude loss for one probe location.
pub fn loss(
    y: &Measurement,
    probe: &Probe,
    loc: &ProbeLocation,
    volume: &Volume,
) -> Result<f64, GradError> {
    let window = extract_window(volume, loc, probe.params.grid_size)?;
    let fft = Fft2::new(probe.params.grid_size);
    Ok(loss_grad_window(y, probe, &window, &fft, false).0)
}

/// Total cost F(V): the loss summed over all probe locations.
pub fn total_cost(
    measurements: &[Measurement],
    scan: &ScanPattern,
    probe: &Probe,
    volume: &Volume,
) -> Result<f64, GradError> {
    let fft = Fft2::new(probe.params.grid_size);
    let mut acc = 0.0;
    for m in measurements {
        let loc = &scan.locations[m.probe_index];
        let window = extract_window(volume, loc, probe.params.grid_size)?;
        acc += loss_grad_window(m, probe, &window, &fft, false).0;
    }
    Ok(acc)
}

/// Adjoint-mode gradient of the loss with respect to the potential,
/// restricted to the probe window.
pub fn grad(
    y: &Measurement,
    probe: &Probe,
    loc: &ProbeLocation,
    volume: &Volume,
) -> Result<GradField, GradError> {
    let window = extract_window(volume, loc, probe.params.grid_size)?;
    let fft = Fft2::new(probe.params.grid_size);
    let (_, g) = loss_grad_window(y, probe, &window, &fft, true);
    Ok(GradField {
        data: g.expect("gradient requested"),
        region: window_rect(loc, probe.params.grid_size),
    })
}

/// Central finite differences of an arbitrary window functional.
pub fn fd_gradient_window<F>(f: &mut F, window: &Array3<f64>, epsilon: f64) -> Array3<f64>
where
    F: FnMut(&Array3<f64>) -> f64,
{
    assert!(epsilon > 0.0);
    let mut w = window.clone();
    let mut out = Array3::zeros(window.dim());
    let dims = window.dim();
    for s in 0..dims.0 {
        for yy in 0..dims.1 {
            for xx in 0..dims.2 {
                let orig = w[[s, yy, xx]];
                w[[s, yy, xx]] = orig + epsilon;
                let plus = f(&w);
                w[[s, yy, xx]] = orig - epsilon;
                let minus = f(&w);
                w[[s, yy, xx]] = orig;
                out[[s, yy, xx]] = (plus - minus) / (2.0 * epsilon);
            }
        }
    }
    out
}

/// Finite-difference oracle for `grad`: central differences of the loss per
/// voxel of the window region. Independent of the adjoint path.
pub fn grad_fd_oracle(
    y: &Measurement,
    probe: &Probe,
    loc: &ProbeLocation,
    volume: &Volume,
    epsilon: f64,
) -> Result<GradField, GradError> {
    let window = extract_window(volume, loc, probe.params.grid_size)?;
    let fft = Fft2::new(probe.params.grid_size);
    let mut f = |w: &Array3<f64>| loss_grad_window(y, probe, w, &fft, false).0;
    let data = fd_gradient_window(&mut f, &window, epsilon);
    Ok(GradField {
        data,
        region: window_rect(loc, probe.params.grid_size),
    })
}

/// Zero every entry outside the probe circle, in every slice. Idempotent.
pub fn mask_to_circle(mut g: GradField, loc: &ProbeLocation, radius: i64) -> GradField {
    let mask = circle_mask(loc, radius, &g.region);
    for mut slice in g.data.outer_iter_mut() {
        for ((yy, xx), v) in slice.indexed_iter_mut() {
            if !mask[[yy, xx]] {
                *v = 0.0;
            }
        }
    }
    g
}

/// V := V - alpha * g, elementwise over congruent regions.
pub fn apply_step(
    mut target: ArrayViewMut3<f64>,
    g: &Array3<f64>,
    alpha: StepSize,
) -> Result<(), GradError> {
    if target.dim() != g.dim() {
        return Err(GradError::ShapeMismatch {
            target: target.dim(),
            grad: g.dim(),
        });
    }
    target.zip_mut_with(g, |t, &gv| *t -= alpha.0 * gv);
    Ok(())
}

/// Relative L2 distance between two congruent fields.
pub fn rel_l2(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        num += (x - y) * (x - y);
        den += y * y;
    }
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{
        make_probe, probe_effective_radius, simulate_measurements, NoiseModel, ProbeParams,
    };
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn small_params(n: usize) -> ProbeParams {
        ProbeParams {
            grid_size: n,
            aperture: 0.15,
            aperture_edge_order: 4,
            defocus: 15.0,
            sigma: 0.8,
            propagation: 1.2,
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

    fn center_loc(h: i64, w: i64) -> ProbeLocation {
        ProbeLocation {
            index: 0,
            center_y: h / 2,
            center_x: w / 2,
        }
    }

    fn one_measurement(probe: &Probe, loc: &ProbeLocation, volume: &Volume) -> Measurement {
        let scan = ScanPattern {
            locations: vec![*loc],
            grid_rows: 1,
            grid_cols: 1,
            step_y: 0,
            step_x: 0,
            radius: 0,
        };
        simulate_measurements(volume, &scan, probe, NoiseModel::None, 0)
            .unwrap()
            .remove(0)
    }

    #[test]
    fn loss_is_zero_at_self_consistency() {
        let probe = make_probe(&small_params(16));
        let volume = random_volume(2, 48, 48, 3, 0.5);
        let loc = center_loc(48, 48);
        let y = one_measurement(&probe, &loc, &volume);
        assert_eq!(loss(&y, &probe, &loc, &volume).unwrap(), 0.0);
    }

    #[test]
    fn loss_against_zero_data_equals_probe_power() {
        // Parseval chain: pure-phase medium and unitary transforms keep total
        // power at 1 for the unit probe.
        let probe = make_probe(&small_params(16));
        let volume = random_volume(3, 48, 48, 11, 0.9);
        let loc = center_loc(48, 48);
        let y = Measurement {
            magnitude: Array2::zeros((16, 16)),
            probe_index: 0,
        };
        let l = loss(&y, &probe, &loc, &volume).unwrap();
        assert!((l - 1.0).abs() < 1e-10, "loss {l}");
    }

    #[test]
    fn loss_invariant_under_global_potential_shift() {
        let params = small_params(16);
        let probe = make_probe(&params);
        let volume = random_volume(2, 48, 48, 5, 0.5);
        let loc = center_loc(48, 48);
        let y = one_measurement(&probe, &loc, &random_volume(2, 48, 48, 6, 0.5));
        let l0 = loss(&y, &probe, &loc, &volume).unwrap();
        let mut shifted = volume.clone();
        shifted
            .data
            .mapv_inplace(|v| v + 2.0 * std::f64::consts::PI / params.sigma);
        let l1 = loss(&y, &probe, &loc, &shifted).unwrap();
        assert!((l0 - l1).abs() <= 1e-12 * l0.max(1.0), "{l0} vs {l1}");
    }

    #[test]
    fn gradient_vanishes_at_perfect_reconstruction() {
        let probe = make_probe(&small_params(16));
        let volume = random_volume(2, 48, 48, 9, 0.5);
        let loc = center_loc(48, 48);
        let y = one_measurement(&probe, &loc, &volume);
        let g = grad(&y, &probe, &loc, &volume).unwrap();
        let max = g.data.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        assert!(max <= 1e-10, "max |grad| {max}");
    }

    #[test]
    fn adjoint_matches_fd_oracle() {
        for seed in [1u64, 2, 3, 4, 5] {
            let probe = make_probe(&small_params(16));
            let volume = random_volume(2, 48, 48, seed, 0.6);
            let truth = random_volume(2, 48, 48, seed + 100, 0.6);
            let loc = center_loc(48, 48);
            let y = one_measurement(&probe, &loc, &truth);
            let g = grad(&y, &probe, &loc, &volume).unwrap();
            let fd = grad_fd_oracle(&y, &probe, &loc, &volume, 1e-5).unwrap();
            let err = rel_l2(&g.data, &fd.data);
            assert!(err <= 1e-5, "seed {seed}: rel L2 {err}");
        }
    }

    #[test]
    fn gradient_support_follows_probe_circle() {
        // tight single-slice instance: the transmitted field's support is the
        // probe's, so the gradient outside the illuminated circle only carries
        // the probe tails
        let params = ProbeParams {
            grid_size: 64,
            aperture: 0.15,
            aperture_edge_order: 4,
            defocus: 0.0,
            sigma: 0.9,
            propagation: 0.7,
        };
        let probe = make_probe(&params);
        let radius = probe_effective_radius(&probe, 1e-7).ceil() as i64;
        // intensity outside the nominal radius is below 1e-6 of the peak
        let peak = probe.field.iter().map(|v| v.norm_sqr()).fold(0.0, f64::max);
        let c = (params.grid_size / 2) as i64;
        for ((yy, xx), v) in probe.field.indexed_iter() {
            let d2 = (yy as i64 - c).pow(2) + (xx as i64 - c).pow(2);
            if d2 > radius * radius {
                assert!(v.norm_sqr() <= 1e-6 * peak);
            }
        }

        let volume = random_volume(1, 96, 96, 21, 0.8);
        let truth = random_volume(1, 96, 96, 22, 0.8);
        let loc = center_loc(96, 96);
        let y = one_measurement(&probe, &loc, &truth);
        let g = grad(&y, &probe, &loc, &volume).unwrap();
        let mask = circle_mask(&loc, radius, &g.region);
        let mut max_in = 0.0f64;
        let mut max_out = 0.0f64;
        for ((yy, xx), &v) in g.data.index_axis(ndarray::Axis(0), 0).indexed_iter() {
            if mask[[yy, xx]] {
                max_in = max_in.max(v.abs());
            } else {
                max_out = max_out.max(v.abs());
            }
        }
        assert!(
            max_out <= 1e-3 * max_in,
            "outside/inside ratio {}",
            max_out / max_in
        );
    }

    #[test]
    fn fd_oracle_is_exact_on_linear_functionals() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let window = Array3::from_shape_fn((2, 6, 6), |_| rng.gen_range(-1.0..1.0));
        let coeff = Array3::from_shape_fn((2, 6, 6), |_| rng.gen_range(-2.0..2.0));
        let mut f = |w: &Array3<f64>| (w * &coeff).sum();
        let fd = fd_gradient_window(&mut f, &window, 1e-5);
        for (a, b) in fd.iter().zip(coeff.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn fd_oracle_near_zero_at_stationary_point() {
        let probe = make_probe(&small_params(16));
        let volume = Volume::zeros(1, 48, 48);
        let loc = center_loc(48, 48);
        let y = one_measurement(&probe, &loc, &volume);
        let fd = grad_fd_oracle(&y, &probe, &loc, &volume, 1e-5).unwrap();
        let max = fd.data.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        assert!(max <= 1e-8, "max |fd| {max}");
    }

    #[test]
    fn fd_oracle_richardson_ratio() {
        // halving epsilon divides the O(eps^2) truncation error by ~4
        let probe = make_probe(&small_params(16));
        let volume = random_volume(1, 48, 48, 31, 0.6);
        let truth = random_volume(1, 48, 48, 32, 0.6);
        let loc = center_loc(48, 48);
        let y = one_measurement(&probe, &loc, &truth);
        let eps = 4e-3;
        let f1 = grad_fd_oracle(&y, &probe, &loc, &volume, eps).unwrap().data;
        let f2 = grad_fd_oracle(&y, &probe, &loc, &volume, eps / 2.0)
            .unwrap()
            .data;
        let f3 = grad_fd_oracle(&y, &probe, &loc, &volume, eps / 4.0)
            .unwrap()
            .data;
        let d12: f64 = (&f1 - &f2).iter().map(|v| v * v).sum::<f64>().sqrt();
        let d23: f64 = (&f2 - &f3).iter().map(|v| v * v).sum::<f64>().sqrt();
        let ratio = d12 / d23;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn masking_behaviour() {
        let probe = make_probe(&small_params(16));
        let volume = random_volume(2, 48, 48, 41, 0.6);
        let truth = random_volume(2, 48, 48, 42, 0.6);
        let loc = center_loc(48, 48);
        let y = one_measurement(&probe, &loc, &truth);
        let g = grad(&y, &probe, &loc, &volume).unwrap();

        // radius covering the whole window: identity
        let full = mask_to_circle(g.clone(), &loc, 64);
        assert_eq!(full.data, g.data);

        // radius zero: only the center voxel column survives
        let point = mask_to_circle(g.clone(), &loc, 0);
        let mut nonzero = 0;
        for s in 0..point.slices() {
            for ((yy, xx), &v) in point.data.index_axis(ndarray::Axis(0), s).indexed_iter() {
                if v != 0.0 {
                    nonzero += 1;
                    assert_eq!(
                        (
                            point.region.y0 + yy as i64,
                            point.region.x0 + xx as i64
                        ),
                        (loc.center_y, loc.center_x)
                    );
                }
            }
        }
        assert!(nonzero <= point.slices());

        // idempotent
        let once = mask_to_circle(g.clone(), &loc, 5);
        let twice = mask_to_circle(once.clone(), &loc, 5);
        assert_eq!(once.data, twice.data);
    }

    #[test]
    fn masked_sum_matches_brute_force() {
        let probe = make_probe(&small_params(16));
        let volume = random_volume(1, 64, 64, 51, 0.6);
        let truth = random_volume(1, 64, 64, 52, 0.6);
        let la = ProbeLocation {
            index: 0,
            center_y: 28,
            center_x: 28,
        };
        let lb = ProbeLocation {
            index: 1,
            center_y: 34,
            center_x: 34,
        };
        let ya = one_measurement(&probe, &la, &truth);
        let yb = one_measurement(&probe, &lb, &truth);
        let radius = 6;
        let ga = mask_to_circle(grad(&ya, &probe, &la, &volume).unwrap(), &la, radius);
        let gb = mask_to_circle(grad(&yb, &probe, &lb, &volume).unwrap(), &lb, radius);

        let mut scatter = Array3::<f64>::zeros((1, 64, 64));
        for g in [&ga, &gb] {
            for ((yy, xx), &v) in g.data.index_axis(ndarray::Axis(0), 0).indexed_iter() {
                scatter[[0, (g.region.y0 + yy as i64) as usize, (g.region.x0 + xx as i64) as usize]] += v;
            }
        }
        // brute force: per voxel, sum unmasked grads where the voxel is inside
        // the corresponding circle
        let mut brute = Array3::<f64>::zeros((1, 64, 64));
        for (loc, g) in [(&la, grad(&ya, &probe, &la, &volume).unwrap()),
                         (&lb, grad(&yb, &probe, &lb, &volume).unwrap())] {
            for ((yy, xx), &v) in g.data.index_axis(ndarray::Axis(0), 0).indexed_iter() {
                let gy = g.region.y0 + yy as i64;
                let gx = g.region.x0 + xx as i64;
                let d2 = (gy - loc.center_y).pow(2) + (gx - loc.center_x).pow(2);
                if d2 <= radius * radius {
                    brute[[0, gy as usize, gx as usize]] += v;
                }
            }
        }
        let diff = (&scatter - &brute)
            .iter()
            .fold(0.0f64, |a, &v| a.max(v.abs()));
        assert!(diff == 0.0, "max diff {diff}");
    }

    #[test]
    fn apply_step_edge_cases() {
        let mut v = Array3::from_elem((1, 2, 2), 3.0);
        let g = Array3::from_elem((1, 2, 2), 2.0);
        apply_step(v.view_mut(), &g, StepSize(0.0)).unwrap();
        assert!(v.iter().all(|&x| x == 3.0));
        let zeros = Array3::zeros((1, 2, 2));
        apply_step(v.view_mut(), &zeros, StepSize(0.5)).unwrap();
        assert!(v.iter().all(|&x| x == 3.0));
        let bad = Array3::zeros((1, 3, 2));
        assert!(matches!(
            apply_step(v.view_mut(), &bad, StepSize(0.5)),
            Err(GradError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn one_step_on_scalar_quadratic_halves_distance() {
        // f(v) = c (v - v*)^2, curvature 2c; alpha = 1/(4c) halves v - v*
        let c = 3.0;
        let vstar = 1.25;
        let v0 = 4.0;
        let mut v = Array3::from_elem((1, 1, 1), v0);
        let g = Array3::from_elem((1, 1, 1), 2.0 * c * (v0 - vstar));
        apply_step(v.view_mut(), &g, StepSize(1.0 / (4.0 * c))).unwrap();
        let d0 = v0 - vstar;
        let d1 = v[[0, 0, 0]] - vstar;
        assert!((d1 - d0 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_sum_grouping_is_exact() {
        // Eq-style additivity: scattering per-probe gradients one at a time
        // equals scattering pre-summed groups
        let probe = make_probe(&small_params(16));
        let volume = random_volume(1, 64, 64, 61, 0.6);
        let truth = random_volume(1, 64, 64, 62, 0.6);
        let locs: Vec<ProbeLocation> = (0..4)
            .map(|i| ProbeLocation {
                index: i,
                center_y: 26 + 4 * (i as i64 / 2),
                center_x: 26 + 4 * (i as i64 % 2),
            })
            .collect();
        let grads: Vec<GradField> = locs
            .iter()
            .map(|l| {
                let y = one_measurement(&probe, l, &truth);
                grad(&y, &probe, l, &volume).unwrap()
            })
            .collect();

        let scatter = |fields: &[&GradField]| {
            let mut out = Array3::<f64>::zeros((1, 64, 64));
            for g in fields {
                for ((yy, xx), &v) in g.data.index_axis(ndarray::Axis(0), 0).indexed_iter() {
                    out[[0, (g.region.y0 + yy as i64) as usize, (g.region.x0 + xx as i64) as usize]] += v;
                }
            }
            out
        };
        let all: Vec<&GradField> = grads.iter().collect();
        let one_by_one = scatter(&all);
        let first_two = scatter(&all[..2]);
        let last_two = scatter(&all[2..]);
        let grouped = &first_two + &last_two;
        let rel = rel_l2(&one_by_one, &grouped);
        assert!(rel <= 1e-12, "rel {rel}");
    }

    #[test]
    fn descent_decreases_loss_with_backtracking() {
        let probe = make_probe(&small_params(16));
        let mut volume = random_volume(2, 48, 48, 71, 0.6);
        let truth = random_volume(2, 48, 48, 72, 0.6);
        let loc = center_loc(48, 48);
        let y = one_measurement(&probe, &loc, &truth);
        let l0 = loss(&y, &probe, &loc, &volume).unwrap();
        let g = grad(&y, &probe, &loc, &volume).unwrap();
        let mut alpha = 1.0;
        for _ in 0..40 {
            let mut cand = volume.clone();
            let r = &g.region;
            let mut view = cand.data.slice_mut(ndarray::s![
                ..,
                r.y0 as usize..r.y1 as usize,
                r.x0 as usize..r.x1 as usize
            ]);
            view.zip_mut_with(&g.data, |t, &gv| *t -= alpha * gv);
            let l1 = loss(&y, &probe, &loc, &cand).unwrap();
            if l1 < l0 {
                volume = cand;
                break;
            }
            alpha *= 0.5;
        }
        let l1 = loss(&y, &probe, &loc, &volume).unwrap();
        assert!(l1 < l0, "loss did not decrease: {l0} -> {l1}");
    }
}
