// scratch: acceptance pre-validation (deleted before release)
use ptychograd::baseline::hve_reconstruct;
use ptychograd::datastore::{rmse, seam_score, synthesize_dataset, SynthOptions};
use ptychograd::geometry::MeshSpec;
use ptychograd::optics::NoiseModel;
use ptychograd::runtime::{appp_reconstruct, PassFrequency, ReconConfig};

fn main() {
    let opts = SynthOptions {
        noise: NoiseModel::Poisson { dose: 1e4 },
        ..SynthOptions::default()
    };
    let (dataset, phantom) = synthesize_dataset(&opts).unwrap();
    let mesh = MeshSpec::new(3, 3);
    let base = ReconConfig {
        iterations: 100,
        ..ReconConfig::default()
    };
    let fc = |r: &ptychograd::runtime::RunResult| r.convergence.last().unwrap().cost;

    let single = appp_reconstruct(&dataset, MeshSpec::new(1, 1), &base).unwrap();
    let once = appp_reconstruct(&dataset, mesh, &base).unwrap();
    let twice = appp_reconstruct(
        &dataset,
        mesh,
        &ReconConfig {
            pass_freq: PassFrequency::TwicePerIteration,
            ..base.clone()
        },
    )
    .unwrap();
    let perprobe = appp_reconstruct(
        &dataset,
        mesh,
        &ReconConfig {
            pass_freq: PassFrequency::PerProbe,
            ..base.clone()
        },
    )
    .unwrap();
    let (hve, _) = hve_reconstruct(&dataset, mesh, &base, 2).unwrap();

    println!(
        "single={:.6} once={:.6} twice={:.6} perprobe={:.6} hve={:.6}",
        fc(&single),
        fc(&once),
        fc(&twice),
        fc(&perprobe),
        fc(&hve)
    );
    println!(
        "gap(once,single)={:.3}% once<=perprobe*1.01: {}",
        100.0 * (fc(&once) - fc(&single)) / fc(&single),
        fc(&once) <= fc(&perprobe) * 1.01
    );
    println!(
        "rmse(once, single) = {:.4}% of range",
        rmse(&once.volume, &single.volume).unwrap() / phantom.dynamic_range() * 100.0
    );
    println!(
        "seam gd={:.3} hve={:.3}",
        seam_score(&once.volume, &once.tiles).value,
        seam_score(&hve.volume, &hve.tiles).value
    );
    // early-iteration curves to see frequency differences
    for it in [0usize, 4, 20] {
        println!(
            "iter {it}: once={:.6} twice={:.6} perprobe={:.6}",
            once.convergence[it].cost, twice.convergence[it].cost, perprobe.convergence[it].cost
        );
    }
}
