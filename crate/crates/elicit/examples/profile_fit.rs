use elicit::critic::FitConfig;
use elicit::estimator::{estimate_mutual_information, PairedSamples};
use elicit::fdiv::get_divergence;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let n = 1000;
    let rho = 0.9653f64;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for _ in 0..n {
        let z1: f64 = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
        let z2: f64 = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
        xs.push(8.98 + 4.0234 * z1);
        ys.push(-2.97 + 1.1310 * (rho * z1 + (1.0 - rho * rho).sqrt() * z2));
    }
    let pairs = PairedSamples::new(xs, 1, ys, 1).unwrap();
    let spec = get_divergence("kl").unwrap();
    let t0 = std::time::Instant::now();
    let est = estimate_mutual_information(&spec, &pairs, &FitConfig::with_seed(7)).unwrap();
    println!(
        "value {:.4} (oracle {:.4}) iters {} grad_norm {:.3e} converged {} in {:.1?}",
        est.value,
        -0.5 * (1.0 - rho * rho).ln(),
        est.report.iterations,
        est.report.grad_norm,
        est.report.converged,
        t0.elapsed()
    );
    let trace = &est.report.objective_trace;
    for k in [0, 10, 50, 100, 200, 400, 800, 1600, 3200, trace.len() - 1] {
        if k < trace.len() {
            println!("  obj[{k}] = {:.6}", trace[k]);
        }
    }
}
