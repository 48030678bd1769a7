use fou2::asymptotics::{rate_profile, RateProfile, VolModel, SigmaFn};
use fou2::kernels::KernelSpec;
fn main() {
    let model = VolModel::new(
        KernelSpec::Fbm { h: 0.3 },
        0.2,
        1.5,
        -0.7,
        SigmaFn::Exponential,
    )
    .unwrap();
    let xs: Vec<f64> = (0..9).map(|i| -0.1 + 0.025 * i as f64).collect();
    let profile = rate_profile(&model, &xs, 5, 256).unwrap();
    for p in &profile.points {
        println!("x={:+.4} J={:.12e} converged={}", p.x, p.j, p.converged);
    }
    let small = rate_profile(&model, &[-0.05, 0.0, 0.05], 5, 256).unwrap();
    let json = small.to_json().unwrap();
    let back = RateProfile::from_json(&json).unwrap();
    println!("eq={} ", small == back);
    for (a, b) in small.points.iter().zip(&back.points) {
        if a != b {
            println!("diff:\n  a={a:?}\n  b={b:?}");
        }
    }
    if small.h != back.h || small.sigma0 != back.sigma0 {
        println!("meta diff: {} {} / {} {}", small.h, back.h, small.sigma0, back.sigma0);
    }
}
