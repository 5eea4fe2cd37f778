//! Tour of the distribution geometry underneath divergence steering:
//! softmax with temperature, entropy, KL, the Fisher–Rao geodesic between
//! two distributions, and fixed-entropy projection.
//!
//! Run with: `cargo run --example divergence_geometry`

use mtdlab::geometry::{
    bhattacharyya_angle, entropy, fixed_entropy_project, geodesic_interpolate, kl_divergence,
    softmax_with_temperature, temperature_scale, CategoricalDist,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Two opinions about the same next token: a peaked "full model"
    // distribution and a flatter "shallow head" one.
    let p = softmax_with_temperature(&[2.5, 1.0, 0.2, -0.8, -1.5], 1.0)?;
    let m = softmax_with_temperature(&[1.2, 1.1, 0.6, 0.1, -0.2], 1.0)?;

    println!("p = {:?}", rounded(&p));
    println!("m = {:?}", rounded(&m));
    println!();
    println!("entropy(p)            = {:.4} nats", entropy(&p));
    println!("entropy(m)            = {:.4} nats", entropy(&m));
    println!("KL(p ‖ m)             = {:.4} nats   <- the divergence measure", kl_divergence(&p, &m));
    println!("KL(m ‖ p)             = {:.4} nats   (asymmetric, as expected)", kl_divergence(&m, &p));
    println!("Bhattacharyya angle Θ = {:.4} rad", bhattacharyya_angle(&p, &m));
    println!();

    // Walk the geodesic from p (α = 0) to m (α = 1) and beyond on both
    // sides. α < 0 moves *away* from the shallow head's opinion.
    println!("{:>6}  {:<40} {:>8} {:>7}", "alpha", "distribution", "entropy", "folded");
    for &alpha in &[-0.75, -0.25, 0.0, 0.5, 1.0, 1.5] {
        let g = geodesic_interpolate(&p, &m, alpha);
        println!(
            "{alpha:>6}  {:<40} {:>8.4} {:>7}",
            format!("{:?}", rounded(&g.dist)),
            entropy(&g.dist),
            g.folded,
        );
    }
    println!();

    // Fixed-entropy projection: take the α = −0.75 point (sharper than p)
    // and retarget it to p's entropy. The projection is exactly a
    // temperature rescale with a root-found T.
    let steered = geodesic_interpolate(&p, &m, -0.75).dist;
    let target = entropy(&p);
    let (projected, t) = fixed_entropy_project(&steered, target, 1e-9)?;
    println!("projecting the α = -0.75 point back to H(p) = {target:.4}:");
    println!("  before: H = {:.4}", entropy(&steered));
    println!("  after:  H = {:.4}  (found T = {t:.4})", entropy(&projected));
    let rescaled = temperature_scale(&steered, t)?;
    let max_gap = projected
        .probs()
        .iter()
        .zip(rescaled.probs())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max)
        .max(0.0);
    println!("  identity check vs temperature_scale(s, T): max gap = {max_gap:.2e}");
    Ok(())
}

fn rounded(d: &CategoricalDist) -> Vec<f64> {
    d.probs().iter().map(|p| (p * 1e4).round() / 1e4).collect()
}
