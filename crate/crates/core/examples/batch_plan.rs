//! Plans token-budgeted batches over log-uniform resolutions and compares
//! padding waste with fixed-size random batching.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zcurate::batch_planner::{estimate_tokens, fixed_size_plan, padding_waste, plan_batches};

fn main() -> zcurate::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut side = || rng.random_range(256f64.ln()..2048f64.ln()).exp() as u32;
    let shapes: Vec<_> = (0..1000)
        .map(|i| estimate_tokens(&format!("s{i:04}"), side(), side(), 16, 128))
        .collect();
    let plan = plan_batches(&shapes, 65_536, 1.25, 7)?;
    let mean = shapes.len() as f64 / plan.batches.len() as f64;
    let baseline = fixed_size_plan(&shapes, mean.round() as usize, 7);
    println!("{} batches, mean size {mean:.1}", plan.batches.len());
    println!(
        "padding waste: planned {:.4}, fixed-size {:.4}",
        padding_waste(&plan),
        padding_waste(&baseline)
    );
    let mut by_len: Vec<_> = plan.batches.iter().map(|b| (b.max_tokens, b.ids.len())).collect();
    by_len.sort_unstable();
    for (max_tokens, size) in by_len.iter().step_by(by_len.len().div_ceil(8)) {
        println!("  max_tokens {max_tokens:6}  size {size}");
    }
    Ok(())
}
