//! How the mixing weight moves the loss of a correct and an incorrect
//! response to the same item.

use dpmtl::loss::dp_loss;

fn main() -> dpmtl::Result<()> {
    let logits = [1.2, 0.3, -0.4, 0.9];
    let key = 0;
    println!("logits {logits:?}, keyed option {key}");
    println!("{:>6} {:>10} {:>14} {:>14}", "lambda", "correct", "chose 1", "chose 2");
    for step in 0..=10 {
        let lambda = step as f64 / 10.0;
        println!(
            "{lambda:>6.1} {:>10.6} {:>14.6} {:>14.6}",
            dp_loss(&logits, key, key, lambda)?,
            dp_loss(&logits, 1, key, lambda)?,
            dp_loss(&logits, 2, key, lambda)?,
        );
    }
    // at lambda = 1 any wrong choice costs the same: only correctness counts
    let a = dp_loss(&logits, 1, key, 1.0)?;
    let b = dp_loss(&logits, 3, key, 1.0)?;
    println!("lambda=1: wrong choices 1 and 3 cost {a:.6} and {b:.6}");
    Ok(())
}
