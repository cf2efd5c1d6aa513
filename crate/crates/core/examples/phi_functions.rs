//! The concave transforms behind each divergence, and the α-scaled
//! composite the loss actually uses. All composites approach the identity as
//! α shrinks.
//!
//! ```text
//! cargo run --example phi_functions
//! ```

use seqmatch::divergence::{phi, scaled_phi, PhiKind, PhiSpec};

fn main() -> seqmatch::error::Result<()> {
    let xs = [-2.0, -0.5, 0.0, 0.5, 2.0];
    println!("{:<13} {}", "phi(x)", xs.map(|x| format!("{x:>9}")).join(""));
    for kind in PhiKind::ALL {
        let spec = PhiSpec::new(kind, 1.0)?;
        println!("{kind:<13} {}", xs.map(|x| format!("{:>9.4}", phi(&spec, x))).join(""));
    }
    for alpha in [1.0, 0.1, 0.01] {
        println!("\nscaled, alpha {alpha}");
        for kind in PhiKind::ALL {
            let spec = PhiSpec::new(kind, alpha)?;
            println!("{kind:<13} {}", xs.map(|x| format!("{:>9.4}", scaled_phi(&spec, x))).join(""));
        }
    }
    Ok(())
}
