//! The kernel family: moments, roughness and scaled evaluation.

use distcausal::kernels::{Bandwidth, Kernel};

fn main() -> distcausal::Result<()> {
    println!(
        "{:<13} {:>9} {:>10} {:>9} {:>9}",
        "kernel", "∫K", "∫uK", "∫u²K", "∫K²"
    );
    for k in Kernel::ALL {
        let m = k.moments();
        println!(
            "{:<13} {:>9.6} {:>10.2e} {:>9.6} {:>9.6}",
            k.name(),
            m.m0,
            m.m1,
            m.m2,
            m.k2int
        );
    }
    let h = Bandwidth::new(0.25)?;
    let k: Kernel = "epanechnikov".parse()?;
    println!("K_h(0.1) with h = 0.25: {:.4}", k.scaled_eval(h, 0.1));
    Ok(())
}
