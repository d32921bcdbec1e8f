//! Training throughput at the reference size: d = 16, hidden
//! [200, 200, 200], batch 1024, single thread. The fast build is
//!
//! `cargo run --release -p ddp-core --features f32 --example throughput [-- instances]`

use ddp_core::diagnostics::measure_throughput;
use ddp_core::harness::Mode;

fn main() -> ddp_core::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(160_000);
    for mode in [Mode::Plain, Mode::Ddp] {
        let t = measure_throughput(mode, n)?;
        let inc = t.incremental.map_or("-".to_string(), |r| format!("{r:.0}"));
        println!("{mode:<8} {}-bit warmup {:.0} inst/s incremental {inc} inst/s", t.real_bits, t.warmup);
    }
    Ok(())
}
