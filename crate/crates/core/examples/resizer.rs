//! Compares the pool size an exhaustive sweep finds best with where the
//! adaptive resizer settles on a contended workload.

use std::time::Duration;

use feedmix::dispatch::sim::{converge, sweep, ContendedWorkload};
use feedmix::dispatch::ResizerConfig;

fn main() {
    let workload = ContendedWorkload::default();
    let seed = 7;
    let table = sweep(&workload, 1..=32, Duration::from_secs(300), seed);
    for (size, rate) in &table {
        println!("{size:3} {rate:7.2}/s {}", "#".repeat((*rate / 2.0) as usize));
    }
    let (best, rate) = table.iter().copied().fold((0, 0.0), |a, x| if x.1 > a.1 { x } else { a });
    println!("sweep optimum {best} at {rate:.2}/s (analytic {})", workload.analytic_optimum(64));

    let c = converge(&workload, ResizerConfig::default(), 4, 60, Duration::from_secs(10), seed);
    println!("resizer trajectory {:?}", c.trajectory);
    println!("settled at {}", c.converged_size);
}
