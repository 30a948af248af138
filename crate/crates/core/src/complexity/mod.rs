//! Attention FLOPs model, an operation-counting oracle for it, and the
//! forward-pass benchmark.

mod bench;
pub mod counter;
mod flops;

pub use bench::{analytic_flops, bench_forward, write_bench_csv, BenchMode, BenchRecord, BenchSweep, CSV_HEADER};
pub use flops::{attention_flops, flops_dsa, flops_msa, loglog_slope, SOFTMAX_FLOPS};
