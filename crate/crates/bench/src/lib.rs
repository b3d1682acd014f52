//! Criterion benchmarks for the DSP, linear-algebra and tokenizer kernels;
//! see `benches/kernels.rs`. Run with `cargo bench -p losatok-bench`.
