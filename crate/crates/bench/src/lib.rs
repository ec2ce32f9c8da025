//! Intentionally empty: this crate exists only to host the criterion
//! benchmarks under `benches/`.
