//! Criterion benchmarks for the cost model, contrastive loss and law fitting.
