//! Fixed-point inference on bit-packed shift codes.

pub mod bench;
mod infer;
mod mac;
mod pack;

pub use bench::{bench, bench_kernels, BenchData, BenchReport, KernelKind, KernelStats};
pub use infer::{pack_weights, PackedNetwork};
pub use mac::{conv_forward_packed, dot_denseshift, dot_shift, mac_codes, ConvGeometry, FixedActivations, IntTensor};
pub use pack::{PackedWeightBlob, BLOB_MAGIC, BLOB_VERSION};
