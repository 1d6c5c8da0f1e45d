//! Small CNN training engine: layers with per-layer weight providers,
//! softmax cross-entropy, SGD with momentum and a cosine schedule.

pub mod gradcheck;
pub mod layers;
mod linalg;
pub mod loss;
pub mod network;
pub mod optim;
pub mod presets;
pub mod spec;
pub mod train;

pub use layers::{BatchNorm, Conv2d, Layer, Linear, Mode, ParamKind, Weights};
pub use loss::{argmax_rows, softmax_cross_entropy};
pub use network::{ForwardCache, Gradients, Network};
pub use optim::{cosine_lr_at, sgd_momentum_step, Schedule, Sgd};
pub use spec::{LayerSpec, NetworkSpec, WeightProvider};
pub use train::{accuracy, build_network, evaluate_accuracy, predict, EpochStats, NoObserver, Observer, TrainConfig, Trainer};
