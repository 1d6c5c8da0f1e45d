use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layer {layer}: {message}")]
    LayerShape { layer: usize, message: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("backward called with a cache that does not belong to the current parameters")]
    StaleCache,

    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        step: u64,
    },

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("shift {shift} does not fit a {bits}-bit code")]
    CodeOverflow { shift: u32, bits: u8 },

    #[error("length mismatch: {activations} activations vs {weights} weights")]
    LengthMismatch { activations: usize, weights: usize },

    #[error("weight {value} at index {index} is neither zero nor a signed power of two")]
    NotShiftWeight { index: usize, value: f64 },

    #[error("layer {layer} ({kind}) cannot carry duplicated features")]
    UnsupportedLayer { layer: usize, kind: &'static str },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("malformed data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
