//! Multi-scale knowledge injection for image classifiers.
//!
//! Human knowledge about each category is embedded at three scales and used
//! to supervise the hidden features of a small vision network before a
//! classification head is trained on the frozen features:
//!
//! * [`text_embed`]: category sentences from knowledge triples (KI-S)
//! * [`graph_embed`]: DeepWalk over the part-relation graph (KI-M) and the
//!   graph merged with a wide external graph (KI-L)
//! * [`trainer`]: the knowledge stage (cosine alignment through injection
//!   heads) and the classification stage, plus the ablation harness
//! * [`explain`]: Grad-CAM, hidden-layer knowledge retrieval, PCA projection
//!
//! The numerical substrate is the small reverse-mode autodiff engine in
//! [`tensor`]; [`synth`] generates a desk-scale dataset whose images are
//! rendered from the same triples the knowledge is embedded from.

pub mod checkpoint;
pub mod embed;
pub mod explain;
pub mod graph_embed;
pub mod kiemb;
pub mod knowledge;
pub mod linalg;
pub mod net;
pub mod rng;
pub mod scale;
pub mod synth;
pub mod tensor;
pub mod text_embed;
pub mod trainer;

pub use scale::{Scale, ScaleMask};

/// Any error the library can produce.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Knowledge(#[from] knowledge::KnowledgeError),
    #[error(transparent)]
    Embed(#[from] text_embed::EmbedError),
    #[error(transparent)]
    GraphEmbed(#[from] graph_embed::GraphEmbedError),
    #[error(transparent)]
    Kiemb(#[from] kiemb::KiembError),
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error(transparent)]
    Net(#[from] net::NetError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error(transparent)]
    Explain(#[from] explain::ExplainError),
}
