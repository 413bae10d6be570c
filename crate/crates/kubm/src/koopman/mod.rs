//! Linear latent dynamics: fitting, training, and the model container.
//!
//! `ops` holds the operator-level numerics (least-squares fits, the
//! coherence objective, spectral radius). `train` wraps them in the
//! gradient loop that co-adapts the lifting MLP and the transition
//! matrix. `model` is the serializable artifact the planner consumes.

pub mod model;
pub mod ops;
pub mod train;

pub use model::{
    fit_poly_model, load_model, save_model, KoopmanModel, LatentMap, ModelDims, ModelError,
    FORMAT_VERSION,
};
pub use ops::{
    anchor_horizons, coherence_loss, fit_edmd, latent_pairs, pooled_coherence_loss,
    spectral_radius, OpsError,
};
pub use train::{train, TrainConfig, TrainError, TrainRecord};
