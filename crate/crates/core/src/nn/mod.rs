//! Self-attentive U-Net generator and patch discriminator, inference only.

pub mod arch;
pub mod builders;
pub mod network;
pub mod ops;
pub mod spectral;
pub mod weights;

pub use arch::{NetworkArch, NormKind, Parts};
pub use builders::{identity_generator, random_weights};
pub use network::{
    discriminator_forward, from_model_space, generator_forward, to_model_space, Discriminator, ForwardOptions,
    Generator,
};
pub use weights::{apply_spectral_normalization, load_weights, save_weights, GeneratorWeights, WeightTensor};
