//! Generator, discriminator and task network.

mod classifier;
mod discriminator;
mod generator;
mod layers;

pub use classifier::{parse_layer_spec, LayerSpec, Stream, TaskClassifier, TaskClassifierConfig, TaskOutput};
pub use discriminator::{pyramid_stages, Discriminator, DiscriminatorConfig};
pub use generator::{Generator, GeneratorConfig};
pub use layers::{apply_bn_updates, BnUpdate, Mode, BN_EPS, BN_MOMENTUM, INIT_STDDEV};
