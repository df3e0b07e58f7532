//! Network definitions, initialization, and the optimizer.

mod bundle;
pub mod checkpoint;
mod mlp;
mod optim;

pub use bundle::{BoundBundle, BundleSpec, ModelBundle, Part};
pub use mlp::{Activation, BoundMlp, Head, Linear, Mlp, MlpSpec};
pub use optim::SgdMomentum;
