//! Spiking-network engine for a two-stage image classification pipeline:
//! a QCFS-trained CNN converted into an integrate-and-fire feature
//! extractor, followed by an unsupervised STDP classifier with lateral
//! inhibition, plus spike-count energy accounting.

pub mod arch;
pub mod data;
pub mod energy;
pub mod error;
pub mod experiment;
pub mod format;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod qcfs;
pub mod snn;
pub mod stdp;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Mode, Model, NetworkGraph};
pub use layers::Layer;
pub use tensor::DenseTensor;
