//! Multiplication-free CNN inference through codebooks and lookup tables.
//!
//! A float network ([`ModelSpec`]) is calibrated into three scalar codebooks
//! (activations, conv filters, FC filters), from which every arithmetic
//! operation of the forward pass is tabulated ([`LutSet`]). The resulting
//! [`SymbolicModel`] runs on symbol ids alone.

pub mod analysis;
pub mod calibrate;
pub mod codebook;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod io;
pub mod lut;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use codebook::{Codebook, CodebookKind, Symbol};
pub use data::Dataset;
pub use engine::{diet_forward, FoldOrder, SymbolicTensor, Trace};
pub use error::{Error, ErrorClass, Result};
pub use lut::{build_luts, transform_model, LutSet, SymbolicModel};
pub use model::{LayerDef, ModelSpec};
pub use tensor::Tensor;
