//! Minimal dense autodiff, parameter storage and the Adam optimizer.

mod adam;
mod params;
mod tape;

pub use adam::Adam;
pub use params::{uniform, xavier, ParamId, ParamStore, StoredArray};
pub use tape::{masked_softmax_rows, softplus, Csr, Gradients, Mat, Tape, Var};
