pub mod attention;
pub mod checks;
pub mod complexity;
pub mod conv;
pub mod dynconv;
pub mod error;
pub mod harness;
pub mod layout;
pub mod relpos;
pub mod tensor;

pub use error::{Error, Result};
pub use layout::Layout;
pub use tensor::{Rng, Tape, Tensor, Var};
