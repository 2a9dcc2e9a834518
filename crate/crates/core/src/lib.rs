pub mod autodiff;
pub mod data;
pub mod error;
pub mod kes;
pub mod par;
pub mod search;
pub mod space;
pub mod supernet;
pub mod toolkit;

pub use error::{Error, Result};
