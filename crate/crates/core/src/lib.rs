pub mod autodiff;
pub mod bench;
pub mod classic;
pub mod error;
pub mod exec;
pub mod fixtures;
pub mod kv;
pub mod pipeline;
pub mod raw_io;
pub mod real;
pub mod training;
pub mod verify;

pub use error::{Error, ErrorKind, Result};
pub use exec::Exec;
