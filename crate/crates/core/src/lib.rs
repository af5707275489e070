pub mod bht;
pub mod error;
pub mod io;
pub mod metrics;
pub mod rise;
pub mod stream;
pub mod svd;
pub mod tensor;
pub mod tree;
