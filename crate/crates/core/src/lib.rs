pub mod data;
pub mod encoder;
pub mod harness;
pub mod losses;
pub mod metapath;
pub mod retrieval;
pub mod tensor;
