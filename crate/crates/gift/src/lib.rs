//! Phantoms, noise models, file formats, benchmarking, and the `gift`
//! command line on top of `gift-core`.

pub mod bench;
pub mod cli;
pub mod formats;
pub mod noise;
pub mod phantom;
