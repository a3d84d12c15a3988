//! Dynamic visual prompting: match theme images to the key elements of a
//! text prompt, stitch them into a grid around a masked canvas, inpaint the
//! canvas once per row arrangement and keep the best-scoring result.

pub mod bank;
pub mod composer;
pub mod engine;
pub mod error;
pub mod fsutil;
pub mod generation;
pub mod http;
pub mod intent;
pub mod layout;
pub mod raster;
pub mod similarity;
