pub mod changemap;
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
mod filter;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod pretrain;
pub mod quantizer;
pub mod sampling;
pub mod scalar;
pub mod selftest;
pub mod views;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Teacher = pretrain::Teacher<f32>;
pub type Student = distill::Student<f32>;
pub type Detector = infer::Detector<f32>;
pub type Image = data::RasterImage<f32>;
pub type Scene = data::SyntheticScene<f32>;
pub type TeacherF64 = pretrain::Teacher<f64>;
pub type StudentF64 = distill::Student<f64>;

/// Mixes a base seed with two counters (splitmix64 finalizer) so that every
/// epoch and batch gets an independent, reproducible stream.
pub fn seed_for(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
