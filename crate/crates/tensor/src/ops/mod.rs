mod basic;
mod composite;
mod conv;
mod corr;
mod linalg;
mod nn;

pub use corr::{conv4d_macs, conv4d_separable_macs, Plane};
pub use nn::{batch_stats, BatchStats, NormMode, EPS};
pub use composite::cosine_sim;
