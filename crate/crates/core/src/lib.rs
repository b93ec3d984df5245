pub mod cli;
pub mod config;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod hypercube;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod rasterizer;
pub mod rng;
pub mod scene;
pub mod sh;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
pub use hypercube::{read_cube, write_cube, HyperCube, SpectralVector};
pub use scene::{CameraView, Gaussian, GaussianCloud};
