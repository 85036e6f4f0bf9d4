//! Hybrid-view contrastive distillation from a frozen image network into a
//! point-cloud network, on synthetic paired camera/LiDAR scenes.
//!
//! The pipeline pairs two correspondences between modalities: image-plane
//! (superpixels of each camera view against the LiDAR points projecting into
//! them) and bird's-eye view (image features lifted along camera rays with a
//! point-supervised depth distribution, against voxel features collapsed
//! along the vertical axis). Both are trained with InfoNCE objectives.

pub mod augment;
pub mod bev;
pub mod cli;
pub mod config;
pub mod depth_eval;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod probe;
pub mod superpixel;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
