//! On-disk formats: FITS images and the raw-float array container.

pub mod container;
pub mod fits;
