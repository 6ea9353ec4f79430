//! Support code for the `radiance` executable.

pub mod colormap;
pub mod oracle_check;
pub mod rfmap_file;
