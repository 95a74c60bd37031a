//! Building blocks for raising the effective point accuracy of a
//! low-accuracy laser scan against a high-accuracy reference:
//!
//! - [`geometry`]: point clouds, rigid motions, normal estimation, plane fitting
//! - [`registration`]: FPFH + RANSAC global alignment and staged point-to-plane ICP
//! - [`segmentation`]: DBSCAN and normal-bucketed plane extraction
//! - [`projection`]: plane-local depth-map rasterization and its exact inverse
//! - [`synthesis`]: paired synthetic indoor scans with known ground truth
//! - [`evaluation`]: MSE/PSNR wall reports and spatial error grids
//! - [`io`]: PLY, NPY, projection-record, and manifest formats

pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod kdtree;
pub mod projection;
pub mod registration;
pub mod segmentation;
pub mod synthesis;
