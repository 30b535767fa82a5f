//! Pinhole cameras, relative poses and epipolar-line algebra.
//!
//! Poses are stored world-to-camera. Nothing here takes a depth range: the
//! search segment of every reference pixel comes from the sign conditions
//! on the two depths alone.

mod camera;
mod epipolar;
mod field;

pub use camera::{
    depth_from_position, position_from_depth, relative_pose, triangulate, Branch, CameraView,
    Intrinsics, PixelPoint, Pose, DENOMINATOR_EPS, MIN_EXTENT,
};
pub use epipolar::{
    depth_to_flow, epipolar_setup, epipolar_setup_raw, flow_to_depth, EpipolarGeometry, LineDepth,
    CLAMP_MARGIN, MIN_BASELINE, RECT_INFLATION,
};
pub use field::{full_to_level, level_extent, level_to_full, EpipolarField};
