//! Condition maps (canny edges, landmark annotations) and the control
//! encoders that turn them into per-resolution denoiser residuals.

mod annotation;
mod canny;
mod encoder;
mod landmarks;
mod map;

pub use annotation::{annotation_map, render_annotation};
pub use canny::{canny, canny_edges, gaussian_blur, sobel, CannyConfig};
pub use encoder::{control_forward, ControlParams, CONTROL_TAG};
pub use landmarks::Landmarks;
pub use map::{ConditionKind, ConditionMap, DEFAULT_ANNOTATION_WEIGHT, DEFAULT_CANNY_WEIGHT};
