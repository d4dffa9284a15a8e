//! Pinhole camera intrinsics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{CanonicalPose2D, CanonicalPose3D, Frame, NUM_JOINTS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Image width in pixels; `2 * cx` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    /// Image height in pixels; `2 * cy` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<f64>,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Camera {
            fx,
            fy,
            cx,
            cy,
            width: None,
            height: None,
        }
    }

    pub fn image_width(&self) -> f64 {
        self.width.unwrap_or(2.0 * self.cx)
    }

    pub fn image_height(&self) -> f64 {
        self.height.unwrap_or(2.0 * self.cy)
    }

    pub fn in_frame(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0 && p[1] >= 0.0 && p[0] < self.image_width() && p[1] < self.image_height()
    }

    /// Projects one camera-frame point to pixels.
    pub fn project_point(&self, p: [f64; 3]) -> [f64; 2] {
        [self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy]
    }

    /// Pinhole projection of a camera-frame pose; joints that land outside
    /// the image, or that were already invisible, come out invisible.
    pub fn project(&self, pose: &CanonicalPose3D) -> Result<CanonicalPose2D> {
        if pose.frame != Frame::CameraMm {
            return Err(Error::FrameMismatch("projection needs a camera-frame pose".into()));
        }
        let mut coords = [[0.0; 2]; NUM_JOINTS];
        let mut vis = pose.visibility;
        for (j, p) in pose.coords.iter().enumerate() {
            if !vis[j] {
                continue;
            }
            if !(p[2] > 0.0) {
                return Err(Error::NonPositiveDepth { joint: j, z: p[2] });
            }
            coords[j] = self.project_point(*p);
            vis[j] = self.in_frame(coords[j]);
        }
        Ok(CanonicalPose2D::new(coords, vis))
    }
}
