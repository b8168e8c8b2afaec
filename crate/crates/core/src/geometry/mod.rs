//! Fan-beam acquisition geometry, analytic phantoms, the Siddon ray-driven
//! forward projector and fan-beam filtered back-projection.
//!
//! Coordinates are in centimetres with the rotation centre at the origin,
//! `x` to the right and `y` up. For view `v` the source sits at angle
//! `beta = 2*pi*v/num_views` on a circle of radius `source_to_center`; the
//! flat detector faces it at `detector_to_center` on the opposite side,
//! with bins equally spaced along `(-sin beta, cos beta)`.

mod fbp;
mod phantom;
mod siddon;

pub use fbp::{fbp_reconstruct, FilterKind};
pub use phantom::{make_phantom, PhantomKind, SHEPP_LOGAN};
pub use siddon::{chord_length, radon_forward, trace_ray, PixelGrid};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side of the square field of view used by the presets, in cm. It stays
/// inside the circle seen by the detector for the 40/40/41.3 cm geometry.
const PRESET_FOV_CM: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FanGeometry {
    pub num_views: usize,
    pub num_detectors: usize,
    /// cm
    pub source_to_center: f64,
    /// cm
    pub detector_to_center: f64,
    /// Total width of the flat detector, cm.
    pub detector_width: f64,
    /// Image side in pixels (images are square).
    pub image_size: usize,
    /// cm per pixel
    pub pixel_spacing: f64,
}

impl Default for FanGeometry {
    fn default() -> Self {
        Self::desk(256)
    }
}

impl FanGeometry {
    /// 720 bins, 360 views over 360 degrees, 40 cm to source and detector,
    /// 41.3 cm detector, 512 px images.
    pub fn clinical() -> Self {
        Self {
            num_views: 360,
            num_detectors: 720,
            source_to_center: 40.0,
            detector_to_center: 40.0,
            detector_width: 41.3,
            image_size: 512,
            pixel_spacing: PRESET_FOV_CM / 512.0,
        }
    }

    /// Square 768 x 768 sinogram variant of [`FanGeometry::clinical`].
    pub fn square768() -> Self {
        Self {
            num_views: 768,
            num_detectors: 768,
            ..Self::clinical()
        }
    }

    /// Reduced sampling (180 views x 360 bins) with the clinical distances,
    /// for `image_size` px phantoms.
    pub fn desk(image_size: usize) -> Self {
        Self {
            num_views: 180,
            num_detectors: 360,
            image_size,
            pixel_spacing: PRESET_FOV_CM / image_size.max(1) as f64,
            ..Self::clinical()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "clinical" => Ok(Self::clinical()),
            "square768" => Ok(Self::square768()),
            "desk" => Ok(Self::desk(256)),
            other => Err(Error::invalid(format!("unknown geometry preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_views", self.num_views),
            ("num_detectors", self.num_detectors),
            ("image_size", self.image_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        let lengths = [
            ("source_to_center", self.source_to_center),
            ("detector_to_center", self.detector_to_center),
            ("detector_width", self.detector_width),
            ("pixel_spacing", self.pixel_spacing),
        ];
        for (name, v) in lengths {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.fov_half_width() >= self.source_to_center {
            return Err(Error::invalid("source lies inside the image square"));
        }
        Ok(())
    }

    pub fn view_angle(&self, view: usize) -> f64 {
        std::f64::consts::TAU * view as f64 / self.num_views as f64
    }

    pub fn detector_pitch(&self) -> f64 {
        self.detector_width / self.num_detectors as f64
    }

    /// Signed offset of bin `bin` from the detector centre, cm.
    pub fn detector_offset(&self, bin: usize) -> f64 {
        (bin as f64 - (self.num_detectors as f64 - 1.0) / 2.0) * self.detector_pitch()
    }

    pub fn source_position(&self, view: usize) -> [f64; 2] {
        let beta = self.view_angle(view);
        [self.source_to_center * beta.cos(), self.source_to_center * beta.sin()]
    }

    /// Centre of detector bin `bin` for view `view`.
    pub fn detector_position(&self, view: usize, bin: usize) -> [f64; 2] {
        let beta = self.view_angle(view);
        let (s, c) = beta.sin_cos();
        let u = self.detector_offset(bin);
        [
            -self.detector_to_center * c - u * s,
            -self.detector_to_center * s + u * c,
        ]
    }

    pub fn fov_half_width(&self) -> f64 {
        self.image_size as f64 * self.pixel_spacing / 2.0
    }

    pub fn pixel_grid(&self) -> PixelGrid {
        PixelGrid::new(self.image_size, self.pixel_spacing)
    }
}
