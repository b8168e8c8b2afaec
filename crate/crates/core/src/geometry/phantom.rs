use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Image;

/// Modified (high-contrast) Shepp-Logan ellipses on the unit square
/// `[-1, 1]^2`: `(intensity, semi-axis a, semi-axis b, x0, y0, angle deg)`.
pub const SHEPP_LOGAN: [[f64; 6]; 10] = [
    [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
    [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
    [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
    [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
    [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
    [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
    [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
    [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
    [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
];

const MIN_PHANTOM_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PhantomKind {
    SheppLogan,
    /// Disk centred in the image; `radius` in pixels.
    UniformDisk { radius: f64, value: f64 },
    Constant { value: f64 },
}

impl PhantomKind {
    pub fn parse(name: &str, value: f64, radius: Option<f64>, size: usize) -> Result<Self> {
        match name {
            "shepp-logan" => Ok(Self::SheppLogan),
            "uniform-disk" => Ok(Self::UniformDisk {
                radius: radius.unwrap_or(0.5 * size as f64),
                value,
            }),
            "constant" => Ok(Self::Constant { value }),
            other => Err(Error::invalid(format!("unsupported phantom kind {other:?}"))),
        }
    }
}

/// Samples the phantom at pixel centres of a `size` x `size` grid spanning
/// `[-1, 1]^2` (row 0 at `y = 1`).
pub fn make_phantom(size: usize, kind: PhantomKind) -> Result<Image> {
    if size < MIN_PHANTOM_SIZE {
        return Err(Error::invalid(format!(
            "phantom size must be at least {MIN_PHANTOM_SIZE}, got {size}"
        )));
    }
    let check_value = |v: f64| {
        if (0.0..=1.0).contains(&v) {
            Ok(())
        } else {
            Err(Error::invalid(format!("phantom value {v} outside [0, 1]")))
        }
    };
    let n = size as f64;
    let mut img = Image::zeros(size, size);
    match kind {
        PhantomKind::Constant { value } => {
            check_value(value)?;
            img.view_mut().fill(value);
        }
        PhantomKind::UniformDisk { radius, value } => {
            check_value(value)?;
            if !(radius.is_finite() && radius > 0.0) {
                return Err(Error::invalid("disk radius must be positive"));
            }
            let c = n / 2.0;
            for ((r, col), v) in img.view_mut().indexed_iter_mut() {
                let dx = col as f64 + 0.5 - c;
                let dy = r as f64 + 0.5 - c;
                if dx * dx + dy * dy <= radius * radius {
                    *v = value;
                }
            }
        }
        PhantomKind::SheppLogan => {
            for ((r, col), v) in img.view_mut().indexed_iter_mut() {
                let x = (2.0 * col as f64 + 1.0) / n - 1.0;
                let y = 1.0 - (2.0 * r as f64 + 1.0) / n;
                *v = shepp_logan_at(x, y);
            }
        }
    }
    Ok(img)
}

pub(crate) fn shepp_logan_at(x: f64, y: f64) -> f64 {
    SHEPP_LOGAN
        .iter()
        .filter(|e| {
            let [_, a, b, x0, y0, deg] = **e;
            let (s, c) = deg.to_radians().sin_cos();
            let (dx, dy) = (x - x0, y - y0);
            let u = dx * c + dy * s;
            let w = -dx * s + dy * c;
            (u / a).powi(2) + (w / b).powi(2) <= 1.0
        })
        .map(|e| e[0])
        .sum::<f64>()
        // 0.2 - 0.2 inside the dark ellipses can round to -6e-17
        .max(0.0)
}
