use ndarray::ArrayView2;

use super::FanGeometry;
use crate::error::{Error, Result};
use crate::grid::{Image, Sinogram};

/// Square pixel grid centred on the origin.
#[derive(Debug, Clone, Copy)]
pub struct PixelGrid {
    pub size: usize,
    pub spacing: f64,
    half: f64,
}

impl PixelGrid {
    pub fn new(size: usize, spacing: f64) -> Self {
        Self {
            size,
            spacing,
            half: size as f64 * spacing / 2.0,
        }
    }

    pub fn half_width(&self) -> f64 {
        self.half
    }

    /// Parametric interval `[t_in, t_out]` of the segment `a + t (b - a)`,
    /// `t in [0, 1]`, that lies inside the grid square.
    fn clip(&self, a: [f64; 2], d: [f64; 2]) -> Option<(f64, f64)> {
        let mut t_in = 0.0_f64;
        let mut t_out = 1.0_f64;
        for k in 0..2 {
            if d[k] == 0.0 {
                if a[k] <= -self.half || a[k] >= self.half {
                    return None;
                }
                continue;
            }
            let t0 = (-self.half - a[k]) / d[k];
            let t1 = (self.half - a[k]) / d[k];
            t_in = t_in.max(t0.min(t1));
            t_out = t_out.min(t0.max(t1));
        }
        (t_in < t_out).then_some((t_in, t_out))
    }
}

const PARAM_TOL: f64 = 1e-12;

/// Increasing parameters at which the segment crosses the grid lines
/// perpendicular to axis `k`, restricted to `(t_in, t_out)`.
struct PlaneCrossings {
    next: i64,
    step: i64,
    end: i64,
    origin: f64,
    inv_d: f64,
    spacing: f64,
    half: f64,
}

impl PlaneCrossings {
    fn new(grid: &PixelGrid, a: f64, d: f64, t_in: f64, t_out: f64) -> Self {
        let n = grid.size as i64;
        if d == 0.0 {
            return Self {
                next: 0,
                step: 1,
                end: 0,
                origin: a,
                inv_d: 0.0,
                spacing: grid.spacing,
                half: grid.half,
            };
        }
        // plane k sits at -half + k*spacing; visit them in the order the ray meets them
        let (next, step, end) = if d > 0.0 { (0, 1, n + 1) } else { (n, -1, -1) };
        let mut it = Self {
            next,
            step,
            end,
            origin: a,
            inv_d: 1.0 / d,
            spacing: grid.spacing,
            half: grid.half,
        };
        // planes within rounding of the clip points would add sliver segments
        while it.next != it.end && it.param(it.next) <= t_in + PARAM_TOL {
            it.next += it.step;
        }
        let mut last = it.next;
        while last != it.end && it.param(last) < t_out - PARAM_TOL {
            last += it.step;
        }
        it.end = last;
        it
    }

    fn param(&self, k: i64) -> f64 {
        (-self.half + k as f64 * self.spacing - self.origin) * self.inv_d
    }

    fn peek(&self) -> Option<f64> {
        (self.next != self.end).then(|| self.param(self.next))
    }

    fn advance(&mut self) {
        self.next += self.step;
    }
}

/// Siddon traversal: visits every pixel crossed by the segment `a -> b`
/// with the exact intersection length, as `visit(row, col, length)`.
///
/// Crossing parameters of the vertical and horizontal grid lines are merged
/// in increasing order; each consecutive pair bounds one pixel, identified
/// from the segment midpoint.
pub fn trace_ray(grid: &PixelGrid, a: [f64; 2], b: [f64; 2], mut visit: impl FnMut(usize, usize, f64)) {
    let d = [b[0] - a[0], b[1] - a[1]];
    let length = d[0].hypot(d[1]);
    let Some((t_in, t_out)) = grid.clip(a, d) else {
        return;
    };
    let mut xs = PlaneCrossings::new(grid, a[0], d[0], t_in, t_out);
    let mut ys = PlaneCrossings::new(grid, a[1], d[1], t_in, t_out);
    let last = grid.size - 1;
    let inv_spacing = 1.0 / grid.spacing;

    let mut t_prev = t_in;
    loop {
        let t_next = match (xs.peek(), ys.peek()) {
            (Some(tx), Some(ty)) if tx <= ty => {
                xs.advance();
                if tx == ty {
                    ys.advance();
                }
                tx
            }
            (_, Some(ty)) => {
                ys.advance();
                ty
            }
            (Some(tx), None) => {
                xs.advance();
                tx
            }
            (None, None) => t_out,
        };
        let done = t_next >= t_out;
        // x and y planes meeting within rounding (pixel corners) would leave
        // a sliver; fold it into the following segment instead
        if !done && t_next - t_prev <= PARAM_TOL {
            continue;
        }
        if t_next > t_prev {
            let mid = 0.5 * (t_prev + t_next);
            let px = a[0] + mid * d[0];
            let py = a[1] + mid * d[1];
            let col = (((px + grid.half) * inv_spacing).floor().max(0.0) as usize).min(last);
            let row = (((grid.half - py) * inv_spacing).floor().max(0.0) as usize).min(last);
            visit(row, col, (t_next - t_prev) * length);
        }
        if done {
            break;
        }
        t_prev = t_next;
    }
}

/// Length of the part of segment `a -> b` inside the grid square.
pub fn chord_length(grid: &PixelGrid, a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    grid.clip(a, d)
        .map_or(0.0, |(t_in, t_out)| (t_out - t_in) * d[0].hypot(d[1]))
}

pub(crate) fn line_integral(grid: &PixelGrid, img: ArrayView2<f64>, a: [f64; 2], b: [f64; 2]) -> f64 {
    let mut sum = 0.0;
    trace_ray(grid, a, b, |r, c, len| sum += img[[r, c]] * len);
    sum
}

/// Ray-driven forward projection: entry `(v, d)` is the path-length weighted
/// sum of pixel values along the ray from the view-`v` source to the centre
/// of bin `d`.
pub fn radon_forward(img: &Image, geom: &FanGeometry) -> Result<Sinogram> {
    geom.validate()?;
    if img.dims() != (geom.image_size, geom.image_size) {
        return Err(Error::dims(format!(
            "image is {:?}, geometry expects {n}x{n}",
            img.dims(),
            n = geom.image_size
        )));
    }
    let grid = geom.pixel_grid();
    let view = img.view();
    let mut sino = Sinogram::zeros(geom.num_views, geom.num_detectors);
    let mut out = sino.view_mut();
    for v in 0..geom.num_views {
        let src = geom.source_position(v);
        for d in 0..geom.num_detectors {
            out[[v, d]] = line_integral(&grid, view, src, geom.detector_position(v, d));
        }
    }
    Ok(sino)
}
