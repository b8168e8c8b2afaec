//! Row-major 2D arrays for images and sinograms.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};

macro_rules! grid_type {
    ($(#[$doc:meta])* $name:ident, $rows:ident, $cols:ident, $label:literal) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            data: Array2<f64>,
        }

        impl $name {
            pub fn zeros($rows: usize, $cols: usize) -> Self {
                Self { data: Array2::zeros(($rows, $cols)) }
            }

            pub fn from_elem($rows: usize, $cols: usize, value: f64) -> Self {
                Self { data: Array2::from_elem(($rows, $cols), value) }
            }

            /// Wraps an array, rejecting NaN and infinite entries.
            pub fn from_array(data: Array2<f64>) -> Result<Self> {
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite($label));
                }
                Ok(Self { data })
            }

            pub fn from_vec($rows: usize, $cols: usize, values: Vec<f64>) -> Result<Self> {
                let len = values.len();
                let data = Array2::from_shape_vec(($rows, $cols), values).map_err(|_| {
                    Error::dims(format!(
                        "{} of {}x{} needs {} values, got {}",
                        $label,
                        $rows,
                        $cols,
                        $rows * $cols,
                        len
                    ))
                })?;
                Self::from_array(data)
            }

            pub fn $rows(&self) -> usize {
                self.data.nrows()
            }

            pub fn $cols(&self) -> usize {
                self.data.ncols()
            }

            pub fn dims(&self) -> (usize, usize) {
                self.data.dim()
            }

            pub fn view(&self) -> ArrayView2<'_, f64> {
                self.data.view()
            }

            pub fn view_mut(&mut self) -> ArrayViewMut2<'_, f64> {
                self.data.view_mut()
            }

            pub fn array(&self) -> &Array2<f64> {
                &self.data
            }

            pub fn into_array(self) -> Array2<f64> {
                self.data
            }

            /// Row-major copy of the values.
            pub fn to_vec(&self) -> Vec<f64> {
                self.data.iter().copied().collect()
            }

            pub fn is_finite(&self) -> bool {
                self.data.iter().all(|v| v.is_finite())
            }

            pub fn max(&self) -> f64 {
                self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }

            pub fn min(&self) -> f64 {
                self.data.iter().copied().fold(f64::INFINITY, f64::min)
            }

            pub fn scaled(&self, factor: f64) -> Self {
                Self { data: &self.data * factor }
            }

            #[allow(dead_code)]
            pub(crate) fn from_array_unchecked(data: Array2<f64>) -> Self {
                Self { data }
            }
        }
    };
}

grid_type!(
    /// Attenuation map, `height` rows by `width` columns. Row 0 is the top
    /// of the field of view.
    Image,
    height,
    width,
    "image"
);

grid_type!(
    /// Projection data, one row per view and one column per detector bin.
    Sinogram,
    num_views,
    num_detectors,
    "sinogram"
);

/// Euclidean norm of the elementwise difference of two equally shaped arrays.
pub(crate) fn diff_norm(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
