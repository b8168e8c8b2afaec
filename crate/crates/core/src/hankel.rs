//! Block-Hankel embedding of a sinogram, its overlap-averaging inverse, the
//! triple*-partition with mean recombination, and patch tiling for the
//! score models.
//!
//! The Hankel matrix has one row per `l x l` sliding window (stride 1) and
//! `l^2` columns. Windows are enumerated row-major over the
//! `(L_x - l + 1) x (L_y - l + 1)` positions and vectorised row-major, so
//! row `k = i * (L_y - l + 1) + j`, column `a * l + b` holds `x[i + a][j + b]`.

use std::ops::Range;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Sinogram;
use crate::rng;

pub const DEFAULT_WINDOW: usize = 8;
pub const DEFAULT_PATCH_ROWS: usize = 64;

/// Shape of the sinogram a Hankel matrix was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDims {
    pub rows: usize,
    pub cols: usize,
    pub window: usize,
}

impl SourceDims {
    pub fn new(rows: usize, cols: usize, window: usize) -> Result<Self> {
        if window < 2 {
            return Err(Error::invalid(format!("window must be at least 2, got {window}")));
        }
        if rows < window || cols < window {
            return Err(Error::invalid(format!(
                "{window}x{window} window does not fit a {rows}x{cols} sinogram"
            )));
        }
        Ok(Self { rows, cols, window })
    }

    /// Window positions along each axis.
    pub fn positions(&self) -> (usize, usize) {
        (self.rows - self.window + 1, self.cols - self.window + 1)
    }

    pub fn hankel_rows(&self) -> usize {
        let (pr, pc) = self.positions();
        pr * pc
    }

    pub fn hankel_cols(&self) -> usize {
        self.window * self.window
    }

    /// Number of windows covering sinogram pixel `(r, c)`.
    pub fn coverage(&self, r: usize, c: usize) -> usize {
        let (pr, pc) = self.positions();
        // window starts i with max(0, p - l + 1) <= i <= min(p, n - 1)
        let span = |p: usize, n: usize| p.min(n - 1) + 1 - (p + 1).saturating_sub(self.window);
        span(r, pr) * span(c, pc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HankelMatrix {
    data: Array2<f64>,
    src: SourceDims,
}

impl HankelMatrix {
    pub fn from_parts(data: Array2<f64>, src: SourceDims) -> Result<Self> {
        let m = Self { data, src };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<()> {
        let want = (self.src.hankel_rows(), self.src.hankel_cols());
        if self.data.dim() != want || self.src.window < 2 || self.src.rows < self.src.window || self.src.cols < self.src.window
        {
            return Err(Error::dims(format!(
                "Hankel data {:?} inconsistent with source dims {:?}",
                self.data.dim(),
                self.src
            )));
        }
        Ok(())
    }

    pub fn src_dims(&self) -> SourceDims {
        self.src
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn data_mut(&mut self) -> &mut Array2<f64> {
        &mut self.data
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }
}

/// Builds the `P x l^2` Hankel matrix of `x`.
pub fn hankel_transform(x: &Sinogram, window: usize) -> Result<HankelMatrix> {
    let (rows, cols) = x.dims();
    let src = SourceDims::new(rows, cols, window)?;
    let (pr, pc) = src.positions();
    let l = window;
    let xv = x.view();
    let mut data = Array2::zeros((pr * pc, l * l));
    for i in 0..pr {
        for j in 0..pc {
            let mut row = data.row_mut(i * pc + j);
            for a in 0..l {
                for b in 0..l {
                    row[a * l + b] = xv[[i + a, j + b]];
                }
            }
        }
    }
    Ok(HankelMatrix { data, src })
}

/// Overlap-averaging inverse: each sinogram pixel is the mean of all Hankel
/// entries that map to it. This is the least-squares inverse of
/// [`hankel_transform`].
pub fn hankel_pinv(h: &HankelMatrix) -> Result<Sinogram> {
    h.check()?;
    let src = h.src;
    let (pr, pc) = src.positions();
    let l = src.window;
    let mut acc = Array2::<f64>::zeros((src.rows, src.cols));
    for i in 0..pr {
        for j in 0..pc {
            let row = h.data.row(i * pc + j);
            for a in 0..l {
                for b in 0..l {
                    acc[[i + a, j + b]] += row[a * l + b];
                }
            }
        }
    }
    for ((r, c), v) in acc.indexed_iter_mut() {
        *v /= src.coverage(r, c) as f64;
    }
    Ok(Sinogram::from_array_unchecked(acc))
}

/// Row bookkeeping of the triple*-partition of a `P`-row matrix.
///
/// `part1 = [0, m1)`, `part2 = [m1, P)` with `m1 = floor(P/2)`. Each part is
/// split in a left block of `floor(m/2)` rows and a right remainder, and
/// `part3 = [H1R; H2L]` spans the middle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleLayout {
    pub total: usize,
    pub m1: usize,
    pub left1: usize,
    pub left2: usize,
}

pub const MIN_PARTITION_ROWS: usize = 8;

impl TripleLayout {
    pub fn new(total: usize) -> Result<Self> {
        if total < MIN_PARTITION_ROWS {
            return Err(Error::invalid(format!(
                "triple*-partition needs at least {MIN_PARTITION_ROWS} rows, got {total}"
            )));
        }
        let m1 = total / 2;
        Ok(Self {
            total,
            m1,
            left1: m1 / 2,
            left2: (total - m1) / 2,
        })
    }

    pub fn m2(&self) -> usize {
        self.total - self.m1
    }

    /// Global row ranges of part1, part2 and part3.
    pub fn ranges(&self) -> [Range<usize>; 3] {
        [0..self.m1, self.m1..self.total, self.left1..self.m1 + self.left2]
    }

    /// Rows of H1R, equivalently the split point of part3 into H3L / H3R.
    pub fn right1(&self) -> usize {
        self.m1 - self.left1
    }

    pub fn right2(&self) -> usize {
        self.m2() - self.left2
    }
}

/// The three triple*-partition blocks of a Hankel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSet {
    parts: [Array2<f64>; 3],
    layout: TripleLayout,
    src: SourceDims,
}

impl PartitionSet {
    pub fn layout(&self) -> TripleLayout {
        self.layout
    }

    pub fn src_dims(&self) -> SourceDims {
        self.src
    }

    pub fn ranges(&self) -> [Range<usize>; 3] {
        self.layout.ranges()
    }

    pub fn part(&self, k: usize) -> ArrayView2<'_, f64> {
        self.parts[k].view()
    }

    pub fn part_mut(&mut self, k: usize) -> &mut Array2<f64> {
        &mut self.parts[k]
    }

    pub fn parts(&self) -> &[Array2<f64>; 3] {
        &self.parts
    }

    /// Replaces the blocks, checking each has the row count of its range.
    pub fn with_parts(&self, parts: [Array2<f64>; 3]) -> Result<Self> {
        let set = Self {
            parts,
            layout: self.layout,
            src: self.src,
        };
        set.check()?;
        Ok(set)
    }

    fn check(&self) -> Result<()> {
        let cols = self.src.hankel_cols();
        for (k, (part, range)) in self.parts.iter().zip(self.ranges()).enumerate() {
            if part.dim() != (range.len(), cols) {
                return Err(Error::dims(format!(
                    "part{} is {:?}, its range {:?} needs {}x{}",
                    k + 1,
                    part.dim(),
                    range,
                    range.len(),
                    cols
                )));
            }
        }
        Ok(())
    }
}

pub fn partition_triple_star(h: &HankelMatrix) -> Result<PartitionSet> {
    let layout = TripleLayout::new(h.rows())?;
    let parts = layout
        .ranges()
        .map(|r| h.data.slice(s![r, ..]).to_owned());
    Ok(PartitionSet {
        parts,
        layout,
        src: h.src,
    })
}

/// Stitches `[H1L; (H1R + H3L)/2; (H2L + H3R)/2; H2R]`.
pub fn recombine(set: &PartitionSet) -> Result<HankelMatrix> {
    set.check()?;
    let lay = set.layout;
    let [p1, p2, p3] = &set.parts;
    let r1 = lay.right1();
    let mut out = Array2::zeros((lay.total, set.src.hankel_cols()));
    out.slice_mut(s![..lay.left1, ..]).assign(&p1.slice(s![..lay.left1, ..]));
    let mut mid1 = out.slice_mut(s![lay.left1..lay.m1, ..]);
    mid1.assign(&p1.slice(s![lay.left1.., ..]));
    mid1 += &p3.slice(s![..r1, ..]);
    mid1 /= 2.0;
    let mut mid2 = out.slice_mut(s![lay.m1..lay.m1 + lay.left2, ..]);
    mid2.assign(&p2.slice(s![..lay.left2, ..]));
    mid2 += &p3.slice(s![r1.., ..]);
    mid2 /= 2.0;
    out.slice_mut(s![lay.m1 + lay.left2.., ..])
        .assign(&p2.slice(s![lay.left2.., ..]));
    HankelMatrix::from_parts(out, set.src)
}

/// A stack of equally sized row blocks cut from one partition.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTensor {
    patches: Array3<f64>,
    origins: Vec<usize>,
}

impl PatchTensor {
    pub fn new(patches: Array3<f64>, origins: Vec<usize>) -> Result<Self> {
        if patches.len_of(Axis(0)) != origins.len() {
            return Err(Error::dims(format!(
                "{} patches but {} origins",
                patches.len_of(Axis(0)),
                origins.len()
            )));
        }
        Ok(Self { patches, origins })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// `(patch rows, patch cols)`
    pub fn patch_shape(&self) -> (usize, usize) {
        let (_, r, c) = self.patches.dim();
        (r, c)
    }

    pub fn origins(&self) -> &[usize] {
        &self.origins
    }

    pub fn patches(&self) -> ArrayView3<'_, f64> {
        self.patches.view()
    }

    pub fn patch(&self, k: usize) -> ArrayView2<'_, f64> {
        self.patches.index_axis(Axis(0), k)
    }

    pub fn into_parts(self) -> (Array3<f64>, Vec<usize>) {
        (self.patches, self.origins)
    }

    fn from_origins(part: ArrayView2<f64>, patch_rows: usize, origins: Vec<usize>) -> Self {
        let mut patches = Array3::zeros((origins.len(), patch_rows, part.ncols()));
        for (mut dst, &o) in patches.outer_iter_mut().zip(&origins) {
            dst.assign(&part.slice(s![o..o + patch_rows, ..]));
        }
        Self { patches, origins }
    }
}

fn check_patch_rows(part: ArrayView2<f64>, patch_rows: usize) -> Result<()> {
    if patch_rows == 0 || part.nrows() < patch_rows {
        return Err(Error::invalid(format!(
            "partition has {} rows, patches need {patch_rows}",
            part.nrows()
        )));
    }
    Ok(())
}

/// `count` contiguous `patch_rows`-row blocks at uniform random offsets.
pub fn extract_patches_with<R: Rng + ?Sized>(
    part: ArrayView2<f64>,
    count: usize,
    patch_rows: usize,
    rng: &mut R,
) -> Result<PatchTensor> {
    check_patch_rows(part, patch_rows)?;
    let max_origin = part.nrows() - patch_rows;
    let origins = (0..count).map(|_| rng.random_range(0..=max_origin)).collect();
    Ok(PatchTensor::from_origins(part, patch_rows, origins))
}

pub fn extract_patches(part: ArrayView2<f64>, count: usize, patch_rows: usize, seed: u64) -> Result<PatchTensor> {
    extract_patches_with(part, count, patch_rows, &mut rng::stream(seed, rng::STREAM_PATCHES))
}

/// Covers every row: `floor(rows / patch_rows)` aligned tiles, plus one
/// tile aligned to the last row when there is a remainder.
pub fn tile_for_inference(part: ArrayView2<f64>, patch_rows: usize) -> Result<PatchTensor> {
    check_patch_rows(part, patch_rows)?;
    let rows = part.nrows();
    let mut origins: Vec<usize> = (0..rows / patch_rows).map(|k| k * patch_rows).collect();
    if !rows.is_multiple_of(patch_rows) {
        origins.push(rows - patch_rows);
    }
    Ok(PatchTensor::from_origins(part, patch_rows, origins))
}

/// Inverse of [`tile_for_inference`]; rows covered by several tiles are
/// averaged.
pub fn untile(tiles: &PatchTensor, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let (pr, pc) = tiles.patch_shape();
    if pc != cols {
        return Err(Error::dims(format!("tiles have {pc} columns, target has {cols}")));
    }
    let mut acc = Array2::<f64>::zeros((rows, cols));
    let mut count = vec![0u32; rows];
    for (tile, &o) in tiles.patches.outer_iter().zip(&tiles.origins) {
        if o + pr > rows {
            return Err(Error::dims(format!("tile at row {o} overruns {rows} rows")));
        }
        let mut dst = acc.slice_mut(s![o..o + pr, ..]);
        dst += &tile;
        for c in &mut count[o..o + pr] {
            *c += 1;
        }
    }
    for (mut row, &n) in acc.outer_iter_mut().zip(&count) {
        match n {
            0 => return Err(Error::dims("tiles leave rows uncovered")),
            1 => {}
            n => row /= n as f64,
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_sino(rows: usize, cols: usize, seed: u64) -> Sinogram {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Sinogram::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn counting_matrix(rows: usize) -> HankelMatrix {
        // any src dims with the right row count will do; use a 1-column-position strip
        let src = SourceDims::new(rows + 1, 2, 2).unwrap();
        let data = Array2::from_shape_fn((rows, 4), |(r, c)| (r * 4 + c) as f64);
        HankelMatrix::from_parts(data, src).unwrap()
    }

    #[test]
    fn clinical_sizes() {
        let src = SourceDims::new(768, 768, 8).unwrap();
        assert_eq!((src.hankel_rows(), src.hankel_cols()), (579121, 64));
        let h = hankel_transform(&random_sino(5, 5, 0), 3).unwrap();
        assert_eq!((h.rows(), h.cols()), (9, 9));
    }

    #[test]
    fn single_window_is_vectorised_sinogram() {
        let x = random_sino(8, 8, 1);
        let h = hankel_transform(&x, 8).unwrap();
        assert_eq!(h.rows(), 1);
        assert_eq!(h.view().row(0).to_vec(), x.to_vec());
    }

    #[test]
    fn window_too_large() {
        assert!(hankel_transform(&random_sino(5, 9, 0), 6).is_err());
        assert!(hankel_transform(&random_sino(5, 5, 0), 1).is_err());
    }

    #[test]
    fn round_trip_is_exact() {
        let x = random_sino(64, 64, 2);
        let back = hankel_pinv(&hankel_transform(&x, 8).unwrap()).unwrap();
        let err = x.view().iter().zip(back.view().iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-12, "{err}");
    }

    #[test]
    fn constant_matrix_inverts_to_constant() {
        let src = SourceDims::new(7, 9, 3).unwrap();
        let h = HankelMatrix::from_parts(Array2::from_elem((35, 9), 2.5), src).unwrap();
        assert!(hankel_pinv(&h).unwrap().view().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn single_entry_perturbation_spreads_by_coverage() {
        let x = random_sino(6, 7, 3);
        let mut h = hankel_transform(&x, 3).unwrap();
        // window at position (1, 2), offset (2, 1) -> pixel (3, 3)
        let (_, pc) = h.src_dims().positions();
        let row = pc + 2;
        let col = 2 * 3 + 1;
        h.data_mut()[[row, col]] += 0.9;
        // brute-force window count for pixel (3, 3)
        let n = (0..4).flat_map(|i| (0..5).map(move |j| (i, j)))
            .filter(|&(i, j)| (i..i + 3).contains(&3) && (j..j + 3).contains(&3))
            .count();
        assert_eq!(n, 9);
        let back = hankel_pinv(&h).unwrap();
        for ((r, c), v) in back.view().indexed_iter() {
            let want = x.view()[[r, c]] + if (r, c) == (3, 3) { 0.9 / n as f64 } else { 0.0 };
            assert!((v - want).abs() < 1e-14, "({r},{c})");
        }
    }

    #[test]
    fn coverage_matches_enumeration() {
        let src = SourceDims::new(6, 9, 4).unwrap();
        let (pr, pc) = src.positions();
        for r in 0..6 {
            for c in 0..9 {
                let brute = (0..pr)
                    .flat_map(|i| (0..pc).map(move |j| (i, j)))
                    .filter(|&(i, j)| i <= r && r < i + 4 && j <= c && c < j + 4)
                    .count();
                assert_eq!(src.coverage(r, c), brute, "({r},{c})");
            }
        }
    }

    #[test]
    fn corrupted_dims_rejected() {
        let src = SourceDims::new(5, 5, 3).unwrap();
        assert!(HankelMatrix::from_parts(Array2::zeros((8, 9)), src).is_err());
    }

    #[test]
    fn clinical_partition_sizes() {
        let lay = TripleLayout::new(579121).unwrap();
        let [p1, p2, p3] = lay.ranges();
        assert_eq!((p1.len(), p2.len(), p3.len()), (289560, 289561, 289560));
        assert_eq!(p3, 144780..434340);
        assert_eq!((lay.left1, lay.right1(), lay.left2, lay.right2()), (144780, 144780, 144780, 144781));
    }

    #[test]
    fn nine_row_partition() {
        let lay = TripleLayout::new(9).unwrap();
        let [p1, p2, p3] = lay.ranges();
        assert_eq!((p1.len(), p2.len(), p3.len()), (4, 5, 4));
        assert_eq!((lay.left1, lay.right1(), lay.left2, lay.right2()), (2, 2, 2, 3));
        assert_eq!(p3, 2..6);
        assert!(TripleLayout::new(7).is_err());
    }

    #[test]
    fn partition_recombine_identity() {
        let h = counting_matrix(37);
        let set = partition_triple_star(&h).unwrap();
        assert_eq!(set.part(2), h.view().slice(s![set.ranges()[2].clone(), ..]));
        assert_eq!(recombine(&set).unwrap(), h);
    }

    #[test]
    fn offset_part3_shifts_overlap_by_half() {
        let h = counting_matrix(40);
        let set = partition_triple_star(&h).unwrap();
        let mut parts = set.parts().clone();
        parts[2] += 2.0;
        let out = recombine(&set.with_parts(parts).unwrap()).unwrap();
        let mid = set.ranges()[2].clone();
        for r in 0..40 {
            let d = out.view()[[r, 0]] - h.view()[[r, 0]];
            let want = if mid.contains(&r) { 1.0 } else { 0.0 };
            assert_eq!(d, want, "row {r}");
        }
    }

    #[test]
    fn mismatched_parts_rejected() {
        let set = partition_triple_star(&counting_matrix(20)).unwrap();
        let mut parts = set.parts().clone();
        parts[2] = Array2::zeros((3, 4));
        assert!(set.with_parts(parts).is_err());
    }

    #[test]
    fn patches_from_minimal_partition() {
        let part = Array2::from_shape_fn((64, 64), |(r, c)| (r + c) as f64);
        let t = extract_patches(part.view(), 3, 64, 9).unwrap();
        assert_eq!(t.origins(), &[0, 0, 0]);
        for k in 0..3 {
            assert_eq!(t.patch(k), part.view());
        }
        let narrow = Array2::<f64>::zeros((63, 64));
        assert!(extract_patches(narrow.view(), 1, 64, 0).is_err());
    }

    #[test]
    fn patch_offsets_are_seeded() {
        let part = Array2::<f64>::zeros((500, 64));
        let a = extract_patches(part.view(), 20, 64, 5).unwrap();
        let b = extract_patches(part.view(), 20, 64, 5).unwrap();
        assert_eq!(a.origins(), b.origins());
        assert!(a.origins().iter().all(|&o| o <= 436));
    }

    #[test]
    fn tiling_counts() {
        let part = Array2::<f64>::zeros((128, 64));
        let t = tile_for_inference(part.view(), 64).unwrap();
        assert_eq!(t.origins(), &[0, 64]);
        // 289560 = 4524 * 64 + 24
        let rows = 289560;
        let full = rows / 64;
        assert_eq!((full, rows % 64), (4524, 24));
        let part = Array2::<f64>::zeros((200, 64));
        let t = tile_for_inference(part.view(), 64).unwrap();
        assert_eq!(t.origins(), &[0, 64, 128, 136]);
    }

    #[test]
    fn untile_inverts_tile() {
        let part = Array2::from_shape_fn((150, 64), |(r, c)| ((r * 31 + c * 7) % 13) as f64 * 0.37);
        let t = tile_for_inference(part.view(), 64).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(untile(&t, 150, 64).unwrap(), part);
        assert!(tile_for_inference(part.slice(s![..50, ..]), 64).is_err());
    }
}
