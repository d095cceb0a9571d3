//! ROI convolution: a stride-1 "same" convolution whose pre-activation
//! output, bias included, is zeroed outside the union of the regions of
//! interest.
//!
//! The image-wise path gathers only the in-mask output columns, runs one
//! matrix product for all ROIs at once and scatters the result back. The
//! region-wise path in [`roi_conv_regionwise`] crops every ROI separately
//! and exists only as a benchmark oracle.

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_backward, conv2d_forward, conv_window, gemm, ConvGrads, ConvParams, Scalar, Tensor,
    Window,
};

/// Axis-aligned box with inclusive integer corners; `x` is the column,
/// `y` the row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl BBox {
    pub const fn new(x0: i32, y0: i32, x1: i32, y1: i32) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> i32 {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> i32 {
        self.y1 - self.y0 + 1
    }

    /// Pixel count, zero for degenerate boxes.
    pub fn area(&self) -> i64 {
        if self.x1 < self.x0 || self.y1 < self.y0 {
            0
        } else {
            self.width() as i64 * self.height() as i64
        }
    }

    pub fn contains(&self, row: i32, col: i32) -> bool {
        (self.y0..=self.y1).contains(&row) && (self.x0..=self.x1).contains(&col)
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.x0 >= 0
            && self.y0 >= 0
            && self.x0 <= self.x1
            && self.y0 <= self.y1
            && (self.x1 as i64) < width as i64
            && (self.y1 as i64) < height as i64
    }

    /// Intersection with `[0, width) x [0, height)`, `None` if empty.
    pub fn clip(&self, height: usize, width: usize) -> Option<BBox> {
        let b = BBox {
            x0: self.x0.max(0),
            y0: self.y0.max(0),
            x1: self.x1.min(width as i32 - 1),
            y1: self.y1.min(height as i32 - 1),
        };
        (b.x0 <= b.x1 && b.y0 <= b.y1).then_some(b)
    }
}

/// Binary grid, used both for ROI unions and ground-truth masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl BinaryMask {
    pub fn full(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            cells: vec![true; height * width],
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            cells: vec![false; height * width],
        }
    }

    pub fn from_cells(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "RoiMask::from_cells",
                expected: vec![height, width],
                got: vec![cells.len()],
            });
        }
        Ok(BinaryMask {
            height,
            width,
            cells,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.width + j]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_full(&self) -> bool {
        self.cells.iter().all(|&c| c)
    }

    /// The mask as a 0/1 `height x width` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width], |i| {
            if self.cells[i] {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Block replication by `factor` along both axes, e.g. from the feature
    /// grid to the image grid.
    pub fn upscale(&self, factor: usize) -> BinaryMask {
        let (h, w) = (self.height * factor, self.width * factor);
        let cells = (0..h * w)
            .map(|idx| self.get(idx / w / factor, idx % w / factor))
            .collect();
        BinaryMask {
            height: h,
            width: w,
            cells,
        }
    }

    /// Linear indices of the in-mask cells in row-major order.
    pub fn positions(&self) -> Vec<usize> {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| c.then_some(i))
            .collect()
    }
}

/// Indicator of the ROI union on one grid.
pub type RoiMask = BinaryMask;

/// Union of boxes on a `height x width` grid; a cell is set once no matter
/// how many boxes cover it.
pub fn rasterize_rois(boxes: &[BBox], height: usize, width: usize) -> Result<RoiMask> {
    let mut mask = RoiMask::empty(height, width);
    for b in boxes {
        if !b.fits(height, width) {
            return Err(Error::BoxOutOfGrid {
                x0: b.x0,
                y0: b.y0,
                x1: b.x1,
                y1: b.y1,
                height,
                width,
            });
        }
        for i in b.y0 as usize..=b.y1 as usize {
            mask.cells[i * width + b.x0 as usize..=i * width + b.x1 as usize].fill(true);
        }
    }
    Ok(mask)
}

/// "Same" zero padding for an odd kernel at stride 1.
pub fn same_padding(k: usize) -> usize {
    k / 2
}

fn check_mask<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    p: &ConvParams<T>,
    mask: &RoiMask,
) -> Result<(Window, usize)> {
    let (g, out_c) = conv_window(op, x, p)?;
    if (g.ho, g.wo) != (mask.height, mask.width) {
        return Err(Error::ShapeMismatch {
            op,
            expected: vec![g.ho, g.wo],
            got: vec![mask.height, mask.width],
        });
    }
    Ok((g, out_c))
}

/// `im2col` restricted to the listed output positions.
fn gather_columns<T: Scalar>(x: &[T], g: &Window, positions: &[usize]) -> Vec<T> {
    let n = positions.len();
    let mut cols = vec![T::zero(); g.rows() * n];
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for a in 0..g.k {
            for b in 0..g.k {
                let row = (c * g.k + a) * g.k + b;
                let dst = &mut cols[row * n..(row + 1) * n];
                for (d, &pos) in dst.iter_mut().zip(positions) {
                    if let Some((i, j)) = g.source(pos / g.wo, pos % g.wo, a, b) {
                        *d = plane[i * g.w + j];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`gather_columns`].
fn scatter_columns<T: Scalar>(cols: &[T], g: &Window, positions: &[usize], out: &mut [T]) {
    let n = positions.len();
    for c in 0..g.c {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for a in 0..g.k {
            for b in 0..g.k {
                let row = (c * g.k + a) * g.k + b;
                let src = &cols[row * n..(row + 1) * n];
                for (&s, &pos) in src.iter().zip(positions) {
                    if let Some((i, j)) = g.source(pos / g.wo, pos % g.wo, a, b) {
                        plane[i * g.w + j] = plane[i * g.w + j] + s;
                    }
                }
            }
        }
    }
}

/// Masked convolution. Every output scalar outside the mask is exactly zero;
/// with a full mask the result is bit-identical to [`conv2d_forward`].
pub fn roi_conv_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    mask: &RoiMask,
) -> Result<Tensor<T>> {
    let (g, out_c) = check_mask("roi_conv_forward", x, p, mask)?;
    if mask.is_full() {
        return conv2d_forward(x, p);
    }
    let plane = g.cols();
    let mut out = Tensor::zeros(&[out_c, g.ho, g.wo]);
    let positions = mask.positions();
    if positions.is_empty() {
        return Ok(out);
    }
    let n = positions.len();
    let cols = gather_columns(x.data(), &g, &positions);
    let mut packed = vec![T::zero(); out_c * n];
    gemm(
        out_c,
        g.rows(),
        n,
        p.kernel.data(),
        false,
        &cols,
        false,
        &mut packed,
        false,
    );
    let o = out.data_mut();
    for (oc, (row, &b)) in packed.chunks(n).zip(p.bias.data()).enumerate() {
        for (&v, &pos) in row.iter().zip(&positions) {
            o[oc * plane + pos] = v + b;
        }
    }
    Ok(out)
}

/// Gradients of the masked convolution: only in-mask output positions
/// contribute to the kernel, bias and input gradients.
pub fn roi_conv_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    mask: &RoiMask,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (g, out_c) = check_mask("roi_conv_backward", x, p, mask)?;
    if dy.shape() != [out_c, g.ho, g.wo] {
        return Err(Error::ShapeMismatch {
            op: "roi_conv_backward",
            expected: vec![out_c, g.ho, g.wo],
            got: dy.shape().to_vec(),
        });
    }
    if mask.is_full() {
        return conv2d_backward(x, p, dy);
    }
    let positions = mask.positions();
    let n = positions.len();
    let rows = g.rows();
    let plane = g.cols();

    let mut dy_packed = vec![T::zero(); out_c * n];
    for (oc, row) in dy_packed.chunks_mut(n.max(1)).enumerate().take(out_c) {
        for (d, &pos) in row.iter_mut().zip(&positions) {
            *d = dy.data()[oc * plane + pos];
        }
    }
    let mut dk = vec![T::zero(); out_c * rows];
    let mut dx = vec![T::zero(); x.len()];
    let mut db = vec![T::zero(); out_c];
    if n > 0 {
        let cols = gather_columns(x.data(), &g, &positions);
        gemm(
            out_c, n, rows, &dy_packed, false, &cols, true, &mut dk, false,
        );
        for (d, row) in db.iter_mut().zip(dy_packed.chunks(n)) {
            *d = row.iter().copied().sum();
        }
        let mut dcols = vec![T::zero(); rows * n];
        gemm(
            rows,
            out_c,
            n,
            p.kernel.data(),
            true,
            &dy_packed,
            false,
            &mut dcols,
            false,
        );
        scatter_columns(&dcols, &g, &positions, &mut dx);
    }
    Ok(ConvGrads {
        dx: Tensor::from_vec(x.shape(), dx)?,
        dkernel: Tensor::from_vec(p.kernel.shape(), dk)?,
        dbias: Tensor::from_vec(&[out_c], db)?,
    })
}

/// Region-wise reference: each ROI is cropped with its kernel halo,
/// convolved on its own, and pasted back. Overlapping ROIs are recomputed.
pub fn roi_conv_regionwise<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    rois: &[BBox],
) -> Result<Tensor<T>> {
    let (g, out_c) = conv_window("roi_conv_regionwise", x, p)?;
    if g.stride != 1 || g.ho != g.h || g.wo != g.w {
        return Err(Error::invalid(
            "roi_conv_regionwise",
            "needs stride 1 and same padding",
        ));
    }
    let halo = g.pad;
    let mut out = Tensor::zeros(&[out_c, g.h, g.w]);
    let crop_params = ConvParams {
        kernel: p.kernel.clone(),
        bias: p.bias.clone(),
        stride: 1,
        padding: 0,
    };
    for b in rois {
        if !b.fits(g.h, g.w) {
            return Err(Error::BoxOutOfGrid {
                x0: b.x0,
                y0: b.y0,
                x1: b.x1,
                y1: b.y1,
                height: g.h,
                width: g.w,
            });
        }
        let (bh, bw) = (b.height() as usize, b.width() as usize);
        let (ch, cw) = (bh + g.k - 1, bw + g.k - 1);
        let mut crop = Tensor::zeros(&[g.c, ch, cw]);
        let cd = crop.data_mut();
        for c in 0..g.c {
            for ci in 0..ch {
                let i = b.y0 as isize + ci as isize - halo as isize;
                if i < 0 || i as usize >= g.h {
                    continue;
                }
                for cj in 0..cw {
                    let j = b.x0 as isize + cj as isize - halo as isize;
                    if j >= 0 && (j as usize) < g.w {
                        cd[(c * ch + ci) * cw + cj] =
                            x.data()[(c * g.h + i as usize) * g.w + j as usize];
                    }
                }
            }
        }
        let y = conv2d_forward(&crop, &crop_params)?;
        let od = out.data_mut();
        for oc in 0..out_c {
            for bi in 0..bh {
                let row = (oc * g.h + b.y0 as usize + bi) * g.w + b.x0 as usize;
                od[row..row + bw]
                    .copy_from_slice(&y.data()[(oc * bh + bi) * bw..(oc * bh + bi + 1) * bw]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize, k: usize) -> ConvParams<f64> {
        ConvParams::new(
            Tensor::uniform(&[out_c, in_c, k, k], 1.0, rng),
            Tensor::uniform(&[out_c], 1.0, rng),
            1,
            same_padding(k),
        )
        .unwrap()
    }

    #[test]
    fn rasterize_cases() {
        let m = rasterize_rois(&[BBox::new(0, 0, 1, 1)], 3, 3).unwrap();
        assert_eq!(
            m.cells(),
            &[true, true, false, true, true, false, false, false, false]
        );
        let a = rasterize_rois(&[BBox::new(0, 0, 2, 2), BBox::new(1, 1, 2, 2)], 3, 3).unwrap();
        let b = rasterize_rois(&[BBox::new(0, 0, 2, 2)], 3, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(rasterize_rois(&[], 3, 3).unwrap().count(), 0);
    }

    #[test]
    fn rasterize_rejects_boxes_off_grid() {
        assert!(rasterize_rois(&[BBox::new(-1, 0, 1, 1)], 3, 3).is_err());
        assert!(rasterize_rois(&[BBox::new(0, 0, 3, 1)], 3, 3).is_err());
    }

    #[test]
    fn masked_ones_example() {
        let x = Tensor::<f64>::full(&[1, 4, 4], 1.0);
        let p = ConvParams::with_kernel(Tensor::full(&[1, 1, 1, 1], 1.0), 1, 0).unwrap();
        let m = rasterize_rois(&[BBox::new(0, 0, 1, 1)], 4, 4).unwrap();
        let y = roi_conv_forward(&x, &p, &m).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i < 2 && j < 2 { 1.0 } else { 0.0 };
                assert_eq!(y.at3(0, i, j), want);
            }
        }
    }

    #[test]
    fn empty_mask_zeroes_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::uniform(&[2, 5, 5], 1.0, &mut rng);
        let p = params(&mut rng, 3, 2, 3);
        let m = RoiMask::empty(5, 5);
        assert_eq!(roi_conv_forward(&x, &p, &m).unwrap().max_abs(), 0.0);
        let dy = Tensor::uniform(&[3, 5, 5], 1.0, &mut rng);
        let g = roi_conv_backward(&x, &p, &m, &dy).unwrap();
        assert_eq!(
            g.dx.max_abs() + g.dkernel.max_abs() + g.dbias.max_abs(),
            0.0
        );
    }

    #[test]
    fn full_mask_matches_dense_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f32>::uniform(&[2, 6, 7], 1.0, &mut rng);
        let p = ConvParams::new(
            Tensor::uniform(&[3, 2, 3, 3], 1.0, &mut rng),
            Tensor::uniform(&[3], 1.0, &mut rng),
            1,
            1,
        )
        .unwrap();
        let m = RoiMask::full(6, 7);
        assert_eq!(
            roi_conv_forward(&x, &p, &m).unwrap(),
            conv2d_forward(&x, &p).unwrap()
        );
        let dy = Tensor::uniform(&[3, 6, 7], 1.0, &mut rng);
        assert_eq!(
            roi_conv_backward(&x, &p, &m, &dy).unwrap(),
            conv2d_backward(&x, &p, &dy).unwrap()
        );
    }

    #[test]
    fn mask_extent_mismatch_is_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 4, 4]);
        let p = ConvParams::with_kernel(Tensor::zeros(&[1, 1, 3, 3]), 1, 1).unwrap();
        assert!(roi_conv_forward(&x, &p, &RoiMask::full(3, 4)).is_err());
        assert!(
            roi_conv_backward(&x, &p, &RoiMask::full(4, 4), &Tensor::zeros(&[1, 3, 4])).is_err()
        );
    }

    #[test]
    fn regionwise_agrees_on_union() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::uniform(&[2, 9, 8], 1.0, &mut rng);
        let p = params(&mut rng, 3, 2, 3);
        let rois = [
            BBox::new(0, 0, 3, 2),
            BBox::new(2, 1, 7, 8),
            BBox::new(5, 5, 5, 5),
        ];
        let m = rasterize_rois(&rois, 9, 8).unwrap();
        let a = roi_conv_forward(&x, &p, &m).unwrap();
        let b = roi_conv_regionwise(&x, &p, &rois).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn upscale_replicates_blocks() {
        let m = rasterize_rois(&[BBox::new(1, 0, 1, 0)], 2, 2)
            .unwrap()
            .upscale(2);
        assert_eq!(m.height(), 4);
        assert_eq!(m.positions(), vec![2, 3, 6, 7]);
    }
}
