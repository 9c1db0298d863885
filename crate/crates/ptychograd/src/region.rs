//! Copy/add/replace arithmetic between a `Rect` and the 3-D arrays
//! (slices x rows x cols) that back tiles, buffers and gradient fields.
//!
//! Every array is anchored at the origin of some rect; regions are always
//! expressed in global voxel coordinates.

use ndarray::{s, Array3, ArrayView3, ArrayViewMut3};

use crate::geometry::Rect;

fn local<'a>(
    data: &'a Array3<f64>,
    origin: (i64, i64),
    region: &Rect,
) -> ArrayView3<'a, f64> {
    let y = (region.y0 - origin.0) as usize..(region.y1 - origin.0) as usize;
    let x = (region.x0 - origin.1) as usize..(region.x1 - origin.1) as usize;
    data.slice(s![.., y, x])
}

fn local_mut<'a>(
    data: &'a mut Array3<f64>,
    origin: (i64, i64),
    region: &Rect,
) -> ArrayViewMut3<'a, f64> {
    let y = (region.y0 - origin.0) as usize..(region.y1 - origin.0) as usize;
    let x = (region.x0 - origin.1) as usize..(region.x1 - origin.1) as usize;
    data.slice_mut(s![.., y, x])
}

/// Owned copy of `region` out of an anchored array.
pub fn extract_region(data: &Array3<f64>, origin: (i64, i64), region: &Rect) -> Array3<f64> {
    if region.is_empty() {
        return Array3::zeros((data.dim().0, 0, 0));
    }
    local(data, origin, region).to_owned()
}

/// Owned copy of `region`, zero-padded where it exits the anchored array's
/// rect `avail`.
pub fn extract_region_padded(
    data: &Array3<f64>,
    avail: &Rect,
    region: &Rect,
) -> Array3<f64> {
    let s = data.dim().0;
    let mut out = Array3::zeros((s, region.height() as usize, region.width() as usize));
    let inner = region.intersect(avail);
    if !inner.is_empty() {
        let src = local(data, avail.origin(), &inner);
        let y = (inner.y0 - region.y0) as usize..(inner.y1 - region.y0) as usize;
        let x = (inner.x0 - region.x0) as usize..(inner.x1 - region.x0) as usize;
        out.slice_mut(s![.., y, x]).assign(&src);
    }
    out
}

/// dst[region] += factor * src[region], with each array anchored at its own
/// origin. `region` must lie inside both.
pub fn add_scaled_region(
    dst: &mut Array3<f64>,
    dst_origin: (i64, i64),
    src: &Array3<f64>,
    src_origin: (i64, i64),
    region: &Rect,
    factor: f64,
) {
    if region.is_empty() {
        return;
    }
    let sv = local(src, src_origin, region).to_owned();
    let mut dv = local_mut(dst, dst_origin, region);
    dv.zip_mut_with(&sv, |d, &s| *d += factor * s);
}

/// dst[region] = src[region].
pub fn copy_region(
    dst: &mut Array3<f64>,
    dst_origin: (i64, i64),
    src: &Array3<f64>,
    src_origin: (i64, i64),
    region: &Rect,
) {
    if region.is_empty() {
        return;
    }
    let sv = local(src, src_origin, region).to_owned();
    local_mut(dst, dst_origin, region).assign(&sv);
}

/// Read-only view of `region` inside an anchored array.
pub fn region_view<'a>(
    data: &'a Array3<f64>,
    origin: (i64, i64),
    region: &Rect,
) -> ArrayView3<'a, f64> {
    local(data, origin, region)
}
