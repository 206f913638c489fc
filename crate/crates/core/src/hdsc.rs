//! Hierarchical dense spatial coordinates.
//!
//! For a crop `[t, b) x [l, r)` of slice `z` in an `H x W x Z` volume, the
//! native-resolution planes are
//!
//! ```text
//! i[y][x] = (l + x) / W      j[y][x] = (t + y) / H      k[y][x] = z / Z
//! ```
//!
//! At a decoder stage of resolution `(h', w')` the planes are regenerated
//! analytically as corner-aligned linear ramps between the same endpoints,
//! which is what corner-aligned bilinear resampling of the native planes
//! would produce.

use candle_core::{DType, Device, Tensor};

use crate::data::VolumeDims;
use crate::error::{Error, Result};
use crate::plane::Plane;
use crate::sampling::CropBox;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateGrid {
    pub i_plane: Plane<f64>,
    pub j_plane: Plane<f64>,
    pub k_plane: Plane<f64>,
    pub source_box: CropBox,
    pub resolution: (usize, usize),
}

// Corner-aligned ramp over pixel indices `first..=last`, divided by `extent`.
// Interpolating in index space keeps the native-resolution values exact.
fn ramp(first: usize, last: usize, extent: usize, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![first as f64 / extent as f64];
    }
    let span = (last - first) as f64;
    (0..n)
        .map(|k| (first as f64 + span * k as f64 / (n - 1) as f64) / extent as f64)
        .collect()
}

pub fn dense_coords(bbox: &CropBox, dims: VolumeDims, resolution: (usize, usize)) -> Result<CoordinateGrid> {
    bbox.validate(dims)?;
    let (h, w) = resolution;
    if h == 0 || w == 0 {
        return Err(Error::Shape(format!("grid resolution {resolution:?} must be positive")));
    }
    let cols = ramp(bbox.left, bbox.right - 1, dims.width, w);
    let rows = ramp(bbox.top, bbox.bottom - 1, dims.height, h);
    let k = bbox.z as f64 / dims.depth as f64;
    Ok(CoordinateGrid {
        i_plane: Plane::from_fn(h, w, |_, x| cols[x]),
        j_plane: Plane::from_fn(h, w, |y, _| rows[y]),
        k_plane: Plane::filled(h, w, k),
        source_box: *bbox,
        resolution,
    })
}

impl CoordinateGrid {
    /// `(3, h', w')` tensor holding the i, j, k planes in that order.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w) = self.resolution;
        let data: Vec<f64> = self
            .i_plane
            .data()
            .iter()
            .chain(self.j_plane.data())
            .chain(self.k_plane.data())
            .copied()
            .collect();
        Ok(Tensor::from_vec(data, (3, h, w), device)?.to_dtype(dtype)?)
    }
}

/// Stacks per-sample grids into a `(B, 3, h', w')` tensor.
pub fn stack_grids(grids: &[CoordinateGrid], dtype: DType, device: &Device) -> Result<Tensor> {
    let planes = grids
        .iter()
        .map(|g| g.to_tensor(dtype, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&planes, 0)?)
}

/// Appends the i, j, k planes after the feature channels of a `(B, C, h', w')` batch.
pub fn concat_coords(features: &Tensor, grids: &[CoordinateGrid]) -> Result<Tensor> {
    let (b, _c, h, w) = features.dims4()?;
    if grids.len() != b {
        return Err(Error::Shape(format!("{} grids for a batch of {b}", grids.len())));
    }
    if let Some(g) = grids.iter().find(|g| g.resolution != (h, w)) {
        return Err(Error::Shape(format!(
            "grid resolution {:?} does not match features {:?}",
            g.resolution,
            (h, w)
        )));
    }
    let coords = stack_grids(grids, features.dtype(), features.device())?;
    Ok(Tensor::cat(&[features, &coords], 1)?)
}

/// One grid per decoder stage (ordered coarse to fine), all describing the same box.
pub fn hdsc_plan(resolutions: &[(usize, usize)], bbox: &CropBox, dims: VolumeDims) -> Result<Vec<CoordinateGrid>> {
    resolutions
        .iter()
        .map(|&r| dense_coords(bbox, dims, r))
        .collect()
}
