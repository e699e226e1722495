use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Per-pixel mask sums must be within this distance of one.
pub const MASK_SUM_TOLERANCE: f64 = 1e-4;

/// `(H, W, 2)` grid of normalized `(x, y)` pixel-center coordinates.
pub fn identity_grid(h: usize, w: usize, dtype: DType, device: &Device) -> candle_core::Result<Tensor> {
    let axis = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|i| if n > 1 { -1.0 + 2.0 * i as f64 / (n - 1) as f64 } else { 0.0 })
            .collect()
    };
    let (xs, ys) = (axis(w), axis(h));
    let mut data = Vec::with_capacity(h * w * 2);
    for y in &ys {
        for x in &xs {
            data.push(*x);
            data.push(*y);
        }
    }
    Tensor::from_vec(data, (h, w, 2), device)?.to_dtype(dtype)
}

/// Local affine motion around a keypoint: `p_s + J (z − p_d)`.
pub fn sparse_motion<const N: usize>(
    z: [f64; N],
    p_source: [f64; N],
    p_driving: [f64; N],
    jacobian: [[f64; N]; N],
) -> [f64; N] {
    let mut out = p_source;
    for (i, o) in out.iter_mut().enumerate() {
        for j in 0..N {
            *o += jacobian[i][j] * (z[j] - p_driving[j]);
        }
    }
    out
}

/// Evaluates every keypoint's affine motion on a grid.
///
/// `grid (H,W,2)`, `p_source`/`p_driving (B,K,2)`, `jacobian (B,2,2)` → `(B,K,H,W,2)`.
pub fn sparse_motion_tensor(
    grid: &Tensor,
    p_source: &Tensor,
    p_driving: &Tensor,
    jacobian: &Tensor,
) -> candle_core::Result<Tensor> {
    let (h, w, _) = grid.dims3()?;
    let (b, k, _) = p_source.dims3()?;
    let offsets = grid
        .reshape((1, 1, h, w, 2))?
        .broadcast_sub(&p_driving.reshape((b, k, 1, 1, 2))?)?;
    let moved = offsets
        .reshape((b, k * h * w, 2))?
        .matmul(&jacobian.transpose(1, 2)?.contiguous()?)?
        .reshape((b, k, h, w, 2))?;
    moved.broadcast_add(&p_source.reshape((b, k, 1, 1, 2))?)
}

/// Convex combination of candidate flows: `candidates (B,K+1,H,W,2)`,
/// `masks (B,K+1,H,W)` → `(B,H,W,2)`.
pub fn dense_flow_tensor(candidates: &Tensor, masks: &Tensor) -> candle_core::Result<Tensor> {
    candidates.broadcast_mul(&masks.unsqueeze(4)?)?.sum(1)
}

/// Dense backward flow with the mask stack that produced it.
#[derive(Clone, Debug)]
pub struct FlowField {
    /// `(B, H, W, 2)` sample coordinates into the source.
    pub flow: Tensor,
    /// `(B, K+1, H, W)`, channel 0 is the static background.
    pub masks: Tensor,
    /// Optional `(B, 1, H, W)` visibility map in `[0, 1]`.
    pub occlusion: Option<Tensor>,
}

impl FlowField {
    pub fn new(flow: Tensor, masks: Tensor, occlusion: Option<Tensor>) -> Result<Self> {
        let (b, h, w, two) = flow.dims4()?;
        let (mb, _, mh, mw) = masks.dims4()?;
        if two != 2 || (mb, mh, mw) != (b, h, w) {
            return Err(Error::Shape(format!(
                "flow {:?} and masks {:?} disagree",
                flow.shape(),
                masks.shape()
            )));
        }
        validate_masks(&masks)?;
        if let Some(occ) = &occlusion {
            if occ.dims4()? != (b, 1, h, w) {
                return Err(Error::Shape(format!("occlusion map has shape {:?}", occ.shape())));
            }
            let v = occ.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::InvalidArgument("occlusion values must lie in [0, 1]".into()));
            }
        }
        Ok(Self { flow, masks, occlusion })
    }
}

fn validate_masks(masks: &Tensor) -> Result<()> {
    let (b, c, h, w) = masks.dims4()?;
    let v = masks.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if let Some(bad) = v.iter().find(|x| !(**x >= 0.0)) {
        return Err(Error::InvalidMasks(format!("negative or NaN weight {bad}")));
    }
    let plane = h * w;
    for bi in 0..b {
        for p in 0..plane {
            let s: f64 = (0..c).map(|ci| v[(bi * c + ci) * plane + p]).sum();
            if (s - 1.0).abs() > MASK_SUM_TOLERANCE {
                return Err(Error::InvalidMasks(format!("pixel {p} of batch {bi} sums to {s}")));
            }
        }
    }
    Ok(())
}

/// Validated dense flow from candidate grids and a mask stack.
pub fn dense_flow(candidates: &Tensor, masks: &Tensor) -> Result<FlowField> {
    let (b, k1, h, w, two) = candidates.dims5()?;
    if two != 2 || masks.dims4()? != (b, k1, h, w) {
        return Err(Error::Shape(format!(
            "candidates {:?} and masks {:?} disagree",
            candidates.shape(),
            masks.shape()
        )));
    }
    validate_masks(masks)?;
    let flow = dense_flow_tensor(candidates, masks)?;
    FlowField::new(flow, masks.clone(), None)
}
