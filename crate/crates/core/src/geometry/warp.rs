//! Differentiable backward sampling.
//!
//! Sample positions are clamped to the border pixel centers before
//! interpolation, so out-of-range samples repeat the edge value.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};

/// Pixel-space sample position along one axis: clamped coordinate, lower
/// corner index (as float, detached) and the fractional weight.
fn axis_sample(coord: &Tensor, size: usize) -> candle_core::Result<(Tensor, Tensor)> {
    let max = (size - 1) as f64;
    let pix = ((coord + 1.0)? * (max * 0.5))?.clamp(0.0, max)?;
    let low = pix.detach().floor()?.clamp(0.0, (max - 1.0).max(0.0))?;
    let frac = (&pix - &low)?;
    Ok((low, frac))
}

fn gather_flat(flat: &Tensor, index: &Tensor, channels: usize) -> candle_core::Result<Tensor> {
    // flat (B, C, N_in), index (B, N_out) as float
    let (b, n) = index.dims2()?;
    let idx = index
        .to_dtype(DType::U32)?
        .reshape((b, 1, n))?
        .broadcast_as((b, channels, n))?
        .contiguous()?;
    flat.gather(&idx, 2)
}

/// Bilinear backward warp: `source (B,C,H,W)`, `flow (B,Ho,Wo,2)` → `(B,C,Ho,Wo)`.
/// A `(C,H,W)` source is treated as a batch of one.
pub fn warp(source: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let batched = source.rank() == 3;
    let source = if batched { source.unsqueeze(0)? } else { source.clone() };
    let flow = if flow.rank() == 3 { flow.unsqueeze(0)? } else { flow.clone() };
    let (b, c, h, w) = source.dims4()?;
    let (fb, ho, wo, two) = flow.dims4()?;
    if two != 2 || (fb != b && fb != 1) {
        return Err(Error::Shape(format!(
            "flow {:?} cannot sample source {:?}",
            flow.shape(),
            source.shape()
        )));
    }
    let flow = if fb != b { flow.broadcast_as((b, ho, wo, 2))?.contiguous()? } else { flow };
    let flow = flow.to_dtype(source.dtype())?;
    let n = ho * wo;
    let fx = flow.narrow(3, 0, 1)?.reshape((b, n))?;
    let fy = flow.narrow(3, 1, 1)?.reshape((b, n))?;
    let (x0, wx) = axis_sample(&fx, w)?;
    let (y0, wy) = axis_sample(&fy, h)?;
    let x1 = (&x0 + 1.0)?.clamp(0.0, (w - 1) as f64)?;
    let y1 = (&y0 + 1.0)?.clamp(0.0, (h - 1) as f64)?;
    let flat = source.reshape((b, c, h * w))?;
    let wf = w as f64;
    let v00 = gather_flat(&flat, &((&y0 * wf)? + &x0)?, c)?;
    let v01 = gather_flat(&flat, &((&y0 * wf)? + &x1)?, c)?;
    let v10 = gather_flat(&flat, &((&y1 * wf)? + &x0)?, c)?;
    let v11 = gather_flat(&flat, &((&y1 * wf)? + &x1)?, c)?;
    let wx = wx.unsqueeze(1)?;
    let wy = wy.unsqueeze(1)?;
    let ux = (1.0 - &wx)?;
    let uy = (1.0 - &wy)?;
    let top = (v00.broadcast_mul(&ux)? + v01.broadcast_mul(&wx)?)?;
    let bottom = (v10.broadcast_mul(&ux)? + v11.broadcast_mul(&wx)?)?;
    let out = (top.broadcast_mul(&uy)? + bottom.broadcast_mul(&wy)?)?.reshape((b, c, ho, wo))?;
    Ok(if batched { out.squeeze(0)? } else { out })
}

/// [`warp`] that additionally checks the flow grid against the requested output size.
pub fn warp_to(source: &Tensor, flow: &Tensor, output: (usize, usize)) -> Result<Tensor> {
    let (fh, fw) = (flow.dim(D::Minus(3))?, flow.dim(D::Minus(2))?);
    if (fh, fw) != output {
        return Err(Error::Shape(format!("flow grid {fh}x{fw} does not match requested output {}x{}", output.0, output.1)));
    }
    warp(source, flow)
}

/// Trilinear backward warp of a feature volume:
/// `source (B,C,D,H,W)`, `flow (B,Do,Ho,Wo,3)` with `(x, y, z)` ordering.
pub fn warp_volume(source: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let (b, c, d, h, w) = source.dims5()?;
    let (fb, do_, ho, wo, three) = flow.dims5()?;
    if three != 3 || fb != b {
        return Err(Error::Shape(format!(
            "flow {:?} cannot sample volume {:?}",
            flow.shape(),
            source.shape()
        )));
    }
    let flow = flow.to_dtype(source.dtype())?;
    let n = do_ * ho * wo;
    let f = |i| flow.narrow(4, i, 1).and_then(|t| t.reshape((b, n)));
    let (x0, wx) = axis_sample(&f(0)?, w)?;
    let (y0, wy) = axis_sample(&f(1)?, h)?;
    let (z0, wz) = axis_sample(&f(2)?, d)?;
    let x1 = (&x0 + 1.0)?.clamp(0.0, (w - 1) as f64)?;
    let y1 = (&y0 + 1.0)?.clamp(0.0, (h - 1) as f64)?;
    let z1 = (&z0 + 1.0)?.clamp(0.0, (d - 1) as f64)?;
    let flat = source.reshape((b, c, d * h * w))?;
    let plane = (h * w) as f64;
    let row = w as f64;
    let mut acc: Option<Tensor> = None;
    for (zi, zw) in [(&z0, (1.0 - &wz)?), (&z1, wz.clone())] {
        for (yi, yw) in [(&y0, (1.0 - &wy)?), (&y1, wy.clone())] {
            for (xi, xw) in [(&x0, (1.0 - &wx)?), (&x1, wx.clone())] {
                let index = (((zi * plane)? + (yi * row)?)? + xi)?;
                let weight = ((&zw * &yw)? * &xw)?.unsqueeze(1)?;
                let term = gather_flat(&flat, &index, c)?.broadcast_mul(&weight)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => (a + term)?,
                });
            }
        }
    }
    let out = acc.expect("eight corners");
    Ok(out.reshape((b, c, do_, ho, wo))?)
}
