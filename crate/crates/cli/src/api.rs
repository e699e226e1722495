//! Request and response bodies shared by the HTTP service and the CLI.
//!
//! Images travel as base64 PNG. The CLI reads files and fills the same bodies,
//! so both front ends run identical code for identical requests.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use facemotion::animator::{
    Animator, EditRequest, ExpressionSource, FrameInput, PoseTransfer, ReenactMode, ReenactOptions,
};
use facemotion::geometry::project_orthographic;
use facemotion::pipeline::{decode_image, encode_png};
use facemotion::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnimateBody {
    pub source: String,
    pub driving: String,
    pub source_pose: Option<[f64; 3]>,
    pub driving_pose: Option<[f64; 3]>,
    #[serde(default)]
    pub mode: ReenactMode,
    #[serde(default)]
    pub pose: PoseTransfer,
    pub reference: Option<String>,
    pub reference_pose: Option<[f64; 3]>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditBody {
    pub source: String,
    pub driving: Option<String>,
    pub source_pose: Option<[f64; 3]>,
    pub driving_pose: Option<[f64; 3]>,
    pub yaw: Option<f64>,
    pub pitch: Option<f64>,
    pub roll: Option<f64>,
    pub translation: Option<[f64; 2]>,
    pub scale: Option<f64>,
    pub expression: Option<ExpressionSource>,
    pub latent: Option<Vec<f64>>,
    pub alpha: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolateBody {
    pub source: String,
    pub driving: String,
    pub alpha: f64,
    pub source_pose: Option<[f64; 3]>,
    pub driving_pose: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResponse {
    pub image: String,
    /// Projected driving keypoints in normalized coordinates.
    pub keypoints: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolateResponse {
    pub image: String,
    pub keypoints: Vec<[f64; 2]>,
    pub latent: Vec<f64>,
}

pub fn encode_b64(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

pub fn decode_b64(text: &str) -> Result<Vec<u8>> {
    STANDARD.decode(text).map_err(|e| Error::InvalidArgument(format!("invalid base64 image: {e}")))
}

fn frame(model: &Animator, b64: &str, pose: Option<[f64; 3]>) -> Result<FrameInput> {
    let image = decode_image(&decode_b64(b64)?, model.config().net.image_size)?;
    Ok(FrameInput { image, pose })
}

pub fn animate(model: &Animator, body: &AnimateBody) -> Result<ImageResponse> {
    let source = frame(model, &body.source, body.source_pose)?;
    let driving = frame(model, &body.driving, body.driving_pose)?;
    let reference = body.reference.as_deref().map(|r| frame(model, r, body.reference_pose)).transpose()?;
    let out = model.reenact(&source, &driving, &ReenactOptions { mode: body.mode, pose: body.pose, reference })?;
    Ok(ImageResponse { image: encode_b64(&encode_png(&out.image)?), keypoints: out.keypoints_2d })
}

pub fn edit_request(model: &Animator, body: &EditBody) -> Result<EditRequest> {
    Ok(EditRequest {
        source: Some(frame(model, &body.source, body.source_pose)?),
        driving: body.driving.as_deref().map(|d| frame(model, d, body.driving_pose)).transpose()?,
        yaw: body.yaw,
        pitch: body.pitch,
        roll: body.roll,
        translation: body.translation,
        scale: body.scale,
        expression: body.expression,
        latent: body.latent.clone(),
        alpha: body.alpha,
    })
}

pub fn edit(model: &Animator, body: &EditBody) -> Result<ImageResponse> {
    let out = model.edit_attributes(&edit_request(model, body)?)?;
    Ok(ImageResponse { image: encode_b64(&encode_png(&out.image)?), keypoints: out.keypoints_2d })
}

pub fn canonical(model: &Animator, source: &str, pose: Option<[f64; 3]>) -> Result<ImageResponse> {
    let out = model.canonical_face(&frame(model, source, pose)?)?;
    Ok(ImageResponse { image: encode_b64(&encode_png(&out.image)?), keypoints: out.keypoints_2d })
}

pub fn interpolate(model: &Animator, body: &InterpolateBody) -> Result<InterpolateResponse> {
    if !model.has_vae() {
        return Err(Error::MissingVae);
    }
    let source = frame(model, &body.source, body.source_pose)?;
    let driving = frame(model, &body.driving, body.driving_pose)?;
    let out = model.interpolate_expression(&source, &driving, body.alpha)?;
    Ok(InterpolateResponse {
        image: encode_b64(&encode_png(&out.image)?),
        keypoints: project_orthographic(&out.keypoints),
        latent: out.latent.values().to_vec(),
    })
}
