//! Frame sequences: procedural synthetic faces with ground truth, and folders
//! of PNG frames.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{to_normalized, AugmentTransform, Rotation};
use crate::losses::NUM_LANDMARKS;

/// Expression state of a synthetic face.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpressionState {
    /// 0 closed, 1 wide open.
    pub mouth_open: f64,
    pub mouth_width: f64,
    /// 0 shut, 1 fully open.
    pub eye_open: f64,
    /// Pupil offset within the eye, each component in `[-1, 1]`.
    pub gaze: [f64; 2],
    pub brow_raise: f64,
}

impl Default for ExpressionState {
    fn default() -> Self {
        Self { mouth_open: 0.2, mouth_width: 1.0, eye_open: 1.0, gaze: [0.0, 0.0], brow_raise: 0.0 }
    }
}

/// Ground truth recorded with a synthetic frame. Angles in radians; points in
/// normalized image coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub identity: u64,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub scale: f64,
    pub translation: [f64; 2],
    pub expression: ExpressionState,
    /// 145 points: 120 face, 20 mouth, 5 pupil.
    pub landmarks: Vec<[f64; 2]>,
    /// Posed 3D anchors (eyes, pupils, brows, nose, mouth).
    pub keypoints: Vec<[f64; 3]>,
}

impl FrameMeta {
    pub fn rotation(&self) -> Rotation {
        Rotation::from_euler(self.yaw, self.pitch, self.roll)
    }

    /// Metadata of the frame after the image-plane transform `t`.
    pub fn transformed(&self, t: &AugmentTransform) -> FrameMeta {
        let map2 = |p: [f64; 2]| t.apply_point(p);
        let map3 = |p: [f64; 3]| {
            let q = t.apply_point([p[0], p[1]]);
            [q[0], q[1], p[2] * t.scale()]
        };
        let moved = map2(self.translation);
        FrameMeta {
            roll: self.roll + t.angle(),
            scale: self.scale * t.scale(),
            translation: moved,
            landmarks: self.landmarks.iter().copied().map(map2).collect(),
            keypoints: self.keypoints.iter().copied().map(map3).collect(),
            ..self.clone()
        }
    }
}

/// One frame: `image (3,S,S)` in `[-1,1]`.
#[derive(Clone, Debug)]
pub struct Frame {
    pub image: Tensor,
    pub meta: Option<FrameMeta>,
}

#[derive(Clone, Debug)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Frame>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub image_size: usize,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn iter(&self) -> std::slice::Iter<'_, Sequence> {
        self.sequences.iter()
    }

    pub fn num_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.frames.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub sequences: usize,
    pub frames_per_sequence: usize,
    pub seed: u64,
    /// Bound on each pose angle, radians.
    pub max_angle: f64,
    /// Bound on each translation component.
    pub max_translation: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { sequences: 8, frames_per_sequence: 12, seed: 7, max_angle: 0.3, max_translation: 0.05 }
    }
}

/// Appearance of one synthetic person.
#[derive(Clone, Debug)]
struct Identity {
    id: u64,
    background: [[f64; 3]; 2],
    skin: [f64; 3],
    hair: [f64; 3],
    iris: [f64; 3],
    lips: [f64; 3],
    /// Face half-width and half-height before scaling.
    face: [f64; 2],
    eye_spacing: f64,
    eye_height: f64,
    mouth_height: f64,
    base_scale: f64,
}

fn color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

impl Identity {
    fn sample(id: u64, rng: &mut ChaCha8Rng) -> Self {
        let tone = rng.random_range(0.45..0.85);
        let warm = rng.random_range(0.0..0.12);
        Self {
            id,
            background: [color(rng, 0.15, 0.6), color(rng, 0.15, 0.6)],
            skin: [tone + warm, tone, tone - warm],
            hair: color(rng, 0.05, 0.4),
            iris: color(rng, 0.05, 0.35),
            lips: [rng.random_range(0.5..0.8), rng.random_range(0.1..0.3), rng.random_range(0.15..0.3)],
            face: [rng.random_range(0.72..0.85), rng.random_range(0.95..1.05)],
            eye_spacing: rng.random_range(0.28..0.36),
            eye_height: rng.random_range(-0.25..-0.15),
            mouth_height: rng.random_range(0.4..0.5),
            base_scale: rng.random_range(0.52..0.6),
        }
    }
}

/// Pose and expression of one frame.
#[derive(Clone, Copy, Debug)]
struct FrameState {
    yaw: f64,
    pitch: f64,
    roll: f64,
    scale: f64,
    translation: [f64; 2],
    expression: ExpressionState,
}

/// Smooth per-sequence trajectories: each quantity is a sinusoid with random
/// phase and frequency.
struct Trajectory {
    params: Vec<(f64, f64, f64)>,
}

impl Trajectory {
    const CHANNELS: usize = 11;

    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let params = (0..Self::CHANNELS)
            .map(|_| (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.3..0.9), rng.random_range(0.5..1.0)))
            .collect();
        Self { params }
    }

    /// Channel `c` at frame `i`, in `[-1,1]`.
    fn at(&self, c: usize, i: usize) -> f64 {
        let (phase, freq, amp) = self.params[c];
        amp * (phase + freq * i as f64).sin()
    }

    fn state(&self, id: &Identity, i: usize, cfg: &SyntheticConfig) -> FrameState {
        let unit = |c| 0.5 * (1.0 + self.at(c, i));
        FrameState {
            yaw: cfg.max_angle * self.at(0, i),
            pitch: cfg.max_angle * self.at(1, i),
            roll: cfg.max_angle * self.at(2, i),
            scale: id.base_scale * (1.0 + 0.05 * self.at(3, i)),
            translation: [cfg.max_translation * self.at(4, i), cfg.max_translation * self.at(5, i)],
            expression: ExpressionState {
                mouth_open: unit(6),
                mouth_width: 1.0 + 0.2 * self.at(7, i),
                eye_open: 0.35 + 0.65 * unit(8),
                gaze: [self.at(9, i), 0.5 * self.at(10, i)],
                brow_raise: unit(8),
            },
        }
    }
}

/// An ellipse on the face surface, given by its centre and two semi-axes in
/// canonical head coordinates.
struct Patch {
    center: [f64; 3],
    axes: [[f64; 3]; 2],
}

/// Posed ellipse in the image plane.
struct Ellipse {
    center: [f64; 2],
    /// Inverse of the matrix with the projected semi-axes as columns.
    inverse: [[f64; 2]; 2],
    /// Length of the shorter projected semi-axis.
    minor: f64,
    axes: [[f64; 2]; 2],
}

struct Pose {
    rotation: Rotation,
    scale: f64,
    translation: [f64; 2],
}

impl Pose {
    fn point(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation.apply(p);
        [self.scale * r[0] + self.translation[0], self.scale * r[1] + self.translation[1], self.scale * r[2]]
    }

    fn vector(&self, v: [f64; 3]) -> [f64; 2] {
        let r = self.rotation.apply(v);
        [self.scale * r[0], self.scale * r[1]]
    }

    fn ellipse(&self, patch: &Patch) -> Ellipse {
        let c = self.point(patch.center);
        let u = self.vector(patch.axes[0]);
        let v = self.vector(patch.axes[1]);
        let det = u[0] * v[1] - v[0] * u[1];
        let det = if det.abs() < 1e-9 { 1e-9f64.copysign(det) } else { det };
        Ellipse {
            center: [c[0], c[1]],
            inverse: [[v[1] / det, -v[0] / det], [-u[1] / det, u[0] / det]],
            minor: (u[0].hypot(u[1])).min(v[0].hypot(v[1])),
            axes: [u, v],
        }
    }
}

impl Ellipse {
    /// Coverage in `[0,1]` with an edge ramp of about one pixel.
    fn coverage(&self, q: [f64; 2], pixel: f64) -> f64 {
        let d = [q[0] - self.center[0], q[1] - self.center[1]];
        let a = self.inverse[0][0] * d[0] + self.inverse[0][1] * d[1];
        let b = self.inverse[1][0] * d[0] + self.inverse[1][1] * d[1];
        let r = (a * a + b * b).sqrt();
        let signed = (1.0 - r) * self.minor / pixel;
        (signed + 0.5).clamp(0.0, 1.0)
    }

    fn boundary(&self, n: usize) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..n).map(move |i| {
            let th = std::f64::consts::TAU * i as f64 / n as f64;
            let (s, c) = th.sin_cos();
            [
                self.center[0] + c * self.axes[0][0] + s * self.axes[1][0],
                self.center[1] + c * self.axes[0][1] + s * self.axes[1][1],
            ]
        })
    }
}

/// Depth of the head surface above `(x, y)`.
fn surface(id: &Identity, x: f64, y: f64) -> f64 {
    let [a, b] = id.face;
    0.8 * (1.0 - (x / a).powi(2) - (y / b).powi(2)).max(0.05).sqrt()
}

fn patch(id: &Identity, x: f64, y: f64, rx: f64, ry: f64) -> Patch {
    Patch { center: [x, y, surface(id, x, y)], axes: [[rx, 0.0, 0.0], [0.0, ry.max(1e-3), 0.0]] }
}

struct Layout {
    hair: Patch,
    face: Patch,
    nose: Patch,
    eyes: [Patch; 2],
    pupils: [Patch; 2],
    brows: [Patch; 2],
    mouth: Patch,
}

fn layout(id: &Identity, e: &ExpressionState) -> Layout {
    let [a, b] = id.face;
    let eye = |side: f64| patch(id, side * id.eye_spacing, id.eye_height, 0.15, 0.09 * e.eye_open);
    let pupil = |side: f64| {
        let x = side * id.eye_spacing + 0.07 * e.gaze[0];
        let y = id.eye_height + 0.03 * e.gaze[1];
        patch(id, x, y, 0.055, 0.055 * e.eye_open.max(0.3))
    };
    let brow = |side: f64| patch(id, side * id.eye_spacing, id.eye_height - 0.2 - 0.08 * e.brow_raise, 0.17, 0.035);
    Layout {
        hair: Patch { center: [0.0, -0.12, 0.0], axes: [[a + 0.1, 0.0, 0.0], [0.0, b + 0.06, 0.0]] },
        face: Patch { center: [0.0, 0.0, 0.0], axes: [[a, 0.0, 0.0], [0.0, b, 0.0]] },
        nose: patch(id, 0.0, 0.1, 0.07, 0.13),
        eyes: [eye(-1.0), eye(1.0)],
        pupils: [pupil(-1.0), pupil(1.0)],
        brows: [brow(-1.0), brow(1.0)],
        mouth: patch(id, 0.0, id.mouth_height, 0.26 * e.mouth_width, 0.035 + 0.13 * e.mouth_open),
    }
}

fn blend(dst: &mut [f64; 3], src: [f64; 3], alpha: f64) {
    for c in 0..3 {
        dst[c] += alpha * (src[c] - dst[c]);
    }
}

fn scaled(c: [f64; 3], k: f64) -> [f64; 3] {
    [c[0] * k, c[1] * k, c[2] * k]
}

/// Renders a frame to `[0,1]` RGB, channel-major, together with its metadata.
fn render(id: &Identity, st: &FrameState, size: usize) -> (Vec<f32>, FrameMeta) {
    let pose = Pose {
        rotation: Rotation::from_euler(st.yaw, st.pitch, st.roll),
        scale: st.scale,
        translation: st.translation,
    };
    let lay = layout(id, &st.expression);
    let hair = pose.ellipse(&lay.hair);
    let face = pose.ellipse(&lay.face);
    let nose = pose.ellipse(&lay.nose);
    let eyes = lay.eyes.each_ref().map(|p| pose.ellipse(p));
    let pupils = lay.pupils.each_ref().map(|p| pose.ellipse(p));
    let brows = lay.brows.each_ref().map(|p| pose.ellipse(p));
    let mouth = pose.ellipse(&lay.mouth);
    let pixel = 2.0 / (size - 1) as f64;
    let mut out = vec![0f32; 3 * size * size];
    for yi in 0..size {
        for xi in 0..size {
            let q = [to_normalized(xi as f64, size), to_normalized(yi as f64, size)];
            let v = 0.5 * (q[1] + 1.0);
            let mut c = [0.0; 3];
            for ch in 0..3 {
                c[ch] = id.background[0][ch] * (1.0 - v) + id.background[1][ch] * v;
            }
            blend(&mut c, id.hair, hair.coverage(q, pixel));
            let fc = face.coverage(q, pixel);
            if fc > 0.0 {
                // soft shading towards the rim
                let d = [q[0] - face.center[0], q[1] - face.center[1]];
                let a = face.inverse[0][0] * d[0] + face.inverse[0][1] * d[1];
                let b = face.inverse[1][0] * d[0] + face.inverse[1][1] * d[1];
                let shade = 1.05 - 0.2 * (a * a + b * b).min(1.0);
                blend(&mut c, scaled(id.skin, shade), fc);
            }
            blend(&mut c, scaled(id.skin, 0.85), 0.6 * nose.coverage(q, pixel));
            for i in 0..2 {
                blend(&mut c, id.hair, brows[i].coverage(q, pixel));
                let eye = eyes[i].coverage(q, pixel);
                blend(&mut c, [0.95, 0.95, 0.92], eye);
                blend(&mut c, id.iris, eye * pupils[i].coverage(q, pixel));
            }
            let m = mouth.coverage(q, pixel);
            blend(&mut c, id.lips, m);
            let inner = Ellipse { minor: mouth.minor * 0.6, ..scale_ellipse(&mouth, 0.6) };
            blend(&mut c, [0.15, 0.03, 0.05], m * inner.coverage(q, pixel) * st.expression.mouth_open);
            for ch in 0..3 {
                out[ch * size * size + yi * size + xi] = c[ch].clamp(0.0, 1.0) as f32;
            }
        }
    }

    let mut landmarks: Vec<[f64; 2]> = Vec::with_capacity(NUM_LANDMARKS);
    landmarks.extend(face.boundary(48));
    for e in &eyes {
        landmarks.extend(e.boundary(16));
    }
    for b in &brows {
        landmarks.extend(b.boundary(10));
    }
    landmarks.extend(nose.boundary(20));
    landmarks.extend(mouth.boundary(20));
    let top = |e: &Ellipse| [e.center[0] - e.axes[1][0], e.center[1] - e.axes[1][1]];
    landmarks.extend([
        pupils[0].center,
        pupils[1].center,
        top(&pupils[0]),
        top(&pupils[1]),
        [0.5 * (pupils[0].center[0] + pupils[1].center[0]), 0.5 * (pupils[0].center[1] + pupils[1].center[1])],
    ]);
    debug_assert_eq!(landmarks.len(), NUM_LANDMARKS);

    let mouth_corner = |side: f64| {
        let c = lay.mouth.center;
        let x = c[0] + side * lay.mouth.axes[0][0];
        pose.point([x, c[1], surface(id, x, c[1])])
    };
    let keypoints = vec![
        pose.point(lay.eyes[0].center),
        pose.point(lay.eyes[1].center),
        pose.point(lay.pupils[0].center),
        pose.point(lay.pupils[1].center),
        pose.point(lay.brows[0].center),
        pose.point(lay.brows[1].center),
        pose.point(lay.nose.center),
        pose.point(lay.mouth.center),
        mouth_corner(-1.0),
        mouth_corner(1.0),
    ];
    let meta = FrameMeta {
        identity: id.id,
        yaw: st.yaw,
        pitch: st.pitch,
        roll: st.roll,
        scale: st.scale,
        translation: st.translation,
        expression: st.expression,
        landmarks,
        keypoints,
    };
    (out, meta)
}

fn scale_ellipse(e: &Ellipse, k: f64) -> Ellipse {
    let axes = e.axes.map(|a| [a[0] * k, a[1] * k]);
    let inverse = e.inverse.map(|row| [row[0] / k, row[1] / k]);
    Ellipse { center: e.center, inverse, minor: e.minor * k, axes }
}

/// Converts `[0,1]` channel-major pixels into a `(3,S,S)` tensor in `[-1,1]`.
pub fn image_from_unit(pixels: Vec<f32>, size: usize) -> Result<Tensor> {
    let t = Tensor::from_vec(pixels, (3, size, size), &Device::Cpu)?;
    Ok(t.affine(2.0, -1.0)?)
}

/// Renders a deterministic procedural dataset.
pub fn synthetic_dataset(cfg: &SyntheticConfig, image_size: usize) -> Result<Dataset> {
    if cfg.sequences == 0 || cfg.frames_per_sequence < 2 {
        return Err(Error::Dataset("synthetic data needs at least one sequence of two frames".into()));
    }
    let mut sequences = Vec::with_capacity(cfg.sequences);
    for s in 0..cfg.sequences {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(s as u64));
        let id = Identity::sample(s as u64, &mut rng);
        let traj = Trajectory::sample(&mut rng);
        let frames = (0..cfg.frames_per_sequence)
            .map(|i| {
                let (pixels, meta) = render(&id, &traj.state(&id, i, cfg), image_size);
                Ok(Frame { image: image_from_unit(pixels, image_size)?, meta: Some(meta) })
            })
            .collect::<Result<Vec<_>>>()?;
        sequences.push(Sequence { name: format!("synthetic_{s:03}"), frames });
    }
    Ok(Dataset { image_size, sequences })
}

/// Renders one frame of a synthetic identity with explicit pose and expression.
pub fn synthetic_frame(
    identity_seed: u64,
    image_size: usize,
    yaw: f64,
    pitch: f64,
    roll: f64,
    expression: ExpressionState,
) -> Result<Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(identity_seed);
    let id = Identity::sample(identity_seed, &mut rng);
    let st = FrameState { yaw, pitch, roll, scale: id.base_scale, translation: [0.0, 0.0], expression };
    let (pixels, meta) = render(&id, &st, image_size);
    Ok(Frame { image: image_from_unit(pixels, image_size)?, meta: Some(meta) })
}

/// Reads a PNG/JPEG as a `(3,S,S)` tensor in `[-1,1]`, resizing to `size`.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::UnreadableFrame { path: path.to_path_buf(), reason: e.to_string() })?;
    decode_rgb(img, size)
}

/// Decodes an encoded image from memory.
pub fn decode_image(bytes: &[u8], size: usize) -> Result<Tensor> {
    let img = image::load_from_memory(bytes)?;
    decode_rgb(img, size)
}

fn decode_rgb(img: image::DynamicImage, size: usize) -> Result<Tensor> {
    let img = if img.width() as usize != size || img.height() as usize != size {
        img.resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle)
    } else {
        img
    };
    let rgb = img.to_rgb8();
    let mut pixels = vec![0f32; 3 * size * size];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            pixels[c * size * size + y as usize * size + x as usize] = p[c] as f32 / 255.0;
        }
    }
    image_from_unit(pixels, size)
}

/// Encodes a `(3,S,S)` image in `[-1,1]` as PNG bytes.
pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected an RGB image, got {:?}", image.shape())));
    }
    let unit = image.to_dtype(DType::F32)?.affine(0.5, 0.5)?.clamp(0f32, 1f32)?;
    let data = unit.flatten_all()?.to_vec1::<f32>()?;
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        for ch in 0..3 {
            p[ch] = (data[ch * h * w + y as usize * w + x as usize] * 255.0).round() as u8;
        }
    }
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode_png(image)?)?;
    Ok(())
}

const META_FILE: &str = "meta.json";

fn is_frame(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(), Some("png" | "jpg" | "jpeg"))
}

/// Loads a directory of sequence folders, each holding ordered frames and an
/// optional `meta.json` array with one [`FrameMeta`] per frame. Folders with
/// fewer than two frames are skipped.
pub fn ingest_folder(root: &Path, image_size: usize) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    dirs.sort();
    let mut sequences = Vec::new();
    for dir in dirs {
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| is_frame(p)).collect();
        files.sort();
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if files.len() < 2 {
            log::warn!("skipping sequence {name}: {} frame(s)", files.len());
            continue;
        }
        let meta_path = dir.join(META_FILE);
        let metas: Vec<Option<FrameMeta>> = if meta_path.exists() {
            let text = fs::read_to_string(&meta_path)?;
            let list: Vec<FrameMeta> = serde_json::from_str(&text)
                .map_err(|e| Error::Dataset(format!("{}: {e}", meta_path.display())))?;
            if list.len() != files.len() {
                return Err(Error::Dataset(format!("{}: {} entries for {} frames", meta_path.display(), list.len(), files.len())));
            }
            list.into_iter().map(Some).collect()
        } else {
            vec![None; files.len()]
        };
        let frames = files
            .iter()
            .zip(metas)
            .map(|(f, meta)| Ok(Frame { image: load_image(f, image_size)?, meta }))
            .collect::<Result<Vec<_>>>()?;
        sequences.push(Sequence { name, frames });
    }
    if sequences.is_empty() {
        return Err(Error::Dataset(format!("no sequence with two or more frames under {}", root.display())));
    }
    Ok(Dataset { image_size, sequences })
}

/// Writes a dataset in the layout read by [`ingest_folder`].
pub fn write_folder(dataset: &Dataset, root: &Path) -> Result<()> {
    for seq in &dataset.sequences {
        let dir = root.join(&seq.name);
        fs::create_dir_all(&dir)?;
        for (i, frame) in seq.frames.iter().enumerate() {
            save_png(&frame.image, &dir.join(format!("{i:05}.png")))?;
        }
        let metas: Option<Vec<&FrameMeta>> = seq.frames.iter().map(|f| f.meta.as_ref()).collect();
        if let Some(metas) = metas {
            fs::write(dir.join(META_FILE), serde_json::to_string(&metas).map_err(|e| Error::Dataset(e.to_string()))?)?;
        }
    }
    Ok(())
}
