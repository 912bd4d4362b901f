//! Procedural synthetic near-eye image generator with exact ground-truth
//! gaze.
//!
//! The scene model is deliberately simple 2D compositing: skin with seeded
//! texture, an eye aperture, iris and pupil ellipses whose center displaces
//! linearly with `tan(gaze angle)` and foreshortens with angle, glint disks,
//! and an upper eyelid cutting the top fraction of the iris. A fixed
//! center-anchored anisotropic affine warp emulates the oblique off-axis
//! camera, and seeded Gaussian pixel noise is added last. Everything is a
//! pure function of the parameters, so renders are bit-reproducible.

use crate::data::{Eye, FrameRecord};
use crate::rng::{derive_seed, stream};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type GrayImage = Array2<f32>;

/// Horizontal displacement of the pupil center at the +/-25 degree gaze
/// extreme, as a fraction of the image half-extent.
const GAZE_EXTENT: f64 = 0.5;
const MAX_ANGLE_DEG: f64 = 25.0;
/// Fixed off-axis warp: horizontal shear and vertical squash about center.
const WARP_SHEAR: f64 = 0.18;
const WARP_Y_SCALE: f64 = 0.90;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EyeSceneParams {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub iris_radius: f64,
    pub pupil_radius: f64,
    pub eyelid_openness: f64,
    pub brightness: f64,
    pub contrast: f64,
    /// Glint disk centers relative to the pupil center, in pixels.
    pub glint_offsets: Vec<(f64, f64)>,
    pub texture_seed: u64,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub off_axis_warp: bool,
}

impl EyeSceneParams {
    /// Centered gaze with mid-range appearance, a convenient test fixture.
    pub fn centered(height: usize, width: usize) -> Self {
        let m = height.min(width) as f64;
        EyeSceneParams {
            yaw_deg: 0.0,
            pitch_deg: 0.0,
            iris_radius: 0.14 * m,
            pupil_radius: 0.06 * m,
            eyelid_openness: 1.0,
            brightness: 0.85,
            contrast: 1.0,
            glint_offsets: vec![(0.055 * m, 0.04 * m), (-0.045 * m, 0.05 * m)],
            texture_seed: 0,
            height,
            width,
            noise_sigma: 0.01,
            off_axis_warp: true,
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if self.height < 32 || self.width < 32 {
            return Err(RenderError::ImageTooSmall {
                height: self.height,
                width: self.width,
            });
        }
        if self.yaw_deg.abs() > MAX_ANGLE_DEG || self.pitch_deg.abs() > MAX_ANGLE_DEG {
            return Err(RenderError::GazeOutOfRange {
                yaw: self.yaw_deg,
                pitch: self.pitch_deg,
            });
        }
        if !(self.pupil_radius > 0.0 && self.pupil_radius < self.iris_radius) {
            return Err(RenderError::BadAppearance(
                "pupil_radius must be positive and smaller than iris_radius".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.eyelid_openness) {
            return Err(RenderError::BadAppearance("eyelid_openness must be in [0,1]".into()));
        }
        if !(self.brightness > 0.0 && self.brightness <= 1.0)
            || !(self.contrast > 0.0 && self.contrast <= 1.0)
        {
            return Err(RenderError::BadAppearance(
                "brightness and contrast must be in (0,1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("image size {height}x{width} below the 32x32 minimum")]
    ImageTooSmall { height: usize, width: usize },
    #[error("gaze ({yaw}, {pitch}) degrees outside +/-25")]
    GazeOutOfRange { yaw: f64, pitch: f64 },
    #[error("invalid appearance: {0}")]
    BadAppearance(String),
}

/// Low-resolution seeded value noise, bilinearly interpolated.
struct ValueNoise {
    grid: Vec<f64>,
    gh: usize,
    gw: usize,
}

impl ValueNoise {
    fn new(seed: u64, label: &str, gh: usize, gw: usize) -> Self {
        let mut rng = stream(seed, label, 0);
        let grid = (0..gh * gw).map(|_| rng.gen_range(0.0..1.0)).collect();
        ValueNoise { grid, gh, gw }
    }

    /// `u, v` in [0,1]
    fn sample(&self, v: f64, u: f64) -> f64 {
        let y = v.clamp(0.0, 1.0) * (self.gh - 1) as f64;
        let x = u.clamp(0.0, 1.0) * (self.gw - 1) as f64;
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.gh - 1), (x0 + 1).min(self.gw - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let g = |yy: usize, xx: usize| self.grid[yy * self.gw + xx];
        let top = g(y0, x0) * (1.0 - fx) + g(y0, x1) * fx;
        let bot = g(y1, x0) * (1.0 - fx) + g(y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

/// Anti-aliased coverage of an axis-aligned ellipse: 1 inside, 0 outside,
/// with a ~1px smooth edge driven by the approximate signed distance.
fn ellipse_alpha(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let nx = (x - cx) / rx;
    let ny = (y - cy) / ry;
    let f = (nx * nx + ny * ny).sqrt();
    let d = (f - 1.0) * rx.min(ry); // approx signed distance in pixels
    (0.5 - d).clamp(0.0, 1.0)
}

/// Pupil-center position in (unwarped) pixel coordinates for a gaze angle.
pub fn pupil_center_for_gaze(params: &EyeSceneParams) -> (f64, f64) {
    let m = params.height.min(params.width) as f64;
    let scale = GAZE_EXTENT * (m / 2.0) / MAX_ANGLE_DEG.to_radians().tan();
    let cx = (params.width as f64 - 1.0) / 2.0;
    let cy = (params.height as f64 - 1.0) / 2.0;
    (
        cx + scale * params.yaw_deg.to_radians().tan(),
        cy - scale * params.pitch_deg.to_radians().tan(),
    )
}

/// Render the scene to a grayscale image with values in [0,1].
/// Deterministic for fixed params.
pub fn render(params: &EyeSceneParams) -> Result<GrayImage, RenderError> {
    params.validate()?;
    let (h, w) = (params.height, params.width);
    let b = params.brightness;
    let tex_skin = ValueNoise::new(params.texture_seed, "skin", 9, 9);
    let tex_fine = ValueNoise::new(params.texture_seed, "fine", 17, 17);
    let tex_iris = ValueNoise::new(params.texture_seed, "iris", 7, 13);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (px, py) = pupil_center_for_gaze(params);
    let cos_yaw = params.yaw_deg.to_radians().cos();
    let cos_pitch = params.pitch_deg.to_radians().cos();
    let irx = params.iris_radius * cos_yaw;
    let iry = params.iris_radius * cos_pitch;
    let prx = params.pupil_radius * cos_yaw;
    let pry = params.pupil_radius * cos_pitch;
    let ap_rx = 0.44 * w as f64;
    let ap_ry = 0.31 * h as f64;
    let lid_y = (py - iry) + (1.0 - params.eyelid_openness) * 2.0 * iry;
    let glint_r = (0.02 * h.min(w) as f64).max(1.2);

    let shade = |x: f64, y: f64| -> f64 {
        let u = x / (w as f64 - 1.0);
        let v = y / (h as f64 - 1.0);
        let skin = b * (0.55
            + 0.10 * (tex_skin.sample(v, u) - 0.5)
            + 0.04 * (tex_fine.sample(v, u) - 0.5)
            + 0.05 * (v - 0.5));
        let a_ap = ellipse_alpha(x, y, cx, cy, ap_rx, ap_ry);
        if a_ap <= 0.0 {
            return skin;
        }
        let sclera = b * (0.80 + 0.06 * (tex_fine.sample(v, u) - 0.5));
        // iris with mild radial texture
        let ang = (y - py).atan2(x - px);
        let rad = ((x - px) / irx).hypot((y - py) / iry);
        let streak = tex_iris.sample(
            (rad).clamp(0.0, 1.0),
            (ang / std::f64::consts::PI + 1.0) / 2.0,
        );
        let iris_col = b * (0.30 + 0.10 * (streak - 0.5) + 0.04 * (1.0 - rad).max(0.0));
        let pupil_col = b * 0.05;
        let a_iris = ellipse_alpha(x, y, px, py, irx, iry);
        let a_pupil = ellipse_alpha(x, y, px, py, prx, pry);
        let mut eye = sclera * (1.0 - a_iris) + iris_col * a_iris;
        eye = eye * (1.0 - a_pupil) + pupil_col * a_pupil;
        for (gx, gy) in &params.glint_offsets {
            let a_g = ellipse_alpha(x, y, px + gx, py + gy, glint_r, glint_r);
            if a_g > 0.0 {
                eye = eye * (1.0 - a_g) + 0.97 * a_g;
            }
        }
        // upper lid covers everything above lid_y inside the aperture
        let a_lid = (lid_y - y + 0.5).clamp(0.0, 1.0);
        let lid_col = b * 0.45;
        eye = eye * (1.0 - a_lid) + lid_col * a_lid;
        skin * (1.0 - a_ap) + eye * a_ap
    };

    let mut img = Array2::<f64>::zeros((h, w));
    if params.off_axis_warp {
        // inverse-map each output pixel through the center-anchored affine
        let inv_shear = -WARP_SHEAR / WARP_Y_SCALE;
        for oy in 0..h {
            for ox in 0..w {
                let dy = (oy as f64 - cy) / WARP_Y_SCALE;
                let dx = (ox as f64 - cx) + inv_shear * (oy as f64 - cy);
                img[[oy, ox]] = shade((dx + cx).clamp(0.0, w as f64 - 1.0), (dy + cy).clamp(0.0, h as f64 - 1.0));
            }
        }
    } else {
        for oy in 0..h {
            for ox in 0..w {
                img[[oy, ox]] = shade(ox as f64, oy as f64);
            }
        }
    }
    // contrast about mid-gray, then seeded noise, then clamp
    let mut rng = stream(params.texture_seed, "noise", 0);
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let mut out = Array2::<f32>::zeros((h, w));
    for oy in 0..h {
        for ox in 0..w {
            let v = 0.5 + params.contrast * (img[[oy, ox]] - 0.5);
            let n = if params.noise_sigma > 0.0 {
                normal.sample(&mut rng) * params.noise_sigma
            } else {
                0.0
            };
            out[[oy, ox]] = ((v + n).clamp(0.0, 1.0)) as f32;
        }
    }
    Ok(out)
}

/// Horizontal mirror (for right-eye rendering and flip augmentation).
pub fn mirror_horizontal(img: &GrayImage) -> GrayImage {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| img[[y, w - 1 - x]])
}

/// Brute-force pupil locator used as the test oracle: threshold at
/// `min + 0.25*(max-min)` and take the darkness-weighted centroid of
/// below-threshold pixels. Returns `(x, y)` in pixels.
pub fn pupil_centroid(img: &GrayImage) -> Option<(f64, f64)> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in img.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return None;
    }
    let thr = lo + 0.25 * (hi - lo);
    let mut sw = 0.0f64;
    let mut sx = 0.0f64;
    let mut sy = 0.0f64;
    for ((y, x), &v) in img.indexed_iter() {
        if v < thr {
            let w = (thr - v) as f64;
            sw += w;
            sx += w * x as f64;
            sy += w * y as f64;
        }
    }
    if sw <= 0.0 {
        None
    } else {
        Some((sx / sw, sy / sw))
    }
}

/// Elliptical iris mask (1 inside) for a given scene, dilated by `dilate_px`.
/// Accounts for the off-axis warp when enabled.
pub fn iris_mask(params: &EyeSceneParams, dilate_px: f64) -> Array2<f32> {
    let (h, w) = (params.height, params.width);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (px, py) = pupil_center_for_gaze(params);
    let irx = params.iris_radius * params.yaw_deg.to_radians().cos() + dilate_px;
    let iry = params.iris_radius * params.pitch_deg.to_radians().cos() + dilate_px;
    let mut mask = Array2::<f32>::zeros((h, w));
    for oy in 0..h {
        for ox in 0..w {
            // invert the same warp applied at render time
            let (sx, sy) = if params.off_axis_warp {
                let dy = (oy as f64 - cy) / WARP_Y_SCALE;
                let dx = (ox as f64 - cx) - WARP_SHEAR / WARP_Y_SCALE * (oy as f64 - cy);
                (dx + cx, dy + cy)
            } else {
                (ox as f64, oy as f64)
            };
            let nx = (sx - px) / irx;
            let ny = (sy - py) / iry;
            if nx * nx + ny * ny <= 1.0 {
                mask[[oy, ox]] = 1.0;
            }
        }
    }
    mask
}

// ---------------------------------------------------------------------------
// Dataset sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Fixation dwell length range in frames (min >= 3 so every dwell is a
    /// usable interval).
    pub fixation_frames: (usize, usize),
    pub pursuit_frames: (usize, usize),
    pub both_eyes: bool,
    pub brightness_jitter: f64,
    pub noise_sigma: f64,
    pub off_axis_warp: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            image_height: 96,
            image_width: 96,
            fixation_frames: (6, 10),
            pursuit_frames: (8, 14),
            both_eyes: true,
            brightness_jitter: 0.06,
            noise_sigma: 0.01,
            off_axis_warp: true,
        }
    }
}

/// A frame record plus the scene parameters that render it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthFrame {
    pub record: FrameRecord,
    pub params: EyeSceneParams,
}

impl SynthFrame {
    /// Render this frame (right-eye frames are mirrored so the two eyes have
    /// the natural opposite handedness).
    pub fn render(&self) -> Result<GrayImage, RenderError> {
        let img = render(&self.params)?;
        Ok(match self.record.eye {
            Eye::Left => img,
            Eye::Right => mirror_horizontal(&img),
        })
    }
}

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("n_subjects must be >= 1")]
    NoSubjects,
    #[error("frames_per_subject must be >= 10, got {0}")]
    TooFewFrames(usize),
}

/// Generate a synthetic dataset: per subject a fixed appearance signature
/// plus per-frame brightness jitter; gaze follows pursuit segments
/// terminated by fixation dwells (constant label, flagged). Deterministic
/// under `seed`.
pub fn sample_dataset(
    n_subjects: usize,
    frames_per_subject: usize,
    seed: u64,
    config: &SamplerConfig,
) -> Result<Vec<SynthFrame>, SampleError> {
    if n_subjects == 0 {
        return Err(SampleError::NoSubjects);
    }
    if frames_per_subject < 10 {
        return Err(SampleError::TooFewFrames(frames_per_subject));
    }
    let m = config.image_height.min(config.image_width) as f64;
    let mut frames = Vec::new();
    for s in 0..n_subjects {
        let subject_id = format!("s{s:02}");
        let mut arng = stream(seed, "appearance", s as u64);
        let iris_radius = m * arng.gen_range(0.115..0.155);
        let pupil_radius = iris_radius * arng.gen_range(0.35..0.55);
        let eyelid_openness = arng.gen_range(0.78..1.0);
        let base_brightness = arng.gen_range(0.70..0.95);
        let contrast = arng.gen_range(0.85..1.0);
        let n_glints = 2;
        let glints: Vec<Vec<(f64, f64)>> = (0..2)
            .map(|_| {
                (0..n_glints)
                    .map(|_| {
                        (
                            m * arng.gen_range(-0.07..0.07),
                            m * arng.gen_range(0.02..0.07),
                        )
                    })
                    .collect()
            })
            .collect();
        let tex_seed_left = derive_seed(seed, "texture_left", s as u64);
        let tex_seed_right = derive_seed(seed, "texture_right", s as u64);

        let mut trng = stream(seed, "trajectory", s as u64);
        let mut jrng = stream(seed, "jitter", s as u64);
        let bound = 22.0;
        let mut gaze_from = (
            trng.gen_range(-bound..bound),
            trng.gen_range(-bound..bound),
        );
        let mut t = 0usize;
        while t < frames_per_subject {
            // fixation dwell at the segment endpoint
            let dwell = trng.gen_range(config.fixation_frames.0..=config.fixation_frames.1);
            let dwell = dwell.min(frames_per_subject - t).max(1);
            for _ in 0..dwell {
                push_timepoint(
                    &mut frames,
                    &subject_id,
                    t,
                    gaze_from,
                    true,
                    config,
                    base_brightness,
                    &mut jrng,
                    iris_radius,
                    pupil_radius,
                    eyelid_openness,
                    contrast,
                    &glints,
                    tex_seed_left,
                    tex_seed_right,
                );
                t += 1;
            }
            if t >= frames_per_subject {
                break;
            }
            // pursuit toward the next dwell point
            let gaze_to = (
                trng.gen_range(-bound..bound),
                trng.gen_range(-bound..bound),
            );
            let steps = trng.gen_range(config.pursuit_frames.0..=config.pursuit_frames.1);
            let steps = steps.min(frames_per_subject - t).max(1);
            for k in 1..=steps {
                let a = k as f64 / steps as f64;
                let gaze = (
                    gaze_from.0 + a * (gaze_to.0 - gaze_from.0),
                    gaze_from.1 + a * (gaze_to.1 - gaze_from.1),
                );
                push_timepoint(
                    &mut frames,
                    &subject_id,
                    t,
                    gaze,
                    false,
                    config,
                    base_brightness,
                    &mut jrng,
                    iris_radius,
                    pupil_radius,
                    eyelid_openness,
                    contrast,
                    &glints,
                    tex_seed_left,
                    tex_seed_right,
                );
                t += 1;
                if t >= frames_per_subject {
                    break;
                }
            }
            gaze_from = gaze_to;
        }
    }
    // records were pushed interleaved (L,R) per timepoint; keep per-eye
    // streams ordered by sorting stably on (subject, session, eye, index)
    frames.sort_by(|a, b| {
        (
            &a.record.subject_id,
            &a.record.session_id,
            a.record.eye,
            a.record.frame_index,
        )
            .cmp(&(
                &b.record.subject_id,
                &b.record.session_id,
                b.record.eye,
                b.record.frame_index,
            ))
    });
    Ok(frames)
}

#[allow(clippy::too_many_arguments)]
fn push_timepoint(
    frames: &mut Vec<SynthFrame>,
    subject_id: &str,
    t: usize,
    gaze: (f64, f64),
    fixation: bool,
    config: &SamplerConfig,
    base_brightness: f64,
    jrng: &mut rand_chacha::ChaCha12Rng,
    iris_radius: f64,
    pupil_radius: f64,
    eyelid_openness: f64,
    contrast: f64,
    glints: &[Vec<(f64, f64)>],
    tex_seed_left: u64,
    tex_seed_right: u64,
) {
    let jitter = jrng.gen_range(-config.brightness_jitter..=config.brightness_jitter);
    let brightness = (base_brightness + jitter).clamp(0.05, 1.0);
    let eyes: &[Eye] = if config.both_eyes {
        &[Eye::Left, Eye::Right]
    } else {
        &[Eye::Left]
    };
    for (ei, &eye) in eyes.iter().enumerate() {
        let params = EyeSceneParams {
            yaw_deg: gaze.0,
            pitch_deg: gaze.1,
            iris_radius,
            pupil_radius,
            eyelid_openness,
            brightness,
            contrast,
            glint_offsets: glints[ei].clone(),
            texture_seed: if eye == Eye::Left { tex_seed_left } else { tex_seed_right },
            height: config.image_height,
            width: config.image_width,
            noise_sigma: config.noise_sigma,
            off_axis_warp: config.off_axis_warp,
        };
        let record = FrameRecord {
            subject_id: subject_id.to_string(),
            session_id: "sess00".to_string(),
            eye,
            frame_index: t as i64,
            image_path: format!("{subject_id}/sess00/{eye}/f{t:05}.png"),
            gaze_yaw_deg: Some(gaze.0),
            gaze_pitch_deg: Some(gaze.1),
            fixation,
            head_pose_id: None,
            video_id: None,
        };
        frames.push(SynthFrame { record, params });
    }
}

/// Extract just the records (manifest view of a synthetic dataset).
pub fn records(frames: &[SynthFrame]) -> Vec<FrameRecord> {
    frames.iter().map(|f| f.record.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_images() {
        let mut p = EyeSceneParams::centered(96, 96);
        p.height = 31;
        assert!(matches!(render(&p), Err(RenderError::ImageTooSmall { .. })));
    }

    #[test]
    fn render_is_deterministic() {
        let p = EyeSceneParams::centered(64, 64);
        let a = render(&p).unwrap();
        let b = render(&p).unwrap();
        assert_eq!(a, b, "bitwise identical renders");
    }

    #[test]
    fn centered_gaze_puts_pupil_at_center() {
        let p = EyeSceneParams::centered(96, 96);
        let img = render(&p).unwrap();
        let (x, y) = pupil_centroid(&img).expect("pupil found");
        assert!((x - 47.5).abs() <= 1.0, "x={x}");
        assert!((y - 47.5).abs() <= 1.0, "y={y}");
    }

    #[test]
    fn opposite_yaw_gives_symmetric_displacement() {
        let mut p = EyeSceneParams::centered(96, 96);
        p.yaw_deg = 10.0;
        let (xp, _) = pupil_centroid(&render(&p).unwrap()).unwrap();
        p.yaw_deg = -10.0;
        let (xm, _) = pupil_centroid(&render(&p).unwrap()).unwrap();
        let cx = 47.5;
        let dp = xp - cx;
        let dm = xm - cx;
        assert!(dp > 0.0 && dm < 0.0, "dp={dp} dm={dm}");
        assert!((dp + dm).abs() <= 1.0, "magnitudes differ: {dp} vs {dm}");
    }

    #[test]
    fn pupil_x_strictly_increases_with_yaw() {
        let mut p = EyeSceneParams::centered(96, 96);
        let mut last = f64::NEG_INFINITY;
        for yaw in -25..=25 {
            p.yaw_deg = yaw as f64;
            let (x, _) = pupil_centroid(&render(&p).unwrap()).unwrap();
            assert!(x > last, "yaw {yaw}: x={x} not above {last}");
            last = x;
        }
    }

    #[test]
    fn pupil_y_monotone_in_pitch() {
        let mut p = EyeSceneParams::centered(96, 96);
        let mut last = f64::INFINITY;
        for pitch in (-20..=20).step_by(2) {
            p.pitch_deg = pitch as f64;
            let (_, y) = pupil_centroid(&render(&p).unwrap()).unwrap();
            assert!(y < last, "pitch {pitch}: y={y} not below {last}");
            last = y;
        }
    }

    #[test]
    fn brightness_contrast_do_not_move_pupil() {
        let mut p = EyeSceneParams::centered(96, 96);
        p.yaw_deg = 8.0;
        p.pitch_deg = -5.0;
        let (x0, y0) = pupil_centroid(&render(&p).unwrap()).unwrap();
        p.brightness = 0.6;
        p.contrast = 0.9;
        let (x1, y1) = pupil_centroid(&render(&p).unwrap()).unwrap();
        assert!((x0 - x1).abs() <= 1.0, "{x0} vs {x1}");
        assert!((y0 - y1).abs() <= 1.0, "{y0} vs {y1}");
    }

    #[test]
    fn eyelid_occludes_top_of_iris() {
        let mut p = EyeSceneParams::centered(96, 96);
        p.noise_sigma = 0.0;
        p.off_axis_warp = false;
        p.eyelid_openness = 1.0;
        let open = render(&p).unwrap();
        p.eyelid_openness = 0.5;
        let half = render(&p).unwrap();
        // at half openness the pixel at the top of the iris is lid-colored
        let iris_top_y = (47.5 - p.iris_radius + 2.0) as usize;
        let x = 47usize;
        let lid_col = (p.brightness * 0.45) as f32;
        assert!((half[[iris_top_y, x]] - lid_col).abs() < 0.03);
        assert!((open[[iris_top_y, x]] - lid_col).abs() > 0.05, "open eye shows iris");
    }

    #[test]
    fn sample_dataset_is_deterministic() {
        let cfg = SamplerConfig {
            image_height: 48,
            image_width: 48,
            ..Default::default()
        };
        let a = sample_dataset(2, 100, 7, &cfg).unwrap();
        let b = sample_dataset(2, 100, 7, &cfg).unwrap();
        assert_eq!(records(&a), records(&b));
        assert_eq!(a.len(), 2 * 100 * 2, "both eyes");
    }

    #[test]
    fn every_subject_has_a_long_fixation_interval() {
        let cfg = SamplerConfig::default();
        let frames = sample_dataset(3, 80, 11, &cfg).unwrap();
        let recs = records(&frames);
        let ivs = crate::data::fixation_intervals(&recs);
        for s in 0..3 {
            let sid = format!("s{s:02}");
            let ok = ivs
                .iter()
                .any(|iv| iv.subject_id == sid && iv.frames.len() >= 3);
            assert!(ok, "subject {sid} lacks a >=3-frame fixation interval");
        }
    }

    #[test]
    fn fixation_frames_have_constant_labels() {
        let cfg = SamplerConfig::default();
        let frames = sample_dataset(1, 60, 3, &cfg).unwrap();
        let recs = records(&frames);
        let ivs = crate::data::fixation_intervals(&recs);
        assert!(!ivs.is_empty());
        for iv in &ivs {
            for &f in &iv.frames {
                assert_eq!(recs[f].gaze_label().unwrap(), iv.label, "exact equality");
            }
        }
    }

    #[test]
    fn right_eye_is_mirrored_left_geometry() {
        let cfg = SamplerConfig {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let frames = sample_dataset(1, 20, 5, &cfg).unwrap();
        let right = frames
            .iter()
            .find(|f| f.record.eye == Eye::Right)
            .unwrap();
        let img = right.render().unwrap();
        let remirrored = mirror_horizontal(&img);
        let direct = render(&right.params).unwrap();
        assert_eq!(remirrored, direct);
    }
}
