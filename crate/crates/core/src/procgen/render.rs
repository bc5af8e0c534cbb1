//! Signed-distance rasterizer for the procedural avatar.
//!
//! Face-space coordinates run over `[-1, 1]` in both axes with `v` pointing
//! down. Each feature is a filled shape whose coverage is a smoothstep of
//! its signed distance over a two-pixel band. Layers are composited back to
//! front; the nuisance coordinates act last as a 2-D similarity transform.

use super::layout::*;
use super::{Image, ParamVector};
use crate::error::Result;

/// Flat background colour of engine renders.
pub const BACKGROUND: [f64; 3] = [0.90, 0.91, 0.93];

const BASE_SKIN: [f64; 3] = [0.86, 0.69, 0.56];
const BASE_HAIR: [f64; 3] = [0.36, 0.25, 0.16];
const CHEEK: [f64; 3] = [0.88, 0.44, 0.44];
const EYE_WHITE: [f64; 3] = [0.97, 0.97, 0.95];
const IRIS_DARK: [f64; 3] = [0.26, 0.15, 0.08];
const IRIS_LIGHT: [f64; 3] = [0.25, 0.48, 0.78];
const LIP_LIGHT: [f64; 3] = [0.80, 0.40, 0.40];
const LIP_DARK: [f64; 3] = [0.52, 0.14, 0.20];
const PUPIL: [f64; 3] = [0.05, 0.05, 0.06];

/// Engine output with the per-pixel weight the flat background still carries.
#[derive(Clone, Debug)]
pub struct Raster {
    pub image: Image,
    /// `H×W` weight of the background colour in each pixel, in `[0, 1]`.
    pub background_weight: Vec<f32>,
}

/// Geometry and colours decoded from a parameter vector.
struct Face {
    head_w: f64,
    head_h: f64,
    jaw_w: f64,
    chin_h: f64,
    eye_dx: f64,
    eye_r: f64,
    eye_y: f64,
    eye_tilt: f64,
    eye_aspect: f64,
    brow_t: f64,
    brow_tilt: f64,
    nose_w: f64,
    nose_l: f64,
    nose_shade: f64,
    mouth_w: f64,
    mouth_h: f64,
    mouth_curve: f64,
    skin: [f64; 3],
    hair: [f64; 3],
    hair_line: f64,
    cheek_alpha: f64,
    iris: [f64; 3],
    lip: [f64; 3],
    brow: [f64; 3],
    // similarity transform, face -> image
    rot: f64,
    tx: f64,
    ty: f64,
    scale: f64,
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

impl Face {
    fn decode(p: &ParamVector) -> Self {
        let q = |i| p.unit(i);
        let head_w = 0.52 + 0.10 * q(HEAD_HALF_WIDTH);
        let head_h = 0.64 + 0.10 * q(HEAD_HALF_HEIGHT);
        let hair = [
            (BASE_HAIR[0] + 0.22 * q(HAIR_R)).clamp(0.0, 1.0),
            (BASE_HAIR[1] + 0.18 * q(HAIR_G)).clamp(0.0, 1.0),
            (BASE_HAIR[2] + 0.14 * q(HAIR_B)).clamp(0.0, 1.0),
        ];
        let brow_k = 0.65 + 0.30 * q(BROW_DARKNESS);
        Self {
            head_w,
            head_h,
            jaw_w: head_w * (1.0 + 0.14 * q(JAW_WIDTH)),
            chin_h: head_h + 0.09 * q(CHIN_OFFSET),
            eye_dx: 0.22 + 0.05 * q(EYE_SPACING),
            eye_r: 0.085 + 0.030 * q(EYE_SIZE),
            eye_y: -0.08 + 0.07 * q(EYE_HEIGHT),
            eye_tilt: 0.30 * q(EYE_TILT),
            eye_aspect: 0.62 + 0.20 * q(EYE_ASPECT),
            brow_t: 0.035 + 0.018 * q(BROW_THICKNESS),
            brow_tilt: 0.35 * q(BROW_TILT),
            nose_w: 0.07 + 0.03 * q(NOSE_WIDTH),
            nose_l: 0.17 + 0.06 * q(NOSE_LENGTH),
            nose_shade: 0.22 + 0.14 * q(NOSE_SHADE),
            mouth_w: 0.20 + 0.07 * q(MOUTH_WIDTH),
            mouth_h: 0.035 + 0.018 * q(MOUTH_HEIGHT),
            mouth_curve: 0.9 * q(MOUTH_CURVATURE),
            skin: [
                (BASE_SKIN[0] + 0.12 * q(SKIN_R)).clamp(0.0, 1.0),
                (BASE_SKIN[1] + 0.12 * q(SKIN_G)).clamp(0.0, 1.0),
                (BASE_SKIN[2] + 0.12 * q(SKIN_B)).clamp(0.0, 1.0),
            ],
            hair,
            hair_line: -head_h + 0.30 + 0.14 * q(HAIR_BAND_HEIGHT),
            cheek_alpha: 0.30 + 0.28 * q(CHEEK_SHADING),
            iris: lerp3(IRIS_DARK, IRIS_LIGHT, 0.5 * (q(IRIS_TONE) + 1.0)),
            lip: lerp3(LIP_LIGHT, LIP_DARK, 0.5 * (q(LIP_TONE) + 1.0)),
            brow: [hair[0] * brow_k, hair[1] * brow_k, hair[2] * brow_k],
            rot: 0.20 * q(ROTATION),
            tx: 0.25 * q(TRANSLATE_X),
            ty: 0.25 * q(TRANSLATE_Y),
            scale: 1.0 + 0.20 * q(SCALE),
        }
    }
}

/// Approximate signed distance to an axis-aligned ellipse.
fn sd_ellipse(u: f64, v: f64, a: f64, b: f64) -> f64 {
    ((u / a).powi(2) + (v / b).powi(2)).sqrt().mul_add(1.0, -1.0) * a.min(b)
}

/// Distance to a segment from `(-half, 0)` to `(half, 0)` minus a radius.
fn sd_capsule(u: f64, v: f64, half: f64, radius: f64) -> f64 {
    let cu = u.clamp(-half, half);
    ((u - cu).powi(2) + v * v).sqrt() - radius
}

fn rotate(u: f64, v: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (c * u + s * v, -s * u + c * v)
}

/// Coverage in `[0, 1]` for signed distance `sd` with a falloff of `aa` on each side.
fn coverage(sd: f64, aa: f64) -> f64 {
    let t = ((aa - sd) / (2.0 * aa)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

struct Pixel {
    rgb: [f64; 3],
    bg: f64,
}

impl Pixel {
    fn over(&mut self, color: [f64; 3], alpha: f64) {
        if alpha <= 0.0 {
            return;
        }
        for c in 0..3 {
            self.rgb[c] += (color[c] - self.rgb[c]) * alpha;
        }
        self.bg *= 1.0 - alpha;
    }
}

fn shade_face(f: &Face, u: f64, v: f64, aa: f64) -> Pixel {
    let mut px = Pixel { rgb: BACKGROUND, bg: 1.0 };

    // hair volume behind and above the head
    let hair_shell = if v < 0.0 {
        sd_ellipse(u, v, f.head_w * 1.07, f.head_h * 1.07)
    } else {
        sd_ellipse(u, v, f.jaw_w * 1.07, f.chin_h * 1.07)
    };
    let hair_back = hair_shell.max(v - (f.hair_line + 0.25));
    px.over(f.hair, coverage(hair_back, aa));

    let head = if v < 0.0 {
        sd_ellipse(u, v, f.head_w, f.head_h)
    } else {
        sd_ellipse(u, v, f.jaw_w, f.chin_h)
    };
    let head_cov = coverage(head, aa);
    px.over(f.skin, head_cov);

    // fringe: hair band over the top of the head
    px.over(f.hair, coverage(head.max(v - f.hair_line), aa));

    for side in [-1.0, 1.0] {
        let cu = u - side * (f.eye_dx + 0.06);
        let cheek = sd_ellipse(cu, v - (f.eye_y + 0.24), 0.10, 0.08);
        px.over(CHEEK, coverage(cheek, aa) * f.cheek_alpha * head_cov);

        let (eu, ev) = rotate(u - side * f.eye_dx, v - f.eye_y, side * f.eye_tilt);
        let ew = f.eye_r * 1.5;
        let eh = ew * f.eye_aspect;
        let white = sd_ellipse(eu, ev, ew, eh);
        px.over(EYE_WHITE, coverage(white, aa));
        let iris_r = eh * 0.95;
        let iris = ((eu * eu + ev * ev).sqrt() - iris_r).max(white);
        px.over(f.iris, coverage(iris, aa));
        let pupil = (eu * eu + ev * ev).sqrt() - iris_r * 0.4;
        px.over(PUPIL, coverage(pupil.max(white), aa));

        let brow_y = f.eye_y - eh - 0.07;
        let (bu, bv) = rotate(u - side * f.eye_dx, v - brow_y, -side * f.brow_tilt);
        let brow = sd_capsule(bu, bv, 0.10, f.brow_t);
        px.over(f.brow, coverage(brow, aa));
    }

    let nose_c = f.eye_y + 0.06 + f.nose_l / 2.0;
    let nose = sd_ellipse(u, v - nose_c, f.nose_w, f.nose_l / 2.0);
    let k = 1.0 - f.nose_shade;
    px.over([f.skin[0] * k, f.skin[1] * k, f.skin[2] * k], coverage(nose, aa));

    let mouth_y = nose_c + f.nose_l / 2.0 + 0.13;
    let curve = mouth_y - f.mouth_curve * (u * u - f.mouth_w * f.mouth_w / 3.0);
    let mouth = ((v - curve).abs() - f.mouth_h).max(u.abs() - f.mouth_w);
    px.over(f.lip, coverage(mouth, aa));
    px
}

/// Renders the avatar and reports how much of each pixel is background.
pub fn rasterize(p: &ParamVector, size: usize) -> Result<Raster> {
    let p = ParamVector::new(p.values().to_vec())?;
    let f = Face::decode(&p);
    let n = size * size;
    let mut data = vec![0.0f32; 3 * n];
    let mut bgw = vec![0.0f32; n];
    let px_size = 2.0 / size as f64;
    let aa = px_size / f.scale;
    for y in 0..size {
        for x in 0..size {
            // image -> face space: undo translation, rotation, scale
            let iu = (x as f64 + 0.5) * px_size - 1.0 - f.tx;
            let iv = (y as f64 + 0.5) * px_size - 1.0 - f.ty;
            let (ru, rv) = rotate(iu, iv, -f.rot);
            let px = shade_face(&f, ru / f.scale, rv / f.scale, aa);
            let i = y * size + x;
            for c in 0..3 {
                data[c * n + i] = px.rgb[c].clamp(0.0, 1.0) as f32;
            }
            bgw[i] = px.bg.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(Raster {
        image: Image::from_clamped(size, size, data)?,
        background_weight: bgw,
    })
}

/// Deterministic, non-differentiable engine render of `p` at `size×size`.
pub fn render_engine(p: &ParamVector, size: usize) -> Result<Image> {
    Ok(rasterize(p, size)?.image)
}
