//! Teacher/student input views under the four consistency modes.
//!
//! Images are NHWC `f32` in `[-1, 1]`. A crop is sampled in source pixel
//! coordinates ([`CropParams`]) so it can be replayed at any output
//! resolution, which is how consistent modes give both roles the same view.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CROP_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyMode {
    FixedTeacher,
    Independent,
    Consistent,
    FunctionMatching,
}

impl ConsistencyMode {
    pub const ALL: [ConsistencyMode; 4] = [
        ConsistencyMode::FixedTeacher,
        ConsistencyMode::Independent,
        ConsistencyMode::Consistent,
        ConsistencyMode::FunctionMatching,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConsistencyMode::FixedTeacher => "fixed_teacher",
            ConsistencyMode::Independent => "independent",
            ConsistencyMode::Consistent => "consistent",
            ConsistencyMode::FunctionMatching => "function_matching",
        }
    }
}

impl std::str::FromStr for ConsistencyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown consistency mode `{s}`")))
    }
}

fn default_area() -> (f64, f64) {
    (0.05, 1.0)
}
fn default_aspect() -> (f64, f64) {
    (3.0 / 4.0, 4.0 / 3.0)
}
fn default_flip() -> f64 {
    0.5
}
fn default_alpha() -> f64 {
    1.0
}
fn default_central() -> f64 {
    0.875
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default = "default_area")]
    pub area_range: (f64, f64),
    #[serde(default = "default_aspect")]
    pub aspect_range: (f64, f64),
    #[serde(default = "default_flip")]
    pub flip_prob: f64,
    #[serde(default = "default_alpha")]
    pub mixup_alpha: f64,
    pub teacher_resolution: usize,
    pub student_resolution: usize,
    /// Area fraction of the deterministic central crop (eval and fixed teacher).
    #[serde(default = "default_central")]
    pub central_crop_area: f64,
}

impl AugmentConfig {
    pub fn new(teacher_resolution: usize, student_resolution: usize) -> Self {
        AugmentConfig {
            area_range: default_area(),
            aspect_range: default_aspect(),
            flip_prob: default_flip(),
            mixup_alpha: default_alpha(),
            teacher_resolution,
            student_resolution,
            central_crop_area: default_central(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.area_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "crop area range {lo}..{hi} invalid"
            )));
        }
        let (alo, ahi) = self.aspect_range;
        if !(0.0 < alo && alo <= ahi) {
            return Err(Error::InvalidArgument(format!(
                "aspect range {alo}..{ahi} invalid"
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::InvalidArgument(format!(
                "flip probability {}",
                self.flip_prob
            )));
        }
        if !(self.mixup_alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "mixup alpha must be positive, got {}",
                self.mixup_alpha
            )));
        }
        if self.student_resolution == 0 || self.teacher_resolution < self.student_resolution {
            return Err(Error::InvalidArgument(format!(
                "teacher resolution {} must be >= student resolution {} > 0",
                self.teacher_resolution, self.student_resolution
            )));
        }
        if !(0.0 < self.central_crop_area && self.central_crop_area <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "central crop area {}",
                self.central_crop_area
            )));
        }
        Ok(())
    }
}

/// A crop rectangle in source pixels plus a horizontal flip flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropParams {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub flip: bool,
}

impl CropParams {
    pub fn full(h: usize, w: usize) -> Self {
        CropParams {
            x: 0,
            y: 0,
            w,
            h,
            flip: false,
        }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

/// Bilinear resize with half-pixel centers. Same-size resizes copy exactly.
pub fn resize_bilinear(
    src: &[f32],
    h: usize,
    w: usize,
    c: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    crop_resize(src, h, w, c, &CropParams::full(h, w), out_h, out_w)
}

fn axis_taps(start: usize, len: usize, out: usize) -> Vec<(usize, usize, f32)> {
    let scale = len as f64 / out as f64;
    (0..out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (start + i0, start + i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Crop `p` out of an `[h,w,c]` image and resize it to `[out_h,out_w,c]`.
pub fn crop_resize(
    src: &[f32],
    h: usize,
    w: usize,
    c: usize,
    p: &CropParams,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    debug_assert!(p.x + p.w <= w && p.y + p.h <= h && p.w > 0 && p.h > 0);
    let ys = axis_taps(p.y, p.h, out_h);
    let xs = axis_taps(p.x, p.w, out_w);
    let mut out = vec![0.0f32; out_h * out_w * c];
    let at = |y: usize, x: usize, ch: usize| src[(y * w + x) * c + ch];
    for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
            let dx = if p.flip { out_w - 1 - ox } else { ox };
            for ch in 0..c {
                let top = at(y0, x0, ch) * (1.0 - wx) + at(y0, x1, ch) * wx;
                let bottom = at(y1, x0, ch) * (1.0 - wx) + at(y1, x1, ch) * wx;
                out[(oy * out_w + dx) * c + ch] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    out
}

/// Centered crop covering `area_fraction` of the image at its aspect ratio.
pub fn central_crop(h: usize, w: usize, area_fraction: f64) -> CropParams {
    let side = area_fraction.sqrt();
    let ch = ((h as f64 * side).round() as usize).clamp(1, h);
    let cw = ((w as f64 * side).round() as usize).clamp(1, w);
    CropParams {
        x: (w - cw) / 2,
        y: (h - ch) / 2,
        w: cw,
        h: ch,
        flip: false,
    }
}

fn fallback_crop(h: usize, w: usize, (alo, ahi): (f64, f64)) -> CropParams {
    let ratio = w as f64 / h as f64;
    let (cw, ch) = if ratio < alo {
        (w, ((w as f64 / alo).round() as usize).clamp(1, h))
    } else if ratio > ahi {
        (((h as f64 * ahi).round() as usize).clamp(1, w), h)
    } else {
        (w, h)
    };
    CropParams {
        x: (w - cw) / 2,
        y: (h - ch) / 2,
        w: cw,
        h: ch,
        flip: false,
    }
}

/// Inception-style crop: area fraction uniform in `area_range`, aspect
/// log-uniform in `aspect_range`, up to ten attempts before a centered
/// fallback; flip drawn last.
pub fn sample_crop(h: usize, w: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> CropParams {
    let area = (h * w) as f64;
    let (llo, lhi) = (cfg.aspect_range.0.ln(), cfg.aspect_range.1.ln());
    let mut crop = None;
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.gen_range(cfg.area_range.0..=cfg.area_range.1);
        let ratio = if llo < lhi {
            rng.gen_range(llo..lhi).exp()
        } else {
            llo.exp()
        };
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let x = rng.gen_range(0..=w - cw);
            let y = rng.gen_range(0..=h - ch);
            crop = Some(CropParams {
                x,
                y,
                w: cw,
                h: ch,
                flip: false,
            });
            break;
        }
    }
    let mut crop = crop.unwrap_or_else(|| fallback_crop(h, w, cfg.aspect_range));
    crop.flip = rng.gen_bool(cfg.flip_prob);
    crop
}

/// Sample a crop of an `[h,w,c]` image and render it at `out_res`².
pub fn random_resized_crop(
    img: &[f32],
    (h, w, c): (usize, usize, usize),
    cfg: &AugmentConfig,
    out_res: usize,
    rng: &mut impl Rng,
) -> (CropParams, Vec<f32>) {
    let p = sample_crop(h, w, cfg, rng);
    (p, crop_resize(img, h, w, c, &p, out_res, out_res))
}

fn image_dims(batch: &Tensor<f32>) -> Result<(usize, usize, usize, usize)> {
    match *batch.shape() {
        [b, h, w, c] if h > 0 && w > 0 => Ok((b, h, w, c)),
        _ => Err(Error::InvalidArgument(format!(
            "expected [b,h,w,c] images, got {:?}",
            batch.shape()
        ))),
    }
}

/// Render each image of `batch` through its crop at `res`².
pub fn render_crops(batch: &Tensor<f32>, crops: &[CropParams], res: usize) -> Result<Tensor<f32>> {
    let (b, h, w, c) = image_dims(batch)?;
    if crops.len() != b {
        return Err(Error::InvalidArgument(format!(
            "{} crops for {b} images",
            crops.len()
        )));
    }
    let per = h * w * c;
    let mut out = Vec::with_capacity(b * res * res * c);
    for (i, p) in crops.iter().enumerate() {
        out.extend(crop_resize(
            &batch.data()[i * per..(i + 1) * per],
            h,
            w,
            c,
            p,
            res,
            res,
        ));
    }
    Tensor::new(vec![b, res, res, c], out)
}

/// Resize every image of a `[b,h,w,c]` batch to `res`².
pub fn resize_batch(batch: &Tensor<f32>, res: usize) -> Result<Tensor<f32>> {
    let (b, h, w, _) = image_dims(batch)?;
    if h == res && w == res {
        return Ok(batch.clone());
    }
    render_crops(batch, &vec![CropParams::full(h, w); b], res)
}

/// Deterministic central-crop view at `res`² (evaluation preprocessing).
pub fn central_view(batch: &Tensor<f32>, area_fraction: f64, res: usize) -> Result<Tensor<f32>> {
    let (b, h, w, _) = image_dims(batch)?;
    render_crops(batch, &vec![central_crop(h, w, area_fraction); b], res)
}

/// `λ ~ Beta(α, α)` per example and a uniformly random partner permutation.
pub fn sample_mixup(
    batch_size: usize,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::InvalidArgument(format!("mixup alpha {alpha}: {e}")))?;
    let lambda = (0..batch_size).map(|_| beta.sample(rng)).collect();
    let mut partner: Vec<usize> = (0..batch_size).collect();
    partner.shuffle(rng);
    Ok((lambda, partner))
}

/// `mixed_i = λ_i·x_i + (1−λ_i)·x_{partner_i}`, clamped to `[-1, 1]`.
/// Rows with `λ = 1` or `partner_i = i` are copied unchanged.
pub fn apply_mixup(batch: &Tensor<f32>, lambda: &[f64], partner: &[usize]) -> Result<Tensor<f32>> {
    let b = batch.shape().first().copied().unwrap_or(0);
    if lambda.len() != b || partner.len() != b {
        return Err(Error::InvalidArgument(
            "mixup coefficients do not match batch".into(),
        ));
    }
    let per = if b == 0 { 0 } else { batch.len() / b };
    let src = batch.data();
    let mut out = src.to_vec();
    for i in 0..b {
        let (l, j) = (lambda[i], partner[i]);
        if l == 1.0 || j == i {
            continue;
        }
        let (lf, mf) = (l as f32, (1.0 - l) as f32);
        for k in 0..per {
            out[i * per + k] = (lf * src[i * per + k] + mf * src[j * per + k]).clamp(-1.0, 1.0);
        }
    }
    Tensor::new(batch.shape().to_vec(), out)
}

/// Mixed batch plus the sampled coefficients.
pub fn mixup(
    batch: &Tensor<f32>,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, Vec<f64>, Vec<usize>)> {
    let b = batch.shape().first().copied().unwrap_or(0);
    let (lambda, partner) = sample_mixup(b, alpha, rng)?;
    Ok((apply_mixup(batch, &lambda, &partner)?, lambda, partner))
}

#[derive(Debug, Clone)]
pub struct ViewPair {
    /// `[b, teacher_res, teacher_res, c]`.
    pub teacher: Tensor<f32>,
    /// `[b, student_res, student_res, c]`.
    pub student: Tensor<f32>,
    pub lambda: Vec<f64>,
    pub partner: Vec<usize>,
    pub teacher_crops: Vec<CropParams>,
    pub student_crops: Vec<CropParams>,
}

/// Teacher and student inputs for one batch under `mode`.
///
/// Teacher crops are drawn for the whole batch before any student crop, so
/// `independent` and `consistent` consume the sampler identically for the
/// teacher role.
pub fn make_views(
    batch: &Tensor<f32>,
    mode: ConsistencyMode,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<ViewPair> {
    cfg.validate()?;
    let (b, h, w, _) = image_dims(batch)?;
    let (tr, sr) = (cfg.teacher_resolution, cfg.student_resolution);
    let ones = vec![1.0; b];
    let ident: Vec<usize> = (0..b).collect();

    let view = match mode {
        ConsistencyMode::FixedTeacher => {
            let tc = vec![central_crop(h, w, cfg.central_crop_area); b];
            let sc: Vec<CropParams> = (0..b).map(|_| sample_crop(h, w, cfg, rng)).collect();
            ViewPair {
                teacher: render_crops(batch, &tc, tr)?,
                student: render_crops(batch, &sc, sr)?,
                lambda: ones,
                partner: ident,
                teacher_crops: tc,
                student_crops: sc,
            }
        }
        ConsistencyMode::Independent => {
            let tc: Vec<CropParams> = (0..b).map(|_| sample_crop(h, w, cfg, rng)).collect();
            let sc: Vec<CropParams> = (0..b).map(|_| sample_crop(h, w, cfg, rng)).collect();
            ViewPair {
                teacher: render_crops(batch, &tc, tr)?,
                student: render_crops(batch, &sc, sr)?,
                lambda: ones,
                partner: ident,
                teacher_crops: tc,
                student_crops: sc,
            }
        }
        ConsistencyMode::Consistent | ConsistencyMode::FunctionMatching => {
            let tc: Vec<CropParams> = (0..b).map(|_| sample_crop(h, w, cfg, rng)).collect();
            let teacher = render_crops(batch, &tc, tr)?;
            let student = resize_batch(&teacher, sr)?;
            let mut pair = ViewPair {
                teacher,
                student,
                lambda: ones,
                partner: ident,
                student_crops: tc.clone(),
                teacher_crops: tc,
            };
            if mode == ConsistencyMode::FunctionMatching {
                let (lambda, partner) = sample_mixup(b, cfg.mixup_alpha, rng)?;
                pair.teacher = apply_mixup(&pair.teacher, &lambda, &partner)?;
                pair.student = apply_mixup(&pair.student, &lambda, &partner)?;
                pair.lambda = lambda;
                pair.partner = partner;
            }
            pair
        }
    };
    Ok(view)
}
