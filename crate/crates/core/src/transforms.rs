//! Realistic image transformations and the projection of raw input
//! gradients onto each family's parameter space.
//!
//! Every `apply` output is clamped elementwise into [0, 1], so the search
//! can never leave the feasible pixel domain. The neutral spec of each
//! family (zero gradient) is an exact identity.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SIGMA_MIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DotColor {
    Black,
    White,
}

impl DotColor {
    pub fn value(self) -> f64 {
        match self {
            DotColor::Black => 0.0,
            DotColor::White => 1.0,
        }
    }
}

/// One concrete, fully-determined transformation.
#[derive(Debug, Clone, PartialEq)]
pub enum TransformSpec {
    /// `out = in * gain + bias`; brightness is the bias term, contrast
    /// the gain term.
    BrightnessContrast { gain: f64, bias: f64 },
    /// Forward-mapping 2x3 matrix (content moves by +t); applied by
    /// inverse-mapped bilinear sampling with zero fill outside bounds.
    Affine { matrix: [[f64; 3]; 2] },
    /// 3x3 Gaussian blur parameterized by sigma.
    GaussianBlur { sigma: f64 },
    /// Additive gradient-directed patch inside a rectangle.
    OcclusionRect {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
        patch: Tensor,
    },
    /// Pixels forced to pure black or white.
    OcclusionDots {
        color: DotColor,
        positions: Vec<(usize, usize)>,
    },
    /// Mask blending: `out = (1 - a*w) * in + a*w * overlay` with the
    /// per-pixel weight `w` combining the mask's alpha channel and the
    /// significant-gradient region.
    Overlay {
        mask_id: String,
        alpha: f64,
        overlay: Tensor,
        weight: Tensor,
    },
}

impl TransformSpec {
    /// Short family tag, used in corpus records.
    pub fn family_name(&self) -> &'static str {
        match self {
            TransformSpec::BrightnessContrast { .. } => "brightness_contrast",
            TransformSpec::Affine { .. } => "affine",
            TransformSpec::GaussianBlur { .. } => "blur",
            TransformSpec::OcclusionRect { .. } => "occl_rect",
            TransformSpec::OcclusionDots { .. } => "occl_dots",
            TransformSpec::Overlay { .. } => "overlay",
        }
    }
}

/// An overlay mask asset: RGB(A) image whose alpha channel acts as the
/// per-pixel blend weight. Stored resized to the working image shape.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlayAsset {
    pub id: String,
    /// `(H, W, C)` overlay colors, matching the working image channels.
    pub rgb: Tensor,
    /// `(H, W, 1)` blend weights in [0, 1].
    pub alpha: Tensor,
}

/// Transformation family plus its fixed configuration; the free
/// parameters come from the gradient at each iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintFamily {
    Light,
    Contrast,
    Affine,
    Blur,
    OcclRect { width: usize, height: usize },
    OcclDots { count: usize, color: DotColor },
    Overlay { asset: OverlayAsset },
}

impl ConstraintFamily {
    pub fn name(&self) -> String {
        match self {
            ConstraintFamily::Light => "light".into(),
            ConstraintFamily::Contrast => "contrast".into(),
            ConstraintFamily::Affine => "affine".into(),
            ConstraintFamily::Blur => "blur".into(),
            ConstraintFamily::OcclRect { .. } => "occl_rect".into(),
            ConstraintFamily::OcclDots { .. } => "occl_dots".into(),
            ConstraintFamily::Overlay { asset } => format!("overlay:{}", asset.id),
        }
    }
}

/// Applies a transformation; output has the image's shape with every
/// element clamped into [0, 1].
pub fn apply(image: &Tensor, spec: &TransformSpec) -> Result<Tensor> {
    let [h, w, c] = dims(image)?;
    let mut out = match spec {
        TransformSpec::BrightnessContrast { gain, bias } => {
            if !gain.is_finite() || !bias.is_finite() || *gain <= 0.0 {
                return Err(Error::usage(format!(
                    "invalid brightness/contrast spec: gain={gain}, bias={bias}"
                )));
            }
            image.map(|v| v * gain + bias)
        }
        TransformSpec::Affine { matrix } => {
            if matrix.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::usage("affine matrix has non-finite entries"));
            }
            let inv = invert_affine(matrix)?;
            let mut out = Tensor::zeros(image.shape());
            for y in 0..h {
                for x in 0..w {
                    let xf = x as f64;
                    let yf = y as f64;
                    let xs = inv[0][0] * xf + inv[0][1] * yf + inv[0][2];
                    let ys = inv[1][0] * xf + inv[1][1] * yf + inv[1][2];
                    for ch in 0..c {
                        let v = bilinear_zero_fill(image, xs, ys, ch);
                        let idx = out.idx3(y, x, ch);
                        out.data_mut()[idx] = v;
                    }
                }
            }
            out
        }
        TransformSpec::GaussianBlur { sigma } => {
            let kernel = gaussian_kernel(*sigma)?;
            blur_apply(image, &kernel)?
        }
        TransformSpec::OcclusionRect {
            x,
            y,
            width,
            height,
            patch,
        } => {
            if x + width > w || y + height > h || *width == 0 || *height == 0 {
                return Err(Error::usage(format!(
                    "occlusion rect {width}x{height} at ({x}, {y}) exceeds {w}x{h} image"
                )));
            }
            if patch.shape() != [*height, *width, c] {
                return Err(Error::ShapeMismatch {
                    expected: vec![*height, *width, c],
                    got: patch.shape().to_vec(),
                });
            }
            let mut out = image.clone();
            for dy in 0..*height {
                for dx in 0..*width {
                    for ch in 0..c {
                        let idx = out.idx3(y + dy, x + dx, ch);
                        out.data_mut()[idx] += patch.at3(dy, dx, ch);
                    }
                }
            }
            out
        }
        TransformSpec::OcclusionDots { color, positions } => {
            let mut out = image.clone();
            for &(py, px) in positions {
                if py >= h || px >= w {
                    return Err(Error::usage(format!(
                        "dot at ({py}, {px}) outside {h}x{w} image"
                    )));
                }
                for ch in 0..c {
                    let idx = out.idx3(py, px, ch);
                    out.data_mut()[idx] = color.value();
                }
            }
            out
        }
        TransformSpec::Overlay {
            alpha,
            overlay,
            weight,
            ..
        } => {
            if !(0.0..=1.0).contains(alpha) {
                return Err(Error::usage(format!("overlay alpha {alpha} outside [0, 1]")));
            }
            if overlay.shape() != image.shape() || weight.shape() != [h, w, 1] {
                return Err(Error::ShapeMismatch {
                    expected: image.shape().to_vec(),
                    got: overlay.shape().to_vec(),
                });
            }
            let mut out = image.clone();
            for y in 0..h {
                for x in 0..w {
                    let wgt = alpha * weight.at3(y, x, 0);
                    if wgt == 0.0 {
                        continue;
                    }
                    for ch in 0..c {
                        let idx = out.idx3(y, x, ch);
                        let v = out.data()[idx];
                        out.data_mut()[idx] = v + wgt * (overlay.at3(y, x, ch) - v);
                    }
                }
            }
            out
        }
    };
    out.clamp01();
    Ok(out)
}

/// 3x3 Gaussian kernel over offsets {-1, 0, 1}^2, normalized to sum
/// exactly 1.
pub fn gaussian_kernel(sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::usage(format!("sigma must be positive, got {sigma}")));
    }
    let mut weights = [0.0f64; 9];
    for (i, wv) in weights.iter_mut().enumerate() {
        let dy = (i / 3) as f64 - 1.0;
        let dx = (i % 3) as f64 - 1.0;
        *wv = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
    }
    let sum: f64 = weights.iter().sum();
    for wv in &mut weights {
        *wv /= sum;
    }
    Tensor::new(vec![3, 3], weights.to_vec())
}

/// Same-shape 3x3 convolution with edge replication padding.
pub fn blur_apply(image: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    if kernel.shape() != [3, 3] {
        return Err(Error::ShapeMismatch {
            expected: vec![3, 3],
            got: kernel.shape().to_vec(),
        });
    }
    let [h, w, c] = dims(image)?;
    let k = kernel.data();
    let mut out = Tensor::zeros(image.shape());
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        acc += k[((dy + 1) * 3 + dx + 1) as usize] * image.at3(sy, sx, ch);
                    }
                }
                let idx = out.idx3(y, x, ch);
                out.data_mut()[idx] = acc;
            }
        }
    }
    Ok(out)
}

/// Projects a raw input gradient onto a family's parameter space.
///
/// A zero gradient always yields the family's neutral spec, so
/// `apply(image, constrain_gradient(0, ...))` is the identity.
pub fn constrain_gradient(
    grad: &Tensor,
    image: &Tensor,
    family: &ConstraintFamily,
    step: f64,
    _rng: &mut ChaCha8Rng,
) -> Result<TransformSpec> {
    if grad.shape() != image.shape() {
        return Err(Error::ShapeMismatch {
            expected: image.shape().to_vec(),
            got: grad.shape().to_vec(),
        });
    }
    let [h, w, c] = dims(image)?;
    Ok(match family {
        ConstraintFamily::Light => TransformSpec::BrightnessContrast {
            gain: 1.0,
            bias: step * grad.mean(),
        },
        ConstraintFamily::Contrast => {
            let moment = grad.dot(image)? / grad.len() as f64;
            TransformSpec::BrightnessContrast {
                gain: (1.0 + step * moment).max(1e-6),
                bias: 0.0,
            }
        }
        ConstraintFamily::Affine => {
            let cx = (w as f64 - 1.0) / 2.0;
            let cy = (h as f64 - 1.0) / 2.0;
            // Coordinate-weighted gradient moments, normalized coordinates
            // in [-1, 1] about the image center.
            let (mut mx, mut my, mut mxy, mut mr) = (0.0, 0.0, 0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let xn = if cx > 0.0 { (x as f64 - cx) / cx } else { 0.0 };
                    let yn = if cy > 0.0 { (y as f64 - cy) / cy } else { 0.0 };
                    for ch in 0..c {
                        let g = grad.at3(y, x, ch);
                        mx += g * xn;
                        my += g * yn;
                        mxy += g * xn * yn;
                        mr += g * (xn * xn + yn * yn - 1.0);
                    }
                }
            }
            let n = grad.len() as f64;
            let tx = step * cx * mx / n;
            let ty = step * cy * my / n;
            let theta = step * mxy / n;
            let scale = 1.0 + step * mr / n;
            TransformSpec::Affine {
                matrix: rotation_scale_about(cx, cy, theta, scale, tx, ty),
            }
        }
        ConstraintFamily::Blur => {
            let mean_abs = grad.data().iter().map(|g| g.abs()).sum::<f64>() / grad.len() as f64;
            TransformSpec::GaussianBlur {
                sigma: (step * mean_abs).max(SIGMA_MIN),
            }
        }
        ConstraintFamily::OcclRect { width, height } => {
            if *width > w || *height > h || *width == 0 || *height == 0 {
                return Err(Error::usage(format!(
                    "occlusion rect {width}x{height} does not fit {w}x{h} image"
                )));
            }
            // Exhaustive window scan for the largest summed |grad|;
            // first position in row-major order wins ties.
            let (mut best_x, mut best_y, mut best_sum) = (0usize, 0usize, f64::NEG_INFINITY);
            for y in 0..=(h - height) {
                for x in 0..=(w - width) {
                    let mut sum = 0.0;
                    for dy in 0..*height {
                        for dx in 0..*width {
                            for ch in 0..c {
                                sum += grad.at3(y + dy, x + dx, ch).abs();
                            }
                        }
                    }
                    if sum > best_sum {
                        best_sum = sum;
                        best_x = x;
                        best_y = y;
                    }
                }
            }
            let patch = Tensor::from_fn(&[*height, *width, c], |i| {
                let ch = i % c;
                let dx = (i / c) % width;
                let dy = i / (c * width);
                step * grad.at3(best_y + dy, best_x + dx, ch)
            });
            TransformSpec::OcclusionRect {
                x: best_x,
                y: best_y,
                width: *width,
                height: *height,
                patch,
            }
        }
        ConstraintFamily::OcclDots { count, color } => {
            // Saliency per pixel: channel-summed |grad|. Only pixels with
            // nonzero saliency qualify, so a zero gradient places no dots.
            let mut saliency: Vec<(f64, usize, usize)> = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    let s: f64 = (0..c).map(|ch| grad.at3(y, x, ch).abs()).sum();
                    if s > 0.0 {
                        saliency.push((s, y, x));
                    }
                }
            }
            saliency.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .expect("saliency is finite")
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            TransformSpec::OcclusionDots {
                color: *color,
                positions: saliency
                    .into_iter()
                    .take(*count)
                    .map(|(_, y, x)| (y, x))
                    .collect(),
            }
        }
        ConstraintFamily::Overlay { asset } => {
            if asset.rgb.shape() != image.shape() {
                return Err(Error::ShapeMismatch {
                    expected: image.shape().to_vec(),
                    got: asset.rgb.shape().to_vec(),
                });
            }
            // alpha from the gradient's alignment with (overlay - image).
            let mut moment = 0.0;
            for (g, (o, i)) in grad
                .data()
                .iter()
                .zip(asset.rgb.data().iter().zip(image.data()))
            {
                moment += g * (o - i);
            }
            let alpha = (step * moment / grad.len() as f64).clamp(0.0, 1.0);
            // Blend only where the gradient is more significant than its
            // own median.
            let mut saliency: Vec<f64> = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    saliency.push((0..c).map(|ch| grad.at3(y, x, ch).abs()).sum());
                }
            }
            let median = median_of(&saliency);
            let weight = Tensor::from_fn(&[h, w, 1], |i| {
                if saliency[i] > median {
                    asset.alpha.data()[i]
                } else {
                    0.0
                }
            });
            TransformSpec::Overlay {
                mask_id: asset.id.clone(),
                alpha,
                overlay: asset.rgb.clone(),
                weight,
            }
        }
    })
}

fn median_of(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Forward matrix for scale `s` and rotation `theta` about `(cx, cy)`
/// with an extra translation, in the classical 2x3 form.
pub fn rotation_scale_about(
    cx: f64,
    cy: f64,
    theta: f64,
    scale: f64,
    tx: f64,
    ty: f64,
) -> [[f64; 3]; 2] {
    let a = scale * theta.cos();
    let b = scale * theta.sin();
    [
        [a, b, (1.0 - a) * cx - b * cy + tx],
        [-b, a, b * cx + (1.0 - a) * cy + ty],
    ]
}

pub fn identity_affine() -> [[f64; 3]; 2] {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
}

/// `second(first(.))` as a forward 2x3 matrix.
pub fn compose_affine(first: &[[f64; 3]; 2], second: &[[f64; 3]; 2]) -> [[f64; 3]; 2] {
    let mut out = [[0.0; 3]; 2];
    for (row, out_row) in out.iter_mut().enumerate() {
        for col in 0..3 {
            let mut acc = second[row][0] * first[0][col] + second[row][1] * first[1][col];
            if col == 2 {
                acc += second[row][2];
            }
            out_row[col] = acc;
        }
    }
    out
}

fn invert_affine(m: &[[f64; 3]; 2]) -> Result<[[f64; 3]; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() < 1e-12 {
        return Err(Error::usage("affine matrix is singular"));
    }
    let inv00 = m[1][1] / det;
    let inv01 = -m[0][1] / det;
    let inv10 = -m[1][0] / det;
    let inv11 = m[0][0] / det;
    Ok([
        [inv00, inv01, -(inv00 * m[0][2] + inv01 * m[1][2])],
        [inv10, inv11, -(inv10 * m[0][2] + inv11 * m[1][2])],
    ])
}

/// Bilinear sample at `(xs, ys)`; neighbors outside bounds contribute 0.
fn bilinear_zero_fill(image: &Tensor, xs: f64, ys: f64, ch: usize) -> f64 {
    let shape = image.shape();
    let (h, w) = (shape[0] as i64, shape[1] as i64);
    let x0 = xs.floor() as i64;
    let y0 = ys.floor() as i64;
    let dx = xs - x0 as f64;
    let dy = ys - y0 as f64;
    let mut acc = 0.0;
    for (yy, wy) in [(y0, 1.0 - dy), (y0 + 1, dy)] {
        if wy == 0.0 || yy < 0 || yy >= h {
            continue;
        }
        for (xx, wx) in [(x0, 1.0 - dx), (x0 + 1, dx)] {
            if wx == 0.0 || xx < 0 || xx >= w {
                continue;
            }
            acc += wy * wx * image.at3(yy as usize, xx as usize, ch);
        }
    }
    acc
}

fn dims(image: &Tensor) -> Result<[usize; 3]> {
    match image.shape() {
        [h, w, c] => Ok([*h, *w, *c]),
        other => Err(Error::ShapeMismatch {
            expected: vec![0, 0, 0],
            got: other.to_vec(),
        }),
    }
}

/// Loads an RGBA PNG overlay mask, resampling it to the working image
/// shape. The alpha channel becomes the per-pixel blend weight; RGB
/// collapses to luma for single-channel images.
pub fn load_overlay(path: &std::path::Path, target_shape: &[usize]) -> Result<OverlayAsset> {
    let [h, w, c] = match target_shape {
        [h, w, c] => [*h, *w, *c],
        other => {
            return Err(Error::usage(format!(
                "overlay target shape must be (H, W, C), got {other:?}"
            )))
        }
    };
    let img = image::open(path)
        .map_err(|e| Error::CorruptRecord(format!("{}: {e}", path.display())))?
        .to_rgba8();
    let (sw, sh) = (img.width() as usize, img.height() as usize);
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "overlay".into());

    let sample = |y: usize, x: usize| -> [f64; 4] {
        // Nearest-edge bilinear resample from source to target grid.
        let fy = if h > 1 {
            y as f64 * (sh - 1) as f64 / (h - 1) as f64
        } else {
            0.0
        };
        let fx = if w > 1 {
            x as f64 * (sw - 1) as f64 / (w - 1) as f64
        } else {
            0.0
        };
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let x1 = (x0 + 1).min(sw - 1);
        let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
        let mut out = [0.0; 4];
        for (i, o) in out.iter_mut().enumerate() {
            let p00 = img.get_pixel(x0 as u32, y0 as u32)[i] as f64;
            let p01 = img.get_pixel(x1 as u32, y0 as u32)[i] as f64;
            let p10 = img.get_pixel(x0 as u32, y1 as u32)[i] as f64;
            let p11 = img.get_pixel(x1 as u32, y1 as u32)[i] as f64;
            *o = ((1.0 - dy) * ((1.0 - dx) * p00 + dx * p01)
                + dy * ((1.0 - dx) * p10 + dx * p11))
                / 255.0;
        }
        out
    };

    let mut rgb = Tensor::zeros(&[h, w, c]);
    let mut alpha = Tensor::zeros(&[h, w, 1]);
    for y in 0..h {
        for x in 0..w {
            let px = sample(y, x);
            if c == 1 {
                let idx = rgb.idx3(y, x, 0);
                rgb.data_mut()[idx] = (px[0] + px[1] + px[2]) / 3.0;
            } else {
                for ch in 0..c.min(3) {
                    let idx = rgb.idx3(y, x, ch);
                    rgb.data_mut()[idx] = px[ch];
                }
            }
            let idx = alpha.idx3(y, x, 0);
            alpha.data_mut()[idx] = px[3];
        }
    }
    Ok(OverlayAsset { id, rgb, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn image3x3() -> Tensor {
        Tensor::from_fn(&[3, 3, 1], |i| (i as f64) / 10.0)
    }

    #[test]
    fn brightness_identity() {
        let img = image3x3();
        let out = apply(
            &img,
            &TransformSpec::BrightnessContrast {
                gain: 1.0,
                bias: 0.0,
            },
        )
        .unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn gain_clamps_at_one() {
        let img = Tensor::new(vec![1, 1, 1], vec![0.9]).unwrap();
        let out = apply(
            &img,
            &TransformSpec::BrightnessContrast {
                gain: 2.0,
                bias: 0.0,
            },
        )
        .unwrap();
        assert_eq!(out.data(), &[1.0]);
    }

    #[test]
    fn identity_affine_is_exact() {
        let img = image3x3();
        let out = apply(
            &img,
            &TransformSpec::Affine {
                matrix: identity_affine(),
            },
        )
        .unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn translation_shifts_right_with_zero_fill() {
        let img = Tensor::from_fn(&[3, 3, 1], |i| (i + 1) as f64 / 10.0);
        let out = apply(
            &img,
            &TransformSpec::Affine {
                matrix: [[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]],
            },
        )
        .unwrap();
        // Leftmost column zero-filled; others take their left neighbor.
        for y in 0..3 {
            assert_eq!(out.at3(y, 0, 0), 0.0);
            assert_eq!(out.at3(y, 1, 0), img.at3(y, 0, 0));
            assert_eq!(out.at3(y, 2, 0), img.at3(y, 1, 0));
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Tensor::filled(&[4, 5, 2], 0.37);
        let out = apply(&img, &TransformSpec::GaussianBlur { sigma: 1.3 }).unwrap();
        for v in out.data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_sums_to_one() {
        for sigma in [0.05, 0.3, 1.0, 5.0, 100.0] {
            let k = gaussian_kernel(sigma).unwrap();
            let sum: f64 = k.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sigma {sigma}: sum {sum}");
        }
    }

    #[test]
    fn kernel_limits_to_delta_for_tiny_sigma() {
        let k = gaussian_kernel(1e-3).unwrap();
        assert!((k.data()[4] - 1.0).abs() < 1e-12);
        assert!(k.data().iter().enumerate().all(|(i, &v)| i == 4 || v < 1e-12));
    }

    #[test]
    fn kernel_center_corner_ratio_at_sigma_one() {
        let k = gaussian_kernel(1.0).unwrap();
        let ratio = k.data()[4] / k.data()[0];
        assert!((ratio - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn delta_kernel_blur_is_identity() {
        let img = image3x3();
        let delta = Tensor::new(
            vec![3, 3],
            vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        assert_eq!(blur_apply(&img, &delta).unwrap(), img);
    }

    #[test]
    fn blur_matches_nested_loop_oracle() {
        // Brute-force convolution with edge replication, written straight
        // from the definition.
        let mut r = rng();
        use rand::Rng;
        let img = Tensor::from_fn(&[6, 6, 1], |_| r.gen_range(0.0..1.0));
        let kernel = gaussian_kernel(0.8).unwrap();
        let out = blur_apply(&img, &kernel).unwrap();
        for y in 0..6i64 {
            for x in 0..6i64 {
                let mut expect = 0.0;
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        let sy = (y + dy).clamp(0, 5) as usize;
                        let sx = (x + dx).clamp(0, 5) as usize;
                        expect +=
                            kernel.data()[((dy + 1) * 3 + dx + 1) as usize] * img.at3(sy, sx, 0);
                    }
                }
                assert_eq!(out.at3(y as usize, x as usize, 0), expect);
            }
        }
    }

    #[test]
    fn blur_never_expands_value_range() {
        let mut r = rng();
        use rand::Rng;
        for _ in 0..20 {
            let img = Tensor::from_fn(&[5, 7, 1], |_| r.gen_range(0.0..1.0));
            let out = apply(&img, &TransformSpec::GaussianBlur { sigma: 0.9 }).unwrap();
            assert!(out.min() >= img.min() - 1e-12);
            assert!(out.max() <= img.max() + 1e-12);
        }
    }

    #[test]
    fn zero_gradient_yields_neutral_specs() {
        let img = image3x3();
        let zero = Tensor::zeros(img.shape());
        let asset = OverlayAsset {
            id: "m".into(),
            rgb: Tensor::filled(&[3, 3, 1], 0.8),
            alpha: Tensor::filled(&[3, 3, 1], 1.0),
        };
        let families = vec![
            ConstraintFamily::Light,
            ConstraintFamily::Contrast,
            ConstraintFamily::Affine,
            ConstraintFamily::Blur,
            ConstraintFamily::OcclRect {
                width: 2,
                height: 2,
            },
            ConstraintFamily::OcclDots {
                count: 4,
                color: DotColor::Black,
            },
            ConstraintFamily::Overlay { asset },
        ];
        let mut r = rng();
        for family in families {
            let spec = constrain_gradient(&zero, &img, &family, 10.0, &mut r).unwrap();
            let out = apply(&img, &spec).unwrap();
            // Identity up to bilinear evaluation at exact grid points.
            for (a, b) in out.data().iter().zip(img.data()) {
                assert!(
                    (a - b).abs() < 1e-12,
                    "family {} not neutral at zero gradient",
                    family.name()
                );
            }
        }
    }

    #[test]
    fn brightness_projection_formula() {
        let img = image3x3();
        let grad = Tensor::filled(&[3, 3, 1], 0.7);
        let spec =
            constrain_gradient(&grad, &img, &ConstraintFamily::Light, 0.1, &mut rng()).unwrap();
        match spec {
            TransformSpec::BrightnessContrast { gain, bias } => {
                assert_eq!(gain, 1.0);
                assert!((bias - 0.1 * 0.7).abs() < 1e-15);
            }
            other => panic!("unexpected spec {other:?}"),
        }
    }

    #[test]
    fn occlusion_rect_lands_on_gradient_mass() {
        // |grad| concentrated in the top-left 2x2 of a 4x4 image.
        let mut grad = Tensor::zeros(&[4, 4, 1]);
        for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let idx = grad.idx3(y, x, 0);
            grad.data_mut()[idx] = 1.0;
        }
        let img = Tensor::filled(&[4, 4, 1], 0.5);
        let family = ConstraintFamily::OcclRect {
            width: 2,
            height: 2,
        };
        let spec = constrain_gradient(&grad, &img, &family, 1.0, &mut rng()).unwrap();
        let (x, y) = match &spec {
            TransformSpec::OcclusionRect { x, y, .. } => (*x, *y),
            other => panic!("unexpected spec {other:?}"),
        };
        // Exhaustive oracle over all nine placements.
        let mut best = (0usize, 0usize, f64::NEG_INFINITY);
        for oy in 0..=2 {
            for ox in 0..=2 {
                let mut s = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += grad.at3(oy + dy, ox + dx, 0).abs();
                    }
                }
                if s > best.2 {
                    best = (ox, oy, s);
                }
            }
        }
        assert_eq!((x, y), (best.0, best.1));
        assert_eq!((x, y), (0, 0));
    }

    #[test]
    fn dots_pick_largest_gradient_pixels() {
        let mut grad = Tensor::zeros(&[3, 3, 1]);
        for (i, (y, x)) in [(2usize, 2usize), (0, 1), (1, 0)].iter().enumerate() {
            let idx = grad.idx3(*y, *x, 0);
            grad.data_mut()[idx] = 1.0 - i as f64 * 0.1;
        }
        let img = Tensor::filled(&[3, 3, 1], 0.5);
        let family = ConstraintFamily::OcclDots {
            count: 2,
            color: DotColor::White,
        };
        let spec = constrain_gradient(&grad, &img, &family, 1.0, &mut rng()).unwrap();
        match spec {
            TransformSpec::OcclusionDots { positions, .. } => {
                assert_eq!(positions, vec![(2, 2), (0, 1)]);
            }
            other => panic!("unexpected spec {other:?}"),
        }
    }

    #[test]
    fn affine_composition_matches_single_application() {
        // Smooth image decaying to ~0 at the borders, so zero fill and
        // true pixels agree there.
        let img = Tensor::from_fn(&[64, 64, 1], |i| {
            let y = (i / 64) as f64;
            let x = (i % 64) as f64;
            let r2 = (x - 31.5).powi(2) + (y - 31.5).powi(2);
            (-r2 / 140.0).exp()
        });
        let a = rotation_scale_about(31.5, 31.5, 0.05, 1.0, 0.4, -0.2);
        let b = rotation_scale_about(31.5, 31.5, -0.03, 0.98, -0.1, 0.3);
        let two_step = apply(
            &apply(&img, &TransformSpec::Affine { matrix: a }).unwrap(),
            &TransformSpec::Affine { matrix: b },
        )
        .unwrap();
        let composed = apply(
            &img,
            &TransformSpec::Affine {
                matrix: compose_affine(&a, &b),
            },
        )
        .unwrap();
        let tol = 2.0 / 255.0;
        for (p, q) in two_step.data().iter().zip(composed.data()) {
            assert!((p - q).abs() < tol, "resampling error {} >= {tol}", (p - q).abs());
        }
    }

    #[test]
    fn out_of_bounds_rect_is_usage_error() {
        let img = image3x3();
        let spec = TransformSpec::OcclusionRect {
            x: 2,
            y: 2,
            width: 2,
            height: 2,
            patch: Tensor::zeros(&[2, 2, 1]),
        };
        assert!(apply(&img, &spec).is_err());
    }

    #[test]
    fn negative_sigma_is_rejected() {
        assert!(gaussian_kernel(0.0).is_err());
        assert!(gaussian_kernel(-1.0).is_err());
    }
}
