//! Bounding-box arithmetic, Gaussian candidate sampling, and the ridge
//! regressor that refines raw tracker output boxes.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Axis-aligned pixel rectangle anchored at its top-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0 && x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite())
        {
            return Err(Error::InvalidBox { w, h });
        }
        Ok(Self { x, y, w, h })
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corners as (x1, y1, x2, y2).
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (self.x, self.y, self.x + self.w, self.y + self.h)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    /// Clip the box so it lies fully inside a `w`x`h` image. The box keeps
    /// its size where possible; boxes larger than the image are shrunk.
    pub fn clip_to(&self, img_w: f64, img_h: f64) -> BoundingBox {
        let w = self.w.min(img_w).max(1.0);
        let h = self.h.min(img_h).max(1.0);
        let x = self.x.clamp(0.0, (img_w - w).max(0.0));
        let y = self.y.clamp(0.0, (img_h - h).max(0.0));
        BoundingBox { x, y, w, h }
    }
}

/// Intersection over union of two boxes. Symmetric, in [0, 1].
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    // Rounding can push the ratio a few ulps past 1 when the boxes coincide;
    // clamp so downstream strict-threshold comparisons stay meaningful.
    (inter / union).clamp(0.0, 1.0)
}

/// Euclidean distance between the two box centers, in pixels.
pub fn center_distance(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (acx, acy) = a.center();
    let (bcx, bcy) = b.center();
    ((acx - bcx).powi(2) + (acy - bcy).powi(2)).sqrt()
}

/// Parameters for Gaussian candidate sampling around a box.
///
/// Translations are drawn from a zero-mean normal with standard deviation
/// `sigma_xy * (w + h) / 2`; width and height are jointly scaled by a
/// log-normal factor `exp(N(0, sigma_scale))`. Sampling is a pure function
/// of the spec, including its seed.
#[derive(Debug, Clone, Copy)]
pub struct SampleSpec {
    pub n: usize,
    pub sigma_xy: f64,
    pub sigma_scale: f64,
    pub seed: u64,
}

impl SampleSpec {
    pub fn new(n: usize, sigma_xy: f64, sigma_scale: f64, seed: u64) -> Self {
        assert!(sigma_xy >= 0.0 && sigma_scale >= 0.0, "sigmas must be >= 0");
        Self {
            n,
            sigma_xy,
            sigma_scale,
            seed,
        }
    }
}

/// Draw `spec.n` candidate boxes around `center`, clipped to the image.
pub fn gaussian_sample(
    center: &BoundingBox,
    spec: &SampleSpec,
    image_bounds: (usize, usize),
) -> Vec<BoundingBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    sample_with_rng(center, spec, image_bounds, &mut rng)
}

fn sample_with_rng(
    center: &BoundingBox,
    spec: &SampleSpec,
    image_bounds: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Vec<BoundingBox> {
    let (img_w, img_h) = (image_bounds.0 as f64, image_bounds.1 as f64);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let size = (center.w + center.h) / 2.0;
    let (cx, cy) = center.center();
    (0..spec.n)
        .map(|_| {
            let dx = unit.sample(rng) * spec.sigma_xy * size;
            let dy = unit.sample(rng) * spec.sigma_xy * size;
            let scale = (unit.sample(rng) * spec.sigma_scale).exp();
            let w = center.w * scale;
            let h = center.h * scale;
            BoundingBox {
                x: cx + dx - w / 2.0,
                y: cy + dy - h / 2.0,
                w,
                h,
            }
            .clip_to(img_w, img_h)
        })
        .collect()
}

/// Rejection budget multiplier for [`sample_by_iou`].
const MAX_ATTEMPTS_PER_SAMPLE: usize = 100;

/// Draw `n` boxes around `gt` whose IoU with `gt` falls in `[iou_lo, iou_hi]`.
///
/// Rejection sampling with a budget of `100 * n` attempts; returns an error
/// if the band cannot be filled within the budget.
pub fn sample_by_iou(
    gt: &BoundingBox,
    n: usize,
    iou_lo: f64,
    iou_hi: f64,
    spec: &SampleSpec,
    image_bounds: (usize, usize),
) -> Result<Vec<BoundingBox>> {
    if !(0.0..=1.0).contains(&iou_lo) || !(0.0..=1.0).contains(&iou_hi) || iou_lo > iou_hi {
        return Err(Error::InvalidIouBand {
            lo: iou_lo,
            hi: iou_hi,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(n);
    let max_attempts = MAX_ATTEMPTS_PER_SAMPLE * n;
    let mut attempts = 0;
    let one = SampleSpec { n: 1, ..*spec };
    while out.len() < n && attempts < max_attempts {
        attempts += 1;
        let cand = sample_with_rng(gt, &one, image_bounds, &mut rng)[0];
        let v = iou(&cand, gt);
        if v >= iou_lo && v <= iou_hi {
            out.push(cand);
        }
    }
    if out.len() < n {
        return Err(Error::SampleBudgetExhausted {
            requested: n,
            found: out.len(),
            iou_lo,
            iou_hi,
            attempts,
        });
    }
    Ok(out)
}

/// Linear ridge regressor mapping candidate features to box offsets.
///
/// Offsets use the standard encoding (dx/w, dy/h, log w-ratio, log h-ratio).
#[derive(Debug, Clone)]
pub struct RegressorParams {
    /// `[feature_dim x 4]` weight matrix.
    pub weights: Array2<f64>,
    pub ridge_lambda: f64,
}

/// Encode the offset from `from` to `to` as regression targets.
pub fn encode_offsets(from: &BoundingBox, to: &BoundingBox) -> [f64; 4] {
    let (fcx, fcy) = from.center();
    let (tcx, tcy) = to.center();
    [
        (tcx - fcx) / from.w,
        (tcy - fcy) / from.h,
        (to.w / from.w).ln(),
        (to.h / from.h).ln(),
    ]
}

/// Decode regression targets relative to `from`, clipping w/h positive.
pub fn decode_offsets(from: &BoundingBox, t: &[f64; 4]) -> BoundingBox {
    let (fcx, fcy) = from.center();
    let cx = fcx + t[0] * from.w;
    let cy = fcy + t[1] * from.h;
    let w = (from.w * t[2].exp()).max(1e-3);
    let h = (from.h * t[3].exp()).max(1e-3);
    BoundingBox {
        x: cx - w / 2.0,
        y: cy - h / 2.0,
        w,
        h,
    }
}

/// Fit the ridge regressor in closed form.
///
/// Solves `(X^T X + lambda I) W = X^T Y` by Cholesky factorization. With
/// `lambda = 0` a singular normal matrix is reported as an error.
pub fn regressor_fit(
    features: &Array2<f64>,
    boxes: &[BoundingBox],
    gts: &[BoundingBox],
    lambda: f64,
) -> Result<RegressorParams> {
    let m = features.nrows();
    let d = features.ncols();
    if m == 0 {
        return Err(Error::EmptyTrainingData);
    }
    if boxes.len() != m || gts.len() != m {
        return Err(Error::DimensionMismatch {
            context: "regressor_fit sample count",
            expected: m,
            got: boxes.len().min(gts.len()),
        });
    }
    assert!(lambda >= 0.0, "ridge lambda must be >= 0");

    let mut targets = Array2::<f64>::zeros((m, 4));
    for (i, (b, g)) in boxes.iter().zip(gts).enumerate() {
        let t = encode_offsets(b, g);
        for (j, v) in t.iter().enumerate() {
            targets[[i, j]] = *v;
        }
    }

    let mut normal = features.t().dot(features);
    for i in 0..d {
        normal[[i, i]] += lambda;
    }
    let rhs = features.t().dot(&targets);

    let chol = cholesky(&normal).ok_or(Error::SingularMatrix)?;
    let mut weights = Array2::<f64>::zeros((d, 4));
    for j in 0..4 {
        let col = cholesky_solve(&chol, &rhs.column(j).to_owned());
        weights.column_mut(j).assign(&col);
    }
    Ok(RegressorParams {
        weights,
        ridge_lambda: lambda,
    })
}

/// Apply the regressor to one candidate box.
pub fn regressor_apply(
    params: &RegressorParams,
    feature: &Array1<f64>,
    bbox: &BoundingBox,
) -> Result<BoundingBox> {
    if feature.len() != params.weights.nrows() {
        return Err(Error::DimensionMismatch {
            context: "regressor_apply feature",
            expected: params.weights.nrows(),
            got: feature.len(),
        });
    }
    let t = feature.dot(&params.weights);
    Ok(decode_offsets(bbox, &[t[0], t[1], t[2], t[3]]))
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
/// Returns `None` if a pivot is not strictly positive.
fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 1e-12 {
                    return None;
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Solve `L L^T x = b` given the Cholesky factor `L`.
fn cholesky_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[[i, k]] * y[k];
        }
        y[i] = sum / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[[k, i]] * x[k];
        }
        x[i] = sum / l[[i, i]];
    }
    x
}
