//! Bounding-box geometry and the Acc@0.5 localization metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for normalized boxes grazing the frame edge.
pub const NORM_EPS: f64 = 1e-6;

/// Default IoU threshold of the accuracy metric.
pub const ACC_THRESHOLD: f64 = 0.5;

/// Pixel box in corner-size form: left edge, top edge, width, height.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct PixelBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl PixelBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite box [{x}, {y}, {w}, {h}]")));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "width and height must be positive, got {w}x{h}"
            )));
        }
        if x < 0.0 || y < 0.0 {
            return Err(Error::InvalidBox(format!("negative origin ({x}, {y})")));
        }
        Ok(Self { x, y, w, h })
    }

    /// Box spanning the corners `(x1, y1)`–`(x2, y2)`.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn right(&self) -> f64 {
        self.x + self.w
    }
    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    /// Whether the box lies inside an image of the given size.
    pub fn fits(&self, dims: ImageDims) -> bool {
        self.right() <= f64::from(dims.width) + NORM_EPS
            && self.bottom() <= f64::from(dims.height) + NORM_EPS
    }

    /// Mirror about the vertical center line of an image `width` wide.
    pub fn flip_horizontal(&self, width: u32) -> Self {
        let x = (f64::from(width) - self.right()).max(0.0);
        Self { x, ..*self }
    }
}

impl TryFrom<[f64; 4]> for PixelBox {
    type Error = Error;
    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<PixelBox> for [f64; 4] {
    fn from(b: PixelBox) -> Self {
        b.to_array()
    }
}

/// Normalized center-size box, every component a fraction of the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl NormBox {
    /// Validates component ranges only. Model predictions satisfy this by
    /// construction but may overhang the frame; see [`NormBox::framed`].
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let ok = [cx, cy, w, h]
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v));
        if !ok {
            return Err(Error::InvalidBox(format!(
                "normalized components must lie in [0, 1], got ({cx}, {cy}, {w}, {h})"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox("normalized box has zero extent".into()));
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Like [`NormBox::new`], additionally requiring the box to stay inside
    /// the frame within [`NORM_EPS`].
    pub fn framed(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self::new(cx, cy, w, h)?;
        if !b.is_within_frame() {
            return Err(Error::InvalidBox(format!(
                "normalized box ({cx}, {cy}, {w}, {h}) extends past the frame"
            )));
        }
        Ok(b)
    }

    pub fn is_within_frame(&self) -> bool {
        self.cx - self.w / 2.0 >= -NORM_EPS
            && self.cx + self.w / 2.0 <= 1.0 + NORM_EPS
            && self.cy - self.h / 2.0 >= -NORM_EPS
            && self.cy + self.h / 2.0 <= 1.0 + NORM_EPS
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Corner form `(x1, y1, x2, y2)` in normalized units.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidDims(format!("{width}x{height}")));
        }
        Ok(Self { width, height })
    }

    pub fn area(&self) -> f64 {
        f64::from(self.width) * f64::from(self.height)
    }
}

fn check_dims(dims: ImageDims) -> Result<()> {
    if dims.width == 0 || dims.height == 0 {
        return Err(Error::InvalidDims(format!("{}x{}", dims.width, dims.height)));
    }
    Ok(())
}

/// Intersection over union. Symmetric, in `[0, 1]`, zero for disjoint
/// boxes. Degenerate boxes are unrepresentable.
pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    // Areas from the same corner arithmetic as the overlap, so that
    // iou(a, a) is exactly 1.
    let area = |p: &PixelBox| (p.right() - p.x) * (p.bottom() - p.y);
    let union = area(a) + area(b) - inter;
    (inter / union).min(1.0)
}

/// Generalized IoU: `IoU − (C − U) / C` with `C` the smallest enclosing
/// box. In `(−1, 1]`.
pub fn giou(a: &PixelBox, b: &PixelBox) -> f64 {
    giou_corners(
        [a.x, a.y, a.right(), a.bottom()],
        [b.x, b.y, b.right(), b.bottom()],
    )
}

/// GIoU on normalized boxes (computed in corner form).
pub fn giou_norm(a: &NormBox, b: &NormBox) -> f64 {
    giou_corners(a.corners(), b.corners())
}

fn giou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |c: [f64; 4]| (c[2] - c[0]) * (c[3] - c[1]);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    let enclose = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    inter / union - (enclose - union) / enclose
}

/// Fraction of pairs whose IoU strictly exceeds `threshold`. A pair with
/// IoU exactly at the threshold counts as a miss.
pub fn acc_at_threshold(preds: &[PixelBox], gts: &[PixelBox], threshold: f64) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: gts.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput("no prediction/ground-truth pairs".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| is_hit(iou(p, g), threshold))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

#[inline]
pub fn is_hit(iou: f64, threshold: f64) -> bool {
    iou > threshold
}

pub fn to_norm(b: &PixelBox, dims: ImageDims) -> Result<NormBox> {
    check_dims(dims)?;
    let (w, h) = (f64::from(dims.width), f64::from(dims.height));
    NormBox::new((b.x + b.w / 2.0) / w, (b.y + b.h / 2.0) / h, b.w / w, b.h / h)
}

pub fn to_pixel(n: &NormBox, dims: ImageDims) -> Result<PixelBox> {
    check_dims(dims)?;
    let (w, h) = (f64::from(dims.width), f64::from(dims.height));
    let bw = n.w * w;
    let bh = n.h * h;
    PixelBox::new(
        (n.cx * w - bw / 2.0).max(0.0),
        (n.cy * h - bh / 2.0).max(0.0),
        bw,
        bh,
    )
}

/// Pixel box for a model prediction, with any overhang past the frame cut
/// off. The result is never empty because the center lies inside the
/// frame and the extent is positive.
pub fn prediction_to_pixel(n: &NormBox, dims: ImageDims) -> Result<PixelBox> {
    check_dims(dims)?;
    let (w, h) = (f64::from(dims.width), f64::from(dims.height));
    let [x1, y1, x2, y2] = n.corners();
    PixelBox::from_corners(
        x1.max(0.0) * w,
        y1.max(0.0) * h,
        x2.min(1.0) * w,
        y2.min(1.0) * h,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pb(x: f64, y: f64, w: f64, h: f64) -> PixelBox {
        PixelBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&pb(0., 0., 10., 10.), &pb(0., 0., 10., 10.)), 1.0);
        assert_eq!(iou(&pb(0., 0., 1., 1.), &pb(5., 5., 1., 1.)), 0.0);
        assert_abs_diff_eq!(
            iou(&pb(0., 0., 2., 2.), &pb(1., 1., 2., 2.)),
            1.0 / 7.0,
            epsilon = 1e-15
        );
        // touching edges share no area
        assert_eq!(iou(&pb(0., 0., 1., 1.), &pb(1., 0., 1., 1.)), 0.0);
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(PixelBox::new(0., 0., 0., 1.).is_err());
        assert!(PixelBox::new(0., 0., 1., -1.).is_err());
        assert!(PixelBox::new(f64::NAN, 0., 1., 1.).is_err());
        assert!(serde_json::from_str::<PixelBox>("[0, 0, 0, 5]").is_err());
    }

    #[test]
    fn giou_example() {
        assert_abs_diff_eq!(
            giou(&pb(0., 0., 2., 2.), &pb(1., 1., 2., 2.)),
            -5.0 / 63.0,
            epsilon = 1e-15
        );
        assert_eq!(giou(&pb(3., 3., 2., 2.), &pb(3., 3., 2., 2.)), 1.0);
        assert!(giou(&pb(0., 0., 1., 1.), &pb(5., 5., 1., 1.)) < 0.0);
    }

    #[test]
    fn accuracy_examples() {
        let a = pb(0., 0., 10., 10.);
        assert_eq!(acc_at_threshold(&[a, a], &[a, a], 0.5).unwrap(), 1.0);
        let p = pb(0., 0., 2., 2.);
        let g = pb(1., 1., 2., 2.);
        assert_eq!(acc_at_threshold(&[p], &[g], 0.5).unwrap(), 0.0);
        // IoUs 1.0, 0.6, 0.4 against a 10x10 ground truth: a 10x6 box
        // nested inside has IoU 0.6, a 10x4 box has 0.4.
        let gts = [a, a, a];
        let preds = [a, pb(0., 0., 10., 6.), pb(0., 0., 10., 4.)];
        assert_abs_diff_eq!(iou(&preds[1], &a), 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(
            acc_at_threshold(&preds, &gts, 0.5).unwrap(),
            2.0 / 3.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn threshold_tie_is_a_miss() {
        let g = pb(0., 0., 10., 10.);
        let p = pb(0., 0., 10., 5.);
        assert_eq!(iou(&p, &g), 0.5);
        assert_eq!(acc_at_threshold(&[p], &[g], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_errors() {
        let a = pb(0., 0., 1., 1.);
        assert!(matches!(
            acc_at_threshold(&[a], &[a, a], 0.5),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            acc_at_threshold(&[], &[], 0.5),
            Err(Error::EmptyInput(_))
        ));
        assert!(acc_at_threshold(&[a], &[a], 1.0).is_err());
    }

    #[test]
    fn norm_conversion_examples() {
        let dims = ImageDims::new(640, 512).unwrap();
        let full = to_norm(&pb(0., 0., 640., 512.), dims).unwrap();
        assert_eq!(full.to_array(), [0.5, 0.5, 1.0, 1.0]);
        let quarter = to_norm(&pb(160., 128., 320., 256.), dims).unwrap();
        assert_eq!(quarter.to_array(), [0.5, 0.5, 0.5, 0.5]);
        assert!(to_norm(&pb(0., 0., 1., 1.), ImageDims { width: 0, height: 5 }).is_err());
        assert!(ImageDims::new(0, 4).is_err());
    }

    #[test]
    fn overhanging_prediction_is_clipped() {
        let dims = ImageDims::new(100, 100).unwrap();
        let n = NormBox::new(0.1, 0.5, 0.6, 0.2).unwrap();
        assert!(!n.is_within_frame());
        let p = prediction_to_pixel(&n, dims).unwrap();
        assert_abs_diff_eq!(p.x(), 0.0);
        assert_abs_diff_eq!(p.w(), 40.0, epsilon = 1e-12);
    }

    fn arb_box() -> impl Strategy<Value = PixelBox> {
        (0.0f64..500.0, 0.0f64..400.0, 0.5f64..140.0, 0.5f64..112.0)
            .prop_map(|(x, y, w, h)| pb(x, y, w, h))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
            let g = giou(&a, &b);
            prop_assert!(g <= ab + 1e-12 && g > -1.0);
        }

        #[test]
        fn norm_roundtrip(a in arb_box()) {
            let dims = ImageDims::new(640, 512).unwrap();
            let back = to_pixel(&to_norm(&a, dims).unwrap(), dims).unwrap();
            for (u, v) in a.to_array().iter().zip(back.to_array()) {
                prop_assert!((u - v).abs() <= 1e-9 * u.abs().max(1.0), "{:?} vs {:?}", a, back);
            }
        }

        #[test]
        fn accuracy_monotone_in_threshold(
            pairs in proptest::collection::vec((arb_box(), arb_box()), 1..20),
            t1 in 0.01f64..0.99, t2 in 0.01f64..0.99,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let preds: Vec<_> = pairs.iter().map(|p| p.0).collect();
            let gts: Vec<_> = pairs.iter().map(|p| p.1).collect();
            prop_assert!(
                acc_at_threshold(&preds, &gts, lo).unwrap()
                    >= acc_at_threshold(&preds, &gts, hi).unwrap()
            );
        }
    }
}
