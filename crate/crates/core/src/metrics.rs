//! Layout alignment and cross-layout consistency metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Offset};
use crate::mask::{plane_bounding_box, Mask};

/// Feature value that tonemaps to white.
pub const CANVAS_WHITE: f64 = 2.0;

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_WINDOW: usize = 11;

fn binary_plane(m: &Mask) -> Result<&Grid> {
    if !m.is_binary() {
        return Err(Error::param("metric needs a binary mask"));
    }
    Ok(m.values())
}

fn same_canvas(a: &Grid, b: &Grid) -> Result<()> {
    b.check_shape(a.shape())
}

fn plane_iou(a: &Grid, b: &Grid) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x > 0.5, y > 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `|a ∩ b| / |a ∪ b|`, and 1 when both are empty.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    let (pa, pb) = (binary_plane(a)?, binary_plane(b)?);
    same_canvas(pa, pb)?;
    Ok(plane_iou(pa, pb))
}

/// Best IoU after aligning the two masks by translation.
///
/// With a known layout delta (`b` sits at `a`'s position plus `delta`), both
/// alignments `move(a, delta)` vs `b` and `a` vs `move(b, −delta)` are scored
/// and the larger wins, which forgives clipping at either border. Without a
/// delta every canvas translation is tried in both directions.
pub fn consistency(a: &Mask, b: &Mask, delta: Option<Offset>) -> Result<f64> {
    let (pa, pb) = (binary_plane(a)?, binary_plane(b)?);
    same_canvas(pa, pb)?;
    let empty = |p: &Grid| p.data().iter().all(|&v| v == 0.0);
    if empty(pa) != empty(pb) {
        return Ok(0.0);
    }
    let score = |d: Offset| plane_iou(&pa.shifted(d), pb).max(plane_iou(pa, &pb.shifted(-d)));
    Ok(match delta {
        Some(d) => score(d),
        None => {
            let (w, h) = (pa.width() as i32, pa.height() as i32);
            let mut best = 0.0f64;
            for dy in -(h - 1)..h {
                for dx in -(w - 1)..w {
                    best = best.max(score(Offset::new(dx, dy)));
                }
            }
            best
        }
    })
}

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|x| (-0.5 * (x * x) as f64 / (SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian filter over the valid region only.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5),
/// averaged over all fully inside windows and all channels.
pub fn ssim(a: &Grid, b: &Grid, data_range: f64) -> Result<f64> {
    same_canvas(a, b)?;
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::param(format!("data range must be positive, got {data_range}")));
    }
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::param(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {w}×{h}"
        )));
    }
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels() {
        let (x, y) = (a.channel(c), b.channel(c));
        let (x, y) = (x.data(), y.data());
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let ux = filter_valid(x, w, h, &k);
        let uy = filter_valid(y, w, h, &k);
        let uxx = filter_valid(&xx, w, h, &k);
        let uyy = filter_valid(&yy, w, h, &k);
        let uxy = filter_valid(&xy, w, h, &k);
        for i in 0..ux.len() {
            let vx = uxx[i] - ux[i] * ux[i];
            let vy = uyy[i] - uy[i] * uy[i];
            let vxy = uxy[i] - ux[i] * uy[i];
            let num = (2.0 * ux[i] * uy[i] + c1) * (2.0 * vxy + c2);
            let den = (ux[i] * ux[i] + uy[i] * uy[i] + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Moves the masked foreground so its bounding box starts at the origin of
/// a white canvas. Returns the pasted image and its support.
fn paste_canonical(img: &Grid, mask: &Mask) -> Result<(Grid, Grid)> {
    let plane = binary_plane(mask)?;
    if plane.width() != img.width() || plane.height() != img.height() {
        return Err(Error::param("mask does not match image canvas"));
    }
    let (x0, y0, _, _) =
        plane_bounding_box(plane).ok_or_else(|| Error::param("visual consistency needs a nonempty foreground"))?;
    let to_origin = Offset::new(-(x0 as i32), -(y0 as i32));
    let support = plane.shifted(to_origin);
    let fg = img.mul_plane(plane)?.shifted(to_origin);
    let white = Grid::filled(img.shape(), CANVAS_WHITE);
    let mut out = white.mul_plane(&support.map(|v| 1.0 - v))?;
    out.add_scaled(1.0, &fg)?;
    Ok((out, support))
}

/// Mean squared difference of the two foregrounds after pasting both at the
/// canvas origin, taken over the union of their supports.
pub fn visual_consistency(img_a: &Grid, mask_a: &Mask, img_b: &Grid, mask_b: &Mask) -> Result<f64> {
    same_canvas(img_a, img_b)?;
    let (pa, sa) = paste_canonical(img_a, mask_a)?;
    let (pb, sb) = paste_canonical(img_b, mask_b)?;
    let pixels = sa.data().len();
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in 0..pixels {
        if sa.data()[p] > 0.5 || sb.data()[p] > 0.5 {
            for c in 0..img_a.channels() {
                let i = c * pixels + p;
                let d = pa.data()[i] - pb.data()[i];
                sum += d * d;
            }
            n += img_a.channels();
        }
    }
    Ok(sum / n as f64)
}

/// Two renders of one scene, with the masks that locate a layer in each.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub name: String,
    pub image_a: Grid,
    pub mask_a: Mask,
    pub image_b: Grid,
    pub mask_b: Mask,
    /// Where `mask_b` sits relative to `mask_a`, if known.
    pub delta: Option<Offset>,
    /// Requested layout mask for `image_a`; `mask_b` is compared when absent.
    pub target: Option<Mask>,
    pub data_range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub name: String,
    pub mask_iou: f64,
    pub consistency: f64,
    pub visual_consistency: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Summary {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Summary { mean: 0.0, std: 0.0 };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Summary { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mask_iou: Summary,
    pub consistency: Summary,
    pub visual_consistency: Summary,
    pub ssim: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: Vec<PairRecord>,
    pub aggregates: Aggregates,
}

impl MetricsReport {
    pub fn from_records(records: Vec<PairRecord>) -> Self {
        let aggregates = Aggregates {
            mask_iou: Summary::of(records.iter().map(|r| r.mask_iou)),
            consistency: Summary::of(records.iter().map(|r| r.consistency)),
            visual_consistency: Summary::of(records.iter().map(|r| r.visual_consistency)),
            ssim: Summary::of(records.iter().map(|r| r.ssim)),
        };
        Self { records, aggregates }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn evaluate_pair(p: &EvalPair) -> Result<PairRecord> {
    Ok(PairRecord {
        name: p.name.clone(),
        mask_iou: mask_iou(&p.mask_a, p.target.as_ref().unwrap_or(&p.mask_b))?,
        consistency: consistency(&p.mask_a, &p.mask_b, p.delta)?,
        visual_consistency: visual_consistency(&p.image_a, &p.mask_a, &p.image_b, &p.mask_b)?,
        ssim: ssim(&p.image_a, &p.image_b, p.data_range)?,
    })
}

pub fn evaluate(pairs: &[EvalPair]) -> Result<MetricsReport> {
    Ok(MetricsReport::from_records(
        pairs.iter().map(evaluate_pair).collect::<Result<_>>()?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Shape;
    use proptest::prelude::*;

    fn boxed(x: i32, y: i32, w: u32, h: u32) -> Mask {
        Mask::boxed(x, y, w, h, 12, 12)
    }

    #[test]
    fn iou_examples() {
        let a = boxed(1, 1, 2, 2);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &boxed(6, 6, 2, 2)).unwrap(), 0.0);
        assert_eq!(mask_iou(&a, &boxed(2, 1, 2, 2)).unwrap(), 2.0 / 6.0);
        let empty = boxed(0, 0, 0, 0);
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 1.0);
        let soft = Mask::from_plane(Grid::filled(Shape::new(1, 12, 12), 0.5)).unwrap();
        assert!(mask_iou(&a, &soft).is_err());
        assert!(mask_iou(&a, &Mask::boxed(0, 0, 1, 1, 5, 5)).is_err());
    }

    #[test]
    fn consistency_examples() {
        let a = boxed(2, 3, 3, 2);
        let d = Offset::new(4, 2);
        let b = Mask::from_plane(a.shifted(d)).unwrap();
        assert_eq!(consistency(&a, &b, Some(d)).unwrap(), 1.0);
        assert_eq!(consistency(&a, &b, None).unwrap(), 1.0);
        assert_eq!(consistency(&boxed(0, 0, 0, 0), &a, None).unwrap(), 0.0);
        // clipped at the right border: reverse alignment recovers the clipped part
        let c = Mask::from_plane(a.shifted(Offset::new(8, 0))).unwrap();
        assert_eq!(consistency(&a, &c, Some(Offset::new(8, 0))).unwrap(), 1.0);
    }

    #[test]
    fn visual_consistency_examples() {
        let shape = Shape::new(2, 12, 12);
        let img = Grid::from_fn(shape, |c, x, y| (c as f64 - 0.5) * 0.1 * (x + 2 * y) as f64);
        let ma = boxed(1, 1, 4, 3);
        let d = Offset::new(5, 6);
        let mb = Mask::from_plane(ma.shifted(d)).unwrap();
        let moved = img.shifted(d);
        assert_eq!(visual_consistency(&img, &ma, &moved, &mb).unwrap(), 0.0);
        let other_bg = Grid::from_fn(shape, |c, x, y| {
            if mb.values().get(0, x, y) > 0.0 {
                moved.get(c, x, y)
            } else {
                -3.0
            }
        });
        assert_eq!(visual_consistency(&img, &ma, &other_bg, &mb).unwrap(), 0.0);
        let delta = 0.25;
        let bumped = img.zip_map(&Grid::filled(shape, delta), |a, b| a + b).unwrap();
        let v = visual_consistency(&img, &ma, &bumped, &ma).unwrap();
        assert!((v - delta * delta).abs() < 1e-12);
        assert!(visual_consistency(&img, &boxed(0, 0, 0, 0), &img, &ma).is_err());
    }

    #[test]
    fn ssim_examples() {
        let shape = Shape::new(3, 16, 16);
        let a = Grid::from_fn(shape, |c, x, y| ((x * 7 + y * 3 + c) % 5) as f64 * 0.3 - 0.6);
        assert_eq!(ssim(&a, &a, 4.0).unwrap(), 1.0);
        let neg = a.map(|v| -v);
        assert!(ssim(&a, &neg, 4.0).unwrap() < 0.0);
        assert!(ssim(&Grid::zeros(Shape::new(1, 8, 8)), &Grid::zeros(Shape::new(1, 8, 8)), 1.0).is_err());
    }

    #[test]
    fn report_aggregates_recompute() {
        let recs = vec![
            PairRecord {
                name: "a".into(),
                mask_iou: 1.0,
                consistency: 0.5,
                visual_consistency: 0.0,
                ssim: 0.2,
            },
            PairRecord {
                name: "b".into(),
                mask_iou: 0.0,
                consistency: 1.0,
                visual_consistency: 2.0,
                ssim: 0.4,
            },
        ];
        let r = MetricsReport::from_records(recs.clone());
        assert_eq!(r.aggregates.mask_iou, Summary { mean: 0.5, std: 0.5 });
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, MetricsReport::from_records(back.records.clone()));
        assert_eq!(back.records, recs);
    }

    fn plane(bits: &[bool]) -> Mask {
        Mask::from_plane(Grid::from_vec(Shape::new(1, 6, 6), bits.iter().map(|&b| b as u8 as f64).collect()).unwrap())
            .unwrap()
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_one_iff_equal(a in prop::collection::vec(any::<bool>(), 36),
                                           b in prop::collection::vec(any::<bool>(), 36)) {
            let (ma, mb) = (plane(&a), plane(&b));
            let ab = mask_iou(&ma, &mb).unwrap();
            prop_assert_eq!(ab, mask_iou(&mb, &ma).unwrap());
            prop_assert_eq!(ab == 1.0, a == b);
        }

        #[test]
        fn translation_is_fully_consistent(x in 0i32..4, y in 0i32..4, w in 1u32..3, h in 1u32..3,
                                           dx in -1i32..2, dy in -1i32..2) {
            let a = Mask::boxed(x + 1, y + 1, w, h, 8, 8);
            let d = Offset::new(dx, dy);
            let b = Mask::from_plane(a.shifted(d)).unwrap();
            prop_assert_eq!(consistency(&a, &b, Some(d)).unwrap(), 1.0);
        }

        #[test]
        fn ssim_symmetric(seed in any::<u64>()) {
            let a = crate::rng::noise(seed, crate::rng::Purpose::LayerInit, 0, Shape::new(1, 12, 13));
            let b = crate::rng::noise(seed, crate::rng::Purpose::LayerInit, 1, Shape::new(1, 12, 13));
            prop_assert_eq!(ssim(&a, &b, 4.0).unwrap(), ssim(&b, &a, 4.0).unwrap());
        }
    }
}
