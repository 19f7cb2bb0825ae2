//! Axis-aligned boxes, IOU, top-k proposal filtering, cropping, patch
//! transforms, and compositing into backgrounds.
//!
//! All resampling is bilinear. Transform and composite operations carry
//! explicit backward passes so gradients with respect to patch pixels can
//! be chained through the attack pipeline; box coordinates are treated as
//! constants.

use ndarray::{Array2, Array3, s};
use serde::{Deserialize, Serialize};

use crate::detection::DetectionSet;
use crate::error::{Error, Result};
use crate::image::{Grid, ImageTensor};

/// Axis-aligned box in image space, `x_min < x_max`, `y_min < y_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self { x_min, y_min, x_max, y_max };
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite coordinates {b:?}")));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::InvalidBox(format!("degenerate extent {b:?}")));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// Intersection area with another box, 0 when disjoint.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }
}

/// Intersection over union of two boxes, in `[0,1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 { 0.0 } else { inter / union }
}

/// Where and how a patch lands in a background. `target_box` is the region
/// the scaled (unrotated) patch occupies; rotation grows the pasted
/// envelope around the same center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub target_box: BBox,
    pub scale: f64,
    pub rotation_deg: f64,
}

impl Placement {
    pub fn new(target_box: BBox, scale: f64, rotation_deg: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidBox(format!("scale must be positive, got {scale}")));
        }
        Ok(Self { target_box, scale, rotation_deg })
    }
}

/// Original indices of the `min(k, n)` proposals with highest IOU against
/// `anchor`, ranked by descending IOU. Ties break toward the lower index.
pub fn top_k_indices(proposals: &DetectionSet, anchor: &BBox, k: usize) -> Result<Vec<usize>> {
    if proposals.proposals.is_empty() {
        return Err(Error::EmptyProposalSet);
    }
    let mut ranked: Vec<usize> = (0..proposals.proposals.len()).collect();
    // Stable sort keeps the original index order within equal IOUs.
    ranked.sort_by(|&a, &b| {
        let ia = iou(&proposals.proposals[a].bbox, anchor);
        let ib = iou(&proposals.proposals[b].bbox, anchor);
        ib.partial_cmp(&ia).unwrap()
    });
    ranked.truncate(k.min(proposals.proposals.len()));
    Ok(ranked)
}

/// Keeps the `min(k, n)` proposals with highest IOU against `anchor`.
/// Ties break toward the lower original index; scores pass through
/// unchanged and the relative order of kept proposals follows the ranking.
pub fn filter_top_k(proposals: &DetectionSet, anchor: &BBox, k: usize) -> Result<DetectionSet> {
    let ranked = top_k_indices(proposals, anchor, k)?;
    Ok(DetectionSet {
        proposals: ranked.iter().map(|&i| proposals.proposals[i].clone()).collect(),
        source: proposals.source,
    })
}

/// Integer pixel bounds of a crop, after outward rounding and clipping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRegion {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl CropRegion {
    /// Resolves a real-valued box against image bounds.
    pub fn resolve(img_h: usize, img_w: usize, bbox: &BBox) -> Result<Self> {
        let x0 = bbox.x_min.floor().max(0.0) as usize;
        let y0 = bbox.y_min.floor().max(0.0) as usize;
        let x1 = (bbox.x_max.ceil().min(img_w as f64)).max(0.0) as usize;
        let y1 = (bbox.y_max.ceil().min(img_h as f64)).max(0.0) as usize;
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::DegenerateCrop);
        }
        Ok(Self { y0, x0, y1, x1 })
    }
}

/// Sub-image covered by `bbox`, rounded outward and clipped. Box
/// coordinates carry no gradient; pixel values copy straight through.
pub fn crop(img: &ImageTensor, bbox: &BBox) -> Result<(ImageTensor, CropRegion)> {
    let region = CropRegion::resolve(img.height(), img.width(), bbox)?;
    let sub = img
        .data()
        .slice(s![region.y0..region.y1, region.x0..region.x1, ..])
        .to_owned();
    Ok((ImageTensor::new(sub)?, region))
}

/// Scatters a cropped-image gradient back into a full-image gradient.
pub fn crop_backward(region: &CropRegion, img_h: usize, img_w: usize, grad_crop: &Grid) -> Grid {
    let mut grad = Array3::zeros((img_h, img_w, 3));
    grad.slice_mut(s![region.y0..region.y1, region.x0..region.x1, ..])
        .assign(grad_crop);
    grad
}

/// Raster dims of a patch after scaling, floor of one pixel.
pub(crate) fn scaled_dims(h: usize, w: usize, scale: f64) -> (usize, usize) {
    let sh = ((h as f64 * scale).round() as usize).max(1);
    let sw = ((w as f64 * scale).round() as usize).max(1);
    (sh, sw)
}

/// Raster dims of the axis-aligned envelope after rotation.
pub(crate) fn rotated_dims(sh: usize, sw: usize, rotation_deg: f64) -> (usize, usize) {
    let th = rotation_deg.to_radians();
    let (c, sn) = (th.cos().abs(), th.sin().abs());
    let rw = (sw as f64 * c + sh as f64 * sn).ceil() as usize;
    let rh = (sh as f64 * c + sw as f64 * sn).ceil() as usize;
    (rh.max(1), rw.max(1))
}

/// Bilinear resize with half-pixel centers and edge clamping. Scale 1 is
/// an exact copy.
pub(crate) fn resize_bilinear(src: &Grid, out_h: usize, out_w: usize) -> Grid {
    let (src_h, src_w, ch) = src.dim();
    let mut out = Array3::zeros((out_h, out_w, ch));
    let fy = src_h as f64 / out_h as f64;
    let fx = src_w as f64 / out_w as f64;
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * fy - 0.5).clamp(0.0, (src_h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let wy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * fx - 0.5).clamp(0.0, (src_w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let wx = sx - x0 as f64;
            for c in 0..ch {
                out[[oy, ox, c]] = (1.0 - wy) * (1.0 - wx) * src[[y0, x0, c]]
                    + (1.0 - wy) * wx * src[[y0, x1, c]]
                    + wy * (1.0 - wx) * src[[y1, x0, c]]
                    + wy * wx * src[[y1, x1, c]];
            }
        }
    }
    out
}

pub(crate) fn resize_bilinear_backward(grad_out: &Grid, src_h: usize, src_w: usize) -> Grid {
    let (out_h, out_w, ch) = grad_out.dim();
    let mut grad = Array3::zeros((src_h, src_w, ch));
    let fy = src_h as f64 / out_h as f64;
    let fx = src_w as f64 / out_w as f64;
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * fy - 0.5).clamp(0.0, (src_h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let wy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * fx - 0.5).clamp(0.0, (src_w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let wx = sx - x0 as f64;
            for c in 0..ch {
                let g = grad_out[[oy, ox, c]];
                grad[[y0, x0, c]] += (1.0 - wy) * (1.0 - wx) * g;
                grad[[y0, x1, c]] += (1.0 - wy) * wx * g;
                grad[[y1, x0, c]] += wy * (1.0 - wx) * g;
                grad[[y1, x1, c]] += wy * wx * g;
            }
        }
    }
    grad
}

/// Inverse-map sampling offsets for a counter-clockwise rotation, shared
/// by the forward and backward passes.
struct RotGeom {
    cos: f64,
    sin: f64,
    src_h: usize,
    src_w: usize,
    out_h: usize,
    out_w: usize,
}

impl RotGeom {
    fn new(src_h: usize, src_w: usize, rotation_deg: f64) -> Self {
        let th = rotation_deg.to_radians();
        let (out_h, out_w) = rotated_dims(src_h, src_w, rotation_deg);
        Self { cos: th.cos(), sin: th.sin(), src_h, src_w, out_h, out_w }
    }

    /// Source pixel-index coordinates for an output pixel.
    fn source(&self, oy: usize, ox: usize) -> (f64, f64) {
        let px = ox as f64 + 0.5 - self.out_w as f64 / 2.0;
        let py = oy as f64 + 0.5 - self.out_h as f64 / 2.0;
        let sx_off = self.cos * px - self.sin * py;
        let sy_off = self.sin * px + self.cos * py;
        let sx = sx_off + self.src_w as f64 / 2.0 - 0.5;
        let sy = sy_off + self.src_h as f64 / 2.0 - 0.5;
        (sy, sx)
    }
}

/// Rotates about the patch center. Output pixels sampling outside the
/// source get zero weight, so coverage shows up in the alpha map with a
/// soft (bilinear) edge. Values are premultiplied by coverage.
fn rotate_bilinear(src: &Grid, rotation_deg: f64) -> (Grid, Array2<f64>) {
    let (src_h, src_w, ch) = src.dim();
    let geom = RotGeom::new(src_h, src_w, rotation_deg);
    let mut out = Array3::zeros((geom.out_h, geom.out_w, ch));
    let mut alpha = Array2::zeros((geom.out_h, geom.out_w));
    for oy in 0..geom.out_h {
        for ox in 0..geom.out_w {
            let (sy, sx) = geom.source(oy, ox);
            let y0 = sy.floor();
            let x0 = sx.floor();
            let wy = sy - y0;
            let wx = sx - x0;
            let mut cover = 0.0;
            for (dy, wyv) in [(0i64, 1.0 - wy), (1, wy)] {
                for (dx, wxv) in [(0i64, 1.0 - wx), (1, wx)] {
                    let y = y0 as i64 + dy;
                    let x = x0 as i64 + dx;
                    let w = wyv * wxv;
                    if w == 0.0 {
                        continue;
                    }
                    if y >= 0 && (y as usize) < src_h && x >= 0 && (x as usize) < src_w {
                        cover += w;
                        for c in 0..ch {
                            out[[oy, ox, c]] += w * src[[y as usize, x as usize, c]];
                        }
                    }
                }
            }
            alpha[[oy, ox]] = cover;
        }
    }
    (out, alpha)
}

fn rotate_bilinear_backward(grad_out: &Grid, src_h: usize, src_w: usize, rotation_deg: f64) -> Grid {
    let (_, _, ch) = grad_out.dim();
    let geom = RotGeom::new(src_h, src_w, rotation_deg);
    let mut grad = Array3::zeros((src_h, src_w, ch));
    for oy in 0..geom.out_h {
        for ox in 0..geom.out_w {
            let (sy, sx) = geom.source(oy, ox);
            let y0 = sy.floor();
            let x0 = sx.floor();
            let wy = sy - y0;
            let wx = sx - x0;
            for (dy, wyv) in [(0i64, 1.0 - wy), (1, wy)] {
                for (dx, wxv) in [(0i64, 1.0 - wx), (1, wx)] {
                    let y = y0 as i64 + dy;
                    let x = x0 as i64 + dx;
                    let w = wyv * wxv;
                    if w == 0.0 {
                        continue;
                    }
                    if y >= 0 && (y as usize) < src_h && x >= 0 && (x as usize) < src_w {
                        for c in 0..ch {
                            grad[[y as usize, x as usize, c]] += w * grad_out[[oy, ox, c]];
                        }
                    }
                }
            }
        }
    }
    grad
}

/// Resize-then-rotate transform of a patch. Returns the transformed patch
/// (values premultiplied by coverage) and the coverage alpha map: all ones
/// inside the rotated rectangle, soft at its edge, zero in the corners the
/// rotation introduced.
pub fn transform_patch(
    patch: &ImageTensor,
    scale: f64,
    rotation_deg: f64,
) -> Result<(ImageTensor, Array2<f64>)> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidBox(format!("scale must be positive, got {scale}")));
    }
    let (sh, sw) = scaled_dims(patch.height(), patch.width(), scale);
    let scaled = resize_bilinear(patch.data(), sh, sw);
    let (values, alpha) = rotate_bilinear(&scaled, rotation_deg);
    Ok((ImageTensor::from_clamped(values), alpha))
}

/// Backward pass of [`transform_patch`] with respect to the patch pixels.
pub fn transform_patch_backward(
    patch_h: usize,
    patch_w: usize,
    scale: f64,
    rotation_deg: f64,
    grad_values: &Grid,
) -> Grid {
    let (sh, sw) = scaled_dims(patch_h, patch_w, scale);
    let grad_scaled = rotate_bilinear_backward(grad_values, sh, sw, rotation_deg);
    resize_bilinear_backward(&grad_scaled, patch_h, patch_w)
}

/// Forward context of a composite, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EmbContext {
    pub paste_y: usize,
    pub paste_x: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub alpha: Array2<f64>,
    pub scale: f64,
    pub rotation_deg: f64,
    pub patch_h: usize,
    pub patch_w: usize,
}

/// A patch embedded into a background.
#[derive(Debug, Clone)]
pub struct Embedded {
    pub composite: ImageTensor,
    /// Axis-aligned envelope of the pasted region, the anchor the top-k
    /// filter and the success judge compare detections against.
    pub anchor: BBox,
    pub ctx: EmbContext,
}

/// Where a placement lands in a background, without compositing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PasteGeometry {
    pub paste_y: usize,
    pub paste_x: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// Envelope of the scaled rectangle's corners rotated about the
    /// raster paste center.
    pub anchor: BBox,
}

/// Resolves paste offsets and the anchor envelope for a placement.
/// Errors when the rotated envelope does not fit inside the background.
pub fn placement_geometry(
    bg_h: usize,
    bg_w: usize,
    patch_h: usize,
    patch_w: usize,
    place: &Placement,
) -> Result<PasteGeometry> {
    let (sh, sw) = scaled_dims(patch_h, patch_w, place.scale);
    let (out_h, out_w) = rotated_dims(sh, sw, place.rotation_deg);
    let (cx, cy) = place.target_box.center();
    let px = (cx - out_w as f64 / 2.0).round();
    let py = (cy - out_h as f64 / 2.0).round();
    if px < 0.0 || py < 0.0 || px + out_w as f64 > bg_w as f64 || py + out_h as f64 > bg_h as f64 {
        return Err(Error::PlacementOutOfBounds(format!(
            "pasted {out_w}x{out_h} region at ({px},{py}) exceeds {bg_w}x{bg_h} background"
        )));
    }
    let (px, py) = (px as usize, py as usize);

    let acx = px as f64 + out_w as f64 / 2.0;
    let acy = py as f64 + out_h as f64 / 2.0;
    let th = place.rotation_deg.to_radians();
    let (c, sn) = (th.cos(), th.sin());
    let (mut x_min, mut y_min) = (f64::INFINITY, f64::INFINITY);
    let (mut x_max, mut y_max) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (hx, hy) in [(-0.5, -0.5), (0.5, -0.5), (-0.5, 0.5), (0.5, 0.5)] {
        let dx = hx * sw as f64;
        let dy = hy * sh as f64;
        let rx = c * dx - sn * dy;
        let ry = sn * dx + c * dy;
        x_min = x_min.min(acx + rx);
        x_max = x_max.max(acx + rx);
        y_min = y_min.min(acy + ry);
        y_max = y_max.max(acy + ry);
    }
    let anchor = BBox::new(x_min, y_min, x_max, y_max)?;
    Ok(PasteGeometry { paste_y: py, paste_x: px, out_h, out_w, anchor })
}

/// Alpha-composites the transformed patch into a copy of `background`,
/// centered on `place.target_box`. Pixels outside the coverage mask stay
/// bit-identical to the background. The anchor is the analytic envelope of
/// the scaled rectangle rotated about the paste center.
pub fn emb(background: &ImageTensor, patch: &ImageTensor, place: &Placement) -> Result<Embedded> {
    let geom = placement_geometry(
        background.height(),
        background.width(),
        patch.height(),
        patch.width(),
        place,
    )?;
    let (values, alpha) = transform_patch(patch, place.scale, place.rotation_deg)?;
    debug_assert_eq!((values.height(), values.width()), (geom.out_h, geom.out_w));
    let (px, py) = (geom.paste_x, geom.paste_y);

    let mut composite = background.data().clone();
    for oy in 0..geom.out_h {
        for ox in 0..geom.out_w {
            let a = alpha[[oy, ox]];
            if a == 0.0 {
                continue;
            }
            for c in 0..3 {
                let bg = composite[[py + oy, px + ox, c]];
                composite[[py + oy, px + ox, c]] = (1.0 - a) * bg + values.data()[[oy, ox, c]];
            }
        }
    }

    Ok(Embedded {
        composite: ImageTensor::from_clamped(composite),
        anchor: geom.anchor,
        ctx: EmbContext {
            paste_y: py,
            paste_x: px,
            out_h: geom.out_h,
            out_w: geom.out_w,
            alpha,
            scale: place.scale,
            rotation_deg: place.rotation_deg,
            patch_h: patch.height(),
            patch_w: patch.width(),
        },
    })
}

/// Backward pass of [`emb`]: restricts the composite gradient to the
/// pasted region and pulls it through the patch transform. The background
/// is constant.
pub fn emb_backward(ctx: &EmbContext, grad_composite: &Grid) -> Grid {
    let region = grad_composite
        .slice(s![
            ctx.paste_y..ctx.paste_y + ctx.out_h,
            ctx.paste_x..ctx.paste_x + ctx.out_w,
            ..
        ])
        .to_owned();
    transform_patch_backward(ctx.patch_h, ctx.patch_w, ctx.scale, ctx.rotation_deg, &region)
}


#[cfg(test)]
mod proptests {
    use super::*;
    use crate::detection::{DetectionSource, Proposal};
    use proptest::prelude::*;

    fn arb_bbox() -> impl Strategy<Value = BBox> {
        (0.0f64..50.0, 0.0f64..50.0, 0.1f64..50.0, 0.1f64..50.0)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(a in arb_bbox(), b in arb_bbox()) {
            let ab = iou(&a, &b);
            let ba = iou(&b, &a);
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn top_k_keeps_best_and_size(boxes in prop::collection::vec(arb_bbox(), 1..12),
                                     anchor in arb_bbox(),
                                     k in 1usize..8) {
            let set = DetectionSet {
                proposals: boxes.iter()
                    .map(|b| Proposal::new(*b, vec![0.2, 0.4]).unwrap())
                    .collect(),
                source: DetectionSource::Raw,
            };
            let kept = filter_top_k(&set, &anchor, k).unwrap();
            prop_assert_eq!(kept.proposals.len(), k.min(boxes.len()));
            // Sub-multiset of the input.
            let mut pool: Vec<BBox> = boxes.clone();
            for p in &kept.proposals {
                let pos = pool.iter().position(|b| b == &p.bbox);
                prop_assert!(pos.is_some());
                pool.remove(pos.unwrap());
            }
            // Every kept IOU >= every dropped IOU.
            let min_kept = kept.proposals.iter()
                .map(|p| iou(&p.bbox, &anchor))
                .fold(f64::MAX, f64::min);
            let mut dropped = boxes.clone();
            for p in &kept.proposals {
                let pos = dropped.iter().position(|b| b == &p.bbox).unwrap();
                dropped.remove(pos);
            }
            for b in &dropped {
                prop_assert!(iou(b, &anchor) <= min_kept + 1e-12);
            }
        }

        #[test]
        fn emb_preserves_background_outside_mask(scale in 0.4f64..1.0, rot in -15.0f64..15.0) {
            let bg = ImageTensor::constant(48, 48, 0.6).unwrap();
            let patch = ImageTensor::constant(12, 12, 0.1).unwrap();
            let place = Placement::new(
                BBox::new(16.0, 16.0, 16.0 + 12.0 * scale, 16.0 + 12.0 * scale).unwrap(),
                scale,
                rot,
            ).unwrap();
            let out = emb(&bg, &patch, &place).unwrap();
            let ctx = &out.ctx;
            for y in 0..48 {
                for x in 0..48 {
                    let in_region = y >= ctx.paste_y && y < ctx.paste_y + ctx.out_h
                        && x >= ctx.paste_x && x < ctx.paste_x + ctx.out_w;
                    let masked = in_region
                        && ctx.alpha[[y - ctx.paste_y, x - ctx.paste_x]] > 0.0;
                    if !masked {
                        for c in 0..3 {
                            prop_assert_eq!(out.composite.data()[[y, x, c]], 0.6);
                        }
                    }
                }
            }
            // Composite stays a valid [0,1] image by construction.
            prop_assert!(out.composite.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn scale_round_trip_recovers_dimensions(s in 0.5f64..0.95) {
            let patch = ImageTensor::constant(40, 40, 0.5).unwrap();
            let (down, _) = transform_patch(&patch, s, 0.0).unwrap();
            let back = ((40.0 * s).round() as usize).max(1);
            prop_assert_eq!(down.height(), back);
            let (up, _) = transform_patch(&down, 40.0 / back as f64, 0.0).unwrap();
            prop_assert_eq!((up.height(), up.width()), (40, 40));
        }
    }
}
