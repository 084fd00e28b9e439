//! Bounding boxes in normalized center/half-extent form, plus the
//! preprocessing transforms applied when building the dataset.
//!
//! Coordinates follow the image convention: x grows right, y grows downward,
//! both normalized by image width/height into `[0, 1]`. "Above" therefore
//! means smaller `cy`.

use crate::error::{Error, Result};

/// Axis-aligned box as center plus half-extents, in image-normalized
/// coordinates. Ground-truth boxes stay inside `[0, 1]`; predicted boxes may
/// leave it and are evaluated as-is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub hw: f64,
    pub hh: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, hw: f64, hh: f64) -> Self {
        BBox { cx, cy, hw, hh }
    }

    /// The `[cx, cy, hw, hh]` regression vector.
    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.hw, self.hh]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

/// Raw annotation box in pixels, corner form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl PixelBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        PixelBox { xmin, ymin, xmax, ymax }
    }

    pub fn is_well_ordered(&self) -> bool {
        self.xmin <= self.xmax && self.ymin <= self.ymax
    }
}

/// Convert a pixel box to image-relative center/half-extent coordinates.
pub fn normalize_box(p: PixelBox, image_w: f64, image_h: f64) -> Result<BBox> {
    if !(image_w > 0.0 && image_h > 0.0) {
        return Err(Error::BadImageDims { w: image_w, h: image_h });
    }
    Ok(BBox {
        cx: (p.xmin + p.xmax) / (2.0 * image_w),
        cy: (p.ymin + p.ymax) / (2.0 * image_h),
        hw: (p.xmax - p.xmin) / (2.0 * image_w),
        hh: (p.ymax - p.ymin) / (2.0 * image_h),
    })
}

/// Inverse of [`normalize_box`].
pub fn denormalize_box(b: BBox, image_w: f64, image_h: f64) -> PixelBox {
    PixelBox {
        xmin: (b.cx - b.hw) * image_w,
        ymin: (b.cy - b.hh) * image_h,
        xmax: (b.cx + b.hw) * image_w,
        ymax: (b.cy + b.hh) * image_h,
    }
}

/// Mirror both boxes on the vertical axis (`cx -> 1 - cx`) when the object
/// lies strictly left of the subject, canonicalizing horizontal orientation.
/// Equal centers are left untouched.
pub fn mirror_pair(subject: BBox, object: BBox) -> (BBox, BBox, bool) {
    if object.cx < subject.cx {
        (reflect_x(subject), reflect_x(object), true)
    } else {
        (subject, object, false)
    }
}

/// Reflection `cx -> 1 - cx`; cy and half-extents unchanged.
pub fn reflect_x(b: BBox) -> BBox {
    BBox { cx: 1.0 - b.cx, ..b }
}

/// Intersection over union of two axis-aligned boxes. Negative half-extents
/// (possible in raw predictions) are clamped to zero here and only here; 0
/// when the union has zero area.
pub fn iou(a: BBox, b: BBox) -> f64 {
    let (ahw, ahh) = (a.hw.max(0.0), a.hh.max(0.0));
    let (bhw, bhh) = (b.hw.max(0.0), b.hh.max(0.0));

    let ix = overlap(a.cx - ahw, a.cx + ahw, b.cx - bhw, b.cx + bhw);
    let iy = overlap(a.cy - ahh, a.cy + ahh, b.cy - bhh, b.cy + bhh);
    let inter = ix * iy;

    let area_a = 4.0 * ahw * ahh;
    let area_b = 4.0 * bhw * bhh;
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    // Rounding can push the ratio a hair past 1 for near-identical boxes.
    (inter / union).clamp(0.0, 1.0)
}

fn overlap(a_lo: f64, a_hi: f64, b_lo: f64, b_hi: f64) -> f64 {
    (a_hi.min(b_hi) - a_lo.max(b_lo)).max(0.0)
}

/// Serde adapter: `BBox` on the wire is the array `[cx, cy, hw, hh]`.
/// Use with `#[serde(with = "geometry::bbox_array")]`.
pub mod bbox_array {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::BBox;

    pub fn serialize<S: Serializer>(b: &BBox, s: S) -> Result<S::Ok, S::Error> {
        [b.cx, b.cy, b.hw, b.hh].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BBox, D::Error> {
        let [cx, cy, hw, hh] = <[f64; 4]>::deserialize(d)?;
        Ok(BBox { cx, cy, hw, hh })
    }
}

/// Serde adapter: `PixelBox` on the wire is the array `[xmin, ymin, xmax, ymax]`.
pub mod pixelbox_array {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::PixelBox;

    pub fn serialize<S: Serializer>(b: &PixelBox, s: S) -> Result<S::Ok, S::Error> {
        [b.xmin, b.ymin, b.xmax, b.ymax].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<PixelBox, D::Error> {
        let [xmin, ymin, xmax, ymax] = <[f64; 4]>::deserialize(d)?;
        Ok(PixelBox {
            xmin,
            ymin,
            xmax,
            ymax,
        })
    }
}
