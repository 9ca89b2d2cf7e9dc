//! Pixel-space primitives shared by every stage: axis-aligned boxes and
//! run-length encoded masks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("box has non-positive extent ({w} x {h})")]
    EmptyBox { w: f64, h: f64 },
    #[error("box origin ({x}, {y}) is negative")]
    NegativeOrigin { x: f64, y: f64 },
    #[error("box coordinate is not finite")]
    NonFinite,
    #[error("box ({x}, {y}, {w}, {h}) exceeds the {width}x{height} image")]
    OutOfImage {
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        width: u32,
        height: u32,
    },
    #[error("mask run {index} overlaps or precedes the previous run")]
    UnorderedRuns { index: usize },
    #[error("mask run {index} is empty")]
    EmptyRun { index: usize },
    #[error("mask run {index} extends past the {width}x{height} raster")]
    RunOutOfBounds { index: usize, width: u32, height: u32 },
    #[error("dense mask has {got} pixels, expected {expected}")]
    DenseLength { got: usize, expected: usize },
}

/// Half-open pixel rectangle `[x, x + w) x [y, y + h)`.
///
/// Serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeomError> {
        if ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(GeomError::NonFinite);
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(GeomError::EmptyBox { w, h });
        }
        if x < 0.0 || y < 0.0 {
            return Err(GeomError::NegativeOrigin { x, y });
        }
        Ok(Self { x, y, w, h })
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

    /// Top-left corner, the only spatial cue handed to the matcher.
    pub fn top_left(&self) -> (f64, f64) {
        (self.x, self.y)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    pub fn check_within(&self, width: u32, height: u32) -> Result<(), GeomError> {
        if self.right() > width as f64 || self.bottom() > height as f64 {
            return Err(GeomError::OutOfImage {
                x: self.x,
                y: self.y,
                w: self.w,
                h: self.h,
                width,
                height,
            });
        }
        Ok(())
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = GeomError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Binary raster stored as row-major foreground runs `(start, len)` over the
/// flattened pixel index `y * width + x`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawMask")]
pub struct RasterMask {
    width: u32,
    height: u32,
    runs: Vec<(u64, u64)>,
}

#[derive(Deserialize)]
struct RawMask {
    width: u32,
    height: u32,
    runs: Vec<(u64, u64)>,
}

impl TryFrom<RawMask> for RasterMask {
    type Error = GeomError;

    fn try_from(raw: RawMask) -> Result<Self, Self::Error> {
        RasterMask::from_runs(raw.width, raw.height, raw.runs)
    }
}

impl RasterMask {
    pub fn from_runs(width: u32, height: u32, runs: Vec<(u64, u64)>) -> Result<Self, GeomError> {
        let total = width as u64 * height as u64;
        let mut end = 0u64;
        for (index, &(start, len)) in runs.iter().enumerate() {
            if len == 0 {
                return Err(GeomError::EmptyRun { index });
            }
            if index > 0 && start < end {
                return Err(GeomError::UnorderedRuns { index });
            }
            end = start + len;
            if end > total {
                return Err(GeomError::RunOutOfBounds { index, width, height });
            }
        }
        Ok(Self { width, height, runs })
    }

    pub fn from_dense(width: u32, height: u32, pixels: &[bool]) -> Result<Self, GeomError> {
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(GeomError::DenseLength { got: pixels.len(), expected });
        }
        let mut runs = Vec::new();
        let mut open: Option<u64> = None;
        for (i, &on) in pixels.iter().enumerate() {
            match (on, open) {
                (true, None) => open = Some(i as u64),
                (false, Some(s)) => {
                    runs.push((s, i as u64 - s));
                    open = None;
                }
                _ => {}
            }
        }
        if let Some(s) = open {
            runs.push((s, expected as u64 - s));
        }
        Ok(Self { width, height, runs })
    }

    pub fn full(width: u32, height: u32) -> Self {
        let total = width as u64 * height as u64;
        let runs = if total == 0 { vec![] } else { vec![(0, total)] };
        Self { width, height, runs }
    }

    /// Foreground rectangle `[x0, x1) x [y0, y1)`, clipped to the raster.
    pub fn rect(width: u32, height: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        let (x1, y1) = (x1.min(width), y1.min(height));
        let mut runs = Vec::new();
        if x0 < x1 {
            for y in y0..y1 {
                runs.push((y as u64 * width as u64 + x0 as u64, (x1 - x0) as u64));
            }
        }
        Self { width, height, runs }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn runs(&self) -> &[(u64, u64)] {
        &self.runs
    }

    pub fn area(&self) -> u64 {
        self.runs.iter().map(|r| r.1).sum()
    }

    pub fn to_dense(&self) -> Vec<bool> {
        let mut out = vec![false; self.width as usize * self.height as usize];
        for &(start, len) in &self.runs {
            out[start as usize..(start + len) as usize].fill(true);
        }
        out
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        let idx = y as u64 * self.width as u64 + x as u64;
        // first run starting after idx, then look one back
        let pos = self.runs.partition_point(|&(s, _)| s <= idx);
        pos > 0 && {
            let (s, l) = self.runs[pos - 1];
            idx < s + l
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_rejects_degenerate_extent() {
        assert!(matches!(
            BoundingBox::new(0.0, 0.0, 0.0, 5.0),
            Err(GeomError::EmptyBox { .. })
        ));
        assert!(matches!(
            BoundingBox::new(-1.0, 0.0, 2.0, 5.0),
            Err(GeomError::NegativeOrigin { .. })
        ));
        assert!(BoundingBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn box_serializes_as_xywh_array() {
        let b = BoundingBox::new(438.0, 346.0, 120.0, 300.0).unwrap();
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, "[438.0,346.0,120.0,300.0]");
        let back: BoundingBox = serde_json::from_str(&s).unwrap();
        assert_eq!(back, b);
        assert!(serde_json::from_str::<BoundingBox>("[0,0,0,1]").is_err());
    }

    #[test]
    fn box_within_image() {
        let b = BoundingBox::new(600.0, 400.0, 40.0, 80.0).unwrap();
        assert!(b.check_within(640, 480).is_ok());
        assert!(b.check_within(639, 480).is_err());
    }

    #[test]
    fn mask_runs_must_be_ordered() {
        assert!(RasterMask::from_runs(4, 4, vec![(0, 2), (1, 2)]).is_err());
        assert!(RasterMask::from_runs(4, 4, vec![(4, 2), (0, 2)]).is_err());
        assert!(RasterMask::from_runs(4, 4, vec![(0, 0)]).is_err());
        assert!(RasterMask::from_runs(4, 4, vec![(15, 2)]).is_err());
        assert!(RasterMask::from_runs(4, 4, vec![(0, 2), (2, 2), (10, 6)]).is_ok());
    }

    #[test]
    fn dense_roundtrip_and_lookup() {
        let dense: Vec<bool> = (0..20).map(|i| i % 3 == 0 || i >= 17).collect();
        let m = RasterMask::from_dense(5, 4, &dense).unwrap();
        assert_eq!(m.to_dense(), dense);
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(m.get(x, y), dense[(y * 5 + x) as usize]);
            }
        }
        assert_eq!(m.area() as usize, dense.iter().filter(|&&b| b).count());
    }

    #[test]
    fn rect_mask_area() {
        let m = RasterMask::rect(10, 8, 2, 1, 6, 4);
        assert_eq!(m.area(), 12);
        assert!(m.get(2, 1) && m.get(5, 3) && !m.get(6, 3) && !m.get(2, 4));
        assert_eq!(RasterMask::full(3, 3).area(), 9);
    }

    #[test]
    fn mask_json_is_validated() {
        let ok: RasterMask =
            serde_json::from_str(r#"{"width":2,"height":2,"runs":[[0,1],[2,2]]}"#).unwrap();
        assert_eq!(ok.area(), 3);
        assert!(serde_json::from_str::<RasterMask>(r#"{"width":2,"height":2,"runs":[[0,5]]}"#).is_err());
    }
}
