//! Scene layout types and their JSONL interchange format.
//!
//! A layout is a caption plus a list of phrase-labelled boxes, exactly one of
//! which is the subject. Boxes are center-form (cx, cy, w, h), normalized to
//! the unit square. On disk a layout is one JSON object per line:
//! `{"caption": ..., "objects": [{"phrase": ..., "is_subject": ...,
//! "bbox": [cx, cy, w, h]}, ...]}`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// Center-form box in normalized scene coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f32; 4]", into = "[f32; 4]")]
pub struct BBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl From<[f32; 4]> for BBox {
    fn from(v: [f32; 4]) -> Self {
        BBox { cx: v[0], cy: v[1], w: v[2], h: v[3] }
    }
}

impl From<BBox> for [f32; 4] {
    fn from(b: BBox) -> Self {
        [b.cx, b.cy, b.w, b.h]
    }
}

impl BBox {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        BBox { cx, cy, w, h }
    }

    /// (x0, y0, x1, y1) corner form.
    pub fn corners(&self) -> (f32, f32, f32, f32) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn from_corners(x0: f32, y0: f32, x1: f32, y1: f32) -> Self {
        BBox { cx: (x0 + x1) / 2.0, cy: (y0 + y1) / 2.0, w: x1 - x0, h: y1 - y0 }
    }

    pub fn area(&self) -> f32 {
        self.w * self.h
    }

    pub fn is_finite(&self) -> bool {
        self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// Positive extent and finite coordinates.
    pub fn validate(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::DegenerateBox(format!("{self:?} has non-finite coordinates")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::DegenerateBox(format!("{self:?} has non-positive extent")));
        }
        Ok(())
    }

    /// Integer pixel rectangle (x0, y0, w, h) on a canvas, clipped to bounds.
    /// Corner rounding keeps adjacent normalized boxes adjacent in pixels.
    pub fn pixel_rect(&self, canvas_w: usize, canvas_h: usize) -> (usize, usize, usize, usize) {
        let (x0, y0, x1, y1) = self.corners();
        let px0 = ((x0 * canvas_w as f32).round().max(0.0) as usize).min(canvas_w);
        let py0 = ((y0 * canvas_h as f32).round().max(0.0) as usize).min(canvas_h);
        let px1 = ((x1 * canvas_w as f32).round().max(0.0) as usize).min(canvas_w);
        let py1 = ((y1 * canvas_h as f32).round().max(0.0) as usize).min(canvas_h);
        (px0, py0, px1.saturating_sub(px0), py1.saturating_sub(py0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub phrase: String,
    pub is_subject: bool,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub caption: String,
    pub objects: Vec<ObjectSpec>,
}

impl Layout {
    /// The unique subject entry.
    pub fn subject(&self) -> Result<&ObjectSpec> {
        let mut found = None;
        let mut count = 0;
        for o in &self.objects {
            if o.is_subject {
                count += 1;
                found = Some(o);
            }
        }
        match (count, found) {
            (1, Some(o)) => Ok(o),
            _ => Err(Error::SubjectCount(count)),
        }
    }

    pub fn subject_index(&self) -> Result<usize> {
        self.subject()?;
        Ok(self.objects.iter().position(|o| o.is_subject).unwrap())
    }

    /// Structural validity: non-empty phrases, finite positive boxes,
    /// exactly one subject.
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::InvalidArgument("layout has no objects".into()));
        }
        for o in &self.objects {
            if o.phrase.trim().is_empty() {
                return Err(Error::InvalidArgument("layout object with empty phrase".into()));
            }
            o.bbox.validate()?;
        }
        self.subject()?;
        Ok(())
    }
}

pub fn read_layouts_jsonl(path: &Path) -> Result<Vec<Layout>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let layout: Layout = serde_json::from_str(&line).map_err(|e| {
            Error::schema(format!("{}:{}", path.display(), idx + 1), e)
        })?;
        out.push(layout);
    }
    Ok(out)
}

pub fn write_layouts_jsonl(path: &Path, layouts: &[Layout]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for l in layouts {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
