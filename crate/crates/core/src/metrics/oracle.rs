//! Color-keyed detector for synthetic scenes. Stands in for a pretrained
//! detector: the renderer draws each category in a known flat color, so
//! nearest-palette classification plus connected components recovers boxes.
//! The distance threshold lets it tolerate the slightly-off colors a
//! generative model produces; exact matching would only ever work on
//! ground-truth renders.

use super::Detection;
use crate::imageio::Image;
use crate::layout::BBox;

/// One palette color. `category: None` marks background colors that are
/// classified (so nearby pixels don't get claimed by an object color) but
/// never reported.
#[derive(Clone, Debug)]
pub struct PaletteEntry {
    pub category: Option<String>,
    pub rgb: [f32; 3],
}

impl PaletteEntry {
    pub fn object(category: &str, rgb: [f32; 3]) -> Self {
        PaletteEntry { category: Some(category.into()), rgb }
    }

    pub fn background(rgb: [f32; 3]) -> Self {
        PaletteEntry { category: None, rgb }
    }
}

fn dist2(a: [f32; 3], b: [f32; 3]) -> f32 {
    (0..3).map(|c| (a[c] - b[c]) * (a[c] - b[c])).sum()
}

/// Detect palette-colored regions. Each pixel is assigned its nearest
/// palette entry when within `tol` (Euclidean RGB distance), then
/// 4-connected components per object category become detections with tight
/// boxes, score 1.0, ordered by first pixel in row-major scan order.
/// Pixels beyond `tol` of every entry are ignored. Two touching regions of
/// the same category merge into one component by construction.
pub fn oracle_detect(img: &Image, palette: &[PaletteEntry], tol: f32) -> Vec<Detection> {
    let (_, h, w) = img.dim();
    let tol2 = tol * tol;
    // Label grid: palette index per pixel, usize::MAX for unclaimed.
    let mut labels = vec![usize::MAX; h * w];
    for y in 0..h {
        for x in 0..w {
            let px = [img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]];
            let mut best = (usize::MAX, f32::MAX);
            for (i, entry) in palette.iter().enumerate() {
                let d = dist2(px, entry.rgb);
                if d < best.1 {
                    best = (i, d);
                }
            }
            if best.1 <= tol2 {
                labels[y * w + x] = best.0;
            }
        }
    }

    let mut visited = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = Vec::new();
    for start in 0..h * w {
        if visited[start] || labels[start] == usize::MAX {
            continue;
        }
        let entry = &palette[labels[start]];
        if entry.category.is_none() {
            visited[start] = true;
            continue;
        }
        // Flood the component.
        let label = labels[start];
        let (mut min_x, mut min_y, mut max_x, mut max_y) = (w, h, 0usize, 0usize);
        queue.clear();
        queue.push(start);
        visited[start] = true;
        while let Some(idx) = queue.pop() {
            let (y, x) = (idx / w, idx % w);
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
            let mut push = |ny: usize, nx: usize| {
                let nidx = ny * w + nx;
                if !visited[nidx] && labels[nidx] == label {
                    visited[nidx] = true;
                    queue.push(nidx);
                }
            };
            if x > 0 {
                push(y, x - 1);
            }
            if x + 1 < w {
                push(y, x + 1);
            }
            if y > 0 {
                push(y - 1, x);
            }
            if y + 1 < h {
                push(y + 1, x);
            }
        }
        let bbox = BBox::from_corners(
            min_x as f32 / w as f32,
            min_y as f32 / h as f32,
            (max_x + 1) as f32 / w as f32,
            (max_y + 1) as f32 / h as f32,
        );
        out.push(Detection {
            bbox,
            category: entry.category.clone().unwrap(),
            score: 1.0,
        });
    }
    out
}
