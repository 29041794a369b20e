//! Synthetic scene generator with a fixed grammar: two full-width bands (sky
//! on top, grass at the bottom) plus 1..=6 flat-colored things resting on the
//! grass line, pairwise separated by at least one background column. Every
//! color comes from a fixed palette, so a nearest-color detector recovers the
//! exact ground-truth layout; that closes the loop for end-to-end checks.

use super::SceneSample;
use crate::error::{Error, Result};
use crate::imageio::Mask;
use crate::layout::{BBox, Layout, ObjectSpec};
use crate::metrics::PaletteEntry;
use crate::rng::{derive_rng, Stream};
use ndarray::{Array2, Array3};
use rand::Rng;

/// Nearest-color tolerance generous enough to survive mild rendering noise
/// while staying far below half the minimum palette pair distance (~0.28).
pub const ORACLE_TOL: f32 = 0.15;

pub const BACKGROUND_RGB: [u8; 3] = [40, 40, 48];
pub const SKY_RGB: [u8; 3] = [120, 180, 230];
pub const GRASS_RGB: [u8; 3] = [80, 160, 60];
pub const DOG_RGB: [u8; 3] = [200, 60, 40];
pub const CAT_RGB: [u8; 3] = [230, 200, 60];
pub const BALL_RGB: [u8; 3] = [40, 80, 200];
pub const TREE_RGB: [u8; 3] = [140, 70, 160];
pub const HOUSE_RGB: [u8; 3] = [245, 245, 240];

/// Below 4 px per side an inscribed ellipse no longer fills its box out to
/// every edge row/column, which would break bbox-exact oracle recovery.
const MIN_THING_SIDE: usize = 4;
const MAX_THING_SIDE: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ThingKind {
    Dog,
    Cat,
    Ball,
    Tree,
    House,
}

const KINDS: [ThingKind; 5] =
    [ThingKind::Dog, ThingKind::Cat, ThingKind::Ball, ThingKind::Tree, ThingKind::House];

impl ThingKind {
    fn phrase(self) -> &'static str {
        match self {
            ThingKind::Dog => "dog",
            ThingKind::Cat => "cat",
            ThingKind::Ball => "ball",
            ThingKind::Tree => "tree",
            ThingKind::House => "house",
        }
    }

    fn rgb(self) -> [u8; 3] {
        match self {
            ThingKind::Dog => DOG_RGB,
            ThingKind::Cat => CAT_RGB,
            ThingKind::Ball => BALL_RGB,
            ThingKind::Tree => TREE_RGB,
            ThingKind::House => HOUSE_RGB,
        }
    }

    fn is_ellipse(self) -> bool {
        matches!(self, ThingKind::Ball | ThingKind::Tree)
    }
}

fn norm_rgb(rgb: [u8; 3]) -> [f32; 3] {
    [rgb[0] as f32 / 255.0, rgb[1] as f32 / 255.0, rgb[2] as f32 / 255.0]
}

/// Detection palette for scenes from this grammar. The plain background is a
/// claim-but-don't-report entry; everything else maps to a layout phrase.
pub fn palette() -> Vec<PaletteEntry> {
    vec![
        PaletteEntry::background(norm_rgb(BACKGROUND_RGB)),
        PaletteEntry::object("sky", norm_rgb(SKY_RGB)),
        PaletteEntry::object("grass", norm_rgb(GRASS_RGB)),
        PaletteEntry::object("dog", norm_rgb(DOG_RGB)),
        PaletteEntry::object("cat", norm_rgb(CAT_RGB)),
        PaletteEntry::object("ball", norm_rgb(BALL_RGB)),
        PaletteEntry::object("tree", norm_rgb(TREE_RGB)),
        PaletteEntry::object("house", norm_rgb(HOUSE_RGB)),
    ]
}

#[derive(Clone, Debug)]
pub struct SyntheticGrammar {
    /// Square canvas side in pixels; at least 16.
    pub canvas: usize,
    pub things_min: usize,
    pub things_max: usize,
    /// Resampling budget before the grammar reports itself unsatisfiable.
    pub max_attempts: usize,
}

impl Default for SyntheticGrammar {
    fn default() -> Self {
        SyntheticGrammar { canvas: 32, things_min: 1, things_max: 6, max_attempts: 1000 }
    }
}

impl SyntheticGrammar {
    /// Generates the `index`-th scene of the stream identified by `seed`.
    /// Samples are independent across indices and bit-stable across runs.
    pub fn generate(&self, seed: u64, index: u64) -> Result<SceneSample> {
        assert!(self.canvas >= 16, "canvas too small for the band grammar");
        assert!(
            (1..=self.things_max).contains(&self.things_min),
            "need 1 <= things_min <= things_max"
        );
        let c = self.canvas;
        let mut rng = derive_rng(seed, Stream::SceneGrammar, &[index]);
        for _ in 0..self.max_attempts {
            let n = rng.random_range(self.things_min..=self.things_max);
            let sky_h = rng.random_range(c / 4..=c * 3 / 8);
            let ground_y = rng.random_range(c * 5 / 8..=c * 3 / 4);
            // Fitting n things plus n-1 single-column gaps caps the width.
            let w_cap = MAX_THING_SIDE.min((c - (n - 1)) / n);
            // Things stand on the grass line and must stay below the sky.
            let h_cap = MAX_THING_SIDE.min(ground_y - sky_h);
            if w_cap < MIN_THING_SIDE || h_cap < MIN_THING_SIDE {
                continue;
            }
            let kinds: Vec<ThingKind> =
                (0..n).map(|_| KINDS[rng.random_range(0..KINDS.len())]).collect();
            let widths: Vec<usize> =
                (0..n).map(|_| rng.random_range(MIN_THING_SIDE..=w_cap)).collect();
            let heights: Vec<usize> =
                (0..n).map(|_| rng.random_range(MIN_THING_SIDE..=h_cap)).collect();
            let slack = c - widths.iter().sum::<usize>() - (n - 1);
            let extras = composition(&mut rng, slack, n + 1);
            let mut xs = Vec::with_capacity(n);
            let mut x = extras[0];
            for i in 0..n {
                xs.push(x);
                x += widths[i] + 1 + extras[i + 1];
            }
            let subject = rng.random_range(0..n);
            return self.render(&kinds, &widths, &heights, &xs, sky_h, ground_y, subject);
        }
        Err(Error::GrammarUnsatisfiable {
            attempts: self.max_attempts,
            rule: format!(
                "{}..={} things of side >= {MIN_THING_SIDE} with 1-px gaps on a {c}-px canvas",
                self.things_min, self.things_max
            ),
        })
    }

    pub fn generate_batch(&self, seed: u64, start: u64, count: usize) -> Result<Vec<SceneSample>> {
        (0..count).map(|i| self.generate(seed, start + i as u64)).collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn render(
        &self,
        kinds: &[ThingKind],
        widths: &[usize],
        heights: &[usize],
        xs: &[usize],
        sky_h: usize,
        ground_y: usize,
        subject: usize,
    ) -> Result<SceneSample> {
        let c = self.canvas;
        let n = kinds.len();
        // Label map drives both pixels and per-object masks; regions never
        // overlap, so paint order is irrelevant.
        let mut label = Array2::from_elem((c, c), usize::MAX);
        for y in 0..sky_h {
            for x in 0..c {
                label[[y, x]] = 0;
            }
        }
        for y in ground_y..c {
            for x in 0..c {
                label[[y, x]] = 1;
            }
        }
        for i in 0..n {
            let (x0, w, h) = (xs[i], widths[i], heights[i]);
            let y0 = ground_y - h;
            let (ecx, ecy) = (x0 as f64 + w as f64 / 2.0, y0 as f64 + h as f64 / 2.0);
            for y in y0..ground_y {
                for x in x0..x0 + w {
                    let inside = if kinds[i].is_ellipse() {
                        let dx = (x as f64 + 0.5 - ecx) / (w as f64 / 2.0);
                        let dy = (y as f64 + 0.5 - ecy) / (h as f64 / 2.0);
                        dx * dx + dy * dy <= 1.0
                    } else {
                        true
                    };
                    if inside {
                        label[[y, x]] = 2 + i;
                    }
                }
            }
        }

        let mut image = Array3::zeros((3, c, c));
        for y in 0..c {
            for x in 0..c {
                let rgb = match label[[y, x]] {
                    usize::MAX => BACKGROUND_RGB,
                    0 => SKY_RGB,
                    1 => GRASS_RGB,
                    l => kinds[l - 2].rgb(),
                };
                let rgb = norm_rgb(rgb);
                for ch in 0..3 {
                    image[[ch, y, x]] = rgb[ch];
                }
            }
        }

        let cf = c as f32;
        let mut objects = vec![
            ObjectSpec {
                phrase: "sky".into(),
                is_subject: false,
                bbox: BBox::from_corners(0.0, 0.0, 1.0, sky_h as f32 / cf),
            },
            ObjectSpec {
                phrase: "grass".into(),
                is_subject: false,
                bbox: BBox::from_corners(0.0, ground_y as f32 / cf, 1.0, 1.0),
            },
        ];
        for i in 0..n {
            objects.push(ObjectSpec {
                phrase: kinds[i].phrase().into(),
                is_subject: i == subject,
                bbox: BBox::from_corners(
                    xs[i] as f32 / cf,
                    (ground_y - heights[i]) as f32 / cf,
                    (xs[i] + widths[i]) as f32 / cf,
                    ground_y as f32 / cf,
                ),
            });
        }

        let instance_masks: Vec<Mask> = (0..objects.len())
            .map(|l| Array2::from_shape_fn((c, c), |(y, x)| label[[y, x]] == l))
            .collect();

        let subj_bbox = &objects[2 + subject].bbox;
        let pos = if subj_bbox.cx < 1.0 / 3.0 {
            "on the left"
        } else if subj_bbox.cx < 2.0 / 3.0 {
            "in the middle"
        } else {
            "on the right"
        };
        let others: Vec<String> = (0..n)
            .filter(|&i| i != subject)
            .map(|i| format!("a {}", kinds[i].phrase()))
            .collect();
        let caption = match others.len() {
            0 => format!("a {} {pos}", kinds[subject].phrase()),
            1 => format!("a {} {pos} with {}", kinds[subject].phrase(), others[0]),
            _ => format!(
                "a {} {pos} with {} and {}",
                kinds[subject].phrase(),
                others[..others.len() - 1].join(", "),
                others[others.len() - 1]
            ),
        };

        let sample = SceneSample {
            image,
            caption: caption.clone(),
            layout: Layout { caption, objects },
            instance_masks,
            subject_index: 2 + subject,
        };
        sample.validate()?;
        Ok(sample)
    }
}

/// Uniform random composition of `total` into `parts` non-negative integers,
/// by placing `parts - 1` bars among `total` stars.
fn composition(rng: &mut impl Rng, total: usize, parts: usize) -> Vec<usize> {
    assert!(parts >= 1);
    if parts == 1 {
        return vec![total];
    }
    let k = parts - 1;
    let mut bars: Vec<usize> = rand::seq::index::sample(rng, total + k, k).into_vec();
    bars.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    out.push(bars[0]);
    for i in 1..k {
        out.push(bars[i] - bars[i - 1] - 1);
    }
    out.push(total + k - 1 - bars[k - 1]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{optimal_match, oracle_detect};

    #[test]
    fn oracle_recovers_every_generated_layout_exactly() {
        let g = SyntheticGrammar::default();
        for index in 0..20 {
            let s = g.generate(42, index).unwrap();
            let det = oracle_detect(&s.image, &palette(), ORACLE_TOL);
            assert_eq!(det.len(), s.layout.objects.len(), "index {index}");
            let detected = Layout {
                caption: String::new(),
                objects: det
                    .iter()
                    .map(|d| ObjectSpec {
                        phrase: d.category.clone(),
                        is_subject: false,
                        bbox: d.bbox,
                    })
                    .collect(),
            };
            let m = optimal_match(&detected, &s.layout);
            assert!(m.mean_iou > 0.999, "index {index}: mean IoU {}", m.mean_iou);
        }
    }

    #[test]
    fn samples_are_structurally_valid_and_counts_in_range() {
        let g = SyntheticGrammar::default();
        let mut seen_counts = std::collections::BTreeSet::new();
        for index in 0..40 {
            let s = g.generate(7, index).unwrap();
            s.validate().unwrap();
            let n = s.layout.objects.len();
            assert!((3..=8).contains(&n));
            seen_counts.insert(n);
            assert_eq!(s.layout.objects[0].phrase, "sky");
            assert_eq!(s.layout.objects[1].phrase, "grass");
            assert!(s.subject_index >= 2, "bands are never the subject");
        }
        assert!(seen_counts.len() >= 4, "object counts vary: {seen_counts:?}");
    }

    #[test]
    fn masks_partition_the_canvas_with_background() {
        let g = SyntheticGrammar::default();
        let s = g.generate(3, 5).unwrap();
        let c = g.canvas;
        for y in 0..c {
            for x in 0..c {
                let claims =
                    s.instance_masks.iter().filter(|m| m[[y, x]]).count();
                assert!(claims <= 1, "masks overlap at ({y}, {x})");
            }
        }
        assert!(s.instance_masks.iter().all(|m| m.iter().any(|&b| b)));
    }

    #[test]
    fn generation_is_deterministic_per_seed_and_index() {
        let g = SyntheticGrammar::default();
        let a = g.generate(11, 4).unwrap();
        let b = g.generate(11, 4).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.caption, b.caption);
        let other = g.generate(11, 5).unwrap();
        assert!(a.image != other.image || a.caption != other.caption);
    }

    #[test]
    fn caption_names_subject_with_position_word() {
        let g = SyntheticGrammar::default();
        for index in 0..10 {
            let s = g.generate(19, index).unwrap();
            let subj_phrase = &s.layout.objects[s.subject_index].phrase;
            assert!(s.caption.starts_with(&format!("a {subj_phrase} ")));
            assert!(
                ["on the left", "in the middle", "on the right"]
                    .iter()
                    .any(|p| s.caption.contains(p)),
                "caption {:?}",
                s.caption
            );
        }
    }

    #[test]
    fn tiny_canvas_reports_unsatisfiable_grammar() {
        let g = SyntheticGrammar { canvas: 16, things_min: 4, things_max: 4, max_attempts: 50 };
        match g.generate(1, 0) {
            Err(Error::GrammarUnsatisfiable { attempts, .. }) => assert_eq!(attempts, 50),
            other => panic!("expected unsatisfiable grammar, got {other:?}"),
        }
    }

    #[test]
    fn bands_span_full_width() {
        let s = SyntheticGrammar::default().generate(2, 1).unwrap();
        let sky = &s.layout.objects[0].bbox;
        assert_eq!((sky.cx, sky.w), (0.5, 1.0));
        let grass = &s.layout.objects[1].bbox;
        assert_eq!((grass.cx, grass.w), (0.5, 1.0));
        assert!((grass.cy + grass.h / 2.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ellipse_fills_its_box_to_every_edge_at_min_size() {
        // The oracle relies on the inscribed ellipse touching all four bbox
        // edges in pixel space for sides >= 4.
        for (w, h) in [(4, 4), (4, 7), (5, 4), (10, 9)] {
            let (ecx, ecy) = (w as f64 / 2.0, h as f64 / 2.0);
            let inside = |x: usize, y: usize| {
                let dx = (x as f64 + 0.5 - ecx) / (w as f64 / 2.0);
                let dy = (y as f64 + 0.5 - ecy) / (h as f64 / 2.0);
                dx * dx + dy * dy <= 1.0
            };
            assert!((0..h).any(|y| inside(0, y)) && (0..h).any(|y| inside(w - 1, y)));
            assert!((0..w).any(|x| inside(x, 0)) && (0..w).any(|x| inside(x, h - 1)));
        }
    }

    #[test]
    fn composition_parts_sum_to_total_and_cover_extremes() {
        let mut rng = derive_rng(0, Stream::SceneGrammar, &[99]);
        let mut saw_zero = false;
        for _ in 0..200 {
            let parts = composition(&mut rng, 7, 4);
            assert_eq!(parts.len(), 4);
            assert_eq!(parts.iter().sum::<usize>(), 7);
            saw_zero |= parts.contains(&0);
        }
        assert!(saw_zero);
    }
}
