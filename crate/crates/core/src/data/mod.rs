//! Training data: scene samples with per-object masks, subject extraction,
//! the paper-style count filter and train/val/test split, COCO annotation
//! ingestion, and a synthetic scene generator with a known grammar.

pub mod coco;
pub mod dataset;
pub mod synth;

use crate::error::{Error, Result};
use crate::imageio::{Image, Mask};
use crate::layout::Layout;
use crate::rng::{derive_rng, Stream};
use rand::seq::SliceRandom;

/// One training scene: rendered image, caption, ground-truth layout and one
/// binary mask per layout object. Exactly one object is the subject.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub image: Image,
    pub caption: String,
    pub layout: Layout,
    pub instance_masks: Vec<Mask>,
    pub subject_index: usize,
}

impl SceneSample {
    /// Structural invariants: one mask per object, masks sized like the
    /// image, subject index consistent with the layout's subject flag.
    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.instance_masks.len() != self.layout.objects.len() {
            return Err(Error::InvalidArgument(format!(
                "sample has {} masks for {} objects",
                self.instance_masks.len(),
                self.layout.objects.len()
            )));
        }
        let (_, h, w) = self.image.dim();
        for (i, m) in self.instance_masks.iter().enumerate() {
            if m.dim() != (h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "mask {i} is {:?}, image is {h}x{w}",
                    m.dim()
                )));
            }
        }
        if self.layout.subject_index()? != self.subject_index {
            return Err(Error::InvalidArgument(format!(
                "subject_index {} disagrees with layout subject",
                self.subject_index
            )));
        }
        Ok(())
    }

    pub fn subject_mask(&self) -> &Mask {
        &self.instance_masks[self.subject_index]
    }
}

/// Tight crop of the subject with its mask. Pixels outside the mask are set
/// to mid-gray 0.5; the returned mask marks which crop pixels are real.
pub fn extract_subject(sample: &SceneSample) -> Result<(Image, Mask)> {
    let mask = sample.subject_mask();
    let (h, w) = mask.dim();
    let (mut min_x, mut min_y, mut max_x, mut max_y) = (w, h, 0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                min_x = min_x.min(x);
                max_x = max_x.max(x);
                min_y = min_y.min(y);
                max_y = max_y.max(y);
            }
        }
    }
    if min_x == w {
        return Err(Error::EmptyMask);
    }
    let (cw, ch) = (max_x - min_x + 1, max_y - min_y + 1);
    let mut crop = crate::imageio::solid(ch, cw, [0.5, 0.5, 0.5]);
    let mut crop_mask = Mask::from_elem((ch, cw), false);
    for y in 0..ch {
        for x in 0..cw {
            if mask[[min_y + y, min_x + x]] {
                crop_mask[[y, x]] = true;
                for c in 0..3 {
                    crop[[c, y, x]] = sample.image[[c, min_y + y, min_x + x]];
                }
            }
        }
    }
    Ok((crop, crop_mask))
}

/// Index lists into the input sample slice; disjoint, and their union is
/// exactly the set passing the object-count filter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub const MIN_OBJECTS: usize = 3;
pub const MAX_OBJECTS: usize = 8;

/// Keep samples with 3..=8 objects; split the first `train_source_count`
/// samples (the official training source) 95/5 into train/val, and the rest
/// (the official validation source) becomes the test set.
pub fn filter_and_split(
    samples: &[SceneSample],
    train_source_count: usize,
    seed: u64,
) -> DatasetSplit {
    assert!(train_source_count <= samples.len());
    let keep =
        |s: &SceneSample| (MIN_OBJECTS..=MAX_OBJECTS).contains(&s.layout.objects.len());
    let mut train_pool: Vec<usize> = (0..train_source_count)
        .filter(|&i| keep(&samples[i]))
        .collect();
    let test: Vec<usize> = (train_source_count..samples.len())
        .filter(|&i| keep(&samples[i]))
        .collect();

    let mut rng = derive_rng(seed, Stream::Split, &[]);
    train_pool.shuffle(&mut rng);
    let n_val = (train_pool.len() * 5 + 50) / 100;
    let mut val: Vec<usize> = train_pool.split_off(train_pool.len() - n_val);
    let mut train = train_pool;
    // Index order within each split is stable regardless of shuffle order.
    train.sort_unstable();
    val.sort_unstable();
    DatasetSplit { train, val, test }
}
