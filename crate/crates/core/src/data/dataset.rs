//! On-disk dataset layout: a directory holding `index.jsonl` plus one PNG
//! per scene image and one PNG per instance mask. Images whose values are
//! exact 8-bit levels round-trip bit-for-bit.

use super::SceneSample;
use crate::error::{Error, Result};
use crate::imageio;
use crate::layout::{Layout, ObjectSpec};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct Record {
    image: String,
    masks: Vec<String>,
    caption: String,
    objects: Vec<ObjectSpec>,
}

/// Writes `samples` into `dir` (created if missing): `img_{i:05}.png`,
/// `mask_{i:05}_{j:02}.png`, and an `index.jsonl` with one record per line.
pub fn save_dataset(dir: &Path, samples: &[SceneSample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index_path = dir.join("index.jsonl");
    let mut index =
        std::fs::File::create(&index_path).map_err(|e| Error::io(&index_path, e))?;
    for (i, s) in samples.iter().enumerate() {
        s.validate()?;
        let image = format!("img_{i:05}.png");
        imageio::save_png(&dir.join(&image), &s.image)?;
        let mut masks = Vec::with_capacity(s.instance_masks.len());
        for (j, m) in s.instance_masks.iter().enumerate() {
            let name = format!("mask_{i:05}_{j:02}.png");
            imageio::save_mask_png(&dir.join(&name), m)?;
            masks.push(name);
        }
        let record = Record {
            image,
            masks,
            caption: s.caption.clone(),
            objects: s.layout.objects.clone(),
        };
        let line = serde_json::to_string(&record)?;
        writeln!(index, "{line}").map_err(|e| Error::io(&index_path, e))?;
    }
    Ok(())
}

/// Loads a dataset previously written by [`save_dataset`]. Every sample is
/// re-validated, so a tampered index fails loudly instead of mistraining.
pub fn load_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let index_path = dir.join("index.jsonl");
    let file = std::fs::File::open(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&index_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| {
            Error::schema(format!("{}:{}", index_path.display(), lineno + 1), e)
        })?;
        let image = imageio::load_png(&dir.join(&record.image))?;
        let instance_masks = record
            .masks
            .iter()
            .map(|name| imageio::load_mask_png(&dir.join(name)))
            .collect::<Result<Vec<_>>>()?;
        let layout = Layout { caption: record.caption.clone(), objects: record.objects };
        let subject_index = layout.subject_index().map_err(|e| {
            Error::schema(format!("{}:{}", index_path.display(), lineno + 1), e)
        })?;
        let sample = SceneSample {
            image,
            caption: record.caption,
            layout,
            instance_masks,
            subject_index,
        };
        sample.validate()?;
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset(dir.display().to_string()));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::SyntheticGrammar;

    #[test]
    fn dataset_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let g = SyntheticGrammar::default();
        let samples = g.generate_batch(5, 0, 3).unwrap();
        save_dataset(dir.path(), &samples).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), samples.len());
        for (a, b) in samples.iter().zip(&loaded) {
            assert_eq!(a.image, b.image, "synthetic pixels are 8-bit exact");
            assert_eq!(a.caption, b.caption);
            assert_eq!(a.layout, b.layout);
            assert_eq!(a.instance_masks, b.instance_masks);
            assert_eq!(a.subject_index, b.subject_index);
        }
    }

    #[test]
    fn corrupt_index_line_reports_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let samples = SyntheticGrammar::default().generate_batch(5, 0, 1).unwrap();
        save_dataset(dir.path(), &samples).unwrap();
        let index = dir.path().join("index.jsonl");
        let mut text = std::fs::read_to_string(&index).unwrap();
        text.push_str("{not json\n");
        std::fs::write(&index, text).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("index.jsonl:2"), "{err}");
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("index.jsonl"), "").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::EmptyDataset(_))));
    }
}
