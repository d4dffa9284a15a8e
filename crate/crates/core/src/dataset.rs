//! Harmonized datasets on disk: a directory holding `samples.jsonl` (one
//! harmonized sample per line) and the PNG images it names, relative to the
//! directory.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harmonize::{read_jsonl, write_jsonl, DatasetId, HarmonizedSample, Split};
use crate::model::InputImage;
use crate::synth::{generate_dataset, harmonize_dataset, SynthParams};

pub const SAMPLES_FILE: &str = "samples.jsonl";

/// A harmonized sample with its decoded image.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub sample: HarmonizedSample,
    pub input: InputImage,
}

pub fn write_dataset(dir: impl AsRef<Path>, samples: &[(HarmonizedSample, RgbImage)]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (s, img) in samples {
        img.save_with_format(dir.join(&s.image), image::ImageFormat::Png)?;
    }
    let mut w = BufWriter::new(File::create(dir.join(SAMPLES_FILE))?);
    let lines: Vec<_> = samples.iter().map(|(s, _)| s.clone()).collect();
    write_jsonl(&mut w, &lines)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<LoadedSample>> {
    let dir = dir.as_ref();
    let samples: Vec<HarmonizedSample> = read_jsonl(BufReader::new(File::open(dir.join(SAMPLES_FILE))?))?;
    samples
        .into_iter()
        .map(|sample| {
            let img = image::open(dir.join(&sample.image))?.to_rgb8();
            Ok(LoadedSample {
                input: InputImage::from_rgb(&img)?,
                sample,
            })
        })
        .collect()
}

/// Pairs in-memory samples with their images without touching disk.
pub fn load_in_memory(samples: &[(HarmonizedSample, RgbImage)]) -> Result<Vec<LoadedSample>> {
    samples
        .iter()
        .map(|(s, img)| {
            Ok(LoadedSample {
                sample: s.clone(),
                input: InputImage::from_rgb(img)?,
            })
        })
        .collect()
}

/// Indices of the validation subset: the first `fraction` of `0..n` after
/// a seeded shuffle (at least one index when `n > 0`).
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("validation fraction must be in (0, 1], got {fraction}")));
    }
    if n == 0 {
        return Err(Error::Empty("test set".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n);
    idx.truncate(k);
    Ok(idx)
}

/// Train and validation sets for a synthetic experiment.
#[derive(Debug, Clone)]
pub struct SynthExperiment {
    pub train_2d: Vec<LoadedSample>,
    pub train_3d: Vec<LoadedSample>,
    pub val: Vec<LoadedSample>,
}

/// Generates a 2D training set, a 3D training set and a 3D test set from
/// independent seeds, and keeps a tenth of the test set for validation.
pub fn synth_experiment(
    base: &SynthParams,
    n_2d: usize,
    n_3d: usize,
    n_test: usize,
    format_2d: DatasetId,
    format_3d: DatasetId,
) -> Result<SynthExperiment> {
    let with = |seed_offset: u64, n: usize| SynthParams {
        seed: base.seed.wrapping_mul(1_000_003).wrapping_add(seed_offset),
        n_samples: n,
        ..base.clone()
    };
    let load = |params: SynthParams, target: DatasetId, split: Split, prefix: &str| -> Result<Vec<LoadedSample>> {
        let generated = generate_dataset(&params, target, split, prefix)?;
        load_in_memory(&harmonize_dataset(&generated)?)
    };
    let train_2d = load(with(1, n_2d), format_2d, Split::Train, "train2d")?;
    let train_3d = load(with(2, n_3d), format_3d, Split::Train, "train3d")?;
    let test = load(with(3, n_test), format_3d, Split::Test, "test")?;
    let val = validation_split(test.len(), 0.1, base.seed)?
        .into_iter()
        .map(|i| test[i].clone())
        .collect();
    Ok(SynthExperiment { train_2d, train_3d, val })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_split_is_seeded_and_sized() {
        let a = validation_split(1000, 0.1, 4).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, validation_split(1000, 0.1, 4).unwrap());
        assert_ne!(a, validation_split(1000, 0.1, 5).unwrap());
        let mut sorted = a.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 100);
        assert_eq!(validation_split(5, 0.1, 0).unwrap().len(), 1);
        assert!(validation_split(0, 0.1, 0).is_err());
    }

    #[test]
    fn dataset_directory_round_trip() {
        let params = SynthParams {
            n_samples: 3,
            ..SynthParams::default()
        };
        let generated = generate_dataset(&params, DatasetId::H36m, Split::Train, "s").unwrap();
        let samples = harmonize_dataset(&generated).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (b, (s, img)) in back.iter().zip(&samples) {
            assert_eq!(&b.sample, s);
            assert_eq!(b.input, InputImage::from_rgb(img).unwrap());
        }
    }
}
