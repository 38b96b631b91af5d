use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{
    add_grid_background, derive_seed, expand_training_set, AugmentConfig, GridConfig,
    LabeledSample, Manifest, ManifestEntry, Synthesizer,
};
use crate::ctc::Vocabulary;
use crate::error::{Error, Result};
use crate::preprocess::{normalize_height, read_pgm, sliding_windows, write_pgm};
use crate::tensor::Tensor;

/// A sample ready for the model: frames plus encoded label.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub frames: Tensor,
    pub label: Vec<usize>,
    pub text: String,
}

pub fn load_samples(manifest: &Manifest) -> Result<Vec<LabeledSample>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            Ok(LabeledSample {
                image: read_pgm(manifest.resolve(e))?,
                text: e.text.clone(),
            })
        })
        .collect()
}

/// Fails with a vocabulary error naming the first text `vocab` cannot encode.
pub fn check_coverage<'a>(
    vocab: &Vocabulary,
    texts: impl IntoIterator<Item = &'a str>,
) -> Result<()> {
    for t in texts {
        if let Some(c) = t.chars().find(|c| !vocab.contains(*c)) {
            return Err(Error::VocabularyMismatch(format!(
                "transcription {t:?} uses {c:?}, which the vocabulary {:?} lacks",
                vocab.as_string()
            )));
        }
    }
    Ok(())
}

/// Height normalization, optional grid background, then windowing.
pub fn prepare(
    samples: &[LabeledSample],
    vocab: &Vocabulary,
    grid: Option<&GridConfig>,
) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            let mut img = normalize_height(&s.image)?;
            if let Some(g) = grid {
                img = add_grid_background(&img, g)?;
            }
            Ok(Prepared {
                frames: sliding_windows(&img)?.frames,
                label: vocab.encode(&s.text)?,
                text: s.text.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Write the seven-fold augmented set of the `count` generated lines.
    pub augment: Option<AugmentConfig>,
}

/// Random texts over `vocab` rendered by the procedural generator. Equal
/// options give identical samples.
pub fn synth_samples(vocab: &Vocabulary, opts: &SynthOptions) -> Result<Vec<LabeledSample>> {
    if opts.count == 0 || opts.min_len > opts.max_len || vocab.is_empty() {
        return Err(Error::InvalidArgument(
            "synthesis needs a positive count, min_len <= max_len and a non-empty vocabulary"
                .into(),
        ));
    }
    let synth = Synthesizer::new(vocab.clone(), opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, u64::MAX));
    let mut out = Vec::with_capacity(opts.count);
    for i in 0..opts.count {
        let len = rng.gen_range(opts.min_len..=opts.max_len);
        let text: String = (0..len)
            .map(|_| vocab.symbols()[rng.gen_range(0..vocab.len())])
            .collect();
        out.push(synth.synth_line(&text, derive_seed(opts.seed, i as u64))?);
    }
    match &opts.augment {
        Some(cfg) => expand_training_set(&out, cfg),
        None => Ok(out),
    }
}

/// Writes `img/NNNNN.pgm` files and `manifest.tsv` under `out_dir`.
pub fn write_dataset(samples: &[LabeledSample], out_dir: &Path) -> Result<Manifest> {
    let img_dir = out_dir.join("img");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut manifest = Manifest {
        entries: Vec::with_capacity(samples.len()),
        root: out_dir.to_path_buf(),
    };
    for (i, s) in samples.iter().enumerate() {
        let rel = Path::new("img").join(format!("{i:05}.pgm"));
        write_pgm(out_dir.join(&rel), &s.image)?;
        manifest.entries.push(ManifestEntry {
            path: rel,
            text: s.text.clone(),
        });
    }
    manifest.save(out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new("abcd".chars()).unwrap()
    }

    #[test]
    fn synthesis_is_deterministic() {
        let opts = SynthOptions {
            count: 5,
            min_len: 1,
            max_len: 4,
            seed: 9,
            augment: None,
        };
        let a = synth_samples(&vocab(), &opts).unwrap();
        assert_eq!(a, synth_samples(&vocab(), &opts).unwrap());
        assert!(a.iter().all(|s| (1..=4).contains(&s.text.chars().count())));
        let aug = synth_samples(
            &vocab(),
            &SynthOptions {
                augment: Some(AugmentConfig::default()),
                ..opts
            },
        )
        .unwrap();
        assert_eq!(aug.len(), 35);
    }

    #[test]
    fn written_dataset_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions {
            count: 3,
            min_len: 2,
            max_len: 3,
            seed: 1,
            augment: None,
        };
        let samples = synth_samples(&vocab(), &opts).unwrap();
        write_dataset(&samples, dir.path()).unwrap();
        let m = Manifest::load(dir.path().join("manifest.tsv")).unwrap();
        let back = load_samples(&m).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in back.iter().zip(&samples) {
            assert_eq!(a.text, b.text);
            assert!(a
                .image
                .pixels()
                .iter()
                .zip(b.image.pixels())
                .all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
        }
    }

    #[test]
    fn coverage_errors_name_the_symbol() {
        let err = check_coverage(&vocab(), ["abc", "abz"]).unwrap_err();
        assert!(matches!(err, Error::VocabularyMismatch(_)));
        assert!(err.to_string().contains("'z'"));
    }
}
