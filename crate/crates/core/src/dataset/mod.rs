//! Labelled emoji images, their conditioning vectors, and batching.
//!
//! A manifest is a header-less UTF-8 CSV of `filename,word` rows. Each
//! distinct word is one class, numbered by first appearance, so a manifest
//! with one row per emoji gives class = row.

pub mod ppm;
pub mod synthetic;

use std::collections::VecDeque;
use std::path::Path;

pub use ppm::{image_grid, load_image, RgbImage};
pub use synthetic::{draw_face, make_synthetic_corpus};

use crate::embeddings::Vocabulary;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One training image with its class label and conditioning word.
#[derive(Clone, Debug)]
pub struct ImageSample {
    /// `[3, H, W]`, values in `[−1, 1]`.
    pub pixels: Tensor<f32>,
    pub label: usize,
    pub word: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub filename: String,
    pub word: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            if record.len() != 2 || record[0].is_empty() || record[1].is_empty() {
                let line = record.position().map_or(0, |p| p.line());
                return Err(Error::invalid(format!(
                    "manifest line {line}: expected `filename,word`"
                )));
            }
            rows.push(ManifestRow {
                filename: record[0].to_owned(),
                word: record[1].to_owned(),
            });
        }
        Ok(Self { rows })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for r in &self.rows {
            w.write_record([&r.filename, &r.word])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
    }

    /// Distinct words in order of first appearance; index = class.
    pub fn class_words(&self) -> Vec<String> {
        let mut words: Vec<String> = Vec::new();
        for r in &self.rows {
            if !words.contains(&r.word) {
                words.push(r.word.clone());
            }
        }
        words
    }
}

/// Immutable set of labelled images sharing one square size.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub samples: Vec<ImageSample>,
    pub class_words: Vec<String>,
    pub image_size: usize,
}

impl Corpus {
    /// Build from samples whose labels are `0..k` with one word per label.
    pub fn from_samples(samples: Vec<ImageSample>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("empty corpus"))?;
        let shape = first.pixels.shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
            return Err(Error::invalid(format!("expected square [3, S, S] images, got {shape:?}")));
        }
        let classes = samples.iter().map(|s| s.label).max().unwrap() + 1;
        let mut class_words: Vec<Option<String>> = vec![None; classes];
        for s in &samples {
            if s.pixels.shape() != shape.as_slice() {
                return Err(Error::shape("corpus", &shape, s.pixels.shape()));
            }
            if s.pixels.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::invalid("pixel outside [-1, 1]"));
            }
            match &class_words[s.label] {
                Some(w) if *w != s.word => {
                    return Err(Error::invalid(format!(
                        "class {} has words {w:?} and {:?}",
                        s.label, s.word
                    )))
                }
                Some(_) => {}
                None => class_words[s.label] = Some(s.word.clone()),
            }
        }
        let class_words = class_words
            .into_iter()
            .enumerate()
            .map(|(i, w)| w.ok_or_else(|| Error::invalid(format!("class {i} has no samples"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            image_size: shape[1],
            samples,
            class_words,
        })
    }

    /// Load every manifest row from `image_dir`, resized to `size`.
    pub fn load(manifest: &Manifest, image_dir: impl AsRef<Path>, size: usize) -> Result<Self> {
        let dir = image_dir.as_ref();
        let words = manifest.class_words();
        let mut samples = Vec::with_capacity(manifest.rows.len());
        for row in &manifest.rows {
            let path = dir.join(&row.filename);
            samples.push(ImageSample {
                pixels: load_image(&path, size)?,
                label: words.iter().position(|w| *w == row.word).expect("word from manifest"),
                word: row.word.clone(),
            });
        }
        Self::from_samples(samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_words.len()
    }
}

/// Conditioning vector for each class, taken from a vocabulary.
#[derive(Clone, Debug)]
pub struct ClassTable {
    words: Vec<String>,
    vectors: Vec<Vec<f32>>,
    dim: usize,
}

impl ClassTable {
    pub fn new(words: &[String], vocab: &Vocabulary) -> Result<Self> {
        let vectors = words
            .iter()
            .map(|w| vocab.lookup(w).map(|e| e.vector.clone()))
            .collect::<Result<_>>()?;
        Ok(Self {
            words: words.to_vec(),
            vectors,
            dim: vocab.dim(),
        })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.words.len()
    }

    pub fn vector(&self, class: usize) -> &[f32] {
        &self.vectors[class]
    }

    /// `[N, dim]` stack of the given classes' vectors.
    pub fn rows(&self, classes: &[usize]) -> Tensor<f32> {
        let data = classes.iter().flat_map(|&c| self.vectors[c].iter().copied()).collect();
        Tensor::new(&[classes.len(), self.dim], data).expect("rows shape")
    }
}

/// Images with their true and mismatched conditioning vectors.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub true_embeddings: Tensor<f32>,
    pub mismatched_embeddings: Tensor<f32>,
    pub labels: Vec<usize>,
    pub mismatched_labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Assemble the samples at `indices`; each gets a mismatched class drawn
/// uniformly from the other classes.
pub fn make_batch(corpus: &Corpus, table: &ClassTable, indices: &[usize], rng: &mut Rng) -> Result<Batch> {
    let k = table.num_classes();
    if k < 2 {
        return Err(Error::invalid("mismatched conditioning needs at least two classes"));
    }
    if k != corpus.num_classes() {
        return Err(Error::invalid(format!(
            "class table has {k} classes, corpus has {}",
            corpus.num_classes()
        )));
    }
    let images: Vec<Tensor<f32>> = indices.iter().map(|&i| corpus.samples[i].pixels.clone()).collect();
    let labels: Vec<usize> = indices.iter().map(|&i| corpus.samples[i].label).collect();
    let mismatched_labels: Vec<usize> = labels
        .iter()
        .map(|&y| {
            let r = rng.below(k - 1);
            if r >= y {
                r + 1
            } else {
                r
            }
        })
        .collect();
    Ok(Batch {
        images: Tensor::stack(&images)?,
        true_embeddings: table.rows(&labels),
        mismatched_embeddings: table.rows(&mismatched_labels),
        labels,
        mismatched_labels,
    })
}

/// Epoch-wise shuffling without replacement.
#[derive(Clone, Debug)]
pub struct Batcher {
    len: usize,
    batch_size: usize,
    pending: VecDeque<Vec<usize>>,
}

impl Batcher {
    pub fn new(len: usize, batch_size: usize) -> Result<Self> {
        if batch_size == 0 || batch_size > len {
            return Err(Error::invalid(format!(
                "batch size {batch_size} must be in 1..={len}"
            )));
        }
        Ok(Self {
            len,
            batch_size,
            pending: VecDeque::new(),
        })
    }

    /// One shuffled pass split into batches. A trailing batch of one
    /// sample is folded into the previous batch so that every batch can be
    /// normalized.
    pub fn epoch(&self, rng: &mut Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len).collect();
        rng.shuffle(&mut order);
        let mut batches: Vec<Vec<usize>> = order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let tail = batches.pop().unwrap();
            batches.last_mut().unwrap().extend(tail);
        }
        batches
    }

    /// Next batch, starting a freshly shuffled epoch when the current one is used up.
    pub fn next_batch(&mut self, corpus: &Corpus, table: &ClassTable, rng: &mut Rng) -> Result<Batch> {
        if self.pending.is_empty() {
            self.pending = self.epoch(rng).into();
        }
        let indices = self.pending.pop_front().expect("non-empty epoch");
        make_batch(corpus, table, &indices, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::fixture_vocabulary;

    fn corpus(classes: usize, per_class: usize) -> (Corpus, ClassTable) {
        let samples = make_synthetic_corpus(classes, per_class, 32, &mut Rng::new(1)).unwrap();
        let corpus = Corpus::from_samples(samples).unwrap();
        let table = ClassTable::new(&corpus.class_words, &fixture_vocabulary(300)).unwrap();
        (corpus, table)
    }

    #[test]
    fn two_classes_mismatch_is_the_other() {
        let (c, t) = corpus(2, 4);
        let mut rng = Rng::new(5);
        let mut b = Batcher::new(c.len(), 4).unwrap();
        for _ in 0..6 {
            let batch = b.next_batch(&c, &t, &mut rng).unwrap();
            for (y, m) in batch.labels.iter().zip(&batch.mismatched_labels) {
                assert_eq!(*m, 1 - y);
            }
            for (i, &m) in batch.mismatched_labels.iter().enumerate() {
                assert_eq!(batch.mismatched_embeddings.select(i).unwrap().data(), t.vector(m));
            }
        }
    }

    #[test]
    fn epoch_is_a_partition() {
        let (c, t) = corpus(8, 5);
        let b = Batcher::new(c.len(), 8).unwrap();
        let mut rng = Rng::new(9);
        let parts = b.epoch(&mut rng);
        assert_eq!(parts.len(), 5);
        let mut seen: Vec<usize> = parts.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..40).collect::<Vec<_>>());
        for p in &parts {
            let batch = make_batch(&c, &t, p, &mut rng).unwrap();
            assert!(batch.labels.iter().zip(&batch.mismatched_labels).all(|(a, b)| a != b));
            assert_eq!(batch.images.shape(), &[8, 3, 32, 32]);
        }
    }

    #[test]
    fn singleton_tail_is_merged() {
        let b = Batcher::new(9, 4).unwrap();
        let sizes: Vec<usize> = b.epoch(&mut Rng::new(1)).iter().map(Vec::len).collect();
        assert_eq!(sizes, [4, 5]);
    }

    #[test]
    fn shuffle_is_seeded() {
        let b = Batcher::new(40, 8).unwrap();
        assert_eq!(b.epoch(&mut Rng::new(3)), b.epoch(&mut Rng::new(3)));
        assert_ne!(b.epoch(&mut Rng::new(3)), b.epoch(&mut Rng::new(4)));
    }

    #[test]
    fn missing_word_is_reported() {
        let (c, _) = corpus(2, 1);
        let vocab = crate::embeddings::Vocabulary::new(300);
        assert!(matches!(
            ClassTable::new(&c.class_words, &vocab),
            Err(Error::UnknownWord { .. })
        ));
    }

    #[test]
    fn manifest_classes_follow_first_appearance() {
        let m = Manifest::parse("a.ppm,smile\nb.ppm,angry\nc.ppm,smile\n").unwrap();
        assert_eq!(m.class_words(), ["smile", "angry"]);
        assert_eq!(Manifest::parse(&m.to_csv().unwrap()).unwrap(), m);
        assert!(Manifest::parse("only-one-column\n").is_err());
    }

    #[test]
    fn load_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let img = draw_face(3, 64, Default::default());
        img.save(dir.path().join("x.ppm")).unwrap();
        img.save(dir.path().join("y.ppm")).unwrap();
        let m = Manifest::parse("x.ppm,smile\ny.ppm,angry\n").unwrap();
        let c = Corpus::load(&m, dir.path(), 32).unwrap();
        assert_eq!(c.image_size, 32);
        assert_eq!(c.samples[1].label, 1);
        let bad = Manifest::parse("missing.ppm,smile\n").unwrap();
        let msg = Corpus::load(&bad, dir.path(), 32).unwrap_err().to_string();
        assert!(msg.contains("missing.ppm"), "{msg}");
    }
}
