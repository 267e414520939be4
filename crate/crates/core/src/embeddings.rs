//! Word vectors in the word2vec binary layout and the small amount of
//! vector arithmetic done on them.
//!
//! File layout: an ASCII header `"<vocab_size> <dim>\n"`, then per word
//! the token terminated by a space followed by `dim` little-endian `f32`
//! values. The reference writer appends `\n` after each vector; the reader
//! skips any whitespace before a token so both variants load.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct WordEmbedding {
    pub word: String,
    pub vector: Vec<f32>,
}

/// Ordered word list with constant dimension and a word → index map.
#[derive(Clone, Debug, Default)]
pub struct Vocabulary {
    entries: Vec<WordEmbedding>,
    index: HashMap<String, usize>,
    dim: usize,
}

impl Vocabulary {
    pub fn new(dim: usize) -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            dim,
        }
    }

    pub fn push(&mut self, word: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let word = word.into();
        if vector.len() != self.dim {
            return Err(Error::invalid(format!(
                "vector for {word:?} has {} components, vocabulary dim is {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("vector for {word:?} is not finite")));
        }
        if self.index.contains_key(&word) {
            return Err(Error::DuplicateWord(word));
        }
        self.index.insert(word.clone(), self.entries.len());
        self.entries.push(WordEmbedding { word, vector });
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&WordEmbedding> {
        self.index.get(word).map(|&i| &self.entries[i])
    }

    pub fn lookup(&self, word: &str) -> Result<&WordEmbedding> {
        self.get(word).ok_or_else(|| Error::UnknownWord {
            word: word.to_owned(),
        })
    }

    pub fn position(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &WordEmbedding> {
        self.entries.iter()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.word.as_str())
    }

    /// Same words, each vector scaled to unit length (zero vectors are kept).
    pub fn normalized(&self) -> Self {
        let mut out = Self::new(self.dim);
        for e in &self.entries {
            let norm = e.vector.iter().map(|v| v * v).sum::<f32>().sqrt();
            let v = if norm > 0.0 {
                e.vector.iter().map(|x| x / norm).collect()
            } else {
                e.vector.clone()
            };
            out.push(e.word.clone(), v).expect("copy of a valid vocabulary");
        }
        out
    }

    /// Keep only `words`, in this vocabulary's order.
    pub fn restricted_to(&self, words: &[&str]) -> Result<Self> {
        let wanted: HashSet<&str> = words.iter().copied().collect();
        for w in &wanted {
            self.lookup(w)?;
        }
        let mut out = Self::new(self.dim);
        for e in self.entries.iter().filter(|e| wanted.contains(e.word.as_str())) {
            out.push(e.word.clone(), e.vector.clone())?;
        }
        Ok(out)
    }

    /// Parse word2vec binary data. With an allow-list only the listed words
    /// are kept (the rest are skipped without allocation); duplicates among
    /// kept words are an error.
    pub fn read_word2vec<R: BufRead>(reader: R, allow: Option<&HashSet<String>>) -> Result<Self> {
        let mut r = Counting { inner: reader, offset: 0 };
        let mut header = Vec::new();
        r.read_until(b'\n', &mut header)?;
        let header_text = String::from_utf8_lossy(&header);
        let mut fields = header_text.split_whitespace();
        let parse_field = |f: Option<&str>, what: &str| -> Result<usize> {
            f.and_then(|s| s.parse().ok()).ok_or_else(|| Error::Format {
                what: "word2vec header",
                offset: 0,
                reason: format!("missing or invalid {what} in {:?}", header_text.trim_end()),
            })
        };
        let count = parse_field(fields.next(), "vocabulary size")?;
        let dim = parse_field(fields.next(), "dimension")?;
        if fields.next().is_some() || !header.ends_with(b"\n") {
            return Err(Error::Format {
                what: "word2vec header",
                offset: 0,
                reason: format!("expected \"<count> <dim>\\n\", got {:?}", header_text),
            });
        }

        let mut vocab = Self::new(dim);
        let mut raw = vec![0u8; 4 * dim];
        let mut token = Vec::new();
        for i in 0..count {
            let start = r.offset;
            r.skip_whitespace()?;
            token.clear();
            r.read_until(b' ', &mut token)?;
            if token.pop() != Some(b' ') || token.is_empty() {
                return Err(Error::Format {
                    what: "word2vec record",
                    offset: start,
                    reason: format!("record {i} of {count}: truncated token"),
                });
            }
            let vec_start = r.offset;
            r.read_exact_at(&mut raw).map_err(|got| Error::Format {
                what: "word2vec record",
                offset: vec_start,
                reason: format!(
                    "record {i} of {count}: truncated vector, {got} of {} bytes present",
                    raw.len()
                ),
            })?;
            let word = String::from_utf8_lossy(&token).into_owned();
            if allow.is_some_and(|a| !a.contains(&word)) {
                continue;
            }
            let vector = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            vocab.push(word, vector)?;
        }
        Ok(vocab)
    }

    pub fn load_word2vec_binary(path: impl AsRef<Path>, allow: Option<&HashSet<String>>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_word2vec(BufReader::new(file), allow).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    pub fn write_word2vec<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{} {}", self.entries.len(), self.dim)?;
        for e in &self.entries {
            w.write_all(e.word.as_bytes())?;
            w.write_all(b" ")?;
            for v in &e.vector {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_word2vec_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_word2vec(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

struct Counting<R> {
    inner: R,
    offset: u64,
}

impl<R: BufRead> Counting<R> {
    fn read_until(&mut self, delim: u8, buf: &mut Vec<u8>) -> Result<usize> {
        let n = self
            .inner
            .read_until(delim, buf)
            .map_err(|e| Error::io("<word2vec stream>", e))?;
        self.offset += n as u64;
        Ok(n)
    }

    fn skip_whitespace(&mut self) -> Result<()> {
        loop {
            let buf = self
                .inner
                .fill_buf()
                .map_err(|e| Error::io("<word2vec stream>", e))?;
            if buf.is_empty() {
                return Ok(());
            }
            let n = buf.iter().take_while(|b| b.is_ascii_whitespace()).count();
            let done = n < buf.len();
            self.inner.consume(n);
            self.offset += n as u64;
            if done {
                return Ok(());
            }
        }
    }

    /// Fill `buf` completely or report how many bytes were available.
    fn read_exact_at(&mut self, buf: &mut [u8]) -> std::result::Result<(), usize> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => return Err(filled),
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(_) => return Err(filled),
            }
        }
        self.offset += filled as u64;
        Ok(())
    }
}

/// Newline-separated word list; blank lines are ignored.
pub fn read_allow_list(path: impl AsRef<Path>) -> Result<HashSet<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

/// Elementwise `(a + b) / 2`.
pub fn average_vectors(a: &WordEmbedding, b: &WordEmbedding) -> Result<Vec<f32>> {
    if a.vector.len() != b.vector.len() {
        return Err(Error::shape("average_vectors", &[a.vector.len()], &[b.vector.len()]));
    }
    Ok(a.vector
        .iter()
        .zip(&b.vector)
        .map(|(x, y)| (x + y) / 2.0)
        .collect())
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_similarity", &[a.len()], &[b.len()]));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Words standing in for the 82 Messenger face emojis, one per class.
pub const EMOJI_WORDS: [&str; 82] = [
    "smile", "grin", "joy", "laugh", "wink", "blush", "halo", "love", "kiss", "yum",
    "cool", "smirk", "neutral", "expressionless", "unamused", "eyeroll", "grimace", "relieved",
    "pensive", "sleepy", "drool", "sleeping", "mask", "sick", "nauseated", "vomit", "sneeze",
    "hot", "cold", "woozy", "dizzy", "explode", "cowboy", "party", "disguise", "nerd", "monocle",
    "confused", "worried", "frown", "surprise", "astonished", "flushed", "pleading", "frowning",
    "anguish", "fearful", "anxious", "sad", "cry", "sob", "scream", "confounded", "persevere",
    "disappointed", "sweat", "weary", "tired", "yawn", "triumph", "angry", "rage", "curse",
    "devil", "skull", "clown", "ghost", "alien", "robot", "poop", "hug", "thinking", "shush",
    "zipper", "lying", "upside", "money", "starstruck", "heart", "tongue", "crazy", "sunglasses",
];

/// Extra vocabulary entries that belong to no class.
pub const EXTRA_WORDS: [&str; 8] = [
    "happy", "anger", "fear", "sorrow", "calm", "excited", "bored", "shock",
];

const FIXTURE_SEED: u64 = 0x5eed_e0b1;

/// Deterministic 90-word vocabulary (the emoji words, then the extras)
/// with standard-normal components. Stands in for the pretrained model.
pub fn fixture_vocabulary(dim: usize) -> Vocabulary {
    let mut rng = Rng::new(FIXTURE_SEED).substream("fixture-embeddings");
    let mut vocab = Vocabulary::new(dim);
    for word in EMOJI_WORDS.iter().chain(EXTRA_WORDS.iter()) {
        let v = (0..dim).map(|_| rng.normal() as f32).collect();
        vocab.push(*word, v).expect("fixture words are unique");
    }
    vocab
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture_bytes() -> Vec<u8> {
        let mut b = b"2 3\n".to_vec();
        b.extend_from_slice(b"smile ");
        for v in [1f32, 0.0, 0.0] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(b"\nangry ");
        for v in [0f32, 1.0, 0.0] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.push(b'\n');
        b
    }

    #[test]
    fn loads_constructed_fixture() {
        let v = Vocabulary::read_word2vec(&fixture_bytes()[..], None).unwrap();
        assert_eq!((v.len(), v.dim()), (2, 3));
        assert_eq!(v.lookup("angry").unwrap().vector, vec![0.0, 1.0, 0.0]);
        assert_eq!(v.words().collect::<Vec<_>>(), ["smile", "angry"]);
    }

    #[test]
    fn loads_without_trailing_newlines() {
        let mut b = b"2 1\n".to_vec();
        b.extend_from_slice(b"a ");
        b.extend_from_slice(&1f32.to_le_bytes());
        b.extend_from_slice(b"b ");
        b.extend_from_slice(&2f32.to_le_bytes());
        let v = Vocabulary::read_word2vec(&b[..], None).unwrap();
        assert_eq!(v.lookup("b").unwrap().vector, vec![2.0]);
    }

    #[test]
    fn allow_list_filters() {
        let allow: HashSet<String> = ["nothing".to_string()].into();
        let v = Vocabulary::read_word2vec(&fixture_bytes()[..], Some(&allow)).unwrap();
        assert!(v.is_empty());
        assert_eq!(v.dim(), 3);
        let allow: HashSet<String> = ["angry".to_string()].into();
        let v = Vocabulary::read_word2vec(&fixture_bytes()[..], Some(&allow)).unwrap();
        assert_eq!(v.words().collect::<Vec<_>>(), ["angry"]);
    }

    #[test]
    fn truncated_record_names_offset() {
        let bytes = fixture_bytes();
        // drop the trailing newline and the last 4 value bytes
        let cut = &bytes[..bytes.len() - 5];
        let err = Vocabulary::read_word2vec(cut, None).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 4 + 6 + 12 + 1 + 6),
            other => panic!("unexpected {other}"),
        }
        assert!(err_to_string(cut).contains("byte 29"));
    }

    fn err_to_string(bytes: &[u8]) -> String {
        Vocabulary::read_word2vec(bytes, None).unwrap_err().to_string()
    }

    #[test]
    fn malformed_header_and_duplicates() {
        assert!(matches!(
            Vocabulary::read_word2vec(&b"two 3\n"[..], None),
            Err(Error::Format { .. })
        ));
        assert!(Vocabulary::read_word2vec(&b"2\n"[..], None).is_err());
        let mut b = b"2 1\n".to_vec();
        for _ in 0..2 {
            b.extend_from_slice(b"dup ");
            b.extend_from_slice(&1f32.to_le_bytes());
        }
        assert!(matches!(
            Vocabulary::read_word2vec(&b[..], None),
            Err(Error::DuplicateWord(_))
        ));
    }

    #[test]
    fn write_then_load_is_byte_identical() {
        let v = Vocabulary::read_word2vec(&fixture_bytes()[..], None).unwrap();
        let mut out = Vec::new();
        v.write_word2vec(&mut out).unwrap();
        assert_eq!(out, fixture_bytes());

        let fixture = fixture_vocabulary(300);
        let mut a = Vec::new();
        fixture.write_word2vec(&mut a).unwrap();
        let again = Vocabulary::read_word2vec(&a[..], None).unwrap();
        let mut b = Vec::new();
        again.write_word2vec(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fixture_has_ninety_unique_words() {
        let v = fixture_vocabulary(300);
        assert_eq!(v.len(), 90);
        assert_eq!(v.dim(), 300);
        assert_eq!(v.words().next(), Some("smile"));
        assert_eq!(fixture_vocabulary(300).lookup("joy").unwrap(), v.lookup("joy").unwrap());
    }

    fn emb(v: &[f32]) -> WordEmbedding {
        WordEmbedding {
            word: "w".into(),
            vector: v.to_vec(),
        }
    }

    #[test]
    fn averaging() {
        let v = emb(&[1.0, -2.0, 3.5]);
        assert_eq!(average_vectors(&v, &v).unwrap(), v.vector);
        let neg = emb(&[-1.0, 2.0, -3.5]);
        assert_eq!(average_vectors(&v, &neg).unwrap(), vec![0.0; 3]);
        let a = average_vectors(&emb(&[1.0, 0.0, 0.0]), &emb(&[0.0, 1.0, 0.0])).unwrap();
        assert_eq!(a, vec![0.5, 0.5, 0.0]);
        assert!(average_vectors(&v, &emb(&[1.0])).is_err());
    }

    #[test]
    fn cosine() {
        let v = [0.3f32, -1.2, 2.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let n: Vec<f32> = v.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&v, &n).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[0.0, 0.0], &[0.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn average_is_commutative(a in prop::collection::vec(-1e3f32..1e3, 5), b in prop::collection::vec(-1e3f32..1e3, 5)) {
            prop_assert_eq!(average_vectors(&emb(&a), &emb(&b)).unwrap(), average_vectors(&emb(&b), &emb(&a)).unwrap());
        }
    }
}
