//! Tokenizers, document split, packed token streams and window extraction.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, domain_err, Result};

/// Text to id mapping with a dedicated end-of-text id.
pub trait Tokenizer {
    fn name(&self) -> &str;
    fn vocab_size(&self) -> usize;
    fn eot_id(&self) -> usize;
    fn encode(&self, text: &str) -> Vec<usize>;
    /// Raw bytes of one id; empty for end-of-text.
    fn token_bytes(&self, id: usize) -> Vec<u8>;

    fn decode(&self, ids: &[usize]) -> String {
        let bytes: Vec<u8> = ids.iter().flat_map(|&id| self.token_bytes(id)).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Printable form of one id for traces.
    fn token_text(&self, id: usize) -> String {
        if id == self.eot_id() {
            "<|endoftext|>".to_string()
        } else {
            String::from_utf8_lossy(&self.token_bytes(id)).into_owned()
        }
    }
}

/// Ids 0..=255 are raw bytes, 256 is end-of-text.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

pub const BYTE_EOT: usize = 256;
pub const BYTE_VOCAB: usize = 257;

impl Tokenizer for ByteTokenizer {
    fn name(&self) -> &str {
        "byte"
    }

    fn vocab_size(&self) -> usize {
        BYTE_VOCAB
    }

    fn eot_id(&self) -> usize {
        BYTE_EOT
    }

    fn encode(&self, text: &str) -> Vec<usize> {
        text.bytes().map(usize::from).collect()
    }

    fn token_bytes(&self, id: usize) -> Vec<u8> {
        if id < 256 {
            vec![id as u8]
        } else {
            Vec::new()
        }
    }
}

/// Greedy longest-match tokenizer over a vocabulary file.
///
/// The file is a JSON array of strings. Ids 0..=255 are always the single
/// bytes, listed multi-byte pieces follow in file order, and end-of-text is
/// the last id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabTokenizer {
    name: String,
    pieces: Vec<Vec<u8>>,
    lookup: HashMap<Vec<u8>, usize>,
    max_len: usize,
}

impl VocabTokenizer {
    pub fn new(name: &str, pieces: &[String]) -> Result<Self> {
        let mut all: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut lookup: HashMap<Vec<u8>, usize> = all
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        for piece in pieces {
            let bytes = piece.as_bytes().to_vec();
            if bytes.len() < 2 || lookup.contains_key(&bytes) {
                continue;
            }
            lookup.insert(bytes.clone(), all.len());
            all.push(bytes);
        }
        if all.len() + 1 > 1 << 16 {
            return Err(config_err!(
                "vocabulary of {} ids does not fit 16-bit storage",
                all.len() + 1
            ));
        }
        let max_len = all.iter().map(Vec::len).max().unwrap_or(1);
        Ok(Self {
            name: name.to_string(),
            pieces: all,
            lookup,
            max_len,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let pieces: Vec<String> = serde_json::from_str(&fs::read_to_string(path)?)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "vocab".into());
        Self::new(&format!("vocab:{name}"), &pieces)
    }
}

impl Tokenizer for VocabTokenizer {
    fn name(&self) -> &str {
        &self.name
    }

    fn vocab_size(&self) -> usize {
        self.pieces.len() + 1
    }

    fn eot_id(&self) -> usize {
        self.pieces.len()
    }

    fn encode(&self, text: &str) -> Vec<usize> {
        let bytes = text.as_bytes();
        let mut out = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            let longest = self.max_len.min(bytes.len() - i);
            let (id, len) = (1..=longest)
                .rev()
                .find_map(|len| self.lookup.get(&bytes[i..i + len]).map(|&id| (id, len)))
                .expect("single bytes are always present");
            out.push(id);
            i += len;
        }
        out
    }

    fn token_bytes(&self, id: usize) -> Vec<u8> {
        self.pieces.get(id).cloned().unwrap_or_default()
    }
}

/// Sidecar metadata of a stream file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub vocab_size: usize,
    pub eot_id: usize,
    pub token_count: usize,
    pub tokenizer_name: String,
}

/// Packed token ids, stored as 16-bit values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenWindowStream {
    ids: Vec<u16>,
    pub vocab_size: usize,
    pub eot_id: usize,
    pub tokenizer_name: String,
}

impl TokenWindowStream {
    pub fn from_ids(ids: &[usize], vocab_size: usize, eot_id: usize, name: &str) -> Result<Self> {
        if vocab_size > 1 << 16 {
            return Err(config_err!(
                "vocabulary of {vocab_size} ids does not fit 16 bits"
            ));
        }
        let mut packed = Vec::with_capacity(ids.len());
        for &id in ids {
            if id >= vocab_size {
                return Err(config_err!(
                    "token id {id} outside vocabulary of {vocab_size}"
                ));
            }
            packed.push(id as u16);
        }
        Ok(Self {
            ids: packed,
            vocab_size,
            eot_id,
            tokenizer_name: name.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn to_usize(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| usize::from(i)).collect()
    }

    /// `⌊(N − 1) / T⌋`: each window needs one extra token for its target.
    pub fn window_count(&self, seq: usize) -> usize {
        if seq == 0 || self.ids.is_empty() {
            return 0;
        }
        (self.ids.len() - 1) / seq
    }

    /// Input `ids[iT..iT+T)` and target `ids[iT+1..iT+T]`.
    pub fn get_window(&self, i: usize, seq: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let n = self.window_count(seq);
        if i >= n {
            return Err(domain_err!(
                "window {i} out of range ({n} windows of length {seq})"
            ));
        }
        let start = i * seq;
        let input = self.ids[start..start + seq]
            .iter()
            .map(|&x| x as usize)
            .collect();
        let target = self.ids[start + 1..start + seq + 1]
            .iter()
            .map(|&x| x as usize)
            .collect();
        Ok((input, target))
    }

    pub fn manifest(&self) -> StreamManifest {
        StreamManifest {
            vocab_size: self.vocab_size,
            eot_id: self.eot_id,
            token_count: self.ids.len(),
            tokenizer_name: self.tokenizer_name.clone(),
        }
    }

    /// Writes `<path>` (little-endian u16 ids) and `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.ids.len() * 2);
        for &id in &self.ids {
            bytes.extend_from_slice(&id.to_le_bytes());
        }
        fs::write(path, bytes)?;
        fs::write(
            manifest_path(path),
            serde_json::to_string_pretty(&self.manifest())?,
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest: StreamManifest =
            serde_json::from_str(&fs::read_to_string(manifest_path(path))?)?;
        let bytes = fs::read(path)?;
        if bytes.len() != manifest.token_count * 2 {
            return Err(config_err!(
                "stream {} holds {} bytes, manifest promises {} tokens",
                path.display(),
                bytes.len(),
                manifest.token_count
            ));
        }
        let ids: Vec<usize> = bytes
            .chunks_exact(2)
            .map(|c| usize::from(u16::from_le_bytes([c[0], c[1]])))
            .collect();
        Self::from_ids(
            &ids,
            manifest.vocab_size,
            manifest.eot_id,
            &manifest.tokenizer_name,
        )
    }

    /// Entropy in nats of the empirical id distribution; the loss of the
    /// best context-free predictor.
    pub fn unigram_entropy(&self) -> f64 {
        let mut counts = vec![0usize; self.vocab_size];
        for &id in &self.ids {
            counts[id as usize] += 1;
        }
        let n = self.ids.len() as f64;
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    }
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Each document's ids followed by end-of-text, concatenated.
pub fn tokenize_documents<S: AsRef<str>>(
    docs: &[S],
    tokenizer: &dyn Tokenizer,
) -> Result<TokenWindowStream> {
    let mut ids = Vec::new();
    for doc in docs {
        ids.extend(tokenizer.encode(doc.as_ref()));
        ids.push(tokenizer.eot_id());
    }
    TokenWindowStream::from_ids(
        &ids,
        tokenizer.vocab_size(),
        tokenizer.eot_id(),
        tokenizer.name(),
    )
}

/// Fraction of documents, in order, assigned to training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.95,
        }
    }
}

/// First `⌊f·D⌋` documents train, the rest validate.
pub fn split_documents<S: Clone>(docs: &[S], spec: SplitSpec) -> Result<(Vec<S>, Vec<S>)> {
    let f = spec.train_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(config_err!("train fraction must lie in (0, 1), got {f}"));
    }
    if docs.len() < 2 {
        return Err(config_err!(
            "need at least 2 documents to split, got {}",
            docs.len()
        ));
    }
    let n_train = (f * docs.len() as f64).floor() as usize;
    if n_train == 0 || n_train == docs.len() {
        return Err(config_err!(
            "split of {} documents at {f} leaves one side empty",
            docs.len()
        ));
    }
    Ok((docs[..n_train].to_vec(), docs[n_train..].to_vec()))
}

/// Reads UTF-8 documents from every regular file in `dir`, in file-name
/// order. With `blank_line_docs` each blank-line separated block of a file
/// becomes its own document.
pub fn read_documents(dir: &Path, blank_line_docs: bool) -> Result<Vec<String>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut docs = Vec::new();
    for file in files {
        let text = fs::read_to_string(&file)?;
        if blank_line_docs {
            let mut block = String::new();
            for line in text.lines() {
                if line.trim().is_empty() {
                    if !block.is_empty() {
                        docs.push(std::mem::take(&mut block));
                    }
                } else {
                    if !block.is_empty() {
                        block.push('\n');
                    }
                    block.push_str(line);
                }
            }
            if !block.is_empty() {
                docs.push(block);
            }
        } else {
            docs.push(text);
        }
    }
    Ok(docs)
}

const NOUNS: &[&str] = &[
    "river", "garden", "teacher", "window", "market", "forest", "engine", "letter", "village",
    "doctor", "bridge", "kitchen", "student", "mountain", "library", "farmer", "harbor", "painter",
    "castle", "station", "baker", "island", "soldier", "meadow", "captain", "lantern", "valley",
    "merchant", "tower", "child",
];
const ADJECTIVES: &[&str] = &[
    "old", "quiet", "bright", "small", "golden", "distant", "careful", "heavy", "gentle", "narrow",
    "ancient", "busy", "cold", "green", "hidden", "proud",
];
const VERBS: &[&str] = &[
    "watched",
    "found",
    "carried",
    "followed",
    "painted",
    "visited",
    "opened",
    "remembered",
    "crossed",
    "built",
    "described",
    "noticed",
    "repaired",
    "greeted",
];
const PLACES: &[&str] = &[
    "near the river",
    "in the morning",
    "after the storm",
    "across the valley",
    "before dinner",
    "under the bridge",
    "at the market",
    "during the winter",
];

fn pick<'a, R: Rng>(rng: &mut R, words: &[&'a str]) -> &'a str {
    words.choose(rng).copied().expect("nonempty word list")
}

fn sentence<R: Rng>(rng: &mut R) -> String {
    let subject = format!("the {} {}", pick(rng, ADJECTIVES), pick(rng, NOUNS));
    let object = if rng.gen_bool(0.5) {
        format!("the {}", pick(rng, NOUNS))
    } else {
        format!("a {} {}", pick(rng, ADJECTIVES), pick(rng, NOUNS))
    };
    let mut s = format!("{subject} {} {object}", pick(rng, VERBS));
    if rng.gen_bool(0.4) {
        s.push(' ');
        s.push_str(pick(rng, PLACES));
    }
    if rng.gen_bool(0.25) {
        s.push_str(&format!(
            " and the {} {}",
            pick(rng, NOUNS),
            pick(rng, VERBS)
        ));
        s.push_str(&format!(" the {}", pick(rng, NOUNS)));
    }
    let mut chars = s.chars();
    let first = chars.next().expect("nonempty").to_ascii_uppercase();
    format!("{first}{}.", chars.as_str())
}

/// Deterministic English-like documents totalling at least `target_bytes`.
/// Sentences follow a small grammar over a fixed word list, so the text has
/// real sub-word and word-order structure for a language model to learn.
pub fn synthetic_documents(seed: u64, target_bytes: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::new();
    let mut total = 0;
    while total < target_bytes {
        let n = rng.gen_range(4..12);
        let doc = (0..n)
            .map(|_| sentence(&mut rng))
            .collect::<Vec<_>>()
            .join(" ");
        total += doc.len() + 1;
        docs.push(doc);
    }
    docs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(docs: &[&str]) -> Vec<usize> {
        tokenize_documents(docs, &ByteTokenizer).unwrap().to_usize()
    }

    #[test]
    fn byte_stream_examples() {
        assert_eq!(ids(&["A"]), vec![65, 256]);
        assert_eq!(ids(&["", ""]), vec![256, 256]);
        assert_eq!(ids(&["ab", "c"]), vec![97, 98, 256, 99, 256]);
    }

    #[test]
    fn split_examples() {
        let docs: Vec<usize> = (0..100).collect();
        let (a, b) = split_documents(&docs, SplitSpec::default()).unwrap();
        assert_eq!((a.len(), b.len()), (95, 5));
        let (a, b) = split_documents(
            &docs[..2],
            SplitSpec {
                train_fraction: 0.5,
            },
        )
        .unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
        let (a, b) = split_documents(&docs[..21], SplitSpec::default()).unwrap();
        assert_eq!((a.len(), b.len()), (19, 2));
        let (a, b) = split_documents(&docs[..2], SplitSpec::default()).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
        assert!(split_documents(&docs[..1], SplitSpec::default()).is_err());
        assert!(split_documents(
            &docs[..10],
            SplitSpec {
                train_fraction: 0.05
            }
        )
        .is_err());
    }

    #[test]
    fn window_examples() {
        let seq: Vec<usize> = (0..10).collect();
        let s = TokenWindowStream::from_ids(&seq, 257, 256, "byte").unwrap();
        assert_eq!(
            s.get_window(0, 4).unwrap(),
            (vec![0, 1, 2, 3], vec![1, 2, 3, 4])
        );
        assert_eq!(
            s.get_window(1, 4).unwrap(),
            (vec![4, 5, 6, 7], vec![5, 6, 7, 8])
        );
        assert!(s.get_window(2, 4).is_err());
        let count = |n: usize, t: usize| {
            TokenWindowStream::from_ids(&vec![0; n], 257, 256, "byte")
                .unwrap()
                .window_count(t)
        };
        assert_eq!(count(2049, 1024), 2);
        assert_eq!(count(1024, 1024), 0);
        assert_eq!(count(1, 7), 0);
    }

    #[test]
    fn oversize_id_rejected() {
        assert!(TokenWindowStream::from_ids(&[70000], 70001, 0, "x").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.bin");
        let s = tokenize_documents(&["hello", "world"], &ByteTokenizer).unwrap();
        s.save(&path).unwrap();
        assert_eq!(TokenWindowStream::load(&path).unwrap(), s);
    }

    #[test]
    fn vocab_tokenizer_prefers_longest_piece() {
        let tok = VocabTokenizer::new("t", &["th".into(), "the".into(), " ".into()]).unwrap();
        assert_eq!(tok.vocab_size(), 259);
        let ids = tok.encode("the th");
        assert_eq!(ids, vec![257, 32, 256]);
        assert_eq!(tok.decode(&ids), "the th");
    }

    #[test]
    fn synthetic_corpus_is_deterministic() {
        let a = synthetic_documents(3, 5000);
        assert_eq!(a, synthetic_documents(3, 5000));
        assert!(a.iter().map(|d| d.len() + 1).sum::<usize>() >= 5000);
        assert!(a[0].ends_with('.'));
    }
}
