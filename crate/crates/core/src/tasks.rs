//! Synthetic decodable tasks (copy, key-value recall), byte-level text
//! ingestion, the token-level error metric, and the on-disk dataset format.

use crate::rng::{seeded, Stream};
use crate::{Error, Result};
use rand::Rng;

use std::io::{Read, Write};
use std::path::Path;

/// Token ids: data symbols live in 0..data_vocab, specials sit above them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerMode {
    /// 256 byte values plus specials.
    Byte,
    /// A configured symbol alphabet plus specials.
    Symbol { data_vocab: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tokenizer {
    pub mode: TokenizerMode,
}

impl Tokenizer {
    pub fn byte() -> Self {
        Tokenizer {
            mode: TokenizerMode::Byte,
        }
    }

    pub fn symbol(data_vocab: usize) -> Self {
        Tokenizer {
            mode: TokenizerMode::Symbol { data_vocab },
        }
    }

    pub fn data_vocab(&self) -> usize {
        match self.mode {
            TokenizerMode::Byte => 256,
            TokenizerMode::Symbol { data_vocab } => data_vocab,
        }
    }

    /// Total vocabulary including the four specials.
    pub fn vocab(&self) -> usize {
        self.data_vocab() + 4
    }

    pub fn bos(&self) -> u32 {
        self.data_vocab() as u32
    }

    pub fn sep(&self) -> u32 {
        self.data_vocab() as u32 + 1
    }

    pub fn eos(&self) -> u32 {
        self.data_vocab() as u32 + 2
    }

    pub fn pad(&self) -> u32 {
        self.data_vocab() as u32 + 3
    }

    pub fn mode_name(&self) -> &'static str {
        match self.mode {
            TokenizerMode::Byte => "byte",
            TokenizerMode::Symbol { .. } => "symbol",
        }
    }

    pub fn encode_bytes(&self, data: &[u8]) -> Vec<u32> {
        data.iter().map(|&b| b as u32).collect()
    }

    pub fn decode_bytes(&self, tokens: &[u32]) -> Result<Vec<u8>> {
        tokens
            .iter()
            .map(|&t| {
                if t < 256 {
                    Ok(t as u8)
                } else {
                    Err(Error::Task(format!("token {t} is not a byte")))
                }
            })
            .collect()
    }
}

/// One training/eval sample: the full token sequence and where the scored
/// span begins. Positions predicting tokens before `target_start` are
/// excluded from every loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<u32>,
    pub target_start: usize,
}

impl Sample {
    /// Prompt fed to the decoder when solving the task generatively.
    pub fn prompt(&self) -> &[u32] {
        &self.tokens[..self.target_start]
    }

    /// The reference answer span (includes the EOS for generated tasks).
    pub fn target(&self) -> &[u32] {
        &self.tokens[self.target_start..]
    }

    /// Next-token training pair: inputs, targets, and the scoring mask.
    pub fn training_view(&self) -> (&[u32], &[u32], Vec<bool>) {
        let n = self.tokens.len();
        let inputs = &self.tokens[..n - 1];
        let targets = &self.tokens[1..];
        let mask = (1..n).map(|j| j >= self.target_start).collect();
        (inputs, targets, mask)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskKind {
    /// Prompt BOS payload SEP, target payload EOS.
    Copy {
        payload_min: usize,
        payload_max: usize,
    },
    /// Prompt BOS k1 v1 ... kn vn SEP kq, target vq EOS.
    KvRecall {
        n_pairs: usize,
        n_keys: usize,
        n_values: usize,
    },
    /// Byte windows with next-token targets over a file.
    TextFile { path: String, context_len: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub samples: usize,
    pub seed: u64,
    /// Symbol alphabet size for the copy task.
    pub data_vocab: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tokenizer: Tokenizer,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn max_len(&self) -> usize {
        self.samples.iter().map(|s| s.tokens.len()).max().unwrap_or(0)
    }

    pub fn total_tokens(&self) -> usize {
        self.samples.iter().map(|s| s.tokens.len()).sum()
    }
}

/// Generate the dataset for a task spec. Pure function of (spec, stream).
pub fn generate(spec: &TaskSpec, stream: Stream) -> Result<Dataset> {
    match &spec.kind {
        TaskKind::Copy {
            payload_min,
            payload_max,
        } => gen_copy(spec, *payload_min, *payload_max, stream),
        TaskKind::KvRecall {
            n_pairs,
            n_keys,
            n_values,
        } => gen_kv_recall(spec, *n_pairs, *n_keys, *n_values, stream),
        TaskKind::TextFile { path, context_len } => load_text(Path::new(path), *context_len),
    }
}

fn gen_copy(
    spec: &TaskSpec,
    payload_min: usize,
    payload_max: usize,
    stream: Stream,
) -> Result<Dataset> {
    if payload_min < 1 || payload_max < payload_min {
        return Err(Error::Task(format!(
            "bad payload range {payload_min}..{payload_max}"
        )));
    }
    let tok = Tokenizer::symbol(spec.data_vocab);
    if spec.data_vocab < 2 {
        return Err(Error::Task("copy task needs at least 2 symbols".into()));
    }
    let mut rng = seeded(spec.seed, stream);
    let mut samples = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let len = rng.gen_range(payload_min..=payload_max);
        let payload: Vec<u32> = (0..len)
            .map(|_| rng.gen_range(0..spec.data_vocab as u32))
            .collect();
        let mut tokens = Vec::with_capacity(2 * len + 3);
        tokens.push(tok.bos());
        tokens.extend_from_slice(&payload);
        tokens.push(tok.sep());
        let target_start = tokens.len();
        tokens.extend_from_slice(&payload);
        tokens.push(tok.eos());
        samples.push(Sample {
            tokens,
            target_start,
        });
    }
    Ok(Dataset {
        tokenizer: tok,
        samples,
    })
}

fn gen_kv_recall(
    spec: &TaskSpec,
    n_pairs: usize,
    n_keys: usize,
    n_values: usize,
    stream: Stream,
) -> Result<Dataset> {
    if n_pairs < 1 {
        return Err(Error::Task("kv_recall needs at least one pair".into()));
    }
    if n_keys < n_pairs {
        return Err(Error::Task(format!(
            "key vocabulary {n_keys} too small for {n_pairs} unique keys"
        )));
    }
    // keys occupy 0..n_keys, values n_keys..n_keys+n_values
    let tok = Tokenizer::symbol(n_keys + n_values);
    let mut rng = seeded(spec.seed, stream);
    let mut samples = Vec::with_capacity(spec.samples);
    let mut keys: Vec<u32> = (0..n_keys as u32).collect();
    for _ in 0..spec.samples {
        crate::rng::shuffle(&mut rng, &mut keys);
        let mut tokens = vec![tok.bos()];
        let mut values = Vec::with_capacity(n_pairs);
        for &k in keys.iter().take(n_pairs) {
            let v = n_keys as u32 + rng.gen_range(0..n_values as u32);
            values.push(v);
            tokens.push(k);
            tokens.push(v);
        }
        let q = rng.gen_range(0..n_pairs);
        tokens.push(tok.sep());
        tokens.push(keys[q]);
        let target_start = tokens.len();
        tokens.push(values[q]);
        tokens.push(tok.eos());
        samples.push(Sample {
            tokens,
            target_start,
        });
    }
    Ok(Dataset {
        tokenizer: tok,
        samples,
    })
}

/// Byte-tokenize a file into fixed windows with next-token targets; the
/// remainder that does not fill a window is dropped.
pub fn load_text(path: &Path, context_len: usize) -> Result<Dataset> {
    if context_len < 2 {
        return Err(Error::Task("context_len must be at least 2".into()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 2 {
        return Err(Error::Task(format!(
            "file {} has {} bytes; need at least 2 for a next-token pair",
            path.display(),
            bytes.len()
        )));
    }
    let tok = Tokenizer::byte();
    let windows = (bytes.len() - 1) / context_len;
    if windows == 0 {
        return Err(Error::Task(format!(
            "file {} too short for context_len {context_len}",
            path.display()
        )));
    }
    let mut samples = Vec::with_capacity(windows);
    for w in 0..windows {
        // +1 so the window provides context_len next-token pairs
        let start = w * context_len;
        let tokens = tok.encode_bytes(&bytes[start..start + context_len + 1]);
        samples.push(Sample {
            tokens,
            target_start: 1,
        });
    }
    Ok(Dataset {
        tokenizer: tok,
        samples,
    })
}

/// Unit-cost edit distance and the derived error rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRate {
    pub edits: usize,
    pub reference_tokens: usize,
    pub rate: f64,
}

pub fn edit_distance(hyp: &[u32], reference: &[u32]) -> usize {
    let (n, m) = (hyp.len(), reference.len());
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Levenshtein distance normalized by reference length.
pub fn token_error_rate(hyp: &[u32], reference: &[u32]) -> Result<ErrorRate> {
    if reference.is_empty() {
        return Err(Error::Task("empty reference in token_error_rate".into()));
    }
    let edits = edit_distance(hyp, reference);
    Ok(ErrorRate {
        edits,
        reference_tokens: reference.len(),
        rate: edits as f64 / reference.len() as f64,
    })
}

/// Datasets cache to disk as length-prefixed little-endian u32 arrays:
/// magic, mode, count, then per sample (len, target_start, ids...).
const DATASET_MAGIC: u32 = 0x4D54_4453; // "MTDS"

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    let put = |buf: &mut Vec<u8>, v: u32| buf.extend_from_slice(&v.to_le_bytes());
    put(&mut buf, DATASET_MAGIC);
    match ds.tokenizer.mode {
        TokenizerMode::Byte => {
            put(&mut buf, 0);
            put(&mut buf, 256);
        }
        TokenizerMode::Symbol { data_vocab } => {
            put(&mut buf, 1);
            put(&mut buf, data_vocab as u32);
        }
    }
    put(&mut buf, ds.samples.len() as u32);
    for s in &ds.samples {
        put(&mut buf, s.tokens.len() as u32);
        put(&mut buf, s.target_start as u32);
        for &t in &s.tokens {
            put(&mut buf, t);
        }
    }
    write_atomic(path, &buf)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut off = 0usize;
    let mut take = |what: &str| -> Result<u32> {
        if off + 4 > bytes.len() {
            return Err(Error::Task(format!("dataset file truncated at {what}")));
        }
        let v = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        off += 4;
        Ok(v)
    };
    if take("magic")? != DATASET_MAGIC {
        return Err(Error::Task("not a dataset file (bad magic)".into()));
    }
    let mode = take("mode")?;
    let data_vocab = take("data_vocab")? as usize;
    let tokenizer = match mode {
        0 => Tokenizer::byte(),
        1 => Tokenizer::symbol(data_vocab),
        other => return Err(Error::Task(format!("unknown tokenizer mode {other}"))),
    };
    let count = take("count")? as usize;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let len = take("sample len")? as usize;
        let target_start = take("target_start")? as usize;
        let mut tokens = Vec::with_capacity(len);
        for _ in 0..len {
            tokens.push(take("token")?);
        }
        samples.push(Sample {
            tokens,
            target_start,
        });
    }
    Ok(Dataset { tokenizer, samples })
}

/// Write via a temp file in the same directory, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp.partial");
    {
        let mut f = std::fs::File::create(&tmp)
            .map_err(|e| Error::io(tmp.display().to_string(), e))?;
        f.write_all(bytes)
            .map_err(|e| Error::io(tmp.display().to_string(), e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn copy_spec(samples: usize, seed: u64) -> TaskSpec {
        TaskSpec {
            kind: TaskKind::Copy {
                payload_min: 3,
                payload_max: 3,
            },
            samples,
            seed,
            data_vocab: 8,
        }
    }

    #[test]
    fn copy_sample_structure() {
        let ds = generate(&copy_spec(4, 1), Stream::TrainData).unwrap();
        let tok = ds.tokenizer;
        for s in &ds.samples {
            // BOS a b c SEP | a b c EOS
            assert_eq!(s.tokens.len(), 9);
            assert_eq!(s.tokens[0], tok.bos());
            assert_eq!(s.tokens[4], tok.sep());
            assert_eq!(s.tokens[8], tok.eos());
            assert_eq!(s.target_start, 5);
            assert_eq!(&s.tokens[1..4], &s.tokens[5..8]);
            assert_eq!(s.prompt().len(), 5);
            assert_eq!(s.target().len(), 4);
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let a = generate(&copy_spec(16, 7), Stream::TrainData).unwrap();
        let b = generate(&copy_spec(16, 7), Stream::TrainData).unwrap();
        assert_eq!(a, b);
        let c = generate(&copy_spec(16, 8), Stream::TrainData).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn copy_payload_frequencies_near_uniform() {
        let spec = TaskSpec {
            kind: TaskKind::Copy {
                payload_min: 10,
                payload_max: 10,
            },
            samples: 10_000,
            seed: 3,
            data_vocab: 8,
        };
        let ds = generate(&spec, Stream::TrainData).unwrap();
        let mut counts = vec![0usize; 8];
        let mut total = 0usize;
        for s in &ds.samples {
            for &t in &s.tokens[1..11] {
                counts[t as usize] += 1;
                total += 1;
            }
        }
        // each symbol frequency within 3 sigma of uniform
        let p = 1.0 / 8.0;
        let sigma = (total as f64 * p * (1.0 - p)).sqrt();
        for (sym, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - total as f64 * p).abs();
            assert!(dev < 3.0 * sigma, "symbol {sym}: deviation {dev} > 3 sigma {sigma}");
        }
    }

    #[test]
    fn kv_recall_well_posed() {
        let spec = TaskSpec {
            kind: TaskKind::KvRecall {
                n_pairs: 4,
                n_keys: 8,
                n_values: 8,
            },
            samples: 200,
            seed: 5,
            data_vocab: 0,
        };
        let ds = generate(&spec, Stream::TrainData).unwrap();
        for s in &ds.samples {
            let tokens = &s.tokens;
            // BOS (k v)*4 SEP kq | vq EOS
            assert_eq!(tokens.len(), 1 + 8 + 2 + 2);
            let queried = tokens[10];
            let answer = tokens[11];
            // the queried key appears in the prompt with the target value
            let mut found = false;
            let mut keys_seen = Vec::new();
            for p in 0..4 {
                let k = tokens[1 + 2 * p];
                let v = tokens[2 + 2 * p];
                assert!(k < 8, "key out of range");
                assert!((8..16).contains(&v), "value out of range");
                keys_seen.push(k);
                if k == queried {
                    found = true;
                    assert_eq!(v, answer, "answer is the queried key's value");
                }
            }
            assert!(found, "queried key missing from prompt");
            keys_seen.sort_unstable();
            keys_seen.dedup();
            assert_eq!(keys_seen.len(), 4, "keys not unique");
        }
    }

    #[test]
    fn kv_recall_single_pair_and_small_vocab() {
        let spec = TaskSpec {
            kind: TaskKind::KvRecall {
                n_pairs: 1,
                n_keys: 4,
                n_values: 4,
            },
            samples: 50,
            seed: 6,
            data_vocab: 0,
        };
        let ds = generate(&spec, Stream::TrainData).unwrap();
        for s in &ds.samples {
            assert_eq!(s.tokens[2], s.tokens[s.target_start]);
            let _ = s;
        }
        let bad = TaskSpec {
            kind: TaskKind::KvRecall {
                n_pairs: 5,
                n_keys: 4,
                n_values: 4,
            },
            samples: 1,
            seed: 6,
            data_vocab: 0,
        };
        assert!(generate(&bad, Stream::TrainData).is_err());
    }

    #[test]
    fn kv_recall_value_marginal_chance_accuracy() {
        // a predictor drawing from the value marginal scores ~ 1/n_values
        let n_values = 8usize;
        let spec = TaskSpec {
            kind: TaskKind::KvRecall {
                n_pairs: 4,
                n_keys: 16,
                n_values,
            },
            samples: 20_000,
            seed: 9,
            data_vocab: 0,
        };
        let ds = generate(&spec, Stream::TrainData).unwrap();
        let mut rng = seeded(10, Stream::EvalData);
        let mut hits = 0usize;
        for s in &ds.samples {
            let guess = 16 + rng.gen_range(0..n_values as u32);
            if guess == s.tokens[s.target_start] {
                hits += 1;
            }
        }
        let acc = hits as f64 / ds.samples.len() as f64;
        let expect = 1.0 / n_values as f64;
        assert!(
            (acc - expect).abs() < 0.01,
            "chance accuracy {acc} vs {expect}"
        );
    }

    #[test]
    fn text_loading_windows_and_errors() {
        let dir = std::env::temp_dir().join("mtra_tasks_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("text.bin");
        std::fs::write(&p, b"hello world, hello tokens!").unwrap();
        // 26 bytes, context 8 -> floor(25/8) = 3 windows
        let ds = load_text(&p, 8).unwrap();
        assert_eq!(ds.samples.len(), 3);
        for s in &ds.samples {
            assert_eq!(s.tokens.len(), 9);
            assert_eq!(s.target_start, 1);
        }
        // round-trip: windows reassemble a prefix of the file
        let mut rebuilt = Vec::new();
        for (i, s) in ds.samples.iter().enumerate() {
            let bytes = ds.tokenizer.decode_bytes(&s.tokens).unwrap();
            rebuilt.extend_from_slice(if i == 0 { &bytes } else { &bytes[1..] });
        }
        assert_eq!(&rebuilt[..], &b"hello world, hello tokens"[..]);

        let one = dir.join("one.bin");
        std::fs::write(&one, b"x").unwrap();
        assert!(load_text(&one, 8).is_err());
        assert!(load_text(&dir.join("missing.bin"), 8).is_err());
    }

    #[test]
    fn edit_distance_cases() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        let r = token_error_rate(&[1, 2, 3], &[1, 2, 3]).unwrap();
        assert_eq!(r.rate, 0.0);
        // empty hypothesis: all deletions
        let r = token_error_rate(&[], &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(r.edits, 5);
        assert_eq!(r.rate, 1.0);
        // "a b c d" vs "a x c": one substitution + one insertion = 2 edits
        let r = token_error_rate(&[0, 1, 2, 3], &[0, 9, 2]).unwrap();
        assert_eq!(r.edits, 2);
        assert!((r.rate - 2.0 / 3.0).abs() < 1e-12);
        assert!(token_error_rate(&[1], &[]).is_err());
    }

    #[test]
    fn edit_distance_is_symmetric_and_triangular() {
        let mut rng = seeded(11, Stream::TrainData);
        for _ in 0..200 {
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<u32> {
                let n = rng.gen_range(0..10);
                (0..n).map(|_| rng.gen_range(0..4)).collect()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let c = mk(&mut rng);
            assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            assert!(
                edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c),
                "triangle inequality violated"
            );
        }
    }

    #[test]
    fn dataset_cache_roundtrip() {
        let ds = generate(&copy_spec(12, 13), Stream::TrainData).unwrap();
        let dir = std::env::temp_dir().join("mtra_tasks_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("cache.mtds");
        save_dataset(&ds, &p).unwrap();
        let back = load_dataset(&p).unwrap();
        assert_eq!(ds, back);
        // truncation is reported, not mis-parsed
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_dataset(&p).is_err());
    }
}
