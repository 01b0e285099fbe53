//! Corpus loading, validation splits, low-resource down-sampling and split manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{sbio_to_spans, spans_to_sbio, Span, Tag, TaggedSequence};
use crate::error::{Error, Result};

/// Fraction of the original training partition carved out as validation data
/// when a corpus ships without one.
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.1;

/// The training-data fractions of the low-resource protocol.
pub const LOW_RESOURCE_FRACTIONS: [f64; 3] = [1.0, 0.2, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    /// `token<TAB>BIO-tag` rows, blank line between sentences.
    ConllTsv,
    /// One JSON object per line: `{"tokens": [..], "spans": [{"start", "end", "label"}]}`
    /// or `{"tokens": [..], "tags": [BIO tags]}`.
    JsonLines,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conll_tsv" | "conll" | "tsv" => Ok(Self::ConllTsv),
            "json_lines" | "jsonl" => Ok(Self::JsonLines),
            other => Err(Error::config("format", format!("unknown corpus format {other:?}"))),
        }
    }
}

impl CorpusFormat {
    /// Guesses from the file extension, defaulting to CoNLL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Self::JsonLines,
            _ => Self::ConllTsv,
        }
    }
}

/// A BIO inconsistency that was repaired while loading.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationWarning {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for AnnotationWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadedCorpus {
    pub sequences: Vec<TaggedSequence>,
    pub warnings: Vec<AnnotationWarning>,
}

pub fn load_corpus(path: &Path, format: CorpusFormat, task: &str) -> Result<LoadedCorpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        CorpusFormat::ConllTsv => parse_conll(&text, path, task),
        CorpusFormat::JsonLines => parse_json_lines(&text, path, task),
    }
}

/// Tracks the open span while converting BIO to sBIO.
struct BioConverter {
    open: Option<String>,
}

impl BioConverter {
    fn new() -> Self {
        Self { open: None }
    }

    fn push(&mut self, raw: &str, line: usize, warnings: &mut Vec<AnnotationWarning>) -> std::result::Result<Tag, String> {
        if raw == "O" {
            self.open = None;
            return Ok(Tag::Outside);
        }
        let (prefix, label) = raw
            .split_once('-')
            .ok_or_else(|| format!("tag {raw:?} is neither O nor B-X / I-X"))?;
        if label.is_empty() || label.chars().any(char::is_whitespace) {
            return Err(format!("tag {raw:?} has an empty or malformed type"));
        }
        match prefix {
            "B" => {
                self.open = Some(label.to_string());
                Ok(Tag::Type(label.to_string()))
            }
            "I" if self.open.as_deref() == Some(label) => Ok(Tag::Inside),
            "I" => {
                warnings.push(AnnotationWarning {
                    line,
                    message: match &self.open {
                        Some(open) => format!("I-{label} continues a {open} span; starting a new {label} span"),
                        None => format!("I-{label} without an open span; starting a new {label} span"),
                    },
                });
                self.open = Some(label.to_string());
                Ok(Tag::Type(label.to_string()))
            }
            _ => Err(format!("tag {raw:?} has unknown prefix {prefix:?}")),
        }
    }
}

pub fn parse_conll(text: &str, path: &Path, task: &str) -> Result<LoadedCorpus> {
    let mut out = LoadedCorpus::default();
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    let mut conv = BioConverter::new();
    let parse_err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };

    let flush = |tokens: &mut Vec<String>, labels: &mut Vec<Tag>, conv: &mut BioConverter, out: &mut LoadedCorpus| {
        if !tokens.is_empty() {
            let seq = TaggedSequence::new(std::mem::take(tokens), std::mem::take(labels), task);
            out.sequences.push(seq.expect("tokens validated while parsing"));
        }
        conv.open = None;
    };

    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            flush(&mut tokens, &mut labels, &mut conv, &mut out);
            continue;
        }
        if trimmed.starts_with("-DOCSTART-") {
            continue;
        }
        let fields: Vec<&str> = if line.contains('\t') {
            line.trim_end_matches(['\r', '\n']).split('\t').collect()
        } else {
            trimmed.split_whitespace().collect()
        };
        let [token, tag] = fields.as_slice() else {
            return Err(parse_err(lineno, format!("expected 2 columns, found {}", fields.len())));
        };
        let token = token.trim();
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(parse_err(lineno, format!("token {token:?} is empty or contains whitespace")));
        }
        let tag = conv
            .push(tag.trim(), lineno, &mut out.warnings)
            .map_err(|m| parse_err(lineno, m))?;
        tokens.push(token.to_string());
        labels.push(tag);
    }
    flush(&mut tokens, &mut labels, &mut conv, &mut out);
    Ok(out)
}

#[derive(Deserialize)]
struct JsonExample {
    tokens: Vec<String>,
    #[serde(default)]
    spans: Option<Vec<Span>>,
    #[serde(default)]
    tags: Option<Vec<String>>,
}

pub fn parse_json_lines(text: &str, path: &Path, task: &str) -> Result<LoadedCorpus> {
    let mut out = LoadedCorpus::default();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), line: lineno, message };
        let ex: JsonExample = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let labels = match (ex.spans, ex.tags) {
            (Some(spans), None) => spans_to_sbio(&spans, ex.tokens.len()).map_err(|e| parse_err(e.to_string()))?,
            (None, Some(tags)) => {
                if tags.len() != ex.tokens.len() {
                    return Err(parse_err(format!("{} tokens but {} tags", ex.tokens.len(), tags.len())));
                }
                let mut conv = BioConverter::new();
                tags.iter()
                    .map(|t| conv.push(t, lineno, &mut out.warnings))
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(parse_err)?
            }
            (None, None) => vec![Tag::Outside; ex.tokens.len()],
            (Some(_), Some(_)) => return Err(parse_err("give either `spans` or `tags`, not both".into())),
        };
        let seq = TaggedSequence::new(ex.tokens, labels, task).map_err(|e| parse_err(e.to_string()))?;
        out.sequences.push(seq);
    }
    Ok(out)
}

/// Renders sequences as CoNLL rows with standard BIO tags.
pub fn to_conll(seqs: &[TaggedSequence]) -> String {
    let mut out = String::new();
    for seq in seqs {
        let mut bio = vec!["O".to_string(); seq.len()];
        for span in sbio_to_spans(&seq.labels) {
            bio[span.start] = format!("B-{}", span.label);
            for b in &mut bio[span.start + 1..span.end] {
                *b = format!("I-{}", span.label);
            }
        }
        for (tok, tag) in seq.tokens.iter().zip(&bio) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(tag);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// `round(fraction * n)` with halves rounded up.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 0.5).floor() as usize
}

/// Per-task seed so that tasks sampled under one run seed draw independent subsets.
pub fn task_seed(seed: u64, task: &str) -> u64 {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(task.as_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// `k` of `0..n` uniformly without replacement, ascending.
pub fn sample_sorted(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

fn complement(n: usize, chosen: &[usize]) -> Vec<usize> {
    let set: BTreeSet<usize> = chosen.iter().copied().collect();
    (0..n).filter(|i| !set.contains(i)).collect()
}

fn pick<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// Carves a validation subset out of `train`. Returns `(train', val, val_indices)`.
pub fn make_validation_split(
    train: &[TaggedSequence],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<TaggedSequence>, Vec<TaggedSequence>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config("validation_fraction", format!("must lie in (0, 1), got {fraction}")));
    }
    let n = train.len();
    let k = fraction_count(fraction, n);
    if k == 0 || k >= n {
        return Err(Error::config(
            "validation_fraction",
            format!("{fraction} of {n} examples leaves an empty train or validation set"),
        ));
    }
    let val_idx = sample_sorted(n, k, seed);
    let train_idx = complement(n, &val_idx);
    Ok((pick(train, &train_idx), pick(train, &val_idx), val_idx))
}

/// Train/validation/test partitions of one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSplit {
    pub task: String,
    pub train: Vec<TaggedSequence>,
    pub val: Vec<TaggedSequence>,
    pub test: Vec<TaggedSequence>,
}

impl CorpusSplit {
    pub fn label_set(&self) -> BTreeSet<String> {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .flat_map(|s| s.labels.iter().filter_map(|t| t.type_name().map(str::to_string)))
            .collect()
    }
}

/// Indices chosen by [`downsample`], relative to the input split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DownsampleIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Shrinks train and validation to `round(fraction * N)` each; test is untouched.
pub fn downsample(split: &CorpusSplit, fraction: f64, seed: u64) -> Result<(CorpusSplit, DownsampleIndices)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("fraction", format!("must lie in (0, 1], got {fraction}")));
    }
    let task_seed = task_seed(seed, &split.task);
    let (train_idx, val_idx) = if fraction == 1.0 {
        ((0..split.train.len()).collect(), (0..split.val.len()).collect())
    } else {
        (
            sample_sorted(split.train.len(), fraction_count(fraction, split.train.len()), task_seed),
            sample_sorted(split.val.len(), fraction_count(fraction, split.val.len()), task_seed.wrapping_add(1)),
        )
    };
    if train_idx.is_empty() {
        return Err(Error::config(
            "fraction",
            format!("{fraction} of {} leaves task {} without training data", split.train.len(), split.task),
        ));
    }
    let out = CorpusSplit {
        task: split.task.clone(),
        train: pick(&split.train, &train_idx),
        val: pick(&split.val, &val_idx),
        test: split.test.clone(),
    };
    Ok((out, DownsampleIndices { train: train_idx, val: val_idx }))
}

/// Per-task statistics; `task_index` follows lexicographic task order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub name: String,
    pub label_set: BTreeSet<String>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub task_index: usize,
    pub sampling_weight: f64,
}

pub fn corpus_stats(splits: &BTreeMap<String, CorpusSplit>) -> Vec<TaskDescriptor> {
    splits
        .iter()
        .enumerate()
        .map(|(task_index, (name, split))| TaskDescriptor {
            name: name.clone(),
            label_set: split.label_set(),
            n_train: split.train.len(),
            n_val: split.val.len(),
            n_test: split.test.len(),
            task_index,
            sampling_weight: 1.0,
        })
        .collect()
}

/// Where a task's raw partitions live on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSource {
    pub name: String,
    pub train: PathBuf,
    /// Absent for corpora whose validation set is carved from training data.
    #[serde(default)]
    pub val: Option<PathBuf>,
    pub test: PathBuf,
    #[serde(default)]
    pub format: Option<CorpusFormat>,
}

impl TaskSource {
    pub fn paths(&self) -> Vec<&Path> {
        let mut v = vec![self.train.as_path()];
        if let Some(val) = &self.val {
            v.push(val);
        }
        v.push(&self.test);
        v
    }

    fn format_for(&self, path: &Path) -> CorpusFormat {
        self.format.unwrap_or_else(|| CorpusFormat::from_path(path))
    }
}

/// Raw partitions as read from disk.
#[derive(Debug, Clone)]
pub struct RawTask {
    pub name: String,
    pub train: Vec<TaggedSequence>,
    pub val: Option<Vec<TaggedSequence>>,
    pub test: Vec<TaggedSequence>,
    pub warnings: Vec<AnnotationWarning>,
}

pub fn load_task(source: &TaskSource) -> Result<RawTask> {
    let missing: Vec<PathBuf> = source.paths().into_iter().filter(|p| !p.exists()).map(Path::to_path_buf).collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let mut warnings = Vec::new();
    let mut load = |p: &Path| -> Result<Vec<TaggedSequence>> {
        let loaded = load_corpus(p, source.format_for(p), &source.name)?;
        warnings.extend(loaded.warnings);
        Ok(loaded.sequences)
    };
    let train = load(&source.train)?;
    let val = source.val.as_deref().map(&mut load).transpose()?;
    let test = load(&source.test)?;
    Ok(RawTask { name: source.name.clone(), train, val, test, warnings })
}

/// Everything needed to rebuild one task's split from its raw files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub task: String,
    pub seed: u64,
    pub fraction: f64,
    /// Set when validation data was sampled out of the raw training file.
    pub validation_fraction: Option<f64>,
    /// Indices into the raw training file.
    pub train_indices: Vec<usize>,
    /// Indices into the raw training file when carved, else into the raw validation file.
    pub val_indices: Vec<usize>,
    pub n_test: usize,
}

/// Applies the full data protocol: carve validation if needed, then down-sample.
pub fn build_split(raw: &RawTask, fraction: f64, seed: u64) -> Result<(CorpusSplit, SplitManifest)> {
    let (base, base_train_idx, base_val_idx, validation_fraction) = match &raw.val {
        Some(val) => (
            CorpusSplit { task: raw.name.clone(), train: raw.train.clone(), val: val.clone(), test: raw.test.clone() },
            (0..raw.train.len()).collect::<Vec<_>>(),
            (0..val.len()).collect::<Vec<_>>(),
            None,
        ),
        None => {
            let (train, val, val_idx) =
                make_validation_split(&raw.train, DEFAULT_VALIDATION_FRACTION, task_seed(seed, &raw.name))?;
            let train_idx = complement(raw.train.len(), &val_idx);
            (
                CorpusSplit { task: raw.name.clone(), train, val, test: raw.test.clone() },
                train_idx,
                val_idx,
                Some(DEFAULT_VALIDATION_FRACTION),
            )
        }
    };
    let (split, picked) = downsample(&base, fraction, seed)?;
    let manifest = SplitManifest {
        task: raw.name.clone(),
        seed,
        fraction,
        validation_fraction,
        train_indices: picked.train.iter().map(|&i| base_train_idx[i]).collect(),
        val_indices: picked.val.iter().map(|&i| base_val_idx[i]).collect(),
        n_test: split.test.len(),
    };
    Ok((split, manifest))
}

/// Rebuilds a split from raw partitions and a manifest.
pub fn apply_manifest(raw: &RawTask, manifest: &SplitManifest) -> Result<CorpusSplit> {
    let check = |idx: &[usize], n: usize, what: &'static str| -> Result<()> {
        match idx.iter().find(|&&i| i >= n) {
            Some(&bad) => Err(Error::Index { what, index: bad, bound: n }),
            None => Ok(()),
        }
    };
    check(&manifest.train_indices, raw.train.len(), "manifest train")?;
    let val_source = match (&raw.val, manifest.validation_fraction) {
        (_, Some(_)) => &raw.train,
        (Some(val), None) => val,
        (None, None) => return Err(Error::InvalidInput(format!("task {} has no validation source", raw.name))),
    };
    check(&manifest.val_indices, val_source.len(), "manifest val")?;
    if manifest.n_test != raw.test.len() {
        return Err(Error::InvalidInput(format!(
            "manifest expects {} test examples, found {}",
            manifest.n_test,
            raw.test.len()
        )));
    }
    Ok(CorpusSplit {
        task: raw.name.clone(),
        train: pick(&raw.train, &manifest.train_indices),
        val: pick(val_source, &manifest.val_indices),
        test: raw.test.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::parse_tags;

    fn synthetic(n: usize, task: &str) -> Vec<TaggedSequence> {
        (0..n)
            .map(|i| TaggedSequence::new(vec![format!("w{i}"), "x".into()], parse_tags("A O").unwrap(), task).unwrap())
            .collect()
    }

    #[test]
    fn conll_bio_to_sbio() {
        let text = "play\tO\nthe\tO\nsong\tB-MUSIC_ITEM\n\nlittle\tB-TRACK\nrobin\tI-TRACK\n";
        let c = parse_conll(text, Path::new("x.tsv"), "snips").unwrap();
        assert_eq!(c.sequences.len(), 2);
        assert_eq!(c.sequences[0].labels, parse_tags("O O MUSIC_ITEM").unwrap());
        assert_eq!(c.sequences[1].labels, parse_tags("TRACK I").unwrap());
        assert!(c.warnings.is_empty());
    }

    #[test]
    fn conll_errors_carry_line_numbers() {
        let err = parse_conll("a\tO\nb\tO\textra\n", Path::new("f.tsv"), "t").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_conll("a\tO\n\nb\tX-FOO\n", Path::new("f.tsv"), "t").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn inconsistent_inside_is_coerced_with_warning() {
        let c = parse_conll("a\tI-X\nb\tB-Y\nc\tI-X\nd\tI-X\n", Path::new("f"), "t").unwrap();
        assert_eq!(c.sequences[0].labels, parse_tags("X Y X I").unwrap());
        assert_eq!(c.warnings.len(), 2);
        assert_eq!(c.warnings[0].line, 1);
    }

    #[test]
    fn json_lines_spans_and_tags() {
        let text = r#"{"tokens":["a","b","c"],"spans":[{"start":1,"end":3,"label":"X"}]}
{"tokens":["d","e"],"tags":["B-Y","I-Y"]}"#;
        let c = parse_json_lines(text, Path::new("f.jsonl"), "t").unwrap();
        assert_eq!(c.sequences[0].labels, parse_tags("O X I").unwrap());
        assert_eq!(c.sequences[1].labels, parse_tags("Y I").unwrap());
        let err = parse_json_lines("{\"tokens\":[\"a\"],\"tags\":[]}", Path::new("f"), "t").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn conll_roundtrip_through_writer() {
        let text = "play\tO\nsong\tB-MUSIC_ITEM\nlittle\tB-TRACK\nrobin\tI-TRACK\n\n";
        let c = parse_conll(text, Path::new("x"), "t").unwrap();
        assert_eq!(to_conll(&c.sequences), text);
    }

    #[test]
    fn validation_split_sizes_and_partition() {
        let data = synthetic(100, "t");
        let (train, val, idx) = make_validation_split(&data, 0.1, 7).unwrap();
        assert_eq!((train.len(), val.len()), (90, 10));
        let again = make_validation_split(&data, 0.1, 7).unwrap();
        assert_eq!(again.2, idx);
        let mut all: Vec<String> = train.iter().chain(&val).map(|s| s.tokens[0].clone()).collect();
        all.sort();
        let mut want: Vec<String> = data.iter().map(|s| s.tokens[0].clone()).collect();
        want.sort();
        assert_eq!(all, want);
        let other = make_validation_split(&data, 0.1, 8).unwrap();
        assert_ne!(other.2, idx);
    }

    #[test]
    fn validation_split_rejects_degenerate() {
        let data = synthetic(3, "t");
        assert!(matches!(make_validation_split(&data, 0.1, 1), Err(Error::Config { .. })));
        assert!(matches!(make_validation_split(&data, 1.0, 1), Err(Error::Config { .. })));
        assert!(matches!(make_validation_split(&data, 0.9, 1), Err(Error::Config { .. })));
    }

    #[test]
    fn rounding_matches_reference_partition_sizes() {
        assert_eq!(fraction_count(0.1, 9775), 978);
        assert_eq!(9775 - fraction_count(0.1, 9775), 8797);
        assert_eq!(fraction_count(0.1, 4478), 448);
        assert_eq!(fraction_count(0.2, 4478), 896);
    }

    #[test]
    fn downsample_identity_and_test_untouched() {
        let split = CorpusSplit { task: "t".into(), train: synthetic(40, "t"), val: synthetic(10, "t"), test: synthetic(7, "t") };
        let (same, _) = downsample(&split, 1.0, 3).unwrap();
        assert_eq!(same, split);
        let (small, idx) = downsample(&split, 0.1, 3).unwrap();
        assert_eq!(small.train.len(), 4);
        assert_eq!(small.val.len(), 1);
        assert_eq!(small.test, split.test);
        assert_eq!(idx.train.len(), 4);
        assert!(downsample(&split, 0.0, 3).is_err());
        let tiny = CorpusSplit { train: synthetic(2, "t"), ..split.clone() };
        assert!(matches!(downsample(&tiny, 0.1, 3), Err(Error::Config { .. })));
    }

    #[test]
    fn tasks_sample_independently() {
        let a = CorpusSplit { task: "a".into(), train: synthetic(200, "a"), val: vec![], test: vec![] };
        let b = CorpusSplit { task: "b".into(), ..a.clone() };
        let (_, ia) = downsample(&a, 0.1, 5).unwrap();
        let (_, ib) = downsample(&b, 0.1, 5).unwrap();
        assert_ne!(ia.train, ib.train);
    }

    #[test]
    fn stats_count_and_index_lexicographically() {
        let mut splits = BTreeMap::new();
        splits.insert("zeta".to_string(), CorpusSplit { task: "zeta".into(), train: synthetic(10, "zeta"), val: vec![], test: vec![] });
        splits.insert("alpha".to_string(), CorpusSplit { task: "alpha".into(), train: synthetic(3, "alpha"), val: synthetic(1, "alpha"), test: vec![] });
        let stats = corpus_stats(&splits);
        assert_eq!(stats[0].name, "alpha");
        assert_eq!(stats[0].task_index, 0);
        assert_eq!(stats[1].task_index, 1);
        assert_eq!(stats[1].n_train, 10);
        assert_eq!(stats.iter().map(|d| d.n_train).sum::<usize>(), 13);
        assert_eq!(stats[0].label_set, ["A".to_string()].into());
    }

    #[test]
    fn manifest_rebuilds_split() {
        let raw = RawTask { name: "mit".into(), train: synthetic(50, "mit"), val: None, test: synthetic(5, "mit"), warnings: vec![] };
        let (split, manifest) = build_split(&raw, 0.2, 11).unwrap();
        assert_eq!(split.train.len(), 9); // 45 * 0.2
        assert_eq!(split.val.len(), 1);
        assert_eq!(apply_manifest(&raw, &manifest).unwrap(), split);
        let train_set: BTreeSet<_> = manifest.train_indices.iter().collect();
        assert!(manifest.val_indices.iter().all(|i| !train_set.contains(i)));
    }
}
