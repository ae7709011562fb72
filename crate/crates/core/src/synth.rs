//! Paired synthetic tagging corpora with a known label correspondence.
//!
//! A set of proto-labels is shared by both "languages". Each proto-label
//! owns a block of latent signature words and a preferred offset from the
//! predicate. Sentences are generated over latent words, then rendered
//! through a per-language word renaming (disjoint surface vocabularies) and
//! a per-language label renaming.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::error::{ClarError, Result};
use crate::label_space::{Corpus, FrequencyTable, LabelId, Sentence};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_labels: usize,
    /// Latent vocabulary size: predicate words, signature words, fillers.
    pub vocab_size: usize,
    pub words_per_label: usize,
    pub predicate_words: usize,
    pub sentence_length: (usize, usize),
    pub max_arguments: usize,
    pub source_sentences: usize,
    pub target_sentences: usize,
    /// Held-out target sentences for early stopping and for scoring.
    pub dev_sentences: usize,
    pub test_sentences: usize,
    /// Proto-label index → source label index. When present the source
    /// side is coarse: several proto-labels share one source label while
    /// the target keeps them apart.
    pub label_merge_map: Option<Vec<usize>>,
    pub noise: f64,
    pub zipf_exponent: f64,
    pub seed: u64,
    pub source_language: String,
    pub target_language: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_labels: 12,
            vocab_size: 160,
            words_per_label: 8,
            predicate_words: 8,
            sentence_length: (6, 14),
            max_arguments: 4,
            source_sentences: 400,
            target_sentences: 100,
            dev_sentences: 100,
            test_sentences: 300,
            label_merge_map: None,
            noise: 0.05,
            zipf_exponent: 1.0,
            seed: 1,
            source_language: "src".into(),
            target_language: "tgt".into(),
        }
    }
}

impl SynthConfig {
    pub fn num_source_labels(&self) -> usize {
        match &self.label_merge_map {
            None => self.num_labels,
            Some(m) => m.iter().copied().max().map_or(0, |x| x + 1),
        }
    }

    fn filler_words(&self) -> usize {
        self.vocab_size.saturating_sub(self.predicate_words + self.num_labels * self.words_per_label)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ClarError::Config(m));
        if self.num_labels < 2 {
            return fail("num_labels must be at least 2".into());
        }
        if self.words_per_label == 0 || self.predicate_words == 0 {
            return fail("words_per_label and predicate_words must be at least 1".into());
        }
        if self.filler_words() == 0 {
            return fail(format!(
                "vocab_size {} leaves no filler words after {} predicate and {} signature words",
                self.vocab_size,
                self.predicate_words,
                self.num_labels * self.words_per_label
            ));
        }
        let (lo, hi) = self.sentence_length;
        if lo < 2 || lo > hi {
            return fail(format!("bad sentence length range ({lo}, {hi})"));
        }
        if self.max_arguments == 0 {
            return fail("max_arguments must be at least 1".into());
        }
        if self.source_sentences == 0 || self.target_sentences == 0 {
            return fail("source_sentences and target_sentences must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.noise) {
            return fail(format!("noise {} not in [0, 1)", self.noise));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return fail(format!("bad zipf exponent {}", self.zipf_exponent));
        }
        if self.source_language == self.target_language || self.source_language.is_empty() {
            return fail("source and target languages must be distinct and non-empty".into());
        }
        if let Some(m) = &self.label_merge_map {
            if m.len() != self.num_labels {
                return fail(format!("merge map has {} entries for {} proto-labels", m.len(), self.num_labels));
            }
            let k = self.num_source_labels();
            if (0..k).any(|s| !m.contains(&s)) {
                return fail("merge map must cover source labels 0..k without gaps".into());
            }
        }
        Ok(())
    }

    pub fn from_key_values(kv: &mut KeyValues) -> Result<Self> {
        let d = SynthConfig::default();
        let merge: Option<String> = kv.take("label_merge_map")?;
        let label_merge_map = match merge.as_deref() {
            None | Some("none") => None,
            Some(s) => Some(
                s.split(',')
                    .map(|x| x.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| ClarError::Config(format!("bad label_merge_map {s:?}")))?,
            ),
        };
        let cfg = SynthConfig {
            num_labels: kv.take_or("num_labels", d.num_labels)?,
            vocab_size: kv.take_or("vocab_size", d.vocab_size)?,
            words_per_label: kv.take_or("words_per_label", d.words_per_label)?,
            predicate_words: kv.take_or("predicate_words", d.predicate_words)?,
            sentence_length: (
                kv.take_or("min_length", d.sentence_length.0)?,
                kv.take_or("max_length", d.sentence_length.1)?,
            ),
            max_arguments: kv.take_or("max_arguments", d.max_arguments)?,
            source_sentences: kv.take_or("source_sentences", d.source_sentences)?,
            target_sentences: kv.take_or("target_sentences", d.target_sentences)?,
            dev_sentences: kv.take_or("dev_sentences", d.dev_sentences)?,
            test_sentences: kv.take_or("test_sentences", d.test_sentences)?,
            label_merge_map,
            noise: kv.take_or("noise", d.noise)?,
            zipf_exponent: kv.take_or("zipf_exponent", d.zipf_exponent)?,
            seed: kv.take_or("seed", d.seed)?,
            source_language: kv.take_or("source_language", d.source_language)?,
            target_language: kv.take_or("target_language", d.target_language)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Target label → source label it was generated alongside.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub correspondence: BTreeMap<LabelId, LabelId>,
}

impl GroundTruth {
    pub fn to_tsv(&self) -> String {
        self.correspondence
            .iter()
            .map(|(t, s)| format!("{}\t{}\t{}\t{}\n", t.language, t.name, s.language, s.name))
            .collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut correspondence = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [tl, tn, sl, sn] = cols.as_slice() else {
                return Err(ClarError::Format { line: idx + 1, msg: format!("expected 4 columns, found {}", cols.len()) });
            };
            correspondence.insert(LabelId::new(*tl, *tn), LabelId::new(*sl, *sn));
        }
        Ok(GroundTruth { correspondence })
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = std::collections::BTreeSet::new();
        self.correspondence.values().all(|s| seen.insert(s))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTask {
    pub source: Corpus,
    pub target: Corpus,
    pub target_dev: Corpus,
    pub target_test: Corpus,
    pub ground_truth: GroundTruth,
    /// Label occurrences the generator emitted into `source` / `target`.
    pub source_tally: FrequencyTable,
    pub target_tally: FrequencyTable,
}

/// Offsets from the predicate, assigned to proto-labels in turn.
const OFFSETS: [isize; 6] = [-1, 1, -2, 2, -3, 3];

/// Expected share of each proto-label among generated arguments.
pub fn label_distribution(num_labels: usize, zipf_exponent: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=num_labels).map(|r| (r as f64).powf(-zipf_exponent)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    label_dist: WeightedIndex<f64>,
}

struct LatentSentence {
    words: Vec<usize>,
    predicate: usize,
    labels: Vec<Option<usize>>,
}

impl Generator<'_> {
    fn signature(&self, label: usize, k: usize) -> usize {
        self.cfg.predicate_words + label * self.cfg.words_per_label + k
    }

    fn filler(&self, k: usize) -> usize {
        self.cfg.predicate_words + self.cfg.num_labels * self.cfg.words_per_label + k
    }

    fn sentence(&self, rng: &mut ChaCha8Rng) -> LatentSentence {
        let cfg = self.cfg;
        let len = rng.gen_range(cfg.sentence_length.0..=cfg.sentence_length.1);
        let predicate = rng.gen_range(0..len);
        let n_args = rng.gen_range(1..=cfg.max_arguments.min(len - 1));
        let mut labels: Vec<Option<usize>> = vec![None; len];
        for _ in 0..n_args {
            let label = self.label_dist.sample(rng);
            let want = predicate as isize + OFFSETS[label % OFFSETS.len()];
            // nearest free slot to the preferred one, closer first, left first
            let slot = (0..len as isize)
                .flat_map(|d| [want - d, want + d])
                .find(|&p| p >= 0 && (p as usize) < len && p as usize != predicate && labels[p as usize].is_none());
            if let Some(p) = slot {
                labels[p as usize] = Some(label);
            }
        }
        let words = (0..len)
            .map(|i| {
                let w = if i == predicate {
                    rng.gen_range(0..cfg.predicate_words)
                } else if let Some(l) = labels[i] {
                    self.signature(l, rng.gen_range(0..cfg.words_per_label))
                } else {
                    self.filler(rng.gen_range(0..cfg.filler_words()))
                };
                if rng.gen::<f64>() < cfg.noise {
                    rng.gen_range(0..cfg.vocab_size)
                } else {
                    w
                }
            })
            .collect();
        LatentSentence { words, predicate, labels }
    }
}

struct Renderer {
    language: String,
    prefix: char,
    word_names: Vec<usize>,
    label_names: Vec<LabelId>,
}

impl Renderer {
    fn render(&self, s: &LatentSentence, label_of: impl Fn(usize) -> usize) -> Sentence {
        Sentence {
            tokens: s.words.iter().map(|&w| format!("{}{}", self.prefix, self.word_names[w])).collect(),
            predicate_index: s.predicate,
            labels: s.labels.iter().map(|l| l.map(|l| self.label_names[label_of(l)].clone())).collect(),
        }
    }
}

fn tally(corpus: &Corpus) -> FrequencyTable {
    crate::label_space::count_label_frequencies(corpus)
}

/// Seeded generation of the source corpus, the target training corpus, the
/// target development and test corpora and the ground truth.
pub fn generate_task(cfg: &SynthConfig) -> Result<SynthTask> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let label_dist = WeightedIndex::new(label_distribution(cfg.num_labels, cfg.zipf_exponent))
        .map_err(|e| ClarError::Config(e.to_string()))?;
    let gen = Generator { cfg, label_dist };

    let renamed = |n: usize, rng: &mut ChaCha8Rng| {
        let mut v: Vec<usize> = (0..n).collect();
        v.shuffle(rng);
        v
    };
    let k_source = cfg.num_source_labels();
    let source_words = renamed(cfg.vocab_size, &mut rng);
    let target_words = renamed(cfg.vocab_size, &mut rng);
    let source_label_perm = renamed(k_source, &mut rng);
    let target_label_perm = renamed(cfg.num_labels, &mut rng);
    let source = Renderer {
        language: cfg.source_language.clone(),
        prefix: 's',
        word_names: source_words,
        label_names: source_label_perm.iter().map(|&i| LabelId::new(cfg.source_language.clone(), format!("A{i}"))).collect(),
    };
    let target = Renderer {
        language: cfg.target_language.clone(),
        prefix: 't',
        word_names: target_words,
        label_names: target_label_perm.iter().map(|&i| LabelId::new(cfg.target_language.clone(), format!("R{i}"))).collect(),
    };
    let to_source = |l: usize| cfg.label_merge_map.as_ref().map_or(l, |m| m[l]);

    let corpus = |n: usize, r: &Renderer, map: &dyn Fn(usize) -> usize, rng: &mut ChaCha8Rng| {
        let sentences = (0..n).map(|_| r.render(&gen.sentence(rng), map)).collect();
        Corpus::new(r.language.clone(), sentences)
    };
    let source_corpus = corpus(cfg.source_sentences, &source, &to_source, &mut rng);
    let identity = |l: usize| l;
    let target_corpus = corpus(cfg.target_sentences, &target, &identity, &mut rng);
    let target_dev = corpus(cfg.dev_sentences, &target, &identity, &mut rng);
    let target_test = corpus(cfg.test_sentences, &target, &identity, &mut rng);

    let correspondence = (0..cfg.num_labels)
        .map(|l| (target.label_names[l].clone(), source.label_names[to_source(l)].clone()))
        .collect();
    Ok(SynthTask {
        source_tally: tally(&source_corpus),
        target_tally: tally(&target_corpus),
        source: source_corpus,
        target: target_corpus,
        target_dev,
        target_test,
        ground_truth: GroundTruth { correspondence },
    })
}
