//! Polyglot window tagger.
//!
//! Every token is encoded from a ±w window of (word embedding, predicate
//! flag embedding) features by one shared rectified layer; each language has
//! its own vocabulary, embeddings and softmax head. The head rows are the
//! per-label prototypes the matcher pairs and the regularizer pulls
//! together.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::error::{ClarError, Result};
use crate::label_space::{
    count_label_frequencies, format_real, load_weight_matrix_at, save_weight_matrix, Corpus, LabelId,
    LabeledMatrix, Sentence,
};
use crate::linalg::{axpy, Matrix};
use crate::matcher::{match_labels, Cardinality, MatchConfig, Pairing};
use crate::regularizer::{clar_penalty_and_gradients, AffineTransform, DEFAULT_LAMBDA};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
/// Name of the no-argument class present in every head.
pub const NO_ARGUMENT: &str = "O";

const PAD_ID: usize = 0;
const UNK_ID: usize = 1;
const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Monolingual,
    Polyglot,
    Clar,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Monolingual => "monolingual",
            Mode::Polyglot => "polyglot",
            Mode::Clar => "clar",
        })
    }
}

impl FromStr for Mode {
    type Err = ClarError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "monolingual" => Ok(Mode::Monolingual),
            "polyglot" => Ok(Mode::Polyglot),
            "clar" => Ok(Mode::Clar),
            other => Err(ClarError::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Matching runs once these many epochs have completed.
    pub warmup_epochs: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub window: usize,
    pub embed_dim: usize,
    pub flag_dim: usize,
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub mode: Mode,
    pub matching: MatchConfig,
    /// Re-run matching every n epochs after the first match; never by default.
    pub rematch_every: Option<usize>,
    /// Step size for Ψ and b; the main learning rate when unset.
    pub transform_learning_rate: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            warmup_epochs: 3,
            learning_rate: 0.05,
            lambda: DEFAULT_LAMBDA,
            window: 2,
            embed_dim: 16,
            flag_dim: 4,
            hidden_dim: 16,
            batch_size: 8,
            patience: 5,
            mode: Mode::Clar,
            matching: MatchConfig::default(),
            rematch_every: None,
            transform_learning_rate: None,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ClarError::Config(m.to_string()));
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.warmup_epochs >= self.epochs {
            return fail("warmup_epochs must be smaller than epochs");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda must be non-negative");
        }
        if self.embed_dim == 0 || self.flag_dim == 0 || self.hidden_dim == 0 {
            return fail("embedding, flag and hidden dimensions must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.matching.source_capacity == 0 {
            return fail("source_capacity must be at least 1");
        }
        if self.rematch_every == Some(0) {
            return fail("rematch_every must be at least 1");
        }
        if self.transform_learning_rate.is_some_and(|r| !(r > 0.0 && r.is_finite())) {
            return fail("transform_learning_rate must be positive");
        }
        Ok(())
    }

    /// Reads every training key from `kv`, leaving unrelated keys in place.
    pub fn from_key_values(kv: &mut KeyValues) -> Result<Self> {
        let d = TrainConfig::default();
        let cardinality: Option<String> = kv.take("cardinality")?;
        let cardinality = match cardinality.as_deref() {
            None | Some("default") => None,
            Some(s) => Some(s.parse::<Cardinality>()?),
        };
        let rematch: Option<String> = kv.take("rematch_every")?;
        let rematch_every = match rematch.as_deref() {
            None | Some("never") => None,
            Some(s) => Some(s.parse().map_err(|_| ClarError::Config(format!("bad rematch_every {s:?}")))?),
        };
        let transform_lr: Option<String> = kv.take("transform_learning_rate")?;
        let transform_learning_rate = match transform_lr.as_deref() {
            None | Some("same") => None,
            Some(s) => Some(s.parse().map_err(|_| ClarError::Config(format!("bad transform_learning_rate {s:?}")))?),
        };
        let cfg = TrainConfig {
            epochs: kv.take_or("epochs", d.epochs)?,
            warmup_epochs: kv.take_or("warmup_epochs", d.warmup_epochs)?,
            learning_rate: kv.take_or("learning_rate", d.learning_rate)?,
            lambda: kv.take_or("lambda", d.lambda)?,
            window: kv.take_or("window", d.window)?,
            embed_dim: kv.take_or("embed_dim", d.embed_dim)?,
            flag_dim: kv.take_or("flag_dim", d.flag_dim)?,
            hidden_dim: kv.take_or("hidden_dim", d.hidden_dim)?,
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            patience: kv.take_or("patience", d.patience)?,
            mode: kv.take_or("mode", d.mode)?,
            matching: MatchConfig {
                frequency_threshold: kv.take_or("frequency_threshold", d.matching.frequency_threshold)?,
                cardinality,
                source_capacity: kv.take_or("source_capacity", d.matching.source_capacity)?,
            },
            rematch_every,
            transform_learning_rate,
            seed: kv.take_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_config_text(&self) -> String {
        let cardinality = self.matching.cardinality.map_or("default".to_string(), |c| c.to_string());
        let rematch = self.rematch_every.map_or("never".to_string(), |n| n.to_string());
        let transform_lr = self.transform_learning_rate.map_or("same".to_string(), |r| r.to_string());
        format!(
            "epochs = {}\nwarmup_epochs = {}\nlearning_rate = {}\nlambda = {}\nwindow = {}\nembed_dim = {}\n\
             flag_dim = {}\nhidden_dim = {}\nbatch_size = {}\npatience = {}\nmode = {}\n\
             frequency_threshold = {}\ncardinality = {cardinality}\nsource_capacity = {}\n\
             rematch_every = {rematch}\ntransform_learning_rate = {transform_lr}\nseed = {}\n",
            self.epochs,
            self.warmup_epochs,
            self.learning_rate,
            self.lambda,
            self.window,
            self.embed_dim,
            self.flag_dim,
            self.hidden_dim,
            self.batch_size,
            self.patience,
            self.mode,
            self.matching.frequency_threshold,
            self.matching.source_capacity,
            self.seed
        )
    }
}

/// Word to row index; rows 0 and 1 are the reserved padding and unknown tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab { words: Vec::new(), index: HashMap::new() };
        for w in [PAD_TOKEN, UNK_TOKEN] {
            v.push(w.to_string());
        }
        for w in words {
            v.push(w.into());
        }
        v
    }

    /// Words in order of first appearance.
    pub fn from_corpus(corpus: &Corpus) -> Self {
        Vocab::new(corpus.sentences.iter().flat_map(|s| s.tokens.iter().cloned()))
    }

    fn push(&mut self, w: String) {
        if !self.index.contains_key(&w) {
            self.index.insert(w.clone(), self.words.len());
            self.words.push(w);
        }
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// What a language contributes to a model: its vocabulary and label set.
#[derive(Debug, Clone)]
pub struct LanguageInventory {
    pub language: String,
    pub vocab: Vocab,
    /// Argument labels, excluding the no-argument class.
    pub labels: Vec<LabelId>,
}

impl LanguageInventory {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let labels: BTreeSet<LabelId> =
            corpus.sentences.iter().flat_map(|s| s.labels.iter().flatten().cloned()).collect();
        LanguageInventory {
            language: corpus.language.clone(),
            vocab: Vocab::from_corpus(corpus),
            labels: labels.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageParams {
    pub language: String,
    pub vocab: Vocab,
    pub embeddings: Matrix,
    /// Row 0 is the no-argument class.
    pub head: LabeledMatrix,
    pub head_bias: Vec<f64>,
}

impl LanguageParams {
    pub fn no_argument(&self) -> LabelId {
        LabelId::new(self.language.clone(), NO_ARGUMENT)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggerModel {
    pub window: usize,
    pub source: LanguageParams,
    pub target: LanguageParams,
    /// Row 0: not the predicate (also used for padding); row 1: predicate.
    pub flag_embedding: Matrix,
    pub encoder: Matrix,
    pub encoder_bias: Vec<f64>,
    pub transform: AffineTransform,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE)).collect()
}

fn head_labels(inv: &LanguageInventory) -> Vec<LabelId> {
    std::iter::once(LabelId::new(inv.language.clone(), NO_ARGUMENT))
        .chain(inv.labels.iter().filter(|l| l.name != NO_ARGUMENT).cloned())
        .collect()
}

/// Seeded initialization; every parameter uniform on [-0.1, 0.1], transform
/// at identity.
pub fn init_model(
    cfg: &TrainConfig,
    source: &LanguageInventory,
    target: &LanguageInventory,
    seed: u64,
) -> Result<TaggerModel> {
    if source.language == target.language {
        return Err(ClarError::Config(format!("source and target share the language tag {:?}", source.language)));
    }
    let (e, f, h) = (cfg.embed_dim, cfg.flag_dim, cfg.hidden_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lang = |inv: &LanguageInventory, rng: &mut ChaCha8Rng| -> Result<LanguageParams> {
        let embeddings = uniform_matrix(rng, inv.vocab.len(), e);
        let labels = head_labels(inv);
        let head = LabeledMatrix::new(labels.clone(), uniform_matrix(rng, labels.len(), h))?;
        let head_bias = uniform_vec(rng, labels.len());
        Ok(LanguageParams {
            language: inv.language.clone(),
            vocab: inv.vocab.clone(),
            embeddings,
            head,
            head_bias,
        })
    };
    let source_params = lang(source, &mut rng)?;
    let target_params = lang(target, &mut rng)?;
    let flag_embedding = uniform_matrix(&mut rng, 2, f);
    let encoder = uniform_matrix(&mut rng, h, (2 * cfg.window + 1) * (e + f));
    let encoder_bias = uniform_vec(&mut rng, h);
    Ok(TaggerModel {
        window: cfg.window,
        source: source_params,
        target: target_params,
        flag_embedding,
        encoder,
        encoder_bias,
        transform: AffineTransform::identity(h),
        rng_seed: seed,
    })
}

/// Intermediate values of one token, kept for the backward pass.
struct TokenTrace {
    word_ids: Vec<usize>,
    flag_ids: Vec<usize>,
    x: Vec<f64>,
    z: Vec<f64>,
    a: Vec<f64>,
    probs: Vec<f64>,
}

/// Gradient buffers shaped like the model's parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub source_embeddings: Matrix,
    pub target_embeddings: Matrix,
    pub flag_embedding: Matrix,
    pub encoder: Matrix,
    pub encoder_bias: Vec<f64>,
    pub source_head: Matrix,
    pub source_bias: Vec<f64>,
    pub target_head: Matrix,
    pub target_bias: Vec<f64>,
    pub psi: Matrix,
    pub b: Vec<f64>,
}

impl Gradients {
    fn zeros_like(m: &TaggerModel) -> Self {
        let z = |x: &Matrix| Matrix::zeros(x.rows(), x.cols());
        Gradients {
            source_embeddings: z(&m.source.embeddings),
            target_embeddings: z(&m.target.embeddings),
            flag_embedding: z(&m.flag_embedding),
            encoder: z(&m.encoder),
            encoder_bias: vec![0.0; m.encoder_bias.len()],
            source_head: z(m.source.head.matrix()),
            source_bias: vec![0.0; m.source.head_bias.len()],
            target_head: z(m.target.head.matrix()),
            target_bias: vec![0.0; m.target.head_bias.len()],
            psi: z(&m.transform.psi),
            b: vec![0.0; m.transform.b.len()],
        }
    }

    /// Same order as [`TaggerModel::parameter_blocks_mut`].
    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("source.embeddings", self.source_embeddings.as_slice()),
            ("target.embeddings", self.target_embeddings.as_slice()),
            ("flag_embedding", self.flag_embedding.as_slice()),
            ("encoder", self.encoder.as_slice()),
            ("encoder_bias", &self.encoder_bias),
            ("source.head", self.source_head.as_slice()),
            ("source.head_bias", &self.source_bias),
            ("target.head", self.target_head.as_slice()),
            ("target.head_bias", &self.target_bias),
            ("transform.psi", self.psi.as_slice()),
            ("transform.b", &self.b),
        ]
    }
}

/// Objective value split into its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub base: f64,
    /// Unweighted alignment penalty (0 when no pairs are active).
    pub penalty: f64,
    pub lambda: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.base + self.lambda * self.penalty
    }
}

impl TaggerModel {
    pub fn side(&self, language: &str) -> Result<Side> {
        if language == self.source.language {
            Ok(Side::Source)
        } else if language == self.target.language {
            Ok(Side::Target)
        } else {
            Err(ClarError::UnknownLanguage(language.to_string()))
        }
    }

    pub fn params(&self, side: Side) -> &LanguageParams {
        match side {
            Side::Source => &self.source,
            Side::Target => &self.target,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoder.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.source.embeddings.cols()
    }

    pub fn flag_dim(&self) -> usize {
        self.flag_embedding.cols()
    }

    pub fn parameter_blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("source.embeddings", self.source.embeddings.as_mut_slice()),
            ("target.embeddings", self.target.embeddings.as_mut_slice()),
            ("flag_embedding", self.flag_embedding.as_mut_slice()),
            ("encoder", self.encoder.as_mut_slice()),
            ("encoder_bias", &mut self.encoder_bias),
            ("source.head", self.source.head.matrix_mut().as_mut_slice()),
            ("source.head_bias", &mut self.source.head_bias),
            ("target.head", self.target.head.matrix_mut().as_mut_slice()),
            ("target.head_bias", &mut self.target.head_bias),
            ("transform.psi", self.transform.psi.as_mut_slice()),
            ("transform.b", &mut self.transform.b),
        ]
    }

    pub fn parameter_count(&mut self) -> usize {
        self.parameter_blocks_mut().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn all_finite(&mut self) -> bool {
        self.parameter_blocks_mut().iter().all(|(_, b)| b.iter().all(|x| x.is_finite()))
    }

    fn trace_sentence(&self, side: Side, sentence: &Sentence) -> Vec<TokenTrace> {
        let lang = self.params(side);
        let ids: Vec<usize> = sentence.tokens.iter().map(|t| lang.vocab.id(t)).collect();
        let (e, f, w) = (self.embed_dim(), self.flag_dim(), self.window as isize);
        let n = ids.len() as isize;
        (0..n)
            .map(|i| {
                let mut x = Vec::with_capacity((2 * self.window + 1) * (e + f));
                let mut word_ids = Vec::with_capacity(2 * self.window + 1);
                let mut flag_ids = Vec::with_capacity(2 * self.window + 1);
                for o in -w..=w {
                    let p = i + o;
                    let (wid, fid) = if p < 0 || p >= n {
                        (PAD_ID, 0)
                    } else {
                        (ids[p as usize], usize::from(p as usize == sentence.predicate_index))
                    };
                    x.extend_from_slice(lang.embeddings.row(wid));
                    x.extend_from_slice(self.flag_embedding.row(fid));
                    word_ids.push(wid);
                    flag_ids.push(fid);
                }
                let mut z = self.encoder.matvec(&x);
                for (zi, bi) in z.iter_mut().zip(&self.encoder_bias) {
                    *zi += bi;
                }
                let a: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
                let mut logits = lang.head.matrix().matvec(&a);
                for (l, b) in logits.iter_mut().zip(&lang.head_bias) {
                    *l += b;
                }
                let probs = softmax(&logits);
                TokenTrace { word_ids, flag_ids, x, z, a, probs }
            })
            .collect()
    }

    /// Hidden representation of every token.
    pub fn encode(&self, sentence: &Sentence, language: &str) -> Result<Vec<Vec<f64>>> {
        let side = self.side(language)?;
        Ok(self.trace_sentence(side, sentence).into_iter().map(|t| t.a).collect())
    }

    fn gold_index(&self, side: Side, label: Option<&LabelId>) -> Result<usize> {
        match label {
            None => Ok(0),
            Some(l) => self
                .params(side)
                .head
                .position(l)
                .ok_or_else(|| ClarError::Degenerate(format!("label {l} is not in the {} head", self.params(side).language))),
        }
    }

    /// Head row indices `(source, target)` for each pair, in pairing order.
    pub fn pair_rows(&self, pairing: &Pairing) -> Result<Vec<(usize, usize)>> {
        pairing
            .pairs
            .iter()
            .map(|p| {
                let s = self.source.head.position(&p.source);
                let t = self.target.head.position(&p.target);
                match (s, t) {
                    (Some(s), Some(t)) => Ok((s, t)),
                    _ => Err(ClarError::Degenerate(format!("pair {} / {} not present in the heads", p.source, p.target))),
                }
            })
            .collect()
    }

    /// The `(U_p, V_p)` rows the penalty sees for the given pair rows.
    pub fn penalty_rows(&self, pairs: &[(usize, usize)]) -> (Matrix, Matrix) {
        let h = self.hidden_dim();
        let mut u = Matrix::zeros(pairs.len(), h);
        let mut v = Matrix::zeros(pairs.len(), h);
        for (k, &(s, t)) in pairs.iter().enumerate() {
            u.row_mut(k).copy_from_slice(self.source.head.matrix().row(s));
            v.row_mut(k).copy_from_slice(self.target.head.matrix().row(t));
        }
        (u, v)
    }

    /// Objective `base + λ·penalty` on one single-language batch and its
    /// gradient with respect to every parameter.
    pub fn loss_and_gradients(
        &self,
        batch: &[Sentence],
        language: &str,
        penalty: Option<(&[(usize, usize)], f64)>,
    ) -> Result<(LossParts, Gradients)> {
        let side = self.side(language)?;
        let mut grads = Gradients::zeros_like(self);
        let base = self.accumulate_base(side, batch, &mut grads)?;
        let mut parts = LossParts { base, penalty: 0.0, lambda: 0.0 };
        if let Some((pairs, lambda)) = penalty {
            if !pairs.is_empty() {
                let (u, v) = self.penalty_rows(pairs);
                let (p, g) = clar_penalty_and_gradients(&u, &v, &self.transform)?;
                parts.penalty = p;
                parts.lambda = lambda;
                for (k, &(s, t)) in pairs.iter().enumerate() {
                    axpy(lambda, g.d_u.row(k), grads.source_head.row_mut(s));
                    axpy(lambda, g.d_v.row(k), grads.target_head.row_mut(t));
                }
                axpy(lambda, g.d_psi.as_slice(), grads.psi.as_mut_slice());
                axpy(lambda, &g.d_b, &mut grads.b);
            }
        }
        Ok((parts, grads))
    }

    fn accumulate_base(&self, side: Side, batch: &[Sentence], grads: &mut Gradients) -> Result<f64> {
        let n: usize = batch.iter().map(Sentence::len).sum();
        if n == 0 {
            return Err(ClarError::EmptyBatch);
        }
        let inv_n = 1.0 / n as f64;
        let (e, f) = (self.embed_dim(), self.flag_dim());
        let lang = self.params(side);
        let mut loss = 0.0;
        for sentence in batch {
            let traces = self.trace_sentence(side, sentence);
            for (trace, gold) in traces.iter().zip(&sentence.labels) {
                let g = self.gold_index(side, gold.as_ref())?;
                loss -= trace.probs[g].ln();
                let mut dlogits = trace.probs.clone();
                dlogits[g] -= 1.0;
                dlogits.iter_mut().for_each(|d| *d *= inv_n);

                let (head_grad, bias_grad, emb_grad) = match side {
                    Side::Source => (&mut grads.source_head, &mut grads.source_bias, &mut grads.source_embeddings),
                    Side::Target => (&mut grads.target_head, &mut grads.target_bias, &mut grads.target_embeddings),
                };
                for (c, &dl) in dlogits.iter().enumerate() {
                    axpy(dl, &trace.a, head_grad.row_mut(c));
                    bias_grad[c] += dl;
                }
                let da = lang.head.matrix().matvec_t(&dlogits);
                let dz: Vec<f64> = da.iter().zip(&trace.z).map(|(d, &z)| if z > 0.0 { *d } else { 0.0 }).collect();
                for (r, &dzr) in dz.iter().enumerate() {
                    if dzr != 0.0 {
                        axpy(dzr, &trace.x, grads.encoder.row_mut(r));
                        grads.encoder_bias[r] += dzr;
                    }
                }
                let dx = self.encoder.matvec_t(&dz);
                for (slot, (&wid, &fid)) in trace.word_ids.iter().zip(&trace.flag_ids).enumerate() {
                    let base = slot * (e + f);
                    axpy(1.0, &dx[base..base + e], emb_grad.row_mut(wid));
                    axpy(1.0, &dx[base + e..base + e + f], grads.flag_embedding.row_mut(fid));
                }
            }
        }
        Ok(loss * inv_n)
    }

    /// `θ ← θ − lr·g` over every block.
    pub fn apply_gradients(&mut self, grads: &Gradients, learning_rate: f64) {
        self.apply_gradients_split(grads, learning_rate, learning_rate);
    }

    /// Like [`apply_gradients`](Self::apply_gradients) with a separate step for Ψ and b.
    pub fn apply_gradients_split(&mut self, grads: &Gradients, learning_rate: f64, transform_rate: f64) {
        for ((name, p), (_, g)) in self.parameter_blocks_mut().into_iter().zip(grads.blocks()) {
            let rate = if name.starts_with("transform.") { transform_rate } else { learning_rate };
            axpy(-rate, g, p);
        }
    }

    pub fn predict(&self, sentence: &Sentence, language: &str) -> Result<Vec<LabelId>> {
        let side = self.side(language)?;
        let labels = self.params(side).head.labels();
        Ok(self.trace_sentence(side, sentence).iter().map(|t| labels[argmax(&t.probs)].clone()).collect())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|x| x / sum).collect()
}

/// Index of the largest value; the first one on ties.
pub fn argmax(xs: &[f64]) -> usize {
    xs.iter().enumerate().fold(0, |best, (i, &x)| if x > xs[best] { i } else { best })
}

/// Per-token label distributions for one sentence.
pub fn forward(model: &TaggerModel, sentence: &Sentence, language: &str) -> Result<Vec<Vec<f64>>> {
    let side = model.side(language)?;
    Ok(model.trace_sentence(side, sentence).into_iter().map(|t| t.probs).collect())
}

/// Mean negative log-likelihood of the gold labels (null is the `O` class).
pub fn base_loss(model: &TaggerModel, batch: &[Sentence], language: &str) -> Result<f64> {
    let side = model.side(language)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for sentence in batch {
        for (probs, gold) in forward(model, sentence, language)?.iter().zip(&sentence.labels) {
            total -= probs[model.gold_index(side, gold.as_ref())?].ln();
            n += 1;
        }
    }
    if n == 0 {
        return Err(ClarError::EmptyBatch);
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LabelCounts {
    pub correct: u64,
    pub predicted: u64,
    pub gold: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_label: BTreeMap<LabelId, LabelCounts>,
}

fn prf(correct: u64, predicted: u64, gold: u64) -> (f64, f64, f64) {
    let p = if predicted > 0 { correct as f64 / predicted as f64 } else { 0.0 };
    let r = if gold > 0 { correct as f64 / gold as f64 } else { 0.0 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

impl Metrics {
    /// Micro-averaged scores from raw per-label counts.
    pub fn from_counts(per_label: BTreeMap<LabelId, LabelCounts>) -> Self {
        let sum = per_label.values().fold(LabelCounts::default(), |acc, c| LabelCounts {
            correct: acc.correct + c.correct,
            predicted: acc.predicted + c.predicted,
            gold: acc.gold + c.gold,
        });
        let (precision, recall, f1) = prf(sum.correct, sum.predicted, sum.gold);
        Metrics { precision, recall, f1, per_label }
    }

    /// Micro-averaged (precision, recall, F1) restricted to `labels`.
    pub fn subset(&self, labels: &BTreeSet<LabelId>) -> (f64, f64, f64) {
        let (mut c, mut p, mut g) = (0, 0, 0);
        for (l, counts) in &self.per_label {
            if labels.contains(l) {
                c += counts.correct;
                p += counts.predicted;
                g += counts.gold;
            }
        }
        prf(c, p, g)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "precision\t{}\nrecall\t{}\nf1\t{}\n",
            format_real(self.precision),
            format_real(self.recall),
            format_real(self.f1)
        );
        for (l, c) in &self.per_label {
            s.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", l.language, l.name, c.correct, c.predicted, c.gold));
        }
        s
    }
}

/// Token-level argument classification scores; tokens predicted as `O` are
/// not counted as predictions.
pub fn evaluate(model: &TaggerModel, corpus: &Corpus, language: &str) -> Result<Metrics> {
    evaluate_relabeled(model, corpus, language, &BTreeMap::new())
}

/// Like [`evaluate`], with gold and predicted labels both passed through
/// `relabel` (labels absent from the map are kept).
pub fn evaluate_relabeled(
    model: &TaggerModel,
    corpus: &Corpus,
    language: &str,
    relabel: &BTreeMap<LabelId, LabelId>,
) -> Result<Metrics> {
    let side = model.side(language)?;
    let none = model.params(side).no_argument();
    let map = |l: &LabelId| relabel.get(l).cloned().unwrap_or_else(|| l.clone());
    let mut per_label: BTreeMap<LabelId, LabelCounts> = BTreeMap::new();
    for sentence in &corpus.sentences {
        let predicted = model.predict(sentence, language)?;
        for (pred, gold) in predicted.iter().zip(&sentence.labels) {
            let pred = (*pred != none).then(|| map(pred));
            let gold = gold.as_ref().map(map);
            if let Some(g) = &gold {
                per_label.entry(g.clone()).or_default().gold += 1;
            }
            if let Some(p) = &pred {
                let entry = per_label.entry(p.clone()).or_default();
                entry.predicted += 1;
                if gold.as_ref() == Some(p) {
                    entry.correct += 1;
                }
            }
        }
    }
    Ok(Metrics::from_counts(per_label))
}

/// Merges target labels that share a source partner into one combined label
/// named by joining the member names with `+`.
pub fn combined_label_map(pairing: &Pairing) -> BTreeMap<LabelId, LabelId> {
    let mut groups: BTreeMap<&LabelId, Vec<&LabelId>> = BTreeMap::new();
    for p in &pairing.pairs {
        groups.entry(&p.source).or_default().push(&p.target);
    }
    let mut map = BTreeMap::new();
    for members in groups.values().filter(|m| m.len() > 1) {
        let mut names: Vec<&str> = members.iter().map(|l| l.name.as_str()).collect();
        names.sort_unstable();
        let combined = LabelId::new(members[0].language.clone(), names.join("+"));
        for m in members {
            map.insert((*m).clone(), combined.clone());
        }
    }
    map
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_source: f64,
    pub loss_target: f64,
    /// λ-weighted penalty averaged over the epoch's batches.
    pub penalty: f64,
    pub dev_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tloss_s\tloss_t\tpenalty\tdev_f1\n");
        for r in &self.records {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.epoch,
                format_real(r.loss_source),
                format_real(r.loss_target),
                format_real(r.penalty),
                format_real(r.dev_f1)
            ));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best development F1.
    pub model: TaggerModel,
    pub pairing: Option<Pairing>,
    pub history: History,
    pub best_epoch: usize,
}

/// Deterministic interleaving of two batch lists, proportional to their sizes.
fn interleave(n_source: usize, n_target: usize) -> Vec<Side> {
    let (mut s, mut t) = (0, 0);
    let mut order = Vec::with_capacity(n_source + n_target);
    while s < n_source || t < n_target {
        // compare (s + 0.5) / n_source with (t + 0.5) / n_target without division
        let take_source = t >= n_target
            || (s < n_source && (2 * s + 1) * n_target <= (2 * t + 1) * n_source);
        if take_source {
            order.push(Side::Source);
            s += 1;
        } else {
            order.push(Side::Target);
            t += 1;
        }
    }
    order
}

fn batches(rng: &mut ChaCha8Rng, corpus: &Corpus, batch_size: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Mini-batch gradient descent with the warm-up, match, regularize schedule.
///
/// `dev` drives early stopping; without it the target training corpus is
/// used.
pub fn train(source: &Corpus, target: &Corpus, dev: Option<&Corpus>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(ClarError::Degenerate("target corpus is empty".into()));
    }
    if cfg.mode != Mode::Monolingual && source.is_empty() {
        return Err(ClarError::Degenerate("source corpus is empty".into()));
    }
    let src_inv = LanguageInventory::from_corpus(source);
    let tgt_inv = LanguageInventory::from_corpus(target);
    let mut model = init_model(cfg, &src_inv, &tgt_inv, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let dev = dev.unwrap_or(target);
    let freq_source = count_label_frequencies(source);
    let freq_target = count_label_frequencies(target);

    let mut pairing: Option<Pairing> = None;
    let mut pair_rows: Vec<(usize, usize)> = Vec::new();
    let mut history = History::default();
    struct Best {
        f1: f64,
        loss: f64,
        epoch: usize,
        model: TaggerModel,
    }
    let mut best: Option<Best> = None;

    for epoch in 1..=cfg.epochs {
        if cfg.mode == Mode::Clar {
            let since = (epoch - 1).checked_sub(cfg.warmup_epochs);
            let due = match (since, cfg.rematch_every) {
                (Some(0), _) => true,
                (Some(k), Some(n)) => k % n == 0,
                _ => false,
            };
            if due {
                let p = match_labels(&model.source.head, &model.target.head, &freq_source, &freq_target, &cfg.matching)?;
                pair_rows = model.pair_rows(&p)?;
                pairing = Some(p);
            }
        }
        let src_batches =
            if cfg.mode == Mode::Monolingual { Vec::new() } else { batches(&mut rng, source, cfg.batch_size) };
        let tgt_batches = batches(&mut rng, target, cfg.batch_size);
        let (mut si, mut ti) = (0, 0);
        let (mut loss_s, mut loss_t, mut pen) = (0.0, 0.0, 0.0);
        let order = interleave(src_batches.len(), tgt_batches.len());
        for side in &order {
            let (corpus, idx) = match side {
                Side::Source => {
                    si += 1;
                    (source, &src_batches[si - 1])
                }
                Side::Target => {
                    ti += 1;
                    (target, &tgt_batches[ti - 1])
                }
            };
            let batch: Vec<Sentence> = idx.iter().map(|&i| corpus.sentences[i].clone()).collect();
            let penalty = (!pair_rows.is_empty()).then_some((pair_rows.as_slice(), cfg.lambda));
            let (parts, grads) = model.loss_and_gradients(&batch, &corpus.language, penalty)?;
            if !parts.total().is_finite() {
                return Err(ClarError::Divergence { epoch, msg: format!("non-finite loss {}", parts.total()) });
            }
            match side {
                Side::Source => loss_s += parts.base,
                Side::Target => loss_t += parts.base,
            }
            pen += parts.lambda * parts.penalty;
            model.apply_gradients_split(&grads, cfg.learning_rate, cfg.transform_learning_rate.unwrap_or(cfg.learning_rate));
        }
        if !model.all_finite() {
            return Err(ClarError::Divergence { epoch, msg: "non-finite parameter".into() });
        }
        let dev_f1 = evaluate(&model, dev, &dev.language)?.f1;
        let dev_loss = base_loss(&model, &dev.sentences, &dev.language).unwrap_or(f64::INFINITY);
        history.records.push(EpochRecord {
            epoch,
            loss_source: if si > 0 { loss_s / si as f64 } else { 0.0 },
            loss_target: loss_t / ti.max(1) as f64,
            penalty: if order.is_empty() { 0.0 } else { pen / order.len() as f64 },
            dev_f1,
        });
        // F1 ties (typically all-zero F1 early on) are broken by dev loss
        let improved = best
            .as_ref()
            .is_none_or(|b| dev_f1 > b.f1 || (dev_f1 == b.f1 && dev_loss < b.loss));
        if improved {
            best = Some(Best { f1: dev_f1, loss: dev_loss, epoch, model: model.clone() });
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.epoch);
        if epoch - best_epoch >= cfg.patience.max(1) && epoch > cfg.warmup_epochs {
            break;
        }
    }
    let best = best.expect("at least one epoch ran");
    Ok(TrainOutcome { model: best.model, pairing, history, best_epoch: best.epoch })
}

const SECTION_CONFIG: &str = "config";

/// Serializes every parameter block in the weight-matrix layout, one
/// `[section]` per block.
pub fn save_model(model: &TaggerModel) -> String {
    let mut s = format!(
        "[{SECTION_CONFIG}]\nsource_language = {}\ntarget_language = {}\nwindow = {}\nseed = {}\n",
        model.source.language, model.target.language, model.window, model.rng_seed
    );
    let mut section = |name: &str, m: &LabeledMatrix| {
        s.push_str(&format!("[{name}]\n"));
        s.push_str(&save_weight_matrix(m));
    };
    for lang in [&model.source, &model.target] {
        let which = if std::ptr::eq(lang, &model.source) { "source" } else { "target" };
        let labels = lang.vocab.words().iter().map(|w| LabelId::new(lang.language.clone(), w.clone())).collect();
        section(&format!("{which}.embeddings"), &LabeledMatrix::new(labels, lang.embeddings.clone()).expect("vocab is unique"));
        section(&format!("{which}.head"), &lang.head);
        section(&format!("{which}.head_bias"), &vector_block("BIAS", &lang.head_bias));
    }
    let flags = LabeledMatrix::new(vec![LabelId::new("FLAG", "0"), LabelId::new("FLAG", "1")], model.flag_embedding.clone())
        .expect("two rows");
    section("flag_embedding", &flags);
    let enc_labels = (0..model.encoder.rows()).map(|i| LabelId::new("ENC", i.to_string())).collect();
    section("encoder", &LabeledMatrix::new(enc_labels, model.encoder.clone()).expect("distinct"));
    section("encoder_bias", &vector_block("BIAS", &model.encoder_bias));
    section("transform", &model.transform.to_labeled_matrix());
    s
}

fn vector_block(tag: &str, v: &[f64]) -> LabeledMatrix {
    LabeledMatrix::new(vec![LabelId::new(tag, "0")], Matrix::from_vec(1, v.len(), v.to_vec()).expect("one row"))
        .expect("one label")
}

pub fn load_model(text: &str) -> Result<TaggerModel> {
    let mut sections: BTreeMap<String, (usize, String)> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (idx, line) in text.lines().enumerate() {
        let t = line.trim_end_matches('\r');
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            if sections.contains_key(name) {
                return Err(ClarError::Format { line: idx + 1, msg: format!("duplicate section {name}") });
            }
            sections.insert(name.to_string(), (idx + 2, String::new()));
            current = Some(name.to_string());
            continue;
        }
        match &current {
            Some(name) => {
                let body = &mut sections.get_mut(name).expect("inserted").1;
                body.push_str(t);
                body.push('\n');
            }
            None if t.trim().is_empty() => {}
            None => return Err(ClarError::Format { line: idx + 1, msg: "content before first section".into() }),
        }
    }
    let mut take = |name: &str| {
        sections
            .remove(name)
            .ok_or_else(|| ClarError::Format { line: text.lines().count(), msg: format!("missing section [{name}]") })
    };
    let (cfg_line, cfg_text) = take(SECTION_CONFIG)?;
    let mut kv = KeyValues::parse(&cfg_text).map_err(|e| match e {
        ClarError::Format { line, msg } => ClarError::Format { line: line + cfg_line - 1, msg },
        other => other,
    })?;
    let source_language: String = kv.take_required("source_language")?;
    let target_language: String = kv.take_required("target_language")?;
    let window: usize = kv.take_required("window")?;
    let rng_seed: u64 = kv.take_required("seed")?;
    kv.finish()?;

    let mut block = |name: &str| -> Result<LabeledMatrix> {
        let (line, body) = take(name)?;
        load_weight_matrix_at(&body, line)
    };
    let vector = |m: LabeledMatrix| -> Result<Vec<f64>> {
        if m.len() != 1 {
            return Err(ClarError::Dimension(format!("vector block has {} rows", m.len())));
        }
        Ok(m.matrix().row(0).to_vec())
    };
    let mut lang = |which: &str, language: String| -> Result<LanguageParams> {
        let emb = block(&format!("{which}.embeddings"))?;
        let head = block(&format!("{which}.head"))?;
        let head_bias = vector(block(&format!("{which}.head_bias"))?)?;
        let vocab = Vocab::new(emb.labels().iter().skip(2).map(|l| l.name.clone()));
        if vocab.len() != emb.len() {
            return Err(ClarError::Format { line: 0, msg: format!("{which} vocabulary does not start with reserved tokens") });
        }
        if head_bias.len() != head.len() {
            return Err(ClarError::Dimension(format!("{which} head has {} rows but {} biases", head.len(), head_bias.len())));
        }
        Ok(LanguageParams { language, vocab, embeddings: emb.matrix().clone(), head, head_bias })
    };
    let source = lang("source", source_language)?;
    let target = lang("target", target_language)?;
    let flag_embedding = block("flag_embedding")?.matrix().clone();
    let encoder = block("encoder")?.matrix().clone();
    let encoder_bias = vector(block("encoder_bias")?)?;
    let transform = AffineTransform::from_labeled_matrix(&block("transform")?)?;
    let h = encoder.rows();
    let (e, f) = (source.embeddings.cols(), flag_embedding.cols());
    if encoder.cols() != (2 * window + 1) * (e + f)
        || target.embeddings.cols() != e
        || source.head.dim() != h
        || target.head.dim() != h
        || transform.dim() != h
        || encoder_bias.len() != h
    {
        return Err(ClarError::Dimension("model blocks have inconsistent shapes".into()));
    }
    Ok(TaggerModel { window, source, target, flag_embedding, encoder, encoder_bias, transform, rng_seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentence(lang: &str, words: &[&str], pred: usize, labels: &[Option<&str>]) -> Sentence {
        Sentence::new(
            words.iter().map(|w| w.to_string()).collect(),
            pred,
            labels.iter().map(|l| l.map(|n| LabelId::new(lang, n))).collect(),
        )
        .unwrap()
    }

    fn tiny_corpora() -> (Corpus, Corpus) {
        let s = Corpus::new(
            "src",
            vec![
                sentence("src", &["a", "b", "c"], 1, &[Some("X"), None, Some("Y")]),
                sentence("src", &["c", "b", "a", "d"], 1, &[Some("Y"), None, Some("X"), None]),
            ],
        );
        let t = Corpus::new(
            "tgt",
            vec![
                sentence("tgt", &["p", "q", "r"], 1, &[Some("P"), None, Some("Q")]),
                sentence("tgt", &["r", "q"], 1, &[Some("Q"), None]),
            ],
        );
        (s, t)
    }

    fn tiny_model(seed: u64) -> TaggerModel {
        let (s, t) = tiny_corpora();
        let cfg = TrainConfig { embed_dim: 3, flag_dim: 2, hidden_dim: 4, window: 1, ..TrainConfig::default() };
        init_model(&cfg, &LanguageInventory::from_corpus(&s), &LanguageInventory::from_corpus(&t), seed).unwrap()
    }

    #[test]
    fn probabilities_are_normalized() {
        let m = tiny_model(3);
        let (s, _) = tiny_corpora();
        for p in forward(&m, &s.sentences[1], "src").unwrap() {
            assert!(p.iter().all(|&x| x >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn unknown_language() {
        let m = tiny_model(3);
        let (s, _) = tiny_corpora();
        assert!(matches!(forward(&m, &s.sentences[0], "zz"), Err(ClarError::UnknownLanguage(_))));
    }

    #[test]
    fn oov_maps_to_unk() {
        let m = tiny_model(3);
        let a = sentence("src", &["never-seen", "b"], 1, &[None, None]);
        let b = sentence("src", &[UNK_TOKEN, "b"], 1, &[None, None]);
        assert_eq!(forward(&m, &a, "src").unwrap(), forward(&m, &b, "src").unwrap());
    }

    #[test]
    fn seeded_init_is_deterministic() {
        assert_eq!(tiny_model(9), tiny_model(9));
        assert_ne!(tiny_model(9), tiny_model(10));
    }

    #[test]
    fn empty_batch_is_an_error() {
        let m = tiny_model(1);
        assert!(matches!(base_loss(&m, &[], "src"), Err(ClarError::EmptyBatch)));
    }

    #[test]
    fn argmax_invariant_to_logit_shift() {
        let logits = [0.3, -1.2, 0.9, 0.1];
        let shifted: Vec<f64> = logits.iter().map(|x| x + 17.5).collect();
        assert_eq!(argmax(&softmax(&logits)), argmax(&softmax(&shifted)));
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }

    #[test]
    fn interleave_is_proportional() {
        let order = interleave(4, 2);
        assert_eq!(order.len(), 6);
        assert_eq!(order.iter().filter(|s| **s == Side::Target).count(), 2);
        assert_eq!(order[0], Side::Source);
        assert!(interleave(0, 3).iter().all(|s| *s == Side::Target));
    }

    #[test]
    fn metrics_conventions() {
        let m = Metrics::from_counts(BTreeMap::new());
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        let mut counts = BTreeMap::new();
        counts.insert(LabelId::new("x", "A"), LabelCounts { correct: 3, predicted: 3, gold: 3 });
        let m = Metrics::from_counts(counts);
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = TrainConfig {
            mode: Mode::Polyglot,
            matching: MatchConfig { cardinality: Some(Cardinality::All), source_capacity: 2, ..MatchConfig::default() },
            rematch_every: Some(4),
            ..TrainConfig::default()
        };
        let mut kv = KeyValues::parse(&cfg.to_config_text()).unwrap();
        assert_eq!(TrainConfig::from_key_values(&mut kv).unwrap(), cfg);
        kv.finish().unwrap();
    }

    #[test]
    fn invalid_config() {
        let cfg = TrainConfig { warmup_epochs: 5, epochs: 5, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn model_text_round_trip() {
        let mut m = tiny_model(4);
        m.transform.b[1] = 0.25;
        let text = save_model(&m);
        assert_eq!(load_model(&text).unwrap(), m);
    }

    #[test]
    fn combined_map_merges_shared_sources() {
        use crate::matcher::LabelPair;
        let pair = |s: &str, t: &str| LabelPair {
            source: LabelId::new("en", s),
            target: LabelId::new("cs", t),
            sq_distance: 0.0,
        };
        let p = Pairing { pairs: vec![pair("A3", "MAT"), pair("A3", "BEN"), pair("A0", "ACT")] };
        let map = combined_label_map(&p);
        assert_eq!(map.len(), 2);
        assert_eq!(map[&LabelId::new("cs", "MAT")], LabelId::new("cs", "BEN+MAT"));
        assert!(!map.contains_key(&LabelId::new("cs", "ACT")));
    }
}
