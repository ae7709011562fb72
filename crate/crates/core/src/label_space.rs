//! Argument labels, CoNLL-2009-style ingestion, label frequency statistics
//! and the line-oriented weight-matrix format shared by every other module.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use crate::error::{ClarError, Result};
use crate::linalg::Matrix;

/// Default fraction a label must exceed to take part in matching.
pub const DEFAULT_FREQUENCY_THRESHOLD: f64 = 0.01;

const FILLPRED_COLUMN: usize = 12;
const FIRST_ARG_COLUMN: usize = 14;

/// An argument label, namespaced by language so two label sets never collide.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelId {
    pub language: String,
    pub name: String,
}

impl LabelId {
    pub fn new(language: impl Into<String>, name: impl Into<String>) -> Self {
        LabelId { language: language.into(), name: name.into() }
    }
}

impl fmt::Display for LabelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.language, self.name)
    }
}

/// One predicate frame: a sentence with exactly one marked predicate.
#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub predicate_index: usize,
    pub labels: Vec<Option<LabelId>>,
}

impl Sentence {
    pub fn new(
        tokens: Vec<String>,
        predicate_index: usize,
        labels: Vec<Option<LabelId>>,
    ) -> Result<Self> {
        if tokens.is_empty() {
            return Err(ClarError::Degenerate("sentence has no tokens".into()));
        }
        if labels.len() != tokens.len() {
            return Err(ClarError::Dimension(format!(
                "{} labels for {} tokens",
                labels.len(),
                tokens.len()
            )));
        }
        if predicate_index >= tokens.len() {
            return Err(ClarError::Dimension(format!(
                "predicate index {predicate_index} out of range for {} tokens",
                tokens.len()
            )));
        }
        Ok(Sentence { tokens, predicate_index, labels })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub language: String,
    pub sentences: Vec<Sentence>,
}

impl Corpus {
    pub fn new(language: impl Into<String>, sentences: Vec<Sentence>) -> Self {
        Corpus { language: language.into(), sentences }
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }
}

/// Parses CoNLL-2009 layout text into one [`Sentence`] per marked predicate.
///
/// Only the running index, the surface form, FILLPRED and the argument
/// columns are interpreted; every other column is read and ignored.
pub fn parse_conll(text: &str, language: &str) -> Result<Vec<Sentence>> {
    let mut out = Vec::new();
    let mut block: Vec<(usize, Vec<&str>)> = Vec::new();
    let mut last_line = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        last_line = line_no;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !block.is_empty() {
                flush_block(&block, line_no - 1, language, &mut out)?;
                block.clear();
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < FIRST_ARG_COLUMN {
            return Err(ClarError::Parse {
                line: line_no,
                msg: format!("expected at least {FIRST_ARG_COLUMN} columns, found {}", cols.len()),
            });
        }
        if let Some((first_line, first)) = block.first() {
            if first.len() != cols.len() {
                return Err(ClarError::Parse {
                    line: line_no,
                    msg: format!(
                        "{} columns but line {first_line} of the same sentence has {}",
                        cols.len(),
                        first.len()
                    ),
                });
            }
        }
        block.push((line_no, cols));
    }
    if !block.is_empty() {
        flush_block(&block, last_line, language, &mut out)?;
    }
    Ok(out)
}

fn flush_block(
    block: &[(usize, Vec<&str>)],
    end_line: usize,
    language: &str,
    out: &mut Vec<Sentence>,
) -> Result<()> {
    for (pos, (line_no, cols)) in block.iter().enumerate() {
        let id: usize = cols[0].trim().parse().map_err(|_| ClarError::Parse {
            line: *line_no,
            msg: format!("token index {:?} is not an integer", cols[0]),
        })?;
        if id != pos + 1 {
            return Err(ClarError::Structure {
                line: end_line,
                msg: format!("token index {id} at line {line_no}, expected {}", pos + 1),
            });
        }
    }
    let predicates: Vec<usize> = block
        .iter()
        .enumerate()
        .filter(|(_, (_, cols))| cols[FILLPRED_COLUMN] == "Y")
        .map(|(i, _)| i)
        .collect();
    let arg_columns = block[0].1.len() - FIRST_ARG_COLUMN;
    if predicates.len() != arg_columns {
        return Err(ClarError::Structure {
            line: end_line,
            msg: format!(
                "{} predicates marked but {arg_columns} argument columns",
                predicates.len()
            ),
        });
    }
    let tokens: Vec<String> = block.iter().map(|(_, cols)| cols[1].to_string()).collect();
    for (frame, &pred) in predicates.iter().enumerate() {
        let labels = block
            .iter()
            .map(|(_, cols)| match cols[FIRST_ARG_COLUMN + frame] {
                "_" => None,
                name => Some(LabelId::new(language, name)),
            })
            .collect();
        out.push(Sentence::new(tokens.clone(), pred, labels)?);
    }
    Ok(())
}

/// Renders frames as CoNLL-2009 text, one single-predicate sentence per frame.
pub fn write_conll(sentences: &[Sentence]) -> String {
    let mut s = String::new();
    for sent in sentences {
        for (i, tok) in sent.tokens.iter().enumerate() {
            let is_pred = i == sent.predicate_index;
            let fill = if is_pred { "Y" } else { "_" };
            let sense = if is_pred { format!("{tok}.01") } else { "_".to_string() };
            let arg = sent.labels[i].as_ref().map_or("_", |l| l.name.as_str());
            s.push_str(&format!(
                "{}\t{tok}\t{tok}\t{tok}\t_\t_\t_\t_\t0\t0\t_\t_\t{fill}\t{sense}\t{arg}\n",
                i + 1
            ));
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrequencyTable {
    counts: BTreeMap<LabelId, u64>,
    total: u64,
}

impl FrequencyTable {
    pub fn from_counts(counts: impl IntoIterator<Item = (LabelId, u64)>) -> Self {
        let mut table = FrequencyTable::default();
        for (label, n) in counts {
            table.add(label, n);
        }
        table
    }

    pub fn add(&mut self, label: LabelId, n: u64) {
        *self.counts.entry(label).or_insert(0) += n;
        self.total += n;
    }

    pub fn counts(&self) -> &BTreeMap<LabelId, u64> {
        &self.counts
    }

    pub fn count(&self, label: &LabelId) -> u64 {
        self.counts.get(label).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (label, n) in &self.counts {
            s.push_str(&format!("{}\t{}\t{n}\n", label.language, label.name));
        }
        s.push_str(&format!("TOTAL\t{}\n", self.total));
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut table = FrequencyTable::default();
        let mut declared = None;
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            if declared.is_some() {
                return Err(ClarError::Format { line: line_no, msg: "content after TOTAL line".into() });
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = |msg: String| ClarError::Format { line: line_no, msg };
            match cols.as_slice() {
                ["TOTAL", n] => {
                    declared = Some(n.parse::<u64>().map_err(|_| bad(format!("bad total {n:?}")))?)
                }
                [lang, name, n] => {
                    let n = n.parse::<u64>().map_err(|_| bad(format!("bad count {n:?}")))?;
                    if name.is_empty() {
                        return Err(bad("empty label name".into()));
                    }
                    let label = LabelId::new(*lang, *name);
                    if table.counts.contains_key(&label) {
                        return Err(bad(format!("duplicate label {label}")));
                    }
                    table.add(label, n);
                }
                _ => return Err(bad(format!("expected 3 columns, found {}", cols.len()))),
            }
        }
        match declared {
            Some(t) if t == table.total => Ok(table),
            Some(t) => Err(ClarError::Format {
                line: text.lines().count(),
                msg: format!("TOTAL {t} does not match sum of counts {}", table.total),
            }),
            None => Err(ClarError::Format { line: text.lines().count(), msg: "missing TOTAL line".into() }),
        }
    }
}

/// Counts every non-null token label in the corpus.
pub fn count_label_frequencies(corpus: &Corpus) -> FrequencyTable {
    let mut table = FrequencyTable::default();
    for label in corpus.sentences.iter().flat_map(|s| s.labels.iter().flatten()) {
        table.add(label.clone(), 1);
    }
    table
}

/// Labels whose share of all occurrences is strictly greater than `threshold`.
pub fn filter_frequent_labels(freqs: &FrequencyTable, threshold: f64) -> Result<BTreeSet<LabelId>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(ClarError::Config(format!("frequency threshold {threshold} not in (0, 1)")));
    }
    if freqs.total() == 0 {
        return Err(ClarError::EmptyTable);
    }
    let total = freqs.total() as f64;
    Ok(freqs
        .counts()
        .iter()
        .filter(|(_, &n)| n as f64 / total > threshold)
        .map(|(l, _)| l.clone())
        .collect())
}

/// Per-label weight vectors, e.g. the rows of a softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    labels: Vec<LabelId>,
    rows: Matrix,
    index: HashMap<LabelId, usize>,
}

impl LabeledMatrix {
    pub fn new(labels: Vec<LabelId>, rows: Matrix) -> Result<Self> {
        if labels.len() != rows.rows() {
            return Err(ClarError::Dimension(format!(
                "{} labels for {} rows",
                labels.len(),
                rows.rows()
            )));
        }
        if !labels.is_empty() && rows.cols() == 0 {
            return Err(ClarError::Dimension("row dimension must be at least 1".into()));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if l.name.is_empty() {
                return Err(ClarError::Format { line: i + 1, msg: "empty label name".into() });
            }
            if index.insert(l.clone(), i).is_some() {
                return Err(ClarError::Format { line: i + 1, msg: format!("duplicate label {l}") });
            }
        }
        Ok(LabeledMatrix { labels, rows, index })
    }

    pub fn labels(&self) -> &[LabelId] {
        &self.labels
    }

    pub fn matrix(&self) -> &Matrix {
        &self.rows
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.rows
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn position(&self, label: &LabelId) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn row_of(&self, label: &LabelId) -> Option<&[f64]> {
        self.position(label).map(|i| self.rows.row(i))
    }

    /// Stacks the rows for `labels`, in the given order.
    pub fn select(&self, labels: &[LabelId]) -> Result<LabeledMatrix> {
        let mut rows = Vec::with_capacity(labels.len());
        for l in labels {
            let r = self
                .row_of(l)
                .ok_or_else(|| ClarError::Degenerate(format!("no weight row for label {l}")))?;
            rows.push(r.to_vec());
        }
        let m = if rows.is_empty() { Matrix::zeros(0, self.dim()) } else { Matrix::from_rows(&rows)? };
        LabeledMatrix::new(labels.to_vec(), m)
    }
}

/// Serializes one line per label: `language<TAB>name<TAB>v1<TAB>...<TAB>vd`.
pub fn save_weight_matrix(m: &LabeledMatrix) -> String {
    let mut s = String::new();
    for (label, row) in m.labels().iter().zip(m.matrix().iter_rows()) {
        s.push_str(&label.language);
        s.push('\t');
        s.push_str(&label.name);
        for v in row {
            s.push('\t');
            s.push_str(&format_real(*v));
        }
        s.push('\n');
    }
    s
}

pub fn load_weight_matrix(text: &str) -> Result<LabeledMatrix> {
    load_weight_matrix_at(text, 1)
}

/// Like [`load_weight_matrix`], reporting line numbers offset by `first_line - 1`.
pub(crate) fn load_weight_matrix_at(text: &str, first_line: usize) -> Result<LabeledMatrix> {
    let mut labels = Vec::new();
    let mut seen = BTreeSet::new();
    let mut data = Vec::new();
    let mut dim = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = first_line + idx;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| ClarError::Format { line: line_no, msg };
        let mut cols = line.split('\t');
        let lang = cols.next().unwrap_or_default();
        let name = cols.next().ok_or_else(|| bad("missing label name".into()))?;
        if name.is_empty() {
            return Err(bad("empty label name".into()));
        }
        let start = data.len();
        for c in cols {
            let v: f64 = c.parse().map_err(|_| bad(format!("unparseable real {c:?}")))?;
            data.push(v);
        }
        let d = data.len() - start;
        if d == 0 {
            return Err(bad("row has no values".into()));
        }
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(bad(format!("row has {d} values, expected {expected}")))
            }
            _ => {}
        }
        let label = LabelId::new(lang, name);
        if !seen.insert(label.clone()) {
            return Err(bad(format!("duplicate label {label}")));
        }
        labels.push(label);
    }
    let rows = Matrix::from_vec(labels.len(), dim.unwrap_or(0), data)?;
    LabeledMatrix::new(labels, rows)
}

/// 17 significant digits, enough to round-trip any f64.
pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}
