//! Amino-acid vocabulary, tokenization, FASTA and labeled-CSV ingestion,
//! batching, and residue frequency statistics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("empty sequence")]
    EmptySequence,
    #[error("invalid character {ch:?} at position {pos}")]
    InvalidChar { ch: char, pos: usize },
    #[error("unknown token id {id}")]
    UnknownTokenId { id: usize },
    #[error("sequence decodes to no residues")]
    NoResidues,
    #[error("token sequence violates layout: {0}")]
    BadTokenLayout(String),
    #[error("FASTA line {line}: sequence data before the first '>' header")]
    FastaDataBeforeHeader { line: usize },
    #[error("CSV header missing column {column:?}")]
    CsvMissingColumn { column: &'static str },
    #[error("CSV line {line}: {msg}")]
    CsvRow { line: usize, msg: String },
    #[error("CSV: {0}")]
    Csv(String),
}

// ── Vocabulary ───────────────────────────────────────────────────────

/// The 20 canonical residues, alphabetical by one-letter code.
pub const CANONICAL: [char; 20] = [
    'A', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'K', 'L', 'M', 'N', 'P', 'Q', 'R', 'S', 'T', 'V',
    'W', 'Y',
];

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Unknown / nonstandard residue.
pub const UNK: usize = 3;

/// Fixed model vocabulary size. Ids 0..=23 are assigned (PAD, BOS, EOS, X,
/// then the 20 canonical residues); id 24 is reserved and never produced by
/// the tokenizer.
pub const VOCAB_SIZE: usize = 25;

/// Id for a canonical residue letter (uppercase).
fn canonical_id(c: char) -> Option<usize> {
    CANONICAL.iter().position(|&r| r == c).map(|i| i + 4)
}

/// Residue letter for an id, if the id names a canonical residue.
pub fn id_to_residue(id: usize) -> Option<char> {
    if (4..24).contains(&id) {
        Some(CANONICAL[id - 4])
    } else {
        None
    }
}

// ── TokenSequence ────────────────────────────────────────────────────

/// Encoded sequence: BOS, residues, EOS, then optional PAD tail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    original_length: usize,
}

impl TokenSequence {
    /// Validate the layout invariants: starts with BOS, exactly one EOS
    /// after the residues, PAD only in the tail.
    pub fn from_ids(ids: Vec<usize>) -> Result<TokenSequence, DataError> {
        if ids.len() < 2 || ids[0] != BOS {
            return Err(DataError::BadTokenLayout(
                "must begin with BOS and hold at least BOS+EOS".into(),
            ));
        }
        let mut eos_at = None;
        for (i, &id) in ids.iter().enumerate().skip(1) {
            if id >= VOCAB_SIZE {
                return Err(DataError::UnknownTokenId { id });
            }
            match eos_at {
                None => match id {
                    EOS => eos_at = Some(i),
                    PAD => {
                        return Err(DataError::BadTokenLayout(format!(
                            "PAD at position {i} before EOS"
                        )))
                    }
                    BOS => {
                        return Err(DataError::BadTokenLayout(format!(
                            "interior BOS at position {i}"
                        )))
                    }
                    _ => {}
                },
                Some(_) => {
                    if id != PAD {
                        return Err(DataError::BadTokenLayout(format!(
                            "non-PAD token after EOS at position {i}"
                        )));
                    }
                }
            }
        }
        let eos_at = eos_at
            .ok_or_else(|| DataError::BadTokenLayout("missing EOS".into()))?;
        Ok(TokenSequence {
            ids,
            original_length: eos_at - 1,
        })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Residue count, excluding specials and padding.
    pub fn original_length(&self) -> usize {
        self.original_length
    }

    /// True at non-PAD positions.
    pub fn pad_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id != PAD).collect()
    }

    /// Copy padded with PAD up to `len` tokens.
    pub fn padded_to(&self, len: usize) -> TokenSequence {
        debug_assert!(len >= self.ids.len());
        let mut ids = self.ids.clone();
        ids.resize(len, PAD);
        TokenSequence {
            ids,
            original_length: self.original_length,
        }
    }

    /// Copy with the PAD tail removed.
    pub fn trimmed(&self) -> TokenSequence {
        let end = self
            .ids
            .iter()
            .position(|&id| id == PAD)
            .unwrap_or(self.ids.len());
        TokenSequence {
            ids: self.ids[..end].to_vec(),
            original_length: self.original_length,
        }
    }
}

/// Encode a raw amino-acid string. Case-insensitive; the ambiguity codes
/// B, Z, U, O, J and any other letter map to X. Non-letters are format
/// errors naming the offending position.
pub fn encode(seq: &str) -> Result<TokenSequence, DataError> {
    if seq.is_empty() {
        return Err(DataError::EmptySequence);
    }
    let mut ids = Vec::with_capacity(seq.chars().count() + 2);
    ids.push(BOS);
    for (pos, ch) in seq.chars().enumerate() {
        if !ch.is_ascii_alphabetic() {
            return Err(DataError::InvalidChar { ch, pos });
        }
        let up = ch.to_ascii_uppercase();
        ids.push(canonical_id(up).unwrap_or(UNK));
    }
    ids.push(EOS);
    let original_length = ids.len() - 2;
    Ok(TokenSequence {
        ids,
        original_length,
    })
}

/// Inverse of [`encode`] on canonical strings: specials and padding are
/// dropped, X decodes to the letter 'X'.
pub fn decode(tokens: &TokenSequence) -> Result<String, DataError> {
    decode_ids(tokens.ids())
}

pub fn decode_ids(ids: &[usize]) -> Result<String, DataError> {
    let mut out = String::new();
    for &id in ids {
        match id {
            PAD | BOS | EOS => {}
            UNK => out.push('X'),
            _ => match id_to_residue(id) {
                Some(c) => out.push(c),
                None => return Err(DataError::UnknownTokenId { id }),
            },
        }
    }
    if out.is_empty() {
        return Err(DataError::NoResidues);
    }
    Ok(out)
}

// ── FASTA ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FastaRecord {
    pub header: String,
    pub sequence: String,
}

impl FastaRecord {
    /// Record id: first whitespace-delimited token of the header.
    pub fn id(&self) -> &str {
        self.header.split_whitespace().next().unwrap_or("")
    }
}

/// Parse FASTA text; multi-line sequences are concatenated and whitespace
/// inside sequence lines is stripped.
pub fn parse_fasta(text: &str) -> Result<Vec<FastaRecord>, DataError> {
    let mut records: Vec<FastaRecord> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('>') {
            records.push(FastaRecord {
                header: header.trim().to_string(),
                sequence: String::new(),
            });
        } else {
            match records.last_mut() {
                Some(rec) => {
                    rec.sequence
                        .extend(line.chars().filter(|c| !c.is_whitespace()));
                }
                None => return Err(DataError::FastaDataBeforeHeader { line: lineno + 1 }),
            }
        }
    }
    Ok(records)
}

/// Serialize records as FASTA, wrapping sequences at 60 columns.
pub fn write_fasta(records: &[FastaRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        out.push('>');
        out.push_str(&rec.header);
        out.push('\n');
        for chunk in rec.sequence.as_bytes().chunks(60) {
            out.push_str(std::str::from_utf8(chunk).expect("sequence is ASCII"));
            out.push('\n');
        }
    }
    out
}

// ── Labeled CSV ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub sequence: String,
    pub label: f64,
    pub split: Split,
    /// 1-based source line, kept for error reporting.
    pub line: u64,
}

/// Load a `sequence,label,split` CSV (UTF-8, LF or CRLF, trailing newline
/// tolerated). Errors carry the offending line number.
pub fn load_labeled_csv(text: &str) -> Result<Vec<LabeledExample>, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| DataError::Csv(e.to_string()))?
        .clone();
    let col = |name: &'static str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or(DataError::CsvMissingColumn { column: name })
    };
    let seq_col = col("sequence")?;
    let label_col = col("label")?;
    let split_col = col("split")?;

    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| DataError::Csv(e.to_string()))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |idx: usize| -> Result<&str, DataError> {
            record.get(idx).ok_or_else(|| DataError::CsvRow {
                line: line as usize,
                msg: "row has fewer fields than the header".into(),
            })
        };
        let sequence = field(seq_col)?.to_string();
        if sequence.is_empty() {
            return Err(DataError::CsvRow {
                line: line as usize,
                msg: "empty sequence".into(),
            });
        }
        let label_raw = field(label_col)?;
        let label: f64 = label_raw.parse().map_err(|_| DataError::CsvRow {
            line: line as usize,
            msg: format!("unparsable label {label_raw:?}"),
        })?;
        if !label.is_finite() {
            return Err(DataError::CsvRow {
                line: line as usize,
                msg: format!("label {label_raw:?} is not finite"),
            });
        }
        let split_raw = field(split_col)?;
        let split = Split::parse(split_raw).ok_or_else(|| DataError::CsvRow {
            line: line as usize,
            msg: format!("split must be train/valid/test, got {split_raw:?}"),
        })?;
        out.push(LabeledExample {
            sequence,
            label,
            split,
            line,
        });
    }
    Ok(out)
}

/// For classification tasks: every label must be exactly 0 or 1.
pub fn require_binary_labels(examples: &[LabeledExample]) -> Result<(), DataError> {
    for ex in examples {
        if ex.label != 0.0 && ex.label != 1.0 {
            return Err(DataError::CsvRow {
                line: ex.line as usize,
                msg: format!(
                    "classification label must be 0 or 1, got {}",
                    ex.label
                ),
            });
        }
    }
    Ok(())
}

// ── Batching ─────────────────────────────────────────────────────────

/// Index-level batch plan: which examples go together, which were skipped
/// for exceeding the token budget.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
    pub skipped: Vec<usize>,
}

/// Plan batches over raw residue lengths under a token budget.
///
/// A sequence costs `length + 2` tokens (BOS/EOS); a batch costs
/// `rows * max_padded_len` and must stay within `max_tokens`. Training
/// passes `shuffle = true`; ordering is deterministic for a given seed.
pub fn plan_batches(lengths: &[usize], max_tokens: usize, seed: u64, shuffle: bool) -> BatchPlan {
    let mut skipped = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    for (i, &len) in lengths.iter().enumerate() {
        if len + 2 > max_tokens {
            skipped.push(i);
        } else {
            order.push(i);
        }
    }
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    // Bucket by length so padding waste stays low.
    order.sort_by_key(|&i| lengths[i]);

    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_max = 0usize;
    for i in order {
        let padded = lengths[i] + 2;
        let new_max = current_max.max(padded);
        if !current.is_empty() && (current.len() + 1) * new_max > max_tokens {
            batches.push(std::mem::take(&mut current));
            current_max = 0;
        }
        current_max = current_max.max(padded);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    BatchPlan { batches, skipped }
}

/// Pad a batch of sequences to their common maximum length.
pub fn pad_batch(seqs: &[&TokenSequence]) -> Vec<TokenSequence> {
    let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    seqs.iter().map(|s| s.padded_to(max_len)).collect()
}

/// Padded batches over encoded sequences: shuffles with `seed` when
/// `shuffle` is set, buckets by length, pads each batch to its own max.
/// Pad positions are recoverable per row via [`TokenSequence::pad_mask`].
/// Returns the batches and the indices skipped for exceeding `max_tokens`.
pub fn make_batches(
    seqs: &[TokenSequence],
    max_tokens: usize,
    seed: u64,
    shuffle: bool,
) -> (Vec<Vec<TokenSequence>>, Vec<usize>) {
    let lengths: Vec<usize> = seqs.iter().map(|s| s.original_length()).collect();
    let plan = plan_batches(&lengths, max_tokens, seed, shuffle);
    let batches = plan
        .batches
        .iter()
        .map(|idxs| {
            let rows: Vec<&TokenSequence> = idxs.iter().map(|&i| &seqs[i]).collect();
            pad_batch(&rows)
        })
        .collect();
    (batches, plan.skipped)
}

// ── Residue frequencies ──────────────────────────────────────────────

/// Per-residue occurrence counts over a corpus.
#[derive(Debug, Clone, Default)]
pub struct FreqReport {
    /// Counts indexed like [`CANONICAL`].
    pub counts: [u64; 20],
    /// Nonstandard/unknown residues (the X bucket).
    pub x_count: u64,
}

impl FreqReport {
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a str>) -> FreqReport {
        let mut report = FreqReport::default();
        for seq in seqs {
            for ch in seq.chars() {
                let up = ch.to_ascii_uppercase();
                match CANONICAL.iter().position(|&c| c == up) {
                    Some(i) => report.counts[i] += 1,
                    None => report.x_count += 1,
                }
            }
        }
        report
    }

    pub fn total_with_x(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.x_count
    }

    pub fn total_canonical(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Percentage of `residue` with X included in the denominator.
    pub fn percent_with_x(&self, residue: char) -> f64 {
        self.percent(residue, self.total_with_x())
    }

    /// Percentage of `residue` over canonical residues only.
    pub fn percent_canonical(&self, residue: char) -> f64 {
        self.percent(residue, self.total_canonical())
    }

    fn percent(&self, residue: char, denom: u64) -> f64 {
        if denom == 0 {
            return 0.0;
        }
        let i = CANONICAL
            .iter()
            .position(|&c| c == residue)
            .expect("canonical residue");
        100.0 * self.counts[i] as f64 / denom as f64
    }

    /// Percentages over canonical residues as an ordered map.
    pub fn percentages_canonical(&self) -> BTreeMap<char, f64> {
        CANONICAL
            .iter()
            .map(|&c| (c, self.percent_canonical(c)))
            .collect()
    }
}

/// Full residue names in [`CANONICAL`] order, for frequency tables.
pub const RESIDUE_NAMES: [&str; 20] = [
    "Alanine",
    "Cysteine",
    "Aspartic acid",
    "Glutamic acid",
    "Phenylalanine",
    "Glycine",
    "Histidine",
    "Isoleucine",
    "Lysine",
    "Leucine",
    "Methionine",
    "Asparagine",
    "Proline",
    "Glutamine",
    "Arginine",
    "Serine",
    "Threonine",
    "Valine",
    "Tryptophan",
    "Tyrosine",
];
