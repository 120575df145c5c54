//! Token features: word, POS, and character-level embeddings.
//!
//! Each token becomes `concat(word, pos, char)` where the character vector
//! is the concatenated final hidden states of a character Bi-LSTM over the
//! token's surface. Word vectors come from a pretrained (or synthetic,
//! seeded) table and are frozen by default; POS and character parameters
//! train with the rest of the model.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read as _;

use crate::corpus::{Batch, Sentence};
use crate::error::{Error, Result};
use crate::numerics::{init, NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::util::{derive_seed, rng_from_seed, stream, Rng};

pub const WORD_DIM_DEFAULT: usize = 200;
pub const POS_DIM_DEFAULT: usize = 50;
pub const CHAR_DIM_DEFAULT: usize = 32;
pub const CHAR_HIDDEN_DEFAULT: usize = 10;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub word_dim: usize,
    pub pos_dim: usize,
    pub char_dim: usize,
    pub char_hidden: usize,
    /// Finetune the word table instead of keeping it frozen.
    pub train_word_embeddings: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            word_dim: WORD_DIM_DEFAULT,
            pos_dim: POS_DIM_DEFAULT,
            char_dim: CHAR_DIM_DEFAULT,
            char_hidden: CHAR_HIDDEN_DEFAULT,
            train_word_embeddings: false,
        }
    }
}

impl EncoderConfig {
    /// Width of one token's feature row.
    pub fn feature_dim(&self) -> usize {
        self.word_dim + self.pos_dim + 2 * self.char_hidden
    }
}

/// A word-embedding table plus its surface-to-row map. Row 0 is the unk row.
#[derive(Debug, Clone)]
pub struct WordEmbeddings {
    pub dim: usize,
    rows: Tensor,
    index: BTreeMap<String, usize>,
}

impl WordEmbeddings {
    pub fn vocab_len(&self) -> usize {
        self.rows.rows()
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    /// Case-sensitive lookup with a lowercase fallback before unk (row 0).
    pub fn row_of(&self, surface: &str) -> usize {
        if let Some(&row) = self.index.get(surface) {
            return row;
        }
        let lower = surface.to_lowercase();
        self.index.get(&lower).copied().unwrap_or(0)
    }

    pub fn vector(&self, surface: &str) -> &[f64] {
        self.rows.row(self.row_of(surface))
    }
}

/// Loads the standard text format: a `<count> <dim>` header line, then one
/// `word v1 .. vdim` line per word. `expected_dim` defaults to 200.
pub fn load_word_embeddings(
    text: &str,
    file: &str,
    expected_dim: Option<usize>,
    unk_seed: u64,
) -> Result<WordEmbeddings> {
    let expected = expected_dim.unwrap_or(WORD_DIM_DEFAULT);
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        file: file.to_string(),
        line: 1,
        message: "empty embedding file".into(),
    })?;
    let mut parts = header.split_whitespace();
    let count: usize = parts
        .next()
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| Error::Parse {
            file: file.to_string(),
            line: 1,
            message: "header must be `<count> <dim>`".into(),
        })?;
    let dim: usize = parts
        .next()
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| Error::Parse {
            file: file.to_string(),
            line: 1,
            message: "header must be `<count> <dim>`".into(),
        })?;
    if dim != expected {
        return Err(Error::Config(format!(
            "embedding dim {dim} does not match configured dim {expected}"
        )));
    }

    let mut rng = rng_from_seed(derive_seed(unk_seed, &[stream::WORD_EMB]));
    let unk = init::normal_embedding(&mut rng, 1, dim);
    let mut data: Vec<f64> = unk.data().to_vec();
    let mut index = BTreeMap::new();
    let mut read = 0usize;
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let word = parts.next().ok_or_else(|| Error::Parse {
            file: file.to_string(),
            line: line_no,
            message: "missing word".into(),
        })?;
        let values: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                file: file.to_string(),
                line: line_no,
                message: "non-numeric embedding value".into(),
            })?;
        if values.len() != dim {
            return Err(Error::Parse {
                file: file.to_string(),
                line: line_no,
                message: format!("expected {dim} values, found {}", values.len()),
            });
        }
        if index.contains_key(word) {
            return Err(Error::Parse {
                file: file.to_string(),
                line: line_no,
                message: format!("duplicate word `{word}`"),
            });
        }
        index.insert(word.to_string(), index.len() + 1);
        data.extend_from_slice(&values);
        read += 1;
    }
    if read != count {
        return Err(Error::Parse {
            file: file.to_string(),
            line: 1,
            message: format!("header said {count} words, file has {read}"),
        });
    }
    Ok(WordEmbeddings {
        dim,
        rows: Tensor::from_vec(read + 1, dim, data)?,
        index,
    })
}

pub fn load_word_embeddings_file(
    path: &std::path::Path,
    expected_dim: Option<usize>,
    unk_seed: u64,
) -> Result<WordEmbeddings> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut text = String::new();
    std::io::BufReader::new(file)
        .read_to_string(&mut text)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    load_word_embeddings(&text, &path.display().to_string(), expected_dim, unk_seed)
}

/// A deterministic random table over the corpus vocabulary, for runs without
/// a pretrained embedding file.
pub fn synthetic_word_embeddings(batches: &[Batch], dim: usize, seed: u64) -> WordEmbeddings {
    let mut vocab: BTreeSet<String> = BTreeSet::new();
    for batch in batches {
        for sentence in &batch.sentences {
            for token in &sentence.tokens {
                vocab.insert(token.surface.clone());
            }
        }
    }
    let mut rng = rng_from_seed(derive_seed(seed, &[stream::WORD_EMB]));
    let rows = init::normal_embedding(&mut rng, vocab.len() + 1, dim);
    let index = vocab
        .into_iter()
        .enumerate()
        .map(|(i, w)| (w, i + 1))
        .collect();
    WordEmbeddings {
        dim,
        rows,
        index,
    }
}

/// POS-tag and character vocabularies, built from the corpus; id 0 is unk in
/// both. Derived only from token columns (no label information) so clean and
/// corrupted corpora produce identical maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pos: BTreeMap<String, usize>,
    chars: BTreeMap<char, usize>,
}

impl Vocab {
    pub fn from_batches(batches: &[Batch]) -> Vocab {
        let mut pos_set = BTreeSet::new();
        let mut char_set = BTreeSet::new();
        for batch in batches {
            for sentence in &batch.sentences {
                for token in &sentence.tokens {
                    pos_set.insert(token.pos.clone());
                    char_set.extend(token.surface.chars());
                }
            }
        }
        Vocab {
            pos: pos_set
                .into_iter()
                .enumerate()
                .map(|(i, p)| (p, i + 1))
                .collect(),
            chars: char_set
                .into_iter()
                .enumerate()
                .map(|(i, c)| (c, i + 1))
                .collect(),
        }
    }

    pub fn pos_len(&self) -> usize {
        self.pos.len() + 1
    }

    pub fn char_len(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn pos_id(&self, pos: &str) -> usize {
        self.pos.get(pos).copied().unwrap_or(0)
    }

    pub fn char_id(&self, c: char) -> usize {
        self.chars.get(&c).copied().unwrap_or(0)
    }
}

/// Parameter ids of one LSTM direction with fused gates. The gate matrix
/// maps `concat(x, h)` to the four gate pre-activations in i,f,g,o order.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub gates: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> LstmParams {
        let gates = store.register(
            &format!("{prefix}.gates"),
            init::xavier_uniform(rng, input_dim + hidden, 4 * hidden),
            true,
        );
        let bias = store.register(
            &format!("{prefix}.bias"),
            Tensor::zeros(1, 4 * hidden),
            true,
        );
        LstmParams {
            gates,
            bias,
            input_dim,
            hidden,
        }
    }

    /// One cell step; `x` is `1×input_dim`, the state vectors are `1×hidden`.
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let hid = self.hidden;
        let xh = tape.concat_cols(&[x, h])?;
        let weights = tape.param(store, self.gates);
        let bias = tape.param(store, self.bias);
        let pre = tape.matmul(xh, weights)?;
        let pre = tape.add(pre, bias)?;
        let i_gate = tape.slice(pre, 0..1, 0..hid)?;
        let f_gate = tape.slice(pre, 0..1, hid..2 * hid)?;
        let g_gate = tape.slice(pre, 0..1, 2 * hid..3 * hid)?;
        let o_gate = tape.slice(pre, 0..1, 3 * hid..4 * hid)?;
        let i = tape.sigmoid(i_gate);
        let f = tape.sigmoid(f_gate);
        let g = tape.tanh(g_gate);
        let o = tape.sigmoid(o_gate);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_new = tape.add(fc, ig)?;
        let c_act = tape.tanh(c_new);
        let h_new = tape.mul(o, c_act)?;
        Ok((h_new, c_new))
    }

    /// Runs the cell over a sequence from zero state, returning all hidden
    /// states in input order.
    pub fn run(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        let mut h = tape.input(Tensor::zeros(1, self.hidden));
        let mut c = tape.input(Tensor::zeros(1, self.hidden));
        let mut states = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let (h_new, c_new) = self.step(tape, store, x, h, c)?;
            h = h_new;
            c = c_new;
            states.push(h);
        }
        Ok(states)
    }
}

/// Parameter handles for the token feature encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    word_table: ParamId,
    pos_table: ParamId,
    char_table: ParamId,
    char_fwd: LstmParams,
    char_bwd: LstmParams,
    word_index: std::rc::Rc<WordIndex>,
}

/// Shared surface-to-row map; the frozen table itself lives in the store.
#[derive(Debug)]
pub struct WordIndex {
    index: BTreeMap<String, usize>,
}

impl WordIndex {
    pub fn row_of(&self, surface: &str) -> usize {
        if let Some(&row) = self.index.get(surface) {
            return row;
        }
        let lower = surface.to_lowercase();
        self.index.get(&lower).copied().unwrap_or(0)
    }
}

impl Encoder {
    pub fn register(
        store: &mut ParamStore,
        config: &EncoderConfig,
        vocab: &Vocab,
        word: &WordEmbeddings,
        rng: &mut Rng,
    ) -> Result<Encoder> {
        if word.dim != config.word_dim {
            return Err(Error::Config(format!(
                "word table dim {} does not match configured dim {}",
                word.dim, config.word_dim
            )));
        }
        let word_table = store.register(
            "encoder.word",
            word.rows.clone(),
            config.train_word_embeddings,
        );
        let pos_table = store.register(
            "encoder.pos",
            init::normal_embedding(rng, vocab.pos_len(), config.pos_dim),
            true,
        );
        let char_table = store.register(
            "encoder.char",
            init::normal_embedding(rng, vocab.char_len(), config.char_dim),
            true,
        );
        let char_fwd = LstmParams::register(
            store,
            "encoder.char_lstm.fwd",
            config.char_dim,
            config.char_hidden,
            rng,
        );
        let char_bwd = LstmParams::register(
            store,
            "encoder.char_lstm.bwd",
            config.char_dim,
            config.char_hidden,
            rng,
        );
        Ok(Encoder {
            config: config.clone(),
            word_table,
            pos_table,
            char_table,
            char_fwd,
            char_bwd,
            word_index: std::rc::Rc::new(WordIndex {
                index: word.index.clone(),
            }),
        })
    }

    /// Rebuilds handles against a store that already contains the encoder
    /// parameters (checkpoint restore path).
    pub fn attach(
        store: &ParamStore,
        config: &EncoderConfig,
        word_index: std::rc::Rc<WordIndex>,
    ) -> Result<Encoder> {
        let get = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::Container(format!("missing parameter `{name}`")))
        };
        Ok(Encoder {
            config: config.clone(),
            word_table: get("encoder.word")?,
            pos_table: get("encoder.pos")?,
            char_table: get("encoder.char")?,
            char_fwd: LstmParams {
                gates: get("encoder.char_lstm.fwd.gates")?,
                bias: get("encoder.char_lstm.fwd.bias")?,
                input_dim: config.char_dim,
                hidden: config.char_hidden,
            },
            char_bwd: LstmParams {
                gates: get("encoder.char_lstm.bwd.gates")?,
                bias: get("encoder.char_lstm.bwd.bias")?,
                input_dim: config.char_dim,
                hidden: config.char_hidden,
            },
            word_index,
        })
    }

    pub fn word_index(&self) -> std::rc::Rc<WordIndex> {
        std::rc::Rc::clone(&self.word_index)
    }

    /// Encodes a sentence into one `1×feature_dim` row per token.
    pub fn encode_tokens(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        vocab: &Vocab,
        sentence: &Sentence,
    ) -> Result<Vec<NodeId>> {
        let mut rows = Vec::with_capacity(sentence.tokens.len());
        for token in &sentence.tokens {
            let word_row = self.word_index.row_of(&token.surface);
            let word = tape.lookup(store, self.word_table, &[word_row])?;
            let pos = tape.lookup(store, self.pos_table, &[vocab.pos_id(&token.pos)])?;

            let char_ids: Vec<usize> =
                token.surface.chars().map(|c| vocab.char_id(c)).collect();
            let char_vectors = tape.lookup(store, self.char_table, &char_ids)?;
            let per_char: Vec<NodeId> = (0..char_ids.len())
                .map(|i| tape.slice(char_vectors, i..i + 1, 0..self.config.char_dim))
                .collect::<Result<_>>()?;
            let fwd_states = self.char_fwd.run(tape, store, &per_char)?;
            let reversed: Vec<NodeId> = per_char.iter().rev().copied().collect();
            let bwd_states = self.char_bwd.run(tape, store, &reversed)?;
            let char_final = tape.concat_cols(&[
                *fwd_states.last().expect("non-empty surface"),
                *bwd_states.last().expect("non-empty surface"),
            ])?;

            rows.push(tape.concat_cols(&[word, pos, char_final])?);
        }
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_corpus, Split, Token, TriggerTag};
    use crate::numerics::grad_check;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            word_dim: 6,
            pos_dim: 3,
            char_dim: 4,
            char_hidden: 2,
            train_word_embeddings: false,
        }
    }

    fn sentence(words: &[&str]) -> Sentence {
        Sentence {
            tokens: words
                .iter()
                .map(|w| Token {
                    surface: w.to_string(),
                    pos: "NN".to_string(),
                    lemma: w.to_string(),
                })
                .collect(),
            tags: words.iter().map(|_| TriggerTag::O).collect(),
            doc_id: "d".into(),
            batch_ordinal: 1,
            index_in_batch: 0,
            split: Split::Train,
        }
    }

    fn corpus_for(words: &[&str]) -> Vec<crate::corpus::Batch> {
        let mut text = String::from("# doc=d batch=b split=train\n");
        for w in words {
            text.push_str(&format!("{w}\tNN\t{w}\tO\n"));
        }
        text.push('\n');
        parse_corpus(&text).unwrap()
    }

    #[test]
    fn embedding_file_roundtrip_and_unk() {
        let text = "2 3\nhello 0.1 0.2 0.3\nWorld 1 2 3\n";
        let table = load_word_embeddings(text, "<test>", Some(3), 7).unwrap();
        assert_eq!(table.vector("hello"), &[0.1, 0.2, 0.3]);
        // lowercase fallback
        assert_eq!(table.row_of("world"), 0);
        assert_eq!(table.vector("World"), &[1.0, 2.0, 3.0]);
        // unseen word maps to the unk row
        assert_eq!(table.row_of("zzz"), 0);
    }

    #[test]
    fn embedding_dim_mismatch_is_config_error() {
        let text = "1 3\na 1 2 3\n";
        match load_word_embeddings(text, "<test>", Some(200), 7).unwrap_err() {
            Error::Config(_) => {}
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn embedding_malformed_line_reports_line_number() {
        let text = "1 2\na 1 oops\n";
        match load_word_embeddings(text, "<test>", Some(2), 7).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected Parse error, got {other:?}"),
        }
    }

    #[test]
    fn feature_rows_have_configured_width() {
        let config = tiny_config();
        let batches = corpus_for(&["alpha", "beta"]);
        let vocab = Vocab::from_batches(&batches);
        let word = synthetic_word_embeddings(&batches, config.word_dim, 3);
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(1);
        let encoder = Encoder::register(&mut store, &config, &vocab, &word, &mut rng).unwrap();

        let s = sentence(&["alpha"]);
        let mut tape = Tape::new();
        let rows = encoder.encode_tokens(&mut tape, &store, &vocab, &s).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(tape.value(rows[0]).shape(), (1, config.feature_dim()));
    }

    #[test]
    fn identical_tokens_encode_identically() {
        let config = tiny_config();
        let batches = corpus_for(&["echo", "filler"]);
        let vocab = Vocab::from_batches(&batches);
        let word = synthetic_word_embeddings(&batches, config.word_dim, 3);
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(2);
        let encoder = Encoder::register(&mut store, &config, &vocab, &word, &mut rng).unwrap();

        let s = sentence(&["echo", "filler", "echo"]);
        let mut tape = Tape::new();
        let rows = encoder.encode_tokens(&mut tape, &store, &vocab, &s).unwrap();
        assert_eq!(tape.value(rows[0]).data(), tape.value(rows[2]).data());
        assert_ne!(tape.value(rows[0]).data(), tape.value(rows[1]).data());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let config = tiny_config();
        let batches = corpus_for(&["ab", "cde"]);
        let vocab = Vocab::from_batches(&batches);
        let word = synthetic_word_embeddings(&batches, config.word_dim, 3);
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(4);
        let encoder = Encoder::register(&mut store, &config, &vocab, &word, &mut rng).unwrap();
        let s = sentence(&["ab", "cde"]);

        let weights = {
            let mut rng = rng_from_seed(99);
            init::xavier_uniform(&mut rng, 1, config.feature_dim())
        };
        let eval = |tape: &mut Tape, store: &ParamStore| -> Result<NodeId> {
            let rows = encoder.encode_tokens(tape, store, &vocab, &s)?;
            let stacked = tape.stack_rows(&rows)?;
            let w = tape.input(weights.clone());
            let wt = tape.transpose(w);
            let scores = tape.matmul(stacked, wt)?;
            let squashed = tape.tanh(scores);
            Ok(tape.sum_all(squashed))
        };

        store.zero_grads();
        let mut tape = Tape::new();
        let loss = eval(&mut tape, &store).unwrap();
        tape.backward(loss, &mut store).unwrap();
        drop(tape);

        let report = grad_check(&mut store, 1e-5, 64, 1e-3, 0, |store| {
            let mut tape = Tape::new();
            let loss = eval(&mut tape, store)?;
            Ok(tape.value(loss).item())
        })
        .unwrap();
        for entry in report {
            assert!(
                entry.max_rel_err < 1e-4,
                "{}: rel err {}",
                entry.name,
                entry.max_rel_err
            );
        }
    }
}
