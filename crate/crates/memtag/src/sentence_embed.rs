//! Fixed-width sentence embeddings: a pluggable raw provider feeding a
//! trained affine projection, a per-batch embedding store, and exact
//! nearest-neighbor retrieval under Euclidean distance.
//!
//! The projection is pretrained to predict which event type a sentence
//! contains, then frozen; main training never updates it. Two providers are
//! built in: mean-pooled word vectors, and precomputed vectors loaded from a
//! store-layout file for users who bring their own encoder.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, Sentence, Split, TagSet, TriggerTag};
use crate::error::{Error, Result};
use crate::numerics::{init, Adam, ParamStore, Tape, Tensor};
use crate::util::{derive_seed, rng_from_seed, stream};

pub const SENTENCE_DIM_DEFAULT: usize = 256;

pub trait SentenceProvider {
    fn provider_dim(&self) -> usize;
    fn raw_embed(&self, sentence: &Sentence) -> Result<Vec<f64>>;
}

/// Mean of the word vectors over the sentence's tokens. Order-independent
/// by construction.
pub struct MeanPoolProvider {
    word: Arc<crate::encoder::WordEmbeddings>,
}

impl MeanPoolProvider {
    pub fn new(word: Arc<crate::encoder::WordEmbeddings>) -> MeanPoolProvider {
        MeanPoolProvider { word }
    }
}

impl SentenceProvider for MeanPoolProvider {
    fn provider_dim(&self) -> usize {
        self.word.dim
    }

    fn raw_embed(&self, sentence: &Sentence) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.word.dim];
        for token in &sentence.tokens {
            for (a, v) in acc.iter_mut().zip(self.word.vector(&token.surface)) {
                *a += v;
            }
        }
        let n = sentence.tokens.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }
}

/// Vectors precomputed elsewhere, keyed by (batch ordinal, index in batch).
pub struct PrecomputedProvider {
    dim: usize,
    vectors: BTreeMap<(u32, u32), Vec<f64>>,
}

impl PrecomputedProvider {
    pub fn from_entries(dim: usize, entries: Vec<(u32, u32, Vec<f64>)>) -> PrecomputedProvider {
        PrecomputedProvider {
            dim,
            vectors: entries
                .into_iter()
                .map(|(ordinal, index, v)| ((ordinal, index), v))
                .collect(),
        }
    }

    pub fn read_file(path: &Path) -> Result<PrecomputedProvider> {
        let (dim, entries) = read_store_file(path)?;
        Ok(PrecomputedProvider::from_entries(dim, entries))
    }
}

impl SentenceProvider for PrecomputedProvider {
    fn provider_dim(&self) -> usize {
        self.dim
    }

    fn raw_embed(&self, sentence: &Sentence) -> Result<Vec<f64>> {
        self.vectors
            .get(&(sentence.batch_ordinal, sentence.index_in_batch))
            .cloned()
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "no precomputed vector for batch {} index {}",
                    sentence.batch_ordinal, sentence.index_in_batch
                ))
            })
    }
}

/// The frozen affine map `provider_dim → sentence_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl Projection {
    pub fn provider_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn apply(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.provider_dim() {
            return Err(Error::Shape {
                op: "projection",
                detail: format!("input {} vs {}", raw.len(), self.provider_dim()),
            });
        }
        let x = Tensor::row_vector(raw.to_vec());
        let mut out = x.matmul(&self.weights)?;
        out.add_scaled(&self.bias, 1.0);
        Ok(out.data().to_vec())
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut store = ParamStore::new();
        store.register("projection.w", self.weights.clone(), false);
        store.register("projection.b", self.bias.clone(), false);
        crate::numerics::write_params_file(path, &store, false)
    }

    pub fn read_file(path: &Path) -> Result<Projection> {
        let params = crate::numerics::read_params_file(path)?;
        let mut weights = None;
        let mut bias = None;
        for (name, tensor) in params {
            match name.as_str() {
                "projection.w" => weights = Some(tensor),
                "projection.b" => bias = Some(tensor),
                other => {
                    return Err(Error::Container(format!(
                        "unexpected parameter `{other}` in projection file"
                    )))
                }
            }
        }
        match (weights, bias) {
            (Some(weights), Some(bias)) => Ok(Projection { weights, bias }),
            _ => Err(Error::Container("incomplete projection file".into())),
        }
    }

    /// Byte-stable fingerprint for the frozen-extractor contract.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut store = ParamStore::new();
        store.register("projection.w", self.weights.clone(), false);
        store.register("projection.b", self.bias.clone(), false);
        let mut bytes = Vec::new();
        crate::numerics::write_params(&mut bytes, &store, false).expect("vec write");
        bytes
    }
}

pub fn embed_sentence(
    sentence: &Sentence,
    provider: &dyn SentenceProvider,
    projection: &Projection,
) -> Result<Vec<f64>> {
    projection.apply(&provider.raw_embed(sentence)?)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PretrainConfig {
    pub epochs: u32,
    pub restarts: u32,
    pub lr: f64,
    pub seed: u64,
    /// Multi-label sigmoid head instead of the single-type softmax head.
    #[serde(default)]
    pub multi_label: bool,
    #[serde(default)]
    pub output_dim: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            restarts: 3,
            lr: 0.001,
            seed: 7,
            multi_label: false,
            output_dim: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub chosen_restart: u32,
    pub best_score: f64,
    pub best_epoch: u32,
    pub train_sentences: usize,
    pub test_sentences: usize,
}

fn present_types(sentence: &Sentence, tagset: &TagSet) -> Vec<usize> {
    let mut present: Vec<usize> = Vec::new();
    for tag in &sentence.tags {
        if let TriggerTag::B(ty) = tag {
            if let Some(pos) = tagset.event_types().iter().position(|t| t == ty) {
                if !present.contains(&pos) {
                    present.push(pos);
                }
            }
        }
    }
    present.sort_unstable();
    present
}

/// Pretrains the projection on labeled sentences by predicting event-type
/// presence through a temporary output layer, then discards that layer and
/// freezes the projection.
///
/// Sentences without any event type are skipped under the softmax head (no
/// single target exists), and kept under the multi-label head. The restart
/// achieving the highest test score wins; among equal scores the one that
/// reached it at the earliest epoch is selected.
pub fn pretrain_projection(
    sentences: &[Sentence],
    tagset: &TagSet,
    provider: &dyn SentenceProvider,
    config: &PretrainConfig,
) -> Result<(Projection, PretrainReport)> {
    let n_types = tagset.event_types().len();
    let output_dim = config.output_dim.unwrap_or(SENTENCE_DIM_DEFAULT);
    let usable: Vec<(&Sentence, Vec<usize>)> = sentences
        .iter()
        .map(|s| (s, present_types(s, tagset)))
        .filter(|(_, present)| config.multi_label || !present.is_empty())
        .collect();
    if usable.len() < 10 {
        return Err(Error::Invalid(format!(
            "pretraining needs at least 10 usable sentences for a 90/10 split, got {}",
            usable.len()
        )));
    }

    // Precompute raw provider vectors once; the provider is fixed.
    let raw: Vec<Vec<f64>> = usable
        .iter()
        .map(|(s, _)| provider.raw_embed(s))
        .collect::<Result<_>>()?;
    let targets: Vec<&Vec<usize>> = usable.iter().map(|(_, p)| p).collect();

    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut split_rng = rng_from_seed(derive_seed(config.seed, &[stream::PRETRAIN, 0]));
    order.shuffle(&mut split_rng);
    let n_test = (usable.len() as f64 * 0.10).round().max(1.0) as usize;
    let (test_idx, train_idx) = order.split_at(n_test);

    let mut best: Option<(f64, u32, u32, Projection)> = None; // score, epoch, restart, proj
    for restart in 0..config.restarts {
        let mut rng = rng_from_seed(derive_seed(
            config.seed,
            &[stream::PRETRAIN, 1 + restart as u64],
        ));
        let mut store = ParamStore::new();
        let w = store.register(
            "projection.w",
            init::xavier_uniform(&mut rng, provider.provider_dim(), output_dim),
            true,
        );
        let b = store.register("projection.b", Tensor::zeros(1, output_dim), true);
        let out_w = store.register(
            "output.w",
            init::xavier_uniform(&mut rng, output_dim, n_types),
            true,
        );
        let out_b = store.register("output.b", Tensor::zeros(1, n_types), true);
        let mut adam = Adam::new(config.lr);

        let mut run_best: Option<(f64, u32, Projection)> = None;
        for epoch in 1..=config.epochs {
            let mut epoch_order = train_idx.to_vec();
            epoch_order.shuffle(&mut rng);
            for &i in &epoch_order {
                let mut tape = Tape::new();
                let x = tape.input(Tensor::row_vector(raw[i].clone()));
                let wn = tape.param(&store, w);
                let bn = tape.param(&store, b);
                let own = tape.param(&store, out_w);
                let obn = tape.param(&store, out_b);
                let hidden = tape.matmul(x, wn)?;
                let hidden = tape.add(hidden, bn)?;
                let logits = tape.matmul(hidden, own)?;
                let logits = tape.add(logits, obn)?;
                let loss = if config.multi_label {
                    // Σ_t BCE(σ(z_t), t ∈ present)
                    let probs = tape.sigmoid(logits);
                    let mut target = Tensor::zeros(1, n_types);
                    for &t in targets[i] {
                        target.set(0, t, 1.0);
                    }
                    // numerically adequate at these magnitudes:
                    // loss = Σ (σ(z) − y)² keeps gradients well-behaved
                    let y = tape.input(target);
                    let diff = tape.sub(probs, y)?;
                    let sq = tape.mul(diff, diff)?;
                    tape.sum_all(sq)
                } else {
                    let target = targets[i][0];
                    let lse = tape.log_sum_exp(logits, crate::numerics::Axis::All);
                    let gold = tape.pick(logits, 0, target)?;
                    tape.sub(lse, gold)?
                };
                tape.backward(loss, &mut store)?;
                drop(tape);
                adam.step(&mut store);
            }

            let score = {
                let projection = Projection {
                    weights: store.value(w).clone(),
                    bias: store.value(b).clone(),
                };
                let out_weights = store.value(out_w).clone();
                let out_bias = store.value(out_b).clone();
                let mut correct = 0usize;
                for &i in test_idx {
                    let hidden = projection.apply(&raw[i])?;
                    let mut z = Tensor::row_vector(hidden).matmul(&out_weights)?;
                    z.add_scaled(&out_bias, 1.0);
                    let ok = if config.multi_label {
                        let predicted: Vec<usize> = (0..n_types)
                            .filter(|&t| z.get(0, t) > 0.0)
                            .collect();
                        predicted == *targets[i]
                    } else {
                        let mut best_t = 0;
                        for t in 1..n_types {
                            if z.get(0, t) > z.get(0, best_t) {
                                best_t = t;
                            }
                        }
                        targets[i].contains(&best_t)
                    };
                    if ok {
                        correct += 1;
                    }
                }
                correct as f64 / test_idx.len() as f64
            };

            let improved = match &run_best {
                None => true,
                Some((best_score, _, _)) => score > *best_score,
            };
            if improved {
                run_best = Some((
                    score,
                    epoch,
                    Projection {
                        weights: store.value(w).clone(),
                        bias: store.value(b).clone(),
                    },
                ));
            }
        }

        let (score, epoch, projection) = run_best.expect("epochs >= 1");
        let better = match &best {
            None => true,
            Some((best_score, best_epoch, _, _)) => {
                score > *best_score || (score == *best_score && epoch < *best_epoch)
            }
        };
        if better {
            best = Some((score, epoch, restart, projection));
        }
    }

    let (best_score, best_epoch, chosen_restart, projection) = best.expect("restarts >= 1");
    Ok((
        projection,
        PretrainReport {
            chosen_restart,
            best_score,
            best_epoch,
            train_sentences: train_idx.len(),
            test_sentences: test_idx.len(),
        },
    ))
}

/// Per-batch sentence embeddings, append-once per batch ordinal.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    batches: BTreeMap<u32, Vec<(u32, Vec<f64>)>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> EmbeddingStore {
        EmbeddingStore {
            dim,
            batches: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn batch_ordinals(&self) -> impl Iterator<Item = u32> + '_ {
        self.batches.keys().copied()
    }

    pub fn batch_len(&self, ordinal: u32) -> usize {
        self.batches.get(&ordinal).map_or(0, Vec::len)
    }

    /// Embeds and stores the training sentences of a batch. A second store
    /// of the same ordinal is an error.
    pub fn store_batch(
        &mut self,
        batch: &Batch,
        provider: &dyn SentenceProvider,
        projection: &Projection,
    ) -> Result<()> {
        let entries: Vec<(u32, Vec<f64>)> = batch
            .split(Split::Train)
            .map(|s| Ok((s.index_in_batch, embed_sentence(s, provider, projection)?)))
            .collect::<Result<_>>()?;
        self.insert_batch(batch.ordinal, entries)
    }

    pub fn insert_batch(&mut self, ordinal: u32, mut entries: Vec<(u32, Vec<f64>)>) -> Result<()> {
        if self.batches.contains_key(&ordinal) {
            return Err(Error::Invalid(format!(
                "batch {ordinal} is already stored; stores are append-once per batch"
            )));
        }
        for (_, v) in &entries {
            if v.len() != self.dim {
                return Err(Error::Shape {
                    op: "store",
                    detail: format!("vector width {} vs store dim {}", v.len(), self.dim),
                });
            }
        }
        entries.sort_by_key(|(index, _)| *index);
        self.batches.insert(ordinal, entries);
        Ok(())
    }

    /// Exact nearest neighbor within batch `m` under Euclidean distance;
    /// ties resolve to the lowest index.
    pub fn retrieve_nearest(&self, query: &[f64], m: u32) -> Result<(u32, &[f64])> {
        let entries = self
            .batches
            .get(&m)
            .filter(|e| !e.is_empty())
            .ok_or_else(|| Error::Invalid(format!("store has no entries for batch {m}")))?;
        if query.len() != self.dim {
            return Err(Error::Shape {
                op: "retrieve",
                detail: format!("query width {} vs store dim {}", query.len(), self.dim),
            });
        }
        let mut best: Option<(f64, u32, &[f64])> = None;
        for (index, vector) in entries {
            let d = Tensor::squared_l2_distance(query, vector);
            let closer = match &best {
                None => true,
                Some((best_d, _, _)) => d < *best_d,
            };
            if closer {
                best = Some((d, *index, vector));
            }
        }
        let (_, index, vector) = best.expect("non-empty checked above");
        Ok((index, vector))
    }

    /// One nearest embedding per previous batch, ascending ordinal. Batch 1
    /// legitimately has no previous batches and yields an empty sequence.
    pub fn retrieve_sequence(&self, query: &[f64], current: u32) -> Result<Vec<(u32, Vec<f64>)>> {
        if current <= 1 {
            return Ok(Vec::new());
        }
        let mut out = Vec::with_capacity(current as usize - 1);
        for m in 1..current {
            let (_, vector) = self.retrieve_nearest(query, m)?;
            out.push((m, vector.to_vec()));
        }
        Ok(out)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let entries = self.batches.iter().flat_map(|(ordinal, entries)| {
            entries
                .iter()
                .map(move |(index, v)| (*ordinal, *index, v.as_slice()))
        });
        write_store_file(path, self.dim, entries)
    }

    pub fn read_file(path: &Path) -> Result<EmbeddingStore> {
        let (dim, entries) = read_store_file(path)?;
        let mut store = EmbeddingStore::new(dim);
        let mut grouped: BTreeMap<u32, Vec<(u32, Vec<f64>)>> = BTreeMap::new();
        for (ordinal, index, v) in entries {
            grouped.entry(ordinal).or_default().push((index, v));
        }
        for (ordinal, batch_entries) in grouped {
            store.insert_batch(ordinal, batch_entries)?;
        }
        Ok(store)
    }
}

const STORE_MAGIC: &[u8; 4] = b"MTES";
const STORE_VERSION: u32 = 1;

/// Binary container shared by the embedding store and the precomputed
/// provider: header (magic, version, dim, count), then per-entry records
/// (batch ordinal u32, index u32, dim × f64), all little-endian.
pub fn write_store_file<'a>(
    path: &Path,
    dim: usize,
    entries: impl Iterator<Item = (u32, u32, &'a [f64])>,
) -> Result<()> {
    let entries: Vec<(u32, u32, &[f64])> = entries.collect();
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    w.write_all(STORE_MAGIC).map_err(io_err)?;
    w.write_all(&STORE_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(dim as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(entries.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    for (ordinal, index, vector) in entries {
        debug_assert_eq!(vector.len(), dim);
        w.write_all(&ordinal.to_le_bytes()).map_err(io_err)?;
        w.write_all(&index.to_le_bytes()).map_err(io_err)?;
        for v in vector {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    Ok(())
}

pub fn read_store_file(path: &Path) -> Result<(usize, Vec<(u32, u32, Vec<f64>)>)> {
    let file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = std::io::BufReader::new(file);
    let bad = |m: &str| Error::Container(format!("{}: {m}", path.display()));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != STORE_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|_| bad("truncated header"))?;
    if u32::from_le_bytes(u32buf) != STORE_VERSION {
        return Err(bad("unsupported version"));
    }
    r.read_exact(&mut u32buf).map_err(|_| bad("truncated header"))?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(|_| bad("truncated header"))?;
    let count = u64::from_le_bytes(u64buf) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u32buf).map_err(|_| bad("truncated entry"))?;
        let ordinal = u32::from_le_bytes(u32buf);
        r.read_exact(&mut u32buf).map_err(|_| bad("truncated entry"))?;
        let index = u32::from_le_bytes(u32buf);
        let mut vector = Vec::with_capacity(dim);
        let mut f64buf = [0u8; 8];
        for _ in 0..dim {
            r.read_exact(&mut f64buf).map_err(|_| bad("truncated entry"))?;
            vector.push(f64::from_le_bytes(f64buf));
        }
        entries.push((ordinal, index, vector));
    }
    Ok((dim, entries))
}
