//! The four streaming strategies over ordered batches.
//!
//! * All — a fresh model per batch over every training split seen so far.
//! * Current — a fresh model per batch over that batch alone.
//! * Finetune — one model, continued from the previous batch's best
//!   checkpoint, trained on the current batch alone.
//! * Proposed — Finetune's data exposure plus the retrieval memory: batch 1
//!   trains the plain network; batch 2 inherits it, swaps in the widened
//!   pre-CRF layer, adds the memory LSTM, and from then on every training
//!   sentence sees a memory embedding computed from the frozen projection's
//!   store of earlier batches. Labels of earlier batches are never read
//!   again — only their stored sentence embeddings.
//!
//! Per-batch model selection maximizes dev F1 (earliest epoch on ties).
//! Every batch's best model is evaluated on the union of all test splits.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, Sentence, Split, TagSet};
use crate::encoder::{Vocab, WordEmbeddings};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_runs, extract_spans, trigger_prf, MetricRecord, Prf, RunMetrics, TimingRecord,
};
use crate::noise_sim::{generate_groups, NoiseSchedule, SimulationGroup};
use crate::numerics::{write_params, Adam, Tape};
use crate::sentence_embed::{
    embed_sentence, EmbeddingStore, MeanPoolProvider, PrecomputedProvider, PretrainConfig,
    Projection, SentenceProvider,
};
use crate::tagger::{Model, TaggerConfig};
use crate::util::{derive_seed, rng_from_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    All,
    Current,
    Finetune,
    Proposed,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::All => "all",
            StrategyKind::Current => "current",
            StrategyKind::Finetune => "finetune",
            StrategyKind::Proposed => "proposed",
        }
    }

    pub fn parse(s: &str) -> Option<StrategyKind> {
        match s {
            "all" => Some(StrategyKind::All),
            "current" => Some(StrategyKind::Current),
            "finetune" => Some(StrategyKind::Finetune),
            "proposed" => Some(StrategyKind::Proposed),
            _ => None,
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_per_batch: u32,
    pub lr: f64,
    #[serde(default)]
    pub patience: Option<u32>,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Ablation: give the proposed strategy its memory head already at
    /// batch 1, fed with a zero memory vector. Breaks batch-1 equivalence
    /// with the other strategies by design.
    #[serde(default)]
    pub use_zero_memory_at_batch1: bool,
    /// Carry Adam moments across batches for Finetune/Proposed instead of
    /// resetting the optimizer at each batch.
    #[serde(default)]
    pub carry_optimizer_state: bool,
}

fn default_true() -> bool {
    true
}

fn default_batch_size() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_per_batch: 30,
            lr: 0.001,
            patience: Some(5),
            shuffle: true,
            batch_size: 1,
            use_zero_memory_at_batch1: false,
            carry_optimizer_state: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_batch == 0 {
            return Err(Error::Config("epochs_per_batch must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub strategy: String,
    pub batch_ordinal: u32,
    pub epoch: u32,
    pub dev_f1: f64,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub ordinal: u32,
    pub batch_name: String,
    pub best_epoch: u32,
    pub dev_f1: f64,
    pub test: Prf,
    pub train_seconds: f64,
    /// Trainable-parameter container of the batch's best model.
    pub checkpoint: Vec<u8>,
    /// Batch ordinals whose gold labels fed training or model selection.
    pub label_reads: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct StrategyRunResult {
    pub strategy: StrategyKind,
    pub group_id: u32,
    pub batches: Vec<BatchOutcome>,
    pub total_train_seconds: f64,
}

/// Best checkpoint selection: highest dev F1, earliest epoch on ties.
/// Returns the index into `evaluated`.
pub fn select_best(evaluated: &[(u32, f64)]) -> usize {
    assert!(!evaluated.is_empty(), "select_best needs at least one epoch");
    let mut best = 0;
    for (i, (epoch, f1)) in evaluated.iter().enumerate().skip(1) {
        let (best_epoch, best_f1) = evaluated[best];
        if *f1 > best_f1 || (*f1 == best_f1 && *epoch < best_epoch) {
            best = i;
        }
    }
    best
}

/// Everything a strategy run reads. All shared pieces are read-only.
pub struct RunContext<'a> {
    pub batches: &'a [Batch],
    pub vocab: &'a Vocab,
    pub tagset: &'a TagSet,
    pub word: &'a WordEmbeddings,
    pub model_config: &'a TaggerConfig,
    pub train_config: &'a TrainConfig,
    pub provider: Option<&'a dyn SentenceProvider>,
    pub projection: Option<&'a Projection>,
    pub group_seed: u64,
}

impl<'a> RunContext<'a> {
    fn union_test(&self) -> Vec<&'a Sentence> {
        self.batches
            .iter()
            .flat_map(|b| b.sentences.iter().filter(|s| s.split == Split::Test))
            .collect()
    }

    fn init_rng_for(&self, ordinal: u32) -> crate::util::Rng {
        rng_from_seed(derive_seed(
            self.group_seed,
            &[stream::MODEL_INIT, ordinal as u64],
        ))
    }
}

/// Per-sentence retrieved sequences, fixed for the duration of one batch.
type MemorySequences = BTreeMap<(u32, u32), Vec<Vec<f64>>>;

fn retrieved_for(
    sentences: &[&Sentence],
    store: &EmbeddingStore,
    provider: &dyn SentenceProvider,
    projection: &Projection,
    current_ordinal: u32,
) -> Result<MemorySequences> {
    let mut out = MemorySequences::new();
    for s in sentences {
        let query = embed_sentence(s, provider, projection)?;
        let seq = store.retrieve_sequence(&query, current_ordinal)?;
        out.insert(
            (s.batch_ordinal, s.index_in_batch),
            seq.into_iter().map(|(_, v)| v).collect(),
        );
    }
    Ok(out)
}

/// Computes the concrete memory vector for one sentence outside training.
fn memory_vector(model: &Model, sequence: &[Vec<f64>]) -> Result<Option<Vec<f64>>> {
    let Some(network) = model.memory_network() else {
        return Ok(None);
    };
    let mut tape = Tape::new();
    Ok(network
        .memory_embed(&mut tape, &model.store, sequence)?
        .map(|node| tape.value(node).data().to_vec()))
}

fn evaluate_model(
    model: &Model,
    vocab: &Vocab,
    sentences: &[&Sentence],
    memories: Option<&MemorySequences>,
) -> Result<Prf> {
    let mut pairs = Vec::with_capacity(sentences.len());
    let empty: Vec<Vec<f64>> = Vec::new();
    for s in sentences {
        let memory = if model.with_memory {
            let seq = memories
                .and_then(|m| m.get(&(s.batch_ordinal, s.index_in_batch)))
                .unwrap_or(&empty);
            memory_vector(model, seq)?
        } else {
            None
        };
        let pred = model.decode_sentence(vocab, s, memory.as_deref())?;
        pairs.push((extract_spans(&pred), extract_spans(&s.tags)));
    }
    Ok(trigger_prf(&pairs))
}

struct BatchTrainOutcome {
    best_epoch: u32,
    dev_f1: f64,
}

/// Trains `model` on `train` for up to `epochs` epochs, selecting the best
/// epoch by dev F1 and leaving the model restored to that best state.
/// `epochs == 0` keeps the incoming parameters and only evaluates them.
#[allow(clippy::too_many_arguments)]
fn train_on_batch(
    model: &mut Model,
    vocab: &Vocab,
    train: &[&Sentence],
    dev: &[&Sentence],
    train_memories: Option<&MemorySequences>,
    dev_memories: Option<&MemorySequences>,
    adam: &mut Adam,
    config: &TrainConfig,
    group_seed: u64,
    ordinal: u32,
    epochs: u32,
    label_reads: &mut Vec<u32>,
) -> Result<BatchTrainOutcome> {
    let mut record_read = |o: u32| {
        if !label_reads.contains(&o) {
            label_reads.push(o);
        }
    };

    let mut evaluated: Vec<(u32, f64)> = Vec::new();
    let mut best_snapshot = model.store.snapshot_values();
    {
        // Epoch 0 is the incoming model, so zero-epoch runs stay well
        // defined and inherited checkpoints can win outright.
        let f1 = evaluate_model(model, vocab, dev, dev_memories)?.f1;
        for s in dev {
            record_read(s.batch_ordinal);
        }
        evaluated.push((0, f1));
    }

    let empty: Vec<Vec<f64>> = Vec::new();
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        if config.shuffle {
            let mut rng = rng_from_seed(derive_seed(
                group_seed,
                &[stream::SHUFFLE, ordinal as u64, epoch as u64],
            ));
            order.shuffle(&mut rng);
        }
        let mut pending = 0usize;
        for idx in order {
            let sentence = train[idx];
            record_read(sentence.batch_ordinal);
            let mut tape = Tape::new();
            let memory_node = if model.with_memory {
                let seq = train_memories
                    .and_then(|m| {
                        m.get(&(sentence.batch_ordinal, sentence.index_in_batch))
                    })
                    .unwrap_or(&empty);
                model
                    .memory_network()
                    .expect("memory model")
                    .memory_embed(&mut tape, &model.store, seq)?
            } else {
                None
            };
            let loss =
                model.sentence_loss(&mut tape, &model.store, vocab, sentence, memory_node)?;
            tape.backward(loss, &mut model.store)?;
            drop(tape);
            pending += 1;
            if pending == config.batch_size {
                adam.step(&mut model.store);
                pending = 0;
            }
        }
        if pending > 0 {
            adam.step(&mut model.store);
        }

        let f1 = evaluate_model(model, vocab, dev, dev_memories)?.f1;
        evaluated.push((epoch, f1));
        if select_best(&evaluated) == evaluated.len() - 1 {
            best_snapshot = model.store.snapshot_values();
        }
        if let Some(patience) = config.patience {
            let (best_epoch, _) = evaluated[select_best(&evaluated)];
            if epoch.saturating_sub(best_epoch) >= patience {
                break;
            }
        }
    }

    let (best_epoch, dev_f1) = evaluated[select_best(&evaluated)];
    model.store.restore_values(&best_snapshot);
    Ok(BatchTrainOutcome { best_epoch, dev_f1 })
}

fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let mut bytes = Vec::new();
    write_params(&mut bytes, &model.store, true).expect("vec write");
    bytes
}

/// Runs one strategy across all batches of one simulation group.
pub fn run_strategy(
    strategy: StrategyKind,
    context: &RunContext<'_>,
) -> Result<StrategyRunResult> {
    context.train_config.validate()?;
    let union_test = context.union_test();
    let mut outcomes: Vec<BatchOutcome> = Vec::with_capacity(context.batches.len());
    let mut total_train_seconds = 0.0;

    // State carried across batches by the stateful strategies.
    let mut carried_model: Option<Model> = None;
    let mut carried_adam: Option<Adam> = None;
    let mut embedding_store =
        EmbeddingStore::new(context.projection.map_or(0, Projection::output_dim));

    for batch in context.batches {
        let ordinal = batch.ordinal;
        let started = Instant::now();
        let mut label_reads = Vec::new();

        let (provider, projection) = if strategy == StrategyKind::Proposed {
            let provider = context.provider.ok_or_else(|| {
                Error::Config("proposed strategy needs a sentence provider".into())
            })?;
            let projection = context.projection.ok_or_else(|| {
                Error::Config("proposed strategy needs a pretrained projection".into())
            })?;
            (Some(provider), Some(projection))
        } else {
            (None, None)
        };

        // Assemble the model and data exposure for this batch.
        let mut model = match strategy {
            StrategyKind::All | StrategyKind::Current => Model::new(
                context.model_config,
                context.tagset,
                context.vocab,
                context.word,
                &mut context.init_rng_for(ordinal),
            )?,
            StrategyKind::Finetune | StrategyKind::Proposed => match carried_model.take() {
                None => {
                    let mut model = Model::new(
                        context.model_config,
                        context.tagset,
                        context.vocab,
                        context.word,
                        &mut context.init_rng_for(ordinal),
                    )?;
                    if strategy == StrategyKind::Proposed
                        && context.train_config.use_zero_memory_at_batch1
                    {
                        model = model.upgrade_with_memory(&mut rng_from_seed(derive_seed(
                            context.group_seed,
                            &[stream::MEMORY_INIT, ordinal as u64],
                        )))?;
                    }
                    model
                }
                Some(prior) => {
                    if strategy == StrategyKind::Proposed && !prior.with_memory {
                        prior.upgrade_with_memory(&mut rng_from_seed(derive_seed(
                            context.group_seed,
                            &[stream::MEMORY_INIT, ordinal as u64],
                        )))?
                    } else {
                        prior
                    }
                }
            },
        };

        let train: Vec<&Sentence> = match strategy {
            StrategyKind::All => context
                .batches
                .iter()
                .filter(|b| b.ordinal <= ordinal)
                .flat_map(|b| b.sentences.iter().filter(|s| s.split == Split::Train))
                .collect(),
            _ => batch.train().collect(),
        };
        let dev: Vec<&Sentence> = match strategy {
            StrategyKind::All => context
                .batches
                .iter()
                .filter(|b| b.ordinal <= ordinal)
                .flat_map(|b| b.sentences.iter().filter(|s| s.split == Split::Dev))
                .collect(),
            _ => batch.dev().collect(),
        };

        // Per-sentence retrieved sequences, fixed while this batch trains.
        // At the first memory batch the store is empty and every sequence is
        // empty, which the emission head reads as a zero memory vector.
        let (train_memories, dev_memories) = if model.with_memory {
            let provider = provider.expect("memory implies proposed");
            let projection = projection.expect("memory implies proposed");
            (
                Some(retrieved_for(
                    &train,
                    &embedding_store,
                    provider,
                    projection,
                    ordinal,
                )?),
                Some(retrieved_for(
                    &dev,
                    &embedding_store,
                    provider,
                    projection,
                    ordinal,
                )?),
            )
        } else {
            (None, None)
        };

        let mut adam = match (carried_adam.take(), context.train_config.carry_optimizer_state)
        {
            (Some(adam), true)
                if matches!(
                    strategy,
                    StrategyKind::Finetune | StrategyKind::Proposed
                ) =>
            {
                adam
            }
            _ => Adam::new(context.train_config.lr),
        };

        let outcome = train_on_batch(
            &mut model,
            context.vocab,
            &train,
            &dev,
            train_memories.as_ref(),
            dev_memories.as_ref(),
            &mut adam,
            context.train_config,
            context.group_seed,
            ordinal,
            context.train_config.epochs_per_batch,
            &mut label_reads,
        )?;

        // The proposed strategy records this batch's sentence embeddings
        // only after its training completes; queries above saw 1..i-1.
        if strategy == StrategyKind::Proposed {
            embedding_store.store_batch(
                batch,
                provider.expect("checked above"),
                projection.expect("checked above"),
            )?;
        }

        let train_seconds = started.elapsed().as_secs_f64();
        total_train_seconds += train_seconds;

        // retrieve_sequence(_, ordinal) only touches batches 1..ordinal-1,
        // so the just-stored current batch stays invisible to these queries.
        let test_memories = if model.with_memory {
            Some(retrieved_for(
                &union_test,
                &embedding_store,
                provider.expect("memory implies proposed"),
                projection.expect("memory implies proposed"),
                ordinal,
            )?)
        } else {
            None
        };
        let test = evaluate_model(&model, context.vocab, &union_test, test_memories.as_ref())?;

        label_reads.sort_unstable();
        outcomes.push(BatchOutcome {
            ordinal,
            batch_name: batch.name.clone(),
            best_epoch: outcome.best_epoch,
            dev_f1: outcome.dev_f1,
            test,
            train_seconds,
            checkpoint: checkpoint_bytes(&model),
            label_reads,
        });

        if matches!(strategy, StrategyKind::Finetune | StrategyKind::Proposed) {
            carried_model = Some(model);
            carried_adam = Some(adam);
        }
    }

    Ok(StrategyRunResult {
        strategy,
        group_id: 0,
        batches: outcomes,
        total_train_seconds,
    })
}

// --- experiment orchestration -------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderConfig {
    MeanPool,
    Precomputed { path: PathBuf },
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::MeanPool
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WordEmbConfig {
    Synthetic { seed: u64 },
    File { path: PathBuf },
}

impl Default for WordEmbConfig {
    fn default() -> Self {
        WordEmbConfig::Synthetic { seed: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: PathBuf,
    /// Labeled sentences for projection pretraining; required when the
    /// proposed strategy is in the list.
    #[serde(default)]
    pub guidelines: Option<PathBuf>,
    pub schedule: BTreeMap<String, f64>,
    pub n_groups: u32,
    pub master_seed: u64,
    #[serde(default)]
    pub drop_weight: Option<f64>,
    pub strategies: Vec<StrategyKind>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: TaggerConfig,
    #[serde(default)]
    pub provider: ProviderConfig,
    #[serde(default)]
    pub word_embeddings: WordEmbConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_jobs() -> usize {
    1
}

pub struct PreparedExperiment {
    pub clean_batches: Vec<Batch>,
    pub groups: Vec<SimulationGroup>,
    pub vocab: Vocab,
    pub tagset: TagSet,
    pub word: Arc<WordEmbeddings>,
    pub projection: Option<Projection>,
    pub noise_label: String,
}

/// Loads the corpus, builds vocab/tagset/word table, pretrains the
/// projection when needed, and simulates or loads the noise groups.
pub fn prepare_experiment(config: &ExperimentConfig) -> Result<PreparedExperiment> {
    config.train.validate()?;
    let corpus_path: &Path = &config.corpus;
    let (clean_batches, preloaded_groups) = load_corpus_or_groups(corpus_path)?;

    let guideline_batches: Vec<Batch> = match &config.guidelines {
        Some(path) => crate::corpus::read_corpus_file(path)?,
        None => Vec::new(),
    };

    let mut all_for_vocab: Vec<Batch> = clean_batches.clone();
    all_for_vocab.extend(guideline_batches.iter().cloned());
    let vocab = Vocab::from_batches(&all_for_vocab);
    let tagset = TagSet::from_batches(&all_for_vocab)?;

    let word = Arc::new(match &config.word_embeddings {
        WordEmbConfig::Synthetic { seed } => crate::encoder::synthetic_word_embeddings(
            &all_for_vocab,
            config.model.encoder.word_dim,
            *seed,
        ),
        WordEmbConfig::File { path } => crate::encoder::load_word_embeddings_file(
            path,
            Some(config.model.encoder.word_dim),
            config.master_seed,
        )?,
    });

    let needs_projection = config.strategies.contains(&StrategyKind::Proposed);
    let projection = if needs_projection {
        if guideline_batches.is_empty() {
            return Err(Error::Config(
                "the proposed strategy needs a guidelines corpus for projection pretraining"
                    .into(),
            ));
        }
        let guideline_sentences: Vec<Sentence> = guideline_batches
            .iter()
            .flat_map(|b| b.sentences.iter().cloned())
            .collect();
        let provider = build_provider(config, Arc::clone(&word))?;
        let (projection, _report) = crate::sentence_embed::pretrain_projection(
            &guideline_sentences,
            &tagset,
            provider.as_ref(),
            &config.pretrain,
        )?;
        Some(projection)
    } else {
        None
    };

    let schedule = schedule_from_map(&config.schedule)?;
    let noise_label = schedule.label();
    let groups = match preloaded_groups {
        Some(groups) => groups,
        None => generate_groups(
            &clean_batches,
            &schedule,
            config.n_groups,
            config.master_seed,
            config.drop_weight,
        )?,
    };

    Ok(PreparedExperiment {
        clean_batches,
        groups,
        vocab,
        tagset,
        word,
        projection,
        noise_label,
    })
}

fn schedule_from_map(map: &BTreeMap<String, f64>) -> Result<NoiseSchedule> {
    let mut per_batch = BTreeMap::new();
    for (key, level) in map {
        let ordinal: u32 = key
            .parse()
            .map_err(|_| Error::Config(format!("schedule key `{key}` is not an ordinal")))?;
        per_batch.insert(ordinal, *level);
    }
    NoiseSchedule::new(per_batch)
}

fn build_provider(
    config: &ExperimentConfig,
    word: Arc<WordEmbeddings>,
) -> Result<Box<dyn SentenceProvider>> {
    Ok(match &config.provider {
        ProviderConfig::MeanPool => Box::new(MeanPoolProvider::new(word)),
        ProviderConfig::Precomputed { path } => Box::new(PrecomputedProvider::read_file(path)?),
    })
}

/// A corpus path may be a plain corpus file, a directory with `corpus.tsv`,
/// or a simulate output root containing `group_<id>/corpus.tsv`.
fn load_corpus_or_groups(path: &Path) -> Result<(Vec<Batch>, Option<Vec<SimulationGroup>>)> {
    if path.is_file() {
        return Ok((crate::corpus::read_corpus_file(path)?, None));
    }
    let direct = path.join("corpus.tsv");
    if direct.is_file() {
        return Ok((crate::corpus::read_corpus_file(&direct)?, None));
    }
    let mut group_dirs: Vec<(u32, PathBuf)> = Vec::new();
    if path.is_dir() {
        for entry in std::fs::read_dir(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?
        {
            let entry = entry.map_err(|e| Error::io(path.display().to_string(), e))?;
            let name = entry.file_name().to_string_lossy().to_string();
            if let Some(id) = name.strip_prefix("group_") {
                if let Ok(id) = id.parse::<u32>() {
                    group_dirs.push((id, entry.path().join("corpus.tsv")));
                }
            }
        }
    }
    if group_dirs.is_empty() {
        return Err(Error::Config(format!(
            "{} is neither a corpus file nor a simulation directory",
            path.display()
        )));
    }
    group_dirs.sort_by_key(|(id, _)| *id);
    let mut groups = Vec::with_capacity(group_dirs.len());
    for (group_id, file) in &group_dirs {
        groups.push(SimulationGroup {
            group_id: *group_id,
            seed: 0,
            batches: crate::corpus::read_corpus_file(file)?,
        });
    }
    // The clean reference corpus is not recoverable from corrupted groups;
    // dev/test splits are intact by contract, so use the first group's.
    let clean = groups[0].batches.clone();
    Ok((clean, Some(groups)))
}

pub struct ExperimentOutput {
    pub metrics: RunMetrics,
    pub runs: Vec<StrategyRunResult>,
}

/// Runs every (group × strategy) pair and aggregates. `jobs` bounds worker
/// threads; each run is single-threaded and deterministic, and aggregation
/// reads results in fixed order regardless of scheduling.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let prepared = prepare_experiment(config)?;
    run_prepared_experiment(config, &prepared)
}

pub fn run_prepared_experiment(
    config: &ExperimentConfig,
    prepared: &PreparedExperiment,
) -> Result<ExperimentOutput> {
    struct Task {
        group_idx: usize,
        strategy: StrategyKind,
    }
    let mut tasks = Vec::new();
    for group_idx in 0..prepared.groups.len() {
        for &strategy in &config.strategies {
            tasks.push(Task {
                group_idx,
                strategy,
            });
        }
    }

    let jobs = config.jobs.max(1);
    let n_tasks = tasks.len();
    let results: Vec<Option<Result<StrategyRunResult>>> = if jobs == 1 {
        tasks
            .iter()
            .map(|task| {
                Some(run_one_task(
                    config,
                    prepared,
                    task.group_idx,
                    task.strategy,
                ))
            })
            .collect()
    } else {
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Mutex;
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<StrategyRunResult>>>> =
            (0..n_tasks).map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(n_tasks) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= n_tasks {
                        break;
                    }
                    let task = &tasks[i];
                    let result =
                        run_one_task(config, prepared, task.group_idx, task.strategy);
                    *slots[i].lock().expect("poisoned") = Some(result);
                });
            }
        });
        slots
            .into_iter()
            .map(|slot| slot.into_inner().expect("poisoned"))
            .collect()
    };

    let mut runs: Vec<StrategyRunResult> = Vec::with_capacity(n_tasks);
    for result in results {
        runs.push(result.expect("worker finished")?);
    }

    // Aggregate per (strategy, batch) across groups.
    let mut records: Vec<MetricRecord> = Vec::new();
    let batch_names: Vec<String> = prepared
        .clean_batches
        .iter()
        .map(|b| b.name.clone())
        .collect();
    for &strategy in &config.strategies {
        for (batch_idx, batch_name) in batch_names.iter().enumerate() {
            let prs: Vec<(f64, f64)> = runs
                .iter()
                .filter(|r| r.strategy == strategy)
                .map(|r| {
                    let outcome = &r.batches[batch_idx];
                    (outcome.test.precision, outcome.test.recall)
                })
                .collect();
            let agg = aggregate_runs(&prs);
            records.push(MetricRecord {
                noise: prepared.noise_label.clone(),
                strategy: strategy.to_string(),
                batch: batch_name.clone(),
                p: agg.precision,
                r: agg.recall,
                f1: agg.f1,
                groups: prepared.groups.len() as u32,
            });
        }
    }
    let timings: Vec<TimingRecord> = config
        .strategies
        .iter()
        .map(|&strategy| {
            let totals: Vec<f64> = runs
                .iter()
                .filter(|r| r.strategy == strategy)
                .map(|r| r.total_train_seconds)
                .collect();
            TimingRecord {
                strategy: strategy.to_string(),
                seconds: totals.iter().sum::<f64>() / totals.len().max(1) as f64,
            }
        })
        .collect();

    Ok(ExperimentOutput {
        metrics: RunMetrics { records, timings },
        runs,
    })
}

fn run_one_task(
    config: &ExperimentConfig,
    prepared: &PreparedExperiment,
    group_idx: usize,
    strategy: StrategyKind,
) -> Result<StrategyRunResult> {
    let group = &prepared.groups[group_idx];
    let provider_box = if strategy == StrategyKind::Proposed {
        Some(build_provider(config, Arc::clone(&prepared.word))?)
    } else {
        None
    };
    let context = RunContext {
        batches: &group.batches,
        vocab: &prepared.vocab,
        tagset: &prepared.tagset,
        word: &prepared.word,
        model_config: &config.model,
        train_config: &config.train,
        provider: provider_box.as_deref(),
        projection: prepared.projection.as_ref(),
        group_seed: derive_seed(config.master_seed, &[stream::GROUP, group.group_id as u64]),
    };
    let mut result = run_strategy(strategy, &context)?;
    result.group_id = group.group_id;
    Ok(result)
}

/// Writes metrics JSON/CSV, the timing CSV, the text report, and per-run
/// checkpoints under `out_dir`.
pub fn write_experiment_outputs(
    out_dir: &Path,
    output: &ExperimentOutput,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let write = |name: &str, contents: &str| -> Result<()> {
        let path = out_dir.join(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(path.display().to_string(), e))
    };
    write("metrics.json", &output.metrics.metrics_json())?;
    write("metrics.csv", &output.metrics.metrics_csv())?;
    write("timing.csv", &output.metrics.timing_csv())?;
    write("report.txt", &output.metrics.text_table())?;
    for run in &output.runs {
        let dir = out_dir
            .join(format!("group_{}", run.group_id))
            .join(run.strategy.as_str());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        for outcome in &run.batches {
            let ckpt = dir.join(format!("batch_{}.ckpt", outcome.ordinal));
            std::fs::write(&ckpt, &outcome.checkpoint)
                .map_err(|e| Error::io(ckpt.display().to_string(), e))?;
            let meta = CheckpointMeta {
                strategy: run.strategy.to_string(),
                batch_ordinal: outcome.ordinal,
                epoch: outcome.best_epoch,
                dev_f1: outcome.dev_f1,
                wall_clock_seconds: outcome.train_seconds,
            };
            let meta_path = dir.join(format!("batch_{}.meta.json", outcome.ordinal));
            std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")
                .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
        }
    }
    Ok(())
}
