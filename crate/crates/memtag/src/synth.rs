//! Synthetic labeled corpora with planted ambiguous triggers.
//!
//! Every trigger lemma has a fixed type, except ambiguous lemmas which carry
//! two; the realized type of an ambiguous trigger is signalled by marker
//! tokens planted in the same sentence. Marker vocabulary, trigger lemmas,
//! particles, and fillers are disjoint, so a rule reading lemma identity and
//! in-sentence markers labels clean data perfectly — strategy differences
//! measured on this corpus come from noise handling, not task impossibility.
//!
//! Batches can rotate which lemmas are frequent (`rotation_strength`), so a
//! single batch undersamples part of the inventory while the stream as a
//! whole covers it.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, Sentence, Split, Token, TriggerTag};
use crate::error::{Error, Result};
use crate::util::{derive_seed, rng_from_seed, stream, Rng};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchSpec {
    pub name: String,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_event_types: usize,
    /// Explicit names; generated as Type00.. when absent.
    #[serde(default)]
    pub event_type_names: Option<Vec<String>>,
    pub vocab_size: usize,
    pub n_trigger_lemmas: usize,
    pub ambiguous_fraction: f64,
    #[serde(default = "default_markers_per_type")]
    pub markers_per_type: usize,
    pub batches: Vec<BatchSpec>,
    /// Inclusive token-count range.
    pub sentence_len: (usize, usize),
    /// Relative weights for sentences with 0, 1, and 2 trigger spans.
    #[serde(default = "default_span_weights")]
    pub span_count_weights: [f64; 3],
    /// 0 samples lemmas uniformly in every batch; towards 1 each batch
    /// concentrates on its own rotation class.
    #[serde(default)]
    pub rotation_strength: f64,
    pub seed: u64,
}

fn default_markers_per_type() -> usize {
    8
}

fn default_span_weights() -> [f64; 3] {
    [0.25, 0.5, 0.25]
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_event_types == 0 {
            return Err(Error::Config("n_event_types must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ambiguous_fraction) {
            return Err(Error::Config("ambiguous_fraction must be in [0,1]".into()));
        }
        if self.batches.is_empty() {
            return Err(Error::Config("at least one batch is required".into()));
        }
        if self.sentence_len.0 == 0 || self.sentence_len.0 > self.sentence_len.1 {
            return Err(Error::Config("invalid sentence length range".into()));
        }
        if self.n_trigger_lemmas == 0 {
            return Err(Error::Config("n_trigger_lemmas must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.rotation_strength) {
            return Err(Error::Config("rotation_strength must be in [0,1]".into()));
        }
        if let Some(names) = &self.event_type_names {
            if names.len() != self.n_event_types {
                return Err(Error::Config(format!(
                    "event_type_names has {} entries for n_event_types {}",
                    names.len(),
                    self.n_event_types
                )));
            }
        }
        Ok(())
    }

    pub fn event_types(&self) -> Vec<String> {
        match &self.event_type_names {
            Some(names) => names.clone(),
            None => (0..self.n_event_types)
                .map(|i| format!("Type{i:02}"))
                .collect(),
        }
    }
}

/// What the generator planted; the ground truth behind the Bayes rule.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    /// lemma → the event types it can trigger (1 or 2 entries).
    pub lemma_types: BTreeMap<String, Vec<String>>,
    /// event type → its marker surfaces.
    pub markers: BTreeMap<String, Vec<String>>,
    /// tokens usable as the second token of a two-token trigger span.
    pub particles: BTreeSet<String>,
}

struct Inventory {
    fillers: Vec<(String, String)>, // (surface, pos)
    lemmas: Vec<String>,
    lemma_types: Vec<Vec<usize>>,
    markers: Vec<Vec<String>>, // per type
    particles: Vec<String>,
    types: Vec<String>,
}

fn pseudo_word(rng: &mut Rng, min_syllables: usize, max_syllables: usize) -> String {
    const ONSETS: [&str; 12] = [
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t",
    ];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    let syllables = rng.gen_range(min_syllables..=max_syllables);
    let mut word = String::new();
    for _ in 0..syllables {
        word.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
        word.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
    }
    word
}

fn unique_words(rng: &mut Rng, count: usize, taken: &mut BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let w = pseudo_word(rng, 2, 4);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn build_inventory(config: &SynthConfig) -> Result<Inventory> {
    let types = config.event_types();
    let t = types.len();
    let mut rng = rng_from_seed(derive_seed(config.seed, &[stream::SYNTH, 0]));
    let mut taken = BTreeSet::new();

    let filler_words = unique_words(&mut rng, config.vocab_size, &mut taken);
    let lemmas = unique_words(&mut rng, config.n_trigger_lemmas, &mut taken);
    let marker_words = unique_words(&mut rng, t * config.markers_per_type, &mut taken);
    let particles = unique_words(&mut rng, 4, &mut taken);

    // A slice of the filler vocabulary is verb-tagged so POS alone cannot
    // identify triggers.
    let filler_pos = ["NN", "DT", "JJ", "RB"];
    let fillers: Vec<(String, String)> = filler_words
        .into_iter()
        .enumerate()
        .map(|(i, w)| {
            let pos = if i % 10 < 3 {
                "VB".to_string()
            } else {
                filler_pos[i % filler_pos.len()].to_string()
            };
            (w, pos)
        })
        .collect();

    let ambiguous_count =
        (config.ambiguous_fraction * config.n_trigger_lemmas as f64).round() as usize;
    let mut lemma_types = Vec::with_capacity(config.n_trigger_lemmas);
    for i in 0..config.n_trigger_lemmas {
        let primary = i % t;
        if i < ambiguous_count && t >= 2 {
            let secondary = (primary + 1 + (i / t) % (t - 1)) % t;
            debug_assert_ne!(primary, secondary);
            lemma_types.push(vec![primary, secondary]);
        } else {
            lemma_types.push(vec![primary]);
        }
    }
    let mut covered: BTreeSet<usize> = BTreeSet::new();
    for types_of in &lemma_types {
        covered.extend(types_of.iter().copied());
    }
    if covered.len() != t {
        return Err(Error::Config(format!(
            "only {} of {} event types are reachable from {} trigger lemmas",
            covered.len(),
            t,
            config.n_trigger_lemmas
        )));
    }

    let markers = (0..t)
        .map(|ty| {
            marker_words[ty * config.markers_per_type..(ty + 1) * config.markers_per_type]
                .to_vec()
        })
        .collect();

    Ok(Inventory {
        fillers,
        lemmas,
        lemma_types,
        markers,
        particles,
        types,
    })
}

fn weighted_choice(rng: &mut Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut draw = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if draw < *w {
            return i;
        }
        draw -= w;
    }
    weights.len() - 1
}

struct PlannedSpan {
    lemma_idx: usize,
    type_idx: usize,
    two_tokens: bool,
}

fn generate_sentence(
    config: &SynthConfig,
    inv: &Inventory,
    batch_idx: usize,
    rng: &mut Rng,
) -> (Vec<Token>, Vec<TriggerTag>) {
    let n_classes = config.batches.len().max(1);
    let lemma_weights: Vec<f64> = (0..inv.lemmas.len())
        .map(|i| {
            if i % n_classes == batch_idx {
                1.0
            } else {
                (1.0 - config.rotation_strength).max(1e-9)
            }
        })
        .collect();

    let span_count = weighted_choice(rng, &config.span_count_weights);
    let mut spans: Vec<PlannedSpan> = Vec::with_capacity(span_count);
    let mut blocked_types: BTreeSet<usize> = BTreeSet::new();
    for s in 0..span_count {
        let mut found = None;
        for _ in 0..64 {
            let lemma_idx = weighted_choice(rng, &lemma_weights);
            let types_of = &inv.lemma_types[lemma_idx];
            // Only the first span may be ambiguous, and a later span must
            // avoid the ambiguous span's type set, so markers stay decisive.
            if s > 0 && types_of.len() > 1 {
                continue;
            }
            let type_idx = types_of[rng.gen_range(0..types_of.len())];
            if s > 0 && blocked_types.contains(&type_idx) {
                continue;
            }
            found = Some((lemma_idx, type_idx));
            break;
        }
        // A compatible extra span may not exist (tiny inventories); the
        // sentence simply gets fewer spans then.
        let Some((lemma_idx, type_idx)) = found else {
            break;
        };
        if inv.lemma_types[lemma_idx].len() > 1 {
            blocked_types.extend(inv.lemma_types[lemma_idx].iter().copied());
        }
        spans.push(PlannedSpan {
            lemma_idx,
            type_idx,
            two_tokens: rng.gen_bool(0.25),
        });
    }

    let span_tokens: usize = spans.iter().map(|s| if s.two_tokens { 2 } else { 1 }).sum();
    let markers_per_span: Vec<usize> = spans
        .iter()
        .enumerate()
        .map(|(i, _)| if i == 0 { rng.gen_range(1..=2) } else { 1 })
        .collect();
    let marker_tokens: usize = markers_per_span.iter().sum();

    let min_len = config.sentence_len.0.max(span_tokens + marker_tokens + 1);
    let max_len = config.sentence_len.1.max(min_len);
    let length = rng.gen_range(min_len..=max_len);

    // Start with fillers, then overwrite span and marker positions.
    let mut tokens: Vec<Token> = (0..length)
        .map(|_| {
            let (surface, pos) = &inv.fillers[rng.gen_range(0..inv.fillers.len())];
            Token {
                surface: surface.clone(),
                pos: pos.clone(),
                lemma: surface.clone(),
            }
        })
        .collect();
    let mut tags: Vec<TriggerTag> = vec![TriggerTag::O; length];

    // Choose non-overlapping slots: spans first (which may need 2 adjacent
    // positions), then markers in remaining filler positions.
    let mut free: Vec<usize> = (0..length).collect();
    for span in &mut spans {
        if span.two_tokens && !free.windows(2).any(|w| w[1] == w[0] + 1) {
            span.two_tokens = false;
        }
        let slot = loop {
            let candidate = free[rng.gen_range(0..free.len())];
            if !span.two_tokens {
                break candidate;
            }
            if free.contains(&(candidate + 1)) {
                break candidate;
            }
        };
        let ty = &inv.types[span.type_idx];
        let lemma = &inv.lemmas[span.lemma_idx];
        let inflected = rng.gen_bool(0.5);
        let surface = if inflected {
            format!("{lemma}{}", if rng.gen_bool(0.5) { "ed" } else { "s" })
        } else {
            lemma.clone()
        };
        tokens[slot] = Token {
            surface,
            pos: "VB".to_string(),
            lemma: lemma.clone(),
        };
        tags[slot] = TriggerTag::B(ty.clone());
        free.retain(|&p| p != slot);
        if span.two_tokens {
            let particle = &inv.particles[rng.gen_range(0..inv.particles.len())];
            tokens[slot + 1] = Token {
                surface: particle.clone(),
                pos: "RP".to_string(),
                lemma: particle.clone(),
            };
            tags[slot + 1] = TriggerTag::I(ty.clone());
            free.retain(|&p| p != slot + 1);
        }
    }
    for (span, &marker_count) in spans.iter().zip(&markers_per_span) {
        for _ in 0..marker_count {
            if free.is_empty() {
                break;
            }
            let slot_pos = rng.gen_range(0..free.len());
            let slot = free.remove(slot_pos);
            let markers = &inv.markers[span.type_idx];
            let surface = markers[rng.gen_range(0..markers.len())].clone();
            tokens[slot] = Token {
                surface: surface.clone(),
                pos: "NN".to_string(),
                lemma: surface,
            };
        }
    }

    (tokens, tags)
}

pub fn generate_with_truth(config: &SynthConfig) -> Result<(Vec<Batch>, SynthTruth)> {
    config.validate()?;
    let inv = build_inventory(config)?;
    let mut batches = Vec::with_capacity(config.batches.len());
    for (batch_idx, spec) in config.batches.iter().enumerate() {
        let ordinal = batch_idx as u32 + 1;
        let mut sentences = Vec::with_capacity(spec.n_train + spec.n_dev + spec.n_test);
        let mut index_in_batch = 0u32;
        for (split, count, split_tag) in [
            (Split::Train, spec.n_train, 1u64),
            (Split::Dev, spec.n_dev, 2),
            (Split::Test, spec.n_test, 3),
        ] {
            let mut rng = rng_from_seed(derive_seed(
                config.seed,
                &[stream::SYNTH, 1 + batch_idx as u64, split_tag],
            ));
            for k in 0..count {
                let (tokens, tags) = generate_sentence(config, &inv, batch_idx, &mut rng);
                sentences.push(Sentence {
                    tokens,
                    tags,
                    doc_id: format!("{}-{}-{:03}", spec.name, split.as_str(), k / 10),
                    batch_ordinal: ordinal,
                    index_in_batch,
                    split,
                });
                index_in_batch += 1;
            }
        }
        batches.push(Batch {
            ordinal,
            name: spec.name.clone(),
            sentences,
        });
    }

    let truth = SynthTruth {
        lemma_types: inv
            .lemmas
            .iter()
            .zip(&inv.lemma_types)
            .map(|(lemma, types_of)| {
                (
                    lemma.clone(),
                    types_of.iter().map(|&t| inv.types[t].clone()).collect(),
                )
            })
            .collect(),
        markers: inv
            .types
            .iter()
            .enumerate()
            .map(|(t, ty)| (ty.clone(), inv.markers[t].clone()))
            .collect(),
        particles: inv.particles.iter().cloned().collect(),
    };
    Ok((batches, truth))
}

pub fn generate_corpus(config: &SynthConfig) -> Result<Vec<Batch>> {
    generate_with_truth(config).map(|(batches, _)| batches)
}

/// The Bayes-optimal rule behind the construction: lemma identity finds the
/// trigger, markers decide the type of an ambiguous lemma, a particle right
/// after a trigger continues the span.
pub fn oracle_tags(sentence: &Sentence, truth: &SynthTruth) -> Vec<TriggerTag> {
    let marker_types: BTreeSet<&String> = sentence
        .tokens
        .iter()
        .filter_map(|token| {
            truth
                .markers
                .iter()
                .find(|(_, words)| words.contains(&token.surface))
                .map(|(ty, _)| ty)
        })
        .collect();
    let mut tags = vec![TriggerTag::O; sentence.tokens.len()];
    let mut i = 0;
    while i < sentence.tokens.len() {
        let lemma = &sentence.tokens[i].lemma;
        if let Some(types_of) = truth.lemma_types.get(lemma) {
            let ty = if types_of.len() == 1 {
                Some(&types_of[0])
            } else {
                let indicated: Vec<&String> = types_of
                    .iter()
                    .filter(|t| marker_types.contains(t))
                    .collect();
                if indicated.len() == 1 {
                    Some(indicated[0])
                } else {
                    None
                }
            };
            if let Some(ty) = ty {
                tags[i] = TriggerTag::B(ty.clone());
                if i + 1 < sentence.tokens.len()
                    && truth.particles.contains(&sentence.tokens[i + 1].surface)
                {
                    tags[i + 1] = TriggerTag::I(ty.clone());
                    i += 2;
                    continue;
                }
            }
        }
        i += 1;
    }
    tags
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_corpus, serialize_corpus, validate_bio};
    use crate::eval::{extract_spans, trigger_prf};
    use crate::noise_sim::build_confusing_list;

    fn small_config(ambiguous_fraction: f64) -> SynthConfig {
        SynthConfig {
            n_event_types: 4,
            event_type_names: None,
            vocab_size: 60,
            n_trigger_lemmas: 10,
            ambiguous_fraction,
            markers_per_type: 4,
            batches: vec![
                BatchSpec {
                    name: "b1".into(),
                    n_train: 60,
                    n_dev: 10,
                    n_test: 10,
                },
                BatchSpec {
                    name: "b2".into(),
                    n_train: 60,
                    n_dev: 10,
                    n_test: 10,
                },
            ],
            sentence_len: (5, 9),
            span_count_weights: [0.2, 0.5, 0.3],
            rotation_strength: 0.5,
            seed: 11,
        }
    }

    #[test]
    fn output_parses_and_validates_roundtrip() {
        let batches = generate_corpus(&small_config(0.5)).unwrap();
        let text = serialize_corpus(&batches);
        let reparsed = parse_corpus(&text).unwrap();
        assert_eq!(reparsed, batches);
        for batch in &batches {
            for s in &batch.sentences {
                assert!(validate_bio(&s.tags).is_ok());
            }
        }
    }

    #[test]
    fn identical_configs_are_byte_identical() {
        let config = small_config(0.5);
        let a = serialize_corpus(&generate_corpus(&config).unwrap());
        let b = serialize_corpus(&generate_corpus(&config).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_ambiguity_gives_empty_confusing_list() {
        let batches = generate_corpus(&small_config(0.0)).unwrap();
        let list = build_confusing_list(batches.iter().flat_map(|b| b.train()));
        assert!(list.is_empty());
    }

    #[test]
    fn full_ambiguity_populates_confusing_list() {
        let mut config = small_config(1.0);
        config.batches[0].n_train = 400;
        config.batches[1].n_train = 400;
        let batches = generate_corpus(&config).unwrap();
        let list = build_confusing_list(batches.iter().flat_map(|b| b.train()));
        assert_eq!(list.len(), config.n_trigger_lemmas);
    }

    #[test]
    fn uncoverable_types_are_rejected() {
        let mut config = small_config(0.0);
        config.n_event_types = 12;
        config.n_trigger_lemmas = 7;
        assert!(generate_corpus(&config).is_err());
    }

    #[test]
    fn bayes_oracle_scores_perfectly_on_clean_data() {
        let (batches, truth) = generate_with_truth(&small_config(0.5)).unwrap();
        let pairs: Vec<_> = batches
            .iter()
            .flat_map(|b| b.sentences.iter())
            .map(|s| {
                (
                    extract_spans(&oracle_tags(s, &truth)),
                    extract_spans(&s.tags),
                )
            })
            .collect();
        let prf = trigger_prf(&pairs);
        assert_eq!(
            (prf.precision, prf.recall, prf.f1),
            (1.0, 1.0, 1.0),
            "oracle must be perfect on clean data"
        );
    }

    #[test]
    fn table_scale_corpus_generates_quickly() {
        let config = SynthConfig {
            n_event_types: 8,
            event_type_names: None,
            vocab_size: 200,
            n_trigger_lemmas: 24,
            ambiguous_fraction: 0.5,
            markers_per_type: 8,
            batches: (1..=4)
                .map(|i| BatchSpec {
                    name: format!("b{i}"),
                    n_train: 300,
                    n_dev: 40,
                    n_test: 40,
                })
                .collect(),
            sentence_len: (5, 9),
            span_count_weights: [0.25, 0.5, 0.25],
            rotation_strength: 0.7,
            seed: 3,
        };
        let started = std::time::Instant::now();
        let batches = generate_corpus(&config).unwrap();
        assert!(started.elapsed().as_secs_f64() < 5.0);
        assert_eq!(batches.len(), 4);
        assert_eq!(batches[0].train().count(), 300);
        assert_eq!(batches[3].test().count(), 40);
    }

    #[test]
    fn config_json_roundtrip() {
        let json = r#"{
            "n_event_types": 3, "vocab_size": 50, "n_trigger_lemmas": 6,
            "ambiguous_fraction": 0.5,
            "batches": [{"name": "m1", "n_train": 10, "n_dev": 2, "n_test": 2}],
            "sentence_len": [4, 8], "seed": 1
        }"#;
        let config: SynthConfig = serde_json::from_str(json).unwrap();
        assert_eq!(config.markers_per_type, default_markers_per_type());
        assert_eq!(config.span_count_weights, default_span_weights());
        assert_eq!(config.rotation_strength, 0.0);
        generate_corpus(&config).unwrap();
    }
}
