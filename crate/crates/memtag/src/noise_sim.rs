//! Decreasing annotation-noise simulation.
//!
//! Corruption operates on whole trigger spans in the training split only:
//! per span one uniform draw decides whether it is touched at all, and a
//! touched span is either dropped to O or — when its B-token's lemma is on
//! the confusing list — relabeled wholesale to another plausible type.
//! Development and test splits are never modified.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, Sentence, Split, TriggerTag};
use crate::error::{Error, Result};
use crate::eval::extract_spans;
use crate::util::{derive_seed, rng_from_seed, stream};

/// Per-batch noise levels, keyed by batch ordinal.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    per_batch: BTreeMap<u32, f64>,
}

impl NoiseSchedule {
    pub fn new(per_batch: BTreeMap<u32, f64>) -> Result<NoiseSchedule> {
        for (ordinal, level) in &per_batch {
            if !(0.0..=1.0).contains(level) {
                return Err(Error::Config(format!(
                    "noise level {level} for batch {ordinal} is outside [0,1]"
                )));
            }
        }
        Ok(NoiseSchedule { per_batch })
    }

    pub fn level(&self, ordinal: u32) -> Option<f64> {
        self.per_batch.get(&ordinal).copied()
    }

    /// The conventional name of a schedule is its first batch's level, e.g.
    /// `"25%"` for 0.25/0.10/0.05/0.
    pub fn label(&self) -> String {
        let first = self.per_batch.values().next().copied().unwrap_or(0.0);
        format!("{}%", (first * 100.0).round() as u32)
    }
}

/// Lemmas observed as B-tagged trigger heads under two or more event types.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfusingList {
    entries: BTreeMap<String, BTreeSet<String>>,
}

impl ConfusingList {
    pub fn get(&self, lemma: &str) -> Option<&BTreeSet<String>> {
        self.entries.get(lemma)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BTreeSet<String>)> {
        self.entries.iter()
    }
}

/// Builds the confusing list from (clean) training sentences: a lemma maps
/// to the set of event types it was seen heading, kept only when that set
/// has at least two members.
pub fn build_confusing_list<'a>(
    train_sentences: impl Iterator<Item = &'a Sentence>,
) -> ConfusingList {
    let mut seen: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for sentence in train_sentences {
        for (token, tag) in sentence.tokens.iter().zip(&sentence.tags) {
            if let TriggerTag::B(ty) = tag {
                seen.entry(token.lemma.clone())
                    .or_default()
                    .insert(ty.clone());
            }
        }
    }
    seen.retain(|_, types| types.len() >= 2);
    ConfusingList { entries: seen }
}

/// Corrupts one training sentence in place of its labels. `drop_weight`
/// skews the drop-vs-relabel choice for confusing lemmas: `None` picks
/// uniformly among {drop} ∪ {alternative types}; `Some(w)` drops with
/// probability `w` and relabels uniformly otherwise.
pub fn corrupt_sentence(
    sentence: &Sentence,
    noise_level: f64,
    confusing: &ConfusingList,
    drop_weight: Option<f64>,
    rng: &mut crate::util::Rng,
) -> Result<Sentence> {
    if !(0.0..=1.0).contains(&noise_level) {
        return Err(Error::Config(format!(
            "noise level {noise_level} is outside [0,1]"
        )));
    }
    if let Some(w) = drop_weight {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::Config(format!(
                "drop weight {w} is outside [0,1]"
            )));
        }
    }
    let mut out = sentence.clone();
    for span in extract_spans(&sentence.tags) {
        let u: f64 = rng.gen();
        if u >= noise_level {
            continue;
        }
        let head_lemma = &sentence.tokens[span.start].lemma;
        let alternatives: Vec<&String> = confusing
            .get(head_lemma)
            .map(|types| types.iter().filter(|t| **t != span.event_type).collect())
            .unwrap_or_default();
        let replacement: Option<&String> = if alternatives.is_empty() {
            None // not on the confusing list: the only action is a drop
        } else {
            match drop_weight {
                None => {
                    let choice = rng.gen_range(0..=alternatives.len());
                    if choice == 0 {
                        None
                    } else {
                        Some(alternatives[choice - 1])
                    }
                }
                Some(w) => {
                    if rng.gen::<f64>() < w {
                        None
                    } else {
                        Some(alternatives[rng.gen_range(0..alternatives.len())])
                    }
                }
            }
        };
        match replacement {
            None => {
                for tag in &mut out.tags[span.start..span.end] {
                    *tag = TriggerTag::O;
                }
            }
            Some(new_type) => {
                out.tags[span.start] = TriggerTag::B(new_type.clone());
                for tag in &mut out.tags[span.start + 1..span.end] {
                    *tag = TriggerTag::I(new_type.clone());
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SimulationGroup {
    pub group_id: u32,
    pub seed: u64,
    pub batches: Vec<Batch>,
}

/// Generates `n_groups` corrupted copies of the corpus. The confusing list
/// is built once from the clean training split across all batches; each
/// group corrupts independently under its derived seed. Dev and test splits
/// are carried over untouched.
pub fn generate_groups(
    batches: &[Batch],
    schedule: &NoiseSchedule,
    n_groups: u32,
    master_seed: u64,
    drop_weight: Option<f64>,
) -> Result<Vec<SimulationGroup>> {
    if n_groups == 0 {
        return Err(Error::Config("n_groups must be at least 1".into()));
    }
    for batch in batches {
        if schedule.level(batch.ordinal).is_none() {
            return Err(Error::Config(format!(
                "schedule has no entry for batch ordinal {}",
                batch.ordinal
            )));
        }
    }
    let confusing = build_confusing_list(batches.iter().flat_map(|b| b.train()));
    let mut groups = Vec::with_capacity(n_groups as usize);
    for group_id in 1..=n_groups {
        let seed = derive_seed(master_seed, &[stream::GROUP, group_id as u64]);
        let mut rng = rng_from_seed(seed);
        let mut corrupted_batches = Vec::with_capacity(batches.len());
        for batch in batches {
            let noise = schedule.level(batch.ordinal).expect("checked above");
            let mut sentences = Vec::with_capacity(batch.sentences.len());
            for sentence in &batch.sentences {
                if sentence.split == Split::Train {
                    sentences.push(corrupt_sentence(
                        sentence,
                        noise,
                        &confusing,
                        drop_weight,
                        &mut rng,
                    )?);
                } else {
                    sentences.push(sentence.clone());
                }
            }
            corrupted_batches.push(Batch {
                ordinal: batch.ordinal,
                name: batch.name.clone(),
                sentences,
            });
        }
        groups.push(SimulationGroup {
            group_id,
            seed,
            batches: corrupted_batches,
        });
    }
    Ok(groups)
}

/// JSON configuration for the `simulate` pipeline step. Schedule keys are
/// batch ordinals as strings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub schedule: BTreeMap<String, f64>,
    pub n_groups: u32,
    pub master_seed: u64,
    #[serde(default)]
    pub drop_weight: Option<f64>,
}

impl NoiseConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let mut per_batch = BTreeMap::new();
        for (key, level) in &self.schedule {
            let ordinal: u32 = key
                .parse()
                .map_err(|_| Error::Config(format!("schedule key `{key}` is not an ordinal")))?;
            per_batch.insert(ordinal, *level);
        }
        NoiseSchedule::new(per_batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_corpus, serialize_corpus, validate_bio, Token};

    fn sentence(tokens: &[(&str, &str)], split: Split) -> Sentence {
        Sentence {
            tokens: tokens
                .iter()
                .map(|(surface, _)| Token {
                    surface: surface.to_string(),
                    pos: "VB".to_string(),
                    lemma: surface.to_string(),
                })
                .collect(),
            tags: tokens
                .iter()
                .map(|(_, tag)| TriggerTag::parse(tag).unwrap())
                .collect(),
            doc_id: "d".to_string(),
            batch_ordinal: 1,
            index_in_batch: 0,
            split,
        }
    }

    #[test]
    fn confusing_list_needs_two_types() {
        let sentences = vec![
            sentence(&[("fire", "B-Attack")], Split::Train),
            sentence(&[("fire", "B-End-Position")], Split::Train),
            sentence(&[("meet", "B-Meet")], Split::Train),
        ];
        let list = build_confusing_list(sentences.iter());
        assert_eq!(list.len(), 1);
        let types = list.get("fire").unwrap();
        assert!(types.contains("Attack") && types.contains("End-Position"));
        assert!(list.get("meet").is_none());
    }

    #[test]
    fn empty_training_set_gives_empty_list() {
        let list = build_confusing_list(std::iter::empty());
        assert!(list.is_empty());
    }

    #[test]
    fn zero_noise_is_identity() {
        let s = sentence(&[("shot", "B-Attack"), ("down", "I-Attack")], Split::Train);
        let mut rng = rng_from_seed(5);
        let out = corrupt_sentence(&s, 0.0, &ConfusingList::default(), None, &mut rng).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn full_noise_off_list_drops_whole_span() {
        let s = sentence(&[("shot", "B-Attack"), ("down", "I-Attack")], Split::Train);
        let mut rng = rng_from_seed(5);
        let out = corrupt_sentence(&s, 1.0, &ConfusingList::default(), None, &mut rng).unwrap();
        assert_eq!(out.tags, vec![TriggerTag::O, TriggerTag::O]);
    }

    #[test]
    fn relabel_preserves_span_extent_and_bio() {
        let train = vec![
            sentence(&[("fire", "B-Attack"), ("off", "I-Attack")], Split::Train),
            sentence(&[("fire", "B-End-Position")], Split::Train),
        ];
        let list = build_confusing_list(train.iter());
        let mut rng = rng_from_seed(7);
        let mut saw_relabel = false;
        for _ in 0..200 {
            let out = corrupt_sentence(&train[0], 1.0, &list, None, &mut rng).unwrap();
            assert!(validate_bio(&out.tags).is_ok());
            match &out.tags[0] {
                TriggerTag::O => assert_eq!(out.tags[1], TriggerTag::O),
                TriggerTag::B(t) => {
                    assert_eq!(t, "End-Position");
                    assert_eq!(out.tags[1], TriggerTag::I("End-Position".to_string()));
                    saw_relabel = true;
                }
                other => panic!("unexpected head tag {other:?}"),
            }
        }
        assert!(saw_relabel);
    }

    #[test]
    fn drop_weight_one_always_drops() {
        let train = vec![
            sentence(&[("fire", "B-Attack")], Split::Train),
            sentence(&[("fire", "B-Meet")], Split::Train),
        ];
        let list = build_confusing_list(train.iter());
        let mut rng = rng_from_seed(11);
        for _ in 0..50 {
            let out = corrupt_sentence(&train[0], 1.0, &list, Some(1.0), &mut rng).unwrap();
            assert_eq!(out.tags, vec![TriggerTag::O]);
        }
    }

    #[test]
    fn invalid_noise_level_is_rejected() {
        let s = sentence(&[("x", "O")], Split::Train);
        let mut rng = rng_from_seed(1);
        assert!(corrupt_sentence(&s, 1.5, &ConfusingList::default(), None, &mut rng).is_err());
        assert!(corrupt_sentence(&s, -0.1, &ConfusingList::default(), None, &mut rng).is_err());
    }

    fn paper_style_corpus() -> Vec<Batch> {
        let mut text = String::new();
        for (i, month) in ["200303", "200304", "200305", "200306"].iter().enumerate() {
            for j in 0..4 {
                let split = match j {
                    0 | 1 => "train",
                    2 => "dev",
                    _ => "test",
                };
                text.push_str(&format!(
                    "# doc=doc{i}{j} batch={month} split={split}\n\
                     troops\tNN\ttroop\tO\n\
                     fired\tVB\tfire\tB-Attack\n\n"
                ));
            }
        }
        parse_corpus(&text).unwrap()
    }

    #[test]
    fn paper_schedules_produce_requested_group_counts() {
        let batches = paper_style_corpus();
        for schedule in [
            vec![0.25, 0.10, 0.05, 0.0],
            vec![0.10, 0.05, 0.0, 0.0],
        ] {
            let schedule = NoiseSchedule::new(
                schedule
                    .iter()
                    .enumerate()
                    .map(|(i, l)| (i as u32 + 1, *l))
                    .collect(),
            )
            .unwrap();
            let groups = generate_groups(&batches, &schedule, 10, 99, None).unwrap();
            assert_eq!(groups.len(), 10);
        }
    }

    #[test]
    fn same_master_seed_is_bit_identical() {
        let batches = paper_style_corpus();
        let schedule =
            NoiseSchedule::new([(1, 0.25), (2, 0.1), (3, 0.05), (4, 0.0)].into()).unwrap();
        let a = generate_groups(&batches, &schedule, 3, 1234, None).unwrap();
        let b = generate_groups(&batches, &schedule, 3, 1234, None).unwrap();
        for (ga, gb) in a.iter().zip(&b) {
            assert_eq!(
                serialize_corpus(&ga.batches),
                serialize_corpus(&gb.batches)
            );
        }
    }

    #[test]
    fn dev_and_test_splits_stay_byte_identical() {
        let batches = paper_style_corpus();
        let schedule =
            NoiseSchedule::new([(1, 1.0), (2, 1.0), (3, 1.0), (4, 1.0)].into()).unwrap();
        let groups = generate_groups(&batches, &schedule, 2, 5, None).unwrap();
        let eval_only = |batches: &[Batch]| {
            let filtered: Vec<Batch> = batches
                .iter()
                .map(|b| Batch {
                    ordinal: b.ordinal,
                    name: b.name.clone(),
                    sentences: b
                        .sentences
                        .iter()
                        .filter(|s| s.split != Split::Train)
                        .cloned()
                        .collect(),
                })
                .collect();
            serialize_corpus(&filtered)
        };
        for group in &groups {
            assert_eq!(eval_only(&group.batches), eval_only(&batches));
            // and the training split did change under full noise
            assert_ne!(
                serialize_corpus(&group.batches),
                serialize_corpus(&batches)
            );
        }
    }

    #[test]
    fn missing_schedule_entry_is_an_error() {
        let batches = paper_style_corpus();
        let schedule = NoiseSchedule::new([(1, 0.25), (2, 0.1)].into()).unwrap();
        assert!(generate_groups(&batches, &schedule, 1, 1, None).is_err());
    }

    #[test]
    fn schedule_label_names_first_batch_level() {
        let schedule =
            NoiseSchedule::new([(1, 0.25), (2, 0.1), (3, 0.05), (4, 0.0)].into()).unwrap();
        assert_eq!(schedule.label(), "25%");
    }

    #[test]
    fn noise_config_json_roundtrip() {
        let json = r#"{"schedule": {"1": 0.25, "2": 0.1, "3": 0.05, "4": 0.0},
                       "n_groups": 10, "master_seed": 42, "drop_weight": null}"#;
        let config: NoiseConfig = serde_json::from_str(json).unwrap();
        assert_eq!(config.n_groups, 10);
        assert_eq!(config.drop_weight, None);
        let schedule = config.schedule().unwrap();
        assert_eq!(schedule.level(1), Some(0.25));
        assert_eq!(schedule.level(4), Some(0.0));
    }

    #[test]
    fn corruption_rate_tracks_noise_level() {
        // Monte-Carlo check against the Bernoulli oracle at 0.25.
        let mut sentences = Vec::new();
        for i in 0..12_000 {
            let mut s = sentence(&[("strike", "B-Attack"), ("x", "O")], Split::Train);
            s.index_in_batch = i;
            sentences.push(s);
        }
        let list = ConfusingList::default();
        let mut rng = rng_from_seed(2024);
        let mut corrupted = 0usize;
        for s in &sentences {
            let out = corrupt_sentence(s, 0.25, &list, None, &mut rng).unwrap();
            if out.tags != s.tags {
                corrupted += 1;
            }
        }
        let fraction = corrupted as f64 / sentences.len() as f64;
        assert!(
            (0.23..=0.27).contains(&fraction),
            "corrupted fraction {fraction}"
        );
    }
}
