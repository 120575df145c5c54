//! Self-contained oracle suites behind the `selftest` and `gradcheck`
//! commands. Each suite checks an implementation path against an
//! independent reference: exhaustive path enumeration for the CRF, a
//! separate linear scan for retrieval, and central finite differences for
//! the full model's gradients.

use rand::Rng as _;

use crate::corpus::{build_tagset, Sentence, Split, Token, TriggerTag};
use crate::encoder::{synthetic_word_embeddings, Vocab};
use crate::error::Result;
use crate::numerics::{grad_check, GradCheckEntry, NodeId, ParamStore, Tape, Tensor};
use crate::sentence_embed::{EmbeddingStore, SENTENCE_DIM_DEFAULT};
use crate::tagger::{crf_nll_graph, viterbi, Model, TaggerConfig};
use crate::util::{rng_from_seed, Rng};

// --- CRF vs exhaustive enumeration ----------------------------------------

#[derive(Debug, Clone)]
pub struct CrfSelftest {
    pub instances: usize,
    pub max_nll_abs_err: f64,
    pub viterbi_mismatches: usize,
    pub seconds: f64,
}

fn enumerate_paths(k: usize, n: usize) -> Vec<Vec<usize>> {
    let mut paths: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..n {
        let mut next = Vec::with_capacity(paths.len() * k);
        for p in &paths {
            for tag in 0..k {
                let mut q = p.clone();
                q.push(tag);
                next.push(q);
            }
        }
        paths = next;
    }
    paths
}

fn path_score(emissions: &Tensor, transitions: &Tensor, k: usize, path: &[usize]) -> f64 {
    let (start, stop) = (k, k + 1);
    let mut score = transitions.get(start, path[0]);
    for (t, &tag) in path.iter().enumerate() {
        score += emissions.get(t, tag);
        if t > 0 {
            score += transitions.get(path[t - 1], tag);
        }
    }
    score + transitions.get(path[path.len() - 1], stop)
}

/// Random instances with ≤5 tokens and ≤5 tags, comparing the forward
/// algorithm's loss against brute-force path enumeration and the decoder
/// against exhaustive argmax.
pub fn crf_selftest(instances: usize, seed: u64) -> Result<CrfSelftest> {
    let started = std::time::Instant::now();
    let mut rng = rng_from_seed(seed);
    let mut max_nll_abs_err = 0.0f64;
    let mut viterbi_mismatches = 0usize;
    for _ in 0..instances {
        let k = if rng.gen_bool(0.5) { 3 } else { 5 };
        let n = rng.gen_range(1..=5);
        let emissions = Tensor::from_vec(
            n,
            k,
            (0..n * k).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )?;
        let transitions = Tensor::from_vec(
            k + 2,
            k + 2,
            (0..(k + 2) * (k + 2))
                .map(|_| rng.gen_range(-1.5..1.5))
                .collect(),
        )?;
        let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();

        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let trans_id = store.register("t", transitions.clone(), true);
        let rows: Vec<NodeId> = (0..n)
            .map(|t| tape.input(Tensor::row_vector(emissions.row(t).to_vec())))
            .collect();
        let loss = crf_nll_graph(&mut tape, &store, trans_id, &rows, &gold, k)?;
        let nll = tape.value(loss).item();

        let paths = enumerate_paths(k, n);
        let scores: Vec<f64> = paths
            .iter()
            .map(|p| path_score(&emissions, &transitions, k, p))
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        let oracle_nll = log_z - path_score(&emissions, &transitions, k, &gold);
        max_nll_abs_err = max_nll_abs_err.max((nll - oracle_nll).abs());

        let decoded = viterbi(&emissions, &transitions, k);
        let mut best = f64::NEG_INFINITY;
        let mut best_path: &[usize] = &paths[0];
        for (p, s) in paths.iter().zip(&scores) {
            if *s > best {
                best = *s;
                best_path = p;
            }
        }
        if decoded != best_path {
            viterbi_mismatches += 1;
        }
    }
    Ok(CrfSelftest {
        instances,
        max_nll_abs_err,
        viterbi_mismatches,
        seconds: started.elapsed().as_secs_f64(),
    })
}

// --- retrieval vs independent linear scan ----------------------------------

#[derive(Debug, Clone)]
pub struct RetrievalSelftest {
    pub vectors: usize,
    pub queries: usize,
    pub mismatches: usize,
    pub seconds: f64,
}

/// Fills a store with `vectors` random embeddings spread over `batches`
/// batches (plus planted exact ties) and cross-checks every query against a
/// separate scan with the same lowest-index tie rule.
pub fn retrieval_selftest(
    vectors: usize,
    batches: u32,
    dim: usize,
    queries: usize,
    seed: u64,
) -> Result<RetrievalSelftest> {
    let started = std::time::Instant::now();
    let mut rng = rng_from_seed(seed);
    let per_batch = vectors / batches as usize;
    let mut store = EmbeddingStore::new(dim);
    let mut reference: Vec<(u32, Vec<(u32, Vec<f64>)>)> = Vec::new();
    for ordinal in 1..=batches {
        let mut entries: Vec<(u32, Vec<f64>)> = (0..per_batch as u32)
            .map(|i| {
                (
                    i,
                    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
                )
            })
            .collect();
        // plant a duplicate so tie-breaking is actually exercised
        if entries.len() >= 2 {
            let clone_of = entries[0].1.clone();
            let last = entries.len() - 1;
            entries[last].1 = clone_of;
        }
        store.insert_batch(ordinal, entries.clone())?;
        reference.push((ordinal, entries));
    }
    let mut mismatches = 0usize;
    for q in 0..queries {
        let query: Vec<f64> = if q % 10 == 0 {
            // exact-duplicate queries hit distance zero
            reference[q % reference.len()].1[0].1.clone()
        } else {
            (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        for (ordinal, entries) in &reference {
            let mut best = (f64::INFINITY, 0u32);
            for (index, v) in entries {
                let d: f64 = query
                    .iter()
                    .zip(v)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.0 {
                    best = (d, *index);
                }
            }
            let (index, _) = store.retrieve_nearest(&query, *ordinal)?;
            if index != best.1 {
                mismatches += 1;
            }
        }
    }
    Ok(RetrievalSelftest {
        vectors: per_batch * batches as usize,
        queries,
        mismatches,
        seconds: started.elapsed().as_secs_f64(),
    })
}

// --- full-model finite-difference suite ------------------------------------

fn micro_sentence(words: &[(&str, &str)], index: u32) -> Sentence {
    Sentence {
        tokens: words
            .iter()
            .map(|(w, _)| Token {
                surface: w.to_string(),
                pos: if w.len() % 2 == 0 { "VB" } else { "NN" }.to_string(),
                lemma: w.to_string(),
            })
            .collect(),
        tags: words
            .iter()
            .map(|(_, t)| TriggerTag::parse(t).unwrap())
            .collect(),
        doc_id: "micro".into(),
        batch_ordinal: 2,
        index_in_batch: index,
        split: Split::Train,
    }
}

/// The three-sentence micro-corpus used by the gradient suite.
fn micro_corpus() -> Vec<Sentence> {
    vec![
        micro_sentence(
            &[
                ("troops", "O"),
                ("fired", "B-Attack"),
                ("at", "O"),
                ("dawn", "O"),
            ],
            0,
        ),
        micro_sentence(
            &[
                ("leaders", "O"),
                ("met", "B-Meet"),
                ("again", "O"),
            ],
            1,
        ),
        micro_sentence(
            &[
                ("rebels", "O"),
                ("shot", "B-Attack"),
                ("down", "I-Attack"),
                ("drones", "O"),
            ],
            2,
        ),
    ]
}

/// Builds the full proposed model (paper dimensions, memory head) on the
/// micro-corpus and checks every trainable parameter group against central
/// finite differences at the given `eps`. Memory input sequences are fixed
/// random vectors standing in for retrieved embeddings.
pub fn full_model_grad_suite(eps: f64, seed: u64) -> Result<Vec<GradCheckEntry>> {
    let sentences = micro_corpus();
    let batches = vec![crate::corpus::Batch {
        ordinal: 1,
        name: "micro".into(),
        sentences: sentences.clone(),
    }];
    let vocab = Vocab::from_batches(&batches);
    let tagset = build_tagset(&["Attack", "Meet"]).unwrap();
    let config = TaggerConfig::default();
    let word = synthetic_word_embeddings(&batches, config.encoder.word_dim, seed);

    let mut rng = rng_from_seed(seed);
    let vanilla = Model::new(&config, &tagset, &vocab, &word, &mut rng)?;
    let mut model = vanilla.upgrade_with_memory(&mut rng)?;

    let memory_inputs: Vec<Vec<Vec<f64>>> = sentences
        .iter()
        .map(|_| random_memory_sequence(&mut rng, 3))
        .collect();

    let eval = |tape: &mut Tape, store: &ParamStore, model: &Model| -> Result<NodeId> {
        let mut losses = Vec::with_capacity(sentences.len());
        for (sentence, memory_seq) in sentences.iter().zip(&memory_inputs) {
            let memory = model
                .memory_network()
                .expect("memory model")
                .memory_embed(tape, store, memory_seq)?;
            losses.push(model.sentence_loss(tape, store, &vocab, sentence, memory)?);
        }
        tape.add_n(&losses)
    };

    model.store.zero_grads();
    let mut tape = Tape::new();
    let loss = eval(&mut tape, &model.store, &model)?;
    tape.backward(loss, &mut model.store)?;
    drop(tape);

    let mut probe = model.store.clone();
    grad_check(&mut probe, eps, 8, 1e-3, seed, |store| {
        let mut tape = Tape::new();
        let loss = eval(&mut tape, store, &model)?;
        Ok(tape.value(loss).item())
    })
}

fn random_memory_sequence(rng: &mut Rng, len: usize) -> Vec<Vec<f64>> {
    (0..len)
        .map(|_| {
            (0..SENTENCE_DIM_DEFAULT)
                .map(|_| rng.gen_range(-0.5..0.5))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crf_selftest_clean_on_small_run() {
        let result = crf_selftest(25, 42).unwrap();
        assert!(result.max_nll_abs_err < 1e-9);
        assert_eq!(result.viterbi_mismatches, 0);
    }

    #[test]
    fn retrieval_selftest_clean_on_small_run() {
        let result = retrieval_selftest(200, 4, 16, 50, 42).unwrap();
        assert_eq!(result.mismatches, 0);
    }
}
