//! Data model and I/O for batch-tagged, BIO-labeled corpora.
//!
//! The on-disk format is UTF-8 TSV: a header comment line
//! `# doc=<id> batch=<name> split=<train|dev|test>` precedes each sentence,
//! followed by one `surface<TAB>pos<TAB>lemma<TAB>bio_tag` line per token and
//! a blank line terminating the sentence. Batch ordinals are assigned by
//! first appearance of batch names; an optional `ordinal=<n>` header field
//! overrides that.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    pub pos: String,
    pub lemma: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TriggerTag {
    O,
    B(String),
    I(String),
}

impl TriggerTag {
    pub fn event_type(&self) -> Option<&str> {
        match self {
            TriggerTag::O => None,
            TriggerTag::B(t) | TriggerTag::I(t) => Some(t),
        }
    }

    pub fn parse(s: &str) -> Option<TriggerTag> {
        if s == "O" {
            return Some(TriggerTag::O);
        }
        let (prefix, ty) = s.split_once('-')?;
        if ty.is_empty() {
            return None;
        }
        match prefix {
            "B" => Some(TriggerTag::B(ty.to_string())),
            "I" => Some(TriggerTag::I(ty.to_string())),
            _ => None,
        }
    }
}

impl fmt::Display for TriggerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TriggerTag::O => write!(f, "O"),
            TriggerTag::B(t) => write!(f, "B-{t}"),
            TriggerTag::I(t) => write!(f, "I-{t}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "dev" => Some(Split::Dev),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<Token>,
    pub tags: Vec<TriggerTag>,
    pub doc_id: String,
    pub batch_ordinal: u32,
    /// Position within the batch across all splits, in file order. Uniquely
    /// keys a sentence together with `batch_ordinal`.
    pub index_in_batch: u32,
    pub split: Split,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn key(&self) -> String {
        format!(
            "doc={} batch_ordinal={} index={}",
            self.doc_id, self.batch_ordinal, self.index_in_batch
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ordinal: u32,
    pub name: String,
    pub sentences: Vec<Sentence>,
}

impl Batch {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sentence> {
        self.sentences.iter().filter(move |s| s.split == split)
    }

    pub fn train(&self) -> impl Iterator<Item = &Sentence> {
        self.split(Split::Train)
    }

    pub fn dev(&self) -> impl Iterator<Item = &Sentence> {
        self.split(Split::Dev)
    }

    pub fn test(&self) -> impl Iterator<Item = &Sentence> {
        self.split(Split::Test)
    }

    /// Per-batch counts in the shape of a corpus stat table. Triggers are
    /// counted as spans (maximal B/I runs), not tokens.
    pub fn stats(&self) -> BatchStats {
        let mut stats = BatchStats {
            sentences: self.sentences.len(),
            ..BatchStats::default()
        };
        let mut docs = std::collections::BTreeSet::new();
        for s in &self.sentences {
            docs.insert(s.doc_id.as_str());
            stats.words += s.tokens.len();
            stats.triggers += s
                .tags
                .iter()
                .filter(|t| matches!(t, TriggerTag::B(_)))
                .count();
        }
        stats.docs = docs.len();
        stats
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchStats {
    pub docs: usize,
    pub sentences: usize,
    pub words: usize,
    pub triggers: usize,
}

/// Label inventory: O plus B-/I- labels for each event type. O is id 0; the
/// two labels of type `t` (in inventory order) get ids `2t+1` and `2t+2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSet {
    event_types: Vec<String>,
    label_to_id: BTreeMap<String, usize>,
    id_to_label: Vec<String>,
}

impl TagSet {
    pub fn new(event_types: Vec<String>) -> Result<TagSet> {
        if event_types.is_empty() {
            return Err(Error::Invalid(
                "tag set needs at least one event type".into(),
            ));
        }
        let mut label_to_id = BTreeMap::new();
        let mut id_to_label = vec!["O".to_string()];
        label_to_id.insert("O".to_string(), 0);
        for ty in &event_types {
            for prefix in ["B", "I"] {
                let label = format!("{prefix}-{ty}");
                let id = id_to_label.len();
                if label_to_id.insert(label.clone(), id).is_some() {
                    return Err(Error::Invalid(format!("duplicate event type `{ty}`")));
                }
                id_to_label.push(label);
            }
        }
        Ok(TagSet {
            event_types,
            label_to_id,
            id_to_label,
        })
    }

    /// Builds the tag set from the event types present in a corpus, sorted
    /// lexicographically so ids do not depend on file order.
    pub fn from_batches(batches: &[Batch]) -> Result<TagSet> {
        let mut types = std::collections::BTreeSet::new();
        for b in batches {
            for s in &b.sentences {
                for tag in &s.tags {
                    if let Some(t) = tag.event_type() {
                        types.insert(t.to_string());
                    }
                }
            }
        }
        TagSet::new(types.into_iter().collect())
    }

    pub fn event_types(&self) -> &[String] {
        &self.event_types
    }

    pub fn len(&self) -> usize {
        self.id_to_label.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn o_id(&self) -> usize {
        0
    }

    pub fn id_of_label(&self, label: &str) -> Option<usize> {
        self.label_to_id.get(label).copied()
    }

    pub fn id_of_tag(&self, tag: &TriggerTag) -> Option<usize> {
        match tag {
            TriggerTag::O => Some(0),
            _ => self.label_to_id.get(&tag.to_string()).copied(),
        }
    }

    pub fn label_of_id(&self, id: usize) -> Option<&str> {
        self.id_to_label.get(id).map(|s| s.as_str())
    }

    pub fn tag_of_id(&self, id: usize) -> Option<TriggerTag> {
        self.id_to_label.get(id).and_then(|l| TriggerTag::parse(l))
    }
}

/// Builds a tag set from an explicit ordered event-type inventory.
pub fn build_tagset<S: AsRef<str>>(event_types: &[S]) -> Result<TagSet> {
    TagSet::new(event_types.iter().map(|t| t.as_ref().to_string()).collect())
}

/// Checks the BIO invariant: every I(t) must directly follow B(t) or I(t)
/// of the same type. Returns the first violating index with a description.
pub fn validate_bio(tags: &[TriggerTag]) -> std::result::Result<(), (usize, String)> {
    for (i, tag) in tags.iter().enumerate() {
        if let TriggerTag::I(ty) = tag {
            let prev = if i == 0 { None } else { Some(&tags[i - 1]) };
            let ok = match prev {
                Some(TriggerTag::B(p)) | Some(TriggerTag::I(p)) => p == ty,
                _ => false,
            };
            if !ok {
                let prev_desc = prev.map_or("start of sentence".to_string(), |p| p.to_string());
                return Err((
                    i,
                    format!("I-{ty} must follow B-{ty} or I-{ty}, found {prev_desc} before it"),
                ));
            }
        }
    }
    Ok(())
}

fn validate_sentence(sentence: &Sentence) -> Result<()> {
    if sentence.tokens.is_empty() {
        return Err(Error::Invalid(format!(
            "empty sentence ({})",
            sentence.key()
        )));
    }
    if sentence.tokens.len() != sentence.tags.len() {
        return Err(Error::Invalid(format!(
            "token/tag length mismatch ({})",
            sentence.key()
        )));
    }
    validate_bio(&sentence.tags).map_err(|(position, message)| Error::Bio {
        sentence: sentence.key(),
        position,
        message,
    })
}

struct HeaderFields {
    doc: String,
    batch: String,
    ordinal: Option<u32>,
    split: Split,
}

fn parse_header(file: &str, line_no: usize, line: &str) -> Result<HeaderFields> {
    let err = |message: String| Error::Parse {
        file: file.to_string(),
        line: line_no,
        message,
    };
    let body = line
        .strip_prefix("# ")
        .ok_or_else(|| err("expected `# doc=... batch=... split=...`".into()))?;
    let mut doc = None;
    let mut batch = None;
    let mut ordinal = None;
    let mut split = None;
    for field in body.split(' ') {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| err(format!("malformed header field `{field}`")))?;
        match key {
            "doc" => doc = Some(value.to_string()),
            "batch" => batch = Some(value.to_string()),
            "ordinal" => {
                let n: u32 = value
                    .parse()
                    .map_err(|_| err(format!("invalid ordinal `{value}`")))?;
                ordinal = Some(n);
            }
            "split" => {
                split =
                    Some(Split::parse(value).ok_or_else(|| {
                        err(format!("invalid split `{value}`"))
                    })?)
            }
            other => return Err(err(format!("unknown header field `{other}`"))),
        }
    }
    Ok(HeaderFields {
        doc: doc.ok_or_else(|| err("missing doc= field".into()))?,
        batch: batch.ok_or_else(|| err("missing batch= field".into()))?,
        ordinal,
        split: split.ok_or_else(|| err("missing split= field".into()))?,
    })
}

/// Parses a corpus from its TSV text. Sentences are BIO-validated; batch
/// ordinals follow first appearance of batch names unless headers carry
/// explicit `ordinal=` overrides (which must then cover every batch).
pub fn parse_corpus_named(input: &str, file: &str) -> Result<Vec<Batch>> {
    struct PendingBatch {
        name: String,
        explicit_ordinal: Option<u32>,
        sentences: Vec<Sentence>,
    }

    let mut batches: Vec<PendingBatch> = Vec::new();
    let mut by_name: BTreeMap<String, usize> = BTreeMap::new();

    let mut header: Option<(HeaderFields, usize)> = None;
    let mut tokens: Vec<Token> = Vec::new();
    let mut tags: Vec<TriggerTag> = Vec::new();

    let flush = |header: &mut Option<(HeaderFields, usize)>,
                     tokens: &mut Vec<Token>,
                     tags: &mut Vec<TriggerTag>,
                     batches: &mut Vec<PendingBatch>,
                     by_name: &mut BTreeMap<String, usize>|
     -> Result<()> {
        let Some((fields, header_line)) = header.take() else {
            return Ok(());
        };
        if tokens.is_empty() {
            return Err(Error::Parse {
                file: file.to_string(),
                line: header_line,
                message: format!("sentence in doc `{}` has no tokens", fields.doc),
            });
        }
        let slot = *by_name.entry(fields.batch.clone()).or_insert_with(|| {
            batches.push(PendingBatch {
                name: fields.batch.clone(),
                explicit_ordinal: None,
                sentences: Vec::new(),
            });
            batches.len() - 1
        });
        if let Some(ord) = fields.ordinal {
            let prev = batches[slot].explicit_ordinal.replace(ord);
            if prev.is_some_and(|p| p != ord) {
                return Err(Error::Parse {
                    file: file.to_string(),
                    line: header_line,
                    message: format!(
                        "batch `{}` declared with conflicting ordinals",
                        fields.batch
                    ),
                });
            }
        }
        let sentence = Sentence {
            tokens: std::mem::take(tokens),
            tags: std::mem::take(tags),
            doc_id: fields.doc,
            batch_ordinal: 0, // assigned below once ordinals are known
            index_in_batch: batches[slot].sentences.len() as u32,
            split: fields.split,
        };
        validate_sentence(&sentence)?;
        batches[slot].sentences.push(sentence);
        Ok(())
    };

    for (idx, raw) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            flush(&mut header, &mut tokens, &mut tags, &mut batches, &mut by_name)?;
            continue;
        }
        if line.starts_with('#') {
            if header.is_some() {
                return Err(Error::Parse {
                    file: file.to_string(),
                    line: line_no,
                    message: "header inside a sentence (missing blank separator?)".into(),
                });
            }
            header = Some((parse_header(file, line_no, line)?, line_no));
            continue;
        }
        if header.is_none() {
            return Err(Error::Parse {
                file: file.to_string(),
                line: line_no,
                message: "token line outside a sentence (missing header)".into(),
            });
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                file: file.to_string(),
                line: line_no,
                message: format!("expected 4 tab-separated columns, found {}", fields.len()),
            });
        }
        if fields[0].is_empty() || fields[2].is_empty() {
            return Err(Error::Parse {
                file: file.to_string(),
                line: line_no,
                message: "surface and lemma must be non-empty".into(),
            });
        }
        let tag = TriggerTag::parse(fields[3]).ok_or_else(|| Error::Parse {
            file: file.to_string(),
            line: line_no,
            message: format!("invalid BIO tag `{}`", fields[3]),
        })?;
        tokens.push(Token {
            surface: fields[0].to_string(),
            pos: fields[1].to_string(),
            lemma: fields[2].to_string(),
        });
        tags.push(tag);
    }
    flush(&mut header, &mut tokens, &mut tags, &mut batches, &mut by_name)?;

    // Resolve ordinals: explicit override when any batch has one, else first
    // appearance order.
    let any_explicit = batches.iter().any(|b| b.explicit_ordinal.is_some());
    let mut resolved: Vec<Batch> = Vec::with_capacity(batches.len());
    for (appearance, pending) in batches.into_iter().enumerate() {
        let ordinal = if any_explicit {
            pending.explicit_ordinal.ok_or_else(|| {
                Error::Invalid(format!(
                    "batch `{}` has no ordinal= while other batches do",
                    pending.name
                ))
            })?
        } else {
            appearance as u32 + 1
        };
        let mut sentences = pending.sentences;
        for s in &mut sentences {
            s.batch_ordinal = ordinal;
        }
        resolved.push(Batch {
            ordinal,
            name: pending.name,
            sentences,
        });
    }
    resolved.sort_by_key(|b| b.ordinal);
    let mut expected = 1;
    for b in &resolved {
        if b.ordinal != expected {
            return Err(Error::Invalid(format!(
                "batch ordinals must be contiguous from 1; `{}` has ordinal {}",
                b.name, b.ordinal
            )));
        }
        expected += 1;
    }
    Ok(resolved)
}

pub fn parse_corpus(input: &str) -> Result<Vec<Batch>> {
    parse_corpus_named(input, "<corpus>")
}

/// Serializes batches to the canonical TSV form: batches in ordinal order,
/// sentences in index order, one blank line after each sentence.
pub fn serialize_corpus(batches: &[Batch]) -> String {
    let mut out = String::new();
    let mut ordered: Vec<&Batch> = batches.iter().collect();
    ordered.sort_by_key(|b| b.ordinal);
    for batch in ordered {
        for s in &batch.sentences {
            serialize_sentence(&mut out, &batch.name, s);
        }
    }
    out
}

pub(crate) fn serialize_sentence(out: &mut String, batch_name: &str, s: &Sentence) {
    out.push_str(&format!(
        "# doc={} batch={} split={}\n",
        s.doc_id,
        batch_name,
        s.split.as_str()
    ));
    for (token, tag) in s.tokens.iter().zip(&s.tags) {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            token.surface, token.pos, token.lemma, tag
        ));
    }
    out.push('\n');
}

pub fn read_corpus_file(path: &std::path::Path) -> Result<Vec<Batch>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_corpus_named(&text, &path.display().to_string())
}

pub fn write_corpus_file(path: &std::path::Path, batches: &[Batch]) -> Result<()> {
    std::fs::write(path, serialize_corpus(batches))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tag(s: &str) -> TriggerTag {
        TriggerTag::parse(s).unwrap()
    }

    const TWO_SENTENCES: &str = "\
# doc=d1 batch=200303 split=train
Troops\tNN\ttroop\tO
advanced\tVB\tadvance\tO

# doc=d1 batch=200303 split=train
rebels\tNN\trebel\tO
shot\tVB\tshoot\tB-Attack
";

    #[test]
    fn parses_minimal_two_sentence_file() {
        let batches = parse_corpus(TWO_SENTENCES).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].sentences.len(), 2);
        assert_eq!(batches[0].ordinal, 1);
        assert_eq!(batches[0].sentences[1].tags[1], tag("B-Attack"));
        assert_eq!(batches[0].sentences[0].index_in_batch, 0);
        assert_eq!(batches[0].sentences[1].index_in_batch, 1);
    }

    #[test]
    fn rejects_bio_violation_with_position() {
        let text = "\
# doc=d1 batch=b split=train
it\tPR\tit\tO
down\tRB\tdown\tI-Attack
";
        let err = parse_corpus(text).unwrap_err();
        match err {
            Error::Bio { position, .. } => assert_eq!(position, 1),
            other => panic!("expected Bio error, got {other:?}"),
        }
    }

    #[test]
    fn four_month_batches_get_contiguous_ordinals() {
        let mut text = String::new();
        for month in ["200303", "200304", "200305", "200306"] {
            text.push_str(&format!(
                "# doc=d batch={month} split=train\nshot\tVB\tshoot\tB-Attack\n\n"
            ));
        }
        let batches = parse_corpus(&text).unwrap();
        assert_eq!(batches.len(), 4);
        let ordinals: Vec<u32> = batches.iter().map(|b| b.ordinal).collect();
        assert_eq!(ordinals, vec![1, 2, 3, 4]);
        assert_eq!(batches[3].name, "200306");
    }

    #[test]
    fn explicit_ordinal_overrides_appearance_order() {
        let text = "\
# doc=d batch=late ordinal=2 split=train
a\tNN\ta\tO

# doc=d batch=early ordinal=1 split=train
b\tNN\tb\tO
";
        let batches = parse_corpus(text).unwrap();
        assert_eq!(batches[0].name, "early");
        assert_eq!(batches[1].name, "late");
    }

    #[test]
    fn serialize_roundtrip_is_fixpoint() {
        let parsed = parse_corpus(TWO_SENTENCES).unwrap();
        let once = serialize_corpus(&parsed);
        let twice = serialize_corpus(&parse_corpus(&once).unwrap());
        assert_eq!(once, twice);
        assert_eq!(parse_corpus(&once).unwrap(), parsed);
    }

    #[test]
    fn serialize_empty_is_empty() {
        assert_eq!(serialize_corpus(&[]), "");
    }

    #[test]
    fn one_sentence_has_token_lines_plus_separator() {
        let text = "# doc=d batch=b split=dev\nx\tNN\tx\tO\ny\tNN\ty\tO\n";
        let batches = parse_corpus(text).unwrap();
        let out = serialize_corpus(&batches);
        let lines: Vec<&str> = out.split('\n').collect();
        // header, 2 token lines, 1 blank separator, then end of file
        assert_eq!(lines.len(), 5);
        assert!(lines[0].starts_with("# "));
        assert_eq!(lines[3], "");
        assert_eq!(lines[4], "");
    }

    #[test]
    fn rejects_empty_sentence() {
        let text = "# doc=d batch=b split=train\n\n";
        assert!(parse_corpus(text).is_err());
    }

    #[test]
    fn parse_error_carries_line_number() {
        let text = "# doc=d batch=b split=train\nonly_two\tcolumns\n";
        match parse_corpus(text).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected Parse error, got {other:?}"),
        }
    }

    #[test]
    fn tagset_small_and_ace_sized() {
        let ts = build_tagset(&["Attack"]).unwrap();
        assert_eq!(ts.len(), 3);
        assert_eq!(ts.id_of_label("O"), Some(0));
        assert_eq!(ts.id_of_label("B-Attack"), Some(1));
        assert_eq!(ts.id_of_label("I-Attack"), Some(2));

        let types: Vec<String> = (0..33).map(|i| format!("T{i:02}")).collect();
        let ts = build_tagset(&types).unwrap();
        assert_eq!(ts.len(), 67);
    }

    #[test]
    fn tagset_rejects_empty_and_duplicates() {
        assert!(build_tagset::<&str>(&[]).is_err());
        assert!(build_tagset(&["Attack", "Attack"]).is_err());
    }

    #[test]
    fn tagset_mapping_is_bijective() {
        let ts = build_tagset(&["Attack", "Meet", "Die"]).unwrap();
        for id in 0..ts.len() {
            let label = ts.label_of_id(id).unwrap();
            assert_eq!(ts.id_of_label(label), Some(id));
            let tag = ts.tag_of_id(id).unwrap();
            assert_eq!(ts.id_of_tag(&tag), Some(id));
        }
    }

    #[test]
    fn bio_validation_cases() {
        assert!(validate_bio(&[tag("O"), tag("B-Attack"), tag("I-Attack")]).is_ok());
        assert_eq!(validate_bio(&[tag("I-Attack")]).unwrap_err().0, 0);
        assert_eq!(
            validate_bio(&[tag("B-Attack"), tag("I-Meet")]).unwrap_err().0,
            1
        );
    }

    #[test]
    fn stats_count_trigger_spans_not_tokens() {
        let text = "\
# doc=d batch=b split=train
shot\tVB\tshoot\tB-Attack
down\tRB\tdown\tI-Attack
";
        let batches = parse_corpus(text).unwrap();
        let stats = batches[0].stats();
        assert_eq!(stats.triggers, 1);
        assert_eq!(stats.words, 2);
        assert_eq!(stats.docs, 1);
    }
}
