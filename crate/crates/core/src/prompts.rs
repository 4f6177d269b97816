//! Prompt templates, the word-level vocabulary, and rendering into hybrid
//! element streams where user and history-item positions are injection
//! slots rather than text.
//!
//! Templates are stored one per line as
//! `task<TAB>id<TAB>input_pattern<TAB>target_pattern`, with slots
//! `{dataset}`, `{user_id}`, `{history}` and `{target}`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The shipped template set: 11 paraphrases per task.
pub const DEFAULT_TEMPLATES: &str = include_str!("../assets/templates.tsv");

pub const TEMPLATES_PER_TASK: usize = 11;
pub const UNSEEN_TEMPLATE_ID: usize = 10;
pub const DEFAULT_MAX_HISTORY: usize = 20;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];
const HISTORY_SEPARATOR: &str = ",";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    Sequential,
    Straightforward,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Sequential, Task::Straightforward];

    pub fn name(self) -> &'static str {
        match self {
            Task::Sequential => "sequential",
            Task::Straightforward => "straightforward",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Task::Sequential),
            "straightforward" => Ok(Task::Straightforward),
            other => Err(Error::invalid(format!("unknown task {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regime {
    Seen,
    Unseen,
}

impl Regime {
    pub const ALL: [Regime; 2] = [Regime::Seen, Regime::Unseen];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Seen => "seen",
            Regime::Unseen => "unseen",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Templates 0..=9 are used for training; 10 is held out.
pub fn template_regime(template_id: usize) -> Result<Regime> {
    match template_id {
        0..UNSEEN_TEMPLATE_ID => Ok(Regime::Seen),
        UNSEEN_TEMPLATE_ID => Ok(Regime::Unseen),
        _ => Err(Error::OutOfRange {
            what: "template id",
            index: template_id,
            len: TEMPLATES_PER_TASK,
        }),
    }
}

/// Keeps the `max_history` most recent items.
pub fn truncate_history(history: &[usize], max_history: usize) -> &[usize] {
    assert!(max_history >= 1, "max_history must be >= 1");
    &history[history.len().saturating_sub(max_history)..]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Dataset,
    UserId,
    History,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Piece {
    Word(String),
    Slot(Slot),
}

/// Splits a pattern into words, single punctuation characters and `{slot}`
/// markers.
pub fn tokenize_pattern(pattern: &str) -> Result<Vec<Piece>> {
    let mut pieces = Vec::new();
    let mut chars = pattern.char_indices().peekable();
    while let Some(&(start, c)) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c == '{' {
            let end = pattern[start..]
                .find('}')
                .map(|e| start + e)
                .ok_or_else(|| Error::invalid(format!("unclosed slot in {pattern:?}")))?;
            let slot = match &pattern[start + 1..end] {
                "dataset" => Slot::Dataset,
                "user_id" => Slot::UserId,
                "history" => Slot::History,
                "target" => Slot::Target,
                other => return Err(Error::invalid(format!("unknown slot {{{other}}}"))),
            };
            pieces.push(Piece::Slot(slot));
            while chars.peek().is_some_and(|&(i, _)| i <= end) {
                chars.next();
            }
        } else if is_word_char(c) {
            let mut end = start;
            while let Some(&(i, c)) = chars.peek() {
                if !is_word_char(c) {
                    break;
                }
                end = i + c.len_utf8();
                chars.next();
            }
            pieces.push(Piece::Word(pattern[start..end].to_owned()));
        } else {
            pieces.push(Piece::Word(c.to_string()));
            chars.next();
        }
    }
    Ok(pieces)
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '-' || c == '\''
}

/// Words of free text (such as a dataset name) under the template
/// tokenizer.
pub fn text_words(text: &str) -> Result<Vec<String>> {
    tokenize_pattern(text)?
        .into_iter()
        .map(|p| match p {
            Piece::Word(w) => Ok(w),
            Piece::Slot(_) => Err(Error::invalid(format!(
                "slot marker in plain text {text:?}"
            ))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: usize,
    pub task: Task,
    pub input: Vec<Piece>,
    pub target: Vec<Piece>,
}

impl PromptTemplate {
    pub fn regime(&self) -> Regime {
        template_regime(self.id).expect("validated at load")
    }

    fn count(pieces: &[Piece], slot: Slot) -> usize {
        pieces.iter().filter(|p| **p == Piece::Slot(slot)).count()
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| {
            Err(Error::invalid(format!(
                "{} template {}: {msg}",
                self.task, self.id
            )))
        };
        if Self::count(&self.input, Slot::UserId) != 1 {
            return bad("input must contain {user_id} exactly once");
        }
        let histories = Self::count(&self.input, Slot::History);
        match self.task {
            Task::Sequential if histories != 1 => {
                return bad("sequential input must contain {history} exactly once")
            }
            Task::Straightforward if histories != 0 => {
                return bad("straightforward input must not contain {history}")
            }
            _ => {}
        }
        if Self::count(&self.input, Slot::Target) != 0 {
            return bad("input must not contain {target}");
        }
        if self.target.last() != Some(&Piece::Slot(Slot::Target))
            || Self::count(&self.target, Slot::Target) != 1
        {
            return bad("target pattern must end with its only {target}");
        }
        if Self::count(&self.target, Slot::UserId) + Self::count(&self.target, Slot::History) != 0 {
            return bad("target pattern may only hold words, {dataset} and {target}");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: Vec<PromptTemplate>,
}

impl TemplateSet {
    pub fn parse(text: &str) -> Result<Self> {
        let mut templates = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: "templates".into(),
                line: lineno + 1,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(err(format!(
                    "expected 4 tab-separated fields, got {}",
                    fields.len()
                )));
            }
            let task: Task = fields[0].parse().map_err(|e: Error| err(e.to_string()))?;
            let id: usize = fields[1]
                .parse()
                .map_err(|_| err(format!("bad template id {:?}", fields[1])))?;
            template_regime(id).map_err(|e| err(e.to_string()))?;
            let t = PromptTemplate {
                id,
                task,
                input: tokenize_pattern(fields[2]).map_err(|e| err(e.to_string()))?,
                target: tokenize_pattern(fields[3]).map_err(|e| err(e.to_string()))?,
            };
            t.validate().map_err(|e| err(e.to_string()))?;
            templates.push(t);
        }
        for task in Task::ALL {
            for id in 0..TEMPLATES_PER_TASK {
                let n = templates
                    .iter()
                    .filter(|t| t.task == task && t.id == id)
                    .count();
                if n != 1 {
                    return Err(Error::invalid(format!(
                        "{task} template {id} defined {n} times; need exactly once"
                    )));
                }
            }
        }
        templates.sort_by_key(|t| (t.task, t.id));
        Ok(TemplateSet { templates })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn shipped() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("shipped templates are valid")
    }

    pub fn get(&self, task: Task, id: usize) -> Result<&PromptTemplate> {
        self.templates
            .iter()
            .find(|t| t.task == task && t.id == id)
            .ok_or(Error::OutOfRange {
                what: "template id",
                index: id,
                len: TEMPLATES_PER_TASK,
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.iter()
    }
}

/// Closed word-level vocabulary.
///
/// Ids: the three specials, then text words in first-appearance order over
/// the templates and dataset name, then one atomic token per catalog item,
/// then (text-only baseline only) one token per user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    dataset_tokens: Vec<usize>,
    n_items: usize,
    n_user_tokens: usize,
}

impl Vocabulary {
    pub fn build(
        templates: &TemplateSet,
        n_items: usize,
        dataset_name: &str,
        n_user_tokens: usize,
    ) -> Result<Self> {
        let mut vocab = Vocabulary {
            words: Vec::new(),
            index: HashMap::new(),
            dataset_tokens: Vec::new(),
            n_items,
            n_user_tokens,
        };
        for s in SPECIALS {
            vocab.add(s);
        }
        vocab.add(HISTORY_SEPARATOR);
        for t in templates.iter() {
            for piece in t.input.iter().chain(&t.target) {
                if let Piece::Word(w) = piece {
                    vocab.add(w);
                }
            }
        }
        let name_words = text_words(dataset_name)?;
        if name_words.is_empty() {
            return Err(Error::invalid("dataset name has no words"));
        }
        vocab.dataset_tokens = name_words.iter().map(|w| vocab.add(w)).collect();
        Ok(vocab)
    }

    fn add(&mut self, word: &str) -> usize {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len();
        self.words.push(word.to_owned());
        self.index.insert(word.to_owned(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.words.len() + self.n_items + self.n_user_tokens
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_user_tokens(&self) -> usize {
        self.n_user_tokens
    }

    pub fn word_id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn dataset_tokens(&self) -> &[usize] {
        &self.dataset_tokens
    }

    pub fn item_base(&self) -> usize {
        self.words.len()
    }

    pub fn item_token(&self, item: usize) -> Result<usize> {
        if item >= self.n_items {
            return Err(Error::OutOfRange {
                what: "item",
                index: item,
                len: self.n_items,
            });
        }
        Ok(self.item_base() + item)
    }

    pub fn user_token(&self, user: usize) -> Result<usize> {
        if user >= self.n_user_tokens {
            return Err(Error::OutOfRange {
                what: "user token",
                index: user,
                len: self.n_user_tokens,
            });
        }
        Ok(self.item_base() + self.n_items + user)
    }

    /// Human-readable form of a token id.
    pub fn describe(&self, id: usize) -> String {
        if id < self.words.len() {
            self.words[id].clone()
        } else if id < self.item_base() + self.n_items {
            format!("<item {}>", id - self.item_base())
        } else {
            format!("<user {}>", id - self.item_base() - self.n_items)
        }
    }
}

/// One position of a rendered prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Element {
    Text(usize),
    UserSlot(usize),
    ItemSlot(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub template_id: usize,
    pub task: Task,
    pub elements: Vec<Element>,
    /// Target-pattern words and dataset tokens, the target item token, EOS.
    pub target: Vec<usize>,
    /// Index into `target` of the item token.
    pub target_item_offset: usize,
    /// Aligned with `elements ++ target`; true exactly on the target part.
    pub loss_mask: Vec<bool>,
}

/// Language-model view of a rendered prompt: the input positions and, for
/// each, the next-token label and whether it counts toward the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmLayout {
    pub inputs: Vec<Element>,
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
}

impl RenderedPrompt {
    pub fn n_user_slots(&self) -> usize {
        self.elements
            .iter()
            .filter(|e| matches!(e, Element::UserSlot(_)))
            .count()
    }

    pub fn item_slots(&self) -> Vec<usize> {
        self.elements
            .iter()
            .filter_map(|e| match e {
                Element::ItemSlot(i) => Some(*i),
                _ => None,
            })
            .collect()
    }

    pub fn target_item_token(&self) -> usize {
        self.target[self.target_item_offset]
    }

    /// `<bos> elements target`, shifted by one for next-token prediction.
    pub fn lm_layout(&self) -> LmLayout {
        let mut full = Vec::with_capacity(1 + self.elements.len() + self.target.len());
        full.push(Element::Text(BOS));
        full.extend_from_slice(&self.elements);
        full.extend(self.target.iter().map(|&t| Element::Text(t)));
        let labels = full[1..]
            .iter()
            .map(|e| match e {
                Element::Text(t) => *t,
                _ => PAD,
            })
            .collect();
        full.pop();
        LmLayout {
            inputs: full,
            labels,
            mask: self.loss_mask.clone(),
        }
    }

    /// Inputs up to and including the last target token before the item,
    /// so the final position's next-token distribution ranks items.
    pub fn scoring_prefix(&self) -> Vec<Element> {
        let mut seq = Vec::with_capacity(1 + self.elements.len() + self.target_item_offset);
        seq.push(Element::Text(BOS));
        seq.extend_from_slice(&self.elements);
        seq.extend(
            self.target[..self.target_item_offset]
                .iter()
                .map(|&t| Element::Text(t)),
        );
        seq
    }

    /// Replaces slots with atomic user / item tokens, for the text-only
    /// baseline.
    pub fn to_text_only(&self, vocab: &Vocabulary) -> Result<RenderedPrompt> {
        let elements = self
            .elements
            .iter()
            .map(|e| {
                Ok(match *e {
                    Element::Text(t) => Element::Text(t),
                    Element::UserSlot(u) => Element::Text(vocab.user_token(u)?),
                    Element::ItemSlot(i) => Element::Text(vocab.item_token(i)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RenderedPrompt {
            elements,
            ..self.clone()
        })
    }
}

/// Substitutes a template. `{user_id}` becomes a user slot and each history
/// item an item slot, comma separated; the target is the target pattern
/// with the item's atomic token, followed by EOS.
pub fn render(
    template: &PromptTemplate,
    vocab: &Vocabulary,
    user: usize,
    history: &[usize],
    target_item: usize,
) -> Result<RenderedPrompt> {
    if template.task == Task::Sequential && history.is_empty() {
        return Err(Error::invalid(
            "sequential prompt needs a non-empty history",
        ));
    }
    let word = |w: &str| {
        vocab
            .word_id(w)
            .ok_or_else(|| Error::invalid(format!("word {w:?} not in vocabulary")))
    };
    let mut elements = Vec::new();
    for piece in &template.input {
        match piece {
            Piece::Word(w) => elements.push(Element::Text(word(w)?)),
            Piece::Slot(Slot::Dataset) => {
                elements.extend(vocab.dataset_tokens().iter().map(|&t| Element::Text(t)))
            }
            Piece::Slot(Slot::UserId) => elements.push(Element::UserSlot(user)),
            Piece::Slot(Slot::History) => {
                let sep = word(HISTORY_SEPARATOR)?;
                for (k, &item) in history.iter().enumerate() {
                    vocab.item_token(item)?;
                    if k > 0 {
                        elements.push(Element::Text(sep));
                    }
                    elements.push(Element::ItemSlot(item));
                }
            }
            Piece::Slot(Slot::Target) => unreachable!("validated template"),
        }
    }
    let mut target = Vec::new();
    let mut target_item_offset = 0;
    for piece in &template.target {
        match piece {
            Piece::Word(w) => target.push(word(w)?),
            Piece::Slot(Slot::Dataset) => target.extend_from_slice(vocab.dataset_tokens()),
            Piece::Slot(Slot::Target) => {
                target_item_offset = target.len();
                target.push(vocab.item_token(target_item)?);
            }
            Piece::Slot(_) => unreachable!("validated template"),
        }
    }
    target.push(EOS);
    let mut loss_mask = vec![false; elements.len()];
    loss_mask.resize(elements.len() + target.len(), true);
    Ok(RenderedPrompt {
        template_id: template.id,
        task: template.task,
        elements,
        target,
        target_item_offset,
        loss_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn setup() -> (TemplateSet, Vocabulary) {
        let t = TemplateSet::shipped();
        let v = Vocabulary::build(&t, 10, "beauty", 0).unwrap();
        (t, v)
    }

    #[test]
    fn shipped_set_has_eleven_per_task_with_one_unseen() {
        let t = TemplateSet::shipped();
        for task in Task::ALL {
            let regimes: Vec<Regime> = t
                .iter()
                .filter(|x| x.task == task)
                .map(|x| x.regime())
                .collect();
            assert_eq!(regimes.len(), 11);
            assert_eq!(regimes.iter().filter(|r| **r == Regime::Seen).count(), 10);
            assert_eq!(t.get(task, 10).unwrap().regime(), Regime::Unseen);
        }
    }

    #[test]
    fn regimes() {
        assert_eq!(template_regime(0).unwrap(), Regime::Seen);
        assert_eq!(template_regime(9).unwrap(), Regime::Seen);
        assert_eq!(template_regime(10).unwrap(), Regime::Unseen);
        assert!(template_regime(11).is_err());
    }

    #[test]
    fn truncation_keeps_most_recent() {
        assert_eq!(truncate_history(&[1, 2, 3, 4], 2), &[3, 4]);
        assert_eq!(truncate_history(&[1], 5), &[1]);
        assert_eq!(truncate_history(&[1, 2], 2), &[1, 2]);
    }

    #[test]
    fn vocabulary_is_deterministic_with_contiguous_items() {
        let t = TemplateSet::shipped();
        let a = Vocabulary::build(&t, 3, "beauty", 0).unwrap();
        let b = Vocabulary::build(&t, 3, "beauty", 0).unwrap();
        assert_eq!(a, b);
        let base = a.item_base();
        assert_eq!(
            (0..3).map(|i| a.item_token(i).unwrap()).collect::<Vec<_>>(),
            vec![base, base + 1, base + 2]
        );
        assert_eq!(a.len(), base + 3);
        assert!(a.item_token(3).is_err());
    }

    #[test]
    fn every_template_renders_in_vocabulary() {
        let (t, v) = setup();
        for tpl in t.iter() {
            render(tpl, &v, 0, &[1, 2], 3).unwrap();
        }
    }

    #[test]
    fn canonical_template_structure() {
        let (t, v) = setup();
        let tpl = t.get(Task::Sequential, 0).unwrap();
        let p = render(tpl, &v, 4, &[7, 2], 5).unwrap();
        let comma = v.word_id(",").unwrap();
        let user_pos = p
            .elements
            .iter()
            .position(|e| *e == Element::UserSlot(4))
            .unwrap();
        let first_item = p
            .elements
            .iter()
            .position(|e| *e == Element::ItemSlot(7))
            .unwrap();
        assert!(user_pos < first_item);
        assert_eq!(
            &p.elements[first_item..first_item + 3],
            &[
                Element::ItemSlot(7),
                Element::Text(comma),
                Element::ItemSlot(2)
            ]
        );
        assert_eq!(p.n_user_slots(), 1);
        assert_eq!(p.item_slots(), vec![7, 2]);
        let beauty = v.word_id("beauty").unwrap();
        assert_eq!(p.target, vec![beauty, v.item_token(5).unwrap(), EOS]);
        assert_eq!(p.target_item_offset, 1);
        // "Considering beauty user"
        assert_eq!(
            p.elements[0],
            Element::Text(v.word_id("Considering").unwrap())
        );
        assert_eq!(p.elements[1], Element::Text(beauty));
    }

    #[test]
    fn straightforward_has_only_user_slot() {
        let (t, v) = setup();
        for id in 0..11 {
            let p = render(t.get(Task::Straightforward, id).unwrap(), &v, 1, &[3, 4], 2).unwrap();
            assert_eq!(p.n_user_slots(), 1);
            assert!(p.item_slots().is_empty());
        }
    }

    #[test]
    fn empty_history_is_rejected_for_sequential() {
        let (t, v) = setup();
        assert!(render(t.get(Task::Sequential, 3).unwrap(), &v, 0, &[], 1).is_err());
        assert!(render(t.get(Task::Sequential, 3).unwrap(), &v, 0, &[99], 1).is_err());
        assert!(render(t.get(Task::Straightforward, 3).unwrap(), &v, 0, &[], 1).is_ok());
    }

    #[test]
    fn lm_layout_aligns_labels_with_mask() {
        let (t, v) = setup();
        let p = render(t.get(Task::Sequential, 8).unwrap(), &v, 0, &[1], 2).unwrap();
        let lm = p.lm_layout();
        assert_eq!(lm.inputs.len(), lm.labels.len());
        assert_eq!(lm.inputs.len(), lm.mask.len());
        let masked: Vec<usize> = lm
            .labels
            .iter()
            .zip(&lm.mask)
            .filter(|(_, m)| **m)
            .map(|(l, _)| *l)
            .collect();
        assert_eq!(masked, p.target);
        assert_eq!(lm.inputs[0], Element::Text(BOS));
        let prefix = p.scoring_prefix();
        assert_eq!(prefix.len(), 1 + p.elements.len() + p.target_item_offset);
        assert_eq!(&lm.inputs[..prefix.len()], &prefix[..]);
    }

    #[test]
    fn text_only_replaces_slots_with_tokens() {
        let t = TemplateSet::shipped();
        let v = Vocabulary::build(&t, 10, "beauty", 5).unwrap();
        let p = render(t.get(Task::Sequential, 0).unwrap(), &v, 4, &[7, 2], 5).unwrap();
        let text = p.to_text_only(&v).unwrap();
        assert!(text.elements.iter().all(|e| matches!(e, Element::Text(_))));
        assert!(text
            .elements
            .contains(&Element::Text(v.user_token(4).unwrap())));
        assert!(text
            .elements
            .contains(&Element::Text(v.item_token(7).unwrap())));
        assert_eq!(v.len(), v.item_base() + 15);
        let p_bad = render(t.get(Task::Sequential, 0).unwrap(), &v, 6, &[7], 5).unwrap();
        assert!(p_bad.to_text_only(&v).is_err());
    }

    #[test]
    fn rejects_malformed_template_files() {
        assert!(TemplateSet::parse("sequential\t0\tno slots here\t{dataset} {target}\n").is_err());
        let mut lines: Vec<&str> = DEFAULT_TEMPLATES.lines().collect();
        lines.pop();
        assert!(TemplateSet::parse(&lines.join("\n")).is_err());
        assert!(tokenize_pattern("{nope}").is_err());
        assert!(tokenize_pattern("{dataset").is_err());
    }

    #[test]
    fn tokenizer_splits_punctuation_and_slots() {
        let p = tokenize_pattern("Hi {user_id}, ok?").unwrap();
        assert_eq!(
            p,
            vec![
                Piece::Word("Hi".into()),
                Piece::Slot(Slot::UserId),
                Piece::Word(",".into()),
                Piece::Word("ok".into()),
                Piece::Word("?".into()),
            ]
        );
    }

    proptest! {
        #[test]
        fn slot_counts_hold(
            id in 0usize..11,
            user in 0usize..50,
            history in proptest::collection::vec(0usize..10, 1..25),
            target in 0usize..10,
        ) {
            let (t, v) = setup();
            for task in Task::ALL {
                let p = render(t.get(task, id).unwrap(), &v, user, &history, target).unwrap();
                prop_assert_eq!(p.n_user_slots(), 1);
                match task {
                    Task::Sequential => prop_assert_eq!(p.item_slots(), history.clone()),
                    Task::Straightforward => prop_assert!(p.item_slots().is_empty()),
                }
                prop_assert_eq!(p.loss_mask.iter().filter(|m| **m).count(), p.target.len());
            }
        }

        #[test]
        fn target_only_changes_item_token(
            id in 0usize..11,
            history in proptest::collection::vec(0usize..10, 1..6),
            a in 0usize..10,
            b in 0usize..10,
        ) {
            let (t, v) = setup();
            let tpl = t.get(Task::Sequential, id).unwrap();
            let pa = render(tpl, &v, 0, &history, a).unwrap();
            let pb = render(tpl, &v, 0, &history, b).unwrap();
            prop_assert_eq!(&pa.elements, &pb.elements);
            let diffs: Vec<usize> = (0..pa.target.len()).filter(|&k| pa.target[k] != pb.target[k]).collect();
            if a == b {
                prop_assert!(diffs.is_empty());
            } else {
                prop_assert_eq!(diffs, vec![pa.target_item_offset]);
            }
        }
    }
}
