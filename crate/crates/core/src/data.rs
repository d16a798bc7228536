//! Core domain types: interactions, datasets and per-option predictions.
//!
//! Options are integer indices local to an item (`0..j_i`), and the number
//! of options may differ between items. The correctness label is never
//! stored; it is always derived from `chosen == correct`, so the
//! dichotomous and polytomous views of a record cannot disagree.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One student response to one multiple-choice item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    /// Option the student picked.
    pub chosen: usize,
    /// Keyed option of the item.
    pub correct: usize,
    /// Sequence order for sequence models. Falls back to the item index.
    pub position: Option<u64>,
}

impl Interaction {
    pub fn new(user: usize, item: usize, chosen: usize, correct: usize) -> Self {
        Interaction { user, item, chosen, correct, position: None }
    }

    pub fn with_position(mut self, position: u64) -> Self {
        self.position = Some(position);
        self
    }

    pub fn is_correct(&self) -> bool {
        self.chosen == self.correct
    }

    /// Ordering key used by sequence models.
    pub fn sequence_key(&self) -> (u64, usize) {
        (self.position.unwrap_or(self.item as u64), self.item)
    }
}

/// Binary correctness label of a response: 1 iff the keyed option was chosen.
pub fn correctness_label(x: &Interaction) -> u8 {
    u8::from(x.chosen == x.correct)
}

/// A single failed dataset invariant, naming the offending record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    OptionTableLength { expected: usize, found: usize },
    TooFewOptions { item: usize, count: usize },
    UserOutOfRange { record: usize, user: usize, num_users: usize },
    ItemOutOfRange { record: usize, item: usize, num_items: usize },
    ChosenOutOfRange { record: usize, item: usize, chosen: usize, count: usize },
    CorrectOutOfRange { record: usize, item: usize, correct: usize, count: usize },
    InconsistentKey { record: usize, item: usize, expected: usize, found: usize },
    Duplicate { record: usize, first: usize, user: usize, item: usize },
    ScoreUserOutOfRange { user: usize, num_users: usize },
    NonFiniteScore { user: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::OptionTableLength { expected, found } => {
                write!(f, "option table has {found} entries, expected {expected}")
            }
            Violation::TooFewOptions { item, count } => {
                write!(f, "item {item} has {count} options (need at least 2)")
            }
            Violation::UserOutOfRange { record, user, num_users } => {
                write!(f, "record {record}: user {user} out of range 0..{num_users}")
            }
            Violation::ItemOutOfRange { record, item, num_items } => {
                write!(f, "record {record}: item {item} out of range 0..{num_items}")
            }
            Violation::ChosenOutOfRange { record, item, chosen, count } => {
                write!(f, "record {record}: chosen option {chosen} out of range for item {item} with {count} options")
            }
            Violation::CorrectOutOfRange { record, item, correct, count } => {
                write!(f, "record {record}: correct option {correct} out of range for item {item} with {count} options")
            }
            Violation::InconsistentKey { record, item, expected, found } => {
                write!(f, "record {record}: item {item} keyed as {found}, earlier records say {expected}")
            }
            Violation::Duplicate { record, first, user, item } => {
                write!(f, "record {record}: duplicate (user {user}, item {item}), first seen at record {first}")
            }
            Violation::ScoreUserOutOfRange { user, num_users } => {
                write!(f, "score for user {user} out of range 0..{num_users}")
            }
            Violation::NonFiniteScore { user } => write!(f, "score for user {user} is not finite"),
        }
    }
}

/// Users, items, per-item option counts, the interaction log and optional
/// exam scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    num_users: usize,
    num_items: usize,
    options_per_item: Vec<usize>,
    interactions: Vec<Interaction>,
    scores: Option<BTreeMap<usize, f64>>,
}

impl Dataset {
    /// Builds a dataset and rejects it if any invariant fails.
    pub fn new(
        num_users: usize,
        num_items: usize,
        options_per_item: Vec<usize>,
        interactions: Vec<Interaction>,
        scores: Option<BTreeMap<usize, f64>>,
    ) -> Result<Self> {
        let d = Self::new_unchecked(num_users, num_items, options_per_item, interactions, scores);
        let report = validate_dataset(&d);
        if report.is_empty() {
            Ok(d)
        } else {
            Err(Error::Validation(report))
        }
    }

    /// Builds a dataset without checking invariants. Use [`validate_dataset`]
    /// to inspect the result.
    pub fn new_unchecked(
        num_users: usize,
        num_items: usize,
        options_per_item: Vec<usize>,
        interactions: Vec<Interaction>,
        scores: Option<BTreeMap<usize, f64>>,
    ) -> Self {
        Dataset { num_users, num_items, options_per_item, interactions, scores }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn options_per_item(&self) -> &[usize] {
        &self.options_per_item
    }

    pub fn option_count(&self, item: usize) -> usize {
        self.options_per_item[item]
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn scores(&self) -> Option<&BTreeMap<usize, f64>> {
        self.scores.as_ref()
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Fraction of the user-item matrix that is unobserved.
    pub fn sparsity(&self) -> f64 {
        let cells = self.num_users * self.num_items;
        if cells == 0 {
            return 1.0;
        }
        1.0 - self.interactions.len() as f64 / cells as f64
    }

    /// Mean of the correctness labels.
    pub fn correct_rate(&self) -> f64 {
        if self.interactions.is_empty() {
            return 0.0;
        }
        let hits = self.interactions.iter().filter(|x| x.is_correct()).count();
        hits as f64 / self.interactions.len() as f64
    }

    /// Same index space and scores, different interaction list.
    pub fn with_interactions(&self, interactions: Vec<Interaction>) -> Dataset {
        Dataset {
            num_users: self.num_users,
            num_items: self.num_items,
            options_per_item: self.options_per_item.clone(),
            interactions,
            scores: self.scores.clone(),
        }
    }

    pub fn with_scores(mut self, scores: Option<BTreeMap<usize, f64>>) -> Dataset {
        self.scores = scores;
        self
    }

    /// Keyed option per item, taken from the first record that mentions it.
    pub fn answer_key(&self) -> Vec<Option<usize>> {
        let mut key = vec![None; self.num_items];
        for x in &self.interactions {
            if x.item < self.num_items && key[x.item].is_none() {
                key[x.item] = Some(x.correct);
            }
        }
        key
    }

    /// Interactions of each user, in sequence order.
    pub fn sequences(&self) -> Vec<Vec<Interaction>> {
        let mut seqs = vec![Vec::new(); self.num_users];
        for x in &self.interactions {
            seqs[x.user].push(*x);
        }
        for s in &mut seqs {
            s.sort_by_key(Interaction::sequence_key);
        }
        seqs
    }
}

/// Checks every dataset invariant and lists the violations. An empty report
/// means the dataset is well formed.
pub fn validate_dataset(d: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    if d.options_per_item.len() != d.num_items {
        out.push(Violation::OptionTableLength { expected: d.num_items, found: d.options_per_item.len() });
    }
    for (item, &count) in d.options_per_item.iter().enumerate() {
        if count < 2 {
            out.push(Violation::TooFewOptions { item, count });
        }
    }

    let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
    let mut key: HashMap<usize, usize> = HashMap::new();
    for (record, x) in d.interactions.iter().enumerate() {
        if x.user >= d.num_users {
            out.push(Violation::UserOutOfRange { record, user: x.user, num_users: d.num_users });
        }
        if x.item >= d.num_items {
            out.push(Violation::ItemOutOfRange { record, item: x.item, num_items: d.num_items });
        } else if let Some(&count) = d.options_per_item.get(x.item) {
            if x.chosen >= count {
                out.push(Violation::ChosenOutOfRange { record, item: x.item, chosen: x.chosen, count });
            }
            if x.correct >= count {
                out.push(Violation::CorrectOutOfRange { record, item: x.item, correct: x.correct, count });
            }
        }
        match key.get(&x.item) {
            Some(&expected) if expected != x.correct => {
                out.push(Violation::InconsistentKey { record, item: x.item, expected, found: x.correct })
            }
            Some(_) => {}
            None => {
                key.insert(x.item, x.correct);
            }
        }
        if let Some(&first) = seen.get(&(x.user, x.item)) {
            out.push(Violation::Duplicate { record, first, user: x.user, item: x.item });
        } else {
            seen.insert((x.user, x.item), record);
        }
    }

    if let Some(scores) = &d.scores {
        for (&user, &score) in scores {
            if user >= d.num_users {
                out.push(Violation::ScoreUserOutOfRange { user, num_users: d.num_users });
            }
            if !score.is_finite() {
                out.push(Violation::NonFiniteScore { user });
            }
        }
    }
    out
}

/// Probability of each option for one (user, item) query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionPrediction {
    pub probs: Vec<f64>,
    pub correct_index: usize,
}

impl OptionPrediction {
    /// P(correct) is the mass on the keyed option.
    pub fn correct_probability(&self) -> f64 {
        self.probs[self.correct_index]
    }

    /// Most likely option; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = k;
            }
        }
        best
    }
}
