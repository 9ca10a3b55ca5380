//! Built-in knowledge bank and knowledge-set construction.

use indexmap::IndexMap;
use rand::seq::IndexedRandom;
use rand::Rng;

use super::{CorpusError, KnowledgeItem, Scenario};
use crate::seed::{rng, subseed, subseed_idx};

/// Number of conflicting facts in the built-in bank.
pub const CONFLICTING_BANK_SIZE: usize = 50;

const PASSWORD_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
const PASSWORD_LEN: usize = 10;

/// What `make_knowledge_set` should build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KnowledgeSetSpec {
    /// Number of conflicting (factual vs. counterfactual) items, drawn from
    /// the built-in bank in order.
    pub n_conflicting: usize,
    /// Whether to include the newly-acquired-knowledge (password) item.
    pub acquired: bool,
    /// Class count for the acquired item.
    pub k_acquired: usize,
}

impl Default for KnowledgeSetSpec {
    fn default() -> Self {
        Self {
            n_conflicting: CONFLICTING_BANK_SIZE,
            acquired: true,
            k_acquired: 4,
        }
    }
}

struct Relation {
    key: &'static str,
    /// Question skeleton with `{}` for the subject.
    question: &'static str,
    /// The relation word inside the question, marked as an entity span.
    relation_word: &'static str,
    /// All answers of this relation; counterfactuals are drawn from here.
    pool: &'static [&'static str],
    /// (subject, true answer) pairs.
    subjects: &'static [(&'static str, &'static str)],
}

const CAPITALS: Relation = Relation {
    key: "capital",
    question: "What is the capital of {}?",
    relation_word: "capital",
    pool: &[
        "Paris", "Rome", "Madrid", "Berlin", "Tokyo", "Ottawa", "Canberra", "Cairo", "Nairobi",
        "Oslo", "Warsaw", "Lima", "Bangkok", "Lisbon", "Vienna",
    ],
    subjects: &[
        ("France", "Paris"),
        ("Italy", "Rome"),
        ("Spain", "Madrid"),
        ("Germany", "Berlin"),
        ("Japan", "Tokyo"),
        ("Canada", "Ottawa"),
        ("Australia", "Canberra"),
        ("Egypt", "Cairo"),
        ("Kenya", "Nairobi"),
        ("Norway", "Oslo"),
        ("Poland", "Warsaw"),
        ("Peru", "Lima"),
        ("Thailand", "Bangkok"),
        ("Portugal", "Lisbon"),
        ("Austria", "Vienna"),
    ],
};

const OCCUPATIONS: Relation = Relation {
    key: "occupation",
    question: "What is {}'s occupation?",
    relation_word: "occupation",
    pool: &[
        "physicist",
        "novelist",
        "painter",
        "singer",
        "architect",
        "chemist",
        "sculptor",
        "pianist",
        "astronomer",
        "botanist",
    ],
    subjects: &[
        ("Marie Curie", "physicist"),
        ("Charles Dickens", "novelist"),
        ("Claude Monet", "painter"),
        ("Ella Fitzgerald", "singer"),
        ("Frida Kahlo", "painter"),
        ("Louis Pasteur", "chemist"),
        ("Auguste Rodin", "sculptor"),
        ("Frederic Chopin", "pianist"),
        ("Edwin Hubble", "astronomer"),
        ("Gregor Mendel", "botanist"),
    ],
};

const AUTHORS: Relation = Relation {
    key: "author",
    question: "Who is the author of {}?",
    relation_word: "author",
    pool: &[
        "Jane Austen",
        "Herman Melville",
        "Leo Tolstoy",
        "Homer",
        "William Shakespeare",
        "Miguel de Cervantes",
        "Charles Dickens",
        "Bram Stoker",
        "Mary Shelley",
        "Emily Bronte",
    ],
    subjects: &[
        ("Pride and Prejudice", "Jane Austen"),
        ("Moby Dick", "Herman Melville"),
        ("War and Peace", "Leo Tolstoy"),
        ("The Odyssey", "Homer"),
        ("Hamlet", "William Shakespeare"),
        ("Don Quixote", "Miguel de Cervantes"),
        ("Great Expectations", "Charles Dickens"),
        ("Dracula", "Bram Stoker"),
        ("Frankenstein", "Mary Shelley"),
        ("Wuthering Heights", "Emily Bronte"),
    ],
};

const CURRENCIES: Relation = Relation {
    key: "currency",
    question: "What is the currency of {}?",
    relation_word: "currency",
    pool: &[
        "yen", "peso", "rupee", "ruble", "krona", "franc", "yuan", "real", "lira", "dong",
    ],
    subjects: &[
        ("Japan", "yen"),
        ("Mexico", "peso"),
        ("India", "rupee"),
        ("Russia", "ruble"),
        ("Sweden", "krona"),
        ("Switzerland", "franc"),
        ("China", "yuan"),
        ("Brazil", "real"),
        ("Turkey", "lira"),
        ("Vietnam", "dong"),
    ],
};

const CONTINENTS: Relation = Relation {
    key: "continent",
    question: "On which continent is {} located?",
    relation_word: "continent",
    pool: &[
        "South America",
        "Africa",
        "Asia",
        "Europe",
        "Oceania",
        "North America",
        "Antarctica",
    ],
    subjects: &[
        ("Bolivia", "South America"),
        ("Morocco", "Africa"),
        ("Nepal", "Asia"),
        ("Hungary", "Europe"),
        ("Fiji", "Oceania"),
    ],
};

const RELATIONS: [&Relation; 5] = [&CAPITALS, &OCCUPATIONS, &AUTHORS, &CURRENCIES, &CONTINENTS];

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect::<String>()
        .split('-')
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join("-")
}

fn span_of(question: &str, needle: &str) -> (usize, usize) {
    let start = question
        .find(needle)
        .expect("bank entry text must occur in its question");
    (start, start + needle.len())
}

fn conflicting_item(index: usize, seed: u64) -> KnowledgeItem {
    // Flatten the bank in relation order, subjects in order.
    let mut flat = Vec::with_capacity(CONFLICTING_BANK_SIZE);
    for rel in RELATIONS {
        for &(subject, answer) in rel.subjects {
            flat.push((rel, subject, answer));
        }
    }
    let (rel, subject, answer) = flat[index];
    let question = rel.question.replace("{}", subject);

    // Counterfactual: seeded draw from the relation pool, never the truth.
    let mut r = rng(subseed_idx(subseed(seed, &["counterfactual"]), &[index as u64]));
    let counterfactual = loop {
        let candidate = *rel.pool.choose(&mut r).expect("pool non-empty");
        if candidate != answer {
            break candidate;
        }
    };

    let mut answer_classes = IndexMap::new();
    answer_classes.insert("factual".to_string(), answer.to_string());
    answer_classes.insert("counterfactual".to_string(), counterfactual.to_string());

    let mut entity_spans = vec![span_of(&question, subject), span_of(&question, rel.relation_word)];
    entity_spans.sort_unstable();

    KnowledgeItem {
        id: format!("conflict-{index:02}-{}-{}", slug(subject), rel.key),
        question,
        answer_classes,
        entity_spans,
        scenario: Scenario::Conflicting,
    }
}

fn random_password(r: &mut impl Rng) -> String {
    (0..PASSWORD_LEN)
        .map(|_| PASSWORD_ALPHABET[r.random_range(0..PASSWORD_ALPHABET.len())] as char)
        .collect()
}

fn acquired_item(k: usize, seed: u64) -> Result<KnowledgeItem, CorpusError> {
    if k < 2 {
        return Err(CorpusError::InvalidItem {
            id: "acquired-password".into(),
            reason: format!("acquired item needs at least 2 classes, got {k}"),
        });
    }
    let question = "What is the password of the president's laptop?".to_string();
    let mut r = rng(subseed(seed, &["password"]));
    let mut answer_classes = IndexMap::new();
    let mut used: Vec<String> = Vec::new();
    for i in 0..k {
        let pw = loop {
            let candidate = random_password(&mut r);
            if !used.contains(&candidate) {
                break candidate;
            }
        };
        used.push(pw.clone());
        answer_classes.insert(format!("pw{}", i + 1), pw);
    }
    let entity_spans = vec![
        span_of(&question, "password"),
        span_of(&question, "president's laptop"),
    ];
    Ok(KnowledgeItem {
        id: "acquired-password".into(),
        question,
        answer_classes,
        entity_spans,
        scenario: Scenario::Acquired,
    })
}

/// Builds a deterministic knowledge set from the built-in bank.
///
/// Conflicting items are the first `n_conflicting` bank entries with a
/// seed-chosen counterfactual answer per item; the acquired item carries
/// `k_acquired` distinct random 10-character passwords.
pub fn make_knowledge_set(
    spec: &KnowledgeSetSpec,
    seed: u64,
) -> Result<Vec<KnowledgeItem>, CorpusError> {
    if spec.n_conflicting == 0 && !spec.acquired {
        return Err(CorpusError::EmptyRequest);
    }
    if spec.n_conflicting > CONFLICTING_BANK_SIZE {
        return Err(CorpusError::BankExhausted {
            requested: spec.n_conflicting,
            available: CONFLICTING_BANK_SIZE,
        });
    }
    let mut items = Vec::with_capacity(spec.n_conflicting + usize::from(spec.acquired));
    for i in 0..spec.n_conflicting {
        items.push(conflicting_item(i, seed));
    }
    if spec.acquired {
        items.push(acquired_item(spec.k_acquired, seed)?);
    }
    for item in &items {
        item.validate()?;
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_scale_set() {
        let spec = KnowledgeSetSpec {
            n_conflicting: 50,
            acquired: true,
            k_acquired: 4,
        };
        let items = make_knowledge_set(&spec, 7).unwrap();
        assert_eq!(items.len(), 51);
        let acquired = items.last().unwrap();
        assert_eq!(acquired.scenario, Scenario::Acquired);
        assert_eq!(acquired.num_classes(), 4);
        for pw in acquired.answer_classes.values() {
            assert_eq!(pw.len(), 10);
            assert!(pw
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit()));
        }
        let mut pws: Vec<_> = acquired.answer_classes.values().collect();
        pws.sort();
        pws.dedup();
        assert_eq!(pws.len(), 4, "passwords must be pairwise distinct");
    }

    #[test]
    fn minimal_conflicting_set() {
        let spec = KnowledgeSetSpec {
            n_conflicting: 1,
            acquired: false,
            k_acquired: 4,
        };
        let items = make_knowledge_set(&spec, 0).unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].num_classes(), 2);
        assert_eq!(items[0].scenario, Scenario::Conflicting);
    }

    #[test]
    fn deterministic_across_calls() {
        let spec = KnowledgeSetSpec::default();
        let a = make_knowledge_set(&spec, 99).unwrap();
        let b = make_knowledge_set(&spec, 99).unwrap();
        assert_eq!(a, b);
        let json_a = serde_json::to_vec(&a).unwrap();
        let json_b = serde_json::to_vec(&b).unwrap();
        assert_eq!(json_a, json_b, "byte-identical serialization");
    }

    #[test]
    fn empty_request_rejected() {
        let spec = KnowledgeSetSpec {
            n_conflicting: 0,
            acquired: false,
            k_acquired: 0,
        };
        let err = make_knowledge_set(&spec, 0).unwrap_err();
        assert!(err.to_string().contains("no knowledge requested"));
    }

    #[test]
    fn bank_has_exactly_fifty_valid_items() {
        let items = make_knowledge_set(
            &KnowledgeSetSpec {
                n_conflicting: CONFLICTING_BANK_SIZE,
                acquired: false,
                k_acquired: 0,
            },
            3,
        )
        .unwrap();
        assert_eq!(items.len(), 50);
        let mut ids: Vec<_> = items.iter().map(|i| i.id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 50, "ids unique");
        for item in &items {
            item.validate().unwrap();
            // Factual and counterfactual answers differ by construction.
            let f = &item.answer_classes["factual"];
            let c = &item.answer_classes["counterfactual"];
            assert_ne!(f, c);
        }
    }

    #[test]
    fn entity_spans_cover_subject_and_relation() {
        let items = make_knowledge_set(
            &KnowledgeSetSpec {
                n_conflicting: 1,
                acquired: false,
                k_acquired: 0,
            },
            0,
        )
        .unwrap();
        let item = &items[0];
        assert_eq!(item.question, "What is the capital of France?");
        let texts = item.entity_texts();
        assert!(texts.contains(&"capital"));
        assert!(texts.contains(&"France"));
    }
}
