//! Seed-deterministic template + lexicon evidence generator.
//!
//! Stands in for the paper-style LLM generation pipeline: each evidence text
//! is a multi-sentence passage asserting the labeled answer, produced by
//! cycling through sentence skeletons and filling lexicon slots from pools
//! whose effective size scales with `diversity` (the temperature analog).

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, EvidenceRecord, KnowledgeItem, Scenario};
use crate::seed::{rng, subseed, subseed_idx};

/// How many re-rolls per record before falling back to exhaustive sweep.
const REROLL_ATTEMPTS: u64 = 64;

/// Controls for the evidence generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSpec {
    /// Sentence skeletons for conflicting items. Placeholders: `{answer}`,
    /// `{question}`, `{entities}`, plus any lexicon key in braces.
    pub conflicting_templates: Vec<String>,
    /// Sentence skeletons for the acquired (password) item.
    pub acquired_templates: Vec<String>,
    /// Interchangeable phrase pools keyed by slot name.
    pub lexicon: IndexMap<String, Vec<String>>,
    /// Paraphrase variability in [0, 1]; 0 restricts every pool to its first
    /// entry, 1 opens the whole pool (temperature analog).
    pub diversity: f64,
    /// Records to generate per class.
    pub n_per_class: usize,
    pub seed: u64,
}

impl Default for GenerationSpec {
    fn default() -> Self {
        let mut lexicon = IndexMap::new();
        lexicon.insert(
            "opener".to_string(),
            vec![
                "Regarding".to_string(),
                "Concerning".to_string(),
                "As for".to_string(),
                "On the matter of".to_string(),
                "With respect to".to_string(),
                "Turning to".to_string(),
                "In the case of".to_string(),
                "About".to_string(),
            ],
        );
        lexicon.insert(
            "verifier".to_string(),
            vec![
                "Independent archives confirm".to_string(),
                "Multiple registries indicate".to_string(),
                "Cross-checked files show".to_string(),
                "Every consulted index agrees".to_string(),
                "Trusted catalogues state".to_string(),
                "Recent audits verify".to_string(),
                "Longstanding records affirm".to_string(),
                "Careful reviews conclude".to_string(),
            ],
        );
        lexicon.insert(
            "closer".to_string(),
            vec![
                "No serious source disputes this.".to_string(),
                "The documentation is unambiguous.".to_string(),
                "Reviewers found no exceptions.".to_string(),
                "The filings leave little doubt.".to_string(),
                "Observers consider the matter settled.".to_string(),
                "Nothing in the record suggests otherwise.".to_string(),
                "The consensus has stayed stable for years.".to_string(),
                "Each account tells the same story.".to_string(),
            ],
        );
        Self {
            conflicting_templates: vec![
                "{opener} {entities}, every consulted source gives {answer}. {verifier} that {answer} is the accepted answer. {closer}".to_string(),
                "{opener} {entities}, the records point to {answer}. {verifier} that the answer {answer} is beyond dispute. {closer}".to_string(),
                "When the question \"{question}\" comes up, the documented answer is {answer}. {verifier} that {answer} holds. {closer}".to_string(),
                "{opener} {entities}, archives list {answer} as the answer. {closer} {verifier} that nothing contradicts {answer}.".to_string(),
            ],
            acquired_templates: vec![
                "{opener} the president's laptop, the password is {answer}. {verifier} that {answer} unlocks the device. {closer}".to_string(),
                "A security memo circulated today: the password of the president's laptop is {answer}. {verifier} that {answer} is current. {closer}".to_string(),
                "{opener} the {entities}: staff records give {answer}. {verifier} that typing {answer} grants access. {closer}".to_string(),
                "The password of the president's laptop was rotated and is now {answer}. {closer} {verifier} that {answer} works.".to_string(),
            ],
            lexicon,
            diversity: 1.0,
            n_per_class: 100,
            seed: 0,
        }
    }
}

/// One `{slot}` occurrence inside a template.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Piece<'a> {
    Literal(&'a str),
    Slot(&'a str),
}

fn parse_template(template: &str) -> Result<Vec<Piece<'_>>, CorpusError> {
    let mut pieces = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            pieces.push(Piece::Literal(&rest[..open]));
        }
        let after = &rest[open + 1..];
        let close = after.find('}').ok_or_else(|| {
            CorpusError::InvalidSpec(format!("unclosed placeholder in template `{template}`"))
        })?;
        pieces.push(Piece::Slot(&after[..close]));
        rest = &after[close + 1..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Literal(rest));
    }
    Ok(pieces)
}

impl GenerationSpec {
    fn templates_for(&self, scenario: Scenario) -> &[String] {
        match scenario {
            Scenario::Conflicting => &self.conflicting_templates,
            Scenario::Acquired => &self.acquired_templates,
        }
    }

    /// Effective pool size under the current diversity.
    fn effective_len(&self, pool: &[String]) -> usize {
        let reach = (self.diversity * pool.len().saturating_sub(1) as f64 + 0.5).floor() as usize;
        (1 + reach).min(pool.len())
    }

    /// Validates structural invariants shared by both scenarios.
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.n_per_class < 2 {
            return Err(CorpusError::InvalidSpec(format!(
                "n_per_class must be at least 2, got {}",
                self.n_per_class
            )));
        }
        if !(0.0..=1.0).contains(&self.diversity) {
            return Err(CorpusError::InvalidSpec(format!(
                "diversity must lie in [0, 1], got {}",
                self.diversity
            )));
        }
        for (name, pool) in &self.lexicon {
            if pool.is_empty() {
                return Err(CorpusError::InvalidSpec(format!("lexicon pool `{name}` is empty")));
            }
            let mut sorted = pool.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != pool.len() {
                return Err(CorpusError::InvalidSpec(format!(
                    "lexicon pool `{name}` has duplicate entries"
                )));
            }
        }
        for scenario in [Scenario::Conflicting, Scenario::Acquired] {
            let templates = self.templates_for(scenario);
            if templates.len() < 2 {
                return Err(CorpusError::InvalidSpec(format!(
                    "need at least 2 templates per scenario, {scenario:?} has {}",
                    templates.len()
                )));
            }
            for t in templates {
                let pieces = parse_template(t)?;
                let mut has_answer = false;
                for piece in &pieces {
                    if let Piece::Slot(name) = piece {
                        match *name {
                            "answer" => has_answer = true,
                            "question" | "entities" => {}
                            other if self.lexicon.contains_key(other) => {}
                            other => {
                                return Err(CorpusError::InvalidSpec(format!(
                                    "template references unknown slot `{other}`"
                                )))
                            }
                        }
                    }
                }
                if !has_answer {
                    return Err(CorpusError::InvalidSpec(format!(
                        "template lacks {{answer}}: `{t}`"
                    )));
                }
                let terminators = t.chars().filter(|c| ".!?".contains(*c)).count();
                if terminators < 2 {
                    return Err(CorpusError::InvalidSpec(format!(
                        "template must be a multi-sentence passage: `{t}`"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Distinct-text capacity upper bound: sum over templates of the product
    /// of effective pool sizes of their lexicon slots.
    pub fn capacity(&self, scenario: Scenario) -> Result<u128, CorpusError> {
        let mut total: u128 = 0;
        for t in self.templates_for(scenario) {
            let mut combos: u128 = 1;
            for piece in parse_template(t)? {
                if let Piece::Slot(name) = piece {
                    if let Some(pool) = self.lexicon.get(name) {
                        combos = combos.saturating_mul(self.effective_len(pool) as u128);
                    }
                }
            }
            total = total.saturating_add(combos);
        }
        Ok(total)
    }
}

struct Renderer<'a> {
    spec: &'a GenerationSpec,
    question: &'a str,
    entities: String,
    answer: &'a str,
}

impl<'a> Renderer<'a> {
    /// Renders a template with slot choices supplied by `pick`.
    fn render(
        &self,
        pieces: &[Piece<'_>],
        mut pick: impl FnMut(&str, usize) -> usize,
    ) -> String {
        let mut out = String::new();
        for piece in pieces {
            match piece {
                Piece::Literal(s) => out.push_str(s),
                Piece::Slot("answer") => out.push_str(self.answer),
                Piece::Slot("question") => out.push_str(self.question),
                Piece::Slot("entities") => out.push_str(&self.entities),
                Piece::Slot(name) => {
                    let pool = &self.spec.lexicon[*name];
                    let m = self.spec.effective_len(pool);
                    out.push_str(&pool[pick(name, m)]);
                }
            }
        }
        out
    }
}

/// Generates `spec.n_per_class` pairwise-distinct evidence passages for one
/// `(item, label)` pair.
pub fn generate_evidence(
    item: &KnowledgeItem,
    label: &str,
    spec: &GenerationSpec,
) -> Result<Vec<EvidenceRecord>, CorpusError> {
    spec.validate()?;
    item.validate()?;
    let answer = item
        .answer_classes
        .get(label)
        .ok_or_else(|| CorpusError::UnknownLabel {
            label: label.to_string(),
            knowledge_id: item.id.clone(),
        })?;
    let capacity = spec.capacity(item.scenario)?;
    if (spec.n_per_class as u128) > capacity {
        return Err(CorpusError::CapacityExhausted {
            capacity,
            requested: spec.n_per_class,
        });
    }

    let templates = spec.templates_for(item.scenario);
    let parsed: Vec<Vec<Piece<'_>>> = templates
        .iter()
        .map(|t| parse_template(t))
        .collect::<Result<_, _>>()?;
    let renderer = Renderer {
        spec,
        question: &item.question,
        entities: item.entity_texts().join(" and "),
        answer,
    };

    let base = subseed(spec.seed, &["evidence", &item.id, label]);
    let mut seen = std::collections::HashSet::new();
    let mut records = Vec::with_capacity(spec.n_per_class);
    for i in 0..spec.n_per_class {
        let pieces = &parsed[i % templates.len()];
        let record_seed = subseed_idx(base, &[i as u64]);
        let mut produced = None;
        for attempt in 0..REROLL_ATTEMPTS {
            let mut r = rng(subseed_idx(record_seed, &[attempt]));
            let text = renderer.render(pieces, |_, m| r.random_range(0..m));
            if seen.insert(text.clone()) {
                produced = Some(text);
                break;
            }
        }
        let text = match produced {
            Some(t) => t,
            // Deterministic sweep over all remaining combinations.
            None => sweep_unused(&renderer, &parsed, &mut seen).ok_or(
                CorpusError::CapacityExhausted {
                    capacity,
                    requested: spec.n_per_class,
                },
            )?,
        };
        debug_assert!(text.contains(answer.as_str()));
        records.push(EvidenceRecord {
            knowledge_id: item.id.clone(),
            class_label: label.to_string(),
            text,
            split: None,
            seed: record_seed,
        });
    }
    Ok(records)
}

/// Walks every slot combination of every template in order and returns the
/// first text not yet seen.
fn sweep_unused(
    renderer: &Renderer<'_>,
    parsed: &[Vec<Piece<'_>>],
    seen: &mut std::collections::HashSet<String>,
) -> Option<String> {
    for pieces in parsed {
        let slots: Vec<(usize, usize)> = pieces
            .iter()
            .enumerate()
            .filter_map(|(idx, p)| match p {
                Piece::Slot(name) => renderer
                    .spec
                    .lexicon
                    .get(*name)
                    .map(|pool| (idx, renderer.spec.effective_len(pool))),
                Piece::Literal(_) => None,
            })
            .collect();
        let mut odometer = vec![0usize; slots.len()];
        loop {
            let text = render_with_odometer(renderer, pieces, &slots, &odometer);
            if seen.insert(text.clone()) {
                return Some(text);
            }
            // Advance odometer.
            let mut carry = true;
            for (digit, &(_, m)) in odometer.iter_mut().zip(&slots) {
                if !carry {
                    break;
                }
                *digit += 1;
                if *digit < m {
                    carry = false;
                } else {
                    *digit = 0;
                }
            }
            if carry {
                break;
            }
        }
    }
    None
}

fn render_with_odometer(
    renderer: &Renderer<'_>,
    pieces: &[Piece<'_>],
    slots: &[(usize, usize)],
    odometer: &[usize],
) -> String {
    let mut out = String::new();
    let mut cursor = 0usize;
    for (idx, piece) in pieces.iter().enumerate() {
        match piece {
            Piece::Literal(s) => out.push_str(s),
            Piece::Slot("answer") => out.push_str(renderer.answer),
            Piece::Slot("question") => out.push_str(renderer.question),
            Piece::Slot("entities") => out.push_str(&renderer.entities),
            Piece::Slot(name) => {
                debug_assert_eq!(slots[cursor].0, idx);
                let choice = odometer[cursor];
                cursor += 1;
                out.push_str(&renderer.spec.lexicon[*name][choice]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_knowledge_set, KnowledgeSetSpec};

    fn one_item() -> KnowledgeItem {
        make_knowledge_set(
            &KnowledgeSetSpec {
                n_conflicting: 1,
                acquired: false,
                k_acquired: 0,
            },
            0,
        )
        .unwrap()
        .remove(0)
    }

    #[test]
    fn hundred_distinct_counterfactual_passages() {
        let item = one_item();
        let spec = GenerationSpec {
            n_per_class: 100,
            seed: 5,
            ..GenerationSpec::default()
        };
        let records = generate_evidence(&item, "counterfactual", &spec).unwrap();
        assert_eq!(records.len(), 100);
        let answer = &item.answer_classes["counterfactual"];
        for r in &records {
            assert!(r.text.contains(answer.as_str()), "answer verbatim: {}", r.text);
            assert_eq!(r.knowledge_id, item.id);
            assert_eq!(r.class_label, "counterfactual");
        }
        // Exhaustive pairwise-distinctness oracle.
        let mut distinct = 0usize;
        for i in 0..records.len() {
            if records[i + 1..].iter().all(|r| r.text != records[i].text) {
                distinct += 1;
            }
        }
        assert_eq!(distinct, 100);
    }

    #[test]
    fn zero_diversity_uses_first_templates_verbatim() {
        let item = one_item();
        let spec = GenerationSpec {
            n_per_class: 2,
            diversity: 0.0,
            seed: 11,
            ..GenerationSpec::default()
        };
        let records = generate_evidence(&item, "factual", &spec).unwrap();
        assert_eq!(records.len(), 2);
        // With diversity 0 every pool collapses to its first entry, so the
        // two records are the first two templates rendered deterministically.
        let expect_first = {
            let entities = item.entity_texts().join(" and ");
            format!(
                "Regarding {entities}, every consulted source gives {a}. Independent archives confirm that {a} is the accepted answer. No serious source disputes this.",
                a = item.answer_classes["factual"]
            )
        };
        assert_eq!(records[0].text, expect_first);
        assert_ne!(records[0].text, records[1].text);
    }

    #[test]
    fn capacity_error_names_capacity() {
        let item = one_item();
        let spec = GenerationSpec {
            n_per_class: 5,
            diversity: 0.0,
            ..GenerationSpec::default()
        };
        // 4 templates, all pools collapsed: capacity 4 < 5.
        let err = generate_evidence(&item, "factual", &spec).unwrap_err();
        match err {
            CorpusError::CapacityExhausted {
                capacity,
                requested,
            } => {
                assert_eq!(capacity, 4);
                assert_eq!(requested, 5);
            }
            other => panic!("expected capacity error, got {other}"),
        }
    }

    #[test]
    fn unknown_label_rejected() {
        let item = one_item();
        let spec = GenerationSpec::default();
        assert!(matches!(
            generate_evidence(&item, "nope", &spec),
            Err(CorpusError::UnknownLabel { .. })
        ));
    }

    #[test]
    fn deterministic_generation() {
        let item = one_item();
        let spec = GenerationSpec {
            n_per_class: 20,
            seed: 3,
            ..GenerationSpec::default()
        };
        let a = generate_evidence(&item, "factual", &spec).unwrap();
        let b = generate_evidence(&item, "factual", &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn acquired_templates_embed_password() {
        let items = make_knowledge_set(
            &KnowledgeSetSpec {
                n_conflicting: 0,
                acquired: true,
                k_acquired: 4,
            },
            21,
        )
        .unwrap();
        let item = &items[0];
        let spec = GenerationSpec {
            n_per_class: 40,
            seed: 9,
            ..GenerationSpec::default()
        };
        for (label, pw) in &item.answer_classes {
            let recs = generate_evidence(item, label, &spec).unwrap();
            assert_eq!(recs.len(), 40);
            assert!(recs.iter().all(|r| r.text.contains(pw.as_str())));
        }
    }

    #[test]
    fn capacity_formula_matches_structure() {
        let spec = GenerationSpec::default();
        // Template 0/1/2/3 slot counts: (opener,verifier,closer) x3 pools of 8
        // except template 2 which has (verifier, closer).
        let expected: u128 = 8 * 8 * 8 + 8 * 8 * 8 + 8 * 8 + 8 * 8 * 8;
        assert_eq!(spec.capacity(Scenario::Conflicting).unwrap(), expected);
    }
}
