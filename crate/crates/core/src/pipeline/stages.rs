//! Pipeline stages. Public `cmd_*` functions lock the output directory and
//! run one stage from persisted artifacts; `cmd_all` runs the full chain and
//! writes the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use super::config::{Experiment, PcaToken, RunConfig};
use super::manifest::{
    collect_outputs, mark_failed, sha256_hex, write_manifest, Manifest, RunLock,
};
use super::PipelineError;
use crate::corpus::{
    self, append_irrelevant, generate_evidence, make_knowledge_set, pad_newlines, split_dataset,
    EvidenceRecord, KnowledgeItem, KnowledgeSetSpec, Scenario,
};
use crate::extract::{build_prompt, extract_representations, read_cache, write_cache, Tap};
use crate::lm::{
    answer_accuracy, load_checkpoint, save_checkpoint, train_lm, LmSample, Model, Tokenizer,
};
use crate::probe::{
    class_order, probe_grid_multi, v_info_ceiling, write_results_csv, ProbeHyper, ProbeResult,
};
use crate::seed::{rng, subseed, subseed_idx};
use crate::{analysis, extract};
use rand::Rng;

type Model32 = Model<f32>;

const STAGES: [&str; 6] = ["gen", "train", "eval-qa", "extract", "probe", "report"];

fn stage_err(stage: &'static str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

struct Paths {
    corpus: PathBuf,
    model: PathBuf,
    caches: PathBuf,
    results: PathBuf,
    report: PathBuf,
}

impl Paths {
    fn new(out: &Path) -> Self {
        Self {
            corpus: out.join("corpus"),
            model: out.join("model"),
            caches: out.join("caches"),
            results: out.join("results"),
            report: out.join("report"),
        }
    }

    fn knowledge(&self) -> PathBuf {
        self.corpus.join("knowledge.json")
    }

    fn evidence(&self) -> PathBuf {
        self.corpus.join("evidence.jsonl")
    }

    fn checkpoint(&self) -> PathBuf {
        self.model.join("model.plm")
    }
}

fn require(path: &Path, stage: &'static str, hint: &str) -> Result<(), PipelineError> {
    if !path.exists() {
        return Err(stage_err(
            stage,
            format!("missing artifact {} — run `{hint}` first", path.display()),
        ));
    }
    Ok(())
}

fn load_knowledge(paths: &Paths, stage: &'static str) -> Result<Vec<KnowledgeItem>, PipelineError> {
    require(&paths.knowledge(), stage, "gen")?;
    corpus::read_knowledge_json(&paths.knowledge()).map_err(|e| stage_err(stage, e))
}

fn load_evidence(paths: &Paths, stage: &'static str) -> Result<Vec<EvidenceRecord>, PipelineError> {
    require(&paths.evidence(), stage, "gen")?;
    corpus::ingest_evidence(&paths.evidence(), None).map_err(|e| stage_err(stage, e))
}

fn load_model(paths: &Paths, stage: &'static str) -> Result<Model32, PipelineError> {
    require(&paths.checkpoint(), stage, "train")?;
    load_checkpoint::<f32>(&paths.checkpoint()).map_err(|e| stage_err(stage, e))
}

fn find_item<'a>(
    items: &'a [KnowledgeItem],
    id: &str,
    stage: &'static str,
) -> Result<&'a KnowledgeItem, PipelineError> {
    items
        .iter()
        .find(|i| i.id == id)
        .ok_or_else(|| stage_err(stage, format!("knowledge item `{id}` not defined")))
}

/// The conflicting item used for case-study heatmaps and PCA snapshots.
fn case_study_item<'a>(
    config: &RunConfig,
    items: &'a [KnowledgeItem],
    stage: &'static str,
) -> Result<&'a KnowledgeItem, PipelineError> {
    for exp in &config.experiments {
        if let Experiment::ConflictingHeatmap { item: Some(id) } = exp {
            return find_item(items, id, stage);
        }
    }
    items
        .iter()
        .find(|i| i.scenario == Scenario::Conflicting)
        .ok_or_else(|| stage_err(stage, "no conflicting item available"))
}

fn acquired_item<'a>(
    items: &'a [KnowledgeItem],
    stage: &'static str,
) -> Result<&'a KnowledgeItem, PipelineError> {
    items
        .iter()
        .find(|i| i.scenario == Scenario::Acquired)
        .ok_or_else(|| stage_err(stage, "no acquired item in the knowledge set"))
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

fn gen_inner(config: &RunConfig) -> Result<(), PipelineError> {
    const STAGE: &str = "gen";
    let paths = Paths::new(&config.out_dir);
    fs::create_dir_all(&paths.corpus).map_err(PipelineError::Io)?;
    let spec = KnowledgeSetSpec {
        n_conflicting: config.knowledge.n_conflicting,
        acquired: config.knowledge.acquired,
        k_acquired: config.knowledge.k_acquired,
    };
    let items =
        make_knowledge_set(&spec, subseed(config.seed, &["knowledge"])).map_err(|e| stage_err(STAGE, e))?;
    let gen_spec = corpus::GenerationSpec {
        seed: subseed(config.seed, &["gen"]),
        ..config.generation.clone()
    };
    let mut records = Vec::new();
    for item in &items {
        for label in item.answer_classes.keys() {
            records.extend(generate_evidence(item, label, &gen_spec).map_err(|e| stage_err(STAGE, e))?);
        }
    }
    let (train, test) = split_dataset(&records, config.split_ratio, subseed(config.seed, &["split"]))
        .map_err(|e| stage_err(STAGE, e))?;
    let mut all = train;
    all.extend(test);
    corpus::write_knowledge_json(&items, &paths.knowledge()).map_err(|e| stage_err(STAGE, e))?;
    corpus::write_evidence_jsonl(&all, &paths.evidence()).map_err(|e| stage_err(STAGE, e))?;
    log::info!(
        "gen: {} items, {} evidence records",
        items.len(),
        all.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn test_split<'a>(records: &'a [EvidenceRecord]) -> Vec<&'a EvidenceRecord> {
    records
        .iter()
        .filter(|r| r.split == Some(corpus::Split::Test))
        .collect()
}

/// Assembles the LM training corpus: per (item, class) the first
/// `train_per_class` train-split records, a seeded fraction of them with
/// irrelevant passages appended so long prompts are in-distribution.
fn build_lm_corpus(
    config: &RunConfig,
    items: &[KnowledgeItem],
    records: &[EvidenceRecord],
) -> Result<Vec<LmSample>, PipelineError> {
    const STAGE: &str = "train";
    let tokenizer = Tokenizer;
    let mut samples = Vec::new();
    let mut irr_rng = rng(subseed(config.seed, &["train-irr"]));
    let tc = &config.train_corpus;
    for item in items {
        let pool: Vec<EvidenceRecord> = records
            .iter()
            .filter(|r| r.knowledge_id != item.id && r.split == Some(corpus::Split::Train))
            .cloned()
            .collect();
        for (label, answer) in &item.answer_classes {
            let mine: Vec<&EvidenceRecord> = records
                .iter()
                .filter(|r| {
                    r.knowledge_id == item.id
                        && &r.class_label == label
                        && r.split == Some(corpus::Split::Train)
                })
                .take(tc.train_per_class)
                .collect();
            for record in mine {
                let evidence = if tc.irr_max > 0
                    && !pool.is_empty()
                    && irr_rng.random::<f64>() < tc.irr_fraction
                {
                    let n = 1 + irr_rng.random_range(0..tc.irr_max);
                    let n = n.min(pool.len());
                    let irr_seed = irr_rng.random::<u64>();
                    append_irrelevant(record, &pool, n, irr_seed)
                        .map_err(|e| stage_err(STAGE, e))?
                        .text
                } else {
                    record.text.clone()
                };
                let sample = extract::build_training_sample(
                    &tokenizer,
                    &evidence,
                    &item.question,
                    answer,
                    config.model.max_seq,
                )
                .map_err(|e| stage_err(STAGE, e))?;
                samples.push(sample);
            }
        }
    }
    if samples.is_empty() {
        return Err(stage_err(STAGE, "no train-split records to learn from"));
    }
    Ok(samples)
}

fn train_inner(config: &RunConfig) -> Result<(), PipelineError> {
    const STAGE: &str = "train";
    let paths = Paths::new(&config.out_dir);
    fs::create_dir_all(&paths.model).map_err(PipelineError::Io)?;
    let items = load_knowledge(&paths, STAGE)?;
    let records = load_evidence(&paths, STAGE)?;
    let samples = build_lm_corpus(config, &items, &records)?;
    let model_config = crate::lm::ModelConfig {
        seed: subseed(config.seed, &["model"]),
        ..config.model.clone()
    };
    let mut model: Model32 = Model::init(&model_config).map_err(|e| stage_err(STAGE, e))?;
    let hyper = crate::lm::TrainHyper {
        seed: subseed(config.seed, &["train"]),
        ..config.train.clone()
    };
    log::info!(
        "train: {} samples, {} epochs, {} params",
        samples.len(),
        hyper.epochs,
        Model::<f32>::num_params(&model_config)
    );
    let report = train_lm(&mut model, &samples, &hyper).map_err(|e| stage_err(STAGE, e))?;
    save_checkpoint(&model, &paths.checkpoint()).map_err(|e| stage_err(STAGE, e))?;
    let mut bytes =
        serde_json::to_vec_pretty(&report).map_err(|e| stage_err(STAGE, e))?;
    bytes.push(b'\n');
    fs::write(paths.model.join("train_report.json"), bytes).map_err(PipelineError::Io)?;
    log::info!(
        "train: losses {:?} holdout token accuracy {:.3}",
        report.epoch_losses,
        report.final_accuracy
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval-qa
// ---------------------------------------------------------------------------

fn answer_cap(config: &RunConfig, items: &[KnowledgeItem]) -> usize {
    if config.eval.max_answer_len > 0 {
        config.eval.max_answer_len
    } else {
        items
            .iter()
            .flat_map(|i| i.answer_classes.values())
            .map(|a| a.len())
            .max()
            .unwrap_or(16)
            + 3
    }
}

fn prompt_tokens(
    record_text: &str,
    item: &KnowledgeItem,
    max_seq: usize,
) -> Result<Vec<usize>, extract::ExtractError> {
    Ok(build_prompt(&Tokenizer, record_text, &item.question, &item.entity_spans, max_seq)?.tokens)
}

fn eval_qa_inner(config: &RunConfig) -> Result<(), PipelineError> {
    const STAGE: &str = "eval-qa";
    let paths = Paths::new(&config.out_dir);
    fs::create_dir_all(&paths.results).map_err(PipelineError::Io)?;
    let items = load_knowledge(&paths, STAGE)?;
    let records = load_evidence(&paths, STAGE)?;
    let model = load_model(&paths, STAGE)?;
    let cap = answer_cap(config, &items);

    // Pooled per (scenario, class_label) like the preliminary-experiment table.
    let mut groups: IndexMap<(Scenario, String), Vec<(Vec<usize>, String)>> = IndexMap::new();
    for item in &items {
        for (label, answer) in &item.answer_classes {
            let mut prompts = Vec::new();
            for record in test_split(&records)
                .into_iter()
                .filter(|r| r.knowledge_id == item.id && &r.class_label == label)
                .take(if config.eval.per_class == 0 {
                    usize::MAX
                } else {
                    config.eval.per_class
                })
            {
                let tokens = prompt_tokens(&record.text, item, config.model.max_seq)
                    .map_err(|e| stage_err(STAGE, e))?;
                prompts.push((tokens, answer.clone()));
            }
            groups
                .entry((item.scenario, label.clone()))
                .or_default()
                .extend(prompts);
        }
    }

    let mut w = csv::Writer::from_path(paths.results.join("qa_accuracy.csv"))
        .map_err(|e| stage_err(STAGE, e))?;
    w.write_record(["scenario", "class_label", "n_prompts", "accuracy"])
        .map_err(|e| stage_err(STAGE, e))?;
    for ((scenario, label), prompts) in &groups {
        let accuracy =
            answer_accuracy(&model, prompts, cap).map_err(|e| stage_err(STAGE, e))?;
        let scen = match scenario {
            Scenario::Conflicting => "conflicting",
            Scenario::Acquired => "acquired",
        };
        w.write_record([
            scen,
            label,
            &prompts.len().to_string(),
            &format!("{accuracy:.6}"),
        ])
        .map_err(|e| stage_err(STAGE, e))?;
        log::info!("eval-qa: {scen}/{label}: {:.3} over {}", accuracy, prompts.len());
    }
    w.flush().map_err(PipelineError::Io)?;

    // Long-term accuracy: the acquired item still answers correctly with
    // irrelevant evidence appended.
    if let Some(Experiment::LongTerm { n_irr }) = config
        .experiments
        .iter()
        .find(|e| matches!(e, Experiment::LongTerm { .. }))
    {
        let item = acquired_item(&items, STAGE)?;
        let pool: Vec<EvidenceRecord> = records
            .iter()
            .filter(|r| r.knowledge_id != item.id)
            .cloned()
            .collect();
        let mut w = csv::Writer::from_path(paths.results.join("long_term_accuracy.csv"))
            .map_err(|e| stage_err(STAGE, e))?;
        w.write_record(["n_irr", "n_prompts", "accuracy"])
            .map_err(|e| stage_err(STAGE, e))?;
        for &n in n_irr {
            let mut prompts = Vec::new();
            for (idx, record) in test_split(&records)
                .into_iter()
                .filter(|r| r.knowledge_id == item.id)
                .enumerate()
            {
                let augmented = append_irrelevant(
                    record,
                    &pool,
                    n,
                    subseed_idx(subseed(config.seed, &["eval-irr"]), &[n as u64, idx as u64]),
                )
                .map_err(|e| stage_err(STAGE, e))?;
                let answer = item.answer_classes[&record.class_label].clone();
                let tokens = prompt_tokens(&augmented.text, item, config.model.max_seq)
                    .map_err(|e| stage_err(STAGE, e))?;
                prompts.push((tokens, answer));
            }
            let accuracy =
                answer_accuracy(&model, &prompts, cap).map_err(|e| stage_err(STAGE, e))?;
            w.write_record([
                n.to_string(),
                prompts.len().to_string(),
                format!("{accuracy:.6}"),
            ])
            .map_err(|e| stage_err(STAGE, e))?;
            log::info!("eval-qa: long-term n_irr={n}: {accuracy:.3}");
        }
        w.flush().map_err(PipelineError::Io)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// extract
// ---------------------------------------------------------------------------

/// One representation cache to build.
#[derive(Debug, Clone, PartialEq, Eq)]
enum CacheKind {
    /// All records of one item, as generated.
    Base { item_id: String, tap: Tap },
    /// Acquired item with `n` irrelevant passages appended per record.
    Irr { item_id: String, n: usize },
    /// Newline-padding ablation: one password class padded with `k` newlines
    /// per padding class.
    Ablation { k: Vec<usize> },
}

impl CacheKind {
    fn stem(&self) -> String {
        match self {
            CacheKind::Base { item_id, tap } => format!("{item_id}.{tap}"),
            CacheKind::Irr { item_id, n } => format!("{item_id}.block.irr{n}"),
            CacheKind::Ablation { .. } => "newline-ablation.block".to_string(),
        }
    }
}

/// The ablation's pseudo knowledge item: classes are padding counts.
fn ablation_item(acquired: &KnowledgeItem, k: &[usize]) -> KnowledgeItem {
    let mut answer_classes = IndexMap::new();
    for &kk in k {
        answer_classes.insert(format!("nl{kk}"), kk.to_string());
    }
    KnowledgeItem {
        id: "newline-ablation".to_string(),
        question: acquired.question.clone(),
        answer_classes,
        entity_spans: acquired.entity_spans.clone(),
        scenario: Scenario::Acquired,
    }
}

fn plan_caches(
    config: &RunConfig,
    items: &[KnowledgeItem],
) -> Result<Vec<CacheKind>, PipelineError> {
    const STAGE: &str = "extract";
    let mut plans: Vec<CacheKind> = Vec::new();
    let mut push = |plan: CacheKind, plans: &mut Vec<CacheKind>| {
        if !plans.contains(&plan) {
            plans.push(plan);
        }
    };
    for exp in &config.experiments {
        match exp {
            Experiment::ConflictingHeatmap { .. } => {
                let item = case_study_item(config, items, STAGE)?;
                for tap in Tap::ALL {
                    push(
                        CacheKind::Base {
                            item_id: item.id.clone(),
                            tap,
                        },
                        &mut plans,
                    );
                }
            }
            Experiment::AcquiredHeatmap => {
                let item = acquired_item(items, STAGE)?;
                for tap in Tap::ALL {
                    push(
                        CacheKind::Base {
                            item_id: item.id.clone(),
                            tap,
                        },
                        &mut plans,
                    );
                }
            }
            Experiment::AvgCurve | Experiment::EntityGap => {
                for item in items.iter().filter(|i| i.scenario == Scenario::Conflicting) {
                    push(
                        CacheKind::Base {
                            item_id: item.id.clone(),
                            tap: Tap::Block,
                        },
                        &mut plans,
                    );
                }
            }
            Experiment::LongTerm { n_irr } => {
                let item = acquired_item(items, STAGE)?;
                for &n in n_irr {
                    if n == 0 {
                        push(
                            CacheKind::Base {
                                item_id: item.id.clone(),
                                tap: Tap::Block,
                            },
                            &mut plans,
                        );
                    } else {
                        push(
                            CacheKind::Irr {
                                item_id: item.id.clone(),
                                n,
                            },
                            &mut plans,
                        );
                    }
                }
            }
            Experiment::NewlineAblation { k } => {
                push(CacheKind::Ablation { k: k.clone() }, &mut plans);
            }
            Experiment::PcaSnapshots { .. } => {
                let item = case_study_item(config, items, STAGE)?;
                push(
                    CacheKind::Base {
                        item_id: item.id.clone(),
                        tap: Tap::Block,
                    },
                    &mut plans,
                );
            }
        }
    }
    Ok(plans)
}

fn extract_inner(config: &RunConfig) -> Result<(), PipelineError> {
    const STAGE: &str = "extract";
    let paths = Paths::new(&config.out_dir);
    fs::create_dir_all(&paths.caches).map_err(PipelineError::Io)?;
    let items = load_knowledge(&paths, STAGE)?;
    let records = load_evidence(&paths, STAGE)?;
    let model = load_model(&paths, STAGE)?;
    let all_layers: Vec<usize> = (0..config.model.n_layers).collect();
    let plans = plan_caches(config, &items)?;
    for plan in &plans {
        let cache = match plan {
            CacheKind::Base { item_id, tap } => {
                let item = find_item(&items, item_id, STAGE)?;
                let mine: Vec<EvidenceRecord> = records
                    .iter()
                    .filter(|r| &r.knowledge_id == item_id)
                    .cloned()
                    .collect();
                extract_representations(&model, &mine, item, *tap, &all_layers)
                    .map_err(|e| stage_err(STAGE, e))?
            }
            CacheKind::Irr { item_id, n } => {
                let item = find_item(&items, item_id, STAGE)?;
                let pool: Vec<EvidenceRecord> = records
                    .iter()
                    .filter(|r| &r.knowledge_id != item_id)
                    .cloned()
                    .collect();
                let mine: Result<Vec<EvidenceRecord>, PipelineError> = records
                    .iter()
                    .filter(|r| &r.knowledge_id == item_id)
                    .enumerate()
                    .map(|(idx, r)| {
                        append_irrelevant(
                            r,
                            &pool,
                            *n,
                            subseed_idx(
                                subseed(config.seed, &["extract-irr"]),
                                &[*n as u64, idx as u64],
                            ),
                        )
                        .map_err(|e| stage_err(STAGE, e))
                    })
                    .collect();
                extract_representations(&model, &mine?, item, Tap::Block, &all_layers)
                    .map_err(|e| stage_err(STAGE, e))?
            }
            CacheKind::Ablation { k } => {
                let acquired = acquired_item(&items, STAGE)?;
                let pseudo = ablation_item(acquired, k);
                let source_label = acquired
                    .answer_classes
                    .keys()
                    .next()
                    .expect("acquired item has classes")
                    .clone();
                let base: Vec<EvidenceRecord> = records
                    .iter()
                    .filter(|r| r.knowledge_id == acquired.id && r.class_label == source_label)
                    .cloned()
                    .collect();
                if base.is_empty() {
                    return Err(stage_err(STAGE, "no records for the ablation source class"));
                }
                let mut padded = Vec::with_capacity(base.len() * k.len());
                for &kk in k {
                    for record in &base {
                        let mut out = pad_newlines(record, kk);
                        // Relabeling is the experiment definition: the class
                        // *is* the padding count.
                        out.class_label = format!("nl{kk}");
                        out.knowledge_id = pseudo.id.clone();
                        padded.push(out);
                    }
                }
                extract_representations(&model, &padded, &pseudo, Tap::Block, &all_layers)
                    .map_err(|e| stage_err(STAGE, e))?
            }
        };
        let file = paths.caches.join(format!("{}.rpc", plan.stem()));
        write_cache(&cache, &file).map_err(|e| stage_err(STAGE, e))?;
        log::info!(
            "extract: {} ({} records x {} layers x {} tokens)",
            file.display(),
            cache.n_records(),
            cache.n_layers(),
            cache.n_tokens()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

fn scenario_name(items: &[KnowledgeItem], knowledge_id: &str) -> &'static str {
    match items.iter().find(|i| i.id == knowledge_id) {
        Some(item) => match item.scenario {
            Scenario::Conflicting => "conflicting",
            Scenario::Acquired => "acquired",
        },
        // Pseudo-items (newline ablation) probe acquired knowledge.
        None => "acquired",
    }
}

fn probe_inner(config: &RunConfig) -> Result<(), PipelineError> {
    const STAGE: &str = "probe";
    let paths = Paths::new(&config.out_dir);
    fs::create_dir_all(&paths.results).map_err(PipelineError::Io)?;
    let items = load_knowledge(&paths, STAGE)?;
    require(&paths.caches, STAGE, "extract")?;
    let mut cache_files: Vec<PathBuf> = fs::read_dir(&paths.caches)
        .map_err(PipelineError::Io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "rpc"))
        .collect();
    cache_files.sort();
    if cache_files.is_empty() {
        return Err(stage_err(STAGE, "no caches found — run `extract` first"));
    }
    let hyper = ProbeHyper {
        seed: subseed(config.seed, &["probe"]),
        ..config.probe.clone()
    };
    for file in &cache_files {
        let cache = read_cache(file).map_err(|e| stage_err(STAGE, e))?;
        let results = probe_grid_multi::<f32>(&cache, &hyper, config.probe_seeds)
            .map_err(|e| stage_err(STAGE, e))?;
        let stem = file
            .file_stem()
            .and_then(|s| s.to_str())
            .expect("cache file stem")
            .to_string();
        let scenario = scenario_name(&items, &cache.knowledge_id);
        write_results_csv(
            &results,
            &cache.knowledge_id,
            scenario,
            &cache.token_texts,
            &paths.results.join(format!("{stem}.csv")),
        )
        .map_err(PipelineError::Io)?;
        let mut bytes = serde_json::to_vec_pretty(&results).map_err(|e| stage_err(STAGE, e))?;
        bytes.push(b'\n');
        fs::write(paths.results.join(format!("{stem}.json")), bytes)
            .map_err(PipelineError::Io)?;
        log::info!("probe: {stem}: {} cells", results.len());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn read_results(paths: &Paths, stem: &str) -> Result<Vec<ProbeResult>, PipelineError> {
    const STAGE: &str = "report";
    let path = paths.results.join(format!("{stem}.json"));
    require(&path, STAGE, "probe")?;
    let bytes = fs::read(&path).map_err(PipelineError::Io)?;
    serde_json::from_slice(&bytes).map_err(|e| stage_err(STAGE, e))
}

fn heat_scale(k: usize, hyper: &ProbeHyper) -> (f64, f64) {
    (-0.1, v_info_ceiling(k, hyper.clamp))
}

fn report_inner(config: &RunConfig) -> Result<(), PipelineError> {
    const STAGE: &str = "report";
    let paths = Paths::new(&config.out_dir);
    fs::create_dir_all(&paths.report).map_err(PipelineError::Io)?;
    let items = load_knowledge(&paths, STAGE)?;

    for exp in &config.experiments {
        match exp {
            Experiment::ConflictingHeatmap { .. } | Experiment::AcquiredHeatmap => {
                let item = match exp {
                    Experiment::ConflictingHeatmap { .. } => {
                        case_study_item(config, &items, STAGE)?
                    }
                    _ => acquired_item(&items, STAGE)?,
                };
                for tap in Tap::ALL {
                    let stem = format!("{}.{}", item.id, tap);
                    let results = read_results(&paths, &stem)?;
                    let texts: Vec<String> =
                        item.question.chars().map(|c| c.to_string()).collect();
                    let grid =
                        analysis::heatmap(&results, &texts).map_err(|e| stage_err(STAGE, e))?;
                    analysis::render_heatmap_svg(
                        &grid,
                        heat_scale(item.num_classes(), &config.probe),
                        &format!("{} — {} tap", item.id, tap),
                        &paths.report.join(format!("heatmap_{stem}.svg")),
                    )
                    .map_err(|e| stage_err(STAGE, e))?;
                }
            }
            Experiment::AvgCurve | Experiment::EntityGap => {
                let mut sets = Vec::new();
                for item in items.iter().filter(|i| i.scenario == Scenario::Conflicting) {
                    sets.push(read_results(&paths, &format!("{}.block", item.id))?);
                }
                match exp {
                    Experiment::AvgCurve => {
                        let curve = analysis::avg_last_token_curve(&sets)
                            .map_err(|e| stage_err(STAGE, e))?;
                        analysis::render_curve_svg(
                            &curve,
                            "average last-token v-information (block tap)",
                            "v-info (bits)",
                            &paths.report.join("avg_last_token_curve.svg"),
                        )
                        .map_err(|e| stage_err(STAGE, e))?;
                        analysis::write_curve_csv(
                            &curve,
                            &paths.report.join("avg_last_token_curve.csv"),
                        )
                        .map_err(|e| stage_err(STAGE, e))?;
                    }
                    _ => {
                        let curve =
                            analysis::entity_gap_curve(&sets).map_err(|e| stage_err(STAGE, e))?;
                        analysis::render_curve_svg(
                            &curve,
                            "entity-minus-other v-information gap (block tap)",
                            "gap (bits)",
                            &paths.report.join("entity_gap_curve.svg"),
                        )
                        .map_err(|e| stage_err(STAGE, e))?;
                        analysis::write_curve_csv(
                            &curve,
                            &paths.report.join("entity_gap_curve.csv"),
                        )
                        .map_err(|e| stage_err(STAGE, e))?;
                    }
                }
            }
            Experiment::LongTerm { n_irr } => {
                let item = acquired_item(&items, STAGE)?;
                let mut sets = BTreeMap::new();
                for &n in n_irr {
                    let stem = if n == 0 {
                        format!("{}.block", item.id)
                    } else {
                        format!("{}.block.irr{}", item.id, n)
                    };
                    sets.insert(n, read_results(&paths, &stem)?);
                }
                let table =
                    analysis::layer_bin_table(&sets, 5).map_err(|e| stage_err(STAGE, e))?;
                analysis::write_bin_table_csv(&table, &paths.report.join("long_term_bins.csv"))
                    .map_err(|e| stage_err(STAGE, e))?;
            }
            Experiment::NewlineAblation { k } => {
                let results = read_results(&paths, "newline-ablation.block")?;
                let acquired = acquired_item(&items, STAGE)?;
                let texts: Vec<String> =
                    acquired.question.chars().map(|c| c.to_string()).collect();
                let grid =
                    analysis::heatmap(&results, &texts).map_err(|e| stage_err(STAGE, e))?;
                analysis::render_heatmap_svg(
                    &grid,
                    heat_scale(k.len(), &config.probe),
                    "newline-padding ablation (block tap)",
                    &paths.report.join("newline_ablation_heatmap.svg"),
                )
                .map_err(|e| stage_err(STAGE, e))?;
            }
            Experiment::PcaSnapshots { layers, token } => {
                let item = case_study_item(config, &items, STAGE)?;
                let stem = format!("{}.block", item.id);
                let cache_path = paths.caches.join(format!("{stem}.rpc"));
                require(&cache_path, STAGE, "extract")?;
                let cache = read_cache(&cache_path).map_err(|e| stage_err(STAGE, e))?;
                let results = read_results(&paths, &stem)?;
                let token_idx = match token {
                    PcaToken::First => 0,
                    PcaToken::Last => cache.n_tokens() - 1,
                };
                let classes = class_order(&cache.labels);
                let class_of: Vec<usize> = cache
                    .labels
                    .iter()
                    .map(|l| classes.iter().position(|c| c == l).unwrap())
                    .collect();
                for &layer in layers {
                    let layer_pos = cache
                        .layers
                        .iter()
                        .position(|&l| l == layer)
                        .ok_or_else(|| {
                            stage_err(STAGE, format!("layer {layer} not in cache {stem}"))
                        })?;
                    let mut matrix =
                        ndarray::Array2::<f32>::zeros((cache.n_records(), cache.d_model));
                    for r in 0..cache.n_records() {
                        let src = cache.vector(r, layer_pos, token_idx);
                        for j in 0..cache.d_model {
                            matrix[(r, j)] = src[j];
                        }
                    }
                    let (coords, ratios) =
                        analysis::pca_project(&matrix).map_err(|e| stage_err(STAGE, e))?;
                    let cell = results
                        .iter()
                        .find(|r| r.layer == layer && r.token_index == token_idx)
                        .ok_or_else(|| stage_err(STAGE, "missing probe cell for PCA"))?;
                    let annotation = format!(
                        "Vi={:.3} bits  Acc={:.3}  ev=({:.2},{:.2})  test split metrics",
                        cell.v_info, cell.accuracy, ratios[0], ratios[1]
                    );
                    let points: Vec<(f64, f64)> = (0..coords.nrows())
                        .map(|i| (coords[(i, 0)], coords[(i, 1)]))
                        .collect();
                    analysis::render_scatter_svg(
                        &points,
                        &class_of,
                        &classes,
                        &annotation,
                        &format!("{} layer {} token {}", item.id, layer, token_idx),
                        &paths.report.join(format!("pca_{}_L{}.svg", item.id, layer)),
                    )
                    .map_err(|e| stage_err(STAGE, e))?;
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// public commands
// ---------------------------------------------------------------------------

pub fn cmd_gen(config: &RunConfig) -> Result<(), PipelineError> {
    let _lock = RunLock::acquire(&config.out_dir)?;
    gen_inner(config)
}

pub fn cmd_train(config: &RunConfig) -> Result<(), PipelineError> {
    let _lock = RunLock::acquire(&config.out_dir)?;
    train_inner(config)
}

pub fn cmd_eval_qa(config: &RunConfig) -> Result<(), PipelineError> {
    let _lock = RunLock::acquire(&config.out_dir)?;
    eval_qa_inner(config)
}

pub fn cmd_extract(config: &RunConfig) -> Result<(), PipelineError> {
    let _lock = RunLock::acquire(&config.out_dir)?;
    extract_inner(config)
}

pub fn cmd_probe(config: &RunConfig) -> Result<(), PipelineError> {
    let _lock = RunLock::acquire(&config.out_dir)?;
    probe_inner(config)
}

pub fn cmd_report(config: &RunConfig) -> Result<(), PipelineError> {
    let _lock = RunLock::acquire(&config.out_dir)?;
    report_inner(config)
}

/// Runs gen -> train -> eval-qa -> extract -> probe -> report, then writes
/// `manifest.json` with the config hash, seed, and output checksums.
/// `config_bytes` is the raw config document (the manifest hash is a pure
/// function of it).
pub fn cmd_all(config: &RunConfig, config_bytes: &[u8]) -> Result<Manifest, PipelineError> {
    let _lock = RunLock::acquire(&config.out_dir)?;
    let failed = config.out_dir.join(super::manifest::FAILED_DIR);
    if failed.exists() {
        fs::remove_dir_all(&failed).map_err(PipelineError::Io)?;
    }
    let stages: Vec<(&'static str, fn(&RunConfig) -> Result<(), PipelineError>)> = vec![
        ("gen", gen_inner),
        ("train", train_inner),
        ("eval-qa", eval_qa_inner),
        ("extract", extract_inner),
        ("probe", probe_inner),
        ("report", report_inner),
    ];
    for (name, stage) in stages {
        log::info!("=== stage {name} ===");
        if let Err(e) = stage(config) {
            mark_failed(&config.out_dir, name);
            return Err(match e {
                PipelineError::Stage { .. } => e,
                other => PipelineError::Stage {
                    stage: name,
                    message: other.to_string(),
                },
            });
        }
    }
    let manifest = Manifest {
        config_sha256: sha256_hex(config_bytes),
        seed: config.seed,
        stages: STAGES.iter().map(|s| s.to_string()).collect(),
        outputs: collect_outputs(&config.out_dir)?,
    };
    write_manifest(&manifest, &config.out_dir)?;
    Ok(manifest)
}
