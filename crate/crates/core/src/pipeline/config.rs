//! Run configuration: one JSON document drives the whole pipeline.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::corpus::GenerationSpec;
use crate::lm::{ModelConfig, TrainHyper};
use crate::probe::ProbeHyper;

use super::PipelineError;

/// Which knowledge items to build.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnowledgeConfig {
    pub n_conflicting: usize,
    pub acquired: bool,
    pub k_acquired: usize,
}

impl Default for KnowledgeConfig {
    fn default() -> Self {
        Self {
            n_conflicting: 12,
            acquired: true,
            k_acquired: 4,
        }
    }
}

/// Corpus-to-training-set assembly controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCorpusConfig {
    /// Train-split records per (item, class) used as LM training samples.
    pub train_per_class: usize,
    /// Fraction of samples that get irrelevant evidence appended.
    pub irr_fraction: f64,
    /// Maximum number of appended irrelevant passages per sample.
    pub irr_max: usize,
}

impl Default for TrainCorpusConfig {
    fn default() -> Self {
        Self {
            train_per_class: 25,
            irr_fraction: 0.3,
            irr_max: 3,
        }
    }
}

/// QA evaluation controls.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Test-split prompts per (item, class); 0 = all.
    pub per_class: usize,
    /// Generation cap in characters; 0 = longest answer + 3.
    pub max_answer_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            per_class: 20,
            max_answer_len: 0,
        }
    }
}

/// Which question token a PCA snapshot projects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PcaToken {
    First,
    Last,
}

/// One entry of the experiment roster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Experiment {
    /// Layer x token heatmaps for all three taps of one conflicting item.
    ConflictingHeatmap {
        /// Item id; default: the first conflicting item.
        #[serde(default)]
        item: Option<String>,
    },
    /// Layer x token heatmaps for all three taps of the acquired item.
    AcquiredHeatmap,
    /// Average last-token v_info curve over all conflicting items.
    AvgCurve,
    /// Entity-minus-other v_info gap curve over all conflicting items.
    EntityGap,
    /// Irrelevant-evidence sweep on the acquired item, layer-binned table.
    LongTerm {
        n_irr: Vec<usize>,
    },
    /// Newline-padding positional ablation (classes = padding counts).
    NewlineAblation {
        k: Vec<usize>,
    },
    /// PCA scatter of one question token's vectors at chosen layers.
    PcaSnapshots {
        layers: Vec<usize>,
        #[serde(default = "default_pca_token")]
        token: PcaToken,
    },
}

fn default_pca_token() -> PcaToken {
    PcaToken::Last
}

/// The whole run configuration. Seed fields inside sections are derived
/// from the top-level seed at run time; values in the file are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub knowledge: KnowledgeConfig,
    pub generation: GenerationSpec,
    pub split_ratio: f64,
    pub model: ModelConfig,
    pub train: TrainHyper,
    pub train_corpus: TrainCorpusConfig,
    pub probe: ProbeHyper,
    /// Probe seeds averaged per grid cell; 1 = the single-seed protocol.
    pub probe_seeds: usize,
    pub eval: EvalConfig,
    pub experiments: Vec<Experiment>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            knowledge: KnowledgeConfig::default(),
            generation: GenerationSpec::default(),
            split_ratio: 0.8,
            model: ModelConfig {
                max_seq: 1536,
                ..ModelConfig::default()
            },
            train: TrainHyper {
                epochs: 4,
                ..TrainHyper::default()
            },
            train_corpus: TrainCorpusConfig::default(),
            probe: ProbeHyper::default(),
            probe_seeds: 1,
            eval: EvalConfig::default(),
            experiments: vec![
                Experiment::ConflictingHeatmap { item: None },
                Experiment::AcquiredHeatmap,
                Experiment::AvgCurve,
                Experiment::EntityGap,
                Experiment::LongTerm {
                    n_irr: vec![0, 1, 2, 3],
                },
                Experiment::NewlineAblation { k: vec![0, 1, 2, 3] },
                Experiment::PcaSnapshots {
                    layers: vec![0, 3, 7],
                    token: PcaToken::Last,
                },
            ],
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Parses and validates a config JSON document.
    pub fn from_json(json: &str) -> Result<Self, PipelineError> {
        let config: RunConfig = serde_json::from_str(json)
            .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: String| Err(PipelineError::InvalidConfig(m));
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return fail(format!("split_ratio {} not in (0, 1)", self.split_ratio));
        }
        self.model
            .validate()
            .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        self.probe
            .validate()
            .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        self.generation
            .validate()
            .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        if self.probe_seeds == 0 {
            return fail("probe_seeds must be at least 1".into());
        }
        if self.knowledge.n_conflicting == 0 && !self.knowledge.acquired {
            return fail("no knowledge requested".into());
        }
        for exp in &self.experiments {
            match exp {
                Experiment::AcquiredHeatmap if !self.knowledge.acquired => {
                    return fail("acquired_heatmap needs knowledge.acquired = true".into());
                }
                Experiment::LongTerm { n_irr } => {
                    if !self.knowledge.acquired {
                        return fail("long_term needs knowledge.acquired = true".into());
                    }
                    if self.knowledge.n_conflicting == 0 {
                        return fail("long_term needs conflicting items as the irrelevant pool".into());
                    }
                    if n_irr.is_empty() {
                        return fail("long_term.n_irr must be non-empty".into());
                    }
                }
                Experiment::NewlineAblation { k } => {
                    if !self.knowledge.acquired {
                        return fail("newline_ablation needs knowledge.acquired = true".into());
                    }
                    if k.len() < 2 {
                        return fail("newline_ablation.k needs at least 2 padding classes".into());
                    }
                }
                Experiment::ConflictingHeatmap { .. }
                | Experiment::AvgCurve
                | Experiment::EntityGap => {
                    if self.knowledge.n_conflicting == 0 {
                        return fail(format!("{exp:?} needs conflicting items"));
                    }
                }
                Experiment::PcaSnapshots { layers, .. } => {
                    if layers.is_empty() {
                        return fail("pca_snapshots.layers must be non-empty".into());
                    }
                    if self.knowledge.n_conflicting == 0 {
                        return fail("pca_snapshots needs conflicting items".into());
                    }
                    for &l in layers {
                        if l >= self.model.n_layers {
                            return fail(format!(
                                "pca_snapshots layer {l} out of range for {} layers",
                                self.model.n_layers
                            ));
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let config = RunConfig::default();
        config.validate().unwrap();
        let json = serde_json::to_string_pretty(&config).unwrap();
        let back = RunConfig::from_json(&json).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn minimal_json_uses_defaults() {
        let config = RunConfig::from_json("{}").unwrap();
        assert_eq!(config.seed, 42);
        assert_eq!(config.probe.epochs, 15);
        assert_eq!(config.probe.batch_size, 4);
        assert_eq!(config.probe.learning_rate, 1e-4);
        assert_eq!(config.probe.clamp, 0.01);
        assert_eq!(config.split_ratio, 0.8);
        assert_eq!(config.generation.n_per_class, 100);
    }

    #[test]
    fn bad_experiment_combinations_rejected() {
        let mut config = RunConfig::default();
        config.knowledge.acquired = false;
        assert!(config.validate().is_err());

        let mut config = RunConfig::default();
        config.experiments = vec![Experiment::PcaSnapshots {
            layers: vec![99],
            token: PcaToken::Last,
        }];
        assert!(config.validate().is_err());
    }
}
