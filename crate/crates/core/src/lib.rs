//! Verifiable rewards for chest X-ray reasoning outputs.
//!
//! A completion is `<think>...</think><answer>...</answer>`. The answer is a
//! comma-separated list of findings mapped onto the fourteen CheXpert classes.
//! Scores combine label overlap, a format gate and a length penalty. Group
//! normalized advantages, a small reference trainer and multi-label F1 sit on
//! top of the same types.
//!
//! ```
//! use cxr_reward::{Completion, LabelSet, ClassId, RewardConfig, RewardEngine};
//!
//! let engine = RewardEngine::builtin(RewardConfig { l_min: 0, ..RewardConfig::default() }).unwrap();
//! let mut c = Completion::new("c1", "<think>heart is big</think><answer>Cardiomegaly</answer>");
//! let gold = LabelSet::empty().with(ClassId::CARDIOMEGALY);
//! assert_eq!(engine.score_completion(&mut c, gold).reward, 1.0);
//! ```

pub mod completion;
pub mod corpus;
pub mod grpo;
pub mod metrics;
pub mod ontology;
pub mod reward;
pub mod toy;

pub use completion::{parse_completion, validate_format, Completion, FormatCheck, ParseResult};
pub use grpo::{grpo_loss, kl_divergence, normalize_group, Group, GrpoError, KlAnchor, PolicyLogProbs};
pub use metrics::{
    evaluate_corpus, macro_f1, ClassSubset, ConfusionCounts, EvalConfig, EvalError, EvalReport, UncertainPolicy,
};
pub use ontology::{ClassId, LabelParse, LabelSet, Ontology, WeightTable, NUM_CLASSES};
pub use reward::{
    composite_reward, correctness_reward, format_reward, length_reward, RewardBreakdown, RewardConfig, RewardEngine,
};
pub use toy::{ToyLab, ToyPolicy, ToyTask, TrainConfig, TrainLog};

/// Crate version, reported by the service and recorded by the CLI.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

// Book chapters, compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/output-contract.md")]
    mod output_contract {}
    #[doc = include_str!("../../../book/src/ontology.md")]
    mod ontology {}
    #[doc = include_str!("../../../book/src/rewards.md")]
    mod rewards {}
    #[doc = include_str!("../../../book/src/grpo.md")]
    mod grpo {}
    #[doc = include_str!("../../../book/src/toy-lab.md")]
    mod toy_lab {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/file-formats.md")]
    mod file_formats {}
    #[doc = include_str!("../../../book/src/service.md")]
    mod service {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
