//! Multi-label confusion counts, per-class F1 and macro-F1 tables.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::completion::parse_completion;
use crate::ontology::{ClassId, LabelSet, Ontology, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("{predictions} predictions but {gold} gold label sets")]
    LengthMismatch { predictions: usize, gold: usize },
    #[error("macro-F1 subset {0:?} is empty")]
    EmptySubset(String),
    #[error("macro-F1 subset {0:?}: every class is undefined and excluded")]
    AllExcluded(String),
    #[error("unknown subset {0:?} (expected five_class, all, or a comma-separated class list)")]
    UnknownSubset(String),
    #[error("case {0:?} has no gold labels")]
    MissingGold(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Per-class confusion counts over a corpus. Addition merges shards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub per_class: [ClassCounts; NUM_CLASSES],
    pub n_cases: u64,
}

impl ConfusionCounts {
    pub fn add_case(&mut self, predicted: LabelSet, gold: LabelSet) {
        for c in ClassId::all() {
            let counts = &mut self.per_class[c.index()];
            match (predicted.contains(c), gold.contains(c)) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
                (false, false) => counts.tn += 1,
            }
        }
        self.n_cases += 1;
    }

    pub fn get(&self, class: ClassId) -> ClassCounts {
        self.per_class[class.index()]
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, rhs: Self) {
        for (a, b) in self.per_class.iter_mut().zip(rhs.per_class) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
            a.tn += b.tn;
        }
        self.n_cases += rhs.n_cases;
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

pub fn confusion(predictions: &[LabelSet], gold: &[LabelSet]) -> Result<ConfusionCounts, EvalError> {
    if predictions.len() != gold.len() {
        return Err(EvalError::LengthMismatch { predictions: predictions.len(), gold: gold.len() });
    }
    let mut counts = ConfusionCounts::default();
    for (p, g) in predictions.iter().zip(gold) {
        counts.add_case(*p, *g);
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassF1 {
    pub f1: f64,
    /// No gold and no predicted positives: F1 is reported as 0.
    pub undefined: bool,
}

/// `2TP / (2TP + FP + FN)`.
pub fn f1_score(c: ClassCounts) -> ClassF1 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        return ClassF1 { f1: 0.0, undefined: true };
    }
    ClassF1 { f1: (2 * c.tp) as f64 / denom as f64, undefined: false }
}

pub fn f1_per_class(counts: &ConfusionCounts) -> BTreeMap<ClassId, ClassF1> {
    ClassId::all().map(|c| (c, f1_score(counts.get(c)))).collect()
}

/// Unweighted mean of per-class F1 over `subset`.
pub fn macro_f1(
    per_class: &BTreeMap<ClassId, ClassF1>,
    subset: &ClassSubset,
    exclude_undefined: bool,
) -> Result<f64, EvalError> {
    if subset.classes.is_empty() {
        return Err(EvalError::EmptySubset(subset.name.clone()));
    }
    let values: Vec<f64> = subset
        .classes
        .iter()
        .map(|c| per_class.get(c).copied().unwrap_or(ClassF1 { f1: 0.0, undefined: true }))
        .filter(|v| !(exclude_undefined && v.undefined))
        .map(|v| v.f1)
        .collect();
    if values.is_empty() {
        return Err(EvalError::AllExcluded(subset.name.clone()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// A named list of classes for macro averaging and table rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSubset {
    pub name: String,
    pub classes: Vec<ClassId>,
}

/// The five abnormalities most often reported, in table order.
pub const FIVE_CLASS: [ClassId; 5] = [
    ClassId::ATELECTASIS,
    ClassId::CARDIOMEGALY,
    ClassId::CONSOLIDATION,
    ClassId::EDEMA,
    ClassId::PLEURAL_EFFUSION,
];

/// All fourteen classes, five-class block first.
pub const TABLE_ORDER: [ClassId; NUM_CLASSES] = [
    ClassId::ATELECTASIS,
    ClassId::CARDIOMEGALY,
    ClassId::CONSOLIDATION,
    ClassId::EDEMA,
    ClassId::PLEURAL_EFFUSION,
    ClassId::PLEURAL_OTHER,
    ClassId::ENLARGED_CARDIOMEDIASTINUM,
    ClassId::FRACTURE,
    ClassId::LUNG_LESION,
    ClassId::LUNG_OPACITY,
    ClassId::PNEUMONIA,
    ClassId::PNEUMOTHORAX,
    ClassId::SUPPORT_DEVICES,
    ClassId::NO_FINDING,
];

impl ClassSubset {
    pub fn five_class() -> Self {
        ClassSubset { name: "five_class".into(), classes: FIVE_CLASS.to_vec() }
    }

    pub fn all() -> Self {
        ClassSubset { name: "all".into(), classes: TABLE_ORDER.to_vec() }
    }

    /// `five_class`, `all`, or a comma-separated list of canonical names.
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        match text.trim() {
            "five_class" => Ok(Self::five_class()),
            "all" => Ok(Self::all()),
            other => {
                let mut classes = Vec::new();
                for name in other.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    let c = ClassId::from_name(name).ok_or_else(|| EvalError::UnknownSubset(text.to_string()))?;
                    if !classes.contains(&c) {
                        classes.push(c);
                    }
                }
                if classes.is_empty() {
                    return Err(EvalError::EmptySubset(text.to_string()));
                }
                Ok(ClassSubset { name: other.to_string(), classes })
            }
        }
    }

    pub fn label(&self) -> String {
        match self.name.as_str() {
            "all" => "all".to_string(),
            _ => format!("{} classes", self.classes.len()),
        }
    }
}

/// How CheXpert-style uncertain (−1) gold labels are mapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertainPolicy {
    #[default]
    ToNegative,
    ToPositive,
}

impl UncertainPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            UncertainPolicy::ToNegative => "to-negative",
            UncertainPolicy::ToPositive => "to-positive",
        }
    }
}

impl std::str::FromStr for UncertainPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "to-negative" => Ok(UncertainPolicy::ToNegative),
            "to-positive" => Ok(UncertainPolicy::ToPositive),
            _ => Err(format!("unknown uncertain-label policy {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub subsets: Vec<ClassSubset>,
    pub exclude_undefined: bool,
    /// Abort on completions without gold; otherwise skip them with a warning.
    pub strict: bool,
    pub uncertain_policy: UncertainPolicy,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            subsets: vec![ClassSubset::five_class(), ClassSubset::all()],
            exclude_undefined: false,
            strict: false,
            uncertain_policy: UncertainPolicy::ToNegative,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub counts: ConfusionCounts,
    pub per_class_f1: BTreeMap<ClassId, ClassF1>,
    /// (subset, macro-F1) in the configured order.
    pub macro_f1: Vec<(ClassSubset, f64)>,
    pub n_cases: u64,
    pub skipped: Vec<String>,
    pub uncertain_policy: UncertainPolicy,
    pub exclude_undefined: bool,
}

impl EvalReport {
    pub fn from_counts(counts: ConfusionCounts, cfg: &EvalConfig) -> Result<Self, EvalError> {
        let per_class_f1 = f1_per_class(&counts);
        let macro_f1 = cfg
            .subsets
            .iter()
            .map(|s| macro_f1(&per_class_f1, s, cfg.exclude_undefined).map(|m| (s.clone(), m)))
            .collect::<Result<_, _>>()?;
        Ok(EvalReport {
            counts,
            per_class_f1,
            macro_f1,
            n_cases: counts.n_cases,
            skipped: Vec::new(),
            uncertain_policy: cfg.uncertain_policy,
            exclude_undefined: cfg.exclude_undefined,
        })
    }

    /// Table rows: the union of the configured subsets in table order, then
    /// one macro row per subset. Values are percentages with one decimal.
    pub fn render_table(&self) -> String {
        let mut rows: Vec<ClassId> = Vec::new();
        for c in TABLE_ORDER {
            if self.macro_f1.iter().any(|(s, _)| s.classes.contains(&c)) {
                rows.push(c);
            }
        }
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Per-class F1 scores % (n={}, uncertain={}, undefined={})",
            self.n_cases,
            self.uncertain_policy.as_str(),
            if self.exclude_undefined { "excluded" } else { "as-zero" }
        );
        let width = 28;
        let _ = writeln!(out, "{:<width$} {:>6}", "Abnormality class", "F1");
        let _ = writeln!(out, "{}", "-".repeat(width + 7));
        let mut any_undefined = false;
        for c in rows {
            let f = self.per_class_f1[&c];
            let cell = if f.undefined {
                any_undefined = true;
                "n/a*".to_string()
            } else {
                percent(f.f1)
            };
            let _ = writeln!(out, "{:<width$} {:>6}", c.name(), cell);
        }
        let _ = writeln!(out, "{}", "-".repeat(width + 7));
        for (subset, value) in &self.macro_f1 {
            let _ = writeln!(out, "{:<width$} {:>6}", format!("Macro-F1 ({})", subset.label()), percent(*value));
        }
        if any_undefined {
            let _ = writeln!(out, "* no gold or predicted positives; F1 counted as 0 in macro rows unless excluded");
        }
        if !self.skipped.is_empty() {
            let _ = writeln!(out, "skipped {} case(s) without gold labels", self.skipped.len());
        }
        out
    }
}

pub fn percent(value: f64) -> String {
    format!("{:.1}", value * 100.0)
}

/// A completion to evaluate: id, full text and (optionally) inline gold.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase<'a> {
    pub id: &'a str,
    pub text: &'a str,
    pub gold: Option<LabelSet>,
}

/// Parses each completion's answer span and scores it against gold labels.
/// Gold from `gold_table` takes precedence over inline gold.
pub fn evaluate_corpus(
    cases: &[EvalCase<'_>],
    gold_table: Option<&HashMap<String, LabelSet>>,
    ontology: &Ontology,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let mut counts = ConfusionCounts::default();
    let mut skipped = Vec::new();
    for case in cases {
        let gold = gold_table.and_then(|t| t.get(case.id).copied()).or(case.gold);
        let Some(gold) = gold else {
            if cfg.strict {
                return Err(EvalError::MissingGold(case.id.to_string()));
            }
            skipped.push(case.id.to_string());
            continue;
        };
        let parsed = parse_completion(case.text, ontology);
        counts.add_case(parsed.predicted, gold);
    }
    let mut report = EvalReport::from_counts(counts, cfg)?;
    report.skipped = skipped;
    Ok(report)
}
