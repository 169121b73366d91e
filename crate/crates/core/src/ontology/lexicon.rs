use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use super::{ClassId, FindingClass, LabelSet, NUM_CLASSES};

const BUILTIN_LEXICON: &str = include_str!("../../data/lexicon.tsv");

/// Segment prefixes that negate a mention. Checked longest first.
const NEGATION_CUES: [&str; 3] = ["no evidence of ", "without ", "no "];

#[derive(Debug, thiserror::Error)]
pub enum LexiconError {
    #[error("lexicon line {line}: expected `canonical_name<TAB>alias`")]
    MalformedRecord { line: usize },
    #[error("lexicon line {line}: unknown canonical class {name:?}")]
    UnknownClass { line: usize, name: String },
    #[error("lexicon line {line}: alias {alias:?} must be non-empty, lowercase and whitespace-normalized")]
    BadAlias { line: usize, alias: String },
    #[error("lexicon line {line}: alias {alias:?} already maps to {existing}")]
    Conflict { line: usize, alias: String, existing: &'static str },
    #[error("reading lexicon {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// The label space together with the alias lexicon that maps mentions to
/// classes. Immutable once built.
#[derive(Debug, Clone)]
pub struct Ontology {
    aliases: Vec<Vec<String>>,
    index: HashMap<String, ClassId>,
    // (alias, class), sorted by descending alias length for substring search.
    by_length: Vec<(String, ClassId)>,
    version: String,
}

/// Outcome of parsing an answer span into labels.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelParse {
    pub labels: LabelSet,
    /// Segments that matched no class.
    pub unrecognized: Vec<String>,
    /// Segments dropped because of a negation cue.
    pub negated: Vec<String>,
    pub notes: Vec<String>,
}

impl LabelParse {
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        out.extend(self.unrecognized.iter().map(|s| format!("unrecognized: {s}")));
        out.extend(self.negated.iter().map(|s| format!("negated: {s}")));
        out.extend(self.notes.iter().cloned());
        out
    }
}

impl Ontology {
    /// The ontology with the lexicon shipped in the crate.
    pub fn builtin() -> &'static Ontology {
        Self::shared_builtin()
    }

    /// Shared handle to [`Ontology::builtin`].
    pub fn shared_builtin() -> &'static Arc<Ontology> {
        static BUILTIN: OnceLock<Arc<Ontology>> = OnceLock::new();
        BUILTIN.get_or_init(|| {
            Arc::new(Ontology::from_lexicon_str(BUILTIN_LEXICON).expect("built-in lexicon is valid"))
        })
    }

    pub fn builtin_lexicon_text() -> &'static str {
        BUILTIN_LEXICON
    }

    pub fn from_lexicon_file(path: impl AsRef<Path>) -> Result<Ontology, LexiconError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ontology::from_lexicon_str(&text)
    }

    pub fn from_lexicon_str(text: &str) -> Result<Ontology, LexiconError> {
        let mut aliases: Vec<Vec<String>> = vec![Vec::new(); NUM_CLASSES];
        let mut index = HashMap::new();
        for c in ClassId::all() {
            index.insert(normalize(c.name()), c);
        }
        let mut version = String::from("unversioned");

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if let Some(rest) = raw.strip_prefix("#!") {
                if let Some(("version", v)) = rest.trim().split_once('\t') {
                    version = v.trim().to_string();
                }
                continue;
            }
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let (name, alias) = raw.split_once('\t').ok_or(LexiconError::MalformedRecord { line })?;
            if alias.contains('\t') {
                return Err(LexiconError::MalformedRecord { line });
            }
            let class = ClassId::all()
                .find(|c| c.name() == name)
                .ok_or_else(|| LexiconError::UnknownClass { line, name: name.to_string() })?;
            if alias.is_empty() || normalize(alias) != alias {
                return Err(LexiconError::BadAlias { line, alias: alias.to_string() });
            }
            match index.get(alias) {
                Some(existing) if *existing != class => {
                    return Err(LexiconError::Conflict {
                        line,
                        alias: alias.to_string(),
                        existing: existing.name(),
                    })
                }
                Some(_) => continue,
                None => {
                    index.insert(alias.to_string(), class);
                    aliases[class.index()].push(alias.to_string());
                }
            }
        }

        let mut by_length: Vec<(String, ClassId)> =
            index.iter().map(|(a, c)| (a.clone(), *c)).collect();
        by_length.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)).then(a.0.cmp(&b.0)));

        Ok(Ontology { aliases, index, by_length, version })
    }

    pub fn lexicon_version(&self) -> &str {
        &self.version
    }

    pub fn classes(&self) -> Vec<FindingClass> {
        ClassId::all()
            .map(|id| FindingClass {
                id,
                canonical_name: id.name(),
                aliases: self.aliases[id.index()].clone(),
                is_abnormality: id.is_abnormality(),
            })
            .collect()
    }

    /// Aliases from the lexicon, excluding the canonical name itself.
    pub fn aliases(&self, class: ClassId) -> &[String] {
        &self.aliases[class.index()]
    }

    /// Maps a mention to a class. An exact (normalized) alias match wins;
    /// otherwise the longest alias occurring as a whole-word substring is used,
    /// ties broken by earliest position.
    pub fn canonicalize(&self, mention: &str) -> Option<ClassId> {
        let norm = normalize(mention);
        if norm.is_empty() {
            return None;
        }
        if let Some(c) = self.index.get(&norm) {
            return Some(*c);
        }
        let mut best: Option<(usize, usize, ClassId)> = None;
        for (alias, class) in &self.by_length {
            if let Some((len, _, _)) = best {
                if alias.len() < len {
                    break;
                }
            }
            if let Some(pos) = find_word(&norm, alias) {
                let better = match best {
                    None => true,
                    Some((len, p, _)) => alias.len() > len || pos < p,
                };
                if better {
                    best = Some((alias.len(), pos, *class));
                }
            }
        }
        best.map(|(_, _, c)| c)
    }

    /// Parses the contents of an answer span. Segments are separated by
    /// commas, semicolons and newlines.
    pub fn parse_label_list(&self, text: &str) -> LabelParse {
        let mut out = LabelParse::default();
        for segment in text.split([',', ';', '\n']) {
            let norm = normalize(segment);
            if norm.is_empty() {
                continue;
            }
            let class = self.canonicalize(&norm);
            if class == Some(ClassId::NO_FINDING) {
                out.labels.insert(ClassId::NO_FINDING);
                continue;
            }
            if NEGATION_CUES.iter().any(|cue| norm.starts_with(cue)) {
                out.negated.push(segment.trim().to_string());
                continue;
            }
            match class {
                Some(c) => {
                    out.labels.insert(c);
                }
                None => out.unrecognized.push(segment.trim().to_string()),
            }
        }
        if out.labels.contains(ClassId::NO_FINDING) && out.labels.len() > 1 {
            out.notes.push("\"No Finding\" co-occurs with other findings".to_string());
        }
        out
    }
}

/// Lowercases, maps `_` to space, collapses whitespace and strips list
/// bullets and trailing punctuation.
fn normalize(mention: &str) -> String {
    let lowered = mention.to_lowercase().replace('_', " ");
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_start_matches(['-', '*', '•', ' '])
        .trim_end_matches(['.', '!', '?', ':', ' '])
        .trim_matches(['"', '\'', ' '])
        .to_string()
}

fn find_word(haystack: &str, needle: &str) -> Option<usize> {
    haystack.match_indices(needle).map(|(i, _)| i).find(|&i| {
        let before = haystack[..i].chars().next_back();
        let after = haystack[i + needle.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}
