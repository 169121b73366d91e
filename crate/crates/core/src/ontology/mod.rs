//! The 14-class chest X-ray finding ontology.
//!
//! Class identities are fixed at compile time; only the alias lexicon used to
//! map free-text mentions onto classes is data-driven (see [`Ontology`]).

mod lexicon;
mod report;

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use lexicon::{LabelParse, LexiconError, Ontology};
pub use report::{render_structured_report, ReportMeta};

/// Number of classes in the label space.
pub const NUM_CLASSES: usize = 14;

const CANONICAL_NAMES: [&str; NUM_CLASSES] = [
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Enlarged Cardiomediastinum",
    "Fracture",
    "Lung Lesion",
    "Lung Opacity",
    "No Finding",
    "Pleural Effusion",
    "Pleural Other",
    "Pneumonia",
    "Pneumothorax",
    "Support Devices",
];

/// Index of a finding class, `0..14`, in alphabetical canonical-name order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassId(u8);

impl ClassId {
    pub const ATELECTASIS: ClassId = ClassId(0);
    pub const CARDIOMEGALY: ClassId = ClassId(1);
    pub const CONSOLIDATION: ClassId = ClassId(2);
    pub const EDEMA: ClassId = ClassId(3);
    pub const ENLARGED_CARDIOMEDIASTINUM: ClassId = ClassId(4);
    pub const FRACTURE: ClassId = ClassId(5);
    pub const LUNG_LESION: ClassId = ClassId(6);
    pub const LUNG_OPACITY: ClassId = ClassId(7);
    pub const NO_FINDING: ClassId = ClassId(8);
    pub const PLEURAL_EFFUSION: ClassId = ClassId(9);
    pub const PLEURAL_OTHER: ClassId = ClassId(10);
    pub const PNEUMONIA: ClassId = ClassId(11);
    pub const PNEUMOTHORAX: ClassId = ClassId(12);
    pub const SUPPORT_DEVICES: ClassId = ClassId(13);

    pub fn new(index: usize) -> Option<ClassId> {
        (index < NUM_CLASSES).then_some(ClassId(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        CANONICAL_NAMES[self.index()]
    }

    /// `false` for "No Finding" and "Support Devices".
    pub fn is_abnormality(self) -> bool {
        self != ClassId::NO_FINDING && self != ClassId::SUPPORT_DEVICES
    }

    pub fn all() -> impl DoubleEndedIterator<Item = ClassId> + ExactSizeIterator {
        (0..NUM_CLASSES as u8).map(ClassId)
    }

    /// Exact, case-insensitive lookup of a canonical class name.
    pub fn from_name(name: &str) -> Option<ClassId> {
        let name = name.trim();
        CANONICAL_NAMES
            .iter()
            .position(|c| c.eq_ignore_ascii_case(name))
            .map(|i| ClassId(i as u8))
    }
}

impl fmt::Debug for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ClassId({} {:?})", self.0, self.name())
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One entry of the ontology, as exposed to callers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FindingClass {
    pub id: ClassId,
    pub canonical_name: &'static str,
    pub aliases: Vec<String>,
    pub is_abnormality: bool,
}

impl Serialize for ClassId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.0)
    }
}

impl<'de> Deserialize<'de> for ClassId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let i = u8::deserialize(d)?;
        ClassId::new(i as usize).ok_or_else(|| serde::de::Error::custom(format!("class id {i} out of range")))
    }
}

/// A set of finding classes. Iteration and serialization are in ascending id
/// order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LabelSet(u16);

impl LabelSet {
    pub const fn empty() -> Self {
        LabelSet(0)
    }

    pub fn full() -> Self {
        LabelSet((1u16 << NUM_CLASSES) - 1)
    }

    /// Builds a set from the low 14 bits of `bits`; higher bits are ignored.
    pub fn from_bits(bits: u16) -> Self {
        LabelSet(bits & Self::full().0)
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn insert(&mut self, class: ClassId) -> bool {
        let had = self.contains(class);
        self.0 |= 1 << class.0;
        !had
    }

    pub fn remove(&mut self, class: ClassId) -> bool {
        let had = self.contains(class);
        self.0 &= !(1 << class.0);
        had
    }

    pub fn with(mut self, class: ClassId) -> Self {
        self.insert(class);
        self
    }

    pub fn contains(self, class: ClassId) -> bool {
        self.0 & (1 << class.0) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn intersection(self, other: LabelSet) -> LabelSet {
        LabelSet(self.0 & other.0)
    }

    pub fn union(self, other: LabelSet) -> LabelSet {
        LabelSet(self.0 | other.0)
    }

    pub fn iter(self) -> impl DoubleEndedIterator<Item = ClassId> {
        ClassId::all().filter(move |c| self.contains(*c))
    }

    pub fn names(self) -> Vec<&'static str> {
        self.iter().map(ClassId::name).collect()
    }

    /// Resolves canonical names (case-insensitive). Returns the first unknown
    /// name on failure.
    pub fn from_names<I, S>(names: I) -> Result<LabelSet, String>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = LabelSet::empty();
        for name in names {
            let name = name.as_ref();
            let id = ClassId::from_name(name).ok_or_else(|| name.to_string())?;
            set.insert(id);
        }
        Ok(set)
    }

    /// Comma-separated canonical names in ascending id order, the form a
    /// well-behaved model writes inside its answer span.
    pub fn to_answer_string(self) -> String {
        self.names().join(", ")
    }
}

impl FromIterator<ClassId> for LabelSet {
    fn from_iter<T: IntoIterator<Item = ClassId>>(iter: T) -> Self {
        let mut set = LabelSet::empty();
        for c in iter {
            set.insert(c);
        }
        set
    }
}

impl fmt::Debug for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.names()).finish()
    }
}

impl Serialize for LabelSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.names())
    }
}

impl<'de> Deserialize<'de> for LabelSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        LabelSet::from_names(&names)
            .map_err(|n| serde::de::Error::custom(format!("unknown class name {n:?}")))
    }
}

/// Per-class weights `w_a` for the correctness reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightTable([f64; NUM_CLASSES]);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WeightError {
    #[error("weight for {class} is {value}; weights must be finite and non-negative")]
    Invalid { class: &'static str, value: f64 },
    #[error("at least one class weight must be positive")]
    AllZero,
    #[error("unknown class name {0:?} in weight table")]
    UnknownClass(String),
}

impl WeightTable {
    pub fn equal() -> Self {
        WeightTable([1.0; NUM_CLASSES])
    }

    pub fn new(weights: [f64; NUM_CLASSES]) -> Result<Self, WeightError> {
        for c in ClassId::all() {
            let w = weights[c.index()];
            if !w.is_finite() || w < 0.0 {
                return Err(WeightError::Invalid { class: c.name(), value: w });
            }
        }
        if weights.iter().all(|w| *w == 0.0) {
            return Err(WeightError::AllZero);
        }
        Ok(WeightTable(weights))
    }

    /// Starts from equal weights and overrides the named classes.
    pub fn from_overrides<'a, I>(overrides: I) -> Result<Self, WeightError>
    where
        I: IntoIterator<Item = (&'a str, f64)>,
    {
        let mut w = [1.0; NUM_CLASSES];
        for (name, value) in overrides {
            let id = ClassId::from_name(name)
                .ok_or_else(|| WeightError::UnknownClass(name.to_string()))?;
            w[id.index()] = value;
        }
        WeightTable::new(w)
    }

    pub fn get(&self, class: ClassId) -> f64 {
        self.0[class.index()]
    }

    pub fn as_array(&self) -> &[f64; NUM_CLASSES] {
        &self.0
    }

    pub fn is_equal_weighting(&self) -> bool {
        self.0.iter().all(|w| *w == self.0[0])
    }
}

impl Default for WeightTable {
    fn default() -> Self {
        WeightTable::equal()
    }
}

// Serialized as a name → weight map so config files stay readable.
impl Serialize for WeightTable {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(ClassId::all().map(|c| (c.name(), self.get(c))))
    }
}

impl<'de> Deserialize<'de> for WeightTable {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let map = std::collections::BTreeMap::<String, f64>::deserialize(d)?;
        WeightTable::from_overrides(map.iter().map(|(k, v)| (k.as_str(), *v)))
            .map_err(serde::de::Error::custom)
    }
}
