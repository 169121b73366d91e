use std::fmt::Write;

use super::{ClassId, LabelSet};

/// Optional free-text header fields of a structured report.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReportMeta {
    pub indication: Option<String>,
    pub comparison: Option<String>,
    pub technique: Option<String>,
}

struct Region {
    heading: &'static str,
    normal: &'static str,
}

const REGIONS: [Region; 7] = [
    Region { heading: "Medical devices", normal: "None." },
    Region { heading: "Central airways", normal: "Trachea and main bronchi patent." },
    Region {
        heading: "Lungs and pleural space",
        normal: "Lungs clear; no pleural effusion; no pneumothorax.",
    },
    Region { heading: "Mediastinum and hila", normal: "Mediastinum normal; hila normal; no adenopathy." },
    Region { heading: "Heart", normal: "Normal heart size." },
    Region {
        heading: "Upper abdomen and diaphragm",
        normal: "No free subdiaphragmatic air; diaphragm normal.",
    },
    Region { heading: "Bones and soft tissues", normal: "Normal." },
];

/// (region index, findings sentence, impression bullet)
fn canned(class: ClassId) -> (usize, &'static str, &'static str) {
    match class {
        ClassId::ATELECTASIS => (2, "atelectasis", "Atelectasis."),
        ClassId::CARDIOMEGALY => (4, "Enlarged heart.", "Enlarged heart."),
        ClassId::CONSOLIDATION => (2, "consolidation", "Consolidation."),
        ClassId::EDEMA => (2, "pulmonary edema", "Pulmonary edema."),
        ClassId::ENLARGED_CARDIOMEDIASTINUM => {
            (3, "Enlarged cardiomediastinal silhouette.", "Enlarged cardiomediastinum.")
        }
        ClassId::FRACTURE => (6, "Fracture.", "Fracture."),
        ClassId::LUNG_LESION => (2, "focal lung lesion", "Lung lesion."),
        ClassId::LUNG_OPACITY => (2, "parenchymal opacity", "Lung opacity."),
        ClassId::NO_FINDING => (2, "no acute abnormality", "No acute cardiopulmonary abnormality."),
        ClassId::PLEURAL_EFFUSION => (2, "pleural effusion", "Pleural effusion."),
        ClassId::PLEURAL_OTHER => (2, "pleural abnormality", "Pleural abnormality."),
        ClassId::PNEUMONIA => (2, "findings consistent with pneumonia", "Pneumonia."),
        ClassId::PNEUMOTHORAX => (2, "pneumothorax", "Pneumothorax."),
        ClassId::SUPPORT_DEVICES => (0, "Support devices present.", "Support devices in place."),
        _ => unreachable!("all 14 classes are covered"),
    }
}

/// Renders the fixed INDICATION / COMPARISON / TECHNIQUE / FINDINGS /
/// IMPRESSION skeleton for a finding set. Output depends only on the inputs.
pub fn render_structured_report(findings: LabelSet, meta: &ReportMeta) -> String {
    let mut out = String::new();
    let section = |out: &mut String, title: &str, body: Option<&str>, fallback: &str| {
        let body = body.map(str::trim).filter(|b| !b.is_empty()).unwrap_or(fallback);
        let _ = writeln!(out, "{title}:\n{body}\n");
    };
    section(&mut out, "INDICATION", meta.indication.as_deref(), "Not provided.");
    section(&mut out, "COMPARISON", meta.comparison.as_deref(), "None.");
    section(&mut out, "TECHNIQUE", meta.technique.as_deref(), "Not provided.");

    let mut per_region: Vec<Vec<&str>> = vec![Vec::new(); REGIONS.len()];
    for class in findings.iter() {
        let (region, sentence, _) = canned(class);
        per_region[region].push(sentence);
    }
    out.push_str("FINDINGS:\n");
    for (region, sentences) in REGIONS.iter().zip(&per_region) {
        let body = if sentences.is_empty() {
            region.normal.to_string()
        } else if sentences.len() == 1 && sentences[0].ends_with('.') {
            sentences[0].to_string()
        } else {
            let mut joined = sentences.join("; ");
            if let Some(first) = joined.get_mut(0..1) {
                first.make_ascii_uppercase();
            }
            if !joined.ends_with('.') {
                joined.push('.');
            }
            joined
        };
        let _ = writeln!(out, "{}: {}", region.heading, body);
    }

    out.push_str("\nIMPRESSION:\n");
    if findings.is_empty() {
        out.push_str("None.\n");
    }
    for class in findings.iter() {
        let _ = writeln!(out, "- {}", canned(class).2);
    }
    out
}
