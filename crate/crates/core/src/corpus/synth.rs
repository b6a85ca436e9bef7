//! Grammar-based generator of report/diagnosis pairs.
//!
//! Each modality has a small findings grammar with a few decisive slots
//! (gland loss, hemorrhage level, retinal layer state, ...) and several
//! distractor slots. The diagnosis is a deterministic function of the
//! decisive slots, so the mapping is learnable.

use std::collections::{BTreeSet, HashSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Modality, ReportRecord};
use crate::tokenizer;

const EYES: [&str; 2] = ["right", "left"];

const OSA_ORIFICES: [&str; 3] = ["clear", "obstructed", "partially capped"];
const OSA_LIPID: [&str; 4] = ["thin", "normal", "thick", "irregular"];
const OSA_GRADES: [&str; 4] = [
    "normal meibomian gland morphology",
    "mild meibomian gland dysfunction",
    "moderate meibomian gland dysfunction",
    "severe meibomian gland dysfunction",
];

const CFP_HEMORRHAGE: [&str; 4] = [
    "No retinal hemorrhage is seen.",
    "Scattered dot hemorrhages in the posterior pole.",
    "Multiple blot hemorrhages in two quadrants.",
    "Extensive hemorrhages in four quadrants with venous beading.",
];
const CFP_EXUDATES: [&str; 3] = ["No exudates.", "Few hard exudates.", "Cotton wool spots present."];
const CFP_REFLEX: [&str; 2] = ["present", "absent"];
const CFP_QUALITY: [&str; 3] = ["good", "adequate", "fair"];
const CFP_PERIPHERY: [&str; 2] = ["unremarkable", "not fully visualized"];
const CFP_GRADES: [&str; 5] = [
    "no diabetic retinopathy",
    "mild nonproliferative diabetic retinopathy",
    "moderate nonproliferative diabetic retinopathy",
    "severe nonproliferative diabetic retinopathy",
    "proliferative diabetic retinopathy",
];

const OCT_LAYERS: [&str; 4] = [
    "Retinal layers are intact",
    "Intraretinal cystoid spaces are present",
    "Subretinal fluid is present beneath the fovea",
    "The neurosensory retina is separated from the pigment epithelium",
];
const OCT_RPE: [&str; 2] = ["RPE line is continuous", "Drusen deposits at the RPE level"];
const OCT_INTERFACE: [&str; 2] = ["smooth", "regular"];
const OCT_PATTERN: [&str; 3] = ["macular cube", "radial lines", "raster"];
const OCT_LABELS: [&str; 5] = [
    "normal macular structure",
    "macular thickening",
    "cystoid macular edema",
    "central serous chorioretinopathy",
    "retinal detachment",
];

const CONNECTIVES: [&str; 8] = [
    "of the", "right", "left", "eye", ",", "with orifice obstruction", "suspected glaucoma", "with drusen",
];

/// Every word that can occur in a generated diagnosis.
pub fn diagnosis_vocabulary() -> BTreeSet<String> {
    OSA_GRADES
        .iter()
        .chain(&CFP_GRADES)
        .chain(&OCT_LABELS)
        .chain(&CONNECTIVES)
        .flat_map(|p| tokenizer::segment(p))
        .map(str::to_string)
        .collect()
}

fn osa(rng: &mut ChaCha8Rng) -> (String, String) {
    let eye = *EYES.choose(rng).unwrap();
    let loss = 5 * rng.random_range(0..=18u32);
    let orifice = *OSA_ORIFICES.choose(rng).unwrap();
    let tmh = rng.random_range(1..=4u32);
    let lipid = *OSA_LIPID.choose(rng).unwrap();
    let iop = rng.random_range(10..=24u32);
    let findings = format!(
        "Meibography of the {eye} eye shows meibomian gland loss of {loss}%. Gland orifices {orifice}. \
         Tear meniscus height 0.{tmh} mm, lipid layer {lipid}. Intraocular pressure {iop} mmHg."
    );
    let grade = match loss {
        0..=5 => 0,
        10..=30 => 1,
        35..=55 => 2,
        _ => 3,
    };
    let mut diagnosis = format!("{} of the {eye} eye", OSA_GRADES[grade]);
    if orifice == "obstructed" {
        diagnosis.push_str(", with orifice obstruction");
    }
    (findings, diagnosis)
}

fn cfp(rng: &mut ChaCha8Rng) -> (String, String) {
    let eye = *EYES.choose(rng).unwrap();
    let cdr = rng.random_range(3..=8u32);
    let hem = rng.random_range(0..CFP_HEMORRHAGE.len());
    let neo = rng.random_bool(0.2);
    let exu = *CFP_EXUDATES.choose(rng).unwrap();
    let reflex = *CFP_REFLEX.choose(rng).unwrap();
    let quality = *CFP_QUALITY.choose(rng).unwrap();
    let periphery = *CFP_PERIPHERY.choose(rng).unwrap();
    let mut findings = format!(
        "Color fundus photograph of the {eye} eye, image quality {quality}: optic disc margin clear, cup-to-disc ratio 0.{cdr}. {}",
        CFP_HEMORRHAGE[hem]
    );
    if neo {
        findings.push_str(" Neovascularization at the disc.");
    }
    findings.push_str(&format!(" {exu} Foveal reflex {reflex}, peripheral retina {periphery}."));
    let grade = if neo { 4 } else { hem };
    let mut diagnosis = format!("{} of the {eye} eye", CFP_GRADES[grade]);
    if cdr >= 7 {
        diagnosis.push_str(", suspected glaucoma");
    }
    (findings, diagnosis)
}

fn oct(rng: &mut ChaCha8Rng) -> (String, String) {
    let eye = *EYES.choose(rng).unwrap();
    let cmt = 220 + 20 * rng.random_range(0..=12u32);
    let layer = rng.random_range(0..OCT_LAYERS.len());
    let drusen = rng.random_bool(0.3);
    let iface = *OCT_INTERFACE.choose(rng).unwrap();
    let pattern = *OCT_PATTERN.choose(rng).unwrap();
    let signal = rng.random_range(6..=10u32);
    let findings = format!(
        "OCT of the {eye} eye ({pattern} scan, signal strength {signal}/10): central macular thickness {cmt} um. \
         {}. {}. Vitreoretinal interface {iface}.",
        OCT_LAYERS[layer],
        OCT_RPE[drusen as usize]
    );
    let label = match layer {
        0 if cmt <= 300 => 0,
        0 => 1,
        l => l + 1,
    };
    let mut diagnosis = format!("{} of the {eye} eye", OCT_LABELS[label]);
    if drusen {
        diagnosis.push_str(", with drusen");
    }
    (findings, diagnosis)
}

fn generate(modality: Modality, rng: &mut ChaCha8Rng) -> (String, String) {
    match modality {
        Modality::Osa => osa(rng),
        Modality::Cfp => cfp(rng),
        Modality::Oct => oct(rng),
    }
}

/// `n_per_modality` records for each of the three modalities.
pub fn synthesize(n_per_modality: usize, seed: u64) -> Vec<ReportRecord> {
    let counts: Vec<_> = Modality::ALL.iter().map(|&m| (m, n_per_modality)).collect();
    synthesize_counts(&counts, seed)
}

/// Records with explicit per-modality counts. Each modality draws from its
/// own seeded stream, so changing one count leaves the others unchanged.
/// Findings are unique within a modality unless the grammar runs out of
/// combinations.
pub fn synthesize_counts(counts: &[(Modality, usize)], seed: u64) -> Vec<ReportRecord> {
    let mut out = Vec::new();
    for &(modality, n) in counts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(modality as u64 + 1)));
        let mut seen = HashSet::new();
        let mut i = 0;
        let mut attempts = 0usize;
        while i < n {
            let (findings, diagnosis) = generate(modality, &mut rng);
            attempts += 1;
            if !seen.insert(findings.clone()) && attempts < 50 * n.max(1) {
                continue;
            }
            out.push(ReportRecord {
                id: format!("{}-{:05}", modality.as_str(), i),
                modality,
                findings,
                diagnosis,
                flags: BTreeSet::new(),
            });
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_seed() {
        assert_eq!(synthesize(1, 42), synthesize(1, 42));
        assert_ne!(synthesize(3, 1), synthesize(3, 2));
    }

    #[test]
    fn counts_per_modality() {
        let recs = synthesize(100, 7);
        assert_eq!(recs.len(), 300);
        let c = super::super::modality_counts(&recs);
        assert!(Modality::ALL.iter().all(|m| c[m] == 100));
    }

    #[test]
    fn diagnosis_words_come_from_closed_set() {
        let vocab = diagnosis_vocabulary();
        for r in synthesize(400, 11) {
            for w in tokenizer::segment(&r.diagnosis) {
                assert!(vocab.contains(w), "{w:?} in {:?}", r.diagnosis);
            }
        }
    }

    #[test]
    fn diagnosis_is_a_function_of_findings() {
        let mut map = std::collections::HashMap::new();
        for r in synthesize(500, 5) {
            let prev = map.insert(r.findings.clone(), r.diagnosis.clone());
            assert!(prev.is_none_or(|d| d == r.diagnosis));
        }
    }

    #[test]
    fn findings_use_canonical_spacing() {
        for r in synthesize(30, 2) {
            assert_eq!(tokenizer::normalize(&r.findings), r.findings);
            assert_eq!(tokenizer::normalize(&r.diagnosis), r.diagnosis);
        }
    }
}
