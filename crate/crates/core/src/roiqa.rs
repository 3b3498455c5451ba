//! Region-of-interest QA generation.
//!
//! Every annotated region can yield four kinds of items:
//!
//! | kind            | asks for                                   | answer          | image        |
//! |-----------------|--------------------------------------------|-----------------|--------------|
//! | localization    | the box of a named region                  | `[x1, y1, x2, y2]` | base      |
//! | selection       | which of four colored boxes is the region  | option letter   | 4 boxes drawn |
//! | desc_coords     | a description of a box given as coordinates | label          | box drawn if α ≠ 0 |
//! | desc_highlight  | a description of the highlighted box       | label           | box drawn    |
//!
//! All randomness is keyed by `(seed, qa_id)`, so items can be generated in
//! any order or in parallel without changing a byte of output.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::compositor::{
    composite_item, write_composite, write_sidecar, AlphaPolicy, BoxStyle, CompositeError, CompositedImage,
    OverlayBox, PaletteColor, SidecarRecord,
};
use crate::corpus::{
    save_dataset, BBox, CorpusError, Dataset, ImageRecord, Meta, Provenance, QAPair, QType, RegionAnnotation,
    META_ALPHA_USED, META_ANSWER_LETTER, META_OPTIONS, META_OPTION_BOXES, OPTION_LETTERS,
};
use crate::metrics::iou;
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum RoiError {
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("invalid template: {0}")]
    Template(String),
    #[error(transparent)]
    Composite(#[from] CompositeError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiType {
    Localization,
    Selection,
    DescCoords,
    DescHighlight,
}

impl RoiType {
    pub const ALL: [RoiType; 4] = [
        RoiType::Localization,
        RoiType::Selection,
        RoiType::DescCoords,
        RoiType::DescHighlight,
    ];

    pub fn qtype(self) -> QType {
        match self {
            RoiType::Localization => QType::Localization,
            RoiType::Selection => QType::Multichoice,
            RoiType::DescCoords | RoiType::DescHighlight => QType::Open,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RoiType::Localization => "localization",
            RoiType::Selection => "selection",
            RoiType::DescCoords => "desc_coords",
            RoiType::DescHighlight => "desc_highlight",
        }
    }

    fn short(self) -> &'static str {
        match self {
            RoiType::Localization => "loc",
            RoiType::Selection => "sel",
            RoiType::DescCoords => "dco",
            RoiType::DescHighlight => "dhl",
        }
    }

    pub fn parse(s: &str) -> Option<RoiType> {
        Self::ALL.into_iter().find(|t| t.as_str() == s.trim())
    }
}

impl fmt::Display for RoiType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub enabled_types: BTreeSet<RoiType>,
    /// Max items per image for each type; 0 or absent means unlimited.
    pub per_type_quota: BTreeMap<RoiType, usize>,
    pub seed: u64,
    pub alpha_policy: AlphaPolicy,
    pub distractor_min_count: usize,
    pub distractor_max_iou: f64,
    /// Put coordinates in the text of description prompts. Without it the
    /// coordinate-description type has nothing to ask and is not generated.
    pub bbox_in_prompt: bool,
    pub outline_thickness: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            enabled_types: RoiType::ALL.into_iter().collect(),
            per_type_quota: BTreeMap::new(),
            seed: 0,
            alpha_policy: AlphaPolicy::DYNAMIC_DEFAULT,
            distractor_min_count: 3,
            distractor_max_iou: 0.3,
            bbox_in_prompt: true,
            outline_thickness: 3,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), RoiError> {
        if !(self.distractor_max_iou > 0.0 && self.distractor_max_iou < 1.0) {
            return Err(RoiError::Config(format!(
                "distractor_max_iou must lie in (0, 1), got {}",
                self.distractor_max_iou
            )));
        }
        if self.distractor_min_count != 3 {
            return Err(RoiError::Config("selection items need exactly 3 distractors".into()));
        }
        if self.outline_thickness == 0 {
            return Err(RoiError::Config("outline thickness must be at least 1".into()));
        }
        if let AlphaPolicy::Dynamic { lo, hi } = self.alpha_policy {
            if lo > hi {
                return Err(RoiError::Config(format!("empty dynamic alpha range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    fn quota(&self, t: RoiType) -> usize {
        self.per_type_quota.get(&t).copied().unwrap_or(0)
    }
}

// ---------------------------------------------------------------------------
// Templates

const PLACEHOLDERS: [&str; 6] = ["label", "bbox", "c1", "c2", "c3", "c4"];

/// Question/answer text with `{label}`, `{bbox}` and `{c1}`..`{c4}` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QATemplate {
    pub qtype: QType,
    pub question_pattern: &'static str,
    pub answer_pattern: &'static str,
}

pub const LOCALIZATION_TEMPLATE: QATemplate = QATemplate {
    qtype: QType::Localization,
    question_pattern: "Please provide the bounding box coordinate of the region this sentence describes: {label}",
    answer_pattern: "{bbox}",
};

pub const SELECTION_TEMPLATE: QATemplate = QATemplate {
    qtype: QType::Multichoice,
    question_pattern: "Select the bounding box (bbox) describes {label}. A. {c1} B. {c2} C. {c3} D. {c4}",
    answer_pattern: "{answer}",
};

pub const DESC_COORDS_TEMPLATE: QATemplate = QATemplate {
    qtype: QType::Open,
    question_pattern: "Please provide a short description for this region: {bbox}",
    answer_pattern: "{label}",
};

pub const DESC_HIGHLIGHT_TEMPLATE: QATemplate = QATemplate {
    qtype: QType::Open,
    question_pattern: "Please provide a short description inside the bounding box",
    answer_pattern: "{label}",
};

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z0-9_]*)\}").unwrap())
}

impl QATemplate {
    pub fn template_for(t: RoiType) -> &'static QATemplate {
        match t {
            RoiType::Localization => &LOCALIZATION_TEMPLATE,
            RoiType::Selection => &SELECTION_TEMPLATE,
            RoiType::DescCoords => &DESC_COORDS_TEMPLATE,
            RoiType::DescHighlight => &DESC_HIGHLIGHT_TEMPLATE,
        }
    }

    /// Checks that the question uses only declared placeholders. Selection
    /// answers are a letter chosen at generation time, so `{answer}` is
    /// allowed in answer patterns.
    pub fn validate(&self) -> Result<(), RoiError> {
        for (pattern, extra) in [(self.question_pattern, None), (self.answer_pattern, Some("answer"))] {
            for cap in placeholder_re().captures_iter(pattern) {
                let name = &cap[1];
                if !PLACEHOLDERS.contains(&name) && Some(name) != extra {
                    return Err(RoiError::Template(format!("undeclared placeholder {{{name}}} in {pattern:?}")));
                }
            }
        }
        Ok(())
    }

    /// Substitutes every placeholder present in `vars`.
    pub fn fill(pattern: &str, vars: &BTreeMap<&str, String>) -> String {
        placeholder_re()
            .replace_all(pattern, |c: &regex::Captures<'_>| {
                vars.get(&c[1]).cloned().unwrap_or_else(|| c[0].to_string())
            })
            .into_owned()
    }

    /// Regex that matches exactly the strings this question pattern can
    /// produce, with each placeholder as a lazy wildcard.
    pub fn question_regex(&self) -> Regex {
        let mut re = String::from("^");
        let mut last = 0;
        for m in placeholder_re().find_iter(self.question_pattern) {
            re.push_str(&regex::escape(&self.question_pattern[last..m.start()]));
            re.push_str("(.+?)");
            last = m.end();
        }
        re.push_str(&regex::escape(&self.question_pattern[last..]));
        re.push('$');
        Regex::new(&re).expect("escaped template is a valid regex")
    }
}

fn vars(pairs: &[(&'static str, String)]) -> BTreeMap<&'static str, String> {
    pairs.iter().cloned().collect()
}

// ---------------------------------------------------------------------------
// Item generators

/// `"{image_id}:{kind}:{region_id}"`
pub fn item_id(image_id: &str, t: RoiType, region_id: &str) -> String {
    format!("{image_id}:{}:{region_id}", t.short())
}

fn base_pair(img: &ImageRecord, region: &RegionAnnotation, t: RoiType, question: String, answer: String) -> QAPair {
    let mut qa = QAPair::new(item_id(&img.image_id, t, &region.region_id), &img.image_id, t.qtype(), question, answer);
    qa.provenance = Provenance::Reconstructed;
    qa.meta.insert("roi_type".into(), json!(t.as_str()));
    qa.meta.insert("region_id".into(), json!(region.region_id));
    qa
}

fn attach_composite(qa: &mut QAPair, c: &CompositedImage) {
    qa.composite_ref = Some(c.composite_id.clone());
    qa.meta.insert(META_ALPHA_USED.into(), json!(c.alpha_used));
}

fn highlight(
    img: &ImageRecord,
    bbox: BBox,
    cfg: &GenerationConfig,
    qa_id: &str,
) -> Result<Option<CompositedImage>, CompositeError> {
    if cfg.alpha_policy.is_zero() {
        return Ok(None);
    }
    let boxes = vec![OverlayBox {
        bbox,
        color: PaletteColor::Red.into(),
        style: BoxStyle::outline_fitting(cfg.outline_thickness, &bbox),
    }];
    composite_item(img, boxes, &cfg.alpha_policy, cfg.seed, qa_id).map(Some)
}

/// Asks for the coordinates of a named region. No image overlay.
pub fn gen_localization(img: &ImageRecord, region: &RegionAnnotation) -> QAPair {
    let v = vars(&[("label", region.label.clone()), ("bbox", region.bbox.to_string())]);
    let t = &LOCALIZATION_TEMPLATE;
    base_pair(
        img,
        region,
        RoiType::Localization,
        QATemplate::fill(t.question_pattern, &v),
        QATemplate::fill(t.answer_pattern, &v),
    )
}

/// Describes a region given by its coordinates. Returns `None` when
/// `bbox_in_prompt` is off. The region is also outlined in the image unless
/// the α policy is constantly zero.
pub fn gen_desc_coords(
    img: &ImageRecord,
    region: &RegionAnnotation,
    cfg: &GenerationConfig,
) -> Result<Option<(QAPair, Option<CompositedImage>)>, RoiError> {
    if !cfg.bbox_in_prompt {
        return Ok(None);
    }
    let v = vars(&[("label", region.label.clone()), ("bbox", region.bbox.to_string())]);
    let t = &DESC_COORDS_TEMPLATE;
    let mut qa = base_pair(
        img,
        region,
        RoiType::DescCoords,
        QATemplate::fill(t.question_pattern, &v),
        QATemplate::fill(t.answer_pattern, &v),
    );
    let composite = highlight(img, region.bbox, cfg, &qa.qa_id)?;
    if let Some(c) = &composite {
        attach_composite(&mut qa, c);
    }
    Ok(Some((qa, composite)))
}

/// Describes the outlined region; no coordinates in the text.
pub fn gen_desc_highlight(
    img: &ImageRecord,
    region: &RegionAnnotation,
    cfg: &GenerationConfig,
) -> Result<(QAPair, Option<CompositedImage>), RoiError> {
    let v = vars(&[("label", region.label.clone())]);
    let t = &DESC_HIGHLIGHT_TEMPLATE;
    let mut qa = base_pair(
        img,
        region,
        RoiType::DescHighlight,
        QATemplate::fill(t.question_pattern, &v),
        QATemplate::fill(t.answer_pattern, &v),
    );
    let composite = highlight(img, region.bbox, cfg, &qa.qa_id)?;
    if let Some(c) = &composite {
        attach_composite(&mut qa, c);
    }
    Ok((qa, composite))
}

/// Why an item was not generated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub qa_id: String,
    pub reason: String,
}

const JITTER_ATTEMPTS: usize = 64;

/// Three boxes that overlap `correct` by less than `max_iou`. Annotated
/// regions with a different label come first; the rest are the correct box
/// translated by 0.5–1.5 of its size on each axis and shifted back inside
/// the image.
pub fn pick_distractors(
    img: &ImageRecord,
    correct: &RegionAnnotation,
    all_regions: &[RegionAnnotation],
    max_iou: f64,
    rng: &mut SplitMix64,
) -> Option<Vec<BBox>> {
    let ok = |b: &BBox, chosen: &[BBox]| {
        iou(b, &correct.bbox).is_ok_and(|v| v < max_iou) && chosen.iter().all(|c| c != b)
    };
    let mut real: Vec<&RegionAnnotation> = all_regions
        .iter()
        .filter(|r| r.region_id != correct.region_id && !r.label.trim().eq_ignore_ascii_case(correct.label.trim()))
        .collect();
    rng.shuffle(&mut real);
    let mut chosen: Vec<BBox> = Vec::with_capacity(3);
    for r in real {
        if chosen.len() == 3 {
            break;
        }
        if ok(&r.bbox, &chosen) {
            chosen.push(r.bbox);
        }
    }
    let (w, h) = (correct.bbox.width(), correct.bbox.height());
    let (iw, ih) = (i64::from(img.width), i64::from(img.height));
    while chosen.len() < 3 {
        let mut placed = false;
        for _ in 0..JITTER_ATTEMPTS {
            let sx = if rng.below(2) == 0 { -1.0 } else { 1.0 };
            let sy = if rng.below(2) == 0 { -1.0 } else { 1.0 };
            let dx = (sx * rng.uniform(0.5, 1.5) * w as f64).round() as i64;
            let dy = (sy * rng.uniform(0.5, 1.5) * h as f64).round() as i64;
            let x1 = (correct.bbox.x1 + dx).clamp(0, iw - w);
            let y1 = (correct.bbox.y1 + dy).clamp(0, ih - h);
            let cand = BBox::new(x1, y1, x1 + w, y1 + h);
            if ok(&cand, &chosen) {
                chosen.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(chosen)
}

/// Four outlined boxes in the palette colors; the model picks the letter of
/// the one showing `correct`. Option colors and box positions are both
/// shuffled per item.
pub fn gen_selection(
    img: &ImageRecord,
    correct: &RegionAnnotation,
    all_regions: &[RegionAnnotation],
    cfg: &GenerationConfig,
) -> Result<Result<(QAPair, Option<CompositedImage>), SkippedItem>, RoiError> {
    let qa_id = item_id(&img.image_id, RoiType::Selection, &correct.region_id);
    let mut rng = SplitMix64::keyed(cfg.seed, &format!("selection:{qa_id}"));
    let Some(distractors) = pick_distractors(img, correct, all_regions, cfg.distractor_max_iou, &mut rng) else {
        log::warn!("{qa_id}: could not place 3 distractors, skipping");
        return Ok(Err(SkippedItem {
            qa_id,
            reason: format!("could not place 3 distractors with IoU < {}", cfg.distractor_max_iou),
        }));
    };
    let mut colors = PaletteColor::ALL;
    rng.shuffle(&mut colors);
    // Slot 0 holds the correct box before shuffling.
    let mut slots: Vec<(bool, BBox)> = std::iter::once((true, correct.bbox))
        .chain(distractors.into_iter().map(|b| (false, b)))
        .collect();
    rng.shuffle(&mut slots);
    let answer_idx = slots.iter().position(|(c, _)| *c).expect("correct box is present");
    let answer = OPTION_LETTERS[answer_idx].to_string();

    let v = vars(&[
        ("label", correct.label.clone()),
        ("c1", colors[0].name().into()),
        ("c2", colors[1].name().into()),
        ("c3", colors[2].name().into()),
        ("c4", colors[3].name().into()),
        ("answer", answer.clone()),
    ]);
    let t = &SELECTION_TEMPLATE;
    let mut qa = base_pair(
        img,
        correct,
        RoiType::Selection,
        QATemplate::fill(t.question_pattern, &v),
        QATemplate::fill(t.answer_pattern, &v),
    );
    let mut options = serde_json::Map::new();
    let mut option_boxes = serde_json::Map::new();
    for (i, letter) in OPTION_LETTERS.iter().enumerate() {
        options.insert(letter.to_string(), json!(colors[i].name()));
        option_boxes.insert(letter.to_string(), json!(slots[i].1));
    }
    qa.meta.insert(META_ANSWER_LETTER.into(), json!(answer));
    qa.meta.insert(META_OPTIONS.into(), Value::Object(options));
    qa.meta.insert(META_OPTION_BOXES.into(), Value::Object(option_boxes));

    let composite = if cfg.alpha_policy.is_zero() {
        None
    } else {
        let boxes = slots
            .iter()
            .zip(colors)
            .map(|((_, bbox), color)| OverlayBox {
                bbox: *bbox,
                color: color.into(),
                style: BoxStyle::outline_fitting(cfg.outline_thickness, bbox),
            })
            .collect();
        let c = composite_item(img, boxes, &cfg.alpha_policy, cfg.seed, &qa.qa_id)?;
        attach_composite(&mut qa, &c);
        Some(c)
    };
    Ok(Ok((qa, composite)))
}

// ---------------------------------------------------------------------------
// Whole-dataset reconstruction

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub per_type_counts: BTreeMap<RoiType, usize>,
    pub original_count: usize,
    pub skipped: Vec<SkippedItem>,
    pub seed: u64,
    pub cfg: GenerationConfig,
}

impl GenerationReport {
    pub fn generated(&self) -> usize {
        self.per_type_counts.values().sum()
    }
}

/// Output of [`reconstruct_dataset`], still in memory.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub dataset: Dataset,
    pub report: GenerationReport,
    /// Composites keyed by qa_id.
    pub composites: BTreeMap<String, CompositedImage>,
}

struct ImageOutput {
    qa: Vec<QAPair>,
    composites: Vec<CompositedImage>,
    skipped: Vec<SkippedItem>,
}

fn chosen_regions<'a>(
    image_id: &str,
    regions: &'a [RegionAnnotation],
    t: RoiType,
    cfg: &GenerationConfig,
) -> Vec<&'a RegionAnnotation> {
    let mut picked: Vec<&RegionAnnotation> = regions.iter().collect();
    let q = cfg.quota(t);
    if q > 0 && q < picked.len() {
        SplitMix64::keyed(cfg.seed, &format!("pick:{image_id}:{t}")).shuffle(&mut picked);
        picked.truncate(q);
        picked.sort_by(|a, b| a.region_id.cmp(&b.region_id));
    }
    picked
}

fn generate_for_image(img: &ImageRecord, regions: &[RegionAnnotation], cfg: &GenerationConfig) -> Result<ImageOutput, RoiError> {
    let mut out = ImageOutput {
        qa: Vec::new(),
        composites: Vec::new(),
        skipped: Vec::new(),
    };
    for t in &cfg.enabled_types {
        for region in chosen_regions(&img.image_id, regions, *t, cfg) {
            let (qa, composite) = match t {
                RoiType::Localization => (gen_localization(img, region), None),
                RoiType::Selection => match gen_selection(img, region, regions, cfg)? {
                    Ok(pair) => pair,
                    Err(skip) => {
                        out.skipped.push(skip);
                        continue;
                    }
                },
                RoiType::DescCoords => match gen_desc_coords(img, region, cfg)? {
                    Some(pair) => pair,
                    None => continue,
                },
                RoiType::DescHighlight => gen_desc_highlight(img, region, cfg)?,
            };
            out.qa.push(qa);
            out.composites.extend(composite);
        }
    }
    Ok(out)
}

/// Adds generated RoI items to `d`. Images are processed on a pool of
/// `workers` threads; output order is fixed by sorting, so the pool size
/// never changes the result.
pub fn reconstruct_dataset(d: &Dataset, cfg: &GenerationConfig, workers: usize) -> Result<Reconstruction, RoiError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| RoiError::Pool(e.to_string()))?;
    let images: Vec<&ImageRecord> = d.images.values().collect();
    let outputs: Vec<ImageOutput> = pool.install(|| {
        images
            .par_iter()
            .map(|img| generate_for_image(img, d.regions_of(&img.image_id), cfg))
            .collect::<Result<_, _>>()
    })?;

    let mut dataset = d.clone();
    let mut per_type_counts: BTreeMap<RoiType, usize> = cfg.enabled_types.iter().map(|t| (*t, 0)).collect();
    let mut composites = BTreeMap::new();
    let mut skipped = Vec::new();
    let mut generated = Vec::new();
    for o in outputs {
        for qa in &o.qa {
            if let Some(t) = qa.meta.get("roi_type").and_then(Value::as_str).and_then(RoiType::parse) {
                *per_type_counts.entry(t).or_default() += 1;
            }
        }
        generated.extend(o.qa);
        composites.extend(o.composites.into_iter().map(|c| (c.composite_id.clone(), c)));
        skipped.extend(o.skipped);
    }
    generated.sort_by(|a, b| a.qa_id.cmp(&b.qa_id));
    skipped.sort_by(|a, b| a.qa_id.cmp(&b.qa_id));
    let existing: BTreeSet<&str> = d.qa.iter().map(|q| q.qa_id.as_str()).collect();
    if let Some(clash) = generated.iter().find(|q| existing.contains(q.qa_id.as_str())) {
        return Err(RoiError::Config(format!("generated id {} collides with an original item", clash.qa_id)));
    }
    dataset.qa.extend(generated);
    Ok(Reconstruction {
        dataset,
        report: GenerationReport {
            per_type_counts,
            original_count: d.qa.len(),
            skipped,
            seed: cfg.seed,
            cfg: cfg.clone(),
        },
        composites,
    })
}

/// File names used under a reconstruction output directory.
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const COMPOSITE_DIR: &str = "composites";
pub const SIDECAR_FILE: &str = "composites.jsonl";
pub const REPORT_FILE: &str = "generation_report.json";

impl Reconstruction {
    /// Writes `manifest.jsonl`, `composites/<qa_id>.png`, the
    /// `composites.jsonl` sidecar and `generation_report.json` under
    /// `out_dir`, and points every item at its composite file.
    pub fn write(&mut self, out_dir: &Path, workers: usize) -> Result<Vec<SidecarRecord>, RoiError> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| RoiError::Io { path, source }
        };
        fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
        let comp_dir = out_dir.join(COMPOSITE_DIR);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| RoiError::Pool(e.to_string()))?;
        let records: Vec<SidecarRecord> = pool.install(|| {
            self.composites
                .par_iter_mut()
                .map(|(qa_id, c)| write_composite(c, qa_id, &comp_dir))
                .collect::<Result<_, _>>()
        })?;
        for qa in &mut self.dataset.qa {
            if let Some(c) = qa.composite_ref.as_ref().and_then(|id| self.composites.get(id)) {
                qa.composite_path = c.file.clone();
            }
        }
        write_sidecar(&records, &out_dir.join(SIDECAR_FILE))?;
        save_dataset(&self.dataset, out_dir.join(MANIFEST_FILE))?;
        let report_path = out_dir.join(REPORT_FILE);
        let text = serde_json::to_string_pretty(&self.report).expect("reports serialize") + "\n";
        fs::write(&report_path, text).map_err(io_err(&report_path))?;
        Ok(records)
    }
}

/// Reads back a selection item's option boxes from its meta.
pub fn option_boxes(qa: &QAPair) -> BTreeMap<char, BBox> {
    let mut out = BTreeMap::new();
    if let Some(Value::Object(map)) = qa.meta.get(META_OPTION_BOXES) {
        for (k, v) in map {
            if let (Some(c), Ok(b)) = (k.chars().next(), serde_json::from_value::<BBox>(v.clone())) {
                out.insert(c, b);
            }
        }
    }
    out
}

/// Meta helper used by the generators: the α actually used, if any.
pub fn alpha_used(meta: &Meta) -> Option<u8> {
    meta.get(META_ALPHA_USED).and_then(Value::as_u64).map(|v| v as u8)
}
