//! Canonical data model, manifest I/O and deterministic splitting.
//!
//! A dataset lives on disk as a UTF-8 JSONL manifest. Every line carries a
//! `"kind"` discriminator:
//!
//! ```text
//! {"kind":"image","image_id":"img1","file":"images/img1.png","width":200,"height":200}
//! {"kind":"region","image_id":"img1","region_id":"r1","label":"Heart","bbox":[50,60,120,140]}
//! {"kind":"qa","qa_id":"q1","image_id":"img1","qtype":"closed","question":"Is this a CT?","answer":"yes","provenance":"original","meta":{}}
//! ```
//!
//! Image paths are relative to the manifest's directory. Boxes use pixel
//! corners `[x1, y1, x2, y2]` with `x2`/`y2` exclusive.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Component, Path, PathBuf};
use std::sync::OnceLock;

use num_rational::Ratio;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::rng::SplitMix64;

/// Free-form key/value metadata attached to a QA pair.
pub type Meta = BTreeMap<String, Value>;

/// Meta key holding the correct option letter of a multi-choice item.
pub const META_ANSWER_LETTER: &str = "answer_letter";
/// Meta key holding the letter → color-name map of a multi-choice item.
pub const META_OPTIONS: &str = "options";
/// Meta key holding the letter → bbox map of a multi-choice item.
pub const META_OPTION_BOXES: &str = "option_boxes";
/// Meta key holding the blending weight used for the item's composite.
pub const META_ALPHA_USED: &str = "alpha_used";

pub const OPTION_LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid manifest {}:\n{}", path.display(), render_diagnostics(diagnostics))]
    Invalid {
        path: PathBuf,
        diagnostics: Vec<Diagnostic>,
    },
    #[error("invalid image {image_id}: {reason}")]
    InvalidImage { image_id: String, reason: String },
    #[error("cannot split: need at least 2 images, found {0}")]
    TooFewImages(usize),
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(Ratio<u64>),
    #[error("id collision after namespacing: {0}")]
    MergeCollision(String),
    #[error("png encode for {image_id}: {reason}")]
    Encode { image_id: String, reason: String },
}

fn render_diagnostics(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(|d| format!("  {d}"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnosticKind {
    EmptyManifest,
    Schema,
    UnknownField,
    DuplicateId,
    DegenerateBBox,
    BBoxOutOfBounds,
    DanglingReference,
    MissingImage,
    UndecodableImage,
    InvalidMeta,
}

/// One problem found while validating a manifest. `line` is 1-based; 0 means
/// the problem concerns the file as a whole.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: usize,
    pub kind: DiagnosticKind,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}", self.message)
        } else {
            write!(f, "line {}: {}", self.line, self.message)
        }
    }
}

/// Axis-aligned box in pixel corners; `x2`/`y2` are exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[i64; 4]", into = "[i64; 4]")]
pub struct BBox {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

impl From<[i64; 4]> for BBox {
    fn from([x1, y1, x2, y2]: [i64; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<BBox> for [i64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub const fn new(x1: i64, y1: i64, x2: i64, y2: i64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> i64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> i64 {
        self.y2 - self.y1
    }

    pub fn is_degenerate(&self) -> bool {
        self.x2 <= self.x1 || self.y2 <= self.y1
    }

    /// Pixel count; zero for degenerate boxes.
    pub fn area(&self) -> i64 {
        if self.is_degenerate() {
            0
        } else {
            self.width() * self.height()
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> i64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0 || h <= 0 {
            0
        } else {
            w * h
        }
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x1 >= 0 && self.y1 >= 0 && self.x2 <= i64::from(width) && self.y2 <= i64::from(height)
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    /// First bracketed tuple of four integers in `s`, whitespace tolerant.
    pub fn parse_first(s: &str) -> Option<BBox> {
        static RE: OnceLock<Regex> = OnceLock::new();
        let re = RE.get_or_init(|| {
            Regex::new(r"\[\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*\]").unwrap()
        });
        let caps = re.captures(s)?;
        let mut v = [0i64; 4];
        for (i, slot) in v.iter_mut().enumerate() {
            *slot = caps[i + 1].parse().ok()?;
        }
        Some(BBox::from(v))
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

/// A decoded base image. Pixels are row-major RGB8.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
    pub source_path: PathBuf,
    pub extra: Meta,
}

impl ImageRecord {
    pub fn new(
        image_id: impl Into<String>,
        width: u32,
        height: u32,
        pixels: Vec<u8>,
        source_path: impl Into<PathBuf>,
    ) -> Result<Self, CorpusError> {
        let image_id = image_id.into();
        if width == 0 || height == 0 {
            return Err(CorpusError::InvalidImage {
                image_id,
                reason: format!("dimensions must be positive, got {width}x{height}"),
            });
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(CorpusError::InvalidImage {
                image_id,
                reason: format!("buffer holds {} bytes, expected {expected}", pixels.len()),
            });
        }
        Ok(Self {
            image_id,
            width,
            height,
            pixels,
            source_path: source_path.into(),
            extra: Meta::new(),
        })
    }

    /// Solid-color image, mostly useful for fixtures.
    pub fn filled(
        image_id: impl Into<String>,
        width: u32,
        height: u32,
        rgb: [u8; 3],
        source_path: impl Into<PathBuf>,
    ) -> Result<Self, CorpusError> {
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self::new(image_id, width, height, pixels, source_path)
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// PNG encoding of the pixel buffer.
    pub fn encode_png(&self) -> Result<Vec<u8>, CorpusError> {
        encode_png(&self.image_id, self.width, self.height, &self.pixels)
    }
}

pub(crate) fn encode_png(id: &str, width: u32, height: u32, pixels: &[u8]) -> Result<Vec<u8>, CorpusError> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(pixels, width, height, image::ExtendedColorType::Rgb8)
        .map_err(|e| CorpusError::Encode {
            image_id: id.to_string(),
            reason: e.to_string(),
        })?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionAnnotation {
    pub image_id: String,
    pub region_id: String,
    pub label: String,
    pub bbox: BBox,
    pub extra: Meta,
}

impl RegionAnnotation {
    pub fn new(
        image_id: impl Into<String>,
        region_id: impl Into<String>,
        label: impl Into<String>,
        bbox: BBox,
    ) -> Self {
        Self {
            image_id: image_id.into(),
            region_id: region_id.into(),
            label: label.into(),
            bbox,
            extra: Meta::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QType {
    Closed,
    Open,
    Multichoice,
    Localization,
}

impl QType {
    pub const ALL: [QType; 4] = [QType::Open, QType::Closed, QType::Multichoice, QType::Localization];

    pub fn as_str(&self) -> &'static str {
        match self {
            QType::Closed => "closed",
            QType::Open => "open",
            QType::Multichoice => "multichoice",
            QType::Localization => "localization",
        }
    }
}

impl fmt::Display for QType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Reconstructed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QAPair {
    pub qa_id: String,
    pub image_id: String,
    pub question: String,
    pub answer: String,
    pub qtype: QType,
    pub provenance: Provenance,
    /// Id of the composited image this item is asked against, if any.
    pub composite_ref: Option<String>,
    /// Absolute location of the composite PNG.
    pub composite_path: Option<PathBuf>,
    pub meta: Meta,
    pub extra: Meta,
}

impl QAPair {
    pub fn new(
        qa_id: impl Into<String>,
        image_id: impl Into<String>,
        qtype: QType,
        question: impl Into<String>,
        answer: impl Into<String>,
    ) -> Self {
        Self {
            qa_id: qa_id.into(),
            image_id: image_id.into(),
            question: question.into(),
            answer: answer.into(),
            qtype,
            provenance: Provenance::Original,
            composite_ref: None,
            composite_path: None,
            meta: Meta::new(),
            extra: Meta::new(),
        }
    }

    /// Correct letter of a multi-choice item.
    pub fn answer_letter(&self) -> Option<char> {
        let s = self.meta.get(META_ANSWER_LETTER)?.as_str()?;
        let mut chars = s.chars();
        let c = chars.next()?;
        (chars.next().is_none() && OPTION_LETTERS.contains(&c)).then_some(c)
    }

    /// Letter → color name map of a multi-choice item.
    pub fn option_colors(&self) -> BTreeMap<char, String> {
        let mut out = BTreeMap::new();
        if let Some(Value::Object(map)) = self.meta.get(META_OPTIONS) {
            for (k, v) in map {
                let mut chars = k.chars();
                if let (Some(c), None, Some(name)) = (chars.next(), chars.next(), v.as_str()) {
                    out.insert(c, name.to_string());
                }
            }
        }
        out
    }

    fn check_invariants(&self) -> Result<(), (DiagnosticKind, String)> {
        match self.qtype {
            QType::Multichoice => {
                if self.answer_letter().is_none() {
                    return Err((
                        DiagnosticKind::InvalidMeta,
                        format!("qa {}: multichoice meta needs `{META_ANSWER_LETTER}` in A-D", self.qa_id),
                    ));
                }
                let colors = self.option_colors();
                if colors.len() != 4 || !OPTION_LETTERS.iter().all(|c| colors.contains_key(c)) {
                    return Err((
                        DiagnosticKind::InvalidMeta,
                        format!("qa {}: multichoice meta needs a color for each option A-D", self.qa_id),
                    ));
                }
            }
            QType::Localization => {
                if BBox::parse_first(&self.answer).is_none() {
                    return Err((
                        DiagnosticKind::Schema,
                        format!("qa {}: localization answer is not a bbox: {:?}", self.qa_id, self.answer),
                    ));
                }
            }
            QType::Closed | QType::Open => {}
        }
        Ok(())
    }
}

/// An in-memory dataset. Images and regions are keyed by image id, so
/// iteration order is always sorted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub name: String,
    pub images: BTreeMap<String, ImageRecord>,
    pub regions: BTreeMap<String, Vec<RegionAnnotation>>,
    pub qa: Vec<QAPair>,
}

impl Dataset {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images.get(image_id)
    }

    pub fn regions_of(&self, image_id: &str) -> &[RegionAnnotation] {
        self.regions.get(image_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn region_count(&self) -> usize {
        self.regions.values().map(Vec::len).sum()
    }

    /// QA pairs sorted by id.
    pub fn sorted_qa(&self) -> Vec<&QAPair> {
        let mut v: Vec<&QAPair> = self.qa.iter().collect();
        v.sort_by(|a, b| a.qa_id.cmp(&b.qa_id));
        v
    }

    /// Restriction to the given image ids; regions and QA follow their image.
    pub fn subset(&self, name: impl Into<String>, image_ids: &BTreeSet<String>) -> Dataset {
        Dataset {
            name: name.into(),
            images: self
                .images
                .iter()
                .filter(|(id, _)| image_ids.contains(*id))
                .map(|(id, img)| (id.clone(), img.clone()))
                .collect(),
            regions: self
                .regions
                .iter()
                .filter(|(id, _)| image_ids.contains(*id))
                .map(|(id, r)| (id.clone(), r.clone()))
                .collect(),
            qa: self
                .qa
                .iter()
                .filter(|q| image_ids.contains(&q.image_id))
                .cloned()
                .collect(),
        }
    }

    /// Checks every structural invariant that does not need the filesystem.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut diags = Vec::new();
        let mut push = |kind, message: String| diags.push(Diagnostic { line: 0, kind, message });
        for (id, img) in &self.images {
            if *id != img.image_id {
                push(DiagnosticKind::Schema, format!("image key {id} does not match {}", img.image_id));
            }
            if img.width == 0 || img.height == 0 || img.pixels.len() != img.width as usize * img.height as usize * 3 {
                push(DiagnosticKind::UndecodableImage, format!("image {id}: bad pixel buffer"));
            }
        }
        for (image_id, regions) in &self.regions {
            let Some(img) = self.images.get(image_id) else {
                push(DiagnosticKind::DanglingReference, format!("regions reference unknown image {image_id}"));
                continue;
            };
            let mut seen = BTreeSet::new();
            for r in regions {
                if let Err((kind, msg)) = check_region(r, img.width, img.height) {
                    push(kind, msg);
                }
                if !seen.insert(r.region_id.as_str()) {
                    push(DiagnosticKind::DuplicateId, format!("duplicate region_id {} on image {image_id}", r.region_id));
                }
            }
        }
        let mut seen = BTreeSet::new();
        for q in &self.qa {
            if !seen.insert(q.qa_id.as_str()) {
                push(DiagnosticKind::DuplicateId, format!("duplicate qa_id {}", q.qa_id));
            }
            if !self.images.contains_key(&q.image_id) {
                push(DiagnosticKind::DanglingReference, format!("qa {} references unknown image {}", q.qa_id, q.image_id));
            }
            if let Err((kind, msg)) = q.check_invariants() {
                push(kind, msg);
            }
        }
        diags
    }
}

fn check_region(r: &RegionAnnotation, width: u32, height: u32) -> Result<(), (DiagnosticKind, String)> {
    if r.label.trim().is_empty() {
        return Err((DiagnosticKind::Schema, format!("region {}: empty label", r.region_id)));
    }
    if r.bbox.is_degenerate() {
        return Err((
            DiagnosticKind::DegenerateBBox,
            format!("region {}: degenerate bbox {}", r.region_id, r.bbox),
        ));
    }
    if !r.bbox.within(width, height) {
        return Err((
            DiagnosticKind::BBoxOutOfBounds,
            format!(
                "region {}: bbox {} outside image {} ({width}x{height})",
                r.region_id, r.bbox, r.image_id
            ),
        ));
    }
    Ok(())
}

fn check_id(id: &str) -> Result<(), String> {
    if id.is_empty() {
        return Err("empty id".into());
    }
    if id.starts_with('/') || id.contains('\\') || id.split('/').any(|c| c.is_empty() || c == "." || c == "..") {
        return Err(format!("id {id:?} is not a safe relative name"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifest wire format

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Image(ImageLine),
    Region(RegionLine),
    Qa(QaLine),
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageLine {
    image_id: String,
    file: String,
    width: u32,
    height: u32,
    #[serde(flatten)]
    extra: Meta,
}

#[derive(Debug, Serialize, Deserialize)]
struct RegionLine {
    image_id: String,
    region_id: String,
    label: String,
    bbox: BBox,
    #[serde(flatten)]
    extra: Meta,
}

#[derive(Debug, Serialize, Deserialize)]
struct QaLine {
    qa_id: String,
    image_id: String,
    qtype: QType,
    question: String,
    answer: String,
    provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    composite_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    composite_file: Option<String>,
    meta: Meta,
    #[serde(flatten)]
    extra: Meta,
}

/// Options for [`load_dataset_with`].
#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Reject unknown fields instead of carrying them through.
    pub strict: bool,
    /// Dataset name; defaults to the manifest's file stem.
    pub name: Option<String>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { strict: true, name: None }
    }
}

/// Loads and fully validates a manifest in strict mode.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, CorpusError> {
    load_dataset_with(path, &LoadOptions::default())
}

pub fn load_dataset_with(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Dataset, CorpusError> {
    let path = path.as_ref();
    let (dataset, diagnostics) = check_manifest(path, opts)?;
    if diagnostics.is_empty() {
        Ok(dataset)
    } else {
        Err(CorpusError::Invalid {
            path: path.to_path_buf(),
            diagnostics,
        })
    }
}

/// Validates a manifest and returns every diagnostic rather than stopping at
/// the first. Only I/O failure on the manifest itself is an `Err`.
pub fn validate_manifest(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Vec<Diagnostic>, CorpusError> {
    check_manifest(path.as_ref(), opts).map(|(_, d)| d)
}

fn check_manifest(path: &Path, opts: &LoadOptions) -> Result<(Dataset, Vec<Diagnostic>), CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = absolute_dir(path);
    let name = opts.name.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let mut ds = Dataset::new(name);
    let mut diags = Vec::new();
    let mut diag = |line, kind, message: String| diags.push(Diagnostic { line, kind, message });

    let mut image_lines = Vec::new();
    let mut region_lines = Vec::new();
    let mut qa_lines = Vec::new();
    let mut nonblank = 0usize;
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        nonblank += 1;
        match serde_json::from_str::<Line>(raw) {
            Ok(line) => {
                let (extra, id) = match &line {
                    Line::Image(l) => (&l.extra, &l.image_id),
                    Line::Region(l) => (&l.extra, &l.region_id),
                    Line::Qa(l) => (&l.extra, &l.qa_id),
                };
                if opts.strict {
                    if let Some(field) = extra.keys().next() {
                        diag(lineno, DiagnosticKind::UnknownField, format!("unknown field `{field}` (strict mode)"));
                        continue;
                    }
                }
                if let Err(msg) = check_id(id) {
                    diag(lineno, DiagnosticKind::Schema, msg);
                    continue;
                }
                match line {
                    Line::Image(l) => image_lines.push((lineno, l)),
                    Line::Region(l) => region_lines.push((lineno, l)),
                    Line::Qa(l) => qa_lines.push((lineno, l)),
                }
            }
            Err(e) => diag(lineno, DiagnosticKind::Schema, format!("schema violation: {e}")),
        }
    }
    if nonblank == 0 {
        diag(0, DiagnosticKind::EmptyManifest, "empty manifest".into());
        return Ok((ds, diags));
    }

    for (lineno, l) in image_lines {
        if ds.images.contains_key(&l.image_id) {
            diag(lineno, DiagnosticKind::DuplicateId, format!("duplicate image_id {}", l.image_id));
            continue;
        }
        if l.width == 0 || l.height == 0 {
            diag(lineno, DiagnosticKind::Schema, format!("image {}: width and height must be positive", l.image_id));
            continue;
        }
        let file = normalize_lexically(&base.join(&l.file));
        let img = match image::open(&file) {
            Ok(img) => img.to_rgb8(),
            Err(image::ImageError::IoError(e)) => {
                diag(lineno, DiagnosticKind::MissingImage, format!("image {}: cannot read {}: {e}", l.image_id, file.display()));
                continue;
            }
            Err(e) => {
                diag(lineno, DiagnosticKind::UndecodableImage, format!("image {}: cannot decode {}: {e}", l.image_id, file.display()));
                continue;
            }
        };
        if img.width() != l.width || img.height() != l.height {
            diag(
                lineno,
                DiagnosticKind::Schema,
                format!(
                    "image {}: declared {}x{} but file is {}x{}",
                    l.image_id,
                    l.width,
                    l.height,
                    img.width(),
                    img.height()
                ),
            );
            continue;
        }
        let mut rec = ImageRecord::new(&l.image_id, l.width, l.height, img.into_raw(), file)
            .expect("decoded buffer matches its own dimensions");
        rec.extra = l.extra;
        ds.images.insert(l.image_id, rec);
    }

    for (lineno, l) in region_lines {
        let Some(img) = ds.images.get(&l.image_id) else {
            diag(lineno, DiagnosticKind::DanglingReference, format!("region {} references unknown image {}", l.region_id, l.image_id));
            continue;
        };
        let region = RegionAnnotation {
            image_id: l.image_id,
            region_id: l.region_id,
            label: l.label,
            bbox: l.bbox,
            extra: l.extra,
        };
        if let Err((kind, msg)) = check_region(&region, img.width, img.height) {
            diag(lineno, kind, msg);
            continue;
        }
        let list = ds.regions.entry(region.image_id.clone()).or_default();
        if list.iter().any(|r| r.region_id == region.region_id) {
            diag(lineno, DiagnosticKind::DuplicateId, format!("duplicate region_id {} on image {}", region.region_id, region.image_id));
            continue;
        }
        list.push(region);
    }

    let mut qa_ids = BTreeSet::new();
    for (lineno, l) in qa_lines {
        if !qa_ids.insert(l.qa_id.clone()) {
            diag(lineno, DiagnosticKind::DuplicateId, format!("duplicate qa_id {}", l.qa_id));
            continue;
        }
        if !ds.images.contains_key(&l.image_id) {
            diag(lineno, DiagnosticKind::DanglingReference, format!("qa {} references unknown image {}", l.qa_id, l.image_id));
            continue;
        }
        if l.composite_ref.is_some() != l.composite_file.is_some() {
            diag(lineno, DiagnosticKind::Schema, format!("qa {}: composite_ref and composite_file must appear together", l.qa_id));
            continue;
        }
        let composite_path = l.composite_file.as_ref().map(|f| normalize_lexically(&base.join(f)));
        if let Some(p) = &composite_path {
            if !p.is_file() {
                diag(lineno, DiagnosticKind::MissingImage, format!("qa {}: composite {} not found", l.qa_id, p.display()));
                continue;
            }
        }
        let qa = QAPair {
            qa_id: l.qa_id,
            image_id: l.image_id,
            question: l.question,
            answer: l.answer,
            qtype: l.qtype,
            provenance: l.provenance,
            composite_ref: l.composite_ref,
            composite_path,
            meta: l.meta,
            extra: l.extra,
        };
        if let Err((kind, msg)) = qa.check_invariants() {
            diag(lineno, kind, msg);
            continue;
        }
        ds.qa.push(qa);
    }
    Ok((ds, diags))
}

/// Canonical JSONL rendering: images sorted by id, then each image's regions
/// in stored order, then QA pairs sorted by id. Paths are written relative to
/// `manifest_dir`.
pub fn manifest_string(d: &Dataset, manifest_dir: &Path) -> String {
    let base = normalize_lexically(&absolutize(manifest_dir));
    let mut out = String::new();
    let mut push = |line: Line| {
        out.push_str(&serde_json::to_string(&line).expect("manifest lines always serialize"));
        out.push('\n');
    };
    for img in d.images.values() {
        push(Line::Image(ImageLine {
            image_id: img.image_id.clone(),
            file: relative_to(&img.source_path, &base),
            width: img.width,
            height: img.height,
            extra: img.extra.clone(),
        }));
    }
    for regions in d.regions.values() {
        for r in regions {
            push(Line::Region(RegionLine {
                image_id: r.image_id.clone(),
                region_id: r.region_id.clone(),
                label: r.label.clone(),
                bbox: r.bbox,
                extra: r.extra.clone(),
            }));
        }
    }
    for q in d.sorted_qa() {
        push(Line::Qa(QaLine {
            qa_id: q.qa_id.clone(),
            image_id: q.image_id.clone(),
            qtype: q.qtype,
            question: q.question.clone(),
            answer: q.answer.clone(),
            provenance: q.provenance,
            composite_ref: q.composite_ref.clone(),
            composite_file: q.composite_path.as_ref().map(|p| relative_to(p, &base)),
            meta: q.meta.clone(),
            extra: q.extra.clone(),
        }));
    }
    out
}

/// Writes the canonical manifest for `d` to `path`.
pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let text = manifest_string(d, &absolute_dir(path));
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(text.as_bytes()).map_err(io_err)?;
    Ok(())
}

fn absolutize(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn absolute_dir(manifest: &Path) -> PathBuf {
    let abs = absolutize(manifest);
    normalize_lexically(abs.parent().unwrap_or(Path::new("/")))
}

/// Resolves `.` and `..` without touching the filesystem.
pub(crate) fn normalize_lexically(p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

fn relative_to(target: &Path, base: &Path) -> String {
    let target = normalize_lexically(&absolutize(target));
    let rel = pathdiff::diff_paths(&target, base).unwrap_or(target);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

// ---------------------------------------------------------------------------
// Splitting and merging

/// How to split a dataset. Grouping is always by image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_fraction: Ratio<u64>,
}

impl SplitSpec {
    pub fn new(seed: u64, train_fraction: Ratio<u64>) -> Result<Self, CorpusError> {
        if *train_fraction.numer() == 0 || train_fraction >= Ratio::from_integer(1) {
            return Err(CorpusError::BadFraction(train_fraction));
        }
        Ok(Self { seed, train_fraction })
    }

    /// 80/20 split.
    pub fn eighty_twenty(seed: u64) -> Self {
        Self {
            seed,
            train_fraction: Ratio::new(4, 5),
        }
    }

    /// Number of training images for `n` images: `ceil(fraction * n)`,
    /// capped at `n - 1` so the test side is never empty.
    pub fn train_count(&self, n: usize) -> usize {
        let n64 = n as u64;
        let num = *self.train_fraction.numer() as u128 * n64 as u128;
        let den = *self.train_fraction.denom() as u128;
        let ceil = num.div_ceil(den) as usize;
        ceil.min(n.saturating_sub(1))
    }
}

/// Parses `"4/5"`, `"0.8"` or `"80%"` into an exact fraction.
pub fn parse_fraction(s: &str) -> Option<Ratio<u64>> {
    let s = s.trim();
    if let Some(p) = s.strip_suffix('%') {
        return parse_fraction(p).map(|r| r / Ratio::from_integer(100));
    }
    if let Some((n, d)) = s.split_once('/') {
        let (n, d): (u64, u64) = (n.trim().parse().ok()?, d.trim().parse().ok()?);
        return (d != 0).then(|| Ratio::new(n, d));
    }
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if frac.len() > 18 || (int.is_empty() && frac.is_empty()) {
        return None;
    }
    let int: u64 = if int.is_empty() { 0 } else { int.parse().ok()? };
    let den = 10u64.pow(frac.len() as u32);
    let frac: u64 = if frac.is_empty() { 0 } else { frac.parse().ok()? };
    Some(Ratio::new(int.checked_mul(den)?.checked_add(frac)?, den))
}

/// Splits by image: image ids are sorted, shuffled with Fisher–Yates driven
/// by `SplitMix64(seed)`, and the first [`SplitSpec::train_count`] go to
/// train. Every region and QA pair follows its image.
pub fn split_dataset(d: &Dataset, s: &SplitSpec) -> Result<(Dataset, Dataset), CorpusError> {
    let n = d.images.len();
    if n < 2 {
        return Err(CorpusError::TooFewImages(n));
    }
    let mut ids: Vec<String> = d.images.keys().cloned().collect();
    SplitMix64::new(s.seed).shuffle(&mut ids);
    let k = s.train_count(n);
    let train: BTreeSet<String> = ids[..k].iter().cloned().collect();
    let test: BTreeSet<String> = ids[k..].iter().cloned().collect();
    Ok((
        d.subset(format!("{}-train", d.name), &train),
        d.subset(format!("{}-test", d.name), &test),
    ))
}

/// Disjoint union with every id namespaced as `name/originalId`.
pub fn merge_datasets(ds: &[Dataset]) -> Result<Dataset, CorpusError> {
    let name = ds.iter().map(|d| d.name.as_str()).collect::<Vec<_>>().join("+");
    let mut out = Dataset::new(name);
    let mut qa_ids = BTreeSet::new();
    for d in ds {
        let prefix = |id: &str| format!("{}/{id}", d.name);
        for (id, img) in &d.images {
            let new_id = prefix(id);
            if out.images.contains_key(&new_id) {
                return Err(CorpusError::MergeCollision(new_id));
            }
            let mut img = img.clone();
            img.image_id = new_id.clone();
            out.images.insert(new_id, img);
        }
        for (id, regions) in &d.regions {
            let new_id = prefix(id);
            let moved = regions
                .iter()
                .map(|r| RegionAnnotation {
                    image_id: new_id.clone(),
                    ..r.clone()
                })
                .collect();
            out.regions.insert(new_id, moved);
        }
        for q in &d.qa {
            let mut q = q.clone();
            q.qa_id = prefix(&q.qa_id);
            q.image_id = prefix(&q.image_id);
            q.composite_ref = q.composite_ref.as_deref().map(prefix);
            if !qa_ids.insert(q.qa_id.clone()) {
                return Err(CorpusError::MergeCollision(q.qa_id));
            }
            out.qa.push(q);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(dir: &Path, name: &str, w: u32, h: u32) {
        let img = ImageRecord::filled(name, w, h, [10, 20, 30], dir.join(name)).unwrap();
        fs::write(dir.join(name), img.encode_png().unwrap()).unwrap();
    }

    fn manifest(dir: &Path, lines: &[&str]) -> PathBuf {
        let p = dir.join("m.jsonl");
        fs::write(&p, lines.join("\n") + "\n").unwrap();
        p
    }

    const IMG: &str = r#"{"kind":"image","image_id":"img1","file":"a.png","width":200,"height":200}"#;
    const REGION: &str =
        r#"{"kind":"region","image_id":"img1","region_id":"r1","label":"Heart","bbox":[50,60,120,140]}"#;
    const QA: &str = r#"{"kind":"qa","qa_id":"q1","image_id":"img1","qtype":"closed","question":"Is this a CT?","answer":"yes","provenance":"original","meta":{}}"#;

    #[test]
    fn loads_minimal_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png", 200, 200);
        let d = load_dataset(manifest(dir.path(), &[IMG, REGION, QA])).unwrap();
        assert_eq!(d.images.len(), 1);
        assert_eq!(d.qa.len(), 1);
        assert_eq!(d.regions_of("img1")[0].bbox, BBox::new(50, 60, 120, 140));
        assert_eq!(d.name, "m");
        assert!(d.validate().is_empty());
    }

    #[test]
    fn accepts_coordinate_example_on_512() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png", 512, 512);
        let img = r#"{"kind":"image","image_id":"img1","file":"a.png","width":512,"height":512}"#;
        let r = r#"{"kind":"region","image_id":"img1","region_id":"r1","label":"Liver","bbox":[115,163,243,268]}"#;
        let d = load_dataset(manifest(dir.path(), &[img, r])).unwrap();
        assert_eq!(d.region_count(), 1);
    }

    #[test]
    fn rejects_degenerate_bbox() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png", 200, 200);
        let r = r#"{"kind":"region","image_id":"img1","region_id":"r1","label":"Heart","bbox":[120,60,120,140]}"#;
        let err = load_dataset(manifest(dir.path(), &[IMG, r])).unwrap_err();
        let CorpusError::Invalid { diagnostics, .. } = &err else { panic!("{err}") };
        assert_eq!(diagnostics[0].kind, DiagnosticKind::DegenerateBBox);
        assert_eq!(diagnostics[0].line, 2);
        assert!(err.to_string().contains("degenerate bbox"));
    }

    #[test]
    fn rejects_out_of_bounds_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png", 200, 200);
        let oob = r#"{"kind":"region","image_id":"img1","region_id":"r2","label":"Lung","bbox":[150,150,201,180]}"#;
        let diags = validate_manifest(manifest(dir.path(), &[IMG, IMG, REGION, oob, QA, QA]), &LoadOptions::default()).unwrap();
        let kinds: Vec<_> = diags.iter().map(|d| (d.line, d.kind)).collect();
        assert_eq!(
            kinds,
            vec![
                (2, DiagnosticKind::DuplicateId),
                (4, DiagnosticKind::BBoxOutOfBounds),
                (6, DiagnosticKind::DuplicateId)
            ]
        );
        assert!(diags[1].message.contains("r2"));
    }

    #[test]
    fn schema_errors_name_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png", 200, 200);
        let bad = r#"{"kind":"qa","qa_id":"q1","image_id":"img1","qtype":"closed","question":"?","provenance":"original","meta":{}}"#;
        let diags = validate_manifest(manifest(dir.path(), &[IMG, bad]), &LoadOptions::default()).unwrap();
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].line, 2);
        assert!(diags[0].message.contains("answer"), "{}", diags[0].message);
    }

    #[test]
    fn missing_and_undecodable_images() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("junk.png"), b"not a png").unwrap();
        let missing = r#"{"kind":"image","image_id":"a","file":"nope.png","width":2,"height":2}"#;
        let junk = r#"{"kind":"image","image_id":"b","file":"junk.png","width":2,"height":2}"#;
        let diags = validate_manifest(manifest(dir.path(), &[missing, junk]), &LoadOptions::default()).unwrap();
        assert_eq!(diags[0].kind, DiagnosticKind::MissingImage);
        assert_eq!(diags[1].kind, DiagnosticKind::UndecodableImage);
    }

    #[test]
    fn empty_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        fs::write(&p, "").unwrap();
        let err = load_dataset(&p).unwrap_err();
        assert!(err.to_string().contains("empty manifest"));
    }

    #[test]
    fn strict_rejects_unknown_fields_lenient_keeps_them() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png", 200, 200);
        let img = r#"{"kind":"image","image_id":"img1","file":"a.png","width":200,"height":200,"modality":"CT"}"#;
        let p = manifest(dir.path(), &[img]);
        let diags = validate_manifest(&p, &LoadOptions::default()).unwrap();
        assert_eq!(diags[0].kind, DiagnosticKind::UnknownField);
        assert!(diags[0].message.contains("modality"));

        let lenient = LoadOptions { strict: false, name: None };
        let d = load_dataset_with(&p, &lenient).unwrap();
        assert_eq!(d.images["img1"].extra["modality"], "CT");
        let out = manifest_string(&d, dir.path());
        assert!(out.contains(r#""modality":"CT""#));
    }

    #[test]
    fn multichoice_meta_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png", 200, 200);
        let mc = r#"{"kind":"qa","qa_id":"q2","image_id":"img1","qtype":"multichoice","question":"?","answer":"A","provenance":"original","meta":{"answer_letter":"E"}}"#;
        let loc = r#"{"kind":"qa","qa_id":"q3","image_id":"img1","qtype":"localization","question":"?","answer":"somewhere","provenance":"original","meta":{}}"#;
        let diags = validate_manifest(manifest(dir.path(), &[IMG, mc, loc]), &LoadOptions::default()).unwrap();
        assert_eq!(diags.len(), 2);
        assert_eq!(diags[0].kind, DiagnosticKind::InvalidMeta);
    }

    #[test]
    fn canonical_manifest_round_trips_bytes() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png", 200, 200);
        let p = manifest(dir.path(), &[IMG, REGION, QA]);
        let d = load_dataset(&p).unwrap();
        let out = dir.path().join("again.jsonl");
        save_dataset(&d, &out).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&out).unwrap());
    }

    #[test]
    fn saving_elsewhere_rewrites_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png", 200, 200);
        let d = load_dataset(manifest(dir.path(), &[IMG, REGION, QA])).unwrap();
        let out = dir.path().join("nested/deeper/m.jsonl");
        save_dataset(&d, &out).unwrap();
        let text = fs::read_to_string(&out).unwrap();
        assert!(text.contains(r#""file":"../../a.png""#), "{text}");
        assert_eq!(load_dataset(&out).unwrap().images, d.images);
    }

    fn synthetic(n: usize, qa_per_image: usize) -> Dataset {
        let mut d = Dataset::new("syn");
        for i in 0..n {
            let id = format!("img{i:03}");
            d.images.insert(id.clone(), ImageRecord::filled(&id, 4, 4, [0, 0, 0], format!("/tmp/{id}.png")).unwrap());
            for j in 0..qa_per_image {
                d.qa.push(QAPair::new(format!("{id}-q{j}"), &id, QType::Closed, "?", "yes"));
            }
        }
        d
    }

    #[test]
    fn split_counts_follow_the_fraction() {
        let d = synthetic(10, 1);
        let (train, test) = split_dataset(&d, &SplitSpec::eighty_twenty(3)).unwrap();
        assert_eq!((train.images.len(), test.images.len()), (8, 2));
    }

    #[test]
    fn split_is_deterministic() {
        let d = synthetic(10, 2);
        let s = SplitSpec::eighty_twenty(42);
        assert_eq!(split_dataset(&d, &s).unwrap(), split_dataset(&d, &s).unwrap());
    }

    #[test]
    fn qa_follows_its_image_in_split() {
        let d = synthetic(5, 3);
        let (train, test) = split_dataset(&d, &SplitSpec::eighty_twenty(9)).unwrap();
        // Oracle: enumerate images on the train side and count their QA.
        let expected: usize = d.qa.iter().filter(|q| train.images.contains_key(&q.image_id)).count();
        assert_eq!(expected, 12);
        assert_eq!(train.qa.len(), 12);
        assert_eq!(test.qa.len(), 3);
    }

    #[test]
    fn split_needs_two_images() {
        let d = synthetic(1, 1);
        assert!(matches!(
            split_dataset(&d, &SplitSpec::eighty_twenty(0)),
            Err(CorpusError::TooFewImages(1))
        ));
    }

    #[test]
    fn train_count_never_empties_test_side() {
        let s = SplitSpec::eighty_twenty(0);
        assert_eq!(s.train_count(2), 1);
        assert_eq!(s.train_count(3), 2);
        assert_eq!(s.train_count(100), 80);
        assert_eq!(s.train_count(101), 81);
    }

    #[test]
    fn fraction_parsing() {
        assert_eq!(parse_fraction("4/5"), Some(Ratio::new(4, 5)));
        assert_eq!(parse_fraction("0.8"), Some(Ratio::new(4, 5)));
        assert_eq!(parse_fraction("80%"), Some(Ratio::new(4, 5)));
        assert_eq!(parse_fraction("x"), None);
        assert!(SplitSpec::new(0, Ratio::new(1, 1)).is_err());
        assert!(SplitSpec::new(0, Ratio::new(0, 1)).is_err());
    }

    #[test]
    fn merge_prefixes_ids() {
        let mut a = synthetic(2, 1);
        a.name = "A".into();
        let mut b = synthetic(3, 1);
        b.name = "B".into();
        let m = merge_datasets(&[a, b]).unwrap();
        assert_eq!(m.images.len(), 5);
        assert!(m.images.keys().all(|k| k.starts_with("A/") || k.starts_with("B/")));
        assert!(m.qa.iter().all(|q| m.images.contains_key(&q.image_id)));
        assert!(m.validate().is_empty());
    }

    #[test]
    fn merge_of_one_is_identity_modulo_prefix() {
        let mut a = synthetic(2, 2);
        a.name = "A".into();
        let m = merge_datasets(std::slice::from_ref(&a)).unwrap();
        let stripped: Vec<_> = m.qa.iter().map(|q| q.qa_id.strip_prefix("A/").unwrap()).collect();
        let orig: Vec<_> = a.qa.iter().map(|q| q.qa_id.as_str()).collect();
        assert_eq!(stripped, orig);
        assert_eq!(m.images.len(), a.images.len());
    }

    #[test]
    fn merge_same_name_collides() {
        let mut a = synthetic(2, 1);
        a.name = "A".into();
        assert!(matches!(merge_datasets(&[a.clone(), a]), Err(CorpusError::MergeCollision(_))));
    }

    #[test]
    fn bbox_parsing_and_display() {
        let b = BBox::new(115, 163, 243, 268);
        assert_eq!(b.to_string(), "[115, 163, 243, 268]");
        assert_eq!(BBox::parse_first(&b.to_string()), Some(b));
        assert_eq!(BBox::parse_first("box: [1,2,3,4] maybe"), Some(BBox::new(1, 2, 3, 4)));
        assert_eq!(BBox::parse_first("no box here"), None);
    }
}
