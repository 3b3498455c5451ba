//! Annotation overlays and alpha blending.
//!
//! A set of colored boxes is rasterized into an [`OverlayLayer`] (coverage
//! mask plus one color per covered pixel) and then blended into the base
//! image:
//!
//! ```text
//! merged = α·P + (1 − α)·X        (α on the byte scale, i.e. α/255)
//! ```
//!
//! Only covered pixels are blended; everything outside the boxes is copied
//! from the base unchanged. Each channel is computed exactly in integers and
//! rounded half-up, so outputs are bit-reproducible.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{encode_png, BBox, CorpusError, ImageRecord};
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum CompositeError {
    #[error("box {bbox} lies outside the {width}x{height} canvas")]
    OutOfBounds { bbox: BBox, width: u32, height: u32 },
    #[error("degenerate box {0}")]
    Degenerate(BBox),
    #[error("outline thickness {thickness} invalid for box {bbox}")]
    Thickness { bbox: BBox, thickness: u32 },
    #[error("layer is {layer_w}x{layer_h} but base image is {base_w}x{base_h}")]
    DimensionMismatch {
        layer_w: u32,
        layer_h: u32,
        base_w: u32,
        base_h: u32,
    },
    #[error("invalid alpha policy: {0}")]
    Policy(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// The four option colors used for multi-choice items, in letter order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PaletteColor {
    Yellow,
    Purple,
    Green,
    Red,
}

impl PaletteColor {
    pub const ALL: [PaletteColor; 4] = [
        PaletteColor::Yellow,
        PaletteColor::Purple,
        PaletteColor::Green,
        PaletteColor::Red,
    ];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            PaletteColor::Yellow => [255, 255, 0],
            PaletteColor::Purple => [128, 0, 128],
            PaletteColor::Green => [0, 255, 0],
            PaletteColor::Red => [255, 0, 0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PaletteColor::Yellow => "Yellow",
            PaletteColor::Purple => "Purple",
            PaletteColor::Green => "Green",
            PaletteColor::Red => "Red",
        }
    }

    /// Case-insensitive lookup by name.
    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name().eq_ignore_ascii_case(s.trim()))
    }
}

impl fmt::Display for PaletteColor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Color {
    pub rgb: [u8; 3],
    pub name: String,
}

impl Color {
    pub fn custom(name: impl Into<String>, rgb: [u8; 3]) -> Self {
        Self { rgb, name: name.into() }
    }
}

impl From<PaletteColor> for Color {
    fn from(c: PaletteColor) -> Self {
        Self {
            rgb: c.rgb(),
            name: c.name().to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "style", rename_all = "lowercase")]
pub enum BoxStyle {
    Outline { thickness: u32 },
    Filled,
}

impl BoxStyle {
    /// Outline used for highlighted regions and multi-choice options.
    pub const DEFAULT_OUTLINE: BoxStyle = BoxStyle::Outline { thickness: 3 };

    /// Outline of `thickness`, reduced as needed so it fits inside `bbox`.
    pub fn outline_fitting(thickness: u32, bbox: &BBox) -> BoxStyle {
        let limit = (bbox.width().min(bbox.height()) / 2).max(1) as u32;
        BoxStyle::Outline {
            thickness: thickness.clamp(1, limit),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlayBox {
    pub bbox: BBox,
    pub color: Color,
    #[serde(flatten)]
    pub style: BoxStyle,
}

/// Boxes to draw, in paint order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OverlaySpec {
    pub boxes: Vec<OverlayBox>,
}

impl OverlaySpec {
    pub fn validate(&self, width: u32, height: u32) -> Result<(), CompositeError> {
        for b in &self.boxes {
            if b.bbox.is_degenerate() {
                return Err(CompositeError::Degenerate(b.bbox));
            }
            if !b.bbox.within(width, height) {
                return Err(CompositeError::OutOfBounds {
                    bbox: b.bbox,
                    width,
                    height,
                });
            }
            if let BoxStyle::Outline { thickness } = b.style {
                // A 1px ring is always allowed, even on boxes thinner than 2px.
                let limit = (b.bbox.width().min(b.bbox.height()) / 2).max(1);
                if thickness == 0 || i64::from(thickness) > limit {
                    return Err(CompositeError::Thickness {
                        bbox: b.bbox,
                        thickness,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Rasterized overlay: `colors[i]` is meaningful only where `mask[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlayLayer {
    pub width: u32,
    pub height: u32,
    pub mask: Vec<bool>,
    pub colors: Vec<[u8; 3]>,
    pub spec: OverlaySpec,
}

impl OverlayLayer {
    pub fn covered(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn at(&self, x: u32, y: u32) -> Option<[u8; 3]> {
        let i = y as usize * self.width as usize + x as usize;
        self.mask[i].then(|| self.colors[i])
    }
}

/// Rasterizes `spec`. Later boxes paint over earlier ones.
pub fn render_overlay(width: u32, height: u32, spec: &OverlaySpec) -> Result<OverlayLayer, CompositeError> {
    spec.validate(width, height)?;
    let n = width as usize * height as usize;
    let mut mask = vec![false; n];
    let mut colors = vec![[0u8; 3]; n];
    for b in &spec.boxes {
        let BBox { x1, y1, x2, y2 } = b.bbox;
        let t = match b.style {
            BoxStyle::Outline { thickness } => Some(i64::from(thickness)),
            BoxStyle::Filled => None,
        };
        for y in y1..y2 {
            for x in x1..x2 {
                let on_ring = match t {
                    None => true,
                    Some(t) => x < x1 + t || x >= x2 - t || y < y1 + t || y >= y2 - t,
                };
                if on_ring {
                    let i = y as usize * width as usize + x as usize;
                    mask[i] = true;
                    colors[i] = b.color.rgb;
                }
            }
        }
    }
    Ok(OverlayLayer {
        width,
        height,
        mask,
        colors,
        spec: spec.clone(),
    })
}

/// `round((alpha·marker + (255 − alpha)·base) / 255)`, half-up.
///
/// The numerator is never an exact half multiple of 255 (255 is odd), so
/// adding 127 before the floor division is exact half-up rounding.
pub fn blend_channel(marker: u8, base: u8, alpha: u8) -> u8 {
    let a = u32::from(alpha);
    let num = a * u32::from(marker) + (255 - a) * u32::from(base);
    ((num + 127) / 255) as u8
}

/// Blending weight policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum AlphaPolicy {
    Fixed { alpha: u8 },
    /// Per-item uniform integer in `[lo, hi]`.
    Dynamic { lo: u8, hi: u8 },
}

impl AlphaPolicy {
    pub const DYNAMIC_DEFAULT: AlphaPolicy = AlphaPolicy::Dynamic { lo: 96, hi: 255 };

    pub fn fixed(alpha: u8) -> Self {
        AlphaPolicy::Fixed { alpha }
    }

    pub fn dynamic(lo: u8, hi: u8) -> Result<Self, CompositeError> {
        if lo > hi {
            return Err(CompositeError::Policy(format!("dynamic range [{lo}, {hi}] is empty")));
        }
        Ok(AlphaPolicy::Dynamic { lo, hi })
    }

    /// True when every draw is 0, i.e. composites would equal the base.
    pub fn is_zero(&self) -> bool {
        matches!(self, AlphaPolicy::Fixed { alpha: 0 } | AlphaPolicy::Dynamic { lo: 0, hi: 0 })
    }
}

impl fmt::Display for AlphaPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlphaPolicy::Fixed { alpha } => write!(f, "{alpha}"),
            AlphaPolicy::Dynamic { lo: 96, hi: 255 } => write!(f, "dynamic"),
            AlphaPolicy::Dynamic { lo, hi } => write!(f, "dynamic:{lo}-{hi}"),
        }
    }
}

impl FromStr for AlphaPolicy {
    type Err = CompositeError;

    /// `"0"`..`"255"`, `"dynamic"` (96–255) or `"dynamic:LO-HI"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("dynamic") {
            return Ok(Self::DYNAMIC_DEFAULT);
        }
        let bad = || CompositeError::Policy(format!("cannot parse {s:?}"));
        if let Some(range) = s.strip_prefix("dynamic:") {
            let (lo, hi) = range.split_once('-').ok_or_else(bad)?;
            return Self::dynamic(lo.parse().map_err(|_| bad())?, hi.parse().map_err(|_| bad())?);
        }
        s.parse::<u8>().map(Self::fixed).map_err(|_| bad())
    }
}

/// Blending weight for one item. Dynamic draws come from a stream keyed by
/// `(seed, qa_id)`, so the value does not depend on processing order.
pub fn sample_alpha(policy: &AlphaPolicy, seed: u64, qa_id: &str) -> u8 {
    match *policy {
        AlphaPolicy::Fixed { alpha } => alpha,
        AlphaPolicy::Dynamic { lo, hi } => {
            let mut rng = SplitMix64::keyed(seed, &format!("alpha:{qa_id}"));
            rng.range_inclusive(u64::from(lo), u64::from(hi)) as u8
        }
    }
}

/// A base image with an overlay blended in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompositedImage {
    pub composite_id: String,
    pub base_image_id: String,
    pub overlay: OverlaySpec,
    pub alpha_used: u8,
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
    pub file: Option<PathBuf>,
}

impl CompositedImage {
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, CorpusError> {
        encode_png(&self.composite_id, self.width, self.height, &self.pixels)
    }
}

/// Blends `layer` into `base` at `alpha` (0..=255). Uncovered pixels are
/// copied; the composite id defaults to the base image id.
pub fn blend(base: &ImageRecord, layer: &OverlayLayer, alpha: u8) -> Result<CompositedImage, CompositeError> {
    if layer.width != base.width || layer.height != base.height {
        return Err(CompositeError::DimensionMismatch {
            layer_w: layer.width,
            layer_h: layer.height,
            base_w: base.width,
            base_h: base.height,
        });
    }
    let mut pixels = base.pixels.clone();
    for (i, covered) in layer.mask.iter().enumerate() {
        if *covered {
            let marker = layer.colors[i];
            for c in 0..3 {
                let px = &mut pixels[i * 3 + c];
                *px = blend_channel(marker[c], *px, alpha);
            }
        }
    }
    Ok(CompositedImage {
        composite_id: base.image_id.clone(),
        base_image_id: base.image_id.clone(),
        overlay: layer.spec.clone(),
        alpha_used: alpha,
        width: base.width,
        height: base.height,
        pixels,
        file: None,
    })
}

/// Renders `boxes`, samples α for `qa_id` and blends. The composite id is
/// the `qa_id`.
pub fn composite_item(
    base: &ImageRecord,
    boxes: Vec<OverlayBox>,
    policy: &AlphaPolicy,
    seed: u64,
    qa_id: &str,
) -> Result<CompositedImage, CompositeError> {
    let spec = OverlaySpec { boxes };
    let layer = render_overlay(base.width, base.height, &spec)?;
    let alpha = sample_alpha(policy, seed, qa_id);
    let mut out = blend(base, &layer, alpha)?;
    out.composite_id = qa_id.to_string();
    Ok(out)
}

/// One line of the composite sidecar JSONL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidecarRecord {
    pub qa_id: String,
    pub composite_id: String,
    pub alpha_used: u8,
    pub boxes: Vec<OverlayBox>,
    /// Hex SHA-256 of the written PNG bytes.
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `<run_dir>/<qa_id>.png` and returns its sidecar record. The
/// composite's `file` is set to the written path.
pub fn write_composite(c: &mut CompositedImage, qa_id: &str, run_dir: &Path) -> Result<SidecarRecord, CompositeError> {
    let path = run_dir.join(format!("{qa_id}.png"));
    let io_err = |source| CompositeError::Io {
        path: path.clone(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let bytes = c.encode_png()?;
    fs::write(&path, &bytes).map_err(io_err)?;
    c.file = Some(path.clone());
    Ok(SidecarRecord {
        qa_id: qa_id.to_string(),
        composite_id: c.composite_id.clone(),
        alpha_used: c.alpha_used,
        boxes: c.overlay.boxes.clone(),
        sha256: sha256_hex(&bytes),
    })
}

/// Writes sidecar records as JSONL, sorted by `qa_id`.
pub fn write_sidecar(records: &[SidecarRecord], path: &Path) -> Result<(), CompositeError> {
    let mut sorted: Vec<&SidecarRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.qa_id.cmp(&b.qa_id));
    let mut buf = Vec::new();
    for r in sorted {
        serde_json::to_writer(&mut buf, r).expect("sidecar records serialize");
        buf.push(b'\n');
    }
    let io_err = |source| CompositeError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&buf).map_err(io_err)
}

pub fn read_sidecar(path: &Path) -> Result<Vec<SidecarRecord>, CompositeError> {
    let text = fs::read_to_string(path).map_err(|source| CompositeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| CompositeError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn red_box(bbox: BBox, style: BoxStyle) -> OverlayBox {
        OverlayBox {
            bbox,
            color: PaletteColor::Red.into(),
            style,
        }
    }

    fn gray(w: u32, h: u32, v: u8) -> ImageRecord {
        ImageRecord::filled("base", w, h, [v, v, v], "base.png").unwrap()
    }

    #[test]
    fn palette_values() {
        assert_eq!(PaletteColor::Yellow.rgb(), [255, 255, 0]);
        assert_eq!(PaletteColor::Purple.rgb(), [128, 0, 128]);
        assert_eq!(PaletteColor::Green.rgb(), [0, 255, 0]);
        assert_eq!(PaletteColor::Red.rgb(), [255, 0, 0]);
        assert_eq!(PaletteColor::from_name("purple"), Some(PaletteColor::Purple));
    }

    #[test]
    fn filled_box_covers_its_area() {
        let spec = OverlaySpec {
            boxes: vec![red_box(BBox::new(0, 0, 2, 2), BoxStyle::Filled)],
        };
        let layer = render_overlay(4, 4, &spec).unwrap();
        assert_eq!(layer.covered(), 4);
        assert_eq!(layer.at(1, 1), Some([255, 0, 0]));
        assert_eq!(layer.at(2, 2), None);
    }

    #[test]
    fn outline_ring_matches_enumeration() {
        let bbox = BBox::new(0, 0, 4, 4);
        let spec = OverlaySpec {
            boxes: vec![red_box(bbox, BoxStyle::Outline { thickness: 1 })],
        };
        let layer = render_overlay(8, 8, &spec).unwrap();
        // Brute force: pixels inside the box that touch its border.
        let mut expected = 0;
        for y in 0..8 {
            for x in 0..8 {
                let inside = bbox.contains(x, y);
                let border = x == 0 || x == 3 || y == 0 || y == 3;
                if inside && border {
                    expected += 1;
                }
            }
        }
        assert_eq!(expected, 12);
        assert_eq!(layer.covered(), expected);
    }

    #[test]
    fn empty_spec_covers_nothing() {
        let layer = render_overlay(5, 3, &OverlaySpec::default()).unwrap();
        assert_eq!(layer.covered(), 0);
    }

    #[test]
    fn later_boxes_paint_over_earlier() {
        let spec = OverlaySpec {
            boxes: vec![
                red_box(BBox::new(0, 0, 3, 3), BoxStyle::Filled),
                OverlayBox {
                    bbox: BBox::new(1, 1, 4, 4),
                    color: PaletteColor::Green.into(),
                    style: BoxStyle::Filled,
                },
            ],
        };
        let layer = render_overlay(4, 4, &spec).unwrap();
        assert_eq!(layer.at(0, 0), Some([255, 0, 0]));
        assert_eq!(layer.at(2, 2), Some([0, 255, 0]));
        assert_eq!(layer.covered(), 9 + 9 - 4);
    }

    #[test]
    fn rejects_bad_boxes() {
        let oob = OverlaySpec {
            boxes: vec![red_box(BBox::new(0, 0, 5, 2), BoxStyle::Filled)],
        };
        assert!(matches!(render_overlay(4, 4, &oob), Err(CompositeError::OutOfBounds { .. })));
        let thick = OverlaySpec {
            boxes: vec![red_box(BBox::new(0, 0, 4, 4), BoxStyle::Outline { thickness: 3 })],
        };
        assert!(matches!(render_overlay(8, 8, &thick), Err(CompositeError::Thickness { .. })));
        let degenerate = OverlaySpec {
            boxes: vec![red_box(BBox::new(2, 0, 2, 4), BoxStyle::Filled)],
        };
        assert!(matches!(render_overlay(8, 8, &degenerate), Err(CompositeError::Degenerate(_))));
    }

    #[test]
    fn blend_examples() {
        assert_eq!(blend_channel(255, 100, 128), 178);
        assert_eq!(blend_channel(0, 100, 128), 50);
        for x in 0..=255u8 {
            assert_eq!(blend_channel(200, x, 0), x);
            assert_eq!(blend_channel(x, 17, 255), x);
        }
    }

    #[test]
    fn blend_pixel_example() {
        let base = gray(4, 4, 100);
        let layer = render_overlay(
            4,
            4,
            &OverlaySpec {
                boxes: vec![red_box(BBox::new(0, 0, 4, 4), BoxStyle::Filled)],
            },
        )
        .unwrap();
        let out = blend(&base, &layer, 128).unwrap();
        assert_eq!(out.pixel(2, 3), [178, 50, 50]);
        assert_eq!(out.alpha_used, 128);
    }

    #[test]
    fn blend_checks_dimensions() {
        let layer = render_overlay(3, 3, &OverlaySpec::default()).unwrap();
        assert!(matches!(blend(&gray(4, 4, 0), &layer, 10), Err(CompositeError::DimensionMismatch { .. })));
    }

    #[test]
    fn fixed_alpha_is_constant() {
        let p = AlphaPolicy::fixed(96);
        for i in 0..50 {
            assert_eq!(sample_alpha(&p, i, &format!("q{i}")), 96);
        }
    }

    #[test]
    fn dynamic_alpha_is_keyed_and_bounded() {
        let p = AlphaPolicy::DYNAMIC_DEFAULT;
        assert_eq!(sample_alpha(&p, 7, "q1"), sample_alpha(&p, 7, "q1"));
        let draws: Vec<u8> = (0..10_000).map(|i| sample_alpha(&p, 7, &format!("q{i}"))).collect();
        assert!(draws.iter().all(|a| (96..=255).contains(a)));
        let mean = draws.iter().map(|&a| f64::from(a)).sum::<f64>() / draws.len() as f64;
        assert!((mean - 175.5).abs() <= 3.0, "mean {mean}");
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("dynamic".parse::<AlphaPolicy>().unwrap(), AlphaPolicy::DYNAMIC_DEFAULT);
        assert_eq!("128".parse::<AlphaPolicy>().unwrap(), AlphaPolicy::fixed(128));
        assert_eq!(
            "dynamic:10-20".parse::<AlphaPolicy>().unwrap(),
            AlphaPolicy::Dynamic { lo: 10, hi: 20 }
        );
        assert!("dynamic:20-10".parse::<AlphaPolicy>().is_err());
        assert!("256".parse::<AlphaPolicy>().is_err());
        assert!(AlphaPolicy::fixed(0).is_zero());
    }

    #[test]
    fn composite_without_boxes_is_base() {
        let base = gray(6, 6, 42);
        let c = composite_item(&base, vec![], &AlphaPolicy::fixed(200), 1, "q").unwrap();
        assert_eq!(c.pixels, base.pixels);
        assert_eq!(c.alpha_used, 200);
    }

    #[test]
    fn opaque_filled_box_is_exact() {
        let base = gray(10, 10, 42);
        let bbox = BBox::new(2, 3, 7, 9);
        let c = composite_item(
            &base,
            vec![OverlayBox {
                bbox,
                color: PaletteColor::Purple.into(),
                style: BoxStyle::Filled,
            }],
            &AlphaPolicy::fixed(255),
            1,
            "q",
        )
        .unwrap();
        for y in 0..10 {
            for x in 0..10 {
                let want = if bbox.contains(x, y) { [128, 0, 128] } else { [42, 42, 42] };
                assert_eq!(c.pixel(x as u32, y as u32), want);
            }
        }
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let base = gray(8, 8, 3);
        let mut c = composite_item(
            &base,
            vec![red_box(BBox::new(1, 1, 7, 7), BoxStyle::DEFAULT_OUTLINE)],
            &AlphaPolicy::fixed(96),
            1,
            "img:sel:r1",
        )
        .unwrap();
        let rec = write_composite(&mut c, "img:sel:r1", dir.path()).unwrap();
        let bytes = fs::read(c.file.as_ref().unwrap()).unwrap();
        assert_eq!(rec.sha256, sha256_hex(&bytes));
        let side = dir.path().join("composites.jsonl");
        write_sidecar(std::slice::from_ref(&rec), &side).unwrap();
        assert_eq!(read_sidecar(&side).unwrap(), vec![rec]);
    }

    proptest! {
        #[test]
        fn blend_is_monotone_in_alpha(p in any::<u8>(), x in any::<u8>()) {
            let mut prev = blend_channel(p, x, 0);
            for a in 1..=255u8 {
                let v = blend_channel(p, x, a);
                if p > x { prop_assert!(v >= prev); }
                if p < x { prop_assert!(v <= prev); }
                prev = v;
            }
        }

        #[test]
        fn uncovered_pixels_are_copied(alpha in any::<u8>(), x1 in 0i64..6, y1 in 0i64..6, w in 1i64..4, h in 1i64..4, v in any::<u8>()) {
            let base = gray(10, 10, v);
            let bbox = BBox::new(x1, y1, x1 + w, y1 + h);
            let layer = render_overlay(10, 10, &OverlaySpec { boxes: vec![red_box(bbox, BoxStyle::Filled)] }).unwrap();
            let out = blend(&base, &layer, alpha).unwrap();
            for y in 0..10 {
                for x in 0..10 {
                    if !bbox.contains(x, y) {
                        prop_assert_eq!(out.pixel(x as u32, y as u32), [v, v, v]);
                    }
                }
            }
        }
    }
}
