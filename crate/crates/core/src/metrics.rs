//! Answer scoring.
//!
//! - closed questions: exact match after [`normalize`]
//! - multi-choice: letter accuracy via [`extract_choice`]
//! - open questions: [`token_recall`], the fraction of distinct gold tokens
//!   found in the prediction
//! - localization: [`iou`] against the gold box, thresholded

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compositor::PaletteColor;
use crate::corpus::{BBox, QType};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("predictions ({preds}) and golds ({golds}) differ in length")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("no items to score")]
    Empty,
    #[error("gold answer has no tokens after normalization: {0:?}")]
    EmptyGold(String),
    #[error("degenerate box {0}")]
    DegenerateBox(BBox),
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Normal form used for every textual comparison.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedAnswer {
    pub raw: String,
    pub tokens: Vec<String>,
}

impl NormalizedAnswer {
    pub fn joined(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn token_set(&self) -> BTreeSet<&str> {
        self.tokens.iter().map(String::as_str).collect()
    }
}

/// Lowercases, drops every character that is neither alphanumeric nor
/// whitespace, splits on whitespace and strips leading articles.
pub fn normalize(s: &str) -> NormalizedAnswer {
    let cleaned: String = s
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    let mut tokens: Vec<String> = cleaned.split_whitespace().map(str::to_string).collect();
    let lead = tokens.iter().take_while(|t| ARTICLES.contains(&t.as_str())).count();
    tokens.drain(..lead);
    NormalizedAnswer {
        raw: s.to_string(),
        tokens,
    }
}

/// Exact normalized match.
pub fn closed_match(pred: &str, gold: &str) -> bool {
    normalize(pred).tokens == normalize(gold).tokens
}

pub fn closed_accuracy<P: AsRef<str>, G: AsRef<str>>(preds: &[P], golds: &[G]) -> Result<f64, MetricError> {
    check_lengths(preds.len(), golds.len())?;
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| closed_match(p.as_ref(), g.as_ref()))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

fn check_lengths(preds: usize, golds: usize) -> Result<(), MetricError> {
    if preds != golds {
        return Err(MetricError::LengthMismatch { preds, golds });
    }
    Ok(())
}

/// Pulls an option letter out of a free-form multi-choice answer.
///
/// Rules, first hit wins: the whole answer is a single letter; the answer
/// starts with `X.`, `X:` or `X)`; the phrase "answer is X"; a color word
/// mapped back through `option_colors`.
pub fn extract_choice(pred: &str, option_colors: &BTreeMap<char, String>) -> Option<char> {
    static PREFIX: OnceLock<Regex> = OnceLock::new();
    static ANSWER_IS: OnceLock<Regex> = OnceLock::new();
    static COLOR: OnceLock<Regex> = OnceLock::new();

    let trimmed = pred.trim().trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace());
    let mut chars = trimmed.chars();
    if let (Some(c), None) = (chars.next(), chars.next()) {
        let c = c.to_ascii_uppercase();
        if ('A'..='D').contains(&c) {
            return Some(c);
        }
    }
    let prefix = PREFIX.get_or_init(|| Regex::new(r"^\s*\(?([A-D])\s*[.:)]").unwrap());
    if let Some(c) = prefix.captures(pred) {
        return c[1].chars().next();
    }
    let answer_is = ANSWER_IS.get_or_init(|| {
        Regex::new(r"(?i:answer)\s*(?i:is|:)?\s*(?i:option\s+)?\(?([A-D])\b").unwrap()
    });
    if let Some(c) = answer_is.captures(pred) {
        return c[1].chars().next();
    }
    let color = COLOR.get_or_init(|| Regex::new(r"(?i)\b(yellow|purple|green|red)\b").unwrap());
    let word = color.captures(pred)?;
    let wanted = PaletteColor::from_name(&word[1])?;
    option_colors
        .iter()
        .find(|(_, name)| PaletteColor::from_name(name) == Some(wanted))
        .map(|(letter, _)| *letter)
}

/// `|gold ∩ pred| / |gold|` over distinct normalized tokens.
pub fn token_recall(pred: &str, gold: &str) -> Result<f64, MetricError> {
    let g = normalize(gold);
    let gold_set = g.token_set();
    if gold_set.is_empty() {
        return Err(MetricError::EmptyGold(gold.to_string()));
    }
    let p = normalize(pred);
    let pred_set = p.token_set();
    let hit = gold_set.iter().filter(|t| pred_set.contains(*t)).count();
    Ok(hit as f64 / gold_set.len() as f64)
}

/// First `[x1, y1, x2, y2]` integer tuple in `s`.
pub fn parse_bbox(s: &str) -> Option<BBox> {
    BBox::parse_first(s)
}

/// Intersection over union with exclusive far corners.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64, MetricError> {
    for bx in [a, b] {
        if bx.is_degenerate() {
            return Err(MetricError::DegenerateBox(*bx));
        }
    }
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    Ok(inter as f64 / union as f64)
}

/// Localization hit: the prediction parses, is non-degenerate and reaches
/// `threshold` IoU with the gold box.
pub fn localization_hit(pred: &str, gold: &BBox, threshold: f64) -> bool {
    parse_bbox(pred)
        .and_then(|p| iou(&p, gold).ok())
        .is_some_and(|v| v >= threshold)
}

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

pub fn localization_accuracy<P: AsRef<str>>(preds: &[P], golds: &[BBox], threshold: f64) -> Result<f64, MetricError> {
    check_lengths(preds.len(), golds.len())?;
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| localization_hit(p.as_ref(), g, threshold))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Metric name reported for a question type.
pub fn metric_name(qtype: QType) -> &'static str {
    match qtype {
        QType::Closed | QType::Multichoice => "accuracy",
        QType::Open => "token_recall",
        QType::Localization => "iou_accuracy",
    }
}

/// One scored item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub qa_id: String,
    pub qtype: QType,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeMetric {
    pub n: usize,
    pub metric_name: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub model_id: String,
    pub split: String,
    pub seed: u64,
    pub timestamp: String,
    /// Items whose inference failed or timed out; they score 0.
    pub failed: usize,
    /// Items left out of every mean (open items whose gold has no tokens).
    pub skipped: usize,
    pub aborted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_type: BTreeMap<QType, TypeMetric>,
    /// Item count per question type, zero entries included.
    pub overall_counts: BTreeMap<QType, usize>,
    pub run_meta: RunMeta,
}

/// Per-type means. Items are summed in `qa_id` order so the result does not
/// depend on the order they arrive in.
pub fn aggregate(items: &[ItemScore], run_meta: RunMeta) -> EvalReport {
    let mut sorted: Vec<&ItemScore> = items.iter().collect();
    sorted.sort_by(|a, b| a.qa_id.cmp(&b.qa_id));
    let mut buckets: BTreeMap<QType, (usize, f64)> = BTreeMap::new();
    for it in sorted {
        let e = buckets.entry(it.qtype).or_default();
        e.0 += 1;
        e.1 += it.score;
    }
    let overall_counts = QType::ALL
        .iter()
        .map(|t| (*t, buckets.get(t).map_or(0, |b| b.0)))
        .collect();
    let per_type = buckets
        .into_iter()
        .map(|(t, (n, sum))| {
            (
                t,
                TypeMetric {
                    n,
                    metric_name: metric_name(t).to_string(),
                    value: sum / n as f64,
                },
            )
        })
        .collect();
    EvalReport {
        per_type,
        overall_counts,
        run_meta,
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn value(&self, qtype: QType) -> Option<f64> {
        self.per_type.get(&qtype).map(|m| m.value)
    }

    /// One-row Markdown table: Open / Closed / Multi, plus localization,
    /// as percentages.
    pub fn to_markdown(&self, dataset: &str) -> String {
        let cell = |t| self.value(t).map_or_else(|| "–".to_string(), |v| format!("{:.2}", v * 100.0));
        let mut out = String::new();
        out.push_str("| Dataset | Open | Closed | Multi | Loc |\n");
        out.push_str("|---|---|---|---|---|\n");
        let _ = writeln!(
            out,
            "| {dataset} | {} | {} | {} | {} |",
            cell(QType::Open),
            cell(QType::Closed),
            cell(QType::Multichoice),
            cell(QType::Localization)
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tokens(s: &str) -> Vec<String> {
        normalize(s).tokens
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(tokens("Yes."), vec!["yes"]);
        assert_eq!(tokens("The Brain Enhancing Tumor"), vec!["brain", "enhancing", "tumor"]);
        assert!(tokens("").is_empty());
        assert_eq!(tokens("the the heart"), vec!["heart"]);
        assert_eq!(tokens("[115, 163, 243, 268]"), vec!["115", "163", "243", "268"]);
        assert_eq!(tokens("Is it a CT?"), vec!["is", "it", "a", "ct"]);
    }

    #[test]
    fn closed_accuracy_examples() {
        assert_eq!(closed_accuracy(&["Yes."], &["yes"]), Ok(1.0));
        assert_eq!(closed_accuracy(&["yes", "no", "yes", "no"], &["yes", "no", "yes", "yes"]), Ok(0.75));
        assert_eq!(closed_accuracy(&["no"], &["yes"]), Ok(0.0));
        assert_eq!(
            closed_accuracy(&["no"], &["yes", "no"]),
            Err(MetricError::LengthMismatch { preds: 1, golds: 2 })
        );
        assert_eq!(closed_accuracy::<&str, &str>(&[], &[]), Err(MetricError::Empty));
    }

    fn colors() -> BTreeMap<char, String> {
        [('A', "Yellow"), ('B', "Purple"), ('C', "Green"), ('D', "Red")]
            .into_iter()
            .map(|(k, v)| (k, v.to_string()))
            .collect()
    }

    #[test]
    fn choice_extraction() {
        let m = colors();
        assert_eq!(extract_choice("B. Purple", &m), Some('B'));
        assert_eq!(extract_choice("The answer is C", &m), Some('C'));
        assert_eq!(extract_choice("the red box", &m), Some('D'));
        assert_eq!(extract_choice("d", &m), Some('D'));
        assert_eq!(extract_choice("(A) yellow", &m), Some('A'));
        assert_eq!(extract_choice("A: the first", &m), Some('A'));
        assert_eq!(extract_choice("answer: B", &m), Some('B'));
        assert_eq!(extract_choice("a yellow one", &m), Some('A'));
        assert_eq!(extract_choice("no idea", &m), None);
        assert_eq!(extract_choice("", &m), None);
    }

    #[test]
    fn color_lookup_follows_item_meta() {
        let mut m = colors();
        m.insert('A', "Red".into());
        m.insert('D', "Yellow".into());
        assert_eq!(extract_choice("red", &m), Some('A'));
    }

    #[test]
    fn recall_examples() {
        assert_eq!(token_recall("enhancing tumor in the brain", "brain enhancing tumor"), Ok(1.0));
        assert_eq!(token_recall("brain edema", "brain enhancing tumor"), Ok(1.0 / 3.0));
        assert_eq!(token_recall("Liver", "Liver"), Ok(1.0));
        assert!(matches!(token_recall("x", "the ."), Err(MetricError::EmptyGold(_))));
    }

    #[test]
    fn bbox_parsing() {
        assert_eq!(parse_bbox("[115, 163, 243, 268]"), Some(BBox::new(115, 163, 243, 268)));
        assert_eq!(parse_bbox("box: [1,2,3,4] maybe"), Some(BBox::new(1, 2, 3, 4)));
        assert_eq!(parse_bbox("no box here"), None);
        assert_eq!(parse_bbox("[1, 2, 3]"), None);
    }

    fn raster_iou(a: &BBox, b: &BBox) -> f64 {
        let (mut inter, mut union) = (0u64, 0u64);
        let lo_x = a.x1.min(b.x1);
        let hi_x = a.x2.max(b.x2);
        let lo_y = a.y1.min(b.y1);
        let hi_y = a.y2.max(b.y2);
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                let (ia, ib) = (a.contains(x, y), b.contains(x, y));
                inter += u64::from(ia && ib);
                union += u64::from(ia || ib);
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0, 0, 10, 10);
        let b = BBox::new(5, 5, 15, 15);
        assert_eq!(iou(&a, &a), Ok(1.0));
        assert_eq!(iou(&a, &BBox::new(20, 20, 30, 30)), Ok(0.0));
        let v = iou(&a, &b).unwrap();
        assert_eq!(raster_iou(&a, &b), 25.0 / 175.0);
        assert!((v - 25.0 / 175.0).abs() < 1e-15);
        assert!(matches!(iou(&a, &BBox::new(3, 3, 3, 9)), Err(MetricError::DegenerateBox(_))));
    }

    #[test]
    fn localization_examples() {
        let gold = vec![BBox::new(5, 5, 15, 15)];
        assert_eq!(localization_accuracy(&["[5, 5, 15, 15]"], &gold, 0.5), Ok(1.0));
        assert_eq!(localization_accuracy(&["somewhere left"], &gold, 0.5), Ok(0.0));
        assert_eq!(localization_accuracy(&["[0, 0, 10, 10]"], &gold, 0.5), Ok(0.0));
        assert_eq!(localization_accuracy(&["[9, 9, 9, 9]"], &gold, 0.5), Ok(0.0));
    }

    fn item(id: &str, t: QType, s: f64) -> ItemScore {
        ItemScore {
            qa_id: id.into(),
            qtype: t,
            score: s,
        }
    }

    #[test]
    fn aggregate_example() {
        let items = vec![
            item("1", QType::Closed, 1.0),
            item("2", QType::Closed, 0.0),
            item("3", QType::Open, 1.0),
            item("4", QType::Open, 0.5),
        ];
        let r = aggregate(&items, RunMeta::default());
        assert_eq!(r.value(QType::Closed), Some(0.5));
        assert_eq!(r.value(QType::Open), Some(0.75));
        assert!(!r.per_type.contains_key(&QType::Multichoice));
        assert_eq!(r.overall_counts[&QType::Multichoice], 0);
        assert_eq!(r.overall_counts.values().sum::<usize>(), 4);
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
        let md = r.to_markdown("SLAKE");
        assert!(md.contains("| SLAKE | 75.00 | 50.00 | – | – |"), "{md}");
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize(&s);
            prop_assert_eq!(normalize(&once.joined()).tokens, once.tokens);
        }

        #[test]
        fn recall_is_one_for_supersets(gold in prop::collection::vec("[a-z]{1,6}", 1..6), extra in prop::collection::vec("[a-z]{1,6}", 0..6)) {
            let gold_s = gold.join(" ");
            prop_assume!(!normalize(&gold_s).tokens.is_empty());
            let mut pred = extra.clone();
            pred.extend(gold.iter().cloned());
            pred.reverse();
            // A leading article in pred could be stripped; keep one non-article first.
            pred.insert(0, "x".into());
            prop_assert_eq!(token_recall(&pred.join(" "), &gold_s).unwrap(), 1.0);
        }

        #[test]
        fn iou_symmetric_and_matches_raster(ax in 0i64..20, ay in 0i64..20, aw in 1i64..12, ah in 1i64..12,
                                            bx in 0i64..20, by in 0i64..20, bw in 1i64..12, bh in 1i64..12) {
            let a = BBox::new(ax, ay, ax + aw, ay + ah);
            let b = BBox::new(bx, by, bx + bw, by + bh);
            let v = iou(&a, &b).unwrap();
            prop_assert_eq!(v, iou(&b, &a).unwrap());
            prop_assert!((v - raster_iou(&a, &b)).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
