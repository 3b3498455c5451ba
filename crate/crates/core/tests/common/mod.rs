#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use roivqa::corpus::{save_dataset, BBox, Dataset, ImageRecord, QAPair, QType, RegionAnnotation};
use roivqa::rng::SplitMix64;

pub const LABELS: [&str; 6] = ["Heart", "Liver", "Spleen", "Left Lung", "Right Lung", "Kidney"];

/// Random non-degenerate box inside a `w`×`h` image.
pub fn random_box(rng: &mut SplitMix64, w: u32, h: u32) -> BBox {
    let (w, h) = (w as i64, h as i64);
    let bw = rng.range_inclusive(8, (w / 3) as u64) as i64;
    let bh = rng.range_inclusive(8, (h / 3) as u64) as i64;
    let x1 = rng.range_inclusive(0, (w - bw) as u64) as i64;
    let y1 = rng.range_inclusive(0, (h - bh) as u64) as i64;
    BBox::from([x1, y1, x1 + bw, y1 + bh])
}

/// In-memory corpus of `n` noisy grayscale images, each with 1..=4 labelled
/// regions and two original questions (one closed, one open). The closed
/// answer for image `i` is "no" exactly when `i % 4 == 0`.
pub fn synthetic_dataset(name: &str, n: usize, seed: u64, image_dir: &Path) -> Dataset {
    let mut rng = SplitMix64::new(seed);
    let mut d = Dataset::new(name);
    for i in 0..n {
        let id = format!("img{i:03}");
        let (w, h) = (96 + 8 * rng.below(8) as u32, 96 + 8 * rng.below(8) as u32);
        let pixels = (0..w * h)
            .flat_map(|_| {
                let v = 30 + rng.below(60) as u8;
                [v, v, v]
            })
            .collect();
        let img = ImageRecord::new(&id, w, h, pixels, image_dir.join(format!("{id}.png"))).unwrap();
        let n_regions = 1 + rng.below(4) as usize;
        let regions = (0..n_regions)
            .map(|r| {
                let label = LABELS[rng.below(LABELS.len() as u64) as usize];
                RegionAnnotation::new(&id, format!("r{r}"), label, random_box(&mut rng, w, h))
            })
            .collect();
        d.regions.insert(id.clone(), regions);
        let yes = i % 4 != 0;
        d.qa.push(QAPair::new(
            format!("{id}:c"),
            &id,
            QType::Closed,
            "Is this image abnormal?",
            if yes { "yes" } else { "no" },
        ));
        d.qa.push(QAPair::new(
            format!("{id}:o"),
            &id,
            QType::Open,
            "Which organ is shown?",
            LABELS[rng.below(LABELS.len() as u64) as usize],
        ));
        d.images.insert(id, img);
    }
    d
}

/// Writes the synthetic corpus (PNGs plus `manifest.jsonl`) under `dir`.
pub fn write_synthetic(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir).unwrap();
    let d = synthetic_dataset("synthetic", n, seed, &image_dir);
    for img in d.images.values() {
        fs::write(&img.source_path, img.encode_png().unwrap()).unwrap();
    }
    let manifest = dir.join("synthetic.jsonl");
    save_dataset(&d, &manifest).unwrap();
    manifest
}

/// Recursively lists files under `dir` with their bytes, sorted by path.
pub fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
