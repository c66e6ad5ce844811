//! Benchmark ingestion and validation. Layouts are described in
//! `docs/datasets.md`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::backbone::preprocess::load_image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Benchmark {
    MmvpVlm,
    Winoground,
    CocoCaptions,
}

impl Benchmark {
    pub fn as_str(self) -> &'static str {
        match self {
            Benchmark::MmvpVlm => "mmvp-vlm",
            Benchmark::Winoground => "winoground",
            Benchmark::CocoCaptions => "coco-captions",
        }
    }
}

impl std::fmt::Display for Benchmark {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Benchmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mmvp-vlm" | "mmvp_vlm" | "mmvp" => Ok(Benchmark::MmvpVlm),
            "winoground" => Ok(Benchmark::Winoground),
            "coco" | "coco-captions" | "coco-test" => Ok(Benchmark::CocoCaptions),
            other => Err(Error::InvalidArgument(format!(
                "unknown benchmark `{other}` (mmvp-vlm, winoground, coco-captions)"
            ))),
        }
    }
}

/// The nine MMVP-VLM visual patterns.
pub const MMVP_CATEGORIES: [&str; 9] = [
    "Orientation and Direction",
    "Presence of Specific Features",
    "State and Condition",
    "Quantity and Count",
    "Positional and Relational Context",
    "Color and Appearance",
    "Structural Characteristics",
    "Texts",
    "Viewpoint and Perspective",
];

/// Maps the spellings found in benchmark releases to a canonical category.
pub fn mmvp_category(raw: &str) -> Option<&'static str> {
    let key: String = raw
        .to_ascii_lowercase()
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect();
    let canonical = match key.as_str() {
        "orientationanddirection" | "orientation" => 0,
        "presenceofspecificfeatures" | "specificfeatures" => 1,
        "stateandcondition" | "state" => 2,
        "quantityandcount" | "quantity" => 3,
        "positionalandrelationalcontext" | "spatialrelations" | "positional" => 4,
        "colorandappearance" | "appearance" | "color" => 5,
        "structuralcharacteristics" | "structuralandphysicalcharacteristics" | "structure" => 6,
        "texts" | "text" => 7,
        "viewpointandperspective" | "viewpoint" => 8,
        _ => return None,
    };
    Some(MMVP_CATEGORIES[canonical])
}

/// Two images and two texts; `texts[j]` describes `images[j]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub benchmark: Benchmark,
    pub record_id: String,
    pub images: [PathBuf; 2],
    pub texts: [String; 2],
    /// MMVP-VLM category, empty otherwise.
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub image: PathBuf,
    pub references: Vec<String>,
}

pub trait Record {
    fn record_id(&self) -> &str;
    fn category(&self) -> &str {
        ""
    }
}

impl Record for PairRecord {
    fn record_id(&self) -> &str {
        &self.record_id
    }
    fn category(&self) -> &str {
        &self.category
    }
}

impl Record for CaptionRecord {
    fn record_id(&self) -> &str {
        &self.image_id
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested<T> {
    pub records: Vec<T>,
    /// Non-fatal findings such as unexpected totals.
    pub warnings: Vec<String>,
}

fn check_image(path: &Path, problems: &mut Vec<String>) {
    if let Err(e) = load_image(path) {
        problems.push(e.to_string());
    }
}

fn find_image(dirs: &[PathBuf], stem: &str) -> Option<PathBuf> {
    for dir in dirs {
        let direct = dir.join(stem);
        if direct.extension().is_some() && direct.is_file() {
            return Some(direct);
        }
        for ext in ["jpg", "jpeg", "png", "JPG", "PNG"] {
            let p = dir.join(format!("{stem}.{ext}"));
            if p.is_file() {
                return Some(p);
            }
        }
    }
    None
}

fn require_root(root: &Path) -> Result<()> {
    if !root.is_dir() {
        return Err(Error::Dataset(vec![format!("{} is not a directory", root.display())]));
    }
    Ok(())
}

/// `Questions.csv` (`Question ID`, `Type`, `Statement`) plus images at
/// `<images>/<Type>/<id>.jpg`. Consecutive ids `2k-1, 2k` form one pair.
pub fn ingest_mmvp_vlm(root: &Path) -> Result<Ingested<PairRecord>> {
    require_root(root)?;
    let csv_path = root.join("Questions.csv");
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&csv_path)
        .map_err(|e| Error::Dataset(vec![format!("{}: {e}", csv_path.display())]))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Dataset(vec![format!("{}: {e}", csv_path.display())]))?
        .clone();
    let col = |names: &[&str]| {
        headers
            .iter()
            .position(|h| names.iter().any(|n| h.eq_ignore_ascii_case(n)))
            .ok_or_else(|| Error::Dataset(vec![format!("{}: missing column {}", csv_path.display(), names[0])]))
    };
    let (c_id, c_type, c_text) = (
        col(&["Question ID", "id", "question_id"])?,
        col(&["Type", "category"])?,
        col(&["Statement", "text", "caption"])?,
    );

    let image_dirs = [root.join("images"), root.join("MLLM_VLM Images"), root.to_path_buf()];
    let mut problems = Vec::new();
    let mut rows: Vec<(u64, &'static str, String, PathBuf)> = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("Questions.csv row {}: {e}", line + 2));
                continue;
            }
        };
        let id_raw = row.get(c_id).unwrap_or("");
        let Ok(id) = id_raw.parse::<u64>() else {
            problems.push(format!("Questions.csv row {}: bad question id `{id_raw}`", line + 2));
            continue;
        };
        let type_raw = row.get(c_type).unwrap_or("");
        let Some(category) = mmvp_category(type_raw) else {
            problems.push(format!("question {id}: unknown category `{type_raw}`"));
            continue;
        };
        let text = row.get(c_text).unwrap_or("").to_string();
        if text.is_empty() {
            problems.push(format!("question {id}: empty statement"));
        }
        let mut dirs: Vec<PathBuf> = image_dirs.iter().map(|d| d.join(type_raw)).collect();
        dirs.extend(image_dirs.iter().cloned());
        match find_image(&dirs, &id.to_string()) {
            Some(p) => {
                check_image(&p, &mut problems);
                rows.push((id, category, text, p));
            }
            None => problems.push(format!("question {id}: image {id}.jpg not found")),
        }
    }
    rows.sort_by_key(|r| r.0);
    if rows.len() % 2 != 0 {
        problems.push(format!("{} statements cannot be paired", rows.len()));
    }
    let mut records = Vec::new();
    for pair in rows.chunks_exact(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if b.0 != a.0 + 1 || a.0 % 2 != 1 {
            problems.push(format!("questions {} and {} are not a consecutive odd/even pair", a.0, b.0));
            continue;
        }
        if a.1 != b.1 {
            problems.push(format!("questions {} and {} have different categories", a.0, b.0));
            continue;
        }
        records.push(PairRecord {
            benchmark: Benchmark::MmvpVlm,
            record_id: format!("mmvp-{:04}", a.0.div_ceil(2)),
            images: [a.3.clone(), b.3.clone()],
            texts: [a.2.clone(), b.2.clone()],
            category: a.1.to_string(),
        });
    }
    if !problems.is_empty() {
        return Err(Error::Dataset(problems));
    }
    if records.is_empty() {
        return Err(Error::Dataset(vec![format!("no records in {}", csv_path.display())]));
    }
    records.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    let mut warnings = Vec::new();
    if records.len() != 135 {
        warnings.push(format!("expected 135 MMVP-VLM pairs, found {}", records.len()));
    }
    let mut per_cat: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &records {
        *per_cat.entry(r.category.as_str()).or_default() += 1;
    }
    for c in MMVP_CATEGORIES {
        let n = per_cat.get(c).copied().unwrap_or(0);
        if n != 15 {
            warnings.push(format!("expected 15 pairs in `{c}`, found {n}"));
        }
    }
    Ok(Ingested { records, warnings })
}

#[derive(Deserialize)]
struct WinogroundLine {
    id: u64,
    caption_0: String,
    caption_1: String,
    image_0: String,
    image_1: String,
}

/// `examples.jsonl` with `id`, `caption_0`, `caption_1`, `image_0`, `image_1`
/// plus `images/<image_k>.png`.
pub fn ingest_winoground(root: &Path) -> Result<Ingested<PairRecord>> {
    require_root(root)?;
    let path = root.join("examples.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| Error::Dataset(vec![format!("{}: {e}", path.display())]))?;
    let dirs = [root.join("images"), root.to_path_buf()];
    let mut problems = Vec::new();
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: WinogroundLine = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => {
                problems.push(format!("examples.jsonl line {}: {e}", n + 1));
                continue;
            }
        };
        let mut images = Vec::with_capacity(2);
        for stem in [&ex.image_0, &ex.image_1] {
            match find_image(&dirs, stem) {
                Some(p) => {
                    check_image(&p, &mut problems);
                    images.push(p);
                }
                None => problems.push(format!("example {}: image `{stem}` not found", ex.id)),
            }
        }
        if ex.caption_0.trim().is_empty() || ex.caption_1.trim().is_empty() {
            problems.push(format!("example {}: empty caption", ex.id));
        }
        if images.len() == 2 {
            records.push(PairRecord {
                benchmark: Benchmark::Winoground,
                record_id: format!("wino-{:04}", ex.id),
                images: [images[0].clone(), images[1].clone()],
                texts: [ex.caption_0, ex.caption_1],
                category: String::new(),
            });
        }
    }
    if !problems.is_empty() {
        return Err(Error::Dataset(problems));
    }
    if records.is_empty() {
        return Err(Error::Dataset(vec![format!("no records in {}", path.display())]));
    }
    records.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    if let Some(w) = records.windows(2).find(|w| w[0].record_id == w[1].record_id) {
        return Err(Error::Dataset(vec![format!("duplicate id {}", w[0].record_id)]));
    }
    let mut warnings = Vec::new();
    if records.len() != 400 {
        warnings.push(format!("expected 400 Winoground examples, found {}", records.len()));
    }
    Ok(Ingested { records, warnings })
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    caption: String,
}

/// COCO-format `captions.json` plus `images/<file_name>`.
pub fn ingest_coco_captions(root: &Path) -> Result<Ingested<CaptionRecord>> {
    require_root(root)?;
    let path = root.join("captions.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::Dataset(vec![format!("{}: {e}", path.display())]))?;
    let coco: CocoFile =
        serde_json::from_str(&text).map_err(|e| Error::Dataset(vec![format!("{}: {e}", path.display())]))?;
    let mut refs: HashMap<u64, Vec<String>> = HashMap::new();
    for a in coco.annotations {
        refs.entry(a.image_id).or_default().push(a.caption.trim().to_string());
    }
    let dirs = [root.join("images"), root.to_path_buf()];
    let mut problems = Vec::new();
    let mut records = Vec::new();
    for img in coco.images {
        let references: Vec<String> = refs.remove(&img.id).unwrap_or_default().into_iter().filter(|c| !c.is_empty()).collect();
        if references.is_empty() {
            problems.push(format!("image {}: no reference captions", img.id));
            continue;
        }
        let Some(p) = find_image(&dirs, &img.file_name) else {
            problems.push(format!("image {}: {} not found", img.id, img.file_name));
            continue;
        };
        check_image(&p, &mut problems);
        records.push(CaptionRecord {
            image_id: img.id.to_string(),
            image: p,
            references,
        });
    }
    if !refs.is_empty() {
        let mut orphans: Vec<u64> = refs.keys().copied().collect();
        orphans.sort_unstable();
        problems.push(format!("captions reference unknown image ids {orphans:?}"));
    }
    if !problems.is_empty() {
        return Err(Error::Dataset(problems));
    }
    if records.is_empty() {
        return Err(Error::Dataset(vec![format!("no records in {}", path.display())]));
    }
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(Ingested {
        records,
        warnings: Vec::new(),
    })
}

pub fn ingest_pairs(benchmark: Benchmark, root: &Path) -> Result<Ingested<PairRecord>> {
    match benchmark {
        Benchmark::MmvpVlm => ingest_mmvp_vlm(root),
        Benchmark::Winoground => ingest_winoground(root),
        Benchmark::CocoCaptions => Err(Error::InvalidArgument("COCO captions are not pair records".into())),
    }
}

/// Seeded sample of `n` records, allocated across categories in proportion to
/// their sizes (largest remainder), returned in record-id order.
pub fn subset<T: Record + Clone>(records: &[T], n: usize, seed: u64) -> Result<Vec<T>> {
    if n > records.len() {
        return Err(Error::InvalidArgument(format!("subset of {n} from {} records", records.len())));
    }
    let mut groups: BTreeMap<&str, Vec<&T>> = BTreeMap::new();
    for r in records {
        groups.entry(r.category()).or_default().push(r);
    }
    let total = records.len();
    let mut alloc: Vec<(usize, f64, &str)> = groups
        .iter()
        .map(|(c, g)| {
            let exact = n as f64 * g.len() as f64 / total as f64;
            (exact.floor() as usize, exact - exact.floor(), *c)
        })
        .collect();
    let mut left = n - alloc.iter().map(|a| a.0).sum::<usize>();
    let mut order: Vec<usize> = (0..alloc.len()).collect();
    order.sort_by(|&a, &b| alloc[b].1.total_cmp(&alloc[a].1).then(alloc[a].2.cmp(alloc[b].2)));
    for i in order {
        if left == 0 {
            break;
        }
        if alloc[i].0 < groups[alloc[i].2].len() {
            alloc[i].0 += 1;
            left -= 1;
        }
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for (take, _, cat) in alloc {
        let mut g = groups[cat].clone();
        g.sort_by(|a, b| a.record_id().cmp(b.record_id()));
        g.shuffle(&mut rng);
        out.extend(g.into_iter().take(take).cloned());
    }
    out.sort_by(|a, b| a.record_id().cmp(b.record_id()));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn write_png(p: &Path) {
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        RgbImage::from_pixel(4, 4, Rgb([1, 2, 3])).save(p).unwrap();
    }

    fn mmvp_fixture(root: &Path, per_cat: usize) {
        let mut csv = String::from("Question ID,Type,Statement\n");
        let mut id = 1;
        for cat in MMVP_CATEGORIES {
            for _ in 0..per_cat {
                for side in ["a", "b"] {
                    csv.push_str(&format!("{id},{cat},\"statement {id}, side {side}\"\n"));
                    write_png(&root.join("images").join(cat).join(format!("{id}.png")));
                    id += 1;
                }
            }
        }
        fs::write(root.join("Questions.csv"), csv).unwrap();
    }

    #[test]
    fn mmvp_ingest_and_stratified_subset() {
        let dir = tempfile::tempdir().unwrap();
        mmvp_fixture(dir.path(), 2);
        let ing = ingest_mmvp_vlm(dir.path()).unwrap();
        assert_eq!(ing.records.len(), 18);
        assert!(!ing.warnings.is_empty());
        assert_eq!(ing.records[0].texts[0], "statement 1, side a");
        assert_eq!(ingest_mmvp_vlm(dir.path()).unwrap(), ing);

        let s = subset(&ing.records, 9, 4).unwrap();
        let cats: std::collections::BTreeSet<_> = s.iter().map(|r| r.category.clone()).collect();
        assert_eq!(cats.len(), 9);
        assert_eq!(s, subset(&ing.records, 9, 4).unwrap());
        assert_eq!(subset(&ing.records, 18, 0).unwrap(), ing.records);
        assert!(subset(&ing.records, 19, 0).is_err());
    }

    #[test]
    fn mmvp_reports_all_offenders() {
        let dir = tempfile::tempdir().unwrap();
        mmvp_fixture(dir.path(), 1);
        fs::remove_file(dir.path().join("images/Texts/15.png")).unwrap();
        fs::write(dir.path().join("images/Quantity and Count/7.png"), b"garbage").unwrap();
        let mut csv = fs::read_to_string(dir.path().join("Questions.csv")).unwrap();
        csv.push_str("19,Smell,\"x\"\n");
        fs::write(dir.path().join("Questions.csv"), csv).unwrap();
        match ingest_mmvp_vlm(dir.path()) {
            Err(Error::Dataset(p)) => {
                assert!(p.iter().any(|m| m.contains("15.jpg not found")), "{p:?}");
                assert!(p.iter().any(|m| m.contains("7.png")), "{p:?}");
                assert!(p.iter().any(|m| m.contains("Smell")), "{p:?}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_root_fails() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ingest_mmvp_vlm(dir.path()), Err(Error::Dataset(_))));
        assert!(matches!(ingest_winoground(dir.path()), Err(Error::Dataset(_))));
        assert!(matches!(ingest_coco_captions(dir.path()), Err(Error::Dataset(_))));
        assert!(ingest_winoground(&dir.path().join("absent")).is_err());
    }

    #[test]
    fn winoground_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let mut lines = String::new();
        for id in [1, 0] {
            lines.push_str(&format!(
                "{{\"id\": {id}, \"caption_0\": \"a cat on a dog\", \"caption_1\": \"a dog on a cat\", \"image_0\": \"ex_{id}_img_0\", \"image_1\": \"ex_{id}_img_1\", \"tag\": \"Object\"}}\n"
            ));
            write_png(&dir.path().join(format!("images/ex_{id}_img_0.png")));
            write_png(&dir.path().join(format!("images/ex_{id}_img_1.png")));
        }
        fs::write(dir.path().join("examples.jsonl"), lines).unwrap();
        let ing = ingest_winoground(dir.path()).unwrap();
        assert_eq!(ing.records.len(), 2);
        assert_eq!(ing.records[0].record_id, "wino-0000");
        assert!(ing.records[0].category.is_empty());
    }

    #[test]
    fn coco_ingest() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("images/a.png"));
        write_png(&dir.path().join("images/b.png"));
        let json = r#"{"images": [{"id": 2, "file_name": "b.png"}, {"id": 1, "file_name": "a.png"}],
            "annotations": [{"image_id": 1, "caption": "A cat."}, {"image_id": 1, "caption": "Cat sitting"},
                            {"image_id": 2, "caption": "a dog"}]}"#;
        fs::write(dir.path().join("captions.json"), json).unwrap();
        let ing = ingest_coco_captions(dir.path()).unwrap();
        assert_eq!(ing.records.len(), 2);
        assert_eq!(ing.records[0].references, vec!["A cat.", "Cat sitting"]);
    }

    #[test]
    fn category_aliases() {
        assert_eq!(mmvp_category("Structural and Physical Characteristics"), Some("Structural Characteristics"));
        assert_eq!(mmvp_category("viewpoint"), Some("Viewpoint and Perspective"));
        assert_eq!(mmvp_category("Smell"), None);
    }
}
