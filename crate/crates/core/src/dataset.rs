//! Dataset manifests and the tooling around them: splitting, instance
//! census, depth–size correlation, and a procedural toy corpus with exact
//! boxes and per-pixel depth.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth::{load_depth, save_depth_pfm, DepthMap};
use crate::error::{Error, Result};
use crate::haze::HazeParams;
use crate::imageio::write_rgb;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Car,
    Truck,
    Bus,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Car, Category::Truck, Category::Bus];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Car => "car",
            Category::Truck => "truck",
            Category::Bus => "bus",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    RealTrain,
    RealTest,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::RealTrain => "real_train",
            Split::RealTest => "real_test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            "real_train" => Split::RealTrain,
            "real_test" => Split::RealTest,
            other => return Err(Error::invalid(format!("unknown split label {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    /// Path relative to the manifest's directory.
    pub file: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub depth_file: Option<String>,
    /// Meters per unit for 16-bit PNG depth; ignored for PFM.
    #[serde(default = "unit_scale")]
    pub depth_scale: f64,
    /// `None` until a split is assigned.
    #[serde(default)]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub haze_params: Option<HazeParams>,
}

fn unit_scale() -> f64 {
    1.0
}

/// `[x, y, w, h]` in pixels, top-left origin.
pub type BBox = [f64; 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub bbox: BBox,
    pub category: Category,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut image_ids = HashSet::new();
        let mut dims = BTreeMap::new();
        for img in &self.images {
            if !image_ids.insert(img.id) {
                return Err(Error::invalid(format!("duplicate image id {}", img.id)));
            }
            dims.insert(img.id, (f64::from(img.width), f64::from(img.height)));
        }
        let mut ann_ids = HashSet::new();
        for a in &self.annotations {
            if !ann_ids.insert(a.id) {
                return Err(Error::invalid(format!("duplicate annotation id {}", a.id)));
            }
            let &(w, h) = dims.get(&a.image_id).ok_or_else(|| {
                Error::invalid(format!(
                    "annotation {} references missing image {}",
                    a.id, a.image_id
                ))
            })?;
            let [x, y, bw, bh] = a.bbox;
            if !(bw > 0.0 && bh > 0.0) {
                return Err(Error::invalid(format!(
                    "annotation {} has non-positive size",
                    a.id
                )));
            }
            if x < 0.0 || y < 0.0 || x + bw > w || y + bh > h {
                return Err(Error::invalid(format!(
                    "annotation {} bbox {:?} exceeds image {}x{}",
                    a.id, a.bbox, w, h
                )));
            }
        }
        Ok(())
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn annotations_by_image(&self) -> BTreeMap<u64, Vec<&Annotation>> {
        let mut map: BTreeMap<u64, Vec<&Annotation>> = BTreeMap::new();
        for a in &self.annotations {
            map.entry(a.image_id).or_default().push(a);
        }
        map
    }

    /// Sub-manifest of the images carrying `split`, annotations included.
    pub fn filter_split(&self, split: Split) -> Manifest {
        let images: Vec<_> = self
            .images
            .iter()
            .filter(|i| i.split == Some(split))
            .cloned()
            .collect();
        let ids: BTreeSet<u64> = images.iter().map(|i| i.id).collect();
        Manifest {
            images,
            annotations: self
                .annotations
                .iter()
                .filter(|a| ids.contains(&a.image_id))
                .cloned()
                .collect(),
            categories: self.categories.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeGroup {
    Small,
    Medium,
    Large,
}

impl SizeGroup {
    pub const ALL: [SizeGroup; 3] = [SizeGroup::Small, SizeGroup::Medium, SizeGroup::Large];
}

/// Area ratio `< 0.1%` small, `> 1%` large, medium otherwise (both bounds inclusive).
pub fn size_group(bbox: &BBox, image_width: f64, image_height: f64) -> Result<SizeGroup> {
    let area = image_width * image_height;
    if !(area > 0.0) {
        return Err(Error::invalid(format!(
            "image area must be positive, got {image_width}x{image_height}"
        )));
    }
    let ratio = bbox[2] * bbox[3] / area;
    Ok(if ratio < 0.001 {
        SizeGroup::Small
    } else if ratio <= 0.01 {
        SizeGroup::Medium
    } else {
        SizeGroup::Large
    })
}

/// Parses `8:1:2` style ratio strings.
pub fn parse_ratios(s: &str) -> Result<Vec<u32>> {
    let parts: Result<Vec<u32>> = s
        .split(':')
        .map(|p| {
            p.trim()
                .parse::<u32>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| {
                    Error::invalid(format!("ratio part {p:?} is not a positive integer"))
                })
        })
        .collect();
    let parts = parts?;
    if parts.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least two ratio parts, got {s:?}"
        )));
    }
    Ok(parts)
}

/// Default labels: three parts → train/val/test, two → real_train/real_test.
pub fn default_labels(parts: usize) -> Result<Vec<Split>> {
    match parts {
        2 => Ok(vec![Split::RealTrain, Split::RealTest]),
        3 => Ok(vec![Split::Train, Split::Val, Split::Test]),
        n => Err(Error::invalid(format!(
            "no default split labels for {n} ratio parts; pass labels explicitly"
        ))),
    }
}

/// Exact per-split counts: `floor(n·r/R)` for every part after the first,
/// remainder to the first (train) part.
pub fn split_quotas(n: usize, ratios: &[u32]) -> Vec<usize> {
    let total: u64 = ratios.iter().map(|&r| u64::from(r)).sum();
    let mut quotas: Vec<usize> = ratios
        .iter()
        .map(|&r| (n as u64 * u64::from(r) / total) as usize)
        .collect();
    let assigned: usize = quotas[1..].iter().sum();
    quotas[0] = n - assigned;
    quotas
}

fn dominant_category(anns: &[&Annotation]) -> Option<Category> {
    let mut counts = [0usize; 3];
    for a in anns {
        counts[a.category.index()] += 1;
    }
    let best = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    (*best.1 > 0).then(|| Category::ALL[best.0])
}

/// Seeded, stratified assignment of split labels.
///
/// Images are grouped by dominant category, each stratum shuffled, and the
/// concatenated order dealt out so every prefix tracks the target
/// proportions; totals equal [`split_quotas`] exactly.
pub fn stratified_split(
    manifest: &Manifest,
    ratios: &[u32],
    labels: &[Split],
    seed: u64,
) -> Result<Manifest> {
    if ratios.is_empty() || ratios.contains(&0) {
        return Err(Error::invalid("ratio parts must be positive integers"));
    }
    if labels.len() != ratios.len() {
        return Err(Error::invalid(format!(
            "{} ratio parts but {} labels",
            ratios.len(),
            labels.len()
        )));
    }
    let parts: usize = ratios.iter().map(|&r| r as usize).sum();
    let n = manifest.images.len();
    if n < parts {
        return Err(Error::invalid(format!(
            "{n} images cannot be split into {parts} ratio parts"
        )));
    }
    let by_image = manifest.annotations_by_image();
    let mut strata: BTreeMap<Option<Category>, Vec<usize>> = BTreeMap::new();
    for (idx, img) in manifest.images.iter().enumerate() {
        let anns = by_image.get(&img.id).map(Vec::as_slice).unwrap_or(&[]);
        strata.entry(dominant_category(anns)).or_default().push(idx);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(n);
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        order.extend_from_slice(members);
    }
    let quotas = split_quotas(n, ratios);
    let mut assigned = vec![0usize; quotas.len()];
    let mut out = manifest.clone();
    for (pos, &idx) in order.iter().enumerate() {
        let progress = (pos + 1) as f64 / n as f64;
        let pick = (0..quotas.len())
            .filter(|&k| assigned[k] < quotas[k])
            .max_by(|&a, &b| {
                let da = quotas[a] as f64 * progress - assigned[a] as f64;
                let db = quotas[b] as f64 * progress - assigned[b] as f64;
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("quotas sum to n");
        assigned[pick] += 1;
        out.images[idx].split = Some(labels[pick]);
    }
    Ok(out)
}

/// Counts per split × category × size group.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct InstanceStats {
    /// Keyed by split name (`unassigned` for images without one), then
    /// category, then size group.
    pub table: BTreeMap<String, BTreeMap<Category, BTreeMap<SizeGroup, usize>>>,
    pub images_per_split: BTreeMap<String, usize>,
    pub total_annotations: usize,
}

impl InstanceStats {
    pub fn count(&self, split: &str, category: Category, group: SizeGroup) -> usize {
        self.table
            .get(split)
            .and_then(|c| c.get(&category))
            .and_then(|g| g.get(&group))
            .copied()
            .unwrap_or(0)
    }

    pub fn cell_total(&self) -> usize {
        self.table
            .values()
            .flat_map(|c| c.values())
            .flat_map(|g| g.values())
            .sum()
    }
}

fn split_key(split: Option<Split>) -> String {
    split.map_or("unassigned", Split::name).to_string()
}

pub fn instance_stats(manifest: &Manifest) -> Result<InstanceStats> {
    let mut stats = InstanceStats::default();
    let images: BTreeMap<u64, &ImageRecord> = manifest.images.iter().map(|i| (i.id, i)).collect();
    for img in &manifest.images {
        *stats
            .images_per_split
            .entry(split_key(img.split))
            .or_default() += 1;
    }
    for a in &manifest.annotations {
        let img = images.get(&a.image_id).ok_or_else(|| {
            Error::invalid(format!("annotation {} references missing image", a.id))
        })?;
        let group = size_group(&a.bbox, f64::from(img.width), f64::from(img.height))?;
        *stats
            .table
            .entry(split_key(img.split))
            .or_default()
            .entry(a.category)
            .or_default()
            .entry(group)
            .or_default() += 1;
        stats.total_annotations += 1;
    }
    Ok(stats)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return f64::NAN;
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman rank correlation (Pearson on average ranks); NaN when either
/// variable is constant or fewer than two samples exist.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "spearman: {} vs {} samples",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Ok(f64::NAN);
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

#[derive(Clone, Debug, Serialize)]
pub struct SkippedAnnotation {
    pub annotation_id: u64,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct CorrelationReport {
    pub rho: f64,
    pub samples: usize,
    pub skipped: Vec<SkippedAnnotation>,
}

/// Where to find depth files for [`depth_size_correlation`].
pub enum DepthSource<'a> {
    /// Paths in the manifest, relative to this directory.
    ManifestRelative(&'a Path),
    /// A directory holding files with the same base names as the manifest entries.
    Directory(&'a Path),
}

fn resolve_depth(img: &ImageRecord, source: &DepthSource<'_>) -> Option<PathBuf> {
    let rel = img.depth_file.as_ref()?;
    Some(match source {
        DepthSource::ManifestRelative(base) => base.join(rel),
        DepthSource::Directory(dir) => dir.join(Path::new(rel).file_name()?),
    })
}

/// Mean box depth versus box area, one sample per annotation.
pub fn depth_size_correlation(
    manifest: &Manifest,
    source: DepthSource<'_>,
) -> Result<CorrelationReport> {
    let by_image = manifest.annotations_by_image();
    let mut depths = Vec::new();
    let mut areas = Vec::new();
    let mut skipped = Vec::new();
    for img in &manifest.images {
        let Some(anns) = by_image.get(&img.id) else {
            continue;
        };
        let loaded = resolve_depth(img, &source)
            .ok_or_else(|| Error::invalid("image has no depth file"))
            .and_then(|p| load_depth(&p, img.depth_scale));
        let depth = match loaded {
            Ok(d) => d,
            Err(e) => {
                for a in anns {
                    skipped.push(SkippedAnnotation {
                        annotation_id: a.id,
                        reason: e.to_string(),
                    });
                }
                continue;
            }
        };
        for a in anns {
            match mean_box_depth(&depth, &a.bbox) {
                Some(d) => {
                    depths.push(d);
                    areas.push(a.bbox[2] * a.bbox[3]);
                }
                None => skipped.push(SkippedAnnotation {
                    annotation_id: a.id,
                    reason: "bbox covers no depth pixels".into(),
                }),
            }
        }
    }
    Ok(CorrelationReport {
        rho: spearman(&depths, &areas)?,
        samples: depths.len(),
        skipped,
    })
}

/// Mean over pixels whose centers fall inside the box.
pub fn mean_box_depth(depth: &DepthMap, bbox: &BBox) -> Option<f64> {
    let [x, y, w, h] = *bbox;
    let x0 = (x - 0.5).ceil().max(0.0) as usize;
    let y0 = (y - 0.5).ceil().max(0.0) as usize;
    let x1 = ((x + w - 0.5).ceil().max(0.0) as usize).min(depth.width());
    let y1 = ((y + h - 0.5).ceil().max(0.0) as usize).min(depth.height());
    let mut vals = Vec::new();
    for yy in y0..y1 {
        for xx in x0..x1 {
            vals.push(depth.get(xx, yy));
        }
    }
    (!vals.is_empty()).then(|| crate::tensor::pairwise_sum(&vals) / vals.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub num_images: usize,
    pub resolution: usize,
    pub objects_per_image: usize,
    pub seed: u64,
    /// Depth at the bottom row, meters.
    pub near_depth: f64,
    /// Depth at the top row, meters.
    pub far_depth: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            num_images: 100,
            resolution: 128,
            objects_per_image: 6,
            seed: 0,
            near_depth: 10.0,
            far_depth: 200.0,
        }
    }
}

/// Generation outcome; `shortfalls` lists images that received fewer
/// objects than requested because placement kept colliding.
#[derive(Clone, Debug, Serialize)]
pub struct ToyReport {
    pub manifest: Manifest,
    pub shortfalls: Vec<(u64, usize)>,
}

const PLACEMENT_ATTEMPTS: usize = 100;

struct Template {
    category: Category,
    /// Long side in pixels at 10 m.
    length_at_10m: f64,
    aspect: f64,
    color: [f64; 3],
}

const TEMPLATES: [Template; 3] = [
    Template {
        category: Category::Car,
        length_at_10m: 40.0,
        aspect: 2.0,
        color: [0.85, 0.15, 0.12],
    },
    Template {
        category: Category::Truck,
        length_at_10m: 60.0,
        aspect: 2.6,
        color: [0.15, 0.3, 0.9],
    },
    Template {
        category: Category::Bus,
        length_at_10m: 80.0,
        aspect: 3.2,
        color: [0.95, 0.8, 0.1],
    },
];

/// Ground-plane depth for row `y`: inverse depth interpolates linearly from
/// `1/far` at the top row to `1/near` at the bottom row.
pub fn ground_depth(y: f64, height: usize, near: f64, far: f64) -> f64 {
    let s = if height > 1 {
        y / (height - 1) as f64
    } else {
        1.0
    };
    1.0 / (1.0 / far + s * (1.0 / near - 1.0 / far))
}

fn overlaps(a: &BBox, b: &BBox, margin: f64) -> bool {
    a[0] < b[0] + b[2] + margin
        && b[0] < a[0] + a[2] + margin
        && a[1] < b[1] + b[3] + margin
        && b[1] < a[1] + a[3] + margin
}

/// One toy image: RGB clear image, per-pixel depth, and `(category, bbox)` list.
pub fn render_toy_image(
    config: &ToyConfig,
    seed: u64,
) -> (Tensor, DepthMap, Vec<(Category, BBox)>, usize) {
    let r = config.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut depth = vec![0.0; r * r];
    let mut rgb = vec![0.0; 3 * r * r];
    let base: [f64; 3] = [
        0.35 + 0.1 * rng.random::<f64>(),
        0.4 + 0.1 * rng.random::<f64>(),
        0.3 + 0.1 * rng.random::<f64>(),
    ];
    for y in 0..r {
        let d = ground_depth(y as f64, r, config.near_depth, config.far_depth);
        // texture scale shrinks with distance
        let stripe = ((y as f64) * 10.0 / d).sin() * 0.05;
        for x in 0..r {
            depth[y * r + x] = d;
            let noise = 0.06 * (rng.random::<f64>() - 0.5);
            for c in 0..3 {
                rgb[(c * r + y) * r + x] = (base[c] + stripe + noise).clamp(0.0, 1.0);
            }
        }
    }
    let mut objects: Vec<(Category, BBox)> = Vec::new();
    for _ in 0..config.objects_per_image {
        let tpl = &TEMPLATES[rng.random_range(0..TEMPLATES.len())];
        let vertical = rng.random_bool(0.5);
        let jitter = rng.random_range(0.9..1.1);
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let cy = rng.random_range(0.0..r as f64);
            let d = ground_depth(cy, r, config.near_depth, config.far_depth);
            let long = (tpl.length_at_10m * 10.0 / d * jitter).max(2.0);
            let short = (long / tpl.aspect).max(2.0);
            let (w, h) = if vertical {
                (short, long)
            } else {
                (long, short)
            };
            let (w, h) = (w.round().min(r as f64), h.round().min(r as f64));
            let x = rng.random_range(0.0..=(r as f64 - w)).floor();
            let y = (cy - h / 2.0).round().clamp(0.0, r as f64 - h);
            let bbox = [x, y, w, h];
            if objects.iter().all(|(_, o)| !overlaps(o, &bbox, 1.0)) {
                placed = Some(bbox);
                break;
            }
        }
        if let Some(bbox) = placed {
            let d_obj = ground_depth(
                bbox[1] + bbox[3] / 2.0,
                r,
                config.near_depth,
                config.far_depth,
            );
            let (x0, y0) = (bbox[0] as usize, bbox[1] as usize);
            let (x1, y1) = (x0 + bbox[2] as usize, y0 + bbox[3] as usize);
            for y in y0..y1 {
                for x in x0..x1 {
                    depth[y * r + x] = d_obj;
                    // darker rim
                    let edge = y == y0 || y + 1 == y1 || x == x0 || x + 1 == x1;
                    let shade = if edge { 0.55 } else { 1.0 };
                    for c in 0..3 {
                        rgb[(c * r + y) * r + x] = (tpl.color[c] * shade).clamp(0.0, 1.0);
                    }
                }
            }
            objects.push((tpl.category, bbox));
        }
    }
    let shortfall = config.objects_per_image - objects.len();
    let image = Tensor::from_vec(&[3, r, r], rgb).expect("resolution > 0");
    let depth = DepthMap::new(r, r, depth).expect("ground depth positive");
    (image, depth, objects, shortfall)
}

/// Writes `images/NNNNN.png`, `depth/NNNNN.pfm` and `manifest.json` under `out_dir`.
pub fn generate_toy_dataset(config: &ToyConfig, out_dir: &Path) -> Result<ToyReport> {
    if config.resolution < 128 {
        return Err(Error::invalid(format!(
            "toy resolution must be >= 128, got {}",
            config.resolution
        )));
    }
    if !(config.near_depth > 0.0 && config.far_depth > config.near_depth) {
        return Err(Error::invalid(
            "toy depth range must satisfy 0 < near < far",
        ));
    }
    let img_dir = out_dir.join("images");
    let depth_dir = out_dir.join("depth");
    for d in [&img_dir, &depth_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut manifest = Manifest {
        categories: Category::ALL.to_vec(),
        ..Manifest::default()
    };
    let mut shortfalls = Vec::new();
    let mut next_ann = 0u64;
    for i in 0..config.num_images {
        let (image, depth, objects, shortfall) = render_toy_image(
            config,
            config.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let name = format!("{i:05}");
        let file = format!("images/{name}.png");
        let depth_file = format!("depth/{name}.pfm");
        write_rgb(&out_dir.join(&file), &image)?;
        save_depth_pfm(&out_dir.join(&depth_file), &depth)?;
        if shortfall > 0 {
            shortfalls.push((i as u64, shortfall));
        }
        for (category, bbox) in objects {
            manifest.annotations.push(Annotation {
                id: next_ann,
                image_id: i as u64,
                bbox,
                category,
            });
            next_ann += 1;
        }
        manifest.images.push(ImageRecord {
            id: i as u64,
            file,
            width: config.resolution as u32,
            height: config.resolution as u32,
            depth_file: Some(depth_file),
            depth_scale: 1.0,
            split: None,
            haze_params: None,
        });
    }
    manifest.validate()?;
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(ToyReport {
        manifest,
        shortfalls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_manifest(n: usize) -> Manifest {
        let mut m = Manifest {
            categories: Category::ALL.to_vec(),
            ..Manifest::default()
        };
        for i in 0..n {
            m.images.push(ImageRecord {
                id: i as u64,
                file: format!("{i}.png"),
                width: 100,
                height: 100,
                depth_file: None,
                depth_scale: 1.0,
                split: None,
                haze_params: None,
            });
            m.annotations.push(Annotation {
                id: i as u64,
                image_id: i as u64,
                bbox: [1.0, 1.0, 5.0, 5.0],
                category: Category::ALL[i % 3],
            });
        }
        m
    }

    #[test]
    fn size_group_examples() {
        assert_eq!(
            size_group(&[0.0, 0.0, 20.0, 30.0], 1000.0, 800.0).unwrap(),
            SizeGroup::Small
        );
        assert_eq!(
            size_group(&[0.0, 0.0, 100.0, 100.0], 1000.0, 800.0).unwrap(),
            SizeGroup::Large
        );
        assert_eq!(
            size_group(&[0.0, 0.0, 10.0, 10.0], 100.0, 1000.0).unwrap(),
            SizeGroup::Medium
        );
        assert_eq!(
            size_group(&[0.0, 0.0, 10.0, 10.0], 100.0, 100.0).unwrap(),
            SizeGroup::Medium
        );
        assert!(size_group(&[0.0, 0.0, 1.0, 1.0], 0.0, 10.0).is_err());
    }

    #[test]
    fn quotas_assign_remainder_to_train() {
        assert_eq!(split_quotas(11_000, &[8, 1, 2]), vec![8000, 1000, 2000]);
        assert_eq!(split_quotas(600, &[2, 1]), vec![400, 200]);
        assert_eq!(split_quotas(12, &[8, 1, 2]), vec![9, 1, 2]);
    }

    #[test]
    fn split_is_deterministic_and_exact() {
        let m = tiny_manifest(50);
        let a = stratified_split(&m, &[8, 1, 2], &default_labels(3).unwrap(), 3).unwrap();
        let b = stratified_split(&m, &[8, 1, 2], &default_labels(3).unwrap(), 3).unwrap();
        assert_eq!(a, b);
        let count = |s| a.images.iter().filter(|i| i.split == Some(s)).count();
        let q = split_quotas(50, &[8, 1, 2]);
        assert_eq!(
            (count(Split::Train), count(Split::Val), count(Split::Test)),
            (q[0], q[1], q[2])
        );
    }

    #[test]
    fn split_rejects_too_few_images() {
        let m = tiny_manifest(10);
        assert!(stratified_split(&m, &[8, 1, 2], &default_labels(3).unwrap(), 0).is_err());
    }

    #[test]
    fn parse_ratio_strings() {
        assert_eq!(parse_ratios("8:1:2").unwrap(), vec![8, 1, 2]);
        assert!(parse_ratios("8:0:2").is_err());
        assert!(parse_ratios("8").is_err());
    }

    #[test]
    fn stats_unit_census() {
        let mut m = tiny_manifest(1);
        m.images[0].width = 1000;
        m.images[0].height = 1000;
        m.images[0].split = Some(Split::Train);
        // 0.05% of the image
        m.annotations[0].bbox = [0.0, 0.0, 25.0, 20.0];
        let s = instance_stats(&m).unwrap();
        assert_eq!(s.count("train", Category::Car, SizeGroup::Small), 1);
        assert_eq!(s.cell_total(), 1);
        assert_eq!(
            instance_stats(&Manifest::default()).unwrap().cell_total(),
            0
        );
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 10.0, 5.0]),
            vec![2.5, 4.0, 2.5, 1.0]
        );
    }

    #[test]
    fn spearman_monotone_cases() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&a, &[8.0, 6.0, 4.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn validate_catches_bad_annotations() {
        let mut m = tiny_manifest(2);
        m.annotations[1].image_id = 9;
        assert!(m.validate().is_err());
        let mut m = tiny_manifest(2);
        m.annotations[0].bbox = [98.0, 0.0, 5.0, 5.0];
        assert!(m.validate().is_err());
        let mut m = tiny_manifest(2);
        m.images[1].id = 0;
        assert!(m.validate().is_err());
    }

    #[test]
    fn toy_generator_contract() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyConfig {
            num_images: 3,
            ..ToyConfig::default()
        };
        let rep = generate_toy_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(rep.manifest.images.len(), 3);
        rep.manifest.validate().unwrap();
        for img in &rep.manifest.images {
            let d = load_depth(&dir.path().join(img.depth_file.as_ref().unwrap()), 1.0).unwrap();
            assert_eq!((d.width(), d.height()), (128, 128));
        }
        let empty = generate_toy_dataset(
            &ToyConfig {
                num_images: 0,
                ..cfg
            },
            &dir.path().join("e"),
        )
        .unwrap();
        assert!(empty.manifest.images.is_empty());
        assert!(generate_toy_dataset(
            &ToyConfig {
                resolution: 64,
                ..cfg
            },
            &dir.path().join("s")
        )
        .is_err());
    }

    #[test]
    fn ground_depth_endpoints() {
        assert!((ground_depth(0.0, 128, 10.0, 200.0) - 200.0).abs() < 1e-9);
        assert!((ground_depth(127.0, 128, 10.0, 200.0) - 10.0).abs() < 1e-9);
    }
}
