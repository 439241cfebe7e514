//! Part- and attribute-level pseudo-labels from an unlabeled person image.
//!
//! Pipeline per image: spatial filter (2-means foreground split, strictly more
//! than half the tokens must be foreground), semantic filter (image/person
//! prompt similarity strictly above 0.9), multi-granularity clustering of the
//! foreground tokens, per-region text argmax, and pixel label map assembly.
//! Attributes use thresholded (> 0.5) argmax over templated label prompts.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{cosine_similarity, FeatureExtractor, FeatureMap, ImageRGB, JointEmbedder, StageShape};
use crate::error::{ClaspError, Result};
use crate::kmeans::{kmeans, DEFAULT_MAX_ITERS, DEFAULT_RESTARTS};
use crate::tensor::argmax;

pub const PERSON_PROMPT: &str = "a photo of a person";
pub const SEMANTIC_THRESHOLD: f64 = 0.9;
pub const ATTRIBUTE_THRESHOLD: f64 = 0.5;
pub const SPATIAL_MIN_FRACTION: f64 = 0.5;
/// A 2-means cluster whose centroid is at least this similar to the person
/// prompt counts as foreground even when it is not the more similar one.
pub const PERSON_LIKE_SIMILARITY: f64 = 0.5;
pub const PART_PROMPT_TEMPLATE: &str = "a photo of a person's {}";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub region_id: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, region_id: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width || values.iter().any(|&v| v > 1) {
            return Err(ClaspError::Shape(format!("invalid {height}x{width} binary mask")));
        }
        Ok(Self {
            height,
            width,
            region_id,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            region_id: 0,
            values: vec![u8::from(value); height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    /// Nearest-neighbor resize to `height × width`.
    pub fn upscale(&self, height: usize, width: usize) -> BinaryMask {
        let mut values = vec![0u8; height * width];
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                let sx = x * self.width / width;
                values[y * width + x] = self.values[sy * self.width + sx];
            }
        }
        BinaryMask {
            height,
            width,
            region_id: self.region_id,
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartEntry {
    pub name: String,
    pub prompt: String,
}

/// Ordered part classes. Entry `i` has label id `i + 1`; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartVocabulary {
    pub entries: Vec<PartEntry>,
}

impl PartVocabulary {
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let v = Self {
            entries: names
                .iter()
                .map(|n| PartEntry {
                    name: n.as_ref().to_string(),
                    prompt: PART_PROMPT_TEMPLATE.replace("{}", n.as_ref()),
                })
                .collect(),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn default_parts() -> Self {
        Self::from_names(&crate::encoders::DEFAULT_PARTS).expect("default parts are valid")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Label id (1-based) of a part name.
    pub fn id_of(&self, name: &str) -> Option<u8> {
        self.entries.iter().position(|e| e.name == name).map(|i| (i + 1) as u8)
    }

    pub fn name_of(&self, id: u8) -> Option<&str> {
        match id {
            0 => Some("background"),
            i => self.entries.get(i as usize - 1).map(|e| e.name.as_str()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.len() < 2 || self.entries.len() > 255 {
            return Err(ClaspError::Config(format!(
                "part vocabulary needs 2..=255 entries, has {}",
                self.entries.len()
            )));
        }
        let names: BTreeSet<_> = self.entries.iter().map(|e| &e.name).collect();
        if names.len() != self.entries.len() {
            return Err(ClaspError::Config("duplicate part names".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let v: Self = serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| ClaspError::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        v.validate()?;
        Ok(v)
    }
}

/// `H × W` part labels; 0 = background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartLabelMap {
    pub height: usize,
    pub width: usize,
    labels: Vec<u8>,
}

impl PartLabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(ClaspError::Shape(format!(
                "label map {height}x{width} given {} labels",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Majority label per cell of an `h × w` grid (ties to the lowest label).
    pub fn downsample_majority(&self, h: usize, w: usize) -> Result<Vec<u8>> {
        if h == 0 || w == 0 || !self.height.is_multiple_of(h) || !self.width.is_multiple_of(w) {
            return Err(ClaspError::Shape(format!(
                "{h}x{w} grid does not tile {}x{} label map",
                self.height, self.width
            )));
        }
        let (ch, cw) = (self.height / h, self.width / w);
        let mut out = Vec::with_capacity(h * w);
        let mut counts = [0usize; 256];
        for ty in 0..h {
            for tx in 0..w {
                counts.iter_mut().for_each(|c| *c = 0);
                for y in ty * ch..(ty + 1) * ch {
                    for x in tx * cw..(tx + 1) * cw {
                        counts[self.get(y, x) as usize] += 1;
                    }
                }
                let best = (0..256).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap();
                out.push(best as u8);
            }
        }
        Ok(out)
    }

    /// Fraction of pixels on which two maps agree.
    pub fn agreement(&self, other: &PartLabelMap) -> f64 {
        let same = self.labels.iter().zip(&other.labels).filter(|(a, b)| a == b).count();
        same as f64 / self.labels.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeDef {
    pub name: String,
    /// Prompt with exactly one `{}` slot for the label.
    pub template: String,
    pub labels: Vec<String>,
}

impl AttributeDef {
    pub fn prompt(&self, label: &str) -> String {
        self.template.replace("{}", label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSchema {
    pub attributes: Vec<AttributeDef>,
}

impl AttributeSchema {
    pub fn default_schema() -> Self {
        let def = |name: &str, template: &str, labels: [&str; 2]| AttributeDef {
            name: name.into(),
            template: template.into(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
        };
        Self {
            attributes: vec![
                def("gender", "A photo of a {} person.", ["Female", "Male"]),
                def("sleeve", "A photo of a person wearing {}.", ["Long Sleeve", "Short Sleeve"]),
                def("lower", "A photo of a person wearing {}.", ["Trousers", "Shorts"]),
            ],
        }
    }

    /// `K^i` per attribute.
    pub fn label_counts(&self) -> Vec<usize> {
        self.attributes.iter().map(|a| a.labels.len()).collect()
    }

    pub fn total_labels(&self) -> usize {
        self.label_counts().iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        for a in &self.attributes {
            if a.labels.len() < 2 {
                return Err(ClaspError::Config(format!("attribute {:?} needs >= 2 labels", a.name)));
            }
            if a.template.matches("{}").count() != 1 {
                return Err(ClaspError::Config(format!(
                    "attribute {:?} template must contain exactly one {{}} slot",
                    a.name
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| ClaspError::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeLabel {
    /// One-hot vector of length `K^i`; all zero when unknown.
    pub onehot: Vec<f64>,
    pub label: Option<usize>,
    /// Winning similarity when known.
    pub score: Option<f64>,
}

impl AttributeLabel {
    pub fn known(&self) -> bool {
        self.label.is_some()
    }

    pub fn unknown(k: usize) -> Self {
        Self {
            onehot: vec![0.0; k],
            label: None,
            score: None,
        }
    }

    pub fn from_label(label: usize, k: usize, score: f64) -> Result<Self> {
        Ok(Self {
            onehot: onehot_encode(label, k)?,
            label: Some(label),
            score: Some(score),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeLabelSet {
    pub attributes: Vec<AttributeLabel>,
}

impl AttributeLabelSet {
    pub fn known_count(&self) -> usize {
        self.attributes.iter().filter(|a| a.known()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GranularitySet(BTreeSet<usize>);

impl GranularitySet {
    pub fn new(values: impl IntoIterator<Item = usize>) -> Result<Self> {
        let set: BTreeSet<usize> = values.into_iter().collect();
        if set.is_empty() {
            return Err(ClaspError::Config("granularity set is empty".into()));
        }
        if let Some(&v) = set.iter().find(|&&v| v < 1) {
            return Err(ClaspError::Config(format!("granularity {v} must be positive")));
        }
        Ok(Self(set))
    }

    pub fn values(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    /// Parses `"2,3,4"`.
    pub fn parse(s: &str) -> Result<Self> {
        let vals = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| ClaspError::Config(format!("bad granularity {p:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(vals)
    }
}

impl Default for GranularitySet {
    fn default() -> Self {
        Self([2, 3, 4].into_iter().collect())
    }
}

/// Uniform draw from the candidate set.
pub fn sample_granularity<R: Rng + ?Sized>(set: &GranularitySet, rng: &mut R) -> Result<usize> {
    let n = set.0.len();
    if n == 0 {
        return Err(ClaspError::Config("granularity set is empty".into()));
    }
    Ok(*set.0.iter().nth(rng.random_range(0..n)).unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialDiagnostic {
    /// Every token is identical and not person-like.
    DegenerateClustering,
    TooFewForeground,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFilterResult {
    pub pass: bool,
    pub fg_mask: BinaryMask,
    pub fg_fraction: f64,
    pub diagnostic: Option<SpatialDiagnostic>,
}

/// 2-means split of the tokens into foreground and background.
pub fn spatial_filter<R: Rng + ?Sized>(fm: &FeatureMap, person: &[f64], rng: &mut R) -> Result<SpatialFilterResult> {
    let n = fm.num_tokens();
    let points: Vec<Vec<f64>> = (0..n).map(|t| fm.token(t).to_vec()).collect();
    let sim = |c: &[f64]| cosine_similarity(c, person).unwrap_or(0.0);
    let distinct = points.iter().any(|p| p != &points[0]);

    let fg: Vec<bool> = if !distinct || n < 2 {
        if sim(&points[0]) >= PERSON_LIKE_SIMILARITY {
            vec![true; n]
        } else {
            return Ok(SpatialFilterResult {
                pass: false,
                fg_mask: BinaryMask::filled(fm.height, fm.width, false),
                fg_fraction: 0.0,
                diagnostic: Some(SpatialDiagnostic::DegenerateClustering),
            });
        }
    } else {
        let km = kmeans(&points, 2, DEFAULT_MAX_ITERS, DEFAULT_RESTARTS, rng)?;
        let s = [sim(&km.centroids[0]), sim(&km.centroids[1])];
        let fg_cluster = if s[1] > s[0] { 1 } else { 0 };
        let other_person_like = s[1 - fg_cluster] >= PERSON_LIKE_SIMILARITY;
        km.assignments
            .iter()
            .map(|&a| a == fg_cluster || other_person_like)
            .collect()
    };

    let count = fg.iter().filter(|&&b| b).count();
    let fraction = count as f64 / n as f64;
    let pass = fraction > SPATIAL_MIN_FRACTION;
    Ok(SpatialFilterResult {
        pass,
        fg_mask: BinaryMask::new(fm.height, fm.width, 0, fg.iter().map(|&b| u8::from(b)).collect())?,
        fg_fraction: fraction,
        diagnostic: (!pass).then_some(SpatialDiagnostic::TooFewForeground),
    })
}

pub fn semantic_passes(similarity: f64) -> bool {
    similarity > SEMANTIC_THRESHOLD
}

/// Similarity between the whole image and the person prompt.
pub fn semantic_similarity<E: JointEmbedder + ?Sized>(image: &ImageRGB, embedder: &E) -> Result<f64> {
    let z = embedder.embed_image_region(image)?;
    if !z.is_valid() {
        return Ok(0.0);
    }
    let t = embedder.embed_text(PERSON_PROMPT)?;
    cosine_similarity(z.values(), t.values())
}

pub fn semantic_filter<E: JointEmbedder + ?Sized>(image: &ImageRGB, embedder: &E) -> Result<bool> {
    Ok(semantic_passes(semantic_similarity(image, embedder)?))
}

/// K-means with `clusters` groups over the foreground tokens; one mask each.
pub fn cluster_foreground<R: Rng + ?Sized>(
    fm: &FeatureMap,
    fg_mask: &BinaryMask,
    clusters: usize,
    rng: &mut R,
) -> Result<Vec<BinaryMask>> {
    if fg_mask.height != fm.height || fg_mask.width != fm.width {
        return Err(ClaspError::Shape("foreground mask does not match feature map".into()));
    }
    let idx: Vec<usize> = (0..fm.num_tokens()).filter(|&t| fg_mask.values()[t] == 1).collect();
    if idx.len() < clusters || clusters == 0 {
        return Err(ClaspError::GranularityDegenerate {
            requested: clusters,
            available: idx.len(),
        });
    }
    let points: Vec<Vec<f64>> = idx.iter().map(|&t| fm.token(t).to_vec()).collect();
    let km = kmeans(&points, clusters, DEFAULT_MAX_ITERS, DEFAULT_RESTARTS, rng)?;
    let mut masks: Vec<Vec<u8>> = vec![vec![0; fm.num_tokens()]; clusters];
    for (&t, &a) in idx.iter().zip(&km.assignments) {
        masks[a][t] = 1;
    }
    masks
        .into_iter()
        .enumerate()
        .map(|(i, v)| BinaryMask::new(fm.height, fm.width, i, v))
        .collect()
}

/// `image ⊙ R(mask)` with nearest-neighbor `R`.
pub fn mask_image(image: &ImageRGB, mask: &BinaryMask) -> ImageRGB {
    let up = mask.upscale(image.height, image.width);
    let mut out = ImageRGB::zeros(image.id.clone(), image.height, image.width);
    for y in 0..image.height {
        for x in 0..image.width {
            if up.get(y, x) {
                out.set_pixel(y, x, image.pixel(y, x));
            }
        }
    }
    out
}

/// Argmax over a similarity row, ties to the lowest index. Returns the
/// 1-based label id and the winning score.
pub fn select_part_label(scores: &[f64]) -> Result<(u8, f64)> {
    let best = argmax(scores).ok_or_else(|| ClaspError::Domain("empty similarity row".into()))?;
    Ok(((best + 1) as u8, scores[best]))
}

/// Thresholded argmax: only scores strictly above `threshold` compete.
pub fn select_attribute_label(scores: &[f64], threshold: f64) -> Option<(usize, f64)> {
    let masked: Vec<f64> = scores
        .iter()
        .map(|&s| if s > threshold { s } else { f64::NEG_INFINITY })
        .collect();
    let best = argmax(&masked)?;
    (masked[best] > f64::NEG_INFINITY).then_some((best, scores[best]))
}

pub fn onehot_encode(label: usize, k: usize) -> Result<Vec<f64>> {
    if label >= k {
        return Err(ClaspError::Domain(format!("label {label} out of range for {k} classes")));
    }
    let mut v = vec![0.0; k];
    v[label] = 1.0;
    Ok(v)
}

/// Paints each region's label through its upscaled mask; uncovered pixels stay 0.
pub fn build_part_label_map(masks: &[BinaryMask], labels: &[u8], height: usize, width: usize) -> Result<PartLabelMap> {
    if masks.len() != labels.len() {
        return Err(ClaspError::Shape(format!("{} masks but {} labels", masks.len(), labels.len())));
    }
    let mut map = PartLabelMap::background(height, width);
    let mut covered = vec![false; height * width];
    for (mask, &label) in masks.iter().zip(labels) {
        if label == 0 {
            return Err(ClaspError::Domain("region labels start at 1".into()));
        }
        let up = mask.upscale(height, width);
        for (i, &v) in up.values().iter().enumerate() {
            if v == 1 {
                if covered[i] {
                    return Err(ClaspError::Invariant(format!(
                        "region masks overlap at pixel ({}, {})",
                        i / width,
                        i % width
                    )));
                }
                covered[i] = true;
                map.labels[i] = label;
            }
        }
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Spatial,
    Semantic,
    Granularity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartLabelResult {
    pub map: PartLabelMap,
    pub granularity: usize,
    /// (label id, score) per emitted region, `None` for dropped empty regions.
    pub regions: Vec<Option<(u8, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PartOutcome {
    Accepted(PartLabelResult),
    Rejected(RejectReason),
}

impl PartOutcome {
    pub fn accepted(&self) -> Option<&PartLabelResult> {
        match self {
            PartOutcome::Accepted(r) => Some(r),
            PartOutcome::Rejected(_) => None,
        }
    }
}

/// Providers plus the precomputed prompt embeddings shared by every image.
pub struct PseudoLabeler<'a, F: ?Sized, E: ?Sized> {
    extractor: &'a F,
    embedder: &'a E,
    pub stage: StageShape,
    pub vocab: PartVocabulary,
    pub schema: AttributeSchema,
    person: Vec<f64>,
    part_prompts: Vec<Vec<f64>>,
    attr_prompts: Vec<Vec<Vec<f64>>>,
}

impl<'a, F, E> PseudoLabeler<'a, F, E>
where
    F: FeatureExtractor + ?Sized,
    E: JointEmbedder + ?Sized,
{
    pub fn new(
        extractor: &'a F,
        embedder: &'a E,
        stage: StageShape,
        vocab: PartVocabulary,
        schema: AttributeSchema,
    ) -> Result<Self> {
        vocab.validate()?;
        schema.validate()?;
        let person = embedder.embed_text(PERSON_PROMPT)?.values().to_vec();
        let part_prompts = vocab
            .entries
            .iter()
            .map(|e| embedder.embed_text(&e.prompt).map(|v| v.values().to_vec()))
            .collect::<Result<_>>()?;
        let attr_prompts = schema
            .attributes
            .iter()
            .map(|a| {
                a.labels
                    .iter()
                    .map(|l| embedder.embed_text(&a.prompt(l)).map(|v| v.values().to_vec()))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            extractor,
            embedder,
            stage,
            vocab,
            schema,
            person,
            part_prompts,
            attr_prompts,
        })
    }

    pub fn person_embedding(&self) -> &[f64] {
        &self.person
    }

    /// Argmax over part prompts of a masked region image.
    pub fn assign_part_label(&self, masked: &ImageRGB) -> Result<(u8, f64)> {
        let z = self.embedder.embed_image_region(masked)?;
        if !z.is_valid() {
            return Err(ClaspError::EmptyRegion);
        }
        let scores = self
            .part_prompts
            .iter()
            .map(|t| cosine_similarity(z.values(), t))
            .collect::<Result<Vec<_>>>()?;
        select_part_label(&scores)
    }

    pub fn generate_part_labels<R: Rng + ?Sized>(
        &self,
        image: &ImageRGB,
        granularity: &GranularitySet,
        rng: &mut R,
    ) -> Result<PartOutcome> {
        let fm = self.extractor.extract_feature_map(image, &self.stage)?;
        let spatial = spatial_filter(&fm, &self.person, rng)?;
        if !spatial.pass {
            return Ok(PartOutcome::Rejected(RejectReason::Spatial));
        }
        if !semantic_filter(image, self.embedder)? {
            return Ok(PartOutcome::Rejected(RejectReason::Semantic));
        }
        let available = spatial.fg_mask.count();
        let mut clusters = sample_granularity(granularity, rng)?;
        if clusters > available {
            // retry with the largest smaller candidate that fits
            match granularity.values().filter(|&l| l <= available).max() {
                Some(l) => clusters = l,
                None => return Ok(PartOutcome::Rejected(RejectReason::Granularity)),
            }
        }
        let masks = cluster_foreground(&fm, &spatial.fg_mask, clusters, rng)?;
        let mut kept_masks = Vec::new();
        let mut labels = Vec::new();
        let mut regions = Vec::new();
        for mask in masks {
            match self.assign_part_label(&mask_image(image, &mask)) {
                Ok((label, score)) => {
                    regions.push(Some((label, score)));
                    labels.push(label);
                    kept_masks.push(mask);
                }
                Err(ClaspError::EmptyRegion) => regions.push(None),
                Err(e) => return Err(e),
            }
        }
        let map = build_part_label_map(&kept_masks, &labels, image.height, image.width)?;
        Ok(PartOutcome::Accepted(PartLabelResult {
            map,
            granularity: clusters,
            regions,
        }))
    }

    pub fn attribute_scores(&self, image: &ImageRGB) -> Result<Vec<Vec<f64>>> {
        let z = self.embedder.embed_image_region(image)?;
        if !z.is_valid() {
            return Ok(self.attr_prompts.iter().map(|p| vec![0.0; p.len()]).collect());
        }
        self.attr_prompts
            .iter()
            .map(|prompts| prompts.iter().map(|t| cosine_similarity(z.values(), t)).collect())
            .collect()
    }

    pub fn assign_attribute_labels(&self, image: &ImageRGB) -> Result<AttributeLabelSet> {
        let scores = self.attribute_scores(image)?;
        let attributes = scores
            .iter()
            .map(|row| match select_attribute_label(row, ATTRIBUTE_THRESHOLD) {
                Some((label, score)) => AttributeLabel::from_label(label, row.len(), score),
                None => Ok(AttributeLabel::unknown(row.len())),
            })
            .collect::<Result<_>>()?;
        Ok(AttributeLabelSet { attributes })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AttributeRecordEntry {
    pub label: Option<String>,
    pub score: Option<f64>,
    pub known: bool,
}

/// One JSON-lines record of attribute pseudo-labels.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AttributeRecord {
    pub image_id: String,
    pub attributes: std::collections::BTreeMap<String, AttributeRecordEntry>,
}

impl AttributeRecord {
    pub fn new(image_id: &str, schema: &AttributeSchema, labels: &AttributeLabelSet) -> Self {
        let attributes = schema
            .attributes
            .iter()
            .zip(&labels.attributes)
            .map(|(def, l)| {
                (
                    def.name.clone(),
                    AttributeRecordEntry {
                        label: l.label.map(|i| def.labels[i].clone()),
                        score: l.score,
                        known: l.known(),
                    },
                )
            })
            .collect();
        Self {
            image_id: image_id.to_string(),
            attributes,
        }
    }

    pub fn to_label_set(&self, schema: &AttributeSchema) -> Result<AttributeLabelSet> {
        let attributes = schema
            .attributes
            .iter()
            .map(|def| match self.attributes.get(&def.name) {
                Some(AttributeRecordEntry {
                    label: Some(l),
                    score,
                    known: true,
                }) => {
                    let idx = def.labels.iter().position(|x| x == l).ok_or_else(|| {
                        ClaspError::Config(format!("label {l:?} not in attribute {:?}", def.name))
                    })?;
                    AttributeLabel::from_label(idx, def.labels.len(), score.unwrap_or(1.0))
                }
                _ => Ok(AttributeLabel::unknown(def.labels.len())),
            })
            .collect::<Result<_>>()?;
        Ok(AttributeLabelSet { attributes })
    }
}
