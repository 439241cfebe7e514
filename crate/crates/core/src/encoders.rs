//! Embedding providers: a token-grid feature extractor, an image/text joint
//! embedder, and a deterministic color-keyed oracle implementing both.
//!
//! The oracle maps every nonzero pixel to the concept of its nearest palette
//! color. Token features average the per-pixel concept vectors over a patch;
//! region embeddings average them over the nonzero pixels and normalize.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ClaspError, Result};
use crate::tensor::{dot, l2_norm, Tensor};

/// Embedding returned by a joint embedder. The all-zero vector marks an
/// invalid ("empty region") embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    /// L2-normalizes `values`; a zero vector stays zero (invalid).
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let n = l2_norm(&values);
        if n > 0.0 {
            values.iter_mut().for_each(|v| *v /= n);
        }
        Self { values }
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_valid(&self) -> bool {
        l2_norm(&self.values) > 0.0 && self.values.iter().all(|v| v.is_finite())
    }
}

/// Cosine similarity of two nonzero vectors, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(ClaspError::Shape(format!(
            "cosine of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(ClaspError::Domain("cosine similarity of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Declared output shape of a feature extraction stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl StageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

/// A `c × h × w` grid of reals. Stored token-major: the `c` channel values of
/// token `(y, x)` are contiguous at `(y * w + x) * c`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stage_id: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize, stage_id: usize) -> Self {
        Self {
            channels,
            height,
            width,
            stage_id,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_tokens(
        channels: usize,
        height: usize,
        width: usize,
        stage_id: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(ClaspError::Shape("feature map dims must be >= 1".into()));
        }
        if data.len() != channels * height * width {
            return Err(ClaspError::Shape(format!(
                "feature map {channels}x{height}x{width} given {} values",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            stage_id,
            data,
        })
    }

    pub fn shape(&self) -> StageShape {
        StageShape::new(self.channels, self.height, self.width)
    }

    pub fn num_tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn token(&self, t: usize) -> &[f64] {
        &self.data[t * self.channels..(t + 1) * self.channels]
    }

    pub fn token_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.channels..(t + 1) * self.channels]
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + channel]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Global average pooling over all tokens.
    pub fn mean_token(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        for t in 0..self.num_tokens() {
            for (o, v) in out.iter_mut().zip(self.token(t)) {
                *o += v;
            }
        }
        let n = self.num_tokens() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

/// RGB image, channel-major `[3, H, W]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRGB {
    pub id: String,
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl ImageRGB {
    /// Builds an image, clamping every value into `[0, 1]`.
    pub fn new(id: impl Into<String>, height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(ClaspError::Shape("image dims must be >= 1".into()));
        }
        if data.len() != 3 * height * width {
            return Err(ClaspError::Shape(format!(
                "image {height}x{width} given {} values",
                data.len()
            )));
        }
        for v in data.iter_mut() {
            if !v.is_finite() {
                return Err(ClaspError::Numeric("image pixel".into()));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self {
            id: id.into(),
            height,
            width,
            data,
        })
    }

    pub fn zeros(id: impl Into<String>, height: usize, width: usize) -> Self {
        Self {
            id: id.into(),
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f64 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, channel: usize, y: usize, x: usize, v: f64) {
        self.data[(channel * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.iter().enumerate() {
            self.set(c, y, x, *v);
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_zero_pixel(&self, y: usize, x: usize) -> bool {
        self.pixel(y, x).iter().all(|&v| v <= 0.0)
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v <= 0.0)
    }
}

/// Stand-in for a self-supervised token encoder.
pub trait FeatureExtractor {
    fn extract_feature_map(&self, image: &ImageRGB, stage: &StageShape) -> Result<FeatureMap>;
}

/// Stand-in for a joint image/text embedding model.
pub trait JointEmbedder {
    fn dim(&self) -> usize;

    /// Unit-norm embedding of the image content, or the zero (invalid)
    /// embedding when the image has no nonzero pixel.
    fn embed_image_region(&self, image: &ImageRGB) -> Result<EmbeddingVector>;

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptEntry {
    pub name: String,
    pub vector: Vec<f64>,
}

fn default_person_concept() -> String {
    "person".to_string()
}

/// Serializable description of the oracle: concept vectors plus the color
/// palette that paints them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    pub seed: u64,
    pub vocabulary: Vec<ConceptEntry>,
    /// `#rrggbb` → concept name.
    pub palette: BTreeMap<String, String>,
    #[serde(default = "default_person_concept")]
    pub person_concept: String,
}

pub const ORACLE_DIM: usize = 16;

/// Weight of the shared person axis in every foreground concept.
const PERSON_AXIS_WEIGHT: f64 = 4.0;
/// Weight of an attribute variant's own axis relative to its part axis.
const VARIANT_WEIGHT: f64 = 0.7;

pub const DEFAULT_PARTS: [&str; 7] = ["hair", "face", "arm", "shirt", "pants", "legs", "shoes"];

/// Attribute variants: (variant concept, part it recolors).
pub const DEFAULT_VARIANTS: [(&str, &str); 6] = [
    ("Female", "hair"),
    ("Male", "hair"),
    ("Long Sleeve", "shirt"),
    ("Short Sleeve", "shirt"),
    ("Trousers", "pants"),
    ("Shorts", "pants"),
];

const DEFAULT_COLORS: [(&str, &str); 16] = [
    ("#d9a066", "person"),
    ("#808080", "background"),
    ("#40c040", "car"),
    ("#4a2a10", "hair"),
    ("#f0d0e0", "face"),
    ("#00e0a0", "arm"),
    ("#c02020", "shirt"),
    ("#204080", "pants"),
    ("#a0a040", "legs"),
    ("#e000e0", "shoes"),
    ("#b04080", "Female"),
    ("#806000", "Male"),
    ("#ff6060", "Long Sleeve"),
    ("#f0a020", "Short Sleeve"),
    ("#2040e0", "Trousers"),
    ("#60e0e0", "Shorts"),
];

/// Orthonormal basis from seeded Gaussian draws (modified Gram-Schmidt).
fn seeded_basis(dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v = Tensor::randn(&[dim], 1.0, &mut rng).data().to_vec();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = l2_norm(&v);
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    basis
}

fn combine(terms: &[(f64, &[f64])]) -> Vec<f64> {
    let dim = terms[0].1.len();
    let mut v = vec![0.0; dim];
    for (w, b) in terms {
        v.iter_mut().zip(b.iter()).for_each(|(x, y)| *x += w * y);
    }
    let n = l2_norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

impl OracleSpec {
    /// The shipped oracle: `person`, `background` and `car` on mutually
    /// orthogonal axes; each body part shares the person axis plus its own;
    /// each attribute variant adds a further axis to the part it recolors.
    pub fn person_default(seed: u64) -> Self {
        let basis = seeded_basis(ORACLE_DIM, seed);
        let person = &basis[0];
        let mut vocabulary = vec![
            ConceptEntry {
                name: "person".into(),
                vector: person.clone(),
            },
            ConceptEntry {
                name: "background".into(),
                vector: basis[1].clone(),
            },
            ConceptEntry {
                name: "car".into(),
                vector: basis[2].clone(),
            },
        ];
        for (i, part) in DEFAULT_PARTS.iter().enumerate() {
            vocabulary.push(ConceptEntry {
                name: part.to_string(),
                vector: combine(&[(PERSON_AXIS_WEIGHT, person), (1.0, &basis[3 + i])]),
            });
        }
        for (i, (variant, part)) in DEFAULT_VARIANTS.iter().enumerate() {
            let pi = DEFAULT_PARTS.iter().position(|p| p == part).unwrap();
            vocabulary.push(ConceptEntry {
                name: variant.to_string(),
                vector: combine(&[
                    (PERSON_AXIS_WEIGHT, person),
                    (1.0, &basis[3 + pi]),
                    (VARIANT_WEIGHT, &basis[3 + DEFAULT_PARTS.len() + i]),
                ]),
            });
        }
        let palette = DEFAULT_COLORS
            .iter()
            .map(|(c, n)| (c.to_string(), n.to_string()))
            .collect();
        Self {
            seed,
            vocabulary,
            palette,
            person_concept: "person".into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.vocabulary.first().map_or(0, |c| c.vector.len())
    }

    pub fn concept(&self, name: &str) -> Option<&[f64]> {
        self.vocabulary
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.vector.as_slice())
    }

    /// Palette color (as `[0,1]` RGB) painting `concept`.
    pub fn color_of(&self, concept: &str) -> Option<[f64; 3]> {
        self.palette
            .iter()
            .find(|(_, n)| n.as_str() == concept)
            .and_then(|(c, _)| parse_hex_color(c))
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if dim == 0 {
            return Err(ClaspError::Config("oracle vocabulary is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.vocabulary {
            if !seen.insert(c.name.as_str()) {
                return Err(ClaspError::Config(format!("duplicate concept {:?}", c.name)));
            }
            if c.vector.len() != dim {
                return Err(ClaspError::Config(format!(
                    "concept {:?} has dimension {}, expected {dim}",
                    c.name,
                    c.vector.len()
                )));
            }
            if c.vector.iter().any(|v| !v.is_finite()) || (l2_norm(&c.vector) - 1.0).abs() > 1e-6 {
                return Err(ClaspError::Config(format!(
                    "concept {:?} is not a finite unit vector",
                    c.name
                )));
            }
        }
        if self.concept(&self.person_concept).is_none() {
            return Err(ClaspError::Config(format!(
                "person concept {:?} missing from vocabulary",
                self.person_concept
            )));
        }
        for (color, name) in &self.palette {
            let rgb = parse_hex_color(color)
                .ok_or_else(|| ClaspError::Config(format!("bad palette color {color:?}")))?;
            if rgb.iter().all(|&v| v == 0.0) {
                return Err(ClaspError::Config("black is reserved for masked pixels".into()));
            }
            if self.concept(name).is_none() {
                return Err(ClaspError::Config(format!("palette names unknown concept {name:?}")));
            }
        }
        // every concept must be its own unique nearest neighbour
        for a in &self.vocabulary {
            for b in &self.vocabulary {
                if a.name != b.name && dot(&a.vector, &b.vector) >= 1.0 - 1e-9 {
                    return Err(ClaspError::Config(format!(
                        "concepts {:?} and {:?} are indistinguishable",
                        a.name, b.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let spec: Self = serde_json::from_str(&text).map_err(|e| ClaspError::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub fn parse_hex_color(s: &str) -> Option<[f64; 3]> {
    let s = s.strip_prefix('#')?;
    if s.len() != 6 {
        return None;
    }
    let mut rgb = [0.0; 3];
    for (i, v) in rgb.iter_mut().enumerate() {
        let byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
        *v = f64::from(byte) / 255.0;
    }
    Some(rgb)
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn contains_phrase(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Deterministic color-keyed provider used by every exact test.
#[derive(Debug, Clone)]
pub struct OracleEncoder {
    spec: OracleSpec,
    colors: Vec<([f64; 3], usize)>,
    concept_words: Vec<Vec<String>>,
    person_index: usize,
}

impl OracleEncoder {
    pub fn new(spec: OracleSpec) -> Result<Self> {
        spec.validate()?;
        let colors = spec
            .palette
            .iter()
            .map(|(c, name)| {
                let idx = spec.vocabulary.iter().position(|v| &v.name == name).unwrap();
                (parse_hex_color(c).unwrap(), idx)
            })
            .collect();
        let concept_words = spec.vocabulary.iter().map(|c| words(&c.name)).collect();
        let person_index = spec
            .vocabulary
            .iter()
            .position(|c| c.name == spec.person_concept)
            .unwrap();
        Ok(Self {
            spec,
            colors,
            concept_words,
            person_index,
        })
    }

    pub fn person_default(seed: u64) -> Self {
        Self::new(OracleSpec::person_default(seed)).expect("shipped oracle is valid")
    }

    pub fn spec(&self) -> &OracleSpec {
        &self.spec
    }

    /// Concept index of a pixel, `None` for a zero (masked) pixel.
    pub fn pixel_concept(&self, rgb: [f64; 3]) -> Option<usize> {
        if rgb.iter().all(|&v| v <= 0.0) {
            return None;
        }
        self.colors
            .iter()
            .map(|(c, idx)| {
                let d: f64 = c.iter().zip(&rgb).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, *idx)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, idx)| idx)
    }

    fn concept_vector(&self, idx: usize) -> &[f64] {
        &self.spec.vocabulary[idx].vector
    }
}

impl FeatureExtractor for OracleEncoder {
    fn extract_feature_map(&self, image: &ImageRGB, stage: &StageShape) -> Result<FeatureMap> {
        let dim = self.spec.dim();
        if stage.channels != dim {
            return Err(ClaspError::Config(format!(
                "oracle emits {dim} channels, stage declares {}",
                stage.channels
            )));
        }
        if stage.height == 0
            || stage.width == 0
            || !image.height.is_multiple_of(stage.height)
            || !image.width.is_multiple_of(stage.width)
        {
            return Err(ClaspError::Config(format!(
                "token grid {}x{} does not tile image {}x{}",
                stage.height, stage.width, image.height, image.width
            )));
        }
        let ph = image.height / stage.height;
        let pw = image.width / stage.width;
        let mut fm = FeatureMap::zeros(dim, stage.height, stage.width, 0);
        let scale = 1.0 / (ph * pw) as f64;
        for ty in 0..stage.height {
            for tx in 0..stage.width {
                let t = ty * stage.width + tx;
                for y in ty * ph..(ty + 1) * ph {
                    for x in tx * pw..(tx + 1) * pw {
                        if let Some(ci) = self.pixel_concept(image.pixel(y, x)) {
                            let v = &self.spec.vocabulary[ci].vector;
                            for (o, c) in fm.token_mut(t).iter_mut().zip(v) {
                                *o += scale * c;
                            }
                        }
                    }
                }
            }
        }
        Ok(fm)
    }
}

impl JointEmbedder for OracleEncoder {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn embed_image_region(&self, image: &ImageRGB) -> Result<EmbeddingVector> {
        let dim = self.spec.dim();
        let mut hist = vec![0usize; self.spec.vocabulary.len()];
        let mut count = 0usize;
        for y in 0..image.height {
            for x in 0..image.width {
                if let Some(ci) = self.pixel_concept(image.pixel(y, x)) {
                    hist[ci] += 1;
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Ok(EmbeddingVector::empty(dim));
        }
        let mut sum = vec![0.0; dim];
        for (ci, &n) in hist.iter().enumerate().filter(|(_, n)| **n > 0) {
            let w = n as f64 / count as f64;
            for (s, v) in sum.iter_mut().zip(self.concept_vector(ci)) {
                *s += w * v;
            }
        }
        Ok(EmbeddingVector::normalized(sum))
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(ClaspError::Domain("empty text".into()));
        }
        let ws = words(text);
        let mut hits: Vec<usize> = self
            .concept_words
            .iter()
            .enumerate()
            .filter(|(_, cw)| contains_phrase(&ws, cw))
            .map(|(i, _)| i)
            .collect();
        if hits.len() > 1 {
            hits.retain(|&i| i != self.person_index);
        }
        let longest = hits
            .iter()
            .map(|&i| self.concept_words[i].len())
            .max()
            .ok_or_else(|| ClaspError::Lookup(text.to_string()))?;
        hits.retain(|&i| self.concept_words[i].len() == longest);
        match hits.as_slice() {
            [i] => Ok(EmbeddingVector::new(self.concept_vector(*i).to_vec())),
            _ => Err(ClaspError::Lookup(text.to_string())),
        }
    }
}
