//! Synthetic labeled documents: a rendered page image plus a token sequence.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

/// Documents per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassSizes {
    Uniform(usize),
    PerClass(Vec<usize>),
}

impl ClassSizes {
    /// Geometrically decaying class sizes summing to `total` (largest class
    /// about `skew` times the smallest).
    pub fn skewed(total: usize, num_classes: usize, skew: f64) -> Self {
        let r = if num_classes > 1 { skew.powf(-1.0 / (num_classes - 1) as f64) } else { 1.0 };
        let weights: Vec<f64> = (0..num_classes).map(|i| r.powi(i as i32)).collect();
        let sum: f64 = weights.iter().sum();
        let mut sizes: Vec<usize> = weights.iter().map(|w| (w / sum * total as f64).floor() as usize).collect();
        let mut left = total - sizes.iter().sum::<usize>();
        for s in sizes.iter_mut() {
            if left == 0 {
                break;
            }
            *s += 1;
            left -= 1;
        }
        ClassSizes::PerClass(sizes)
    }

    /// Sizes spreading `total` as evenly as possible.
    pub fn balanced(total: usize, num_classes: usize) -> Self {
        ClassSizes::PerClass((0..num_classes).map(|c| total / num_classes + usize::from(c < total % num_classes)).collect())
    }

    pub fn sizes(&self, num_classes: usize) -> Result<Vec<usize>> {
        match self {
            ClassSizes::Uniform(n) => Ok(vec![*n; num_classes]),
            ClassSizes::PerClass(v) if v.len() == num_classes => Ok(v.clone()),
            ClassSizes::PerClass(v) => invalid(format!("{} class sizes for {num_classes} classes", v.len())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub num_classes: usize,
    pub docs_per_class: ClassSizes,
    pub image_size: usize,
    /// Raw content vocabulary (before special tokens).
    pub vocab_size: usize,
    /// Maximum content tokens per document.
    pub text_len: usize,
    pub image_noise: f64,
    pub text_noise: f64,
    /// Probability that both modalities carry the document's class.
    pub modality_agreement: f64,
    /// When set, a disagreeing document has one modality (chosen uniformly)
    /// stripped of class signal instead of pointing at a random class.
    #[serde(default)]
    pub complementary: bool,
}

impl CorpusSpec {
    pub fn desk(num_classes: usize, docs_per_class: usize) -> Self {
        Self {
            num_classes,
            docs_per_class: ClassSizes::Uniform(docs_per_class),
            image_size: 32,
            vocab_size: 124,
            text_len: 24,
            image_noise: 0.1,
            text_noise: 0.1,
            modality_agreement: 1.0,
            complementary: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return invalid("need at least two classes");
        }
        let sizes = self.docs_per_class.sizes(self.num_classes)?;
        if sizes.iter().any(|&s| s == 0) {
            return invalid("every class needs at least one document");
        }
        if self.image_size < GRID {
            return invalid(format!("image_size must be at least {GRID}"));
        }
        if self.text_len == 0 {
            return invalid("text_len must be positive");
        }
        if self.vocab_size < 2 * self.num_classes + common_words(self.vocab_size) {
            return invalid(format!("vocabulary of {} too small for {} classes", self.vocab_size, self.num_classes));
        }
        for (name, v) in [("image_noise", self.image_noise), ("text_noise", self.text_noise), ("modality_agreement", self.modality_agreement)] {
            if !(0.0..=1.0).contains(&v) {
                return invalid(format!("{name} = {v} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Which class, if any, a modality was rendered from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    Class(usize),
    Erased,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    /// `[1, h, w]` grayscale in `[0, 1]`, 1 being paper white.
    pub image: Tensor<f32>,
    /// Raw content token ids, each `< vocab_size`.
    pub tokens: Vec<u32>,
    pub label: usize,
    pub image_signal: Signal,
    pub text_signal: Signal,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub seed: u64,
    pub docs: Vec<Document>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.docs.iter().map(|d| d.label).collect()
    }

    /// Documents at `idx`, in order.
    pub fn subset(&self, idx: &[usize]) -> Vec<&Document> {
        idx.iter().map(|&i| &self.docs[i]).collect()
    }
}

const GRID: usize = 4;
const INK: f64 = 0.15;
const KEYWORD_RATE: f64 = 0.5;

fn common_words(vocab: usize) -> usize {
    (vocab / 4).max(1)
}

/// One `GRID x GRID` block mask per class, pairwise differing in at least
/// three cells.
fn layouts(num_classes: usize, seed: u64) -> Vec<[bool; GRID * GRID]> {
    let mut rng = rng_for(seed, &[0x1A70]);
    let mut out: Vec<[bool; GRID * GRID]> = Vec::with_capacity(num_classes);
    let mut tries = 0usize;
    while out.len() < num_classes {
        let mut m = [false; GRID * GRID];
        for cell in m.iter_mut() {
            *cell = rng.random_bool(0.5);
        }
        let on = m.iter().filter(|&&b| b).count();
        let min_dist = if tries > 100_000 { 1 } else { 3 };
        let far = out.iter().all(|o| o.iter().zip(&m).filter(|(a, b)| a != b).count() >= min_dist);
        if (3..=GRID * GRID - 3).contains(&on) && far {
            out.push(m);
        }
        tries += 1;
    }
    out
}

/// Renders a layout: inked cells hold horizontal text-like rules on white.
fn render_template(mask: &[bool; GRID * GRID], size: usize) -> Vec<f64> {
    let mut img = vec![1.0; size * size];
    for y in 0..size {
        let gy = y * GRID / size;
        let ruled = size < 2 * GRID * 2 || y % 2 == 0;
        for x in 0..size {
            let gx = x * GRID / size;
            if mask[gy * GRID + gx] && ruled {
                img[y * size + x] = INK;
            }
        }
    }
    img
}

/// Class templates plus the neutral (mean) layout used for erased images.
pub fn class_templates(spec: &CorpusSpec, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let size = spec.image_size;
    let t: Vec<Vec<f64>> = layouts(spec.num_classes, seed).iter().map(|m| render_template(m, size)).collect();
    let mut mean = vec![0.0; size * size];
    for tpl in &t {
        for (m, v) in mean.iter_mut().zip(tpl) {
            *m += v / t.len() as f64;
        }
    }
    (t, mean)
}

/// Keyword band of `class` within the raw vocabulary.
pub fn keyword_range(spec: &CorpusSpec, class: usize) -> std::ops::Range<u32> {
    let common = common_words(spec.vocab_size);
    let band = (spec.vocab_size - common) / spec.num_classes;
    let start = (common + class * band) as u32;
    start..start + band as u32
}

fn render_text(spec: &CorpusSpec, signal: Signal, rng: &mut impl Rng) -> Vec<u32> {
    let len = rng.random_range(spec.text_len.div_ceil(2)..=spec.text_len);
    let common = common_words(spec.vocab_size) as u32;
    (0..len)
        .map(|_| {
            if rng.random_bool(spec.text_noise) {
                return rng.random_range(0..spec.vocab_size as u32);
            }
            match signal {
                Signal::Class(c) if rng.random_bool(KEYWORD_RATE) => rng.random_range(keyword_range(spec, c)),
                _ => rng.random_range(0..common),
            }
        })
        .collect()
}

fn render_image(base: &[f64], size: usize, noise: f64, rng: &mut impl Rng) -> Tensor<f32> {
    let data: Vec<f32> = base.iter().map(|&t| ((1.0 - noise) * t + noise * rng.random::<f64>()) as f32).collect();
    Tensor::new(&[1, size, size], data).unwrap()
}

/// Deterministic corpus for `(spec, seed)`. Documents are ordered by class,
/// then by index within class.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let sizes = spec.docs_per_class.sizes(spec.num_classes)?;
    let (templates, neutral) = class_templates(spec, seed);
    let mut docs = Vec::with_capacity(sizes.iter().sum());
    let mut id = 0u64;
    for (label, &n) in sizes.iter().enumerate() {
        for _ in 0..n {
            let mut rng = rng_for(seed, &[0xD0C, id]);
            id += 1;
            let (image_signal, text_signal) = if rng.random_bool(spec.modality_agreement) {
                (Signal::Class(label), Signal::Class(label))
            } else if spec.complementary {
                if rng.random_bool(0.5) {
                    (Signal::Erased, Signal::Class(label))
                } else {
                    (Signal::Class(label), Signal::Erased)
                }
            } else {
                (Signal::Class(label), Signal::Class(rng.random_range(0..spec.num_classes)))
            };
            let base = match image_signal {
                Signal::Class(c) => &templates[c],
                Signal::Erased => &neutral,
            };
            let image = render_image(base, spec.image_size, spec.image_noise, &mut rng);
            let tokens = render_text(spec, text_signal, &mut rng);
            docs.push(Document { image, tokens, label, image_signal, text_signal });
        }
    }
    Ok(Corpus { spec: spec.clone(), seed, docs })
}

/// Shuffled copy of `0..n`, deterministic in `seed`.
pub fn shuffled(n: usize, seed: u64, tags: &[u64]) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut rng_for(seed, tags));
    v
}

#[derive(Debug, Serialize, Deserialize)]
struct DocEntry {
    id: usize,
    label: usize,
    image: String,
    tokens: String,
    image_signal: Signal,
    text_signal: Signal,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    spec: CorpusSpec,
    seed: u64,
    documents: Vec<DocEntry>,
}

pub const MANIFEST: &str = "corpus.json";

/// Writes `corpus.json`, `images/<id>.bin` and `tokens/<id>.txt` under `dir`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("tokens"))?;
    let mut documents = Vec::with_capacity(corpus.len());
    for (id, d) in corpus.docs.iter().enumerate() {
        let image = format!("images/{id:06}.bin");
        let tokens = format!("tokens/{id:06}.txt");
        let mut w = BufWriter::new(fs::File::create(dir.join(&image))?);
        d.image.write_to(&mut w)?;
        let line: Vec<String> = d.tokens.iter().map(|t| t.to_string()).collect();
        fs::write(dir.join(&tokens), line.join(" ") + "\n")?;
        documents.push(DocEntry { id, label: d.label, image, tokens, image_signal: d.image_signal, text_signal: d.text_signal });
    }
    let m = Manifest { spec: corpus.spec.clone(), seed: corpus.seed, documents };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join(MANIFEST);
    let raw = fs::read_to_string(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_str(&raw)?;
    m.spec.validate()?;
    let mut docs = Vec::with_capacity(m.documents.len());
    for e in m.documents {
        let image = Tensor::<f32>::read_from(&mut BufReader::new(fs::File::open(dir.join(&e.image))?))?;
        let s = m.spec.image_size;
        if image.shape() != [1, s, s] {
            return Err(Error::Format(format!("{}: shape {:?}, expected [1, {s}, {s}]", e.image, image.shape())));
        }
        let text = fs::read_to_string(dir.join(&e.tokens))?;
        let tokens = text
            .split_whitespace()
            .map(|t| t.parse::<u32>().map_err(|_| Error::Format(format!("{}: bad token `{t}`", e.tokens))))
            .collect::<Result<Vec<u32>>>()?;
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= m.spec.vocab_size) {
            return Err(Error::Format(format!("{}: token {bad} outside vocabulary", e.tokens)));
        }
        if e.label >= m.spec.num_classes {
            return Err(Error::Format(format!("document {}: label {} out of range", e.id, e.label)));
        }
        docs.push(Document { image, tokens, label: e.label, image_signal: e.image_signal, text_signal: e.text_signal });
    }
    Ok(Corpus { spec: m.spec, seed: m.seed, docs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest_template(img: &Tensor<f32>, templates: &[Vec<f64>]) -> usize {
        let d = |t: &Vec<f64>| img.data().iter().zip(t).map(|(&a, b)| (a as f64 - b).powi(2)).sum::<f64>();
        (0..templates.len()).min_by(|&a, &b| d(&templates[a]).total_cmp(&d(&templates[b]))).unwrap()
    }

    #[test]
    fn balanced_construction() {
        let c = generate_corpus(&CorpusSpec::desk(4, 25), 1).unwrap();
        assert_eq!(c.len(), 100);
        for k in 0..4 {
            assert_eq!(c.docs.iter().filter(|d| d.label == k).count(), 25);
        }
        for d in &c.docs {
            assert!(d.tokens.iter().all(|&t| (t as usize) < c.spec.vocab_size));
            assert!(d.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn noiseless_images_are_template_separable() {
        let spec = CorpusSpec { image_noise: 0.0, text_noise: 0.0, ..CorpusSpec::desk(10, 5) };
        let c = generate_corpus(&spec, 7).unwrap();
        let (t, _) = class_templates(&spec, 7);
        assert!(c.docs.iter().all(|d| nearest_template(&d.image, &t) == d.label));
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let spec = CorpusSpec { modality_agreement: 0.7, ..CorpusSpec::desk(3, 10) };
        let a = generate_corpus(&spec, 11).unwrap();
        let b = generate_corpus(&spec, 11).unwrap();
        assert_eq!(a.docs, b.docs);
        let c = generate_corpus(&spec, 12).unwrap();
        assert_ne!(a.docs, c.docs);
    }

    #[test]
    fn agreement_fraction_monte_carlo() {
        let spec = CorpusSpec { modality_agreement: 0.5, image_size: 4, ..CorpusSpec::desk(4, 2500) };
        let c = generate_corpus(&spec, 3).unwrap();
        let matching = c.docs.iter().filter(|d| d.text_signal == Signal::Class(d.label)).count() as f64 / c.len() as f64;
        let expect = 0.5 + 0.5 / 4.0;
        assert!((matching - expect).abs() < 0.02, "{matching}");
    }

    #[test]
    fn complementary_erases_exactly_one_modality() {
        let spec = CorpusSpec { modality_agreement: 1.0 / 3.0, complementary: true, image_size: 4, ..CorpusSpec::desk(4, 1000) };
        let c = generate_corpus(&spec, 5).unwrap();
        let mut erased = 0;
        for d in &c.docs {
            match (d.image_signal, d.text_signal) {
                (Signal::Erased, Signal::Erased) => panic!("both modalities erased"),
                (Signal::Erased, _) | (_, Signal::Erased) => erased += 1,
                (Signal::Class(a), Signal::Class(b)) => assert!(a == d.label && b == d.label),
            }
        }
        let frac = erased as f64 / c.len() as f64;
        assert!((frac - 2.0 / 3.0).abs() < 0.03, "{frac}");
    }

    #[test]
    fn keyword_bands_disjoint() {
        let spec = CorpusSpec::desk(10, 1);
        for a in 0..10 {
            let ra = keyword_range(&spec, a);
            assert!(!ra.is_empty() && ra.end as usize <= spec.vocab_size);
            for b in a + 1..10 {
                assert!(ra.end <= keyword_range(&spec, b).start);
            }
        }
    }

    #[test]
    fn skewed_sizes_sum() {
        let ClassSizes::PerClass(s) = ClassSizes::skewed(3482, 10, 4.0) else { panic!() };
        assert_eq!(s.iter().sum::<usize>(), 3482);
        assert!(s[0] > 3 * s[9]);
        let ClassSizes::PerClass(s) = ClassSizes::balanced(3482, 10) else { panic!() };
        assert_eq!(s.iter().sum::<usize>(), 3482);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec { modality_agreement: 0.5, ..CorpusSpec::desk(3, 4) };
        let c = generate_corpus(&spec, 9).unwrap();
        save_corpus(&c, dir.path()).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back.docs, c.docs);
        assert_eq!(back.spec, c.spec);
        let again = tempfile::tempdir().unwrap();
        save_corpus(&c, again.path()).unwrap();
        assert_eq!(
            fs::read(dir.path().join(MANIFEST)).unwrap(),
            fs::read(again.path().join(MANIFEST)).unwrap()
        );
    }
}
