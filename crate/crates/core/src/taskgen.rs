//! Synthetic few-shot segmentation tasks with a fold protocol.
//!
//! Every class owns a texture: the toy encoder's rendering of a blend of the
//! class's text embedding (weight `text_alignment`) and a private random
//! direction. Objects are disks, rectangles and triangles pasted onto a
//! textured background.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Image, LabelMap, SampleSource, SegSample};
use crate::embeddings::{
    ClassEntry, ClassId, ClassVocabulary, EmbeddingProvider, ProviderSpec, Split, ToyConfig,
    ToyEncoder, VisualPrompts, BACKGROUND,
};
use crate::error::{Error, Result};
use crate::numerics::derive_seed;

const TEXTURE_STREAM: u64 = 0x7e87;
const BACKGROUND_STREAM: u64 = 0xb6;
const MANIFEST_VERSION: u32 = 1;

const CLASS_NAMES: [&str; 20] = [
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "table", "dog", "horse", "motorbike", "person", "plant", "sheep", "sofa", "train", "monitor",
];

pub fn class_name(id: ClassId) -> String {
    CLASS_NAMES
        .get(id as usize - 1)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{id}"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk,
    Rectangle,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthTaskSpec {
    pub n_classes: usize,
    pub folds: usize,
    pub fold: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Range of object radius as a fraction of the shorter image side.
    pub object_size: [f64; 2],
    pub shapes: Vec<Shape>,
    pub samples_per_base_class: usize,
    /// Support images per novel class.
    pub shots: usize,
    pub test_images: usize,
    /// Weight of the text embedding in each class texture, in [0, 1].
    pub text_alignment: f64,
    /// Per-instance appearance perturbation.
    pub appearance_sigma: f64,
    pub pixel_noise: f64,
    /// Pixel amplitude of rendered textures.
    pub contrast: f64,
    pub seed: u64,
    /// Encoder whose text side and patch embedding define class appearance;
    /// fixes the image size.
    pub encoder: ToyConfig,
}

impl Default for SynthTaskSpec {
    fn default() -> Self {
        Self {
            n_classes: 8,
            folds: 4,
            fold: 0,
            min_objects: 1,
            max_objects: 3,
            object_size: [0.2, 0.35],
            shapes: vec![Shape::Disk, Shape::Rectangle, Shape::Triangle],
            samples_per_base_class: 200,
            shots: 1,
            test_images: 100,
            text_alignment: 0.6,
            appearance_sigma: 0.1,
            pixel_noise: 0.1,
            contrast: 16.0,
            seed: 0,
            encoder: ToyConfig::default(),
        }
    }
}

impl SynthTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.folds == 0 || self.n_classes == 0 || self.n_classes % self.folds != 0 {
            return bad(format!(
                "{} folds must evenly divide {} classes",
                self.folds, self.n_classes
            ));
        }
        if self.n_classes >= 255 {
            return bad("at most 254 classes".into());
        }
        if self.fold >= self.folds {
            return bad(format!("fold {} out of 0..{}", self.fold, self.folds));
        }
        if self.folds == 1 {
            return bad("a single fold leaves no base classes".into());
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("objects per image must satisfy 1 ≤ min ≤ max".into());
        }
        if !(self.object_size[0] > 0.0 && self.object_size[0] <= self.object_size[1]) {
            return bad(format!("object size range {:?} is empty", self.object_size));
        }
        if self.shapes.is_empty() {
            return bad("no shapes".into());
        }
        if self.samples_per_base_class == 0 {
            return bad("samples_per_base_class must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.text_alignment) {
            return bad(format!("text_alignment {} not in [0, 1]", self.text_alignment));
        }
        if !(self.appearance_sigma >= 0.0 && self.pixel_noise >= 0.0 && self.contrast > 0.0) {
            return bad("noise levels must be ≥ 0 and contrast > 0".into());
        }
        self.encoder.validate().map_err(|e| Error::Spec(e.to_string()))
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.encoder.image_size()
    }

    /// Novel classes of the fold: `fold·(n/folds)+1 ..= (fold+1)·(n/folds)`.
    pub fn novel_ids(&self) -> Vec<ClassId> {
        let per = self.n_classes / self.folds;
        (self.fold * per + 1..=(self.fold + 1) * per)
            .map(|c| c as ClassId)
            .collect()
    }

    pub fn base_ids(&self) -> Vec<ClassId> {
        let novel = self.novel_ids();
        (1..=self.n_classes as ClassId)
            .filter(|c| !novel.contains(c))
            .collect()
    }

    pub fn classes(&self) -> Vec<ClassEntry> {
        let novel = self.novel_ids();
        (1..=self.n_classes as ClassId)
            .map(|c| {
                let split = if novel.contains(&c) { Split::Novel } else { Split::Base };
                ClassEntry::new(c, class_name(c), split)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    BaseTrain,
    NovelSupport,
    Test,
}

/// Base-training, novel-support and test splits over one class list.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub provider: ProviderSpec,
    pub classes: Vec<ClassEntry>,
    pub spec: Option<SynthTaskSpec>,
    pub base_train: Vec<SegSample>,
    pub novel_support: Vec<SegSample>,
    pub test: Vec<SegSample>,
}

impl TaskData {
    pub fn base_classes(&self) -> Vec<ClassEntry> {
        self.classes
            .iter()
            .filter(|c| c.split == Split::Base)
            .cloned()
            .collect()
    }

    pub fn novel_classes(&self) -> Vec<ClassEntry> {
        self.classes
            .iter()
            .filter(|c| c.split.is_novel())
            .cloned()
            .collect()
    }

    pub fn base_vocab(&self) -> Result<ClassVocabulary> {
        ClassVocabulary::new(self.base_classes())
    }

    /// Support samples whose labels only use `ids`.
    pub fn support_for(&self, ids: &[ClassId]) -> Vec<SegSample> {
        self.novel_support
            .iter()
            .filter(|s| {
                let cls = s.labels.classes();
                cls.iter().any(|c| ids.contains(c))
                    && cls.iter().all(|c| *c == BACKGROUND || ids.contains(c))
            })
            .cloned()
            .collect()
    }
}

/// Texture direction of every class and the background, in embedding space.
struct Palette {
    classes: Vec<Vec<f64>>,
    background: Vec<f64>,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    normalized(v)
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn palette(spec: &SynthTaskSpec, enc: &ToyEncoder) -> Palette {
    let d = spec.encoder.d;
    let a = spec.text_alignment;
    let classes = (1..=spec.n_classes as ClassId)
        .map(|c| {
            let t = normalized(enc.text_embedding(&class_name(c)));
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, TEXTURE_STREAM, c as u64]));
            let v = unit_gaussian(&mut rng, d);
            let b = (1.0 - a * a).sqrt();
            normalized(t.iter().zip(&v).map(|(t, v)| a * t + b * v).collect())
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, BACKGROUND_STREAM]));
    Palette {
        classes,
        background: unit_gaussian(&mut rng, d),
    }
}

fn perturbed(base: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = base.len() as f64;
    normalized(
        base.iter()
            .map(|b| b + sigma * rng.sample::<f64, _>(StandardNormal) / d.sqrt())
            .collect(),
    )
}

fn inside(shape: Shape, geo: &[f64; 6], y: f64, x: f64) -> bool {
    match shape {
        Shape::Disk => (y - geo[0]).powi(2) + (x - geo[1]).powi(2) <= geo[2] * geo[2],
        Shape::Rectangle => (y - geo[0]).abs() <= geo[2] && (x - geo[1]).abs() <= geo[3],
        Shape::Triangle => {
            let (cy, cx, r, phase) = (geo[0], geo[1], geo[2], geo[4]);
            let v: Vec<(f64, f64)> = (0..3)
                .map(|k| {
                    let ang = phase + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
                    (cy + r * ang.sin(), cx + r * ang.cos())
                })
                .collect();
            let side = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) * (y - a.0) - (b.0 - a.0) * (x - a.1);
            let s = [side(v[0], v[1]), side(v[1], v[2]), side(v[2], v[0])];
            s.iter().all(|&z| z >= 0.0) || s.iter().all(|&z| z <= 0.0)
        }
    }
}

/// Draws one image whose objects are `objects` (painted in order, so the last
/// one is on top).
fn draw(
    spec: &SynthTaskSpec,
    enc: &ToyEncoder,
    pal: &Palette,
    objects: &[ClassId],
    rng: &mut ChaCha8Rng,
) -> (Image, LabelMap) {
    let (h, w) = spec.image_size();
    let p = spec.encoder.patch;
    let ch = spec.encoder.channels;
    let side = h.min(w) as f64;
    let [lo, hi] = spec.object_size;
    let mut labels = LabelMap::filled(h, w, BACKGROUND);
    let mut texture_of = vec![0usize; h * w];
    let bg = perturbed(&pal.background, 0.5, rng);
    let mut textures = vec![enc.render_patch(&bg)];
    for &c in objects {
        let shape = *spec.shapes.choose(rng).expect("validated nonempty");
        let geo = [
            rng.gen_range(0.2..0.8) * h as f64,
            rng.gen_range(0.2..0.8) * w as f64,
            rng.gen_range(lo..=hi) * side,
            rng.gen_range(0.7 * lo..=hi) * side,
            rng.gen_range(0.0..std::f64::consts::TAU),
            0.0,
        ];
        let appearance = perturbed(&pal.classes[c as usize - 1], spec.appearance_sigma, rng);
        textures.push(enc.render_patch(&appearance));
        let t = textures.len() - 1;
        for y in 0..h {
            for x in 0..w {
                if inside(shape, &geo, y as f64 + 0.5, x as f64 + 0.5) {
                    labels.data[y * w + x] = c;
                    texture_of[y * w + x] = t;
                }
            }
        }
    }
    let mut img = Image::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            let tex = &textures[texture_of[y * w + x]];
            let base = ((y % p) * p + x % p) * ch;
            for (k, v) in img.pixel_mut(y, x).iter_mut().enumerate() {
                let noise: f64 = rng.sample(StandardNormal);
                *v = (spec.contrast * tex[base + k] + spec.pixel_noise * noise) as f32;
            }
        }
    }
    (img, labels)
}

fn objects_for(spec: &SynthTaskSpec, primary: ClassId, pool: &[ClassId], rng: &mut ChaCha8Rng) -> Vec<ClassId> {
    let n = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut objs: Vec<ClassId> = (1..n).map(|_| *pool.choose(rng).expect("nonempty pool")).collect();
    objs.push(primary);
    objs
}

fn sample(key: String, img: Image, labels: LabelMap) -> SegSample {
    SegSample {
        key,
        source: SampleSource::Pixels(Arc::new(img)),
        labels,
    }
}

/// Generates the three splits of one fold.
pub fn generate(spec: &SynthTaskSpec) -> Result<TaskData> {
    spec.validate()?;
    let enc = ToyEncoder::new(spec.encoder.clone())?;
    let pal = palette(spec, &enc);
    let base = spec.base_ids();
    let novel = spec.novel_ids();
    let all: Vec<ClassId> = (1..=spec.n_classes as ClassId).collect();
    let rng_for = |role: u64, i: usize| ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, role, i as u64]));

    let base_train = (0..spec.samples_per_base_class * base.len())
        .map(|i| {
            let mut rng = rng_for(1, i);
            let objs = objects_for(spec, base[i % base.len()], &base, &mut rng);
            let (img, labels) = draw(spec, &enc, &pal, &objs, &mut rng);
            sample(format!("base_{i:05}"), img, labels)
        })
        .collect();
    let mut novel_support = Vec::new();
    for &c in &novel {
        for k in 0..spec.shots {
            let mut rng = rng_for(2, c as usize * 1000 + k);
            let objs = objects_for(spec, c, &[c], &mut rng);
            let (img, labels) = draw(spec, &enc, &pal, &objs, &mut rng);
            novel_support.push(sample(format!("support_c{c}_{k}"), img, labels));
        }
    }
    let test = (0..spec.test_images)
        .map(|i| {
            let mut rng = rng_for(3, i);
            let objs = objects_for(spec, all[i % all.len()], &all, &mut rng);
            let (img, labels) = draw(spec, &enc, &pal, &objs, &mut rng);
            sample(format!("test_{i:04}"), img, labels)
        })
        .collect();
    Ok(TaskData {
        provider: ProviderSpec::Toy(spec.encoder.clone()),
        classes: spec.classes(),
        spec: Some(spec.clone()),
        base_train,
        novel_support,
        test,
    })
}

/// Fraction of class-majority patches whose embedding is closest (cosine) to
/// the text embedding of their own class among `classes`.
pub fn separability_probe(
    provider: &EmbeddingProvider,
    prompts: &VisualPrompts,
    samples: &[SegSample],
    classes: &[ClassEntry],
) -> Result<f64> {
    let texts = classes
        .iter()
        .map(|c| provider.text_embedding(&c.name))
        .collect::<Result<Vec<_>>>()?;
    let (gh, gw) = provider.grid();
    let (mut hits, mut total) = (0usize, 0usize);
    for s in samples {
        let b = provider.embed(s, prompts)?;
        let (h, w) = (s.labels.h, s.labels.w);
        for gy in 0..gh {
            for gx in 0..gw {
                let mut counts = [0usize; 256];
                let (y0, y1) = (gy * h / gh, (gy + 1) * h / gh);
                let (x0, x1) = (gx * w / gw, (gx + 1) * w / gw);
                for y in y0..y1 {
                    for x in x0..x1 {
                        counts[s.labels.at(y, x) as usize] += 1;
                    }
                }
                let area = (y1 - y0) * (x1 - x0);
                let Some(truth) = classes.iter().position(|c| 2 * counts[c.class_id as usize] > area) else {
                    continue;
                };
                let token = b.h.row(gy * gw + gx);
                let norm = token.iter().map(|v| v * v).sum::<f64>().sqrt();
                let best = texts
                    .iter()
                    .map(|t| t.iter().zip(token).map(|(a, b)| a * b).sum::<f64>() / norm)
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(i, _)| i);
                total += 1;
                hits += usize::from(best == Some(truth));
            }
        }
    }
    if total == 0 {
        return Err(Error::Argument("no class-majority patches to probe".into()));
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub key: String,
    pub role: Role,
    /// FCIM file relative to the manifest; absent for exported embeddings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    /// Indexed PNG relative to the manifest.
    pub labels: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub provider: ProviderSpec,
    pub classes: Vec<ClassEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SynthTaskSpec>,
    pub samples: Vec<ManifestEntry>,
}

/// Writes images, label maps and `manifest.json` under `dir`; returns the
/// manifest path.
pub fn save_task(task: &TaskData, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let mut samples = Vec::new();
    let roles = [
        (Role::BaseTrain, &task.base_train),
        (Role::NovelSupport, &task.novel_support),
        (Role::Test, &task.test),
    ];
    for (role, set) in roles {
        for s in set.iter() {
            let labels = format!("labels/{}.png", s.key);
            s.labels.save_png(&dir.join(&labels))?;
            let image = match s.image() {
                Some(img) => {
                    let rel = format!("images/{}.fcim", s.key);
                    img.save(&dir.join(&rel))?;
                    Some(rel)
                }
                None => None,
            };
            samples.push(ManifestEntry {
                key: s.key.clone(),
                role,
                image,
                labels,
            });
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        provider: task.provider.clone(),
        classes: task.classes.clone(),
        spec: task.spec.clone(),
        samples,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

pub fn load_task(manifest_path: &Path) -> Result<TaskData> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::UnsupportedVersion(manifest.version));
    }
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut task = TaskData {
        provider: manifest.provider,
        classes: manifest.classes,
        spec: manifest.spec,
        base_train: Vec::new(),
        novel_support: Vec::new(),
        test: Vec::new(),
    };
    ClassVocabulary::new(task.classes.clone())?;
    for e in manifest.samples {
        let labels = LabelMap::load_png(&root.join(&e.labels))?;
        let source = match &e.image {
            Some(rel) => SampleSource::Pixels(Arc::new(Image::load(&root.join(rel))?)),
            None => SampleSource::External,
        };
        let s = SegSample {
            key: e.key,
            source,
            labels,
        };
        match e.role {
            Role::BaseTrain => task.base_train.push(s),
            Role::NovelSupport => task.novel_support.push(s),
            Role::Test => task.test.push(s),
        }
    }
    Ok(task)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthTaskSpec {
        SynthTaskSpec {
            samples_per_base_class: 4,
            test_images: 8,
            ..SynthTaskSpec::default()
        }
    }

    #[test]
    fn fold_partition_rule() {
        let spec = small();
        assert_eq!(spec.novel_ids(), vec![1, 2]);
        assert_eq!(spec.base_ids(), vec![3, 4, 5, 6, 7, 8]);
        let spec = SynthTaskSpec { fold: 3, ..small() };
        assert_eq!(spec.novel_ids(), vec![7, 8]);
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        for spec in [
            SynthTaskSpec { folds: 3, ..small() },
            SynthTaskSpec { folds: 1, ..small() },
            SynthTaskSpec { fold: 4, ..small() },
            SynthTaskSpec { min_objects: 0, ..small() },
            SynthTaskSpec { text_alignment: 1.5, ..small() },
        ] {
            assert!(matches!(generate(&spec), Err(Error::Spec(_))), "{spec:?}");
        }
    }

    #[test]
    fn splits_respect_the_protocol() {
        let spec = small();
        let task = generate(&spec).unwrap();
        let novel = spec.novel_ids();
        assert_eq!(task.base_train.len(), 24);
        assert_eq!(task.novel_support.len(), 2);
        for s in &task.base_train {
            assert!(s.labels.classes().iter().all(|c| !novel.contains(c)));
        }
        for s in &task.novel_support {
            assert!(s.labels.classes().iter().all(|c| *c == 0 || novel.contains(c)));
        }
        for s in task.base_train.iter().chain(&task.test) {
            assert!(s.labels.data.iter().all(|&l| l as usize <= spec.n_classes));
        }
        assert_eq!(task.support_for(&[1]).len(), 1);
    }

    #[test]
    fn generation_is_deterministic_and_round_trips() {
        let spec = small();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        let pa = save_task(&a, da.path()).unwrap();
        let pb = save_task(&b, db.path()).unwrap();
        assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap());
        assert_eq!(
            fs::read(da.path().join("images/test_0003.fcim")).unwrap(),
            fs::read(db.path().join("images/test_0003.fcim")).unwrap()
        );
        let back = load_task(&pa).unwrap();
        assert_eq!(back.test.len(), a.test.len());
        assert_eq!(back.test[3].labels, a.test[3].labels);
        assert_eq!(back.test[3].image().unwrap().data, a.test[3].image().unwrap().data);
        assert_eq!(back.classes, a.classes);
    }
}
