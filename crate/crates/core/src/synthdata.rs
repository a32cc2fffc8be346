//! Procedural attribute/object images and seen/unseen composition splits.
//!
//! Each image is a single colored stencil (the object) on a noisy dark
//! background. The fill color is the attribute. Optionally ("bias mode") the
//! training backgrounds are tinted by a color derived from the object index,
//! which gives the network a shortcut that does not hold on val/test.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::numgrad::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
const BACKGROUND_NOISE: f64 = 0.15;
const HUE_JITTER: f64 = 0.08;
const TINT_STRENGTH: f64 = 0.35;
const MIN_RADIUS: f64 = 6.0;
const MAX_RADIUS: f64 = 12.0;
const MAX_SPLIT_TRIES: usize = 1_000_000;

/// Default attribute palette (name, base RGB).
pub const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.85, 0.15, 0.15]),
    ("purple", [0.55, 0.20, 0.75]),
    ("yellow", [0.90, 0.85, 0.15]),
    ("blue", [0.15, 0.30, 0.90]),
    ("green", [0.20, 0.75, 0.25]),
    ("cyan", [0.15, 0.80, 0.85]),
    ("gray", [0.50, 0.50, 0.50]),
    ("brown", [0.55, 0.35, 0.15]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stencil {
    Circle,
    Square,
    Triangle,
    Diamond,
    Ring,
    Cross,
}

impl Stencil {
    pub const ALL: [Stencil; 6] =
        [Stencil::Circle, Stencil::Square, Stencil::Triangle, Stencil::Diamond, Stencil::Ring, Stencil::Cross];

    /// Whether the pixel offset `(dx, dy)` from the center lies inside a shape of radius `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Stencil::Circle => dx * dx + dy * dy <= r * r,
            Stencil::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Stencil::Triangle => {
                // apex up, base at dy = r
                let t = (dy + r) / (2.0 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
            Stencil::Diamond => dx.abs() + dy.abs() <= r,
            Stencil::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
            Stencil::Cross => (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r),
        }
    }

    fn display_name(self) -> &'static str {
        match self {
            Stencil::Circle => "sphere",
            Stencil::Square => "cube",
            Stencil::Triangle => "cylinder",
            Stencil::Diamond => "diamond",
            Stencil::Ring => "ring",
            Stencil::Cross => "cross",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub rgb: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub name: String,
    pub stencil: Stencil,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveVocab {
    pub attributes: Vec<Attribute>,
    pub objects: Vec<Object>,
}

impl PrimitiveVocab {
    pub fn new(attributes: Vec<Attribute>, objects: Vec<Object>) -> Result<Self> {
        if attributes.len() < 2 || objects.len() < 2 {
            return Err(contract_err!(
                "need at least 2 attributes and 2 objects, got {} and {}",
                attributes.len(),
                objects.len()
            ));
        }
        let uniq_a: BTreeSet<_> = attributes.iter().map(|a| &a.name).collect();
        let uniq_o: BTreeSet<_> = objects.iter().map(|o| &o.name).collect();
        if uniq_a.len() != attributes.len() || uniq_o.len() != objects.len() {
            return Err(contract_err!("primitive names must be unique"));
        }
        Ok(PrimitiveVocab { attributes, objects })
    }

    /// The first `n_attr` palette colors crossed with the first `n_obj` stencils.
    pub fn grid(n_attr: usize, n_obj: usize) -> Result<Self> {
        if n_attr > COLORS.len() || n_obj > Stencil::ALL.len() {
            return Err(contract_err!(
                "grid {n_attr}x{n_obj} exceeds the built-in palette ({}x{})",
                COLORS.len(),
                Stencil::ALL.len()
            ));
        }
        let attributes = COLORS[..n_attr].iter().map(|(n, rgb)| Attribute { name: n.to_string(), rgb: *rgb }).collect();
        let objects =
            Stencil::ALL[..n_obj].iter().map(|&s| Object { name: s.display_name().to_string(), stencil: s }).collect();
        Self::new(attributes, objects)
    }

    /// 8 colors x 3 shapes.
    pub fn ao_clevr() -> Self {
        Self::grid(8, 3).expect("built-in grid is valid")
    }

    pub fn n_attr(&self) -> usize {
        self.attributes.len()
    }

    pub fn n_obj(&self) -> usize {
        self.objects.len()
    }

    pub fn n_comp(&self) -> usize {
        self.n_attr() * self.n_obj()
    }

    /// Every composition in index order (`attr * n_obj + obj`).
    pub fn all_compositions(&self) -> Vec<CompositionalLabel> {
        (0..self.n_comp()).map(|y| CompositionalLabel::from_index(y, self.n_obj())).collect()
    }

    pub fn comp_name(&self, c: CompositionalLabel) -> String {
        format!("{},{}", self.attributes[c.attr].name, self.objects[c.obj].name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CompositionalLabel {
    pub attr: usize,
    pub obj: usize,
}

impl CompositionalLabel {
    pub fn new(attr: usize, obj: usize) -> Self {
        CompositionalLabel { attr, obj }
    }

    pub fn index(self, n_obj: usize) -> usize {
        self.attr * n_obj + self.obj
    }

    pub fn from_index(y: usize, n_obj: usize) -> Self {
        CompositionalLabel { attr: y / n_obj, obj: y % n_obj }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub unseen_ratio: u32,
    pub seen_ratio: u32,
    pub seed: u64,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub bias_mode: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            unseen_ratio: 2,
            seen_ratio: 8,
            seed: 0,
            train_per_class: 50,
            val_per_class: 20,
            test_per_class: 20,
            bias_mode: false,
        }
    }
}

impl SplitSpec {
    /// Parses an `unseen:seen` ratio such as `"2:8"`.
    pub fn parse_ratio(s: &str) -> Result<(u32, u32)> {
        let (u, v) = s.split_once(':').ok_or_else(|| contract_err!("ratio must look like U:S, got {s:?}"))?;
        let parse = |x: &str| x.trim().parse::<u32>().map_err(|_| contract_err!("bad ratio component {x:?}"));
        let (u, v) = (parse(u)?, parse(v)?);
        if u + v == 0 {
            return Err(contract_err!("ratio {s:?} has zero total"));
        }
        Ok((u, v))
    }

    /// Unseen class count for a grid of `n_comp` compositions, rounded to nearest.
    pub fn unseen_count(&self, n_comp: usize) -> usize {
        let total = (self.unseen_ratio + self.seen_ratio) as f64;
        (n_comp as f64 * self.unseen_ratio as f64 / total).round() as usize
    }
}

pub struct Sample {
    /// `[32, 32, 3]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: CompositionalLabel,
}

impl Sample {
    pub fn attr(&self) -> usize {
        self.label.attr
    }

    pub fn obj(&self) -> usize {
        self.label.obj
    }
}

/// A rendered image plus the stencil mask (row-major, `32*32`).
pub struct Rendered {
    pub sample: Sample,
    pub mask: Vec<bool>,
}

/// SplitMix64 finalizer; used to derive independent per-sample seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a sequence of tags into one seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix64(master), |acc, &t| mix64(acc ^ mix64(t)))
}

/// Background tint associated with an object index in bias mode.
pub fn object_tint(obj: usize) -> [f64; 3] {
    let h = mix64(0x7157_0000 + obj as u64);
    let ch = |k: u32| 0.2 + 0.6 * ((h >> (16 * k)) & 0xffff) as f64 / 65535.0;
    [ch(0), ch(1), ch(2)]
}

/// Renders one sample. `tint` adds a colored cast to the background.
pub fn render_with_mask(
    label: CompositionalLabel,
    vocab: &PrimitiveVocab,
    rng: &mut impl Rng,
    tint: Option<[f64; 3]>,
) -> Result<Rendered> {
    if label.attr >= vocab.n_attr() || label.obj >= vocab.n_obj() {
        return Err(contract_err!("label {label:?} outside the vocabulary"));
    }
    let base = vocab.attributes[label.attr].rgb;
    let stencil = vocab.objects[label.obj].stencil;
    let r = rng.random_range(MIN_RADIUS..=MAX_RADIUS);
    let s = IMAGE_SIZE as f64;
    let cx = rng.random_range(r..=s - r);
    let cy = rng.random_range(r..=s - r);
    let mut fill = [0.0; 3];
    for (f, b) in fill.iter_mut().zip(base) {
        *f = (b + rng.random_range(-HUE_JITTER..=HUE_JITTER)).clamp(0.0, 1.0);
    }
    let cast = tint.map(|t| t.map(|v| v * TINT_STRENGTH)).unwrap_or([0.0; 3]);

    let mut data = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE * CHANNELS);
    let mut mask = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let inside = stencil.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r);
            mask.push(inside);
            for c in 0..CHANNELS {
                let noise = rng.random_range(0.0..BACKGROUND_NOISE);
                let v = if inside { fill[c] } else { cast[c] + noise };
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    let image = Tensor::new(&[IMAGE_SIZE, IMAGE_SIZE, CHANNELS], data)?;
    Ok(Rendered { sample: Sample { image, label }, mask })
}

pub fn render_sample(label: CompositionalLabel, vocab: &PrimitiveVocab, rng: &mut impl Rng) -> Result<Sample> {
    Ok(render_with_mask(label, vocab, rng, None)?.sample)
}

/// Seen/unseen partition of the composition grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub seen: Vec<CompositionalLabel>,
    pub unseen: Vec<CompositionalLabel>,
}

impl Splits {
    pub fn covers_all_primitives(&self, vocab: &PrimitiveVocab) -> bool {
        let attrs: BTreeSet<_> = self.seen.iter().map(|c| c.attr).collect();
        let objs: BTreeSet<_> = self.seen.iter().map(|c| c.obj).collect();
        attrs.len() == vocab.n_attr() && objs.len() == vocab.n_obj()
    }

    pub fn is_unseen(&self, c: CompositionalLabel) -> bool {
        self.unseen.binary_search(&c).is_ok()
    }
}

/// Uniformly samples the unseen set, rejecting draws whose seen set misses a primitive.
pub fn build_splits(vocab: &PrimitiveVocab, spec: &SplitSpec) -> Result<Splits> {
    let n_comp = vocab.n_comp();
    let n_unseen = spec.unseen_count(n_comp);
    let bound = n_comp - vocab.n_attr().max(vocab.n_obj());
    if n_unseen > bound {
        return Err(Error::Constraint(format!(
            "ratio {}:{} asks for {n_unseen} unseen of {n_comp} compositions, but primitive \
             coverage allows at most |A|*|O| - max(|A|,|O|) = {bound}",
            spec.unseen_ratio, spec.seen_ratio
        )));
    }
    let all = vocab.all_compositions();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0x5911]));
    for _ in 0..MAX_SPLIT_TRIES {
        let mut order = all.clone();
        order.shuffle(&mut rng);
        let mut unseen = order[..n_unseen].to_vec();
        let mut seen = order[n_unseen..].to_vec();
        unseen.sort();
        seen.sort();
        let s = Splits { seen, unseen };
        if s.covers_all_primitives(vocab) {
            return Ok(s);
        }
    }
    Err(Error::Constraint(format!("no covering split found for {n_unseen} unseen after {MAX_SPLIT_TRIES} draws")))
}

/// One split's images and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    /// `[N, 32, 32, 3]`.
    pub images: Tensor,
    pub labels: Vec<CompositionalLabel>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the images at `idx` into a `[len, 32, 32, 3]` batch.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let per = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        Tensor::new(&[idx.len(), IMAGE_SIZE, IMAGE_SIZE, CHANNELS], data).expect("batch of existing images")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "val" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            _ => Err(contract_err!("unknown split {s:?} (train|val|test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: PrimitiveVocab,
    pub spec: SplitSpec,
    pub splits: Splits,
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

fn render_split(
    vocab: &PrimitiveVocab,
    spec: &SplitSpec,
    comps: &[CompositionalLabel],
    per_class: usize,
    part: Partition,
) -> Result<SplitData> {
    let n = comps.len() * per_class;
    let mut data = Vec::with_capacity(n * IMAGE_SIZE * IMAGE_SIZE * CHANNELS);
    let mut labels = Vec::with_capacity(n);
    for &c in comps {
        for i in 0..per_class {
            let seed = derive_seed(spec.seed, &[part as u64 + 1, c.index(vocab.n_obj()) as u64, i as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tint = if !spec.bias_mode {
                None
            } else if part == Partition::Train {
                Some(object_tint(c.obj))
            } else {
                Some(object_tint(rng.random_range(0..vocab.n_obj())))
            };
            let r = render_with_mask(c, vocab, &mut rng, tint)?;
            data.extend_from_slice(r.sample.image.data());
            labels.push(c);
        }
    }
    if n == 0 {
        return Err(contract_err!("{} split would be empty", part.name()));
    }
    Ok(SplitData { images: Tensor::new(&[n, IMAGE_SIZE, IMAGE_SIZE, CHANNELS], data)?, labels })
}

pub fn generate_dataset(vocab: &PrimitiveVocab, spec: &SplitSpec) -> Result<Dataset> {
    let splits = build_splits(vocab, spec)?;
    let all = vocab.all_compositions();
    let ds = Dataset {
        train: render_split(vocab, spec, &splits.seen, spec.train_per_class, Partition::Train)?,
        val: render_split(vocab, spec, &all, spec.val_per_class, Partition::Val)?,
        test: render_split(vocab, spec, &all, spec.test_per_class, Partition::Test)?,
        vocab: vocab.clone(),
        spec: spec.clone(),
        splits,
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    vocab: PrimitiveVocab,
    spec: SplitSpec,
    seen: Vec<CompositionalLabel>,
    unseen: Vec<CompositionalLabel>,
    counts: [usize; 3],
    train_labels: Vec<CompositionalLabel>,
    val_labels: Vec<CompositionalLabel>,
    test_labels: Vec<CompositionalLabel>,
}

const DATASET_FORMAT: &str = "czsl-dataset-v1";

impl Dataset {
    pub fn split(&self, part: Partition) -> &SplitData {
        match part {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    /// Checks the seen/unseen and coverage invariants plus per-class counts.
    pub fn validate(&self) -> Result<()> {
        let v = &self.vocab;
        let seen: BTreeSet<_> = self.splits.seen.iter().copied().collect();
        let unseen: BTreeSet<_> = self.splits.unseen.iter().copied().collect();
        if seen.len() != self.splits.seen.len() || unseen.len() != self.splits.unseen.len() {
            return Err(contract_err!("duplicate compositions in split lists"));
        }
        if !seen.is_disjoint(&unseen) {
            return Err(contract_err!("seen and unseen compositions overlap"));
        }
        let union: BTreeSet<_> = seen.union(&unseen).copied().collect();
        if union != v.all_compositions().into_iter().collect() {
            return Err(contract_err!("seen ∪ unseen does not equal the composition grid"));
        }
        if !self.splits.covers_all_primitives(v) {
            return Err(contract_err!("some primitive never appears in a seen composition"));
        }
        if let Some(bad) = self.train.labels.iter().find(|c| !seen.contains(c)) {
            return Err(contract_err!("training sample with non-seen label {bad:?}"));
        }
        let expect = |data: &SplitData, comps: &BTreeSet<CompositionalLabel>, per: usize, name: &str| {
            for c in comps {
                let n = data.labels.iter().filter(|l| *l == c).count();
                if n != per {
                    return Err(contract_err!("{name}: {c:?} has {n} samples, expected {per}"));
                }
            }
            if data.labels.len() != comps.len() * per {
                return Err(contract_err!("{name}: unexpected sample count"));
            }
            Ok(())
        };
        expect(&self.train, &seen, self.spec.train_per_class, "train")?;
        expect(&self.val, &union, self.spec.val_per_class, "val")?;
        expect(&self.test, &union, self.spec.test_per_class, "test")?;
        for part in [&self.train, &self.val, &self.test] {
            if part.images.shape()[0] != part.labels.len()
                || part.images.data().iter().any(|p| !(0.0..=1.0).contains(p))
            {
                return Err(contract_err!("image tensor inconsistent with labels or out of [0,1]"));
            }
        }
        Ok(())
    }

    fn manifest(&self) -> Manifest {
        Manifest {
            format: DATASET_FORMAT.into(),
            vocab: self.vocab.clone(),
            spec: self.spec.clone(),
            seen: self.splits.seen.clone(),
            unseen: self.splits.unseen.clone(),
            counts: [self.train.len(), self.val.len(), self.test.len()],
            train_labels: self.train.labels.clone(),
            val_labels: self.val.labels.clone(),
            test_labels: self.test.labels.clone(),
        }
    }

    /// Writes `meta.json` plus `train.ppt`, `val.ppt`, `test.ppt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let meta = serde_json::to_string_pretty(&self.manifest()).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("meta.json"), meta + "\n")?;
        for part in [Partition::Train, Partition::Val, Partition::Test] {
            self.split(part).images.save(dir.join(format!("{}.ppt", part.name())))?;
        }
        Ok(())
    }

    /// Loads and validates a dataset directory.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("meta.json"))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        if m.format != DATASET_FORMAT {
            return Err(Error::Format(format!("unknown dataset format {:?}", m.format)));
        }
        let load = |part: Partition, labels: Vec<CompositionalLabel>| -> Result<SplitData> {
            let images = Tensor::load(dir.join(format!("{}.ppt", part.name())))?;
            if images.rank() != 4 || images.shape()[1..] != [IMAGE_SIZE, IMAGE_SIZE, CHANNELS] {
                return Err(Error::Format(format!("bad image blob shape {:?}", images.shape())));
            }
            Ok(SplitData { images, labels })
        };
        let ds = Dataset {
            train: load(Partition::Train, m.train_labels)?,
            val: load(Partition::Val, m.val_labels)?,
            test: load(Partition::Test, m.test_labels)?,
            vocab: PrimitiveVocab::new(m.vocab.attributes, m.vocab.objects)?,
            spec: m.spec,
            splits: Splits { seen: m.seen, unseen: m.unseen },
        };
        if [ds.train.len(), ds.val.len(), ds.test.len()] != m.counts {
            return Err(Error::Format("manifest counts disagree with labels".into()));
        }
        ds.validate()?;
        Ok(ds)
    }
}
