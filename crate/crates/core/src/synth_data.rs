//! Synthetic panoptic-captioning dataset and class-incremental views.
//!
//! Scenes are colored geometric shapes (thing classes) over textured bands
//! (stuff classes) on a dark canvas. Shape footprints are aligned to the
//! 8-pixel feature grid so a small encoder can produce crisp masks. Captions
//! are deterministic templates: `START <count> <thing-word> ... on <stuff-word>
//! ... END`, ordered by class id. Generation is a pure function of the spec.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::{derive_seed, rng_for, tag};
use rand::Rng;

pub type ClassId = u32;

/// Reserved background id (the unknown class `c^b`).
pub const BACKGROUND_ID: ClassId = 0;

pub const START: &str = "START";
pub const END: &str = "END";

/// Cell size of the placement grid; matches the encoder stride.
pub const GRID: usize = 8;

pub const COUNT_WORDS: [&str; 6] = ["one", "two", "three", "four", "five", "six"];
pub const CONNECTOR_WORD: &str = "on";

const THING_WORDS: [&str; 8] =
    ["square", "circle", "triangle", "diamond", "cross", "ring", "wedge", "disk"];
const STUFF_WORDS: [&str; 6] = ["sand", "water", "grass", "rock", "snow", "road"];

/// One thing instance: id unique within its sample, plus a dense binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub instance_id: u32,
    pub class_id: ClassId,
    pub mask: Array2<bool>,
}

/// One scene: image, semantic mask, thing instances, caption word sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticSample {
    pub sample_id: u64,
    /// (C, H, W), values in [0, 1], exactly representable as v/255.
    pub image: Array3<f64>,
    /// (H, W) class ids; `BACKGROUND_ID` where nothing is labeled.
    pub semantic_mask: Array2<ClassId>,
    pub instances: Vec<Instance>,
    /// Words including the START/END sentinels.
    pub caption: Vec<String>,
}

impl PanopticSample {
    /// Class ids with at least one labeled pixel.
    pub fn present_classes(&self) -> BTreeSet<ClassId> {
        self.semantic_mask
            .iter()
            .copied()
            .filter(|&c| c != BACKGROUND_ID)
            .collect()
    }
}

/// Word table for the caption templates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordBank {
    pub class_words: BTreeMap<ClassId, String>,
}

impl WordBank {
    /// Default words for `1..=num_thing` thing ids and the following stuff ids.
    pub fn default_for(num_thing: usize, num_stuff: usize) -> Self {
        let mut class_words = BTreeMap::new();
        for i in 0..num_thing {
            let w = THING_WORDS
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("shape{}", i + 1));
            class_words.insert((i + 1) as ClassId, w);
        }
        for i in 0..num_stuff {
            let w = STUFF_WORDS
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("terrain{}", i + 1));
            class_words.insert((num_thing + i + 1) as ClassId, w);
        }
        Self { class_words }
    }

    pub fn word(&self, c: ClassId) -> Option<&str> {
        self.class_words.get(&c).map(|s| s.as_str())
    }
}

/// Generation parameters. Same spec in, bit-identical samples out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_samples: usize,
    /// (H, W); both must be multiples of the placement grid.
    pub image_size: (usize, usize),
    pub num_thing: usize,
    pub num_stuff: usize,
    pub max_instances_per_image: usize,
    pub vocab: WordBank,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(num_samples: usize, num_thing: usize, num_stuff: usize, seed: u64) -> Self {
        Self {
            num_samples,
            image_size: (64, 64),
            num_thing,
            num_stuff,
            max_instances_per_image: 3,
            vocab: WordBank::default_for(num_thing, num_stuff),
            seed,
        }
    }

    pub fn thing_ids(&self) -> Vec<ClassId> {
        (1..=self.num_thing as ClassId).collect()
    }

    pub fn stuff_ids(&self) -> Vec<ClassId> {
        (self.num_thing as ClassId + 1..=(self.num_thing + self.num_stuff) as ClassId).collect()
    }

    pub fn all_class_ids(&self) -> Vec<ClassId> {
        (1..=(self.num_thing + self.num_stuff) as ClassId).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |field: &str, reason: &str| CoreError::Config {
            field: field.into(),
            reason: reason.into(),
        };
        if self.num_thing < 2 {
            return Err(cfg("num_thing", "need at least 2 thing classes"));
        }
        if self.num_stuff < 1 {
            return Err(cfg("num_stuff", "need at least 1 stuff class"));
        }
        let (h, w) = self.image_size;
        if h % GRID != 0 || w % GRID != 0 || h < 4 * GRID || w < 4 * GRID {
            return Err(cfg("image_size", "dims must be multiples of the grid and at least 32"));
        }
        if self.max_instances_per_image == 0 || self.max_instances_per_image > COUNT_WORDS.len() {
            return Err(cfg("max_instances_per_image", "must be in 1..=6"));
        }
        for c in self.all_class_ids() {
            if self.vocab.word(c).is_none() {
                return Err(cfg("vocab", &format!("no class word for id {c}")));
            }
        }
        Ok(())
    }
}

/// Thing/stuff universe split into a base step and increments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSchedule {
    pub thing_classes: Vec<ClassId>,
    pub stuff_classes: Vec<ClassId>,
    pub background_id: ClassId,
    /// `steps[0]` holds the base classes (all stuff plus the first things).
    pub steps: Vec<Vec<ClassId>>,
    pub order_name: String,
}

impl ClassSchedule {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Classes introduced at step `t` (the set `C^t`).
    pub fn classes_at(&self, t: usize) -> Result<&[ClassId]> {
        self.steps
            .get(t)
            .map(|s| s.as_slice())
            .ok_or_else(|| CoreError::Index(format!("step {t} out of range 0..{}", self.num_steps())))
    }

    /// All classes learned through step `t` inclusive (`C^{0:t}`).
    pub fn learned_until(&self, t: usize) -> BTreeSet<ClassId> {
        self.steps[..=t.min(self.num_steps() - 1)]
            .iter()
            .flatten()
            .copied()
            .collect()
    }

    /// Classes learned strictly before step `t` (`C^{0:t-1}`).
    pub fn old_classes(&self, t: usize) -> BTreeSet<ClassId> {
        if t == 0 {
            BTreeSet::new()
        } else {
            self.learned_until(t - 1)
        }
    }

    pub fn all_classes(&self) -> BTreeSet<ClassId> {
        self.learned_until(self.num_steps() - 1)
    }

    pub fn is_thing(&self, c: ClassId) -> bool {
        self.thing_classes.contains(&c)
    }

    pub fn is_stuff(&self, c: ClassId) -> bool {
        self.stuff_classes.contains(&c)
    }

    /// Collapses all steps into one; used by the offline upper-bound baseline.
    pub fn flattened(&self) -> ClassSchedule {
        let mut all: Vec<ClassId> = self.steps.iter().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        ClassSchedule {
            thing_classes: self.thing_classes.clone(),
            stuff_classes: self.stuff_classes.clone(),
            background_id: self.background_id,
            steps: vec![all],
            order_name: format!("{}-offline", self.order_name),
        }
    }
}

/// Builds a schedule: step 0 takes the first `base_thing` ids of `order` plus
/// every stuff class; later steps take `inc_size` ids each, in order.
pub fn make_schedule(
    num_thing: usize,
    base_thing: usize,
    inc_size: usize,
    stuff: &[ClassId],
    order: &[ClassId],
) -> Result<ClassSchedule> {
    if order.len() != num_thing {
        return Err(CoreError::Schedule(format!(
            "order has {} ids, expected {num_thing}",
            order.len()
        )));
    }
    let uniq: BTreeSet<ClassId> = order.iter().copied().collect();
    if uniq.len() != num_thing || uniq.contains(&BACKGROUND_ID) {
        return Err(CoreError::Schedule("order must be a permutation of thing ids".into()));
    }
    if stuff.iter().any(|s| uniq.contains(s) || *s == BACKGROUND_ID) {
        return Err(CoreError::Schedule(
            "stuff ids must be disjoint from things and background".into(),
        ));
    }
    if base_thing == 0 || inc_size == 0 || base_thing >= num_thing {
        return Err(CoreError::Schedule(format!(
            "invalid split: base {base_thing}, inc {inc_size}, things {num_thing}"
        )));
    }
    if (num_thing - base_thing) % inc_size != 0 {
        return Err(CoreError::Schedule(format!(
            "{base_thing} + k*{inc_size} never reaches {num_thing}"
        )));
    }

    let mut steps = Vec::new();
    let mut base: Vec<ClassId> = stuff.to_vec();
    base.extend_from_slice(&order[..base_thing]);
    steps.push(base);
    for chunk in order[base_thing..].chunks(inc_size) {
        steps.push(chunk.to_vec());
    }

    let mut things: Vec<ClassId> = order.to_vec();
    things.sort_unstable();
    Ok(ClassSchedule {
        thing_classes: things,
        stuff_classes: stuff.to_vec(),
        background_id: BACKGROUND_ID,
        steps,
        order_name: "custom".into(),
    })
}

/// The five named class orders: `a` is ascending, `b..e` are seeded shuffles.
pub fn named_order(name: char, thing_ids: &[ClassId]) -> Result<Vec<ClassId>> {
    let mut order = thing_ids.to_vec();
    order.sort_unstable();
    match name {
        'a' => Ok(order),
        'b'..='e' => {
            let mut rng = rng_for(&[tag::ORDER, name as u64]);
            // Fisher-Yates
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            Ok(order)
        }
        _ => Err(CoreError::Schedule(format!("unknown order `{name}`, expected a..e"))),
    }
}

// ---------------------------------------------------------------------------
// generation
// ---------------------------------------------------------------------------

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = (h % 360.0) / 60.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

fn thing_color(idx: usize, total: usize) -> [u8; 3] {
    hsv_to_rgb(idx as f64 * 360.0 / total.max(1) as f64, 0.85, 0.9)
}

fn stuff_color(idx: usize) -> [u8; 3] {
    hsv_to_rgb(35.0 + idx as f64 * 95.0, 0.35, 0.55)
}

#[derive(Clone, Copy)]
enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Diamond,
    Plus,
    Ring,
}

const SHAPE_KINDS: [ShapeKind; 6] = [
    ShapeKind::Square,
    ShapeKind::Circle,
    ShapeKind::Triangle,
    ShapeKind::Diamond,
    ShapeKind::Plus,
    ShapeKind::Ring,
];

fn paint_shape(kind: ShapeKind, size: usize) -> Array2<bool> {
    let mut m = Array2::from_elem((size, size), false);
    let s = size as f64;
    let c = (s - 1.0) / 2.0;
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            let inside = match kind {
                ShapeKind::Square => true,
                ShapeKind::Circle => (dx * dx + dy * dy).sqrt() <= s / 2.0 - 0.2,
                ShapeKind::Triangle => {
                    let fy = y as f64 / (s - 1.0);
                    dx.abs() <= fy * s / 2.0
                }
                ShapeKind::Diamond => dx.abs() + dy.abs() <= s / 2.0,
                ShapeKind::Plus => dx.abs() <= s / 6.0 || dy.abs() <= s / 6.0,
                ShapeKind::Ring => {
                    let d = (dx * dx + dy * dy).sqrt();
                    d <= s / 2.0 - 0.2 && d >= s / 5.0
                }
            };
            m[[y, x]] = inside;
        }
    }
    m
}

/// Deterministic caption template: counted thing words then `on <stuff-word>`
/// phrases, both ordered by ascending class id.
pub fn caption_template(
    thing_counts: &BTreeMap<ClassId, usize>,
    stuffs: &BTreeSet<ClassId>,
    words: &WordBank,
) -> Vec<String> {
    let mut out = vec![START.to_string()];
    for (&c, &n) in thing_counts {
        let count_word = COUNT_WORDS[(n - 1).min(COUNT_WORDS.len() - 1)];
        out.push(count_word.to_string());
        out.push(words.word(c).unwrap_or("?").to_string());
    }
    for &s in stuffs {
        out.push(CONNECTOR_WORD.to_string());
        out.push(words.word(s).unwrap_or("?").to_string());
    }
    out.push(END.to_string());
    out
}

fn generate_sample(spec: &DatasetSpec, sample_id: u64) -> PanopticSample {
    let mut rng = rng_for(&[spec.seed, tag::SAMPLE, sample_id]);
    let (h, w) = spec.image_size;
    let (ch, cw) = (h / GRID, w / GRID);

    // dark noisy canvas
    let mut img = Array3::<u8>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let v: u8 = rng.gen_range(8..=22);
            for c in 0..3 {
                img[[c, y, x]] = v;
            }
        }
    }
    let mut sem = Array2::<ClassId>::from_elem((h, w), BACKGROUND_ID);

    // stuff bands on alternating sides, grid-aligned, textured
    let stuff_ids = spec.stuff_ids();
    for (i, &sid) in stuff_ids.iter().enumerate() {
        let forced = sample_id as usize % spec.num_stuff == i;
        if !forced && !rng.gen_bool(0.65) {
            continue;
        }
        let extent = rng.gen_range(2..=3usize);
        let (y0, y1, x0, x1) = match i % 4 {
            0 => (ch - extent, ch, 0, cw),
            1 => (0, extent, 0, cw),
            2 => (0, ch, 0, extent),
            _ => (0, ch, cw - extent, cw),
        };
        let base = stuff_color(i);
        for cy in y0..y1 {
            for cx in x0..x1 {
                for py in 0..GRID {
                    for px in 0..GRID {
                        let (y, x) = (cy * GRID + py, cx * GRID + px);
                        let checker = ((y / 4 + x / 4) % 2) as i16 * 14 - 7;
                        for c in 0..3 {
                            let v = base[c] as i16 + checker;
                            img[[c, y, x]] = v.clamp(0, 255) as u8;
                        }
                        sem[[y, x]] = sid;
                    }
                }
            }
        }
    }

    // thing instances on disjoint grid cells; the first class id is forced
    // round-robin so every class is covered
    let thing_ids = spec.thing_ids();
    let n_inst = rng.gen_range(1..=spec.max_instances_per_image);
    let mut occupied: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut instances = Vec::new();
    for k in 0..n_inst {
        let class_id = if k == 0 {
            thing_ids[sample_id as usize % spec.num_thing]
        } else {
            thing_ids[rng.gen_range(0..thing_ids.len())]
        };
        let size_cells = rng.gen_range(2..=3usize);
        let mut placed = None;
        for _ in 0..24 {
            let cy = rng.gen_range(0..=ch - size_cells);
            let cx = rng.gen_range(0..=cw - size_cells);
            let cand = (cy, cx, cy + size_cells, cx + size_cells);
            let clash = occupied.iter().any(|&(oy0, ox0, oy1, ox1)| {
                cand.0 < oy1 && oy0 < cand.2 && cand.1 < ox1 && ox0 < cand.3
            });
            if !clash {
                placed = Some(cand);
                break;
            }
        }
        let Some((cy0, cx0, _, _)) = placed else { continue };
        occupied.push(placed.unwrap());

        let idx = (class_id - 1) as usize;
        let kind = SHAPE_KINDS[idx % SHAPE_KINDS.len()];
        let size = size_cells * GRID;
        let shape = paint_shape(kind, size);
        let base = thing_color(idx, spec.num_thing);
        let jitter: i16 = rng.gen_range(-12..=12);

        let mut mask = Array2::from_elem((h, w), false);
        for sy in 0..size {
            for sx in 0..size {
                if !shape[[sy, sx]] {
                    continue;
                }
                let (y, x) = (cy0 * GRID + sy, cx0 * GRID + sx);
                mask[[y, x]] = true;
                sem[[y, x]] = class_id;
                for c in 0..3 {
                    let v = base[c] as i16 + jitter;
                    img[[c, y, x]] = v.clamp(0, 255) as u8;
                }
            }
        }
        instances.push(Instance {
            instance_id: instances.len() as u32 + 1,
            class_id,
            mask,
        });
    }

    // stuff pixels may have been painted over; caption reflects the final mask
    let mut thing_counts: BTreeMap<ClassId, usize> = BTreeMap::new();
    for inst in &instances {
        *thing_counts.entry(inst.class_id).or_insert(0) += 1;
    }
    let stuff_present: BTreeSet<ClassId> = sem
        .iter()
        .copied()
        .filter(|c| stuff_ids.contains(c))
        .collect();
    let caption = caption_template(&thing_counts, &stuff_present, &spec.vocab);

    let image = img.mapv(|v| v as f64 / 255.0);
    PanopticSample { sample_id, image, semantic_mask: sem, instances, caption }
}

/// Generates the full dataset. Deterministic in the spec; every class id is
/// guaranteed to appear once `num_samples` covers the class count
/// (round-robin forcing).
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<PanopticSample>> {
    spec.validate()?;
    Ok((0..spec.num_samples as u64)
        .map(|id| generate_sample(spec, id))
        .collect())
}

/// Restricts a sample to the classes of one CL step: labels outside `C^t`
/// become background, their instances are dropped, and the caption is
/// re-templated to the surviving classes. The input is untouched.
pub fn apply_cl_view(
    sample: &PanopticSample,
    step: usize,
    schedule: &ClassSchedule,
    words: &WordBank,
) -> Result<PanopticSample> {
    let current: BTreeSet<ClassId> = schedule.classes_at(step)?.iter().copied().collect();

    let sem = sample
        .semantic_mask
        .mapv(|c| if current.contains(&c) { c } else { schedule.background_id });
    let instances: Vec<Instance> = sample
        .instances
        .iter()
        .filter(|i| current.contains(&i.class_id))
        .cloned()
        .collect();

    let mut thing_counts: BTreeMap<ClassId, usize> = BTreeMap::new();
    for inst in &instances {
        *thing_counts.entry(inst.class_id).or_insert(0) += 1;
    }
    let stuff_present: BTreeSet<ClassId> = sem
        .iter()
        .copied()
        .filter(|c| schedule.is_stuff(*c))
        .collect();
    let caption = caption_template(&thing_counts, &stuff_present, words);

    Ok(PanopticSample {
        sample_id: sample.sample_id,
        image: sample.image.clone(),
        semantic_mask: sem,
        instances,
        caption,
    })
}

/// 70/30 split by hashed sample id: ids are ranked by hash and the first 70%
/// train. Returns (train, val) indices into the sample list.
pub fn train_val_split(samples: &[PanopticSample], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut ranked: Vec<(u64, usize)> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (derive_seed(&[seed, tag::SPLIT, s.sample_id]), i))
        .collect();
    ranked.sort_unstable();
    let n_train = (samples.len() as f64 * 0.7).round() as usize;
    let train: Vec<usize> = ranked[..n_train].iter().map(|&(_, i)| i).collect();
    let val: Vec<usize> = ranked[n_train..].iter().map(|&(_, i)| i).collect();
    (train, val)
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct IndexInstance {
    instance_id: u32,
    class_id: ClassId,
}

#[derive(Serialize, Deserialize)]
struct IndexSample {
    sample_id: u64,
    image: String,
    semantic_mask: String,
    instance_mask: String,
    caption: Vec<String>,
    instances: Vec<IndexInstance>,
}

#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    spec: DatasetSpec,
    thing_classes: Vec<ClassId>,
    stuff_classes: Vec<ClassId>,
    background_id: ClassId,
    step_assignments: Vec<Vec<ClassId>>,
    order_name: String,
    samples: Vec<IndexSample>,
}

/// Writes the dataset as lossless PNGs plus a JSON index with sample ids,
/// class tables, captions and step assignments.
pub fn save_dataset(
    dir: &Path,
    samples: &[PanopticSample],
    spec: &DatasetSpec,
    schedule: &ClassSchedule,
) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;

    let mut index_samples = Vec::new();
    for s in samples {
        let (h, w) = (s.semantic_mask.nrows(), s.semantic_mask.ncols());
        let img_rel = format!("images/{:06}.png", s.sample_id);
        let sem_rel = format!("masks/{:06}_sem.png", s.sample_id);
        let inst_rel = format!("masks/{:06}_inst.png", s.sample_id);

        let mut rgb = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    (s.image[[0, y, x]] * 255.0).round() as u8,
                    (s.image[[1, y, x]] * 255.0).round() as u8,
                    (s.image[[2, y, x]] * 255.0).round() as u8,
                ];
                rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        rgb.save(dir.join(&img_rel))?;

        let mut sem_img = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                sem_img.put_pixel(x as u32, y as u32, image::Luma([s.semantic_mask[[y, x]] as u8]));
            }
        }
        sem_img.save(dir.join(&sem_rel))?;

        let mut inst_img =
            image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
        for inst in &s.instances {
            for y in 0..h {
                for x in 0..w {
                    if inst.mask[[y, x]] {
                        inst_img.put_pixel(
                            x as u32,
                            y as u32,
                            image::Luma([inst.instance_id as u16]),
                        );
                    }
                }
            }
        }
        inst_img.save(dir.join(&inst_rel))?;

        index_samples.push(IndexSample {
            sample_id: s.sample_id,
            image: img_rel,
            semantic_mask: sem_rel,
            instance_mask: inst_rel,
            caption: s.caption.clone(),
            instances: s
                .instances
                .iter()
                .map(|i| IndexInstance { instance_id: i.instance_id, class_id: i.class_id })
                .collect(),
        });
    }

    let index = DatasetIndex {
        spec: spec.clone(),
        thing_classes: schedule.thing_classes.clone(),
        stuff_classes: schedule.stuff_classes.clone(),
        background_id: schedule.background_id,
        step_assignments: schedule.steps.clone(),
        order_name: schedule.order_name.clone(),
        samples: index_samples,
    };
    let json = serde_json::to_string_pretty(&index)?;
    std::fs::write(dir.join("index.json"), json)?;
    Ok(())
}

/// Reads a dataset directory back. Inverse of [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Vec<PanopticSample>, DatasetSpec, ClassSchedule)> {
    let raw = std::fs::read_to_string(dir.join("index.json"))?;
    let index: DatasetIndex = serde_json::from_str(&raw)?;

    let mut samples = Vec::with_capacity(index.samples.len());
    for meta in &index.samples {
        let rgb = image::open(dir.join(&meta.image))?.into_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut img = Array3::<f64>::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                let px = rgb.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    img[[c, y, x]] = px[c] as f64 / 255.0;
                }
            }
        }

        let sem_img = image::open(dir.join(&meta.semantic_mask))?.into_luma8();
        let mut sem = Array2::<ClassId>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                sem[[y, x]] = sem_img.get_pixel(x as u32, y as u32)[0] as ClassId;
            }
        }

        let inst_img = image::open(dir.join(&meta.instance_mask))?.into_luma16();
        let mut instances = Vec::new();
        for im in &meta.instances {
            let mut mask = Array2::from_elem((h, w), false);
            for y in 0..h {
                for x in 0..w {
                    if inst_img.get_pixel(x as u32, y as u32)[0] == im.instance_id as u16 {
                        mask[[y, x]] = true;
                    }
                }
            }
            instances.push(Instance {
                instance_id: im.instance_id,
                class_id: im.class_id,
                mask,
            });
        }

        samples.push(PanopticSample {
            sample_id: meta.sample_id,
            image: img,
            semantic_mask: sem,
            instances,
            caption: meta.caption.clone(),
        });
    }

    let schedule = ClassSchedule {
        thing_classes: index.thing_classes,
        stuff_classes: index.stuff_classes,
        background_id: index.background_id,
        steps: index.step_assignments,
        order_name: index.order_name,
    };
    Ok((samples, index.spec, schedule))
}
