//! Procedural video corpus: coloured shapes moving over a noisy background,
//! with scripted occlusion, out-of-view and deformation events, box masks and
//! one-sentence descriptions.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::gpgnet::{mask_from_bbox, BinaryMask};
use crate::image::{Frame, GrayImage};
use crate::language::Vocabulary;
use crate::{Error, Result};

pub const MAX_DISTRACTORS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether the pixel centre `(px, py)` falls inside the shape inscribed in `b`.
    fn covers(self, b: &BBox, px: f64, py: f64) -> bool {
        let inside_box = px >= b.x && px < b.right() && py >= b.y && py < b.bottom();
        match self {
            Shape::Square => inside_box,
            Shape::Circle => {
                let dx = (px - b.cx()) / (b.w / 2.0);
                let dy = (py - b.cy()) / (b.h / 2.0);
                dx * dx + dy * dy <= 1.0
            }
            Shape::Triangle => {
                // Apex at the top centre, base along the bottom edge.
                let t = (py - b.y) / b.h;
                inside_box && (px - b.cx()).abs() <= t * b.w / 2.0
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Orange,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::White,
        Color::Orange,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Orange => "orange",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [50, 80, 230],
            Color::Yellow => [230, 220, 50],
            Color::Cyan => [50, 220, 220],
            Color::Magenta => [210, 50, 210],
            Color::White => [240, 240, 240],
            Color::Orange => [240, 140, 30],
        }
    }
}

/// A moving object: linear drift plus a sinusoidal wiggle, reflected at the frame borders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    /// Side length in pixels.
    pub size: f64,
    /// Centre at frame 0.
    pub start: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
    pub wiggle: f64,
    pub wiggle_period: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    /// A gray occluder covers the target for frames `start..end`.
    Occlude { start: usize, end: usize },
    /// The target is absent for `start..end` and returns displaced by `reentry`.
    ExitView { start: usize, end: usize, reentry: (f64, f64) },
    /// The target's aspect oscillates during `start..end`.
    Deform { start: usize, end: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub target: ObjectSpec,
    pub distractors: Vec<ObjectSpec>,
    pub events: Vec<Event>,
    pub seed: u64,
}

/// Reflects `v` into `[lo, hi]`.
fn fold(v: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return (lo + hi) / 2.0;
    }
    let span = hi - lo;
    let m = (v - lo).rem_euclid(2.0 * span);
    lo + if m > span { 2.0 * span - m } else { m }
}

impl SceneSpec {
    fn object_center(&self, obj: &ObjectSpec, t: usize, offset: (f64, f64)) -> (f64, f64) {
        let tf = t as f64;
        let phase = 2.0 * PI * tf / obj.wiggle_period.max(1.0);
        let x = obj.start.0 + obj.velocity.0 * tf + obj.wiggle * phase.sin() + offset.0;
        let y = obj.start.1 + obj.velocity.1 * tf + obj.wiggle * phase.cos() - obj.wiggle + offset.1;
        let half = obj.size / 2.0;
        (
            fold(x, half, self.width as f64 - half),
            fold(y, half, self.height as f64 - half),
        )
    }

    fn target_size(&self, t: usize) -> (f64, f64) {
        let s = self.target.size;
        for e in &self.events {
            if let Event::Deform { start, end } = *e {
                if t >= start && t < end {
                    let u = (t - start) as f64 / (end - start).max(1) as f64;
                    let k = (2.0 * PI * u).sin();
                    return (s * (1.0 + 0.35 * k), s * (1.0 - 0.25 * k));
                }
            }
        }
        (s, s)
    }

    /// Accumulated re-entry displacement at frame `t`.
    fn reentry_offset(&self, t: usize) -> (f64, f64) {
        let mut off = (0.0, 0.0);
        for e in &self.events {
            if let Event::ExitView { end, reentry, .. } = *e {
                if t >= end {
                    off.0 += reentry.0;
                    off.1 += reentry.1;
                }
            }
        }
        off
    }

    pub fn target_absent(&self, t: usize) -> bool {
        self.events
            .iter()
            .any(|e| matches!(*e, Event::ExitView { start, end, .. } if t >= start && t < end))
    }

    pub fn target_occluded(&self, t: usize) -> bool {
        self.events
            .iter()
            .any(|e| matches!(*e, Event::Occlude { start, end } if t >= start && t < end))
    }

    /// Shape footprint of the target at `t`, before rasterisation.
    pub fn target_extent(&self, t: usize) -> BBox {
        let (cx, cy) = self.object_center(&self.target, t, self.reentry_offset(t));
        let (w, h) = self.target_size(t);
        BBox::from_center(cx, cy, w, h)
    }

    pub fn distractor_extent(&self, i: usize, t: usize) -> BBox {
        let d = &self.distractors[i];
        let (cx, cy) = self.object_center(d, t, (0.0, 0.0));
        BBox::from_center(cx, cy, d.size, d.size)
    }

    /// Tight integer box of the rasterised target, `None` while out of view.
    pub fn target_box(&self, t: usize) -> Option<BBox> {
        if self.target_absent(t) {
            return None;
        }
        raster_box(self.target.shape, &self.target_extent(t), self.width, self.height)
    }

    pub fn distractor_box(&self, i: usize, t: usize) -> Option<BBox> {
        raster_box(self.distractors[i].shape, &self.distractor_extent(i, t), self.width, self.height)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return Err(Error::InvalidScene("empty frame size or length".into()));
        }
        if self.distractors.len() > MAX_DISTRACTORS {
            return Err(Error::InvalidScene(format!("{} distractors (max {MAX_DISTRACTORS})", self.distractors.len())));
        }
        let t = &self.target;
        let half = t.size / 2.0;
        let (w, h) = (self.width as f64, self.height as f64);
        if t.size <= 0.0 || t.start.0 - half < 0.0 || t.start.1 - half < 0.0 || t.start.0 + half > w || t.start.1 + half > h {
            return Err(Error::InvalidScene("target starts outside the frame".into()));
        }
        if self.target_absent(0) {
            return Err(Error::InvalidScene("target must be visible in the first frame".into()));
        }
        for e in &self.events {
            let (start, end) = match *e {
                Event::Occlude { start, end } | Event::ExitView { start, end, .. } | Event::Deform { start, end } => {
                    (start, end)
                }
            };
            if start >= end {
                return Err(Error::InvalidScene(format!("empty event interval {start}..{end}")));
            }
        }
        describe_target(self).map(|_| ())
    }
}

fn raster_box(shape: Shape, extent: &BBox, width: usize, height: usize) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (x, y) in raster_pixels(shape, extent, width, height) {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    (x0 != usize::MAX).then(|| BBox::new(x0 as f64, y0 as f64, (x1 - x0) as f64, (y1 - y0) as f64))
}

fn raster_pixels(shape: Shape, extent: &BBox, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    let xs = extent.x.floor().max(0.0) as usize..(extent.right().ceil().max(0.0) as usize).min(width);
    let ys = extent.y.floor().max(0.0) as usize..(extent.bottom().ceil().max(0.0) as usize).min(height);
    ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
        .filter(move |&(x, y)| shape.covers(extent, x as f64 + 0.5, y as f64 + 0.5))
}

fn direction(v: (f64, f64)) -> &'static str {
    if v.0.abs() < 1e-9 && v.1.abs() < 1e-9 {
        "still"
    } else if v.0.abs() >= v.1.abs() {
        if v.0 > 0.0 { "right" } else { "left" }
    } else if v.1 > 0.0 {
        "down"
    } else {
        "up"
    }
}

/// "the [small|large] <color> <shape> moving <direction>".
///
/// A size word is added only when a distractor shares colour and shape; the
/// scene is rejected when no such word separates them.
pub fn describe_target(spec: &SceneSpec) -> Result<String> {
    let t = &spec.target;
    let twins: Vec<&ObjectSpec> = spec
        .distractors
        .iter()
        .filter(|d| d.color == t.color && d.shape == t.shape)
        .collect();
    let qualifier = if twins.is_empty() {
        ""
    } else if twins.iter().all(|d| d.size > t.size) {
        "small "
    } else if twins.iter().all(|d| d.size < t.size) {
        "large "
    } else {
        return Err(Error::InvalidScene(format!(
            "target {} {} cannot be told apart from its distractors",
            t.color.name(),
            t.shape.name()
        )));
    };
    let motion = match direction(t.velocity) {
        "still" => "staying still".to_string(),
        d => format!("moving {d}"),
    };
    Ok(format!("the {qualifier}{} {} {motion}", t.color.name(), t.shape.name()))
}

/// Every word a generated sentence can contain.
pub fn corpus_vocabulary() -> Vocabulary {
    let mut words: Vec<String> = ["the", "small", "large", "moving", "staying", "still", "left", "right", "up", "down"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    words.extend(Color::ALL.iter().map(|c| c.name().to_string()));
    words.extend(Shape::ALL.iter().map(|s| s.name().to_string()));
    words.sort();
    Vocabulary::from_tokens(words)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Annotation {
    /// `None` while out of view.
    pub bbox: Option<BBox>,
    pub occluded: bool,
}

impl Annotation {
    pub fn visible(&self) -> bool {
        self.bbox.is_some()
    }

    /// Visible and unoccluded.
    pub fn clear(&self) -> Option<BBox> {
        self.bbox.filter(|_| !self.occluded)
    }
}

/// A generated or loaded video with its annotations.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub name: String,
    pub spec: SceneSpec,
    pub frames: Vec<Frame>,
    pub annotations: Vec<Annotation>,
    pub masks: Vec<BinaryMask>,
    pub sentence: String,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn initial_box(&self) -> Result<BBox> {
        self.annotations
            .first()
            .and_then(|a| a.bbox)
            .ok_or_else(|| Error::InvalidScene(format!("{}: no initial box", self.name)))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let masks_dir = dir.join("masks");
        fs::create_dir_all(&masks_dir).map_err(|e| Error::file(&masks_dir, e))?;
        for (t, (frame, mask)) in self.frames.iter().zip(&self.masks).enumerate() {
            frame.save_png(&dir.join(format!("{t:06}.png")))?;
            mask.to_gray().save_png(&masks_dir.join(format!("{t:06}.png")))?;
        }
        let gt_path = dir.join("groundtruth.csv");
        let mut w = csv::Writer::from_path(&gt_path)?;
        w.write_record(["frame", "x", "y", "w", "h", "visible"])?;
        for (t, a) in self.annotations.iter().enumerate() {
            let b = a.bbox.unwrap_or(BBox::new(0.0, 0.0, 0.0, 0.0));
            w.write_record([
                t.to_string(),
                b.x.to_string(),
                b.y.to_string(),
                b.w.to_string(),
                b.h.to_string(),
                u8::from(a.visible()).to_string(),
            ])?;
        }
        w.flush()?;
        let lang = dir.join("language.txt");
        fs::write(&lang, format!("{}\n", self.sentence)).map_err(|e| Error::file(&lang, e))?;
        let spec_path = dir.join("spec.json");
        fs::write(&spec_path, serde_json::to_string_pretty(&self.spec)?).map_err(|e| Error::file(&spec_path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec_path = dir.join("spec.json");
        let spec: SceneSpec = serde_json::from_str(&fs::read_to_string(&spec_path).map_err(|e| Error::file(&spec_path, e))?)?;
        let lang = dir.join("language.txt");
        let sentence = fs::read_to_string(&lang).map_err(|e| Error::file(&lang, e))?.trim().to_string();
        let mut annotations = Vec::new();
        let mut reader = csv::Reader::from_path(dir.join("groundtruth.csv"))?;
        for (i, row) in reader.deserialize::<(usize, f64, f64, f64, f64, u8)>().enumerate() {
            let (t, x, y, w, h, visible) = row?;
            if t != i {
                return Err(Error::InvalidScene(format!("{}: groundtruth row {i} has frame {t}", dir.display())));
            }
            annotations.push(Annotation {
                bbox: (visible != 0).then_some(BBox::new(x, y, w, h)),
                occluded: spec.target_occluded(t),
            });
        }
        let mut frames = Vec::with_capacity(annotations.len());
        let mut masks = Vec::with_capacity(annotations.len());
        for t in 0..annotations.len() {
            frames.push(Frame::load_png(&dir.join(format!("{t:06}.png")))?);
            let mut mask = BinaryMask::from_gray(&GrayImage::load_png(&dir.join("masks").join(format!("{t:06}.png")))?);
            mask.bbox = annotations[t].bbox;
            masks.push(mask);
        }
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Self { name, spec, frames, annotations, masks, sentence })
    }
}

fn paint(frame: &mut Frame, shape: Shape, extent: &BBox, rgb: [u8; 3]) {
    let (w, h) = (frame.width(), frame.height());
    let pixels: Vec<_> = raster_pixels(shape, extent, w, h).collect();
    for (x, y) in pixels {
        frame.set_pixel(x, y, rgb);
    }
}

/// Renders every frame of `spec`.
pub fn generate_sequence(name: &str, spec: &SceneSpec) -> Result<Sequence> {
    spec.validate()?;
    let sentence = describe_target(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let mut frames = Vec::with_capacity(spec.frames);
    let mut annotations = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut frame = Frame::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let n: i16 = rng.random_range(-12..=12);
                let base = [22i16, 24, 34];
                frame.set_pixel(x, y, base.map(|b| (b + n).clamp(0, 255) as u8));
            }
        }
        for (i, d) in spec.distractors.iter().enumerate() {
            paint(&mut frame, d.shape, &spec.distractor_extent(i, t), d.color.rgb());
        }
        let bbox = spec.target_box(t);
        if bbox.is_some() {
            paint(&mut frame, spec.target.shape, &spec.target_extent(t), spec.target.color.rgb());
        }
        let occluded = bbox.is_some() && spec.target_occluded(t);
        if occluded {
            let b = bbox.expect("visible");
            let cover = BBox::new(b.x - 1.0, b.y - 1.0, b.w + 2.0, b.h + 2.0);
            paint(&mut frame, Shape::Square, &cover, [128, 128, 128]);
        }
        let mask = match bbox {
            Some(b) => mask_from_bbox(w, h, &b)?,
            None => BinaryMask::empty(w, h),
        };
        frames.push(frame);
        annotations.push(Annotation { bbox, occluded });
        masks.push(mask);
    }
    Ok(Sequence { name: name.to_string(), spec: spec.clone(), frames, annotations, masks, sentence })
}

/// Kinds of randomly drawn scenes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScenarioKind {
    /// Up to three distractors and a random mix of events.
    Training,
    /// A single exit and re-entry at a distant position.
    Reappear,
    /// Exactly one distractor, no events.
    TwoObject,
}

fn random_object<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize, size: f64) -> ObjectSpec {
    let half = size / 2.0;
    let speed = rng.random_range(0.4..1.4);
    let angle = rng.random_range(0.0..2.0 * PI);
    ObjectSpec {
        shape: Shape::ALL[rng.random_range(0..3)],
        color: Color::ALL[rng.random_range(0..8)],
        size,
        start: (
            rng.random_range(half..width as f64 - half),
            rng.random_range(half..height as f64 - half),
        ),
        velocity: (speed * angle.cos(), speed * angle.sin()),
        wiggle: rng.random_range(0.0..2.0),
        wiggle_period: rng.random_range(8.0..20.0),
    }
}

/// Draws a valid scene of the requested kind.
pub fn random_scene<R: Rng + ?Sized>(
    rng: &mut R,
    kind: ScenarioKind,
    width: usize,
    height: usize,
    frames: usize,
) -> SceneSpec {
    loop {
        let size = rng.random_range(9.0..15.0f64).round();
        let target = random_object(rng, width, height, size);
        let n_distractors = match kind {
            ScenarioKind::Training => rng.random_range(0..=3),
            ScenarioKind::Reappear => rng.random_range(0..=2),
            ScenarioKind::TwoObject => 1,
        };
        let distractors = (0..n_distractors)
            .map(|_| {
                let s = rng.random_range(7.0..15.0f64).round();
                random_object(rng, width, height, s)
            })
            .collect();
        let mut events = Vec::new();
        match kind {
            ScenarioKind::Training => {
                if frames > 12 && rng.random_bool(0.3) {
                    let s = rng.random_range(5..frames - 6);
                    events.push(Event::Occlude { start: s, end: s + rng.random_range(2..5) });
                }
                if frames > 16 && rng.random_bool(0.2) {
                    let s = rng.random_range(6..frames - 8);
                    let r = (rng.random_range(-20.0..20.0f64).round(), rng.random_range(-15.0..15.0f64).round());
                    events.push(Event::ExitView { start: s, end: s + rng.random_range(3..7), reentry: r });
                }
                if frames > 10 && rng.random_bool(0.3) {
                    let s = rng.random_range(2..frames - 8);
                    events.push(Event::Deform { start: s, end: s + 8 });
                }
            }
            ScenarioKind::Reappear => {
                let start = (frames / 3).max(1);
                let end = (start + rng.random_range(4..8)).min(frames.saturating_sub(6).max(start + 1));
                let angle = rng.random_range(0.0..2.0 * PI);
                let dist = rng.random_range(22.0..32.0);
                events.push(Event::ExitView {
                    start,
                    end,
                    reentry: ((dist * angle.cos()).round(), (dist * angle.sin()).round()),
                });
            }
            ScenarioKind::TwoObject => {}
        }
        let spec = SceneSpec { width, height, frames, target, distractors, events, seed: rng.random() };
        if spec.validate().is_err() {
            continue;
        }
        if kind == ScenarioKind::Reappear && !reappears_far(&spec) {
            continue;
        }
        if kind == ScenarioKind::TwoObject && !objects_separated(&spec) {
            continue;
        }
        return spec;
    }
}

fn reappears_far(spec: &SceneSpec) -> bool {
    let Some(Event::ExitView { start, end, .. }) = spec.events.first().cloned() else {
        return false;
    };
    match (spec.target_box(start - 1), spec.target_box(end)) {
        (Some(before), Some(after)) => before.iou(&after) == 0.0 && before.center_distance(&after) >= 1.5 * spec.target.size,
        _ => false,
    }
}

fn objects_separated(spec: &SceneSpec) -> bool {
    (0..spec.frames).all(|t| match (spec.target_box(t), spec.distractor_box(0, t)) {
        (Some(a), Some(b)) => a.intersection(&b) == 0.0,
        _ => false,
    })
}

/// Options for [`generate_corpus`].
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub train_sequences: usize,
    pub train_frames: usize,
    pub test_sequences: usize,
    pub test_frames: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train_sequences: 200,
            train_frames: 40,
            test_sequences: 50,
            test_frames: 40,
            width: 64,
            height: 48,
            seed: 0,
        }
    }
}

/// Training scenes plus disappear/reappear test scenes, in memory.
pub fn build_corpus(cfg: &CorpusConfig) -> Result<(Vec<Sequence>, Vec<Sequence>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut make = |kind, count, frames, prefix: &str| -> Result<Vec<Sequence>> {
        (0..count)
            .map(|i| {
                let spec = random_scene(&mut rng, kind, cfg.width, cfg.height, frames);
                generate_sequence(&format!("{prefix}{i:04}"), &spec)
            })
            .collect()
    };
    let train = make(ScenarioKind::Training, cfg.train_sequences, cfg.train_frames, "train")?;
    let test = make(ScenarioKind::Reappear, cfg.test_sequences, cfg.test_frames, "reappear")?;
    Ok((train, test))
}

/// Writes `train/`, `test/` and `vocab.txt` under `root`.
pub fn generate_corpus(root: &Path, cfg: &CorpusConfig) -> Result<()> {
    let (train, test) = build_corpus(cfg)?;
    for (split, seqs) in [("train", &train), ("test", &test)] {
        for s in seqs {
            s.save(&root.join(split).join(&s.name))?;
        }
    }
    corpus_vocabulary().save(&root.join("vocab.txt"))
}

/// Sequence directories under `dir`, sorted by name.
pub fn sequence_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::file(dir, e))? {
        let path = entry.map_err(|e| Error::file(dir, e))?.path();
        if path.join("groundtruth.csv").is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_split(dir: &Path) -> Result<Vec<Sequence>> {
    sequence_dirs(dir)?.iter().map(|d| Sequence::load(d)).collect()
}

impl fmt::Display for SceneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} ({}x{}, {} frames, {} distractors, {} events)",
            self.target.color.name(),
            self.target.shape.name(),
            self.width,
            self.height,
            self.frames,
            self.distractors.len(),
            self.events.len()
        )
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::language::{tokenize, words, MAX_TOKENS, UNK_ID};

    fn object(shape: Shape, color: Color, size: f64, start: (f64, f64), velocity: (f64, f64)) -> ObjectSpec {
        ObjectSpec { shape, color, size, start, velocity, wiggle: 0.0, wiggle_period: 10.0 }
    }

    fn scene(target: ObjectSpec, distractors: Vec<ObjectSpec>) -> SceneSpec {
        SceneSpec { width: 64, height: 48, frames: 1, target, distractors, events: vec![], seed: 1 }
    }

    #[test]
    fn centred_square_mask_has_100_ones() {
        let spec = scene(object(Shape::Square, Color::Red, 10.0, (32.0, 24.0), (0.0, 0.0)), vec![]);
        let seq = generate_sequence("s", &spec).unwrap();
        assert_eq!(seq.masks[0].ones(), 100);
        assert_eq!(seq.annotations[0].bbox, Some(BBox::new(27.0, 19.0, 10.0, 10.0)));
        assert_eq!(seq.frames[0].pixel(32, 24), Color::Red.rgb());
    }

    #[test]
    fn occlusion_keeps_box_and_sets_flag() {
        let mut spec = scene(object(Shape::Circle, Color::Blue, 10.0, (20.0, 20.0), (1.0, 0.0)), vec![]);
        spec.frames = 10;
        spec.events.push(Event::Occlude { start: 3, end: 6 });
        let seq = generate_sequence("s", &spec).unwrap();
        for t in 0..10 {
            assert_eq!(seq.annotations[t].occluded, (3..6).contains(&t));
            assert!(seq.annotations[t].bbox.is_some());
        }
        let b = seq.annotations[4].bbox.unwrap();
        assert_eq!(seq.frames[4].pixel(b.cx() as usize, b.cy() as usize), [128, 128, 128]);
    }

    #[test]
    fn exit_view_hides_target_and_zeroes_mask() {
        let mut spec = scene(object(Shape::Square, Color::Green, 8.0, (20.0, 20.0), (0.5, 0.0)), vec![]);
        spec.frames = 12;
        spec.events.push(Event::ExitView { start: 4, end: 7, reentry: (20.0, 10.0) });
        let seq = generate_sequence("s", &spec).unwrap();
        for t in 4..7 {
            assert!(seq.annotations[t].bbox.is_none());
            assert_eq!(seq.masks[t].ones(), 0);
        }
        let before = seq.annotations[3].bbox.unwrap();
        let after = seq.annotations[7].bbox.unwrap();
        assert!(after.cx() - before.cx() > 15.0);
        assert!(after.x >= 0.0 && after.right() <= 64.0 && after.bottom() <= 48.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = random_scene(&mut rng, ScenarioKind::Training, 64, 48, 15);
        let a = generate_sequence("a", &spec).unwrap();
        let b = generate_sequence("b", &spec).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.masks, b.masks);
    }

    #[test]
    fn target_outside_frame_is_rejected() {
        let spec = scene(object(Shape::Square, Color::Red, 10.0, (2.0, 24.0), (0.0, 0.0)), vec![]);
        assert!(matches!(generate_sequence("s", &spec), Err(Error::InvalidScene(_))));
    }

    #[test]
    fn description_examples() {
        let red_square = object(Shape::Square, Color::Red, 10.0, (20.0, 20.0), (1.0, 0.2));
        let blue_circle = object(Shape::Circle, Color::Blue, 10.0, (40.0, 30.0), (0.0, 1.0));
        assert_eq!(describe_target(&scene(red_square.clone(), vec![blue_circle])).unwrap(), "the red square moving right");
        let red_circle = object(Shape::Circle, Color::Red, 10.0, (40.0, 30.0), (0.0, 1.0));
        assert_eq!(describe_target(&scene(red_square.clone(), vec![red_circle])).unwrap(), "the red square moving right");
        let big_twin = object(Shape::Square, Color::Red, 14.0, (40.0, 30.0), (0.0, 1.0));
        assert_eq!(
            describe_target(&scene(red_square.clone(), vec![big_twin.clone()])).unwrap(),
            "the small red square moving right"
        );
        let small_twin = object(Shape::Square, Color::Red, 6.0, (40.0, 30.0), (0.0, 1.0));
        assert_eq!(
            describe_target(&scene(red_square.clone(), vec![small_twin.clone()])).unwrap(),
            "the large red square moving right"
        );
        assert!(describe_target(&scene(red_square.clone(), vec![big_twin, small_twin])).is_err());
        let same = object(Shape::Square, Color::Red, 10.0, (40.0, 30.0), (0.0, 1.0));
        assert!(describe_target(&scene(red_square, vec![same])).is_err());
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig { train_sequences: 2, train_frames: 6, test_sequences: 1, test_frames: 20, seed: 3, ..Default::default() };
        generate_corpus(dir.path(), &cfg).unwrap();
        let (train, _) = build_corpus(&cfg).unwrap();
        let loaded = load_split(&dir.path().join("train")).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].frames, train[0].frames);
        assert_eq!(loaded[0].masks.iter().map(|m| &m.values).collect::<Vec<_>>(), train[0].masks.iter().map(|m| &m.values).collect::<Vec<_>>());
        assert_eq!(loaded[0].annotations, train[0].annotations);
        assert_eq!(loaded[0].sentence, train[0].sentence);
        assert_eq!(load_split(&dir.path().join("test")).unwrap().len(), 1);
        assert_eq!(Vocabulary::load(&dir.path().join("vocab.txt")).unwrap(), corpus_vocabulary());
    }

    #[test]
    fn reappear_scenes_return_far_away() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let spec = random_scene(&mut rng, ScenarioKind::Reappear, 64, 48, 40);
            assert!(reappears_far(&spec));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn generated_scenes_are_consistent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = random_scene(&mut rng, ScenarioKind::Training, 64, 48, 20);
            let seq = generate_sequence("p", &spec).unwrap();
            let vocab = corpus_vocabulary();
            prop_assert!(words(&seq.sentence).count() <= MAX_TOKENS);
            prop_assert!(!tokenize(&seq.sentence, &vocab).contains(&UNK_ID));
            for (a, m) in seq.annotations.iter().zip(&seq.masks) {
                match a.bbox {
                    Some(b) => prop_assert_eq!(&m.values, &mask_from_bbox(64, 48, &b).unwrap().values),
                    None => prop_assert_eq!(m.ones(), 0),
                }
            }
            prop_assert!(spec.distractors.len() <= MAX_DISTRACTORS);
        }
    }
}
