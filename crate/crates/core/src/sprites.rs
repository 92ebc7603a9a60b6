//! Synthetic benchmark renderer: articulated stick figures with factored
//! subject (appearance) and action (pose) parameters, plus the benchmark
//! builder that pairs them into (source, driving, ground-truth target)
//! triples.
//!
//! Factorization contract: the binary silhouette of a render depends only on
//! the action (and jitter), never on the subject; the colours of figure
//! pixels depend only on the subject. The ground-truth target of a pair is
//! simply another render, which is what makes end-to-end PSNR measurable.

use crate::error::{Error, Result};
use crate::finetune::PairSpec;
use crate::rng::rng_for;
use crate::tensor::ImageTensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

pub const IMAGE_SIZE: usize = 64;
/// Background colour every figure is drawn over.
pub const BACKGROUND: [f64; 3] = [0.93, 0.93, 0.96];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Texture {
    Solid,
    Striped,
    Dotted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BodyShape {
    Round,
    Square,
    Tall,
}

/// Appearance parameters. The body shape selects the interior badge drawn
/// inside the torso, so it never changes the outer silhouette.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub subject_id: usize,
    pub body_color: [f64; 3],
    pub texture: Texture,
    pub body_shape: BodyShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prop {
    None,
    Stick,
    Ball,
}

/// Pose parameters: limb angles in degrees away from hanging straight down
/// (left limbs swing left, right limbs swing right), a whole-figure offset,
/// and an optional hand prop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActionSpec {
    pub action_id: usize,
    /// [left arm, right arm, left leg, right leg]
    pub limb_angles: [f64; 4],
    pub posture_offset: (f64, f64),
    pub prop: Prop,
}

/// The eight-subject default vocabulary.
pub fn subjects() -> Vec<SubjectSpec> {
    let specs: [([f64; 3], Texture, BodyShape); 8] = [
        ([0.80, 0.10, 0.10], Texture::Solid, BodyShape::Round),
        ([0.10, 0.65, 0.15], Texture::Striped, BodyShape::Square),
        ([0.15, 0.25, 0.80], Texture::Dotted, BodyShape::Tall),
        ([0.85, 0.70, 0.05], Texture::Solid, BodyShape::Square),
        ([0.75, 0.10, 0.70], Texture::Striped, BodyShape::Tall),
        ([0.05, 0.60, 0.60], Texture::Dotted, BodyShape::Round),
        ([0.90, 0.45, 0.05], Texture::Solid, BodyShape::Tall),
        ([0.45, 0.15, 0.65], Texture::Striped, BodyShape::Round),
    ];
    specs
        .into_iter()
        .enumerate()
        .map(|(subject_id, (body_color, texture, body_shape))| SubjectSpec {
            subject_id,
            body_color,
            texture,
            body_shape,
        })
        .collect()
}

/// The fifteen-action default vocabulary. Every pair of actions differs in
/// at least one limb angle by at least 20 degrees.
pub fn actions() -> Vec<ActionSpec> {
    let specs: [([f64; 4], (f64, f64), Prop); 15] = [
        ([15.0, 15.0, 10.0, 10.0], (0.0, 0.0), Prop::None),   // idle
        ([20.0, 160.0, 10.0, 10.0], (0.0, 0.0), Prop::None),  // wave
        ([160.0, 160.0, 12.0, 12.0], (0.0, -2.0), Prop::None), // arms up
        ([90.0, 90.0, 8.0, 8.0], (0.0, 0.0), Prop::None),     // t-pose
        ([40.0, 70.0, 35.0, 5.0], (1.0, 0.0), Prop::None),    // walk
        ([110.0, 30.0, 55.0, 15.0], (2.0, 0.0), Prop::None),  // run
        ([30.0, 60.0, 5.0, 80.0], (0.0, 0.0), Prop::None),    // kick
        ([45.0, 45.0, 60.0, 60.0], (0.0, 6.0), Prop::None),   // squat
        ([70.0, 20.0, 45.0, 70.0], (-1.0, 2.0), Prop::None),  // lunge
        ([25.0, 95.0, 10.0, 10.0], (0.0, 0.0), Prop::Stick),  // staff hold
        ([20.0, 130.0, 12.0, 12.0], (0.0, -1.0), Prop::Stick), // staff raise
        ([95.0, 25.0, 10.0, 10.0], (0.0, 0.0), Prop::Ball),   // ball hold
        ([150.0, 20.0, 10.0, 10.0], (0.0, -1.0), Prop::Ball), // ball lift
        ([135.0, 135.0, 30.0, 30.0], (0.0, -4.0), Prop::None), // jump
        ([170.0, 10.0, 20.0, 50.0], (0.0, 0.0), Prop::None),  // stretch
    ];
    specs
        .into_iter()
        .enumerate()
        .map(|(action_id, (limb_angles, posture_offset, prop))| ActionSpec {
            action_id,
            limb_angles,
            posture_offset,
            prop,
        })
        .collect()
}

fn dist_point_segment(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

struct Limb {
    ax: f64,
    ay: f64,
    bx: f64,
    by: f64,
}

struct FigureGeometry {
    cx: f64,
    cy: f64,
    limbs: [Limb; 4],
    prop: Prop,
    prop_a: (f64, f64),
    prop_b: (f64, f64),
}

impl FigureGeometry {
    fn new(action: &ActionSpec, jx: f64, jy: f64) -> Self {
        let cx = 32.0 + action.posture_offset.0 + jx;
        let cy = 34.0 + action.posture_offset.1 + jy;
        let deg = std::f64::consts::PI / 180.0;
        let arm_len = 10.0;
        let leg_len = 11.0;
        // Left limbs swing left (negative x), right limbs swing right.
        let limb = |ax: f64, ay: f64, angle: f64, side: f64, len: f64| {
            let a = angle * deg;
            Limb {
                ax,
                ay,
                bx: ax + side * a.sin() * len,
                by: ay + a.cos() * len,
            }
        };
        let limbs = [
            limb(cx - 4.0, cy - 7.0, action.limb_angles[0], -1.0, arm_len),
            limb(cx + 4.0, cy - 7.0, action.limb_angles[1], 1.0, arm_len),
            limb(cx - 3.0, cy + 5.0, action.limb_angles[2], -1.0, leg_len),
            limb(cx + 3.0, cy + 5.0, action.limb_angles[3], 1.0, leg_len),
        ];
        // Props attach to a hand, so their placement is action-determined.
        let (prop_a, prop_b) = match action.prop {
            Prop::Stick => {
                let hand = (limbs[1].bx, limbs[1].by);
                let a = action.limb_angles[1] * deg;
                let dir = (a.sin(), a.cos());
                (hand, (hand.0 + dir.0 * 8.0, hand.1 + dir.1 * 8.0))
            }
            Prop::Ball => {
                let hand = (limbs[0].bx, limbs[0].by);
                let a = action.limb_angles[0] * deg;
                let dir = (-a.sin(), a.cos());
                let c = (hand.0 + dir.0 * 3.5, hand.1 + dir.1 * 3.5);
                (c, c)
            }
            Prop::None => ((0.0, 0.0), (0.0, 0.0)),
        };
        Self {
            cx,
            cy,
            limbs,
            prop: action.prop,
            prop_a,
            prop_b,
        }
    }

    fn head(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - (self.cy - 13.0));
        (dx * dx + dy * dy).sqrt() <= 4.5
    }

    fn torso(&self, px: f64, py: f64) -> bool {
        let top = self.cy - 8.0;
        let bottom = self.cy + 6.0;
        if py < top || py > bottom {
            return false;
        }
        let t = (py - top) / (bottom - top);
        let half = 4.5 + (3.5 - 4.5) * t;
        (px - self.cx).abs() <= half
    }

    fn limb_hit(&self, px: f64, py: f64) -> bool {
        self.limbs
            .iter()
            .any(|l| dist_point_segment(px, py, l.ax, l.ay, l.bx, l.by) <= 1.6)
    }

    fn prop_hit(&self, px: f64, py: f64) -> bool {
        match self.prop {
            Prop::None => false,
            Prop::Stick => {
                dist_point_segment(
                    px,
                    py,
                    self.prop_a.0,
                    self.prop_a.1,
                    self.prop_b.0,
                    self.prop_b.1,
                ) <= 1.3
            }
            Prop::Ball => {
                let (dx, dy) = (px - self.prop_a.0, py - self.prop_a.1);
                (dx * dx + dy * dy).sqrt() <= 3.0
            }
        }
    }

    fn badge(&self, px: f64, py: f64, shape: BodyShape) -> bool {
        let (dx, dy) = (px - self.cx, py - (self.cy - 1.0));
        match shape {
            BodyShape::Round => (dx * dx + dy * dy).sqrt() <= 2.8,
            BodyShape::Square => dx.abs() <= 2.5 && dy.abs() <= 2.5,
            BodyShape::Tall => dx.abs() <= 1.6 && dy.abs() <= 4.0,
        }
    }
}

/// Offsets derived from a jitter seed, each in [-2, 2] whole pixels.
/// Seed 0 is the canonical, unjittered placement.
pub fn jitter_offsets(jitter_seed: u64) -> (f64, f64) {
    if jitter_seed == 0 {
        return (0.0, 0.0);
    }
    let mut rng = rng_for(jitter_seed, "render-jitter", 0);
    (
        rng.gen_range(-2i32..=2) as f64,
        rng.gen_range(-2i32..=2) as f64,
    )
}

/// Deterministic 3 x 64 x 64 render of a subject performing an action.
pub fn render(subject: &SubjectSpec, action: &ActionSpec, jitter_seed: u64) -> ImageTensor {
    let (jx, jy) = jitter_offsets(jitter_seed);
    let geo = FigureGeometry::new(action, jx, jy);
    let color = subject.body_color;

    ImageTensor::from_fn(3, IMAGE_SIZE, IMAGE_SIZE, |c, y, x| {
        let px = x as f64 + 0.5;
        let py = y as f64 + 0.5;

        let torso = geo.torso(px, py);
        let head = geo.head(px, py);
        let limb = geo.limb_hit(px, py);
        let prop = geo.prop_hit(px, py);
        if !(torso || head || limb || prop) {
            return BACKGROUND[c];
        }

        // The badge is a solid interior marking; everything else carries the
        // subject texture. Tones stay close to 1 so the per-channel mean of
        // figure pixels barely moves across actions.
        let tone = if torso && geo.badge(px, py, subject.body_shape) {
            0.55
        } else {
            let base = if torso || head { 1.0 } else { 0.92 };
            let rel_y = (py - geo.cy).floor() as i64;
            let rel_x = (px - geo.cx).floor() as i64;
            let textured = match subject.texture {
                Texture::Solid => false,
                Texture::Striped => rel_y.rem_euclid(4) < 2,
                Texture::Dotted => rel_y.rem_euclid(4) < 2 && rel_x.rem_euclid(4) < 2,
            };
            if textured {
                base * 0.82
            } else {
                base
            }
        };
        color[c] * tone
    })
}

/// Convenience: render by vocabulary ids at the canonical position.
pub fn render_canonical(subject_id: usize, action_id: usize) -> Result<ImageTensor> {
    let subs = subjects();
    let acts = actions();
    let s = subs.get(subject_id).ok_or(Error::Vocabulary {
        kind: "subject",
        id: subject_id,
        len: subs.len(),
    })?;
    let a = acts.get(action_id).ok_or(Error::Vocabulary {
        kind: "action",
        id: action_id,
        len: acts.len(),
    })?;
    Ok(render(s, a, 0))
}

/// One benchmark entry: the two conditioning images, the exact target
/// render, and the codes that produced them.
#[derive(Debug, Clone)]
pub struct RenderedTriple {
    pub pair_id: usize,
    pub source_img: ImageTensor,
    pub driving_img: ImageTensor,
    pub target_img: ImageTensor,
    pub source_code: (usize, usize),
    pub driving_code: (usize, usize),
    pub jitter_source: u64,
    pub jitter_driving: u64,
}

impl RenderedTriple {
    pub fn pair_spec(&self) -> PairSpec {
        PairSpec {
            source_image: self.source_img.clone(),
            driving_image: self.driving_img.clone(),
            source_code: self.source_code,
            driving_code: self.driving_code,
        }
    }

    pub fn target_code(&self) -> (usize, usize) {
        (self.source_code.0, self.driving_code.1)
    }
}

/// Builds every (subject, driving action) pairing: the source shows the
/// subject in some other action, the driving image shows a different subject
/// performing the driving action, and the target is the exact render of the
/// source subject in the driving action. The target uses the driving
/// render's jitter so the oracle aligns with the structure the sampler is
/// steered toward.
pub fn make_benchmark(
    n_subjects: usize,
    n_actions: usize,
    seed: u64,
) -> Result<Vec<RenderedTriple>> {
    let subs = subjects();
    let acts = actions();
    if n_subjects == 0 || n_subjects > subs.len() {
        return Err(Error::Config(format!(
            "n_subjects {} out of [1, {}]",
            n_subjects,
            subs.len()
        )));
    }
    if n_actions < 2 || n_actions > acts.len() {
        return Err(Error::Config(format!(
            "n_actions {} out of [2, {}]",
            n_actions,
            acts.len()
        )));
    }

    let mut triples = Vec::with_capacity(n_subjects * n_actions);
    let mut pair_id = 0;
    for s in 0..n_subjects {
        for a_drv in 0..n_actions {
            let mut rng = rng_for(seed, "bench-pair", pair_id as u64);
            let a_src = {
                let off = rng.gen_range(1..n_actions);
                (a_drv + off) % n_actions
            };
            let s_drv = if n_subjects == 1 {
                s
            } else {
                let off = rng.gen_range(1..n_subjects);
                (s + off) % n_subjects
            };
            let jitter_source: u64 = rng.gen_range(1..u64::MAX);
            let jitter_driving: u64 = rng.gen_range(1..u64::MAX);

            triples.push(RenderedTriple {
                pair_id,
                source_img: render(&subs[s], &acts[a_src], jitter_source),
                driving_img: render(&subs[s_drv], &acts[a_drv], jitter_driving),
                target_img: render(&subs[s], &acts[a_drv], jitter_driving),
                source_code: (s, a_src),
                driving_code: (s_drv, a_drv),
                jitter_source,
                jitter_driving,
            });
            pair_id += 1;
        }
    }
    Ok(triples)
}

/// Manifest line describing one stored triple.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TripleRecord {
    pub pair_id: usize,
    pub subject_id: usize,
    pub source_action_id: usize,
    pub driving_subject_id: usize,
    pub driving_action_id: usize,
    pub jitter_source: u64,
    pub jitter_driving: u64,
    pub source_path: String,
    pub driving_path: String,
    pub target_path: String,
}

pub fn write_png(path: &Path, img: &ImageTensor) -> Result<()> {
    let (c, h, w) = img.shape();
    if c != 3 {
        return Err(Error::Config(format!("png export needs 3 channels, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (img.data[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img.data[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img.data[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.display().to_string(),
            source,
        })
}

pub fn read_png(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.display().to_string(),
            source,
        })?
        .into_rgb8();
    let (w, h) = img.dimensions();
    Ok(ImageTensor::from_fn(
        3,
        h as usize,
        w as usize,
        |c, y, x| f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0,
    ))
}

/// Writes triples as PNG files plus a line-delimited JSON manifest; returns
/// the manifest path.
pub fn write_dataset(dir: &Path, triples: &[RenderedTriple]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut manifest = Vec::new();
    for t in triples {
        let rec = TripleRecord {
            pair_id: t.pair_id,
            subject_id: t.source_code.0,
            source_action_id: t.source_code.1,
            driving_subject_id: t.driving_code.0,
            driving_action_id: t.driving_code.1,
            jitter_source: t.jitter_source,
            jitter_driving: t.jitter_driving,
            source_path: format!("pair{:03}_source.png", t.pair_id),
            driving_path: format!("pair{:03}_driving.png", t.pair_id),
            target_path: format!("pair{:03}_target.png", t.pair_id),
        };
        write_png(&dir.join(&rec.source_path), &t.source_img)?;
        write_png(&dir.join(&rec.driving_path), &t.driving_img)?;
        write_png(&dir.join(&rec.target_path), &t.target_img)?;
        manifest.push(rec);
    }
    let manifest_path = dir.join("manifest.jsonl");
    let mut f = std::fs::File::create(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    for rec in &manifest {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Config(format!("manifest encode: {e}")))?;
        writeln!(f, "{line}").map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    }
    Ok(manifest_path)
}

/// Loads a dataset back from its manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<RenderedTriple>> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let f = std::fs::File::open(manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TripleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("manifest parse: {e}")))?;
        out.push(RenderedTriple {
            pair_id: rec.pair_id,
            source_img: read_png(&dir.join(&rec.source_path))?,
            driving_img: read_png(&dir.join(&rec.driving_path))?,
            target_img: read_png(&dir.join(&rec.target_path))?,
            source_code: (rec.subject_id, rec.source_action_id),
            driving_code: (rec.driving_subject_id, rec.driving_action_id),
            jitter_source: rec.jitter_source,
            jitter_driving: rec.jitter_driving,
        });
    }
    Ok(out)
}

/// Manifest line describing one training render.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub subject_id: usize,
    pub action_id: usize,
    pub jitter_seed: u64,
    pub path: String,
}

/// One jittered render per (subject, action) combo: the set the base model
/// trains on so it knows the vocabulary before any pair finetuning. Jitters
/// derive from the seed independently of the benchmark triples.
pub fn make_train_split(n_subjects: usize, n_actions: usize, seed: u64) -> Result<Vec<(TrainRecord, ImageTensor)>> {
    let subs = subjects();
    let acts = actions();
    if n_subjects == 0 || n_subjects > subs.len() || n_actions == 0 || n_actions > acts.len() {
        return Err(Error::Config(format!(
            "vocabulary {n_subjects}x{n_actions} out of range"
        )));
    }
    let mut out = Vec::with_capacity(n_subjects * n_actions);
    for s in 0..n_subjects {
        for a in 0..n_actions {
            let jitter_seed =
                crate::rng::derive_seed(seed, "train-split-jitter", (s * n_actions + a) as u64);
            let rec = TrainRecord {
                subject_id: s,
                action_id: a,
                jitter_seed,
                path: format!("train_s{s:02}_a{a:02}.png"),
            };
            out.push((rec.clone(), render(&subs[s], &acts[a], jitter_seed)));
        }
    }
    Ok(out)
}

/// Writes the training split under `dir/train/`; returns the manifest path.
pub fn write_train_split(
    dir: &Path,
    split: &[(TrainRecord, ImageTensor)],
) -> Result<PathBuf> {
    let train_dir = dir.join("train");
    std::fs::create_dir_all(&train_dir)
        .map_err(|e| Error::io(train_dir.display().to_string(), e))?;
    for (rec, img) in split {
        write_png(&train_dir.join(&rec.path), img)?;
    }
    let manifest_path = train_dir.join("train_manifest.jsonl");
    let mut f = std::fs::File::create(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    for (rec, _) in split {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Config(format!("train manifest encode: {e}")))?;
        writeln!(f, "{line}").map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    }
    Ok(manifest_path)
}

/// Loads the training split back; returns (record, image) pairs.
pub fn load_train_split(manifest_path: &Path) -> Result<Vec<(TrainRecord, ImageTensor)>> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let f = std::fs::File::open(manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrainRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("train manifest parse: {e}")))?;
        let img = read_png(&dir.join(&rec.path))?;
        out.push((rec, img));
    }
    Ok(out)
}

/// Binary figure-vs-background mask (true = figure).
pub fn figure_mask(img: &ImageTensor) -> ndarray::Array2<bool> {
    let (_, h, w) = img.shape();
    ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
        (0..3).any(|c| (img.data[[c, y, x]] - BACKGROUND[c]).abs() > 0.1)
    })
}
