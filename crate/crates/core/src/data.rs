//! Data ingestion and synthetic fixtures.
//!
//! Real videos are out of scope; clips come from a deterministic generator
//! that renders colored moving rectangles over background noise, with exact
//! ground truth by construction. Annotations load from AVA-style CSV rows
//! (`video_id,timestamp,x1,y1,x2,y2,action_id,person_id`, normalized
//! coordinates) or from tube JSON files.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::geometry::BBox;
use crate::model::Clip;
use crate::numeric::FeatureMap;
use crate::types::{ActionTube, GroundTruthInstance, TubeMember};

// ---------------------------------------------------------------------------
// Synthetic clips
// ---------------------------------------------------------------------------

/// Shape of the synthetic scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_objects: usize,
    pub num_classes: usize,
    /// Object side lengths in pixels, min..=max.
    pub size_min: f64,
    pub size_max: f64,
    /// Maximum per-frame speed in pixels.
    pub max_speed: f64,
    /// Background noise amplitude in [0, 1].
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { num_objects: 1, num_classes: 2, size_min: 14.0, size_max: 24.0, max_speed: 1.5, noise: 0.2 }
    }
}

/// Distinct fill colors per class; wraps after the palette length.
fn class_color(class_id: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [0.95, 0.25, 0.20],
        [0.20, 0.55, 0.95],
        [0.25, 0.90, 0.35],
        [0.95, 0.85, 0.20],
        [0.80, 0.30, 0.90],
        [0.20, 0.90, 0.85],
        [0.95, 0.55, 0.15],
        [0.60, 0.60, 0.60],
    ];
    PALETTE[class_id % PALETTE.len()]
}

/// A generated clip with exact per-frame ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticClip {
    pub video: String,
    pub clip: Clip,
    /// Ground truth per frame, index-aligned with the clip's frames.
    pub frame_gts: Vec<Vec<GroundTruthInstance>>,
}

impl SyntheticClip {
    /// Ground truth on the key (last) frame.
    pub fn key_frame_gts(&self) -> &[GroundTruthInstance] {
        self.frame_gts.last().expect("clips are non-empty")
    }

    pub fn key_frame_index(&self) -> i64 {
        (self.clip.len() - 1) as i64
    }

    /// One ground-truth tube per object over the whole clip.
    pub fn gt_tubes(&self) -> Result<Vec<ActionTube>> {
        let mut per_object: BTreeMap<usize, Vec<TubeMember>> = BTreeMap::new();
        for (frame, gts) in self.frame_gts.iter().enumerate() {
            for (oi, g) in gts.iter().enumerate() {
                per_object
                    .entry(oi)
                    .or_default()
                    .push(TubeMember { frame: frame as i64, bbox: g.bbox, score: 1.0 });
            }
        }
        per_object
            .into_iter()
            .map(|(oi, members)| {
                let class_id = self.frame_gts[0][oi].classes[0];
                ActionTube::new(self.video.clone(), class_id, members)
            })
            .collect()
    }
}

struct MovingRect {
    class_id: usize,
    w: f64,
    h: f64,
    // top-left corner position and velocity
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
}

/// Renders one clip of moving rectangles. Deterministic per seed: the same
/// `(seed, spec, k, h, w)` always yields bit-identical frames and ground
/// truth.
pub fn make_synthetic_clip(
    seed: u64,
    spec: &SynthSpec,
    k: usize,
    height: usize,
    width: usize,
) -> Result<SyntheticClip> {
    if spec.num_classes == 0 || spec.num_objects == 0 {
        return Err(contract("synthetic spec needs at least one class and object".to_string()));
    }
    if spec.size_min <= 0.0 || spec.size_max < spec.size_min {
        return Err(contract("synthetic size range is empty".to_string()));
    }
    if spec.size_max >= height.min(width) as f64 {
        return Err(contract(format!(
            "objects of size {} do not fit a {height}x{width} frame",
            spec.size_max
        )));
    }
    if !(0.0..=1.0).contains(&spec.noise) {
        return Err(contract("noise amplitude outside [0, 1]".to_string()));
    }
    let k = k.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut objects: Vec<MovingRect> = (0..spec.num_objects)
        .map(|i| {
            let w = rng.gen_range(spec.size_min..=spec.size_max).round();
            let h = rng.gen_range(spec.size_min..=spec.size_max).round();
            MovingRect {
                // The first object's class follows the seed, so a dataset of
                // consecutive seeds covers every class deterministically.
                class_id: if i == 0 {
                    seed as usize % spec.num_classes
                } else {
                    rng.gen_range(0..spec.num_classes)
                },
                x: rng.gen_range(0.0..=(width as f64 - w)).round(),
                y: rng.gen_range(0.0..=(height as f64 - h)).round(),
                w,
                h,
                vx: rng.gen_range(-spec.max_speed..=spec.max_speed),
                vy: rng.gen_range(-spec.max_speed..=spec.max_speed),
            }
        })
        .collect();

    let video = format!("synth-{seed}");
    let mut frames = Vec::with_capacity(k);
    let mut frame_gts = Vec::with_capacity(k);
    for frame in 0..k {
        let mut img = FeatureMap::zeros(height, width, 3);
        for v in img.data_mut().iter_mut() {
            *v = rng.gen_range(0.0..spec.noise.max(f64::MIN_POSITIVE));
        }
        let mut gts = Vec::with_capacity(objects.len());
        for obj in &objects {
            // Integer raster bounds; ground truth uses the same bounds, so
            // rendered extent and annotation agree exactly.
            let x1 = obj.x.round().clamp(0.0, (width as f64 - obj.w).max(0.0));
            let y1 = obj.y.round().clamp(0.0, (height as f64 - obj.h).max(0.0));
            let (x2, y2) = (x1 + obj.w, y1 + obj.h);
            let color = class_color(obj.class_id);
            for py in y1 as usize..(y2 as usize).min(height) {
                for px in x1 as usize..(x2 as usize).min(width) {
                    for (c, &v) in color.iter().enumerate() {
                        img.set(py, px, c, v);
                    }
                }
            }
            gts.push(GroundTruthInstance {
                video: video.clone(),
                frame: frame as i64,
                bbox: BBox::new(x1, y1, x2, y2),
                classes: vec![obj.class_id],
            });
        }
        frames.push(img);
        frame_gts.push(gts);

        // Advance with reflection at the walls.
        for obj in objects.iter_mut() {
            obj.x += obj.vx;
            obj.y += obj.vy;
            if obj.x < 0.0 {
                obj.x = -obj.x;
                obj.vx = -obj.vx;
            }
            if obj.x > width as f64 - obj.w {
                obj.x = 2.0 * (width as f64 - obj.w) - obj.x;
                obj.vx = -obj.vx;
            }
            if obj.y < 0.0 {
                obj.y = -obj.y;
                obj.vy = -obj.vy;
            }
            if obj.y > height as f64 - obj.h {
                obj.y = 2.0 * (height as f64 - obj.h) - obj.y;
                obj.vy = -obj.vy;
            }
        }
    }

    Ok(SyntheticClip { video, clip: Clip::new(frames)?, frame_gts })
}

/// A fixed corpus of clips with seeds `base_seed..base_seed + count`.
pub fn make_synthetic_dataset(
    base_seed: u64,
    count: usize,
    spec: &SynthSpec,
    k: usize,
    height: usize,
    width: usize,
) -> Result<Vec<SyntheticClip>> {
    (0..count)
        .map(|i| make_synthetic_clip(base_seed + i as u64, spec, k, height, width))
        .collect()
}

// ---------------------------------------------------------------------------
// AVA-style CSV annotations
// ---------------------------------------------------------------------------

/// One CSV row: normalized box plus class and optional person id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub video: String,
    pub frame: i64,
    /// Normalized [0, 1] coordinates; scaled by the frame size at use time.
    pub bbox_norm: [f64; 4],
    pub class_id: usize,
    pub person_id: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowError {
    pub line: usize,
    pub message: String,
}

/// Load outcome: valid records plus per-row diagnostics.
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub records: Vec<AnnotationRecord>,
    pub errors: Vec<RowError>,
    pub warnings: Vec<String>,
}

/// Parses `video_id,timestamp,x1,y1,x2,y2,action_id,person_id` rows.
/// Malformed rows become entries in the error report rather than aborting
/// the load. `class_universe` of 0 disables the class-range check.
pub fn load_ava_csv(path: &Path, class_universe: usize) -> Result<LoadReport> {
    let file = std::fs::File::open(path)?;
    let mut report = LoadReport::default();
    let mut saw_content = false;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        saw_content = true;
        match parse_ava_row(trimmed, class_universe) {
            Ok(rec) => report.records.push(rec),
            Err(message) => report.errors.push(RowError { line: lineno, message }),
        }
    }
    if !saw_content {
        report.warnings.push(format!("{}: empty annotation file", path.display()));
        log::warn!("{}: empty annotation file", path.display());
    }
    Ok(report)
}

fn parse_ava_row(row: &str, class_universe: usize) -> std::result::Result<AnnotationRecord, String> {
    let fields: Vec<&str> = row.split(',').map(str::trim).collect();
    if fields.len() != 8 {
        return Err(format!("expected 8 fields, got {}", fields.len()));
    }
    let video = fields[0].to_string();
    if video.is_empty() {
        return Err("empty video id".to_string());
    }
    let frame: i64 = fields[1].parse().map_err(|_| format!("bad timestamp {:?}", fields[1]))?;
    let mut coords = [0.0f64; 4];
    for (k, f) in fields[2..6].iter().enumerate() {
        let v: f64 = f.parse().map_err(|_| format!("bad coordinate {f:?}"))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(format!("coordinate {v} outside [0, 1]"));
        }
        coords[k] = v;
    }
    if coords[0] > coords[2] || coords[1] > coords[3] {
        return Err("box corners out of order".to_string());
    }
    let class_id: usize = fields[6].parse().map_err(|_| format!("bad action id {:?}", fields[6]))?;
    if class_universe > 0 && class_id >= class_universe {
        return Err(format!("action id {class_id} outside universe 0..{class_universe}"));
    }
    let person_id = if fields[7].is_empty() {
        None
    } else {
        Some(fields[7].parse::<i64>().map_err(|_| format!("bad person id {:?}", fields[7]))?)
    };
    Ok(AnnotationRecord { video, frame, bbox_norm: coords, class_id, person_id })
}

pub fn write_ava_csv(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        let person = r.person_id.map(|p| p.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.video,
            r.frame,
            r.bbox_norm[0],
            r.bbox_norm[1],
            r.bbox_norm[2],
            r.bbox_norm[3],
            r.class_id,
            person
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Scales records into pixel-space instances, merging same
/// (video, frame, person, box) rows into one multi-label instance when a
/// person id is present.
pub fn records_to_instances(
    records: &[AnnotationRecord],
    frame_width: f64,
    frame_height: f64,
) -> Vec<GroundTruthInstance> {
    let mut merged: BTreeMap<(String, i64, i64, [u64; 4]), GroundTruthInstance> = BTreeMap::new();
    let mut out = Vec::new();
    for r in records {
        let bbox = BBox::new(
            r.bbox_norm[0] * frame_width,
            r.bbox_norm[1] * frame_height,
            r.bbox_norm[2] * frame_width,
            r.bbox_norm[3] * frame_height,
        );
        match r.person_id {
            Some(pid) => {
                let key = (r.video.clone(), r.frame, pid, r.bbox_norm.map(f64::to_bits));
                merged
                    .entry(key)
                    .and_modify(|g| {
                        if !g.classes.contains(&r.class_id) {
                            g.classes.push(r.class_id);
                        }
                    })
                    .or_insert_with(|| GroundTruthInstance {
                        video: r.video.clone(),
                        frame: r.frame,
                        bbox,
                        classes: vec![r.class_id],
                    });
            }
            None => out.push(GroundTruthInstance {
                video: r.video.clone(),
                frame: r.frame,
                bbox,
                classes: vec![r.class_id],
            }),
        }
    }
    out.extend(merged.into_values());
    out
}

/// Loads ground-truth tubes and flattens them into per-frame instances.
pub fn load_tube_json(path: &Path) -> Result<(Vec<ActionTube>, Vec<GroundTruthInstance>)> {
    let tubes = crate::types::read_tubes_json(path)?;
    let mut instances = Vec::new();
    for t in &tubes {
        for m in t.members() {
            instances.push(GroundTruthInstance {
                video: t.video.clone(),
                frame: m.frame,
                bbox: m.bbox,
                classes: vec![t.class_id],
            });
        }
    }
    Ok((tubes, instances))
}
