//! Shared detection-domain types and their wire formats.
//!
//! Detections travel as JSON lines `{video, frame, class, score, box}`;
//! tubes as a JSON array of `{video, class, score, frames: [{frame, box,
//! score}]}`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::geometry::BBox;

/// One scored box for one class on one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub video: String,
    pub frame: i64,
    pub class_id: usize,
    /// Fused score (confidence x class probability).
    pub score: f64,
    pub confidence: f64,
    /// Pyramid level of origin, 1-based; 0 when unknown (e.g. loaded from disk).
    pub level: usize,
    pub bbox: BBox,
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    video: String,
    frame: i64,
    class: usize,
    score: f64,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

impl Detection {
    fn to_record(&self) -> DetectionRecord {
        DetectionRecord {
            video: self.video.clone(),
            frame: self.frame,
            class: self.class_id,
            score: self.score,
            bbox: self.bbox.into(),
        }
    }

    fn from_record(r: DetectionRecord) -> Self {
        Detection {
            video: r.video,
            frame: r.frame,
            class_id: r.class,
            score: r.score,
            confidence: r.score,
            level: 0,
            bbox: r.bbox.into(),
        }
    }
}

pub fn write_detections_jsonl(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for d in dets {
        serde_json::to_writer(&mut f, &d.to_record())?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_detections_jsonl(path: &Path) -> Result<Vec<Detection>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        out.push(Detection::from_record(rec));
    }
    Ok(out)
}

/// One annotated box; `classes` is a set to allow AVA-style multi-label
/// instances.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthInstance {
    pub video: String,
    pub frame: i64,
    pub bbox: BBox,
    pub classes: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GroundTruthRecord {
    video: String,
    frame: i64,
    class: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

/// Writes one line per (instance, class) pair.
pub fn write_ground_truth_jsonl(path: &Path, gts: &[GroundTruthInstance]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for g in gts {
        for &class in &g.classes {
            let rec = GroundTruthRecord {
                video: g.video.clone(),
                frame: g.frame,
                class,
                bbox: g.bbox.into(),
            };
            serde_json::to_writer(&mut f, &rec)?;
            f.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn read_ground_truth_jsonl(path: &Path) -> Result<Vec<GroundTruthInstance>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GroundTruthRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        out.push(GroundTruthInstance {
            video: rec.video,
            frame: rec.frame,
            bbox: rec.bbox.into(),
            classes: vec![rec.class],
        });
    }
    Ok(out)
}

/// One (frame, box, score) member of an action tube.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TubeMember {
    pub frame: i64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

/// Temporally ordered chain of per-frame boxes for one class. The tube
/// score is the mean of its member scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionTube {
    pub video: String,
    pub class_id: usize,
    members: Vec<TubeMember>,
}

impl ActionTube {
    /// Members must be nonempty with strictly increasing frames.
    pub fn new(video: String, class_id: usize, members: Vec<TubeMember>) -> Result<Self> {
        if members.is_empty() {
            return Err(contract("action tube must have at least one member".to_string()));
        }
        for pair in members.windows(2) {
            if pair[1].frame <= pair[0].frame {
                return Err(contract("action tube frames must be strictly increasing".to_string()));
            }
        }
        Ok(Self { video, class_id, members })
    }

    pub fn members(&self) -> &[TubeMember] {
        &self.members
    }

    pub fn score(&self) -> f64 {
        self.members.iter().map(|m| m.score).sum::<f64>() / self.members.len() as f64
    }

    /// Inclusive (first, last) frame span.
    pub fn span(&self) -> Option<(i64, i64)> {
        match (self.members.first(), self.members.last()) {
            (Some(a), Some(b)) => Some((a.frame, b.frame)),
            _ => None,
        }
    }

    pub fn box_at(&self, frame: i64) -> Option<BBox> {
        self.members
            .binary_search_by_key(&frame, |m| m.frame)
            .ok()
            .map(|i| self.members[i].bbox)
    }
}

#[derive(Serialize, Deserialize)]
struct TubeRecord {
    video: String,
    class: usize,
    score: f64,
    frames: Vec<TubeMember>,
}

pub fn write_tubes_json(path: &Path, tubes: &[ActionTube]) -> Result<()> {
    let recs: Vec<TubeRecord> = tubes
        .iter()
        .map(|t| TubeRecord {
            video: t.video.clone(),
            class: t.class_id,
            score: t.score(),
            frames: t.members.clone(),
        })
        .collect();
    let f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(f, &recs)?;
    Ok(())
}

pub fn read_tubes_json(path: &Path) -> Result<Vec<ActionTube>> {
    let f = std::fs::File::open(path)?;
    let recs: Vec<TubeRecord> = serde_json::from_reader(f)?;
    recs.into_iter()
        .map(|r| ActionTube::new(r.video, r.class, r.frames))
        .collect()
}
