//! Automated box prompting: detector stand-ins (mask-oracle or detections
//! file), best-box selection, corner encoding into prompt tokens, and the
//! assembly of learnable prompt embeddings with box tokens.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::nn::FourierPositionalEncoder;
use crate::tensor::{concat_axis0, Tensor};

/// Axis-aligned box in pixel coordinates, corners inclusive, `x1 < x2` and
/// `y1 < y2` after clamping to the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub confidence: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, confidence: f64) -> Result<Self> {
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::Data(format!(
                "degenerate box ({x1},{y1})-({x2},{y2})"
            )));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Data(format!(
                "box confidence {confidence} outside [0,1]"
            )));
        }
        Ok(BoundingBox { x1, y1, x2, y2, confidence })
    }

    /// Clamp the corners into the image; errors if the box degenerates.
    pub fn clamped(&self, width: usize, height: usize) -> Result<Self> {
        let x1 = self.x1.clamp(0.0, (width - 1) as f64);
        let x2 = self.x2.clamp(0.0, (width - 1) as f64);
        let y1 = self.y1.clamp(0.0, (height - 1) as f64);
        let y2 = self.y2.clamp(0.0, (height - 1) as f64);
        BoundingBox::new(x1, y1, x2, y2, self.confidence)
    }
}

/// Detections file: image id -> list of boxes, parsed from a JSON array of
/// `{id, boxes: [{x1,y1,x2,y2,confidence}]}` entries. Duplicate ids are
/// rejected.
#[derive(Debug, Clone, Default)]
pub struct DetectionsFile {
    map: BTreeMap<String, Vec<BoundingBox>>,
}

#[derive(Deserialize)]
struct RawEntry {
    id: String,
    boxes: Vec<RawBox>,
}

#[derive(Deserialize)]
struct RawBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    confidence: f64,
}

impl DetectionsFile {
    pub fn parse(text: &str) -> Result<Self> {
        let entries: Vec<RawEntry> = serde_json::from_str(text)?;
        let mut map = BTreeMap::new();
        for entry in entries {
            let boxes = entry
                .boxes
                .iter()
                .map(|b| BoundingBox::new(b.x1, b.y1, b.x2, b.y2, b.confidence))
                .collect::<Result<Vec<_>>>()?;
            if map.insert(entry.id.clone(), boxes).is_some() {
                return Err(Error::Data(format!(
                    "detections file has duplicate id `{}`",
                    entry.id
                )));
            }
        }
        Ok(DetectionsFile { map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, id: &str) -> Option<&[BoundingBox]> {
        self.map.get(id).map(|v| v.as_slice())
    }
}

/// Where box prompts come from.
pub enum DetectionSource {
    /// Tight bounding box of the ground-truth mask, confidence 1.0, each
    /// corner coordinate jittered by a uniform integer in `[-jitter, +jitter]`
    /// pixels.
    OracleFromMask { jitter_px: u32 },
    /// Boxes read verbatim from a detections file; every image id must be
    /// covered.
    FromFile(DetectionsFile),
    /// Box prompting disabled.
    None,
}

/// Tight bounding box of the mask foreground as inclusive pixel indices
/// `(min_x, min_y, max_x, max_y)`; `None` when the mask is empty.
pub fn mask_bbox(mask: &Tensor) -> Option<(usize, usize, usize, usize)> {
    let shape = mask.shape();
    let (h, w) = (shape[0], shape[1]);
    let data = mask.to_vec();
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for y in 0..h {
        for x in 0..w {
            if data[y * w + x] > 0.5 {
                bounds = Some(match bounds {
                    None => (x, y, x, y),
                    Some((x1, y1, x2, y2)) => (x1.min(x), y1.min(y), x2.max(x), y2.max(y)),
                });
            }
        }
    }
    bounds
}

/// Run the configured detector for one image.
///
/// The oracle variant needs the ground-truth mask and returns its tight
/// foreground box (empty foreground gives an empty list, which callers treat
/// as "no box prompt"); the file variant requires an entry for `id`.
pub fn detect_boxes<R: Rng>(
    source: &DetectionSource,
    id: &str,
    width: usize,
    height: usize,
    mask: Option<&Tensor>,
    rng: &mut R,
) -> Result<Vec<BoundingBox>> {
    match source {
        DetectionSource::None => Ok(Vec::new()),
        DetectionSource::FromFile(file) => file
            .get(id)
            .map(|b| b.to_vec())
            .ok_or_else(|| Error::Data(format!("detections file has no entry for image `{id}`"))),
        DetectionSource::OracleFromMask { jitter_px } => {
            let mask = mask.ok_or_else(|| {
                Error::Data(format!(
                    "oracle detector needs a ground-truth mask for image `{id}`"
                ))
            })?;
            let Some((x1, y1, x2, y2)) = mask_bbox(mask) else {
                return Ok(Vec::new());
            };
            let (mut x1, mut y1, mut x2, mut y2) = (x1 as f64, y1 as f64, x2 as f64, y2 as f64);
            if *jitter_px > 0 {
                let j = *jitter_px as i64;
                let mut shift = |v: &mut f64| {
                    *v += rng.random_range(-j..=j) as f64;
                };
                shift(&mut x1);
                shift(&mut y1);
                shift(&mut x2);
                shift(&mut y2);
            }
            x1 = x1.clamp(0.0, (width - 1) as f64);
            y1 = y1.clamp(0.0, (height - 1) as f64);
            x2 = x2.clamp(0.0, (width - 1) as f64);
            y2 = y2.clamp(0.0, (height - 1) as f64);
            // jitter can invert an edge; keep at least one pixel of extent
            if x2 <= x1 {
                x2 = (x1 + 1.0).min((width - 1) as f64);
                x1 = x2 - 1.0;
            }
            if y2 <= y1 {
                y2 = (y1 + 1.0).min((height - 1) as f64);
                y1 = y2 - 1.0;
            }
            Ok(vec![BoundingBox { x1, y1, x2, y2, confidence: 1.0 }])
        }
    }
}

/// Highest-confidence box; ties break toward the lowest index.
pub fn select_best_box(boxes: &[BoundingBox]) -> Option<&BoundingBox> {
    let mut best: Option<&BoundingBox> = None;
    for b in boxes {
        match best {
            None => best = Some(b),
            Some(cur) if b.confidence > cur.confidence => best = Some(b),
            _ => {}
        }
    }
    best
}

/// Encode a box into two prompt tokens: positional encoding of each corner
/// (normalized by `(width-1, height-1)`) plus a trainable per-corner type
/// vector. Result shape `[2, d]`.
pub fn box_to_prompt_tokens(
    bbox: &BoundingBox,
    enc: &FourierPositionalEncoder,
    tl_type: &Tensor,
    br_type: &Tensor,
    width: usize,
    height: usize,
) -> Result<Tensor> {
    let bbox = bbox.clamped(width, height)?;
    let d = enc.dim();
    let norm_x = |x: f64| x / (width - 1) as f64;
    let norm_y = |y: f64| y / (height - 1) as f64;
    let tl = enc
        .encode_point(norm_x(bbox.x1), norm_y(bbox.y1))
        .reshape(&[1, d])?
        .add(&tl_type.reshape(&[1, d])?)?;
    let br = enc
        .encode_point(norm_x(bbox.x2), norm_y(bbox.y2))
        .reshape(&[1, d])?
        .add(&br_type.reshape(&[1, d])?)?;
    concat_axis0(&[tl, br])
}

/// Prompt token matrix fed to the decoder, shape `[B, n_tokens, d]`. The
/// learnable slice shares storage (and therefore gradients) with the single
/// prompt embedding.
pub struct PromptTokens {
    pub tokens: Tensor,
}

impl PromptTokens {
    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }
    pub fn len(&self) -> usize {
        self.tokens.shape()[1]
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Concatenate the learnable prompt embedding with optional box tokens and
/// broadcast to the batch. Gradients w.r.t. the embedding accumulate across
/// all batch rows.
pub fn assemble_prompts(
    prompt_embedding: &Tensor,
    box_tokens: Option<&Tensor>,
    batch: usize,
) -> Result<PromptTokens> {
    let shape = prompt_embedding.shape();
    if shape.len() != 2 {
        return Err(Error::Config(format!(
            "prompt embedding must be [n, d], got {shape:?}"
        )));
    }
    let d = shape[1];
    let per_sample = match box_tokens {
        None => prompt_embedding.clone(),
        Some(bt) => {
            if bt.shape() != [2, d] {
                return Err(Error::ShapeMismatch {
                    op: "assemble_prompts",
                    lhs: shape,
                    rhs: bt.shape(),
                });
            }
            concat_axis0(&[prompt_embedding.clone(), bt.clone()])?
        }
    };
    let n_tokens = per_sample.shape()[0];
    let tokens = per_sample
        .reshape(&[1, n_tokens, d])?
        .repeat_axis(0, batch)?;
    Ok(PromptTokens { tokens })
}

/// Stack per-sample prompt rows (each `[n, d]`, same n) into `[B, n, d]`.
pub fn stack_prompt_rows(rows: &[Tensor]) -> Result<PromptTokens> {
    if rows.is_empty() {
        return Err(Error::Config("stack_prompt_rows: empty batch".into()));
    }
    let shape = rows[0].shape();
    let reshaped: Vec<Tensor> = rows
        .iter()
        .map(|r| r.reshape(&[1, shape[0], shape[1]]))
        .collect::<Result<_>>()?;
    Ok(PromptTokens {
        tokens: concat_axis0(&reshaped)?,
    })
}
