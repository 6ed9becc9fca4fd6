//! Sparse batch labels and the ODR1 label record file format.
//!
//! ODR1 layout (all integers little-endian):
//!
//! ```text
//! "ODR1"
//! repeat {
//!     u32  payload_len
//!     u64  image_id
//!     u16  image_w
//!     u16  image_h
//!     u16  num_boxes
//!     repeat num_boxes { f32 x, f32 y, f32 w, f32 h, u16 class }
//! }
//! ```
//!
//! Boxes are stored center-form, the same as in memory.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;

pub const MAGIC: &[u8; 4] = b"ODR1";
const RECORD_HEADER_LEN: usize = 8 + 2 + 2 + 2;
const BOX_LEN: usize = 4 * 4 + 2;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("bad magic {found:?}, expected \"ODR1\"")]
    BadMagic { found: Vec<u8> },
    #[error("corrupt record at byte offset {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
    #[error("corrupt batch: {0}")]
    CorruptBatch(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One labelled box as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
    pub class_id: u16,
}

impl LabelBox {
    pub fn bbox(&self) -> BBox {
        BBox { x: self.x as f64, y: self.y as f64, w: self.w as f64, h: self.h as f64 }
    }

    fn inside(&self, image_w: u16, image_h: u16) -> bool {
        let (x, y, w, h) = (self.x as f64, self.y as f64, self.w as f64, self.h as f64);
        w > 0.0 && h > 0.0 && x - w / 2.0 >= 0.0 && y - h / 2.0 >= 0.0 && x + w / 2.0 <= image_w as f64 && y + h / 2.0 <= image_h as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub image_id: u64,
    pub image_w: u16,
    pub image_h: u16,
    pub boxes: Vec<LabelBox>,
}

impl LabelRecord {
    pub fn validate(&self) -> Result<(), LabelError> {
        if self.boxes.len() > u16::MAX as usize {
            return Err(LabelError::InvalidRecord(format!(
                "image {} has {} boxes, more than fit in 16 bits",
                self.image_id,
                self.boxes.len()
            )));
        }
        if let Some(bad) = self.boxes.iter().find(|b| !b.inside(self.image_w, self.image_h)) {
            return Err(LabelError::InvalidRecord(format!(
                "image {}: box {:?} is not inside {}x{}",
                self.image_id, bad, self.image_w, self.image_h
            )));
        }
        Ok(())
    }

    pub fn bboxes(&self) -> Vec<BBox> {
        self.boxes.iter().map(LabelBox::bbox).collect()
    }
}

/// Ground truth for a whole batch in coordinate (COO) form.
///
/// `rois_idx[n] = (image position in batch, ordinal within image)` and
/// `rois_values[n]` / `classes[n]` hold the matching box and class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseLabelBatch {
    pub rois_idx: Vec<(usize, usize)>,
    pub rois_values: Vec<BBox>,
    pub classes: Vec<u16>,
    pub batch_size: usize,
}

impl SparseLabelBatch {
    pub fn len(&self) -> usize {
        self.rois_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rois_values.is_empty()
    }

    pub fn validate(&self) -> Result<(), LabelError> {
        if self.rois_idx.len() != self.rois_values.len() || self.rois_idx.len() != self.classes.len() {
            return Err(LabelError::CorruptBatch(format!(
                "length mismatch: {} indices, {} values, {} classes",
                self.rois_idx.len(),
                self.rois_values.len(),
                self.classes.len()
            )));
        }
        if let Some(w) = self.rois_idx.windows(2).position(|w| w[0] >= w[1]) {
            return Err(LabelError::CorruptBatch(format!("rois_idx not strictly sorted at position {}", w + 1)));
        }
        if let Some(&(img, _)) = self.rois_idx.iter().find(|(img, _)| *img >= self.batch_size) {
            return Err(LabelError::CorruptBatch(format!("batch index {img} out of range for batch size {}", self.batch_size)));
        }
        Ok(())
    }

    /// Row ranges `[start, end)` of each image's boxes. Assumes a valid batch.
    pub fn image_ranges(&self) -> Vec<std::ops::Range<usize>> {
        (0..self.batch_size)
            .map(|img| {
                let start = self.rois_idx.partition_point(|(i, _)| *i < img);
                let end = self.rois_idx.partition_point(|(i, _)| *i <= img);
                start..end
            })
            .collect()
    }
}

/// Concatenates the boxes of a batch of records into one sparse batch.
pub fn encode_batch(records: &[LabelRecord]) -> SparseLabelBatch {
    let total: usize = records.iter().map(|r| r.boxes.len()).sum();
    let mut out = SparseLabelBatch {
        rois_idx: Vec::with_capacity(total),
        rois_values: Vec::with_capacity(total),
        classes: Vec::with_capacity(total),
        batch_size: records.len(),
    };
    for (img, rec) in records.iter().enumerate() {
        for (ord, lb) in rec.boxes.iter().enumerate() {
            out.rois_idx.push((img, ord));
            out.rois_values.push(lb.bbox());
            out.classes.push(lb.class_id);
        }
    }
    out
}

/// Splits a sparse batch back into per-image `(box, class)` lists.
pub fn decode_batch(batch: &SparseLabelBatch) -> Result<Vec<Vec<(BBox, u16)>>, LabelError> {
    batch.validate()?;
    let mut images = vec![Vec::new(); batch.batch_size];
    for ((&(img, ord), bbox), &class) in batch.rois_idx.iter().zip(&batch.rois_values).zip(&batch.classes) {
        if ord != images[img].len() {
            return Err(LabelError::CorruptBatch(format!("image {img}: ordinal {ord} out of sequence")));
        }
        images[img].push((*bbox, class));
    }
    Ok(images)
}

/// Streaming ODR1 writer.
pub struct RecordWriter<W: Write> {
    inner: W,
    buf: Vec<u8>,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(mut inner: W) -> Result<Self, LabelError> {
        inner.write_all(MAGIC)?;
        Ok(Self { inner, buf: Vec::new() })
    }

    pub fn write(&mut self, rec: &LabelRecord) -> Result<(), LabelError> {
        rec.validate()?;
        self.buf.clear();
        let payload_len = RECORD_HEADER_LEN + BOX_LEN * rec.boxes.len();
        self.buf.extend_from_slice(&(payload_len as u32).to_le_bytes());
        self.buf.extend_from_slice(&rec.image_id.to_le_bytes());
        self.buf.extend_from_slice(&rec.image_w.to_le_bytes());
        self.buf.extend_from_slice(&rec.image_h.to_le_bytes());
        self.buf.extend_from_slice(&(rec.boxes.len() as u16).to_le_bytes());
        for b in &rec.boxes {
            for v in [b.x, b.y, b.w, b.h] {
                self.buf.extend_from_slice(&v.to_le_bytes());
            }
            self.buf.extend_from_slice(&b.class_id.to_le_bytes());
        }
        self.inner.write_all(&self.buf)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, LabelError> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Streaming ODR1 reader; holds at most one record in memory.
pub struct RecordReader<R: Read> {
    inner: R,
    offset: u64,
    buf: Vec<u8>,
    done: bool,
}

impl<R: Read> RecordReader<R> {
    pub fn new(mut inner: R) -> Result<Self, LabelError> {
        let mut magic = [0u8; 4];
        let got = read_fully(&mut inner, &mut magic)?;
        if got < 4 || &magic != MAGIC {
            return Err(LabelError::BadMagic { found: magic[..got].to_vec() });
        }
        Ok(Self { inner, offset: 4, buf: Vec::new(), done: false })
    }

    fn next_record(&mut self) -> Result<Option<LabelRecord>, LabelError> {
        let start = self.offset;
        let mut len_bytes = [0u8; 4];
        match read_fully(&mut self.inner, &mut len_bytes)? {
            0 => return Ok(None),
            4 => {}
            n => return Err(LabelError::Corrupt { offset: start + n as u64, reason: format!("truncated length prefix ({n} of 4 bytes)") }),
        }
        let len = u32::from_le_bytes(len_bytes) as usize;
        if len < RECORD_HEADER_LEN {
            return Err(LabelError::Corrupt { offset: start, reason: format!("payload length {len} shorter than record header") });
        }
        self.buf.resize(len, 0);
        let got = read_fully(&mut self.inner, &mut self.buf)?;
        if got < len {
            return Err(LabelError::Corrupt {
                offset: start + 4 + got as u64,
                reason: format!("truncated payload ({got} of {len} bytes)"),
            });
        }
        let p = &self.buf;
        let u16_at = |i: usize| u16::from_le_bytes([p[i], p[i + 1]]);
        let f32_at = |i: usize| f32::from_le_bytes([p[i], p[i + 1], p[i + 2], p[i + 3]]);
        let image_id = u64::from_le_bytes(p[0..8].try_into().expect("8-byte slice"));
        let image_w = u16_at(8);
        let image_h = u16_at(10);
        let num_boxes = u16_at(12) as usize;
        if len != RECORD_HEADER_LEN + BOX_LEN * num_boxes {
            return Err(LabelError::Corrupt { offset: start, reason: format!("payload length {len} does not match {num_boxes} boxes") });
        }
        let boxes = (0..num_boxes)
            .map(|n| {
                let o = RECORD_HEADER_LEN + n * BOX_LEN;
                LabelBox { x: f32_at(o), y: f32_at(o + 4), w: f32_at(o + 8), h: f32_at(o + 12), class_id: u16_at(o + 16) }
            })
            .collect();
        self.offset = start + 4 + len as u64;
        Ok(Some(LabelRecord { image_id, image_w, image_h, boxes }))
    }
}

impl<R: Read> Iterator for RecordReader<R> {
    type Item = Result<LabelRecord, LabelError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let item = self.next_record().transpose();
        if !matches!(item, Some(Ok(_))) {
            self.done = true;
        }
        item
    }
}

fn read_fully<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

pub fn write_records<'a, I>(path: impl AsRef<Path>, records: I) -> Result<(), LabelError>
where
    I: IntoIterator<Item = &'a LabelRecord>,
{
    let mut w = RecordWriter::new(BufWriter::new(File::create(path)?))?;
    for rec in records {
        w.write(rec)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_records(path: impl AsRef<Path>) -> Result<RecordReader<BufReader<File>>, LabelError> {
    RecordReader::new(BufReader::new(File::open(path)?))
}

/// Parameters of the synthetic label generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_images: usize,
    pub max_boxes: usize,
    pub image_w: u16,
    pub image_h: u16,
    pub class_count: u16,
}

/// Deterministic stream of random label records.
///
/// Each image gets between 0 and `max_boxes` boxes (inclusive), each at least
/// 2x2 pixels with integer corners inside the image.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<impl Iterator<Item = LabelRecord>, LabelError> {
    if spec.image_w < 2 || spec.image_h < 2 {
        return Err(LabelError::InvalidSpec(format!("image {}x{} too small for a 2x2 box", spec.image_w, spec.image_h)));
    }
    if spec.n_images == 0 || spec.max_boxes == 0 || spec.max_boxes > u16::MAX as usize {
        return Err(LabelError::InvalidSpec("n_images and max_boxes must be in 1..=65535".into()));
    }
    if spec.class_count == 0 {
        return Err(LabelError::InvalidSpec("class_count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let spec = spec.clone();
    Ok((0..spec.n_images).map(move |n| {
        let count = rng.gen_range(0..=spec.max_boxes);
        let boxes = (0..count)
            .map(|_| {
                let (x0, x1) = random_span(&mut rng, spec.image_w);
                let (y0, y1) = random_span(&mut rng, spec.image_h);
                LabelBox {
                    x: (x0 + x1) as f32 / 2.0,
                    y: (y0 + y1) as f32 / 2.0,
                    w: (x1 - x0) as f32,
                    h: (y1 - y0) as f32,
                    class_id: rng.gen_range(0..spec.class_count),
                }
            })
            .collect();
        LabelRecord { image_id: n as u64, image_w: spec.image_w, image_h: spec.image_h, boxes }
    }))
}

fn random_span(rng: &mut ChaCha8Rng, extent: u16) -> (u32, u32) {
    let extent = extent as u32;
    let len = rng.gen_range(2..=extent);
    let start = rng.gen_range(0..=extent - len);
    (start, start + len)
}

/// Shifts every box by `(dx, dy)` pixels, clamping the shift so all boxes stay in the image.
pub fn apply_drift(rec: &LabelRecord, dx: i32, dy: i32) -> LabelRecord {
    let (dx, dy) = clamp_drift(rec, dx as f64, dy as f64);
    let mut out = rec.clone();
    for b in &mut out.boxes {
        b.x = (b.x as f64 + dx) as f32;
        b.y = (b.y as f64 + dy) as f32;
    }
    out
}

/// Mirrors every box about the vertical center line of the image.
pub fn flip_horizontal(rec: &LabelRecord) -> LabelRecord {
    let mut out = rec.clone();
    for b in &mut out.boxes {
        b.x = (rec.image_w as f64 - b.x as f64) as f32;
    }
    out
}

fn clamp_drift(rec: &LabelRecord, dx: f64, dy: f64) -> (f64, f64) {
    if rec.boxes.is_empty() {
        return (dx, dy);
    }
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY);
    for b in &rec.boxes {
        let (x, y, w, h) = (b.x as f64, b.y as f64, b.w as f64, b.h as f64);
        lo_x = lo_x.max(-(x - w / 2.0));
        hi_x = hi_x.min(rec.image_w as f64 - (x + w / 2.0));
        lo_y = lo_y.max(-(y - h / 2.0));
        hi_y = hi_y.min(rec.image_h as f64 - (y + h / 2.0));
    }
    // whole-pixel shifts only
    let clamp = |d: f64, lo: f64, hi: f64| {
        let (lo, hi) = (lo.ceil().min(0.0), hi.floor().max(0.0));
        d.clamp(lo, hi)
    };
    (clamp(dx, lo_x, hi_x), clamp(dy, lo_y, hi_y))
}

/// Seeded integer drift in `[-max_drift, max_drift]` on each axis, then an optional flip.
pub fn augment_jitter(rec: &LabelRecord, seed: u64, max_drift: u32, allow_flip: bool) -> LabelRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = max_drift as i64;
    let dx = rng.gen_range(-m..=m) as i32;
    let dy = rng.gen_range(-m..=m) as i32;
    let flip = allow_flip && rng.gen_bool(0.5);
    let drifted = apply_drift(rec, dx, dy);
    if flip {
        flip_horizontal(&drifted)
    } else {
        drifted
    }
}
