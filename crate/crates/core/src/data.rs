//! Synthetic volumes, the `EAAV` file format, and triplet batching.
//!
//! Each volume holds one drifting ellipse. Its centre, semi-axes and
//! orientation take a small random step from slice to slice, so adjacent
//! labels overlap heavily and differ only near the boundary.

use std::fs;
use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: &[u8] = b"EAAV\x01";
/// Classes in the one-hot labels: background and foreground.
pub const NUM_CLASSES: usize = 2;

pub const FOREGROUND_LEVEL: f64 = 0.7;
pub const BACKGROUND_LEVEL: f64 = 0.3;
pub const NOISE_SIGMA: f64 = 0.05;
/// Largest per-slice change of centre and semi-axes, as a fraction of the
/// smaller image extent.
pub const MAX_DRIFT: f64 = 0.04;
/// Largest per-slice nudge of the orientation vector before renormalising.
const MAX_TURN: f64 = 0.12;
const AXIS_RANGE: (f64, f64) = (0.16, 0.30);
/// Adjacent labels must overlap by more than this.
pub const MIN_ADJACENT_IOU: f64 = 0.6;
const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// `depth × height × width` intensities in `[0, 1]`.
    pub slices: Vec<f32>,
    /// `depth × height × width` binary labels.
    pub labels: Vec<u8>,
    pub seed: u64,
}

impl Volume {
    pub fn new(depth: usize, height: usize, width: usize, slices: Vec<f32>, labels: Vec<u8>, seed: u64) -> Result<Self> {
        let n = depth * height * width;
        if slices.len() != n || labels.len() != n {
            return Err(Error::Shape(format!(
                "volume {depth}x{height}x{width} needs {n} values, got {} images and {} labels",
                slices.len(),
                labels.len()
            )));
        }
        if let Some(v) = labels.iter().find(|&&v| v > 1) {
            return Err(Error::Validation(format!("label value {v} is not binary")));
        }
        if let Some(v) = slices.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            depth,
            height,
            width,
            slices,
            labels,
            seed,
        })
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn slice(&self, i: usize) -> &[f32] {
        &self.slices[i * self.plane()..(i + 1) * self.plane()]
    }

    pub fn label(&self, i: usize) -> &[u8] {
        &self.labels[i * self.plane()..(i + 1) * self.plane()]
    }

    pub fn label_mask(&self, i: usize) -> BinaryMask {
        BinaryMask::new(&[self.height, self.width], self.label(i).to_vec()).unwrap()
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    /// Unit orientation vector of the `a` axis.
    ux: f64,
    uy: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.ux + dy * self.uy) / self.a;
        let v = (-dx * self.uy + dy * self.ux) / self.b;
        u * u + v * v <= 1.0
    }

    fn rasterize(&self, h: usize, w: usize) -> Vec<u8> {
        let mut m = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                m.push(u8::from(self.contains(x as f64 + 0.5, y as f64 + 0.5)));
            }
        }
        m
    }
}

fn unit(x: f64, y: f64) -> (f64, f64) {
    let n = (x * x + y * y).sqrt();
    (x / n, y / n)
}

struct Walk {
    h: f64,
    w: f64,
    ext: f64,
}

impl Walk {
    fn clamp(&self, mut e: Ellipse) -> Ellipse {
        let (lo, hi) = (AXIS_RANGE.0 * self.ext, AXIS_RANGE.1 * self.ext);
        e.a = e.a.clamp(lo, hi);
        e.b = e.b.clamp(lo, hi);
        // keep the bounding circle a pixel inside the image
        let r = e.a.max(e.b) + 1.0;
        e.cx = e.cx.clamp(r, self.w - r);
        e.cy = e.cy.clamp(r, self.h - r);
        e
    }

    fn initial(&self, rng: &mut SplitMix64) -> Ellipse {
        let (lo, hi) = AXIS_RANGE;
        let (ux, uy) = loop {
            let (x, y) = (rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0));
            if x * x + y * y > 0.01 {
                break unit(x, y);
            }
        };
        self.clamp(Ellipse {
            cx: self.w * rng.uniform_range(0.4, 0.6),
            cy: self.h * rng.uniform_range(0.4, 0.6),
            a: self.ext * rng.uniform_range(lo, hi),
            b: self.ext * rng.uniform_range(lo, hi),
            ux,
            uy,
        })
    }

    fn step(&self, e: &Ellipse, rng: &mut SplitMix64) -> Ellipse {
        let d = MAX_DRIFT * self.ext;
        let mut jitter = || rng.uniform_range(-d, d);
        let (cx, cy, a, b) = (e.cx + jitter(), e.cy + jitter(), e.a + jitter(), e.b + jitter());
        let (ux, uy) = unit(
            e.ux + rng.uniform_range(-MAX_TURN, MAX_TURN),
            e.uy + rng.uniform_range(-MAX_TURN, MAX_TURN),
        );
        self.clamp(Ellipse { cx, cy, a, b, ux, uy })
    }
}

fn iou(a: &[u8], b: &[u8]) -> f64 {
    let inter = a.iter().zip(b).filter(|(&x, &y)| x == 1 && y == 1).count();
    let union = a.iter().zip(b).filter(|(&x, &y)| x == 1 || y == 1).count();
    inter as f64 / union as f64
}

/// Deterministic synthetic volume with `depth` slices of `height × width`.
pub fn gen_synthetic_volume(seed: u64, depth: usize, height: usize, width: usize) -> Result<Volume> {
    if depth < 3 {
        return Err(Error::Config(format!("need at least 3 slices, got {depth}")));
    }
    if height < 16 || width < 16 {
        return Err(Error::Config(format!("slices must be at least 16x16, got {height}x{width}")));
    }
    let mut rng = SplitMix64::new(seed);
    let mut shape_rng = rng.split();
    let mut noise_rng = rng.split();
    let walk = Walk {
        h: height as f64,
        w: width as f64,
        ext: height.min(width) as f64,
    };

    let mut ellipse = walk.initial(&mut shape_rng);
    let mut labels = ellipse.rasterize(height, width);
    let mut prev = labels.clone();
    for _ in 1..depth {
        let mut accepted = None;
        for _ in 0..MAX_REDRAWS {
            let cand = walk.step(&ellipse, &mut shape_rng);
            let mask = cand.rasterize(height, width);
            let o = iou(&prev, &mask);
            if o > MIN_ADJACENT_IOU && o < 1.0 {
                accepted = Some((cand, mask));
                break;
            }
        }
        let (cand, mask) =
            accepted.ok_or_else(|| Error::Config(format!("could not draw a valid next slice for seed {seed}")))?;
        ellipse = cand;
        labels.extend_from_slice(&mask);
        prev = mask;
    }

    let plane = height * width;
    let mut slices = Vec::with_capacity(depth * plane);
    let mut raw = vec![0.0f64; plane];
    for s in 0..depth {
        for (i, v) in raw.iter_mut().enumerate() {
            let level = if labels[s * plane + i] == 1 {
                FOREGROUND_LEVEL
            } else {
                BACKGROUND_LEVEL
            };
            *v = level + NOISE_SIGMA * noise_rng.normal();
        }
        slices.extend(box_blur(&raw, height, width).into_iter().map(|v| v.clamp(0.0, 1.0) as f32));
    }
    Volume::new(depth, height, width, slices, labels, seed)
}

/// 3×3 mean over the in-bounds neighbourhood.
fn box_blur(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let (mut sum, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xi in xx.saturating_sub(1)..(xx + 2).min(w) {
                    sum += x[yy * w + xi];
                    n += 1.0;
                }
            }
            out[y * w + xx] = sum / n;
        }
    }
    out
}

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.len_u32(v.depth)?;
    w.len_u32(v.height)?;
    w.len_u32(v.width)?;
    w.f32s(&v.slices);
    w.bytes(&v.labels);
    Ok(w.finish(VOLUME_MAGIC))
}

/// Parses an `EAAV` image. The seed is not stored and comes back as 0.
pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let mut r = Reader::open(bytes, VOLUME_MAGIC)?;
    let d = r.u32("depth")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let n = d
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| Error::Validation(format!("volume {d}x{h}x{w} is too large")))?;
    let slices = r.f32s(n, "image payload")?;
    let labels = r.take(n, "label payload")?.to_vec();
    r.finish()?;
    Volume::new(d, h, w, slices, labels, 0)
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    fs::write(path, encode_volume(v)?)?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    decode_volume(&fs::read(path)?)
}

/// Volumes stored as `*.eaav` in `dir`, in file-name order.
pub fn load_dir(dir: &Path) -> Result<Vec<Volume>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "eaav"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Validation(format!("no .eaav volumes in {}", dir.display())));
    }
    paths.iter().map(|p| load_volume(p)).collect()
}

/// Target slice with both neighbours and a one-hot label.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceTriplet {
    pub height: usize,
    pub width: usize,
    pub x_prev: Vec<f32>,
    pub x_curr: Vec<f32>,
    pub x_next: Vec<f32>,
    /// `NUM_CLASSES × height × width`, background plane first.
    pub label: Vec<u8>,
    pub volume_id: usize,
    pub index: usize,
}

/// One triplet per interior slice `1..=depth-2`.
pub fn make_triplets(v: &Volume, volume_id: usize) -> Result<Vec<SliceTriplet>> {
    if v.depth < 3 {
        return Err(Error::Config(format!("need at least 3 slices, got {}", v.depth)));
    }
    Ok((1..v.depth - 1)
        .map(|i| {
            let fg = v.label(i);
            let mut label: Vec<u8> = fg.iter().map(|&x| 1 - x).collect();
            label.extend_from_slice(fg);
            SliceTriplet {
                height: v.height,
                width: v.width,
                x_prev: v.slice(i - 1).to_vec(),
                x_curr: v.slice(i).to_vec(),
                x_next: v.slice(i + 1).to_vec(),
                label,
                volume_id,
                index: i,
            }
        })
        .collect())
}

/// Triplets of all volumes, tagged with their position in `volumes`.
pub fn triplets_of(volumes: &[Volume]) -> Result<Vec<SliceTriplet>> {
    let mut out = Vec::new();
    for (id, v) in volumes.iter().enumerate() {
        out.extend(make_triplets(v, id)?);
    }
    Ok(out)
}

/// Index batches for one epoch: a shuffle seeded with `seed + epoch`, cut
/// into chunks of `batch_size` with a final partial batch.
pub fn batch_iter(n_triplets: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if n_triplets == 0 {
        return Err(Error::Validation("no triplets to batch".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n_triplets).collect();
    SplitMix64::new(seed.wrapping_add(epoch as u64)).shuffle(&mut order);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Network inputs for a batch: `[N,1,H,W]` images and a `[N,K,H,W]` label.
#[derive(Debug, Clone)]
pub struct Batch {
    pub prev: Tensor,
    pub curr: Tensor,
    pub next: Tensor,
    pub label: Tensor,
}

pub fn collate(triplets: &[&SliceTriplet]) -> Result<Batch> {
    let first = triplets.first().ok_or_else(|| Error::Validation("empty batch".into()))?;
    let (h, w, n) = (first.height, first.width, triplets.len());
    if triplets.iter().any(|t| t.height != h || t.width != w) {
        return Err(Error::Shape("triplets in a batch must share a slice size".into()));
    }
    let stack = |pick: fn(&SliceTriplet) -> &[f32]| -> Result<Tensor> {
        let d: Vec<f64> = triplets.iter().flat_map(|t| pick(t).iter().map(|&v| f64::from(v))).collect();
        Tensor::new(&[n, 1, h, w], d)
    };
    let label: Vec<f64> = triplets.iter().flat_map(|t| t.label.iter().map(|&v| f64::from(v))).collect();
    Ok(Batch {
        prev: stack(|t| &t.x_prev)?,
        curr: stack(|t| &t.x_curr)?,
        next: stack(|t| &t.x_next)?,
        label: Tensor::new(&[n, NUM_CLASSES, h, w], label)?,
    })
}
