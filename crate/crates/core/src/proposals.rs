//! Candidate boxes: Gaussian sampling around a state, extraction of regions
//! from an attention map, and merging of local and global pools.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::bbox::BBox;
use crate::gpgnet::AttentionMap;
use crate::{Error, Result};

/// Smallest side length a sampled box may shrink to.
const MIN_SIDE: f64 = 2.0;

/// Connected set of above-threshold attention pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    /// `(x, y)` pixel coordinates in raster order.
    pub pixels: Vec<(usize, usize)>,
    /// Centroid of the pixel centres.
    pub center: (f64, f64),
}

impl Region {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    /// Tight box over the pixel squares.
    pub fn tight_box(&self) -> BBox {
        let x0 = self.pixels.iter().map(|p| p.0).min().unwrap_or(0);
        let x1 = self.pixels.iter().map(|p| p.0).max().unwrap_or(0) + 1;
        let y0 = self.pixels.iter().map(|p| p.1).min().unwrap_or(0);
        let y1 = self.pixels.iter().map(|p| p.1).max().unwrap_or(0) + 1;
        BBox::new(x0 as f64, y0 as f64, (x1 - x0) as f64, (y1 - y0) as f64)
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

/// 8-connected components of `mask` (row-major `height × width`), each in
/// raster order, listed by their first pixel.
pub fn connected_components(mask: &[bool], width: usize, height: usize) -> Vec<Vec<(usize, usize)>> {
    let mut labels = vec![usize::MAX; mask.len()];
    let mut parent: Vec<usize> = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !mask[i] {
                continue;
            }
            // Already-visited neighbours: W, NW, N, NE.
            let mut neighbours = [usize::MAX; 4];
            if x > 0 {
                neighbours[0] = labels[i - 1];
            }
            if y > 0 {
                let up = i - width;
                neighbours[2] = labels[up];
                if x > 0 {
                    neighbours[1] = labels[up - 1];
                }
                if x + 1 < width {
                    neighbours[3] = labels[up + 1];
                }
            }
            let mut label = usize::MAX;
            for &n in neighbours.iter().filter(|&&n| n != usize::MAX) {
                if label == usize::MAX {
                    label = n;
                } else {
                    union(&mut parent, label, n);
                }
            }
            if label == usize::MAX {
                label = parent.len();
                parent.push(label);
            }
            labels[i] = label;
        }
    }
    let mut slot = vec![usize::MAX; parent.len()];
    let mut components: Vec<Vec<(usize, usize)>> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if l == usize::MAX {
            continue;
        }
        let root = find(&mut parent, l);
        if slot[root] == usize::MAX {
            slot[root] = components.len();
            components.push(Vec::new());
        }
        components[slot[root]].push((i % width, i / width));
    }
    components
}

/// Regions of `attention > threshold` with at least `min_area` pixels.
pub fn threshold_regions(attention: &AttentionMap, threshold: f64, min_area: usize) -> Vec<Region> {
    let mask: Vec<bool> = attention.values.iter().map(|&v| v > threshold).collect();
    connected_components(&mask, attention.width, attention.height)
        .into_iter()
        .filter(|c| c.len() >= min_area.max(1))
        .map(|pixels| {
            let n = pixels.len() as f64;
            let cx = pixels.iter().map(|p| p.0 as f64 + 0.5).sum::<f64>() / n;
            let cy = pixels.iter().map(|p| p.1 as f64 + 0.5).sum::<f64>() / n;
            Region { pixels, center: (cx, cy) }
        })
        .collect()
}

/// Tight box per region, with any side shorter than the reference size
/// widened to it around the region centroid.
pub fn region_boxes(regions: &[Region], ref_w: f64, ref_h: f64) -> Vec<BBox> {
    regions
        .iter()
        .map(|r| {
            let tight = r.tight_box();
            let (x, w) = if tight.w < ref_w { (r.center.0 - ref_w / 2.0, ref_w) } else { (tight.x, tight.w) };
            let (y, h) = if tight.h < ref_h { (r.center.1 - ref_h / 2.0, ref_h) } else { (tight.y, tight.h) };
            BBox::new(x, y, w, h)
        })
        .collect()
}

/// Gaussian perturbation parameters: translation in units of the mean box side
/// and scale as an exponent of `base`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct GaussianSampler {
    pub sigma_xy: f64,
    pub sigma_scale: f64,
    pub base: f64,
}

impl Default for GaussianSampler {
    fn default() -> Self {
        Self { sigma_xy: 0.3, sigma_scale: 0.5, base: 1.05 }
    }
}

fn fit_to_frame(b: BBox, width: usize, height: usize) -> BBox {
    let w = b.w.clamp(MIN_SIDE, width as f64);
    let h = b.h.clamp(MIN_SIDE, height as f64);
    BBox::from_center(b.cx(), b.cy(), w, h).clamp_center(width, height)
}

/// `n` boxes around `center`: centre offsets `N(0, σ_xy · mean(w, h))` per axis,
/// size multiplied by `base^N(0, σ_s)`. Centres are kept inside the frame.
pub fn gaussian_sample<R: Rng + ?Sized>(
    center: &BBox,
    n: usize,
    sampler: &GaussianSampler,
    frame: (usize, usize),
    rng: &mut R,
) -> Vec<BBox> {
    let side = (center.w + center.h) / 2.0;
    (0..n)
        .map(|_| {
            let (dx, dy, ds): (f64, f64, f64) =
                (StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng));
            let s = sampler.base.powf(sampler.sigma_scale * ds);
            let b = BBox::from_center(
                center.cx() + sampler.sigma_xy * side * dx,
                center.cy() + sampler.sigma_xy * side * dy,
                center.w * s,
                center.h * s,
            );
            fit_to_frame(b, frame.0, frame.1)
        })
        .collect()
}

/// `n` boxes with centres uniform in `center ± range · mean(w, h)` and size
/// multiplied by `base^U(−scale_range, scale_range)`.
pub fn uniform_sample<R: Rng + ?Sized>(
    center: &BBox,
    n: usize,
    range: f64,
    scale_range: f64,
    frame: (usize, usize),
    rng: &mut R,
) -> Vec<BBox> {
    let side = (center.w + center.h) / 2.0;
    (0..n)
        .map(|_| {
            let dx = rng.random_range(-1.0..=1.0) * range * side;
            let dy = rng.random_range(-1.0..=1.0) * range * side;
            let s = 1.05f64.powf(rng.random_range(-1.0..=1.0) * scale_range);
            let b = BBox::from_center(center.cx() + dx, center.cy() + dy, center.w * s, center.h * s);
            fit_to_frame(b, frame.0, frame.1)
        })
        .collect()
}

/// Draws from `draw` until `n` boxes pass `accept` or the attempt budget runs out.
pub fn sample_filtered<R, D, A>(n: usize, rng: &mut R, mut draw: D, accept: A) -> Vec<BBox>
where
    R: Rng + ?Sized,
    D: FnMut(&mut R, usize) -> Vec<BBox>,
    A: Fn(&BBox) -> bool,
{
    let mut out = Vec::with_capacity(n);
    for _ in 0..20 {
        if out.len() >= n {
            break;
        }
        let want = (n - out.len()) * 2;
        out.extend(draw(rng, want).into_iter().filter(|b| accept(b)).take(n - out.len()));
    }
    out
}

/// Boxes with IoU ≥ `min_iou` against `gt`.
pub fn positive_samples<R: Rng + ?Sized>(gt: &BBox, n: usize, min_iou: f64, frame: (usize, usize), rng: &mut R) -> Vec<BBox> {
    let sampler = GaussianSampler { sigma_xy: 0.1, sigma_scale: 1.0, base: 1.05 };
    let mut out = sample_filtered(n, rng, |r, k| gaussian_sample(gt, k, &sampler, frame, r), |b| b.iou(gt) >= min_iou);
    if out.is_empty() {
        out.push(*gt);
    }
    let found = out.len();
    for i in 0..n.saturating_sub(found) {
        out.push(out[i % found]);
    }
    out
}

/// Boxes with IoU ≤ `max_iou` against `gt`, half from a wide neighbourhood and
/// half from anywhere in the frame.
pub fn negative_samples<R: Rng + ?Sized>(gt: &BBox, n: usize, max_iou: f64, frame: (usize, usize), rng: &mut R) -> Vec<BBox> {
    let near = n / 2;
    let mut out = sample_filtered(near, rng, |r, k| uniform_sample(gt, k, 1.0, 3.0, frame, r), |b| b.iou(gt) <= max_iou);
    let whole = BBox::new(0.0, 0.0, frame.0 as f64, frame.1 as f64);
    let rest = n - out.len();
    out.extend(sample_filtered(
        rest,
        rng,
        |r, k| {
            (0..k)
                .map(|_| {
                    let cx = r.random_range(0.0..whole.w);
                    let cy = r.random_range(0.0..whole.h);
                    let s = 1.05f64.powf(r.random_range(-3.0..=3.0));
                    fit_to_frame(BBox::from_center(cx, cy, gt.w * s, gt.h * s), frame.0, frame.1)
                })
                .collect()
        },
        |b| b.iou(gt) <= max_iou,
    ));
    out
}

/// Where a candidate came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Local,
    Global,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::Local => "local",
            Provenance::Global => "global",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub bbox: BBox,
    pub provenance: Provenance,
}

/// Global candidates first, then local ones, truncated to `capacity`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidatePool {
    pub candidates: Vec<Candidate>,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.candidates.iter().filter(|c| c.provenance == provenance).count()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.candidates.iter().map(|c| c.bbox).collect()
    }
}

pub fn merge_candidate_pools(local: &[BBox], global: &[BBox], capacity: usize) -> Result<CandidatePool> {
    if local.is_empty() && global.is_empty() {
        return Err(Error::InvalidArgument("no local or global candidates".into()));
    }
    let tag = |p| move |b: &BBox| Candidate { bbox: *b, provenance: p };
    let candidates = global
        .iter()
        .map(tag(Provenance::Global))
        .chain(local.iter().map(tag(Provenance::Local)))
        .take(capacity)
        .collect();
    Ok(CandidatePool { candidates })
}

/// Settings of the global proposal procedure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct GlobalProposalConfig {
    pub threshold: f64,
    pub min_area: usize,
    pub per_region: usize,
    pub max_global: usize,
    pub sampler: GaussianSampler,
}

impl Default for GlobalProposalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_area: 4,
            per_region: 8,
            max_global: 64,
            sampler: GaussianSampler::default(),
        }
    }
}

/// Regions, their covering boxes, then Gaussian samples around each box.
pub fn global_proposals<R: Rng + ?Sized>(
    attention: &AttentionMap,
    reference: &BBox,
    config: &GlobalProposalConfig,
    rng: &mut R,
) -> Vec<BBox> {
    let regions = threshold_regions(attention, config.threshold, config.min_area);
    let frame = (attention.width, attention.height);
    let mut out = Vec::new();
    for b in region_boxes(&regions, reference.w, reference.h) {
        if out.len() >= config.max_global {
            break;
        }
        let n = config.per_region.min(config.max_global - out.len());
        out.extend(gaussian_sample(&b, n, &config.sampler, frame, rng));
    }
    out
}

#[derive(Serialize)]
struct DebugLine<'a> {
    frame: usize,
    provenance: Provenance,
    bbox: &'a BBox,
    score: f64,
}

/// One JSON object per candidate: frame, provenance, bbox, score.
pub fn write_debug_jsonl<W: Write + ?Sized>(out: &mut W, frame: usize, pool: &CandidatePool, scores: &[f64]) -> Result<()> {
    for (c, &score) in pool.candidates.iter().zip(scores) {
        let line = DebugLine { frame, provenance: c.provenance, bbox: &c.bbox, score };
        serde_json::to_writer(&mut *out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
