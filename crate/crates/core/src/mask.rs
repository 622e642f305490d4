//! Point-matching mask propagation.
//!
//! The first frame's mask is carried across the video by cosine
//! point matching on inversion features: every grid point of frame i is
//! labeled by a k-NN vote over sampled anchor points from the previous
//! `n` frames plus the pinned first frame.
//!
//! Determinism contract: anchors are assembled oldest-previous-frame
//! first, then the first-frame set; within one frame's set, foreground
//! indices ascending then background indices ascending; k-NN ties break
//! on the anchor's position in that assembly. Fixed seed implies a
//! bitwise-identical mask sequence regardless of thread count.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::tensor::{cosine_from_parts, cosine_similarity};
use crate::video::{FeatureStack, MaskSequence};

/// Half-up rounding used by every sampling budget in this module.
fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Stratified down-sampling of a binary grid: a total budget of
/// `round(rate * len)` indices split between foreground and background in
/// proportion to their areas, each stratum sampled without replacement.
/// At least one foreground index is returned whenever the foreground is
/// nonempty. Returns foreground indices ascending, then background
/// indices ascending.
pub fn stratified_sample(mask: &[u8], rate: f64, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if mask.is_empty() {
        return Err(Error::arg("stratified sample of an empty grid"));
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::arg(format!("sampling rate {rate} outside (0, 1]")));
    }
    let fg: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] != 0).collect();
    let bg: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] == 0).collect();

    let budget = round_half_up(rate * mask.len() as f64);
    let mut n_fg = round_half_up(budget as f64 * fg.len() as f64 / mask.len() as f64).min(fg.len());
    if !fg.is_empty() && n_fg == 0 {
        n_fg = 1;
    }
    let n_bg = budget.saturating_sub(n_fg).min(bg.len());

    let mut pick = |pool: &[usize], amount: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        if amount == pool.len() {
            return pool.to_vec();
        }
        let mut chosen: Vec<usize> = rand::seq::index::sample(rng, pool.len(), amount)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        chosen.sort_unstable();
        chosen
    };

    let mut out = pick(&fg, n_fg, rng);
    out.extend(pick(&bg, n_bg, rng));
    Ok(out)
}

/// One frame's sampled anchors: flat feature rows, cached norms, labels.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    features: Vec<f64>,
    norms: Vec<f64>,
    labels: Vec<u8>,
    depth: usize,
}

impl AnchorSet {
    fn from_samples(features: &FeatureStack, frame: usize, mask: &[u8], indices: &[usize]) -> Self {
        let d = features.depth();
        let (h, w) = (features.height(), features.width());
        let mut flat = Vec::with_capacity(indices.len() * d);
        let mut norms = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &idx in indices {
            let (y, x) = (idx / w, idx % w);
            debug_assert!(y < h);
            let f = features.at(frame, y, x);
            norms.push(f.iter().map(|v| v * v).sum::<f64>().sqrt());
            flat.extend_from_slice(f);
            labels.push(mask[idx]);
        }
        AnchorSet {
            features: flat,
            norms,
            labels,
            depth: d,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Ring buffer of previous-frame anchor sets plus the pinned first frame.
#[derive(Debug)]
pub struct AnchorBuffer {
    capacity: usize,
    previous: std::collections::VecDeque<AnchorSet>,
    first: AnchorSet,
}

impl AnchorBuffer {
    pub fn new(first: AnchorSet, capacity: usize) -> Self {
        AnchorBuffer {
            capacity,
            previous: std::collections::VecDeque::new(),
            first,
        }
    }

    /// Push a frame's set, evicting the oldest when full. The first-frame
    /// set is pinned and never evicted.
    pub fn push(&mut self, set: AnchorSet) {
        if self.capacity == 0 {
            return;
        }
        if self.previous.len() == self.capacity {
            self.previous.pop_front();
        }
        self.previous.push_back(set);
    }

    /// Assembly order for votes: previous frames oldest first, then the
    /// pinned first-frame set.
    fn assembled(&self) -> Vec<&AnchorSet> {
        let mut sets: Vec<&AnchorSet> = self.previous.iter().collect();
        sets.push(&self.first);
        sets
    }

    pub fn anchor_count(&self) -> usize {
        self.previous.iter().map(AnchorSet::len).sum::<usize>() + self.first.len()
    }
}

/// Vote over the k most cosine-similar anchors; ties in similarity break
/// toward the earlier anchor. Foreground wins only with a strict
/// majority; an exact tie votes background.
fn knn_vote(query: &[f64], sets: &[&AnchorSet], k: usize) -> u8 {
    let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut scored: Vec<(f64, u32, u8)> = Vec::new();
    let mut offset = 0u32;
    for set in sets {
        let d = set.depth;
        for a in 0..set.len() {
            let row = &set.features[a * d..(a + 1) * d];
            let dot: f64 = query.iter().zip(row).map(|(x, y)| x * y).sum();
            let sim = cosine_from_parts(dot, qn, set.norms[a]);
            scored.push((sim, offset + a as u32, set.labels[a]));
        }
        offset += set.len() as u32;
    }
    if scored.is_empty() {
        return 0;
    }
    let k_eff = k.min(scored.len());
    let by_rank = |a: &(f64, u32, u8), b: &(f64, u32, u8)| {
        b.0.partial_cmp(&a.0)
            .expect("similarities are never NaN")
            .then(a.1.cmp(&b.1))
    };
    scored.select_nth_unstable_by(k_eff - 1, by_rank);
    let fg_votes = scored[..k_eff].iter().filter(|s| s.2 != 0).count();
    u8::from(2 * fg_votes > k_eff)
}

/// Label a single query vector against explicit anchors. `k` is clamped
/// to the anchor count.
pub fn knn_label(query: &[f64], anchors: &[(Vec<f64>, u8)], k: usize) -> Result<u8> {
    if anchors.is_empty() {
        return Err(Error::arg("knn_label with no anchors"));
    }
    if k == 0 {
        return Err(Error::arg("k must be at least 1"));
    }
    let d = query.len();
    let mut flat = Vec::with_capacity(anchors.len() * d);
    let mut norms = Vec::with_capacity(anchors.len());
    let mut labels = Vec::with_capacity(anchors.len());
    for (f, l) in anchors {
        if f.len() != d {
            return Err(Error::shape(format!(
                "anchor depth {} does not match query depth {}",
                f.len(),
                d
            )));
        }
        norms.push(f.iter().map(|v| v * v).sum::<f64>().sqrt());
        flat.extend_from_slice(f);
        labels.push(*l);
    }
    let set = AnchorSet {
        features: flat,
        norms,
        labels,
        depth: d,
    };
    Ok(knn_vote(query, &[&set], k))
}

/// Propagation parameters.
#[derive(Debug, Clone, Copy)]
pub struct PropagateConfig {
    pub rate: f64,
    pub k: usize,
    pub n: usize,
    pub seed: u64,
}

/// Carry `first_mask` across all frames of `features`.
pub fn propagate(
    features: &FeatureStack,
    first_mask: &[u8],
    cfg: &PropagateConfig,
) -> Result<MaskSequence> {
    let (frames, h, w) = (features.frames(), features.height(), features.width());
    if first_mask.len() != h * w {
        return Err(Error::shape(format!(
            "first-frame mask has {} cells, feature grid is {}x{}",
            first_mask.len(),
            h,
            w
        )));
    }
    if cfg.k == 0 {
        return Err(Error::arg("k must be at least 1"));
    }
    if frames == 0 {
        return Err(Error::arg("feature stack has no frames"));
    }

    let mut masks = MaskSequence::zeros(frames, h, w);
    masks.set_frame(0, first_mask);

    let sample_frame = |frame: usize, mask: &[u8]| -> Result<AnchorSet> {
        let mut rng: ChaCha8Rng = substream(cfg.seed, Stream::MaskSampling { frame: frame as u64 });
        let indices = stratified_sample(mask, cfg.rate, &mut rng)?;
        Ok(AnchorSet::from_samples(features, frame, mask, &indices))
    };

    let first_set = sample_frame(0, first_mask)?;
    let mut buffer = AnchorBuffer::new(first_set, cfg.n);

    for i in 1..frames {
        let sets = buffer.assembled();
        let labels: Vec<u8> = (0..h * w)
            .into_par_iter()
            .map(|idx| {
                let (y, x) = (idx / w, idx % w);
                knn_vote(features.at(i, y, x), &sets, cfg.k)
            })
            .collect();
        drop(sets);
        masks.set_frame(i, &labels);
        let set = sample_frame(i, &labels)?;
        buffer.push(set);
    }
    Ok(masks)
}

/// Nearest-neighbor resample of every frame to `(height, width)`. Output
/// stays binary; resampling to the same size is the identity.
pub fn upsample_mask(masks: &MaskSequence, height: usize, width: usize) -> MaskSequence {
    let (h, w) = (masks.height(), masks.width());
    if (h, w) == (height, width) {
        return masks.clone();
    }
    let mut out = MaskSequence::zeros(masks.frames(), height, width);
    for f in 0..masks.frames() {
        for y in 0..height {
            let sy = y * h / height;
            for x in 0..width {
                let sx = x * w / width;
                out.set(f, y, x, masks.get(f, sy, sx));
            }
        }
    }
    out
}

/// Mean IoU and Dice over frames. A frame where both masks are empty
/// scores 1 on both metrics.
pub fn iou_dice(pred: &MaskSequence, gt: &MaskSequence) -> Result<(f64, f64)> {
    if pred.frames() != gt.frames() || pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::shape(format!(
            "mask sequences {}x{}x{} vs {}x{}x{}",
            pred.frames(),
            pred.height(),
            pred.width(),
            gt.frames(),
            gt.height(),
            gt.width()
        )));
    }
    let mut iou_sum = 0.0;
    let mut dice_sum = 0.0;
    for f in 0..pred.frames() {
        let (p, g) = (pred.frame(f), gt.frame(f));
        let mut inter = 0usize;
        let mut p_area = 0usize;
        let mut g_area = 0usize;
        for (a, b) in p.iter().zip(g) {
            p_area += usize::from(*a != 0);
            g_area += usize::from(*b != 0);
            inter += usize::from(*a != 0 && *b != 0);
        }
        let union = p_area + g_area - inter;
        if union == 0 {
            iou_sum += 1.0;
            dice_sum += 1.0;
        } else {
            iou_sum += inter as f64 / union as f64;
            dice_sum += 2.0 * inter as f64 / (p_area + g_area) as f64;
        }
    }
    let n = pred.frames() as f64;
    Ok((iou_sum / n, dice_sum / n))
}

/// Convenience: cosine similarity between two feature-grid points.
pub fn point_similarity(
    features: &FeatureStack,
    a: (usize, usize, usize),
    b: (usize, usize, usize),
) -> f64 {
    cosine_similarity(features.at(a.0, a.1, a.2), features.at(b.0, b.1, b.2))
}
