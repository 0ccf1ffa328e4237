//! Occlusion-based saliency maps and their evaluation against annotator
//! boxes.
//!
//! A sliding occluder is placed on a regular lattice at several scales. The
//! drop in a unit's activation when a region is hidden is that unit's
//! response to the region. Per-unit response grids are blurred with a
//! scale-proportional Gaussian, averaged across scales, sign-corrected,
//! and min-max normalized. A word's map is the divergence-weighted mean of
//! its top ranked units' maps. Evaluation upsamples the lattice map to
//! pixels and scores it against a mask voted by multiple annotators.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{Rect, RgbImage};

/// Anything that can turn an image into a fixed-length activation vector.
pub trait ActivationProvider: Sync {
    fn input_side(&self) -> usize;
    fn unit_count(&self) -> usize;
    fn forward(&self, image: &RgbImage) -> Result<Vec<f32>>;
}

/// A dense row-major 2D float grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Grid {
    pub fn zeros(width: usize, height: usize) -> Grid {
        Grid {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Grid> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                what: "grid payload",
                expected: width * height,
                actual: data.len(),
            });
        }
        Ok(Grid {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

/// What to paint into the occluded window.
#[derive(Debug, Clone)]
pub enum OccluderFill {
    /// Per-pixel values from a reference image (usually the corpus mean).
    Mean(RgbImage),
    Solid([u8; 3]),
}

/// How a lattice cell maps to an occluder window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OccluderAnchor {
    /// Window centered on the cell center `g*stride + stride/2`.
    #[default]
    Center,
    /// Window's top-left corner at `g*stride`.
    TopLeft,
}

/// Occlusion lattice parameters.
#[derive(Debug, Clone)]
pub struct OcclusionConfig {
    /// Occluder side lengths, one response grid per entry.
    pub sizes: Vec<usize>,
    /// Lattice pitch in pixels. Must divide the input side.
    pub stride: usize,
    pub anchor: OccluderAnchor,
}

impl OcclusionConfig {
    pub fn new(sizes: Vec<usize>, stride: usize) -> OcclusionConfig {
        OcclusionConfig {
            sizes,
            stride,
            anchor: OccluderAnchor::Center,
        }
    }

    fn validate(&self, input_side: usize) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("occluder stride must be positive".into()));
        }
        if !input_side.is_multiple_of(self.stride) {
            return Err(Error::Config(format!(
                "stride {} does not divide the input side {input_side}",
                self.stride
            )));
        }
        if self.sizes.is_empty() {
            return Err(Error::EmptyInput {
                what: "occluder sizes",
            });
        }
        for &size in &self.sizes {
            if size < self.stride {
                return Err(Error::Config(format!(
                    "occluder size {size} below the stride {} leaves unprobed pixels",
                    self.stride
                )));
            }
            if size > input_side {
                return Err(Error::Config(format!(
                    "occluder size {size} exceeds the input side {input_side}",
                    size = size
                )));
            }
        }
        Ok(())
    }
}

/// The occluder window for lattice cell `(gx, gy)`, clipped to the canvas.
pub fn occluder_window(
    gx: usize,
    gy: usize,
    size: usize,
    stride: usize,
    anchor: OccluderAnchor,
    input_side: usize,
) -> Rect {
    let (x0, y0) = match anchor {
        OccluderAnchor::TopLeft => ((gx * stride) as i64, (gy * stride) as i64),
        OccluderAnchor::Center => {
            let cx = (gx * stride + stride / 2) as i64;
            let cy = (gy * stride + stride / 2) as i64;
            (cx - (size / 2) as i64, cy - (size / 2) as i64)
        }
    };
    let side = input_side as i64;
    let size = size as i64;
    let cx0 = x0.clamp(0, side);
    let cy0 = y0.clamp(0, side);
    let cx1 = (x0 + size).clamp(0, side);
    let cy1 = (y0 + size).clamp(0, side);
    Rect::new(cx0 as usize, cy0 as usize, cx1 as usize, cy1 as usize)
}

fn paint_occluder(image: &mut RgbImage, window: &Rect, fill: &OccluderFill) -> Result<()> {
    match fill {
        OccluderFill::Mean(reference) => image.fill_rect_from(window, reference),
        OccluderFill::Solid(rgb) => {
            image.fill_rect_solid(window, *rgb);
            Ok(())
        }
    }
}

/// Raw activation drops for one image: `per_scale[s][unit]` holds the grid
/// of `base - occluded` values for occluder size `sizes[s]`.
#[derive(Debug, Clone)]
pub struct OcclusionResponses {
    pub image_id: String,
    pub sizes: Vec<usize>,
    pub stride: usize,
    pub grid_side: usize,
    pub base: Vec<f32>,
    pub per_scale: Vec<Vec<Grid>>,
}

/// Slides the occluder over the lattice at every scale and records each
/// unit's activation drop per cell.
pub fn occlusion_responses(
    provider: &dyn ActivationProvider,
    image_id: &str,
    image: &RgbImage,
    fill: &OccluderFill,
    config: &OcclusionConfig,
) -> Result<OcclusionResponses> {
    let side = provider.input_side();
    config.validate(side)?;
    if image.side() != side {
        return Err(Error::DimensionMismatch {
            what: "saliency input side",
            expected: side,
            actual: image.side(),
        });
    }
    if let OccluderFill::Mean(reference) = fill {
        if reference.side() != side {
            return Err(Error::DimensionMismatch {
                what: "occluder fill image side",
                expected: side,
                actual: reference.side(),
            });
        }
    }
    let units = provider.unit_count();
    let base = provider.forward(image)?;
    if base.len() != units {
        return Err(Error::DimensionMismatch {
            what: "activation vector",
            expected: units,
            actual: base.len(),
        });
    }
    let grid_side = side / config.stride;

    let mut per_scale = Vec::with_capacity(config.sizes.len());
    for &size in &config.sizes {
        let drops: Vec<Vec<f32>> = (0..grid_side * grid_side)
            .into_par_iter()
            .map(|cell| {
                let (gx, gy) = (cell % grid_side, cell / grid_side);
                let window = occluder_window(gx, gy, size, config.stride, config.anchor, side);
                let mut occluded = image.clone();
                paint_occluder(&mut occluded, &window, fill)?;
                let out = provider.forward(&occluded)?;
                if out.len() != units {
                    return Err(Error::DimensionMismatch {
                        what: "activation vector",
                        expected: units,
                        actual: out.len(),
                    });
                }
                Ok(base.iter().zip(&out).map(|(b, o)| b - o).collect())
            })
            .collect::<Result<_>>()?;
        let mut grids = vec![Grid::zeros(grid_side, grid_side); units];
        for (cell, drop) in drops.iter().enumerate() {
            for (unit, &value) in drop.iter().enumerate() {
                grids[unit].data[cell] = value;
            }
        }
        per_scale.push(grids);
    }

    Ok(OcclusionResponses {
        image_id: image_id.to_string(),
        sizes: config.sizes.clone(),
        stride: config.stride,
        grid_side,
        base,
        per_scale,
    })
}

/// Normalized Gaussian taps for radius `ceil(3*sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let denom = 2.0 * sigma * sigma;
    let mut taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / denom).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= total;
    }
    taps
}

/// Separable Gaussian blur. Taps falling off the grid are dropped and the
/// remaining weights renormalized, so a constant grid stays constant.
pub fn smooth_grid(grid: &Grid, sigma: f64) -> Grid {
    let taps = gaussian_kernel(sigma);
    let radius = taps.len() / 2;
    let (w, h) = (grid.width, grid.height);

    let pass = |src: &[f32], len: usize, lines: usize, stride_line: usize, stride_elem: usize| {
        let mut dst = vec![0.0f32; src.len()];
        for line in 0..lines {
            for i in 0..len {
                let mut acc = 0.0f64;
                let mut weight = 0.0f64;
                for (t, &tap) in taps.iter().enumerate() {
                    let j = i as i64 + t as i64 - radius as i64;
                    if j < 0 || j >= len as i64 {
                        continue;
                    }
                    acc += tap * f64::from(src[line * stride_line + j as usize * stride_elem]);
                    weight += tap;
                }
                dst[line * stride_line + i * stride_elem] = (acc / weight) as f32;
            }
        }
        dst
    };

    let horizontal = pass(&grid.data, w, h, w, 1);
    let vertical = pass(&horizontal, h, w, 1, w);
    Grid {
        width: w,
        height: h,
        data: vertical,
    }
}

/// Per-unit: blur each scale's response grid with `sigma = size / (4 *
/// stride)` and average the scales pointwise.
pub fn fuse_scales(responses: &OcclusionResponses) -> Result<Vec<Grid>> {
    if responses.per_scale.is_empty() {
        return Err(Error::EmptyInput {
            what: "occlusion scales",
        });
    }
    let units = responses.per_scale[0].len();
    let sigmas: Vec<f64> = responses
        .sizes
        .iter()
        .map(|&size| size as f64 / (4.0 * responses.stride as f64))
        .collect();
    (0..units)
        .into_par_iter()
        .map(|unit| {
            let mut fused = vec![0.0f64; responses.grid_side * responses.grid_side];
            for (scale, grids) in responses.per_scale.iter().enumerate() {
                let smoothed = smooth_grid(&grids[unit], sigmas[scale]);
                for (f, &v) in fused.iter_mut().zip(&smoothed.data) {
                    *f += f64::from(v);
                }
            }
            let n = responses.per_scale.len() as f64;
            Grid::from_data(
                responses.grid_side,
                responses.grid_side,
                fused.iter().map(|&v| (v / n) as f32).collect(),
            )
        })
        .collect()
}

/// Sign-corrects and min-max normalizes a response grid to `[0, 1]`.
///
/// Occlusion drops are positive where a unit loses activation, but a unit
/// can respond to a region by rising instead; when the mass sits below the
/// mean (`max - mean < mean - min`) the grid is negated first. A constant
/// grid maps to all zeros.
pub fn normalize_response(grid: &Grid) -> Grid {
    let (lo, hi) = grid.min_max();
    let mean = grid.data.iter().map(|&v| f64::from(v)).sum::<f64>() / grid.data.len() as f64;
    let negate = f64::from(hi) - mean < mean - f64::from(lo);
    let (lo, hi) = if negate { (-hi, -lo) } else { (lo, hi) };
    let span = hi - lo;
    let data = grid
        .data
        .iter()
        .map(|&v| {
            if span <= 0.0 {
                0.0
            } else {
                let v = if negate { -v } else { v };
                ((v - lo) / span).clamp(0.0, 1.0)
            }
        })
        .collect();
    Grid {
        width: grid.width,
        height: grid.height,
        data,
    }
}

/// Fused, normalized response maps for every unit of one image.
pub fn unit_response_maps(responses: &OcclusionResponses) -> Result<Vec<Grid>> {
    Ok(fuse_scales(responses)?
        .iter()
        .map(normalize_response)
        .collect())
}

/// A word's saliency map on the lattice.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub word: String,
    pub image_id: String,
    /// Number of unit maps actually accumulated.
    pub k: usize,
    /// Sum of the divergence scores used as weights.
    pub normalizer: f64,
    pub grid: Grid,
}

/// Weighted-average accumulation over the top `k` ranked unit maps:
/// `M = sum_i s_i * R_i / sum_i s_i`. `maps` and `scores` must already be
/// ranked by score, non-increasing.
pub fn accumulate(
    word: &str,
    image_id: &str,
    maps: &[&Grid],
    scores: &[f64],
    k: usize,
) -> Result<SaliencyMap> {
    if maps.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            what: "ranked unit maps",
            expected: scores.len(),
            actual: maps.len(),
        });
    }
    if maps.is_empty() {
        return Err(Error::EmptyInput {
            what: "ranked unit maps",
        });
    }
    if k == 0 {
        return Err(Error::InvalidInput(
            "accumulation depth k must be positive".into(),
        ));
    }
    for pair in scores.windows(2) {
        // partial_cmp keeps NaN on the failure path: an incomparable score
        // is not a valid ranking either.
        let ordered = matches!(
            pair[1].partial_cmp(&pair[0]),
            Some(std::cmp::Ordering::Less | std::cmp::Ordering::Equal)
        );
        if !ordered {
            return Err(Error::InvalidInput(format!(
                "unit scores must be ranked non-increasing, got {} after {}",
                pair[1], pair[0]
            )));
        }
    }
    if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::NonFinite {
            context: "unit divergence weights".into(),
        });
    }
    let k = k.min(maps.len());
    let (w, h) = (maps[0].width, maps[0].height);
    let normalizer: f64 = scores[..k].iter().sum();
    if normalizer <= 0.0 {
        return Err(Error::ZeroNormalizer);
    }
    // Normalize the weights before accumulating: `s / Z` is exactly 1 for a
    // single map, so a depth-1 accumulation returns the top map bit for bit.
    let mut acc = vec![0.0f64; w * h];
    for (map, &score) in maps[..k].iter().zip(&scores[..k]) {
        if map.width != w || map.height != h {
            return Err(Error::DimensionMismatch {
                what: "unit map cells",
                expected: w * h,
                actual: map.width * map.height,
            });
        }
        let weight = score / normalizer;
        for (a, &v) in acc.iter_mut().zip(&map.data) {
            *a += weight * f64::from(v);
        }
    }
    Ok(SaliencyMap {
        word: word.to_string(),
        image_id: image_id.to_string(),
        k,
        normalizer,
        grid: Grid {
            width: w,
            height: h,
            data: acc.iter().map(|&v| v as f32).collect(),
        },
    })
}

/// Upsamples a lattice grid to pixel resolution by bilinear interpolation.
/// Pixel `p` samples lattice coordinate `(p + 0.5) / stride - 0.5`, clamped
/// at the borders.
pub fn bilinear_upsample(grid: &Grid, stride: usize) -> Grid {
    let out_w = grid.width * stride;
    let out_h = grid.height * stride;
    let sample_coord = |p: usize, len: usize| -> (usize, usize, f64) {
        let u = ((p as f64 + 0.5) / stride as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, u - i0 as f64)
    };
    let mut data = Vec::with_capacity(out_w * out_h);
    for py in 0..out_h {
        let (y0, y1, fy) = sample_coord(py, grid.height);
        for px in 0..out_w {
            let (x0, x1, fx) = sample_coord(px, grid.width);
            let top = f64::from(grid.at(x0, y0)) * (1.0 - fx) + f64::from(grid.at(x1, y0)) * fx;
            let bottom = f64::from(grid.at(x0, y1)) * (1.0 - fx) + f64::from(grid.at(x1, y1)) * fx;
            data.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    Grid {
        width: out_w,
        height: out_h,
        data,
    }
}

/// One annotator's box for a word on an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationBox {
    pub image_id: String,
    pub word: String,
    pub annotator: String,
    pub rect: Rect,
}

/// Loads annotator boxes from CSV rows
/// `image_id,word,annotator,x0,y0,x1,y1`. A leading header row and `#`
/// comments are skipped.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut boxes = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if idx == 0 && line.eq_ignore_ascii_case("image_id,word,annotator,x0,y0,x1,y1") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::TableParse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("expected 7 fields, got {}", fields.len()),
            });
        }
        let coord = |field: &str| -> Result<usize> {
            field.trim().parse().map_err(|_| Error::TableParse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("bad coordinate {field:?}"),
            })
        };
        let rect = Rect::new(
            coord(fields[3])?,
            coord(fields[4])?,
            coord(fields[5])?,
            coord(fields[6])?,
        );
        if rect.x1 <= rect.x0 || rect.y1 <= rect.y0 {
            return Err(Error::TableParse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: "empty box".into(),
            });
        }
        boxes.push(AnnotationBox {
            image_id: fields[0].trim().to_string(),
            word: fields[1].trim().to_string(),
            annotator: fields[2].trim().to_string(),
            rect,
        });
    }
    Ok(boxes)
}

/// Consensus pixel mask for one (image, word) pair.
#[derive(Debug, Clone)]
pub struct GroundTruthMask {
    pub image_id: String,
    pub word: String,
    pub side: usize,
    pub mask: Vec<bool>,
    pub annotators: usize,
}

impl GroundTruthMask {
    pub fn positive_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Builds consensus masks: a pixel is ground truth when the box unions of
/// at least `min_votes` distinct annotators cover it. Boxes are clipped to
/// the canvas.
pub fn build_ground_truth(
    boxes: &[AnnotationBox],
    side: usize,
    min_votes: usize,
) -> Result<Vec<GroundTruthMask>> {
    if min_votes == 0 {
        return Err(Error::Config("min_votes must be positive".into()));
    }
    let mut grouped: BTreeMap<(String, String), BTreeMap<String, Vec<Rect>>> = BTreeMap::new();
    for b in boxes {
        grouped
            .entry((b.image_id.clone(), b.word.clone()))
            .or_default()
            .entry(b.annotator.clone())
            .or_default()
            .push(b.rect.clip(side));
    }
    let mut masks = Vec::with_capacity(grouped.len());
    for ((image_id, word), annotators) in grouped {
        let mut votes = vec![0u32; side * side];
        for rects in annotators.values() {
            let mut union = vec![false; side * side];
            for rect in rects {
                for y in rect.y0..rect.y1 {
                    for x in rect.x0..rect.x1 {
                        union[y * side + x] = true;
                    }
                }
            }
            for (v, covered) in votes.iter_mut().zip(&union) {
                *v += u32::from(*covered);
            }
        }
        masks.push(GroundTruthMask {
            image_id,
            word,
            side,
            mask: votes.iter().map(|&v| v as usize >= min_votes).collect(),
            annotators: annotators.len(),
        });
    }
    Ok(masks)
}

/// Intersection-over-union of a thresholded map against the mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IouAtThreshold {
    pub threshold: f64,
    pub iou: f64,
}

/// Localization scores for one saliency map.
#[derive(Debug, Clone)]
pub struct SaliencyEvaluation {
    pub word: String,
    pub image_id: String,
    pub average_precision: f64,
    pub iou: Vec<IouAtThreshold>,
}

/// Scores a pixel-resolution map against a consensus mask.
///
/// Average precision is non-interpolated: pixels are ranked by score, ties
/// broken by pixel index, and precision is averaged at each ground-truth
/// hit. IoU is reported at each requested threshold with `score >=
/// threshold` as the predicted mask.
pub fn evaluate_saliency(
    word: &str,
    pixel_map: &Grid,
    gt: &GroundTruthMask,
    thresholds: &[f64],
) -> Result<SaliencyEvaluation> {
    if pixel_map.width != gt.side || pixel_map.height != gt.side {
        return Err(Error::DimensionMismatch {
            what: "saliency map pixels",
            expected: gt.side * gt.side,
            actual: pixel_map.width * pixel_map.height,
        });
    }
    let positives = gt.positive_count();
    if positives == 0 {
        return Err(Error::EmptyInput {
            what: "ground truth positives",
        });
    }
    if pixel_map.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("saliency map for {:?} on {:?}", word, gt.image_id),
        });
    }

    let mut order: Vec<usize> = (0..pixel_map.data.len()).collect();
    order.sort_by(|&a, &b| {
        pixel_map.data[b]
            .total_cmp(&pixel_map.data[a])
            .then(a.cmp(&b))
    });
    let mut hits = 0usize;
    let mut precision_sum = 0.0f64;
    for (rank, &pixel) in order.iter().enumerate() {
        if gt.mask[pixel] {
            hits += 1;
            precision_sum += hits as f64 / (rank + 1) as f64;
        }
    }
    let average_precision = precision_sum / positives as f64;

    let iou = thresholds
        .iter()
        .map(|&threshold| {
            let mut intersection = 0usize;
            let mut union = 0usize;
            for (&v, &m) in pixel_map.data.iter().zip(&gt.mask) {
                let predicted = f64::from(v) >= threshold;
                intersection += usize::from(predicted && m);
                union += usize::from(predicted || m);
            }
            IouAtThreshold {
                threshold,
                iou: if union == 0 {
                    1.0
                } else {
                    intersection as f64 / union as f64
                },
            }
        })
        .collect();

    Ok(SaliencyEvaluation {
        word: word.to_string(),
        image_id: gt.image_id.clone(),
        average_precision,
        iou,
    })
}

/// Picks a binarization threshold by Otsu's method on a 256-bin histogram:
/// the split maximizing between-class variance, returned as the lower edge
/// of the first foreground bin. A constant input returns its value.
pub fn otsu_threshold(values: &[f32]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput {
            what: "threshold input",
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "threshold input".into(),
        });
    }
    let lo = f64::from(values.iter().copied().fold(f32::INFINITY, f32::min));
    let hi = f64::from(values.iter().copied().fold(f32::NEG_INFINITY, f32::max));
    if hi <= lo {
        return Ok(lo);
    }
    const BINS: usize = 256;
    let width = (hi - lo) / BINS as f64;
    let mut counts = [0u64; BINS];
    for &v in values {
        let bin = (((f64::from(v) - lo) / width) as usize).min(BINS - 1);
        counts[bin] += 1;
    }
    let total = values.len() as f64;
    let total_mean: f64 = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum::<f64>()
        / total;

    let mut best_t = 0usize;
    let mut best_var = f64::NEG_INFINITY;
    let mut w0 = 0.0f64;
    let mut sum0 = 0.0f64;
    for (t, &count) in counts.iter().enumerate().take(BINS - 1) {
        w0 += count as f64;
        sum0 += t as f64 * count as f64;
        if w0 == 0.0 || w0 == total {
            continue;
        }
        let w1 = total - w0;
        let mu0 = sum0 / w0;
        let mu1 = (total_mean * total - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_t = t;
        }
    }
    Ok(lo + (best_t + 1) as f64 * width)
}

impl SaliencyMap {
    /// Serializes the lattice map as CSV with a metadata comment line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# attrscope saliency word={} image={} k={} z={:.9} width={} height={}",
            self.word, self.image_id, self.k, self.normalizer, self.grid.width, self.grid.height
        );
        for y in 0..self.grid.height {
            let row: Vec<String> = (0..self.grid.width)
                .map(|x| format!("{:.6}", self.grid.at(x, y)))
                .collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::util::atomic_write(path, self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<SaliencyMap> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::Format {
            path: path.to_path_buf(),
            message: "empty file".into(),
        })?;
        let mut meta: BTreeMap<&str, &str> = BTreeMap::new();
        for token in header.trim_start_matches('#').split_whitespace() {
            if let Some((key, value)) = token.split_once('=') {
                meta.insert(key, value);
            }
        }
        let field = |key: &str| -> Result<&str> {
            meta.get(key).copied().ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                message: format!("metadata line misses {key}="),
            })
        };
        let parse_usize = |key: &str| -> Result<usize> {
            field(key)?.parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                message: format!("bad {key}"),
            })
        };
        let width = parse_usize("width")?;
        let height = parse_usize("height")?;
        let k = parse_usize("k")?;
        let normalizer: f64 = field("z")?.parse().map_err(|_| Error::Format {
            path: path.to_path_buf(),
            message: "bad z".into(),
        })?;
        let mut data = Vec::with_capacity(width * height);
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            for cell in line.split(',') {
                data.push(cell.trim().parse::<f32>().map_err(|_| Error::Format {
                    path: path.to_path_buf(),
                    message: format!("bad cell {cell:?}"),
                })?);
            }
        }
        Ok(SaliencyMap {
            word: field("word")?.to_string(),
            image_id: field("image")?.to_string(),
            k,
            normalizer,
            grid: Grid::from_data(width, height, data).map_err(|_| Error::Format {
                path: path.to_path_buf(),
                message: "cell count does not match the declared dimensions".into(),
            })?,
        })
    }
}

/// Writes a `[0, 1]` grid as a binary 8-bit PGM for quick visual checks.
pub fn write_pgm(grid: &Grid, path: &Path) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", grid.width, grid.height).into_bytes();
    bytes.extend(
        grid.data
            .iter()
            .map(|&v| (f64::from(v).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    crate::util::atomic_write(path, &bytes).map_err(|e| Error::io(path, e))
}
