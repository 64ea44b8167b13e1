//! Bounding-box feature network: turns an image into an 8-channel grid of
//! cell features, rasterizes proposals into binary cell masks with fixed
//! affine layers, and pools the features under each mask into a per-proposal
//! image descriptor. Also hosts the low-resolution segmentation head used
//! for pretraining.
//!
//! Grid cells are addressed `(row, col)` with row 0 at the top of the image.
//! Corner coordinates `[x0, y0, x1, y1]` measure `y` bottom-up, so a cell in
//! grid row `r` sits at `y = H − 1 − r`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GroundTruth, Proposal};
use crate::netcore::{
    concat_channels, relu_map, split_channels, upsample_nearest, upsample_nearest_backward, Conv2d, ConvCache, ConvStack, ConvStackCache,
    Grads, LayerSpec, ParamBuilder, ParamId, ParamRole, ParamSet, Tensor,
};
use crate::scalar::Scalar;

/// Number of channels of the cell feature map.
pub const FEATURE_CHANNELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Cells per row.
    pub width: usize,
    /// Cells per column.
    pub height: usize,
}

impl GridSpec {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        let g = GridSpec { width, height };
        g.validate()?;
        Ok(g)
    }

    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("width", self.width), ("height", self.height)] {
            if v < 4 || v % 4 != 0 {
                return Err(Error::Config(format!(
                    "grid {name} must be a multiple of 4 and at least 4, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { width: 32, height: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BfNetConfig {
    pub in_channels: usize,
    /// Side of the square input image, in pixels.
    pub image_size: usize,
    /// Output channels of each residual stage; every stage halves the resolution.
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Width of the per-scale conv stacks.
    pub scale_channels: usize,
    pub scale_convs: usize,
    pub pixel_mean: Vec<f64>,
    pub pixel_std: Vec<f64>,
}

impl Default for BfNetConfig {
    fn default() -> Self {
        BfNetConfig {
            in_channels: 3,
            image_size: 256,
            stage_widths: vec![32, 64, 128, 256],
            blocks_per_stage: 3,
            scale_channels: 128,
            scale_convs: 2,
            pixel_mean: vec![0.5; 3],
            pixel_std: vec![0.25; 3],
        }
    }
}

impl BfNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.len() < 3 {
            return Err(Error::Config("BFNet needs at least three backbone stages".into()));
        }
        if self.blocks_per_stage == 0 || self.scale_convs == 0 || self.scale_channels == 0 {
            return Err(Error::Config("BFNet block, conv and channel counts must be positive".into()));
        }
        if self.pixel_mean.len() != self.in_channels || self.pixel_std.len() != self.in_channels {
            return Err(Error::Config("pixel_mean/pixel_std need one entry per input channel".into()));
        }
        if self.pixel_std.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("pixel_std entries must be positive".into()));
        }
        Ok(())
    }
}

/// Per-channel standardization of a `[C, H, W]` image with values in `[0, 1]`.
pub fn standardize<T: Scalar>(raw: &Tensor<T>, config: &BfNetConfig) -> Result<Tensor<T>> {
    let shape = raw.shape();
    if shape.len() != 3 || shape[0] != config.in_channels {
        return Err(Error::dim(format!(
            "expected a [{}, H, W] image, got {:?}",
            config.in_channels, shape
        )));
    }
    let plane = shape[1] * shape[2];
    let mut out = raw.clone();
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let (m, s) = (T::lit(config.pixel_mean[c]), T::lit(config.pixel_std[c]));
        chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    Ok(out)
}

/// Grid rectangle of a box: `[x0, y0, x1, y1]`, `y` bottom-up.
///
/// The min corner rounds down and the max corner rounds up (minus one), so
/// any box with positive area covers at least one cell; results are clamped
/// into the grid.
pub fn phi<T: Scalar>(p: &Proposal<T>, grid: GridSpec) -> [usize; 4] {
    let (bx0, by0, bx1, by1) = p.bbox.corners();
    let span = |lo: T, hi: T, n: usize| -> (usize, usize) {
        let nf = n as f64;
        let a = (lo.as_f64() * nf).floor().clamp(0.0, nf - 1.0) as usize;
        let b = ((hi.as_f64() * nf).ceil() - 1.0).clamp(0.0, nf - 1.0) as usize;
        (a, b.max(a))
    };
    let (x0, x1) = span(bx0, bx1, grid.width);
    let (y0, y1) = span(by0, by1, grid.height);
    [x0, y0, x1, y1]
}

/// `k × W·H` binary masks, one per proposal, stored row-major per grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskBank {
    pub grid: GridSpec,
    data: Vec<u8>,
}

impl MaskBank {
    pub fn len(&self) -> usize {
        self.data.len() / self.grid.cells()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn mask(&self, p: usize) -> &[u8] {
        let n = self.grid.cells();
        &self.data[p * n..(p + 1) * n]
    }

    pub fn get(&self, p: usize, row: usize, col: usize) -> bool {
        self.mask(p)[row * self.grid.width + col] == 1
    }

    pub fn from_masks(grid: GridSpec, masks: &[Vec<u8>]) -> Result<Self> {
        let mut data = Vec::with_capacity(masks.len() * grid.cells());
        for m in masks {
            if m.len() != grid.cells() {
                return Err(Error::dim("mask size does not match the grid"));
            }
            data.extend(m.iter().map(|&v| u8::from(v != 0)));
        }
        Ok(MaskBank { grid, data })
    }
}

/// The four fixed single-input affine maps whose non-positive outputs mark
/// the cells on the inner side of each box edge.
#[derive(Debug, Clone)]
pub struct MaskLayers {
    pub grid: GridSpec,
    /// `(weight, bias)` for the `x0`, `x1`, `y0`, `y1` maps, each `W·H` long.
    pub maps: [(ParamId, ParamId); 4],
}

impl MaskLayers {
    /// Column index per cell is `A`, bottom-up row index is `B`:
    /// `M^{x0} = 1[x0 − A ≤ 0]`, `M^{x1} = 1[A − x1 ≤ 0]`, and likewise
    /// for `y` with `B`.
    pub fn build<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, grid: GridSpec) -> Self {
        let n = grid.cells();
        let a: Vec<f64> = (0..n).map(|i| (i % grid.width) as f64).collect();
        let b: Vec<f64> = (0..n).map(|i| (grid.height - 1 - i / grid.width) as f64).collect();
        let mut add = |name: &str, sign: f64, offs: &[f64]| {
            pb.scoped(name, |pb| {
                let w = pb.add("weight", Tensor::full(&[n], T::lit(sign)), ParamRole::Frozen);
                let bias = Tensor::from_vec(&[n], offs.iter().map(|v| T::lit(-sign * v)).collect()).expect("shape");
                let bias = pb.add("bias", bias, ParamRole::Frozen);
                (w, bias)
            })
        };
        let maps = [add("x0", 1.0, &a), add("x1", -1.0, &a), add("y0", 1.0, &b), add("y1", -1.0, &b)];
        MaskLayers { grid, maps }
    }

    /// Thresholded output of map `j` (`0..4` for `x0, x1, y0, y1`) on input `v`.
    pub fn threshold<T: Scalar>(&self, params: &ParamSet<T>, j: usize, v: usize) -> Vec<u8> {
        let (w, b) = self.maps[j];
        let x = T::lit(v as f64);
        params
            .get(w)
            .data()
            .iter()
            .zip(params.get(b).data())
            .map(|(w, b)| u8::from(*w * x + *b <= T::zero()))
            .collect()
    }
}

/// Conjunction of the four thresholded grids for every corner row.
pub fn compute_masks<T: Scalar>(corners: &[[usize; 4]], layers: &MaskLayers, params: &ParamSet<T>) -> MaskBank {
    let n = layers.grid.cells();
    let mut data = Vec::with_capacity(corners.len() * n);
    for c in corners {
        let mut m = vec![1u8; n];
        // maps are ordered x0, x1, y0, y1
        for (j, v) in [c[0], c[2], c[1], c[3]].into_iter().enumerate() {
            for (a, b) in m.iter_mut().zip(layers.threshold(params, j, v)) {
                *a &= b;
            }
        }
        data.extend(m);
    }
    MaskBank { grid: layers.grid, data }
}

/// Per proposal and channel, the maximum feature over the cells its mask
/// selects; an empty mask gives a zero row. Also returns the winning cell
/// per entry for the backward pass.
pub fn masked_descriptor<T: Scalar>(features: &Tensor<T>, masks: &MaskBank) -> Result<(Tensor<T>, Vec<Option<usize>>)> {
    let g = masks.grid;
    if features.shape() != [FEATURE_CHANNELS, g.height, g.width] {
        return Err(Error::dim(format!(
            "feature map {:?} does not match the {}×{} grid",
            features.shape(),
            g.height,
            g.width
        )));
    }
    let n = g.cells();
    let k = masks.len();
    let mut out = Vec::with_capacity(k * FEATURE_CHANNELS);
    let mut arg = Vec::with_capacity(k * FEATURE_CHANNELS);
    for p in 0..k {
        let m = masks.mask(p);
        for c in 0..FEATURE_CHANNELS {
            let plane = &features.data()[c * n..(c + 1) * n];
            let mut best: Option<usize> = None;
            for (i, (&v, &on)) in plane.iter().zip(m).enumerate() {
                if on == 1 && best.is_none_or(|b| v > plane[b]) {
                    best = Some(i);
                }
            }
            out.push(best.map_or(T::zero(), |b| plane[b]));
            arg.push(best);
        }
    }
    Ok((Tensor::from_vec(&[k, FEATURE_CHANNELS], out)?, arg))
}

pub fn masked_descriptor_backward<T: Scalar>(arg: &[Option<usize>], d: &Tensor<T>, grid: GridSpec) -> Tensor<T> {
    let n = grid.cells();
    let mut df = Tensor::zeros(&[FEATURE_CHANNELS, grid.height, grid.width]);
    for (i, (a, v)) in arg.iter().zip(d.data()).enumerate() {
        if let Some(cell) = a {
            let c = i % FEATURE_CHANNELS;
            df.data_mut()[c * n + cell] += *v;
        }
    }
    df
}

/// Binary cell labels: 1 where any ground-truth rectangle covers the cell.
pub fn seg_targets<T: Scalar>(gts: &[GroundTruth<T>], grid: GridSpec) -> Vec<u8> {
    let mut l = vec![0u8; grid.cells()];
    for gt in gts {
        let [x0, y0, x1, y1] = phi(&gt.as_proposal(), grid);
        // grid row r holds y = H − 1 − r
        for row in (grid.height - 1 - y1)..=(grid.height - 1 - y0) {
            for col in x0..=x1 {
                l[row * grid.width + col] = 1;
            }
        }
    }
    l
}

/// Backbone, per-scale stacks, top-down aggregation, feature mixing and the
/// segmentation head.
#[derive(Debug, Clone)]
pub struct BfNet {
    pub config: BfNetConfig,
    pub grid: GridSpec,
    stages: Vec<ConvStack>,
    /// Fine (`W×H`), mid (`W/2×H/2`) and coarse (`W/4×H/4`) stacks.
    scales: [ConvStack; 3],
    mix: Conv2d,
    seg: Conv2d,
    pub masks: MaskLayers,
}

#[derive(Debug, Clone)]
pub struct BfCache<T> {
    stages: Vec<ConvStackCache<T>>,
    scales: Vec<ConvStackCache<T>>,
    mix: ConvCache<T>,
    features: Tensor<T>,
}

impl BfNet {
    pub fn build<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, config: &BfNetConfig, grid: GridSpec) -> Result<Self> {
        config.validate()?;
        grid.validate()?;
        let mut stages = Vec::with_capacity(config.stage_widths.len());
        let mut c = config.in_channels;
        for (i, &w) in config.stage_widths.iter().enumerate() {
            let specs: Vec<LayerSpec> = (0..config.blocks_per_stage)
                .map(|b| LayerSpec::Residual {
                    out: w,
                    stride: if b == 0 { 2 } else { 1 },
                })
                .collect();
            stages.push(pb.scoped(&format!("backbone.{i}"), |pb| ConvStack::build(pb, c, &specs))?);
            c = w;
        }
        let n = config.stage_widths.len();
        let sc = config.scale_channels;
        let scale = |pb: &mut ParamBuilder<'_, T, R>, name: &str, c_in: usize, div: usize| {
            let mut specs = vec![LayerSpec::AdaptivePool {
                rows: grid.height / div,
                cols: grid.width / div,
            }];
            specs.extend((0..config.scale_convs).map(|_| LayerSpec::Conv {
                out: sc,
                kernel: 3,
                stride: 1,
                padding: 1,
                relu: true,
            }));
            pb.scoped(name, |pb| ConvStack::build(pb, c_in, &specs))
        };
        let scales = [
            scale(pb, "scale.fine", config.stage_widths[n - 3], 1)?,
            scale(pb, "scale.mid", config.stage_widths[n - 2], 2)?,
            scale(pb, "scale.coarse", config.stage_widths[n - 1], 4)?,
        ];
        let mix = pb.scoped("mix", |pb| Conv2d::build(pb, 3 * sc, FEATURE_CHANNELS, 1, 1, 0));
        let seg = pb.scoped("seg", |pb| Conv2d::build(pb, FEATURE_CHANNELS, 2, 1, 1, 0));
        let masks = pb.scoped("mask", |pb| MaskLayers::build(pb, grid));
        Ok(BfNet {
            config: config.clone(),
            grid,
            stages,
            scales,
            mix,
            seg,
            masks,
        })
    }

    /// Image features `IF`, `[8, H, W]`, ReLU-activated.
    pub fn extract_image_features<T: Scalar>(&self, params: &ParamSet<T>, image: &Tensor<T>) -> Result<(Tensor<T>, BfCache<T>)> {
        let s = image.shape();
        if s.len() != 3 || s[0] != self.config.in_channels {
            return Err(Error::dim(format!(
                "expected a [{}, H, W] image, got {:?}",
                self.config.in_channels, s
            )));
        }
        if s[1] < self.grid.height || s[2] < self.grid.width {
            return Err(Error::dim(format!(
                "{}×{} image is smaller than the {}×{} grid",
                s[1], s[2], self.grid.height, self.grid.width
            )));
        }
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        let mut embeddings = Vec::with_capacity(self.stages.len());
        let mut h = image.clone();
        for stage in &self.stages {
            let (y, c) = stage.forward(params, &h)?;
            stage_caches.push(c);
            embeddings.push(y.clone());
            h = y;
        }
        let n = embeddings.len();
        let (fine, cf) = self.scales[0].forward(params, &embeddings[n - 3])?;
        let (mid, cm) = self.scales[1].forward(params, &embeddings[n - 2])?;
        let (coarse, cc) = self.scales[2].forward(params, &embeddings[n - 1])?;

        let mut p_mid = mid;
        p_mid.add_assign(&upsample_nearest(&coarse, 2)?);
        let mut p_fine = fine;
        p_fine.add_assign(&upsample_nearest(&p_mid, 2)?);
        let r_mid = upsample_nearest(&p_mid, 2)?;
        let r_coarse = upsample_nearest(&coarse, 4)?;
        let cat = concat_channels(&[&p_fine, &r_mid, &r_coarse])?;
        let (mut features, mix_cache) = self.mix.forward(params, &cat)?;
        relu_map(&mut features);
        Ok((
            features.clone(),
            BfCache {
                stages: stage_caches,
                scales: vec![cf, cm, cc],
                mix: mix_cache,
                features,
            },
        ))
    }

    /// Accumulates parameter gradients given `dL/dIF`.
    pub fn backward_features<T: Scalar>(&self, params: &ParamSet<T>, cache: &BfCache<T>, d_features: &Tensor<T>, g: &mut Grads<T>) {
        let sc = self.config.scale_channels;
        let mut d = d_features.clone();
        crate::netcore::layers::relu_backward_inplace(cache.features.data(), d.data_mut());
        let dcat = self.mix.backward(params, &cache.mix, &d, g);
        let mut parts = split_channels(&dcat, &[sc, sc, sc]).into_iter();
        let d_fine = parts.next().expect("3 parts");
        let d_rmid = parts.next().expect("3 parts");
        let d_rcoarse = parts.next().expect("3 parts");

        let mut d_mid = upsample_nearest_backward(&d_rmid, 2);
        d_mid.add_assign(&upsample_nearest_backward(&d_fine, 2));
        let mut d_coarse = upsample_nearest_backward(&d_rcoarse, 4);
        d_coarse.add_assign(&upsample_nearest_backward(&d_mid, 2));

        let n = self.stages.len();
        let mut d_emb: Vec<Option<Tensor<T>>> = vec![None; n];
        d_emb[n - 3] = Some(self.scales[0].backward(params, &cache.scales[0], &d_fine, g));
        d_emb[n - 2] = Some(self.scales[1].backward(params, &cache.scales[1], &d_mid, g));
        d_emb[n - 1] = Some(self.scales[2].backward(params, &cache.scales[2], &d_coarse, g));
        let mut carry: Option<Tensor<T>> = None;
        for i in (0..n).rev() {
            let mut d = match (d_emb[i].take(), carry.take()) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(&b);
                    a
                }
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => continue,
            };
            d = self.stages[i].backward(params, &cache.stages[i], &d, g);
            if i > 0 {
                carry = Some(d);
            }
        }
    }

    /// Per-cell `{background, object}` probabilities, `[2, H, W]`, plus the
    /// cache needed by [`BfNet::seg_backward`].
    pub fn seg_forward<T: Scalar>(&self, params: &ParamSet<T>, features: &Tensor<T>) -> Result<(Tensor<T>, SegCache<T>)> {
        let (logits, cache) = self.seg.forward(params, features)?;
        let n = self.grid.cells();
        let mut probs = logits;
        {
            let data = probs.data_mut();
            for i in 0..n {
                let (a, b) = (data[i], data[n + i]);
                let m = a.maxv(b);
                let (ea, eb) = ((a - m).exp(), (b - m).exp());
                let s = ea + eb;
                data[i] = ea / s;
                data[n + i] = eb / s;
            }
        }
        Ok((probs.clone(), SegCache { conv: cache, probs }))
    }

    /// Returns `dL/dIF` given `dL/dprobs`.
    pub fn seg_backward<T: Scalar>(&self, params: &ParamSet<T>, cache: &SegCache<T>, d_probs: &Tensor<T>, g: &mut Grads<T>) -> Tensor<T> {
        let n = self.grid.cells();
        let p = cache.probs.data();
        let dp = d_probs.data();
        let mut dl = vec![T::zero(); 2 * n];
        for i in 0..n {
            let s = dp[i] * p[i] + dp[n + i] * p[n + i];
            dl[i] = p[i] * (dp[i] - s);
            dl[n + i] = p[n + i] * (dp[n + i] - s);
        }
        let dl = Tensor::from_vec(&[2, self.grid.height, self.grid.width], dl).expect("shape");
        self.seg.backward(params, &cache.conv, &dl, g)
    }
}

#[derive(Debug, Clone)]
pub struct SegCache<T> {
    conv: ConvCache<T>,
    probs: Tensor<T>,
}
