//! Twin permutation-equivariant subnetworks over geometry and image
//! descriptors, the relabel/rescore/suppress heads, and the inference-time
//! refinement policy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bfnet::{compute_masks, masked_descriptor, masked_descriptor_backward, phi, BfCache, BfNet, BfNetConfig, GridSpec};
use crate::error::{Error, Result};
use crate::geometry::{argmax, encode_descriptor, nms, select_top_k, ClassSet, Proposal};
use crate::losses::{RESCORE_BINS, SUPPRESS_BACKGROUND};
use crate::netcore::{
    broadcast_concat, broadcast_concat_backward, hconcat, hconcat_backward, max_over_rows, max_over_rows_backward, softmax_rows,
    softmax_rows_backward, Ctx, Grads, MlpCache, ParamBuilder, ParamSet, SharedMlp, Tensor,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct R2sConfig {
    /// Hidden widths of the local MLP; the last entry is `l`.
    pub local: Vec<usize>,
    /// Widths of the expansion MLP; the last entry is the global width `g`.
    pub expand: Vec<usize>,
    /// Widths of the fusion MLP; the last entry is the embedding width.
    pub fusion: Vec<usize>,
    pub head_hidden: Vec<usize>,
}

impl Default for R2sConfig {
    fn default() -> Self {
        R2sConfig {
            local: vec![64, 64],
            expand: vec![128, 1024],
            fusion: vec![512, 256, 128],
            head_hidden: vec![128],
        }
    }
}

impl R2sConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("local", &self.local), ("expand", &self.expand), ("fusion", &self.fusion)] {
            if v.is_empty() || v.contains(&0) {
                return Err(Error::Config(format!("r2s.{name} needs at least one positive width")));
            }
        }
        if self.head_hidden.contains(&0) {
            return Err(Error::Config("r2s.head_hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn embedding_width(&self) -> usize {
        *self.fusion.last().expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub bfnet: BfNetConfig,
    pub r2s: R2sConfig,
}

/// Confidence assigned to rescore bin `j`: the bin midpoint.
pub fn bin_to_confidence(j: usize) -> f64 {
    (j.min(RESCORE_BINS - 1) as f64 + 0.5) / RESCORE_BINS as f64
}

/// Confidence for one rescore row. The argmax bin decides which interval the
/// value falls in; inside it, the value moves from the midpoint towards the
/// row's expected confidence, staying clear of the bin edges. Proposals that
/// share a bin are then ranked by how sure the head is instead of tying.
pub fn rescore_confidence<T: Scalar>(row: &[T]) -> f64 {
    let j = argmax(row);
    let mid = bin_to_confidence(j);
    let expected: f64 = row.iter().enumerate().map(|(b, p)| p.as_f64() * bin_to_confidence(b)).sum();
    let half = 0.45 / RESCORE_BINS as f64;
    mid + (expected - mid).clamp(-half, half)
}

/// Local MLP, expansion, max over rows and fusion of local with global
/// features.
#[derive(Debug, Clone)]
pub struct SubNetwork {
    local: SharedMlp,
    expand: SharedMlp,
    fusion: SharedMlp,
}

#[derive(Debug, Clone)]
pub struct SubnetCache<T> {
    local: MlpCache<T>,
    expand: MlpCache<T>,
    fusion: MlpCache<T>,
    arg: Vec<usize>,
    rows: usize,
    l: usize,
    /// Global feature `G`, one row per group.
    pub global: Tensor<T>,
}

impl SubNetwork {
    pub fn build<T: Scalar, R: rand::Rng>(pb: &mut ParamBuilder<'_, T, R>, d_in: usize, cfg: &R2sConfig) -> Self {
        let dims = |first: usize, rest: &[usize]| -> Vec<usize> { std::iter::once(first).chain(rest.iter().copied()).collect() };
        let l = *cfg.local.last().expect("validated");
        let g = *cfg.expand.last().expect("validated");
        SubNetwork {
            local: pb.scoped("local", |pb| SharedMlp::build(pb, &dims(d_in, &cfg.local), true, false)),
            expand: pb.scoped("expand", |pb| SharedMlp::build(pb, &dims(l, &cfg.expand), true, false)),
            fusion: pb.scoped("fusion", |pb| SharedMlp::build(pb, &dims(l + g, &cfg.fusion), true, false)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.local.d_in()
    }

    /// `x` stacks groups of `k` rows; returns the `rows × 128` embedding.
    pub fn forward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &Tensor<T>,
        k: usize,
        ctx: &mut Ctx<T>,
    ) -> Result<(Tensor<T>, SubnetCache<T>)> {
        if x.shape().len() != 2 || x.cols() != self.d_in() {
            return Err(Error::dim(format!(
                "subnetwork expects {} columns, got {:?}",
                self.d_in(),
                x.shape()
            )));
        }
        let (local, lc) = self.local.forward(params, x, ctx)?;
        let (expanded, ec) = self.expand.forward(params, &local, ctx)?;
        let (global, arg) = max_over_rows(&expanded, k)?;
        let mixed = broadcast_concat(&local, &global, k);
        let (lg, fc) = self.fusion.forward(params, &mixed, ctx)?;
        Ok((
            lg,
            SubnetCache {
                local: lc,
                expand: ec,
                fusion: fc,
                arg,
                rows: x.rows(),
                l: local.cols(),
                global,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        cache: &SubnetCache<T>,
        d_lg: &Tensor<T>,
        k: usize,
        g: &mut Grads<T>,
    ) -> Tensor<T> {
        let d_mixed = self.fusion.backward(params, &cache.fusion, d_lg, g);
        let (mut d_local, d_global) = broadcast_concat_backward(&d_mixed, cache.l, k);
        let d_expanded = max_over_rows_backward(&cache.arg, &d_global, cache.rows);
        d_local.add_assign(&self.expand.backward(params, &cache.expand, &d_expanded, g));
        self.local.backward(params, &cache.local, &d_local, g)
    }
}

/// Row-stochastic outputs of the three heads.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs<T> {
    pub relabel: Tensor<T>,
    pub rescore: Tensor<T>,
    pub suppress: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Heads {
    relabel: SharedMlp,
    rescore: SharedMlp,
    suppress: SharedMlp,
}

#[derive(Debug, Clone)]
pub struct HeadsCache<T> {
    caches: Vec<MlpCache<T>>,
    out: HeadOutputs<T>,
}

impl Heads {
    pub fn build<T: Scalar, R: rand::Rng>(pb: &mut ParamBuilder<'_, T, R>, d_in: usize, cfg: &R2sConfig, classes: &ClassSet) -> Self {
        let mut head = |name: &str, out: usize| {
            let dims: Vec<usize> = std::iter::once(d_in).chain(cfg.head_hidden.iter().copied()).chain([out]).collect();
            pb.scoped(name, |pb| SharedMlp::build(pb, &dims, true, true))
        };
        Heads {
            relabel: head("relabel", classes.len() + 1),
            rescore: head("rescore", RESCORE_BINS),
            suppress: head("suppress", 2),
        }
    }

    /// Heads over `[LG_BD ‖ LG_ID]`.
    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, lg: &Tensor<T>, ctx: &mut Ctx<T>) -> Result<(HeadOutputs<T>, HeadsCache<T>)> {
        let mut caches = Vec::with_capacity(3);
        let mut probs = Vec::with_capacity(3);
        for mlp in [&self.relabel, &self.rescore, &self.suppress] {
            let (logits, c) = mlp.forward(params, lg, ctx)?;
            caches.push(c);
            probs.push(softmax_rows(&logits));
        }
        let suppress = probs.pop().expect("3");
        let rescore = probs.pop().expect("3");
        let relabel = probs.pop().expect("3");
        let out = HeadOutputs {
            relabel,
            rescore,
            suppress,
        };
        Ok((out.clone(), HeadsCache { caches, out }))
    }

    /// `d` holds loss gradients with respect to the head probabilities.
    pub fn backward<T: Scalar>(&self, params: &ParamSet<T>, cache: &HeadsCache<T>, d: &HeadOutputs<T>, g: &mut Grads<T>) -> Tensor<T> {
        let pairs = [
            (&self.relabel, &cache.out.relabel, &d.relabel),
            (&self.rescore, &cache.out.rescore, &d.rescore),
            (&self.suppress, &cache.out.suppress, &d.suppress),
        ];
        let mut total: Option<Tensor<T>> = None;
        for ((mlp, y, dy), c) in pairs.into_iter().zip(&cache.caches) {
            let dl = softmax_rows_backward(y, dy);
            let dx = mlp.backward(params, c, &dl, g);
            match &mut total {
                Some(t) => t.add_assign(&dx),
                None => total = Some(dx),
            }
        }
        total.expect("three heads")
    }
}

/// Which heads act at inference time. A disabled relabel head keeps the
/// incoming class, a disabled rescore head keeps the incoming confidence
/// and a disabled suppress head drops nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadToggles {
    pub relabel: bool,
    pub rescore: bool,
    pub suppress: bool,
}

impl Default for HeadToggles {
    fn default() -> Self {
        HeadToggles {
            relabel: true,
            rescore: true,
            suppress: true,
        }
    }
}

impl HeadToggles {
    pub const NONE: HeadToggles = HeadToggles {
        relabel: false,
        rescore: false,
        suppress: false,
    };

    /// The eight on/off combinations, all-off first.
    pub fn grid() -> Vec<HeadToggles> {
        (0..8)
            .map(|m| HeadToggles {
                relabel: m & 1 != 0,
                rescore: m & 2 != 0,
                suppress: m & 4 != 0,
            })
            .collect()
    }

    pub fn label(&self) -> String {
        let names: Vec<&str> = [(self.relabel, "relabel"), (self.rescore, "rescore"), (self.suppress, "suppress")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        if names.is_empty() {
            "none".into()
        } else {
            names.join("+")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinementPolicy {
    pub suppress_threshold: f64,
    pub drop_background: bool,
    pub nms_rho_iou: f64,
    pub nms_rho_c: f64,
    pub heads: HeadToggles,
}

impl Default for RefinementPolicy {
    fn default() -> Self {
        RefinementPolicy {
            suppress_threshold: 0.5,
            drop_background: true,
            nms_rho_iou: 0.5,
            nms_rho_c: 0.5,
            heads: HeadToggles::default(),
        }
    }
}

impl RefinementPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("suppress_threshold", self.suppress_threshold),
            ("nms_rho_iou", self.nms_rho_iou),
            ("nms_rho_c", self.nms_rho_c),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// BFNet plus both subnetworks and the heads.
#[derive(Debug, Clone)]
pub struct R2sNet {
    pub bfnet: BfNet,
    pub bd: SubNetwork,
    pub id: SubNetwork,
    pub heads: Heads,
}

/// One image of a batch: a standardized image and exactly `k` proposal rows.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a, T> {
    pub image: &'a Tensor<T>,
    pub rows: &'a [Proposal<T>],
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    bf: Vec<BfCache<T>>,
    mask_args: Vec<Vec<Option<usize>>>,
    pub bd: SubnetCache<T>,
    pub id: SubnetCache<T>,
    heads: HeadsCache<T>,
}

/// A complete network together with its parameters and shape metadata.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub classes: ClassSet,
    pub grid: GridSpec,
    pub k: usize,
    pub net: R2sNet,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Model<T> {
    /// Freshly initialized model; the same seed yields the same weights.
    pub fn new(config: ModelConfig, classes: ClassSet, grid: GridSpec, k: usize, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let net = Self::build_net(&config, &classes, grid, k, &mut params, seed)?;
        Ok(Model {
            config,
            classes,
            grid,
            k,
            net,
            params,
        })
    }

    /// Attaches existing parameters, checking names, shapes and roles.
    pub fn with_params(config: ModelConfig, classes: ClassSet, grid: GridSpec, k: usize, params: ParamSet<T>) -> Result<Self> {
        let mut expected = ParamSet::<T>::new();
        let net = Self::build_net(&config, &classes, grid, k, &mut expected, 0)?;
        if expected.len() != params.len() {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, the configured network needs {}",
                params.len(),
                expected.len()
            )));
        }
        for ((_, want, we), (_, got, ge)) in expected.iter().zip(params.iter()) {
            if want != got || we.tensor.shape() != ge.tensor.shape() || we.role != ge.role {
                return Err(Error::Config(format!(
                    "parameter {got} {:?} does not match expected {want} {:?}",
                    ge.tensor.shape(),
                    we.tensor.shape()
                )));
            }
        }
        Ok(Model {
            config,
            classes,
            grid,
            k,
            net,
            params,
        })
    }

    fn build_net(
        config: &ModelConfig,
        classes: &ClassSet,
        grid: GridSpec,
        k: usize,
        params: &mut ParamSet<T>,
        seed: u64,
    ) -> Result<R2sNet> {
        if k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        config.r2s.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(params, &mut rng);
        let bfnet = pb.scoped("bfnet", |pb| BfNet::build(pb, &config.bfnet, grid))?;
        let bd = pb.scoped("r2s.bd", |pb| SubNetwork::build(pb, classes.descriptor_len(), &config.r2s));
        let id = pb.scoped("r2s.id", |pb| SubNetwork::build(pb, crate::bfnet::FEATURE_CHANNELS, &config.r2s));
        let heads = pb.scoped("r2s.heads", |pb| {
            Heads::build(pb, 2 * config.r2s.embedding_width(), &config.r2s, classes)
        });
        Ok(R2sNet { bfnet, bd, id, heads })
    }

    /// Geometry descriptors `BD` for stacked rows.
    pub fn geometry_descriptors(&self, rows: &[Proposal<T>]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(rows.len() * self.classes.descriptor_len());
        for p in rows {
            data.extend(encode_descriptor(p, &self.classes)?);
        }
        Tensor::from_vec(&[rows.len(), self.classes.descriptor_len()], data)
    }

    /// Full forward pass over a batch; BN uses batch statistics when `ctx`
    /// is in train mode.
    pub fn forward(&self, batch: &[Sample<'_, T>], ctx: &mut Ctx<T>) -> Result<(HeadOutputs<T>, ForwardCache<T>)> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let k = self.k;
        let mut rows = Vec::with_capacity(batch.len() * k);
        let mut id_rows = Vec::with_capacity(batch.len() * k * crate::bfnet::FEATURE_CHANNELS);
        let mut bf = Vec::with_capacity(batch.len());
        let mut mask_args = Vec::with_capacity(batch.len());
        for s in batch {
            if s.rows.len() != k {
                return Err(Error::dim(format!("expected {k} proposal rows, got {}", s.rows.len())));
            }
            let (features, cache) = self.net.bfnet.extract_image_features(&self.params, s.image)?;
            let corners: Vec<[usize; 4]> = s.rows.iter().map(|p| phi(p, self.grid)).collect();
            let masks = compute_masks(&corners, &self.net.bfnet.masks, &self.params);
            let (id, arg) = masked_descriptor(&features, &masks)?;
            id_rows.extend_from_slice(id.data());
            rows.extend_from_slice(s.rows);
            bf.push(cache);
            mask_args.push(arg);
        }
        let bd = self.geometry_descriptors(&rows)?;
        let id = Tensor::from_vec(&[rows.len(), crate::bfnet::FEATURE_CHANNELS], id_rows)?;
        let (lg_bd, bd_cache) = self.net.bd.forward(&self.params, &bd, k, ctx)?;
        let (lg_id, id_cache) = self.net.id.forward(&self.params, &id, k, ctx)?;
        let lg = hconcat(&lg_bd, &lg_id)?;
        let (out, heads) = self.net.heads.forward(&self.params, &lg, ctx)?;
        Ok((
            out,
            ForwardCache {
                bf,
                mask_args,
                bd: bd_cache,
                id: id_cache,
                heads,
            },
        ))
    }

    /// Backpropagates gradients with respect to the head probabilities.
    pub fn backward(&self, cache: &ForwardCache<T>, d: &HeadOutputs<T>, g: &mut Grads<T>) {
        let k = self.k;
        let d_lg = self.net.heads.backward(&self.params, &cache.heads, d, g);
        let (d_bd, d_id) = hconcat_backward(&d_lg, self.config.r2s.embedding_width());
        self.net.bd.backward(&self.params, &cache.bd, &d_bd, k, g);
        let d_id = self.net.id.backward(&self.params, &cache.id, &d_id, k, g);
        let width = crate::bfnet::FEATURE_CHANNELS;
        for (b, (bf, arg)) in cache.bf.iter().zip(&cache.mask_args).enumerate() {
            let rows = Tensor::from_vec(&[k, width], d_id.data()[b * k * width..(b + 1) * k * width].to_vec()).expect("shape");
            let d_features = masked_descriptor_backward(arg, &rows, self.grid);
            self.net.bfnet.backward_features(&self.params, bf, &d_features, g);
        }
    }

    /// Refines one image's raw proposals. `image` must be standardized.
    pub fn refine(&self, image: &Tensor<T>, proposals: &[Proposal<T>], policy: &RefinementPolicy) -> Result<Vec<Proposal<T>>> {
        policy.validate()?;
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let rows = select_top_k(proposals, self.k);
        let real = proposals.len().min(self.k);
        let (out, _) = self.forward(&[Sample { image, rows: &rows }], &mut Ctx::eval())?;
        let refined = self.apply_policy(&rows[..real], &out, policy);
        Ok(nms(&refined, T::lit(policy.nms_rho_iou), T::lit(policy.nms_rho_c)))
    }

    /// Per-row decisions of the policy before the final NMS.
    pub fn apply_policy(&self, rows: &[Proposal<T>], out: &HeadOutputs<T>, policy: &RefinementPolicy) -> Vec<Proposal<T>> {
        let bg = self.classes.background_index();
        let mut kept = Vec::with_capacity(rows.len());
        for (i, p) in rows.iter().enumerate() {
            let mut q = *p;
            if policy.heads.relabel {
                let row = out.relabel.row(i);
                let class = argmax(row);
                if class == bg && policy.drop_background {
                    continue;
                }
                // with background kept, fall back to the best object class
                q.class_id = if class == bg { argmax(&row[..bg]) } else { class };
            }
            if policy.heads.suppress && out.suppress.row(i)[SUPPRESS_BACKGROUND].as_f64() > policy.suppress_threshold {
                continue;
            }
            if policy.heads.rescore {
                q.confidence = T::lit(rescore_confidence(out.rescore.row(i)));
            }
            kept.push(q);
        }
        kept
    }
}
