//! Acceptance criteria. They run one after another inside a single test so
//! each time budget is measured without other tests competing for the CPU.
//! Every criterion prints one PASS/FAIL line; the test fails if any does.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use r2s_core::bfnet::{compute_masks, BfNetConfig, GridSpec, MaskLayers};
use r2s_core::datagen::{split_train_test, synth_dataset, synth_proposals, NoiseConfig, ProposalRecord, SplitMode, SynthConfig};
use r2s_core::geometry::{match_to_gt, nms, BBox, ClassSet, GroundTruth, Proposal};
use r2s_core::losses::{
    build_rescore_target, build_targets, loss_cls, loss_res, loss_seg, loss_sup, LossGrad, RescoreTarget, TrainingTargets,
};
use r2s_core::metrics::{average_precision, compute_indicators, EvalImage, MetricsReport};
use r2s_core::netcore::{grad_check_with_reference, param_count, Ctx, Grads, ParamBuilder, ParamRole, ParamSet, Tensor};
use r2s_core::r2snet::{rescore_confidence, HeadOutputs, HeadToggles, Model, ModelConfig, R2sConfig, RefinementPolicy, Sample};
use r2s_core::training::{image_rows, prepare_images, pretrain_bfnet, train_r2snet, Checkpoint, TrainConfig, TrainImage};
use r2s_core::{Quad, Scalar};

type Verdict = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn two_classes() -> ClassSet {
    ClassSet::new(["closed_door", "open_door"]).unwrap()
}

/// IoU computed from corners, independent of the crate's implementation.
fn iou_ref(a: &BBox<f64>, b: &BBox<f64>) -> f64 {
    let c = |x: &BBox<f64>| (x.cx - x.w / 2.0, x.cy - x.h / 2.0, x.cx + x.w / 2.0, x.cy + x.h / 2.0);
    let (a0, a1, a2, a3) = c(a);
    let (b0, b1, b2, b3) = c(b);
    let iw = (a2.min(b2) - a0.max(b0)).max(0.0);
    let ih = (a3.min(b3) - a1.max(b1)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn rand_box(r: &mut ChaCha8Rng) -> BBox<f64> {
    BBox::new(
        r.random_range(0.1..0.9),
        r.random_range(0.1..0.9),
        r.random_range(0.05..0.5),
        r.random_range(0.05..0.5),
    )
}

fn near(r: &mut ChaCha8Rng, b: &BBox<f64>, spread: f64) -> BBox<f64> {
    BBox::new(
        (b.cx + r.random_range(-spread..spread) * b.w).clamp(0.0, 1.0),
        (b.cy + r.random_range(-spread..spread) * b.h).clamp(0.0, 1.0),
        (b.w * r.random_range(1.0 - spread..1.0 + spread)).clamp(0.01, 1.0),
        (b.h * r.random_range(1.0 - spread..1.0 + spread)).clamp(0.01, 1.0),
    )
}

// ---------------------------------------------------------------- masks

/// Cell `(row, col)` is set when `x0 ≤ col ≤ x1` and `y0 ≤ y ≤ y1` with the
/// bottom-up `y = H − 1 − row`.
fn rasterize(c: [usize; 4], grid: GridSpec) -> Vec<u8> {
    let mut m = vec![0u8; grid.cells()];
    for row in 0..grid.height {
        let y = grid.height - 1 - row;
        for col in 0..grid.width {
            m[row * grid.width + col] = u8::from(c[0] <= col && col <= c[2] && c[1] <= y && y <= c[3]);
        }
    }
    m
}

fn mask_mismatches(corners: &[[usize; 4]], grid: GridSpec) -> usize {
    let mut params = ParamSet::<f32>::new();
    let layers = MaskLayers::build(&mut ParamBuilder::new(&mut params, &mut rng(0)), grid);
    let bank = compute_masks(corners, &layers, &params);
    assert_eq!(bank.len(), corners.len());
    corners
        .iter()
        .enumerate()
        .filter(|(i, c)| bank.mask(*i) != rasterize(**c, grid).as_slice())
        .count()
}

fn criterion_masks() -> Verdict {
    let g8 = GridSpec::square(8).unwrap();
    let mut all = Vec::new();
    for x0 in 0..8 {
        for x1 in x0..8 {
            for y0 in 0..8 {
                for y1 in y0..8 {
                    all.push([x0, y0, x1, y1]);
                }
            }
        }
    }
    let g32 = GridSpec::square(32).unwrap();
    let mut r = rng(1);
    let random: Vec<[usize; 4]> = (0..1000)
        .map(|_| {
            let (a, b) = (r.random_range(0..32), r.random_range(0..32));
            let (c, d) = (r.random_range(0..32), r.random_range(0..32));
            [a.min(b), c.min(d), a.max(b), c.max(d)]
        })
        .collect();
    let (bad8, bad32) = (mask_mismatches(&all, g8), mask_mismatches(&random, g32));
    ensure(
        all.len() == 1296 && bad8 == 0 && bad32 == 0,
        format!(
            "{} exhaustive 8x8 rectangles ({bad8} differ), 1000 random 32x32 ({bad32} differ)",
            all.len()
        ),
    )
}

// ---------------------------------------------------------------- nms

/// Pairwise formulation: a proposal survives when no surviving proposal of
/// higher confidence overlaps it by more than `rho_iou`.
fn nms_ref(ps: &[Proposal<f64>], rho_iou: f64, rho_c: f64) -> Vec<usize> {
    let n = ps.len();
    let overlap: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| iou_ref(&ps[i].bbox, &ps[j].bbox) > rho_iou).collect())
        .collect();
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&a, &b| ps[b].confidence.total_cmp(&ps[a].confidence));
    let mut alive = vec![false; n];
    for (pos, &i) in rank.iter().enumerate() {
        alive[i] = !rank[..pos].iter().any(|&j| alive[j] && overlap[j][i]);
    }
    let mut out: Vec<usize> = (0..n).filter(|&i| alive[i] && ps[i].confidence >= rho_c).collect();
    out.sort_unstable();
    out
}

fn criterion_nms() -> Verdict {
    let mut r = rng(2);
    let mut failures = 0;
    let mut kept_total = 0;
    for _ in 0..1000 {
        let k = r.random_range(0..=100);
        let centers: Vec<BBox<f64>> = (0..r.random_range(1..=6)).map(|_| rand_box(&mut r)).collect();
        let ps: Vec<Proposal<f64>> = (0..k)
            .map(|_| {
                let c = centers[r.random_range(0..centers.len())];
                Proposal::new(near(&mut r, &c, 0.3), r.random_range(0.0..1.0), r.random_range(0..3))
            })
            .collect();
        let (rho_iou, rho_c) = (r.random_range(0.0..1.0), r.random_range(0.0..1.0));
        let got = nms(&ps, rho_iou, rho_c);
        let mut idx: Vec<usize> = got
            .iter()
            .map(|q| ps.iter().position(|p| p == q).expect("output is a subset of the input"))
            .collect();
        idx.sort_unstable();
        kept_total += idx.len();
        if idx != nms_ref(&ps, rho_iou, rho_c) {
            failures += 1;
        }
    }
    ensure(
        failures == 0,
        format!("1000 instances, {failures} differ ({kept_total} proposals kept overall)"),
    )
}

// ---------------------------------------------------------------- gradients

fn rand_stochastic(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| r.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.into_iter().map(|v| v / s));
    }
    Tensor::from_vec(&[rows, cols], data).unwrap()
}

/// Worst relative error of a loss's input gradient against quad-precision
/// central differences.
fn input_grad_error<F, G>(x: Tensor<f64>, analytic: F, reference: G) -> f64
where
    F: Fn(&Tensor<f64>) -> LossGrad<f64>,
    G: Fn(&Tensor<Quad>) -> Quad,
{
    let mut params = ParamSet::new();
    let id = params.insert("x", x, ParamRole::Trainable).unwrap();
    grad_check_with_reference(
        &params,
        1e-6,
        |p| {
            let lg = analytic(p.get(id));
            let mut g = Grads::zeros_like(p);
            *g.get_mut(id) = lg.grad;
            Ok((lg.value, g))
        },
        |p: &ParamSet<Quad>| Ok(reference(p.get(id))),
    )
    .unwrap()
    .max_rel_error
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        bfnet: BfNetConfig {
            image_size: 16,
            stage_widths: vec![2, 3, 3],
            blocks_per_stage: 1,
            scale_channels: 2,
            scale_convs: 1,
            ..BfNetConfig::default()
        },
        r2s: R2sConfig {
            local: vec![4],
            expand: vec![6],
            fusion: vec![5],
            head_hidden: vec![4],
        },
    }
}

fn rand_image<T: Scalar>(r: &mut ChaCha8Rng, s: usize) -> Tensor<T> {
    Tensor::from_vec(&[3, s, s], (0..3 * s * s).map(|_| T::lit(r.random_range(-1.0..1.0))).collect()).unwrap()
}

fn r2s_loss<T: Scalar>(out: &HeadOutputs<T>, t: &TrainingTargets) -> r2s_core::Result<(T, HeadOutputs<T>)> {
    let a = loss_cls(&out.relabel, &t.classes)?;
    let b = loss_res(&out.rescore, &t.rescore)?;
    let c = loss_sup(&out.suppress, &t.background)?;
    let d = HeadOutputs {
        relabel: a.grad,
        rescore: b.grad,
        suppress: c.grad,
    };
    Ok((a.value + b.value + c.value, d))
}

/// Nudges trainable parameters off their initial values. Zero biases put
/// ReLU inputs exactly on the kink wherever the incoming activations are all
/// zero, where central differences see half a slope.
fn off_kinks(model: &mut Model<f64>, seed: u64) {
    let mut r = rng(seed);
    for (_, _, e) in model.params.iter_mut() {
        if e.trainable() {
            e.tensor.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.05..0.05));
        }
    }
}

/// Relabel, rescore and suppression losses through the whole network for a
/// batch of two images with `k = 5` rows each.
fn full_model_grad_error() -> (f64, usize) {
    let mut r = rng(4);
    let classes = two_classes();
    let k = 5;
    let mut model = Model::<f64>::new(toy_config(), classes.clone(), GridSpec::square(8).unwrap(), k, 4).unwrap();
    off_kinks(&mut model, 40);
    let imgs: Vec<Tensor<f64>> = (0..2).map(|_| rand_image(&mut r, 16)).collect();
    let rows: Vec<Vec<Proposal<f64>>> = (0..2)
        .map(|_| {
            (0..k)
                .map(|_| Proposal::new(rand_box(&mut r), r.random_range(0.0..1.0), r.random_range(0..2)))
                .collect()
        })
        .collect();
    let gts = [GroundTruth::new(rows[0][0].bbox, 1), GroundTruth::new(rows[1][3].bbox, 0)];
    let targets = TrainingTargets::concat(&[
        build_targets(&rows[0], k, &gts[..1], &classes, 0.5),
        build_targets(&rows[1], k - 1, &gts[1..], &classes, 0.5),
    ]);
    let qimgs: Vec<Tensor<Quad>> = imgs.iter().map(|i| i.cast()).collect();
    let qrows: Vec<Vec<Proposal<Quad>>> = rows.iter().map(|v| v.iter().map(|p| p.cast()).collect()).collect();
    let report = grad_check_with_reference(
        &model.params,
        1e-6,
        |p| {
            let m = Model {
                params: p.clone(),
                ..model.clone()
            };
            let batch: Vec<Sample<'_, f64>> = imgs.iter().zip(&rows).map(|(i, v)| Sample { image: i, rows: v }).collect();
            let (out, cache) = m.forward(&batch, &mut Ctx::train())?;
            let (loss, d) = r2s_loss(&out, &targets)?;
            let mut g = Grads::zeros_like(p);
            m.backward(&cache, &d, &mut g);
            Ok((loss, g))
        },
        |p: &ParamSet<Quad>| {
            let m = Model::with_params(model.config.clone(), model.classes.clone(), model.grid, model.k, p.clone())?;
            let batch: Vec<Sample<'_, Quad>> = qimgs.iter().zip(&qrows).map(|(i, v)| Sample { image: i, rows: v }).collect();
            let (out, _) = m.forward(&batch, &mut Ctx::train())?;
            Ok(r2s_loss(&out, &targets)?.0)
        },
    )
    .unwrap();
    (report.max_rel_error, report.coordinates)
}

/// Segmentation loss through the feature network of the same toy model.
fn seg_model_grad_error() -> f64 {
    let mut r = rng(5);
    let grid = GridSpec::square(8).unwrap();
    let mut model = Model::<f64>::new(toy_config(), two_classes(), grid, 5, 5).unwrap();
    off_kinks(&mut model, 50);
    let img = rand_image::<f64>(&mut r, 16);
    let qimg: Tensor<Quad> = img.cast();
    let gts = [
        GroundTruth::new(BBox::new(0.3, 0.6, 0.3, 0.4), 0),
        GroundTruth::new(BBox::new(0.7, 0.3, 0.2, 0.3), 1),
    ];
    let labels = r2s_core::bfnet::seg_targets(&gts, grid);
    grad_check_with_reference(
        &model.params,
        1e-6,
        |p| {
            let bf = &model.net.bfnet;
            let (features, cache) = bf.extract_image_features(p, &img)?;
            let (probs, seg_cache) = bf.seg_forward(p, &features)?;
            let loss = loss_seg(&probs, &labels)?;
            let mut g = Grads::zeros_like(p);
            let d_features = bf.seg_backward(p, &seg_cache, &loss.grad, &mut g);
            bf.backward_features(p, &cache, &d_features, &mut g);
            Ok((loss.value, g))
        },
        |p: &ParamSet<Quad>| {
            let bf = &model.net.bfnet;
            let (features, _) = bf.extract_image_features(p, &qimg)?;
            let (probs, _) = bf.seg_forward(p, &features)?;
            Ok(loss_seg(&probs, &labels)?.value)
        },
    )
    .unwrap()
    .max_rel_error
}

fn criterion_gradients() -> Verdict {
    let mut r = rng(3);
    let k = 5;
    let cls_targets: Vec<usize> = (0..k).map(|_| r.random_range(0..3)).collect();
    let cls = input_grad_error(
        rand_stochastic(&mut r, k, 3),
        |x| loss_cls(x, &cls_targets).unwrap(),
        |x| loss_cls(x, &cls_targets).unwrap().value,
    );
    let res_targets: Vec<RescoreTarget> = (0..k).map(|_| build_rescore_target(r.random_range(0.0..1.0))).collect();
    let res = input_grad_error(
        rand_stochastic(&mut r, k, 10),
        |x| loss_res(x, &res_targets).unwrap(),
        |x| loss_res(x, &res_targets).unwrap().value,
    );
    let bg: Vec<bool> = (0..k).map(|_| r.random_bool(0.5)).collect();
    let sup = input_grad_error(
        rand_stochastic(&mut r, k, 2),
        |x| loss_sup(x, &bg).unwrap(),
        |x| loss_sup(x, &bg).unwrap().value,
    );
    let cells = 64;
    let fg: Vec<f64> = (0..cells).map(|_| r.random_range(0.05..0.95)).collect();
    let probs = Tensor::from_vec(&[2, 8, 8], fg.iter().map(|p| 1.0 - p).chain(fg.iter().copied()).collect()).unwrap();
    let labels: Vec<u8> = (0..cells).map(|_| u8::from(r.random_bool(0.4))).collect();
    let seg = input_grad_error(probs, |x| loss_seg(x, &labels).unwrap(), |x| loss_seg(x, &labels).unwrap().value);
    let (full, coords) = full_model_grad_error();
    let seg_net = seg_model_grad_error();
    let worst = [cls, res, sup, seg, full, seg_net].into_iter().fold(0.0, f64::max);
    ensure(
        worst < 1e-4,
        format!(
            "max rel error: cls {cls:.1e}, res {res:.1e}, sup {sup:.1e}, seg {seg:.1e}, full model {full:.1e} over {coords} coords, seg through features {seg_net:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- equivariance

fn criterion_permutation() -> Verdict {
    let mut r = rng(6);
    let k = 30;
    let model = Model::<f32>::new(ModelConfig::default(), two_classes(), GridSpec::default(), k, 6).unwrap();
    let img = rand_image::<f32>(&mut r, model.config.bfnet.image_size);
    let rows: Vec<Proposal<f32>> = (0..k)
        .map(|_| Proposal::new(rand_box(&mut r), r.random_range(0.0..1.0), r.random_range(0..2)).cast())
        .collect();
    let (base, cache) = model.forward(&[Sample { image: &img, rows: &rows }], &mut Ctx::eval()).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<u32>>();
    let globals = (bits(&cache.bd.global), bits(&cache.id.global));
    let mut worst = 0.0f32;
    let mut global_diffs = 0;
    for _ in 0..100 {
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut r);
        let permuted: Vec<Proposal<f32>> = perm.iter().map(|&i| rows[i]).collect();
        let (out, c) = model
            .forward(
                &[Sample {
                    image: &img,
                    rows: &permuted,
                }],
                &mut Ctx::eval(),
            )
            .unwrap();
        for (a, b) in [
            (&out.relabel, &base.relabel),
            (&out.rescore, &base.rescore),
            (&out.suppress, &base.suppress),
        ] {
            worst = worst.max(a.max_abs_diff(&b.permute_rows(&perm)));
        }
        if (bits(&c.bd.global), bits(&c.id.global)) != globals {
            global_diffs += 1;
        }
    }
    ensure(
        worst < 1e-4 && global_diffs == 0,
        format!("100 permutations at k={k}: max head deviation {worst:.2e}, {global_diffs} global features differ"),
    )
}

// ---------------------------------------------------------------- average precision

/// Non-negative fraction kept in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Frac(u128, u128);

impl Frac {
    fn new(n: u128, d: u128) -> Frac {
        let g = gcd(n, d).max(1);
        Frac(n / g, d / g)
    }
    fn add(self, o: Frac) -> Frac {
        Frac::new(self.0 * o.1 + o.0 * self.1, self.1 * o.1)
    }
    fn sub(self, o: Frac) -> Frac {
        Frac::new(self.0 * o.1 - o.0 * self.1, self.1 * o.1)
    }
    fn mul(self, o: Frac) -> Frac {
        Frac::new(self.0 * o.0, self.1 * o.1)
    }
    fn gt(self, o: Frac) -> bool {
        self.0 * o.1 > o.0 * self.1
    }
    fn to_f64(self) -> f64 {
        self.0 as f64 / self.1 as f64
    }
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// AP by enumerating every confidence threshold: at each cut, the kept
/// detections are matched greedily (most confident first) to the unmatched
/// ground truth of highest IoU; each recall step is weighted by the best
/// precision reached at that recall or beyond. Exact rational arithmetic.
fn brute_force_ap(images: &[EvalImage], class_id: usize, thr: f64) -> Frac {
    let npos = images
        .iter()
        .flat_map(|im| &im.ground_truths)
        .filter(|g| g.class_id == class_id)
        .count() as u128;
    if npos == 0 {
        return Frac(0, 1);
    }
    let mut cuts: Vec<f64> = images
        .iter()
        .flat_map(|im| &im.detections)
        .filter(|d| d.class_id == class_id)
        .map(|d| d.confidence)
        .collect();
    cuts.sort_by(|a, b| b.total_cmp(a));
    let mut points: Vec<(Frac, Frac)> = Vec::new();
    for &t in &cuts {
        let mut kept: Vec<(usize, &Proposal<f64>)> = images
            .iter()
            .enumerate()
            .flat_map(|(i, im)| im.detections.iter().map(move |d| (i, d)))
            .filter(|(_, d)| d.class_id == class_id && d.confidence >= t)
            .collect();
        kept.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));
        let mut used = std::collections::HashSet::new();
        let mut tp = 0u128;
        for (i, d) in &kept {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in images[*i].ground_truths.iter().enumerate() {
                let v = iou_ref(&gt.bbox, &d.bbox);
                if gt.class_id == class_id && !used.contains(&(*i, g)) && v >= thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                used.insert((*i, g));
                tp += 1;
            }
        }
        points.push((Frac::new(tp, npos), Frac::new(tp, kept.len() as u128)));
    }
    let mut ap = Frac(0, 1);
    let mut prev = Frac(0, 1);
    let mut recalls: Vec<Frac> = points.iter().map(|p| p.0).collect();
    recalls.sort_by(|a, b| (a.0 * b.1).cmp(&(b.0 * a.1)));
    recalls.dedup();
    for r in recalls {
        if r.gt(prev) {
            let best = points
                .iter()
                .filter(|(r2, _)| !r.gt(*r2))
                .map(|(_, p)| *p)
                .fold(Frac(0, 1), |m, p| if p.gt(m) { p } else { m });
            ap = ap.add(r.sub(prev).mul(best));
            prev = r;
        }
    }
    ap
}

fn one_image(gts: Vec<GroundTruth<f64>>, dets: Vec<Proposal<f64>>) -> Vec<EvalImage> {
    vec![EvalImage {
        image_id: "a".into(),
        ground_truths: gts,
        detections: dets,
    }]
}

/// Float results must agree with the exact rational value to 1e-12; any
/// difference in the enumeration itself would be at least 1/400.
const AP_TOLERANCE: f64 = 1e-12;

fn criterion_average_precision() -> Verdict {
    let g = |cx: f64| GroundTruth::new(BBox::new(cx, 0.5, 0.1, 0.2), 0);
    let hit = |gt: &GroundTruth<f64>, c: f64| Proposal::new(gt.bbox, c, 0);
    let miss = |c: f64| Proposal::new(BBox::new(0.5, 0.9, 0.05, 0.05), c, 0);
    let (a, b, c) = (g(0.2), g(0.5), g(0.8));
    let fixtures: Vec<(&str, Vec<EvalImage>, Frac)> = vec![
        ("perfect", one_image(vec![a], vec![hit(&a, 0.9)]), Frac(1, 1)),
        ("no detections", one_image(vec![a], vec![]), Frac(0, 1)),
        (
            "5/6",
            one_image(vec![a, b], vec![hit(&a, 0.9), miss(0.8), hit(&b, 0.7)]),
            Frac(5, 6),
        ),
        ("late hit", one_image(vec![a], vec![miss(0.9), hit(&a, 0.8)]), Frac(1, 2)),
        ("duplicate", one_image(vec![a, b], vec![hit(&a, 0.9), hit(&a, 0.8)]), Frac(1, 2)),
        (
            "three gts",
            one_image(vec![a, b, c], vec![hit(&a, 0.9), miss(0.8), miss(0.7), hit(&b, 0.6)]),
            Frac(1, 2),
        ),
    ];
    let mut bad = Vec::new();
    for (name, images, want) in &fixtures {
        let got = average_precision(images, 0, 0.5);
        if (got - want.to_f64()).abs() > AP_TOLERANCE || brute_force_ap(images, 0, 0.5) != *want {
            bad.push(format!("{name}: {got}"));
        }
    }
    let mut r = rng(7);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n_images = r.random_range(1..=3);
        let mut images = Vec::new();
        let mut budget = r.random_range(1..=20usize);
        for i in 0..n_images {
            let gts: Vec<GroundTruth<f64>> = (0..r.random_range(0..=4))
                .map(|_| GroundTruth::new(rand_box(&mut r), r.random_range(0..2)))
                .collect();
            let n = if i + 1 == n_images { budget } else { r.random_range(0..=budget) };
            budget -= n;
            let dets = (0..n)
                .map(|_| {
                    let bbox = match gts.choose(&mut r) {
                        Some(gt) if r.random_bool(0.7) => near(&mut r, &gt.bbox, 0.25),
                        _ => rand_box(&mut r),
                    };
                    Proposal::new(bbox, r.random_range(0.0..1.0), r.random_range(0..2))
                })
                .collect();
            images.push(EvalImage {
                image_id: format!("i{i}"),
                ground_truths: gts,
                detections: dets,
            });
        }
        for class in 0..2 {
            let d = (average_precision(&images, class, 0.5) - brute_force_ap(&images, class, 0.5).to_f64()).abs();
            worst = worst.max(d);
        }
    }
    ensure(
        bad.is_empty() && worst <= AP_TOLERANCE,
        format!(
            "{} fixtures ({} wrong {bad:?}), 200 random instances, max deviation {worst:.1e}",
            fixtures.len(),
            bad.len()
        ),
    )
}

// ---------------------------------------------------------------- benchmark

const BENCH_SEED: u64 = 1;

/// Synthetic benchmark run shared by the refinement, ablation and
/// calibration criteria.
struct Benchmark {
    elapsed: Duration,
    baseline: MetricsReport,
    /// One report per head combination, in [`HeadToggles::grid`] order.
    variants: Vec<(HeadToggles, MetricsReport)>,
    calibration_refined: f64,
    calibration_raw: f64,
    rows: usize,
}

fn bench_model_config() -> ModelConfig {
    ModelConfig {
        bfnet: BfNetConfig {
            image_size: 64,
            stage_widths: vec![8, 16, 32],
            blocks_per_stage: 1,
            scale_channels: 16,
            scale_convs: 1,
            ..BfNetConfig::default()
        },
        r2s: R2sConfig {
            local: vec![32, 32],
            expand: vec![64, 256],
            fusion: vec![128, 64],
            head_hidden: vec![64],
        },
    }
}

fn benchmark() -> &'static Benchmark {
    static B: OnceLock<Benchmark> = OnceLock::new();
    B.get_or_init(run_benchmark)
}

fn run_benchmark() -> Benchmark {
    let start = Instant::now();
    let ds = synth_dataset(&SynthConfig {
        seed: BENCH_SEED,
        ..SynthConfig::default()
    })
    .unwrap();
    let noise = NoiseConfig {
        label_flip_prob: 0.3,
        seed: BENCH_SEED + 1,
        ..NoiseConfig::default()
    };
    let props: Vec<ProposalRecord> = ds.records.iter().map(|r| synth_proposals(r, &noise, &ds.classes)).collect();
    let (train_r, test_r) = split_train_test(&ds.records, 0.75, SplitMode::Ordered).unwrap();
    let (fit_r, held_r) = split_train_test(&train_r, 0.9, SplitMode::Ordered).unwrap();
    let mc = bench_model_config();
    let load = |records| prepare_images::<f32>(&ds, records, Some(&props), &mc.bfnet).unwrap();
    let (fit, held, test) = (load(&fit_r), load(&held_r), load(&test_r));
    let grid = GridSpec::square(16).unwrap();
    let k = 30;
    let config = TrainConfig {
        epochs: 60,
        batch_size: 16,
        k,
        grid,
        seed: BENCH_SEED + 3,
        ..TrainConfig::default()
    };
    let model = Model::<f32>::new(mc.clone(), ds.classes.clone(), grid, k, BENCH_SEED + 2).unwrap();
    let model = pretrain_bfnet(model, &fit, &held, &config).unwrap().model;
    let model = train_r2snet(model, &fit, &held, &config).unwrap().model;

    let mut base = Vec::new();
    let grid_toggles = HeadToggles::grid();
    let mut per_variant: Vec<Vec<EvalImage>> = vec![Vec::new(); grid_toggles.len()];
    let (mut refined_err, mut raw_err, mut rows_seen) = (0.0, 0.0, 0usize);
    for img in &test {
        let proposals = img.proposals.as_ref().unwrap();
        let gts: Vec<GroundTruth<f64>> = img.gts.iter().map(GroundTruth::cast).collect();
        let raw: Vec<Proposal<f64>> = proposals.iter().map(Proposal::cast).collect();
        let eval = |detections| EvalImage {
            image_id: img.id.clone(),
            ground_truths: gts.clone(),
            detections,
        };
        base.push(eval(nms(&raw, 0.5, 0.75)));
        for (h, dst) in grid_toggles.iter().zip(per_variant.iter_mut()) {
            let policy = RefinementPolicy {
                heads: *h,
                ..RefinementPolicy::default()
            };
            let refined = model.refine(&img.image, proposals, &policy).unwrap();
            dst.push(eval(refined.iter().map(Proposal::cast).collect()));
        }
        let (rows, _) = image_rows(&model, img, 0.5).unwrap();
        let real = proposals.len().min(k);
        let (out, _) = model
            .forward(
                &[Sample {
                    image: &img.image,
                    rows: &rows,
                }],
                &mut Ctx::eval(),
            )
            .unwrap();
        for (i, m) in match_to_gt(&rows[..real], &img.gts).iter().enumerate() {
            let truth = m.iou as f64;
            refined_err += (rescore_confidence(out.rescore.row(i)) - truth).abs();
            raw_err += (rows[i].confidence as f64 - truth).abs();
            rows_seen += 1;
        }
    }
    let report = |images: &[EvalImage]| compute_indicators(images, &ds.classes, 0.5);
    Benchmark {
        elapsed: start.elapsed(),
        baseline: report(&base),
        variants: grid_toggles.iter().zip(&per_variant).map(|(h, v)| (*h, report(v))).collect(),
        calibration_refined: refined_err / rows_seen as f64,
        calibration_raw: raw_err / rows_seen as f64,
        rows: rows_seen,
    }
}

impl Benchmark {
    fn variant(&self, relabel: bool, rescore: bool, suppress: bool) -> &MetricsReport {
        let want = HeadToggles {
            relabel,
            rescore,
            suppress,
        };
        &self
            .variants
            .iter()
            .find(|(h, _)| *h == want)
            .expect("all combinations evaluated")
            .1
    }
}

fn summary(r: &MetricsReport) -> String {
    format!("mAP {:.1} BFD {:.1}", 100.0 * r.map, 100.0 * r.bfd_rate)
}

fn criterion_refinement() -> Verdict {
    let b = benchmark();
    let refined = b.variant(true, true, true);
    ensure(
        refined.map >= b.baseline.map + 0.05 && refined.bfd_rate < b.baseline.bfd_rate,
        format!(
            "baseline {} -> refined {} (training and evaluation {:.0?})",
            summary(&b.baseline),
            summary(refined),
            b.elapsed
        ),
    )
}

fn criterion_ablation() -> Verdict {
    let b = benchmark();
    let none = b.variant(false, false, false);
    let all = b.variant(true, true, true);
    let singles = [
        ("relabel", b.variant(true, false, false)),
        ("rescore", b.variant(false, true, false)),
        ("suppress", b.variant(false, false, true)),
    ];
    let relabel_bfd = singles[0].1.bfd_rate < none.bfd_rate;
    let all_competitive = singles.iter().all(|(_, r)| all.map >= r.map - 0.02);
    let listed: Vec<String> = singles.iter().map(|(n, r)| format!("{n} {}", summary(r))).collect();
    ensure(
        relabel_bfd && all_competitive,
        format!("none {}; {}; all {}", summary(none), listed.join("; "), summary(all)),
    )
}

fn criterion_calibration() -> Verdict {
    let b = benchmark();
    ensure(
        b.calibration_refined < b.calibration_raw,
        format!(
            "mean |confidence - IoU| over {} test rows: rescored {:.3}, raw {:.3}",
            b.rows, b.calibration_refined, b.calibration_raw
        ),
    )
}

// ---------------------------------------------------------------- budget

fn criterion_parameters() -> Verdict {
    let model = Model::<f32>::new(ModelConfig::default(), two_classes(), GridSpec::default(), 30, 0).unwrap();
    let c = param_count(&model.params);
    ensure(
        (6_000_000..=10_000_000).contains(&c.total()),
        format!(
            "{} parameters ({} trainable, {} frozen, {} buffers)",
            c.total(),
            c.trainable,
            c.frozen,
            c.buffers
        ),
    )
}

// ---------------------------------------------------------------- determinism

fn small_model_config() -> ModelConfig {
    ModelConfig {
        bfnet: BfNetConfig {
            image_size: 32,
            stage_widths: vec![4, 8, 8],
            blocks_per_stage: 1,
            scale_channels: 4,
            scale_convs: 1,
            ..BfNetConfig::default()
        },
        r2s: R2sConfig {
            local: vec![16],
            expand: vec![32],
            fusion: vec![16],
            head_hidden: vec![16],
        },
    }
}

fn param_bits(p: &ParamSet<f32>) -> Vec<(String, Vec<u32>)> {
    p.iter()
        .map(|(_, n, e)| (n.to_string(), e.tensor.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn criterion_determinism() -> Verdict {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let ds = synth_dataset(&SynthConfig {
            images: 12,
            seed: 9,
            ..SynthConfig::default()
        })
        .unwrap();
        let noise = NoiseConfig {
            seed: 10,
            ..NoiseConfig::default()
        };
        let props: Vec<ProposalRecord> = ds.records.iter().map(|r| synth_proposals(r, &noise, &ds.classes)).collect();
        let mc = small_model_config();
        let images: Vec<TrainImage<f32>> = prepare_images(&ds, &ds.records, Some(&props), &mc.bfnet).unwrap();
        let (fit, held) = images.split_at(10);
        let grid = GridSpec::square(8).unwrap();
        let config = TrainConfig {
            epochs: 4,
            batch_size: 4,
            k: 10,
            grid,
            seed: 11,
            ..TrainConfig::default()
        };
        let run = || {
            let model = Model::<f32>::new(mc.clone(), ds.classes.clone(), grid, 10, 12).unwrap();
            let a = pretrain_bfnet(model, fit, held, &config).unwrap();
            let b = train_r2snet(a.model, fit, held, &config).unwrap();
            let history: Vec<(u64, Option<u64>)> =
                a.history.iter().chain(&b.history).map(|e| (e.train.to_bits(), e.heldout.map(f64::to_bits))).collect();
            (history, b.model)
        };
        let (h1, m1) = run();
        let (h2, m2) = run();
        let same_history = h1 == h2;
        let same_params = param_bits(&m1.params) == param_bits(&m2.params);

        let dir = tempfile::tempdir().unwrap();
        Checkpoint::from_model(&m1).save(dir.path()).unwrap();
        let loaded = Checkpoint::<f32>::load(dir.path()).unwrap().model().unwrap();
        let round_trip = param_bits(&loaded.params) == param_bits(&m1.params);
        let policy = RefinementPolicy::default();
        let mut refine_diffs = 0;
        let mut head_diffs = 0;
        let mut detections = 0;
        let heads = |m: &Model<f32>, img: &TrainImage<f32>| {
            let (rows, _) = image_rows(m, img, 0.5).unwrap();
            let (o, _) = m.forward(&[Sample { image: &img.image, rows: &rows }], &mut Ctx::eval()).unwrap();
            [o.relabel, o.rescore, o.suppress].map(|t| t.data().iter().map(|v| v.to_bits()).collect::<Vec<u32>>())
        };
        for img in &images {
            if heads(&m1, img) != heads(&loaded, img) {
                head_diffs += 1;
            }
            let p = img.proposals.as_deref().unwrap();
            let a = m1.refine(&img.image, p, &policy).unwrap();
            let b = loaded.refine(&img.image, p, &policy).unwrap();
            detections += a.len();
            if a != b {
                refine_diffs += 1;
            }
        }
        ensure(
            same_history && same_params && round_trip && head_diffs == 0 && refine_diffs == 0,
            format!(
                "{} loss epochs identical: {same_history}, weights identical: {same_params}, checkpoint bit-exact: {round_trip}, reloaded heads differ on {head_diffs} and refine on {refine_diffs} of {} images ({detections} detections)",
                h1.len(),
                images.len()
            ),
        )
    })
}

// ---------------------------------------------------------------- driver

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    check: fn() -> Verdict,
}

const fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

const CRITERIA: [Criterion; 10] = [
    Criterion {
        id: 1,
        name: "mask oracle",
        budget: Duration::from_secs(10),
        check: criterion_masks,
    },
    Criterion {
        id: 2,
        name: "nms oracle",
        budget: Duration::from_secs(10),
        check: criterion_nms,
    },
    Criterion {
        id: 3,
        name: "gradient checks",
        budget: minutes(5),
        check: criterion_gradients,
    },
    Criterion {
        id: 4,
        name: "permutation equivariance",
        budget: minutes(1),
        check: criterion_permutation,
    },
    Criterion {
        id: 5,
        name: "average precision oracle",
        budget: Duration::from_secs(30),
        check: criterion_average_precision,
    },
    Criterion {
        id: 6,
        name: "end-to-end refinement",
        budget: minutes(30),
        check: criterion_refinement,
    },
    Criterion {
        id: 7,
        name: "head ablation",
        budget: minutes(90),
        check: criterion_ablation,
    },
    Criterion {
        id: 8,
        name: "parameter budget",
        budget: Duration::from_secs(5),
        check: criterion_parameters,
    },
    Criterion {
        id: 9,
        name: "determinism and persistence",
        budget: minutes(5),
        check: criterion_determinism,
    },
    Criterion {
        id: 10,
        name: "rescoring calibration",
        budget: minutes(30),
        check: criterion_calibration,
    },
];

#[test]
fn acceptance_criteria() {
    // Written straight to stdout so the lines show even when output is captured.
    let mut out = std::io::stdout();
    out.write_all(b"\n").unwrap();
    let mut failed = Vec::new();
    for c in &CRITERIA {
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(c.check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let (pass, detail) = match verdict {
            Ok(d) if elapsed <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {:?} budget", c.budget)),
            Err(d) => (false, d),
        };
        let line = format!(
            "{} criterion {:>2} {:<28} [{:>8.1?}] {detail}\n",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            elapsed
        );
        out.write_all(line.as_bytes()).unwrap();
        out.flush().unwrap();
        if !pass {
            failed.push(c.id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
