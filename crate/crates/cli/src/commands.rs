use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use r2s_core::bfnet::GridSpec;
use r2s_core::datagen::{
    load_dataset, load_proposals, parse_proposals, save_dataset, save_proposals, split_train_test, synth_dataset, synth_proposals_detailed,
    Dataset, DatasetRecord, ProposalRecord, SplitMode, SynthStats,
};
use r2s_core::geometry::{nms, Proposal};
use r2s_core::metrics::{
    compute_indicators, emit_report, parse_report_csv, pr_curve, report_rows, rows_to_csv, summary_delta, summary_row, EvalImage,
    MetricsReport, ReportFormat, ReportRow,
};
use r2s_core::r2snet::{HeadToggles, Model, RefinementPolicy};
use r2s_core::training::{prepare_images, read_manifest, Checkpoint, EpochLoss, Pass, TrainImage, Trainer};
use r2s_core::{DType, Error, Precision, Storable};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::svg::{line_chart, Series};
use crate::{EvalArgs, FormatArg, GenArgs, PassArg, PrecisionArg, RefineArgs, ShapeArgs, SplitArg, TrainArgs};

/// Image ids of each side of the train/test split.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitManifest {
    train: Vec<String>,
    test: Vec<String>,
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn to_json<S: Serialize>(v: &S) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes") + "\n"
}

pub fn gen(mut cfg: RunConfig, a: &GenArgs) -> CliResult<()> {
    if let Some(n) = a.images {
        cfg.synth.images = n;
    }
    if let Some(s) = a.seed {
        cfg.synth.seed = s;
        cfg.noise.seed = s.wrapping_add(1);
    }
    let n = &mut cfg.noise;
    n.label_flip_prob = a.flip_prob.unwrap_or(n.label_flip_prob);
    n.jitter_sigma = a.jitter.unwrap_or(n.jitter_sigma);
    n.confidence_noise_sigma = a.conf_noise.unwrap_or(n.confidence_noise_sigma);
    n.n_per_gt = a.per_gt.unwrap_or(n.n_per_gt);
    n.n_background_clusters = a.clusters.unwrap_or(n.n_background_clusters);
    cfg.split.train_fraction = a.train_fraction.unwrap_or(cfg.split.train_fraction);
    cfg.validate()?;

    let ds = synth_dataset(&cfg.synth)?;
    let out: Vec<(ProposalRecord, SynthStats)> = ds
        .records
        .par_iter()
        .map(|r| synth_proposals_detailed(r, &cfg.noise, &ds.classes))
        .collect();
    let mut stats = SynthStats::default();
    out.iter().for_each(|(_, s)| stats.add(s));
    let proposals: Vec<ProposalRecord> = out.into_iter().map(|(p, _)| p).collect();
    let ids: Vec<String> = ds.records.iter().map(|r| r.image_id.clone()).collect();
    let (train, test) = split_train_test(&ids, cfg.split.train_fraction, cfg.split.mode)?;

    create_dir(&cfg.out_dir)?;
    save_dataset(cfg.dataset_path(), &ds)?;
    save_proposals(cfg.proposals_path(), &proposals, &ds.classes)?;
    write(&cfg.split_path(), &to_json(&SplitManifest { train, test }))?;
    write(&cfg.artifact("_config.json"), &to_json(&cfg))?;

    let gts: usize = ds.records.iter().map(|r| r.ground_truths.len()).sum();
    println!("images {}", ds.records.len());
    println!("ground truths {gts}");
    println!(
        "proposals {} (object {}, background {})",
        stats.object_proposals + stats.background_proposals,
        stats.object_proposals,
        stats.background_proposals
    );
    println!("flip fraction {:.4}", stats.flip_fraction());
    Ok(())
}

/// Dataset, proposals indexed by image id, and the split.
struct Inputs {
    ds: Dataset,
    proposals: Vec<ProposalRecord>,
    split: SplitManifest,
}

fn load_inputs(cfg: &RunConfig, need_proposals: bool) -> CliResult<Inputs> {
    let ds = load_dataset(cfg.dataset_path())?;
    let proposals = if need_proposals {
        let p = load_proposals(cfg.proposals_path(), &ds.classes)?;
        check_known_ids(&ds, p.iter().map(|r| r.image_id.as_str()), "proposal file")?;
        p
    } else {
        Vec::new()
    };
    let split_path = cfg.split_path();
    let split = if split_path.exists() {
        let text = fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
        let s: SplitManifest = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", split_path.display())))?;
        check_known_ids(&ds, s.train.iter().chain(&s.test).map(String::as_str), "split manifest")?;
        s
    } else {
        let ids: Vec<String> = ds.records.iter().map(|r| r.image_id.clone()).collect();
        let (train, test) = split_train_test(&ids, cfg.split.train_fraction, cfg.split.mode)?;
        SplitManifest { train, test }
    };
    Ok(Inputs { ds, proposals, split })
}

fn check_known_ids<'a>(ds: &Dataset, ids: impl Iterator<Item = &'a str>, what: &str) -> CliResult<()> {
    let known: HashSet<&str> = ds.records.iter().map(|r| r.image_id.as_str()).collect();
    let unknown: Vec<&str> = ids.filter(|id| !known.contains(id)).collect();
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{what} names images missing from the dataset: {}",
            unknown.join(", ")
        )))
    }
}

impl Inputs {
    fn records(&self, ids: &[String]) -> Vec<DatasetRecord> {
        let by_id: HashMap<&str, &DatasetRecord> = self.ds.records.iter().map(|r| (r.image_id.as_str(), r)).collect();
        ids.iter().map(|id| by_id[id.as_str()].clone()).collect()
    }

    fn selected(&self, split: SplitArg) -> Vec<DatasetRecord> {
        match split {
            SplitArg::Train => self.records(&self.split.train),
            SplitArg::Test => self.records(&self.split.test),
            SplitArg::All => self.ds.records.clone(),
        }
    }
}

fn apply_shape(cfg: &mut RunConfig, s: &ShapeArgs) -> CliResult<()> {
    if let Some(k) = s.k {
        cfg.train.k = k;
    }
    if let Some(g) = s.grid {
        cfg.train.grid = GridSpec::square(g)?;
    }
    Ok(())
}

pub fn train(mut cfg: RunConfig, a: &TrainArgs) -> CliResult<()> {
    apply_shape(&mut cfg, &a.shape)?;
    let t = &mut cfg.train;
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.learning_rate = a.lr.unwrap_or(t.learning_rate);
    t.seed = a.seed.unwrap_or(t.seed);
    if let Some(p) = a.precision {
        t.precision = match p {
            PrecisionArg::Fast => Precision::Fast,
            PrecisionArg::Test => Precision::Test,
        };
    }
    for term in &a.disable_loss {
        match term.as_str() {
            "cls" => t.loss_terms.cls = false,
            "res" => t.loss_terms.res = false,
            "sup" => t.loss_terms.sup = false,
            other => return Err(CliError::Usage(format!("unknown loss term {other:?} (expected cls, res or sup)"))),
        }
    }
    cfg.validate()?;
    match cfg.train.precision {
        Precision::Fast => train_typed::<f32>(&cfg, a),
        Precision::Test => train_typed::<f64>(&cfg, a),
    }
}

fn train_typed<T: Storable>(cfg: &RunConfig, a: &TrainArgs) -> CliResult<()> {
    let inputs = load_inputs(cfg, a.pass != PassArg::Bfnet)?;
    let train_records = inputs.records(&inputs.split.train);
    let (fit, held) = if cfg.split.heldout_fraction > 0.0 && train_records.len() >= 2 {
        split_train_test(&train_records, 1.0 - cfg.split.heldout_fraction, SplitMode::Ordered)?
    } else {
        (train_records, Vec::new())
    };
    let props = (a.pass != PassArg::Bfnet).then_some(inputs.proposals.as_slice());
    let fit: Vec<TrainImage<T>> = prepare_images(&inputs.ds, &fit, props, &cfg.model.bfnet)?;
    let held: Vec<TrainImage<T>> = prepare_images(&inputs.ds, &held, props, &cfg.model.bfnet)?;
    create_dir(&cfg.out_dir)?;
    write(&cfg.artifact("_config.json"), &to_json(cfg))?;
    let tc = cfg.train;
    let mut curves: Vec<(String, Vec<EpochLoss>)> = Vec::new();

    let pretrained = if a.pass == PassArg::Full {
        None
    } else {
        let model = Model::<T>::new(cfg.model.clone(), inputs.ds.classes.clone(), tc.grid, tc.k, tc.seed)?;
        let (model, history) = run_pass(cfg, model, Pass::Bfnet, &fit, &held)?;
        save_trained(&model, &history, &cfg.artifact("_bfnet"))?;
        write_loss_csv(&cfg.artifact("_bfnet_loss.csv"), &history)?;
        curves.push(("bfnet".into(), history));
        Some(model)
    };
    if a.pass != PassArg::Bfnet {
        let init = match pretrained {
            Some(m) => m,
            None => {
                let dir = a.init.clone().unwrap_or_else(|| cfg.artifact("_bfnet"));
                let ck = load_checkpoint::<T>(&dir)?;
                ck.check_compatible(tc.k, tc.grid, &inputs.ds.classes)?;
                ck.model()?
            }
        };
        let (model, history) = run_pass(cfg, init, Pass::Full, &fit, &held)?;
        save_trained(&model, &history, &cfg.artifact("_ckpt"))?;
        write_loss_csv(&cfg.artifact("_full_loss.csv"), &history)?;
        curves.push(("full".into(), history));
    }
    if a.svg {
        let series: Vec<Series> = curves
            .iter()
            .map(|(name, h)| Series {
                label: name,
                points: h.iter().map(|e| (e.epoch as f64, e.train)).collect(),
            })
            .collect();
        write(
            &cfg.artifact("_loss.svg"),
            &line_chart("training loss", "epoch", "loss", &series, false),
        )?;
    }
    Ok(())
}

/// Runs one pass epoch by epoch, writing a diagnostic dump on numeric failure.
fn run_pass<T: Storable>(
    cfg: &RunConfig,
    model: Model<T>,
    pass: Pass,
    fit: &[TrainImage<T>],
    held: &[TrainImage<T>],
) -> CliResult<(Model<T>, Vec<EpochLoss>)> {
    let mut trainer = Trainer::new(model, cfg.train, pass)?;
    let name = match pass {
        Pass::Bfnet => "bfnet",
        Pass::Full => "full",
    };
    while !trainer.is_finished() {
        match trainer.run_epoch(fit, held) {
            Ok(e) => match e.heldout {
                Some(h) => eprintln!("[{name}] epoch {:>3}  train {:.6}  heldout {h:.6}", e.epoch, e.train),
                None => eprintln!("[{name}] epoch {:>3}  train {:.6}", e.epoch, e.train),
            },
            Err(Error::Numeric(message)) => {
                let dump = cfg.artifact("_numeric_failure.json");
                let report = serde_json::json!({
                    "pass": pass,
                    "failed_epoch": trainer.epochs_done() + 1,
                    "message": message,
                    "history": trainer.history,
                    "train_config": cfg.train,
                });
                write(&dump, &to_json(&report))?;
                return Err(CliError::Numeric { message, dump });
            }
            Err(e) => return Err(e.into()),
        }
    }
    eprintln!("[{name}] best epoch {}", trainer.best_epoch);
    let out = trainer.into_outcome();
    Ok((out.model, out.history))
}

fn save_trained<T: Storable>(model: &Model<T>, history: &[EpochLoss], dir: &Path) -> CliResult<()> {
    let mut ck = Checkpoint::from_model(model);
    ck.manifest.epoch = history.len();
    ck.manifest.losses = history.to_vec();
    ck.save(dir)?;
    Ok(())
}

fn load_checkpoint<T: Storable>(dir: &Path) -> CliResult<Checkpoint<T>> {
    Ok(Checkpoint::<T>::load(dir)?)
}

fn write_loss_csv(path: &Path, history: &[EpochLoss]) -> CliResult<()> {
    let mut s = String::from("epoch,train,heldout\n");
    for e in history {
        let h = e.heldout.map_or(String::new(), |v| format!("{v:.9e}"));
        s.push_str(&format!("{},{:.9e},{h}\n", e.epoch, e.train));
    }
    write(path, &s)
}

fn parse_heads(names: &[String]) -> CliResult<HeadToggles> {
    let mut h = HeadToggles::NONE;
    for n in names {
        match n.as_str() {
            "relabel" => h.relabel = true,
            "rescore" => h.rescore = true,
            "suppress" => h.suppress = true,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown head {other:?} (expected relabel, rescore or suppress)"
                )))
            }
        }
    }
    Ok(h)
}

pub fn refine(mut cfg: RunConfig, a: &RefineArgs) -> CliResult<()> {
    apply_shape(&mut cfg, &a.shape)?;
    let p = &mut cfg.policy;
    p.nms_rho_iou = a.rho_iou.unwrap_or(p.nms_rho_iou);
    p.nms_rho_c = a.rho_c.unwrap_or(p.nms_rho_c);
    p.suppress_threshold = a.suppress_threshold.unwrap_or(p.suppress_threshold);
    if let Some(h) = &a.heads {
        p.heads = parse_heads(h)?;
    }
    cfg.validate()?;
    let inputs = load_inputs(&cfg, true)?;
    let records = inputs.selected(a.split);
    let by_id: HashMap<&str, &ProposalRecord> = inputs.proposals.iter().map(|p| (p.image_id.as_str(), p)).collect();
    let detections = if a.baseline {
        records
            .iter()
            .map(|r| ProposalRecord {
                image_id: r.image_id.clone(),
                proposals: by_id
                    .get(r.image_id.as_str())
                    .map_or_else(Vec::new, |p| nms(&p.proposals, cfg.baseline.rho_iou, cfg.baseline.rho_c)),
            })
            .collect()
    } else {
        let dir = a.checkpoint.clone().unwrap_or_else(|| cfg.artifact("_ckpt"));
        let policies = [cfg.policy];
        match read_manifest(&dir)?.dtype {
            DType::F32 => refine_typed::<f32>(&cfg, &inputs, &records, &dir, &policies)?,
            DType::F64 => refine_typed::<f64>(&cfg, &inputs, &records, &dir, &policies)?,
        }
        .pop()
        .expect("one policy")
    };
    let output = a
        .output
        .clone()
        .unwrap_or_else(|| cfg.artifact(if a.baseline { "_baseline.jsonl" } else { "_detections.jsonl" }));
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_proposals(&output, &detections, &inputs.ds.classes)?;
    let n: usize = detections.iter().map(|d| d.proposals.len()).sum();
    println!("{} images, {n} detections -> {}", detections.len(), output.display());
    Ok(())
}

/// Refined detections of `records` under each policy. Images without a
/// proposal record yield no detections.
fn refine_typed<T: Storable>(
    cfg: &RunConfig,
    inputs: &Inputs,
    records: &[DatasetRecord],
    dir: &Path,
    policies: &[RefinementPolicy],
) -> CliResult<Vec<Vec<ProposalRecord>>> {
    let ck = load_checkpoint::<T>(dir)?;
    ck.check_compatible(cfg.train.k, cfg.train.grid, &inputs.ds.classes)?;
    let model = ck.model()?;
    let images: Vec<TrainImage<T>> = prepare_images(&inputs.ds, records, Some(&inputs.proposals), &model.config.bfnet)?;
    let per_image: Vec<Vec<Vec<Proposal<f64>>>> = images
        .par_iter()
        .map(|img| {
            let props = img.proposals.as_deref().unwrap_or_default();
            policies
                .iter()
                .map(|p| Ok(model.refine(&img.image, props, p)?.iter().map(Proposal::cast).collect()))
                .collect::<Result<Vec<_>, Error>>()
        })
        .collect::<Result<_, Error>>()?;
    Ok((0..policies.len())
        .map(|i| {
            images
                .iter()
                .zip(&per_image)
                .map(|(img, d)| ProposalRecord {
                    image_id: img.id.clone(),
                    proposals: d[i].clone(),
                })
                .collect()
        })
        .collect())
}

fn eval_images(ds: &Dataset, detections: &[ProposalRecord]) -> CliResult<Vec<EvalImage>> {
    check_known_ids(ds, detections.iter().map(|d| d.image_id.as_str()), "detection file")?;
    Ok(detections
        .iter()
        .map(|d| EvalImage {
            image_id: d.image_id.clone(),
            ground_truths: ds.record(&d.image_id).expect("checked").ground_truths.clone(),
            detections: d.proposals.clone(),
        })
        .collect())
}

pub fn eval(mut cfg: RunConfig, a: &EvalArgs) -> CliResult<()> {
    if let Some(files) = &a.compare {
        return compare(&files[0], &files[1]);
    }
    apply_shape(&mut cfg, &a.shape)?;
    cfg.iou_threshold = a.iou_threshold.unwrap_or(cfg.iou_threshold);
    cfg.validate()?;
    let inputs = load_inputs(&cfg, a.ablate.is_some())?;
    let mut variants: Vec<(String, Vec<EvalImage>)> = Vec::new();
    if let Some(heads) = &a.ablate {
        let listed = parse_heads(heads)?;
        let grid: Vec<HeadToggles> = HeadToggles::grid()
            .into_iter()
            .filter(|h| (listed.relabel || h.relabel) && (listed.rescore || h.rescore) && (listed.suppress || h.suppress))
            .collect();
        let policies: Vec<RefinementPolicy> = grid.iter().map(|&h| RefinementPolicy { heads: h, ..cfg.policy }).collect();
        let records = inputs.selected(SplitArg::Test);
        let dir = a.checkpoint.clone().unwrap_or_else(|| cfg.artifact("_ckpt"));
        let outs = match read_manifest(&dir)?.dtype {
            DType::F32 => refine_typed::<f32>(&cfg, &inputs, &records, &dir, &policies)?,
            DType::F64 => refine_typed::<f64>(&cfg, &inputs, &records, &dir, &policies)?,
        };
        for (h, dets) in grid.iter().zip(outs) {
            variants.push((h.label(), eval_images(&inputs.ds, &dets)?));
        }
    } else {
        if a.detections.is_empty() {
            return Err(CliError::Usage("eval needs --detections, --ablate or --compare".into()));
        }
        for path in &a.detections {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let dets = parse_proposals(&text, &inputs.ds.classes)?;
            let name = path
                .file_stem()
                .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
            variants.push((name, eval_images(&inputs.ds, &dets)?));
        }
    }
    let reports: Vec<(String, MetricsReport)> = variants
        .iter()
        .map(|(n, ims)| (n.clone(), compute_indicators(ims, &inputs.ds.classes, cfg.iou_threshold)))
        .collect();
    let output = a.output.clone().unwrap_or_else(|| {
        cfg.artifact(match a.format {
            FormatArg::Csv => "_metrics.csv",
            FormatArg::Json => "_metrics.json",
        })
    });
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    match (a.format, reports.as_slice()) {
        (FormatArg::Csv, [(_, single)]) => emit_report(single, &output, ReportFormat::Csv)?,
        (FormatArg::Json, [(_, single)]) => emit_report(single, &output, ReportFormat::Json)?,
        (FormatArg::Csv, many) => {
            let rows: Vec<ReportRow> = many.iter().map(|(n, r)| summary_row(r, Some(n))).collect();
            write(&output, &rows_to_csv(&rows)?)?;
        }
        (FormatArg::Json, many) => {
            let map: serde_json::Map<String, serde_json::Value> = many
                .iter()
                .map(|(n, r)| (n.clone(), serde_json::to_value(r).expect("plain data")))
                .collect();
            write(&output, &to_json(&map))?;
        }
    }
    for (name, r) in &reports {
        println!("{name}");
        for row in report_rows(r, None) {
            println!("  {}", format_row(&row));
        }
    }
    if a.svg {
        let mut series_data: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        for (name, ims) in &variants {
            for (c, cname) in inputs.ds.classes.names().iter().enumerate() {
                series_data.push((format!("{name} / {cname}"), pr_curve(ims, c, cfg.iou_threshold)));
            }
        }
        let series: Vec<Series> = series_data
            .iter()
            .map(|(l, p)| Series {
                label: l,
                points: p.clone(),
            })
            .collect();
        let svg_path: PathBuf = output.with_extension("svg");
        write(&svg_path, &line_chart("precision / recall", "recall", "precision", &series, true))?;
    }
    Ok(())
}

fn format_row(r: &ReportRow) -> String {
    let c = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.1}"));
    format!(
        "{:<14} AP {:>6}  mAP {:>6}  TP {:>6}  FP {:>6}  BFD {:>6}  gt {}",
        r.class,
        c(r.ap),
        c(r.map),
        c(r.tp),
        c(r.fp),
        c(r.bfd),
        r.gt_total
    )
}

/// Prints `B − A` for the summary rows of two metrics files, pairing
/// variants by name when both files carry several.
fn compare(a: &Path, b: &Path) -> CliResult<()> {
    let read = |p: &Path| -> CliResult<Vec<ReportRow>> {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let rows = parse_report_csv(&text)?;
        Ok(rows.into_iter().filter(|r| r.class == r2s_core::metrics::ALL_CLASSES).collect())
    };
    let (ra, rb) = (read(a)?, read(b)?);
    let pairs: Vec<(String, &ReportRow, &ReportRow)> = if ra.len() == 1 && rb.len() == 1 {
        let name = |p: &Path, r: &ReportRow| r.variant.clone().unwrap_or_else(|| p.display().to_string());
        vec![(format!("{} -> {}", name(a, &ra[0]), name(b, &rb[0])), &ra[0], &rb[0])]
    } else {
        ra.iter()
            .filter_map(|x| {
                rb.iter()
                    .find(|y| y.variant == x.variant)
                    .map(|y| (x.variant.clone().unwrap_or_default(), x, y))
            })
            .collect()
    };
    if pairs.is_empty() {
        return Err(CliError::Usage("the two reports share no summary rows".into()));
    }
    println!("{:<28} {:>8} {:>8} {:>8} {:>8}", "variant", "dmAP", "dTP", "dFP", "dBFD");
    for (name, x, y) in pairs {
        let d = summary_delta(x, y);
        println!("{name:<28} {:>+8.1} {:>+8.1} {:>+8.1} {:>+8.1}", d.map, d.tp, d.fp, d.bfd);
    }
    Ok(())
}
