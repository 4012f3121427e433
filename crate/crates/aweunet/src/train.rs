//! Training loop (Adam on BCE + soft-IoU), checkpointing, evaluation, and
//! the end-to-end detect→crop→segment→paste pipeline.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3, IxDyn};

use crate::autograd::{ArrD, Tape};
use crate::config::ExperimentConfig;
use crate::data::{self, DatasetManifest, GrayImage, Split};
use crate::detect::{self, Detection};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{AweUNet, ModelConfig, ParamTable};
use crate::par;

/// Adam with bias correction; state keyed by parameter name so update
/// order is deterministic.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, ArrD>,
    v: BTreeMap<String, ArrD>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamTable, grads: &BTreeMap<String, ArrD>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params
                .tensors
                .get_mut(name)
                .unwrap_or_else(|| panic!("unknown parameter {name}"));
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrD::zeros(g.raw_dim()));
            m.zip_mut_with(g, |mv, &gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            v.zip_mut_with(g, |vv, &gv| *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv);
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|pv, &mv, &vv| {
                    let mh = mv / bc1;
                    let vh = vv / bc2;
                    *pv -= self.lr * mh / (vh.sqrt() + self.eps);
                });
        }
    }
}

// ---- checkpoint format ----

const CKPT_MAGIC: &[u8; 8] = b"AWEUCKP1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamTable,
    pub config: ModelConfig,
    pub epoch: u64,
    pub best_val_dsc: f64,
    pub seed: u64,
}

impl Checkpoint {
    /// Binary write: f64 payloads are stored as raw LE bits, so a
    /// round-trip is bitwise exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        let mut w = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        let io = |e: std::io::Error| Error::io(path, e);
        w.write_all(CKPT_MAGIC).map_err(io)?;
        w.write_u64::<LittleEndian>(cfg.len() as u64).map_err(io)?;
        w.write_all(&cfg).map_err(io)?;
        w.write_u64::<LittleEndian>(self.epoch).map_err(io)?;
        w.write_u64::<LittleEndian>(self.best_val_dsc.to_bits()).map_err(io)?;
        w.write_u64::<LittleEndian>(self.seed).map_err(io)?;
        w.write_u64::<LittleEndian>(self.params.tensors.len() as u64)
            .map_err(io)?;
        for (name, tensor) in &self.params.tensors {
            let nb = name.as_bytes();
            w.write_u64::<LittleEndian>(nb.len() as u64).map_err(io)?;
            w.write_all(nb).map_err(io)?;
            w.write_u64::<LittleEndian>(tensor.ndim() as u64).map_err(io)?;
            for &d in tensor.shape() {
                w.write_u64::<LittleEndian>(d as u64).map_err(io)?;
            }
            for &v in tensor.iter() {
                w.write_u64::<LittleEndian>(v.to_bits()).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = std::io::BufReader::new(
            std::fs::File::open(path).map_err(|e| Error::io(path, e))?,
        );
        let io = |e: std::io::Error| Error::io(path, e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Data(format!(
                "{}: not a checkpoint file",
                path.display()
            )));
        }
        let cfg_len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut cfg_buf = vec![0u8; cfg_len];
        r.read_exact(&mut cfg_buf).map_err(io)?;
        let config: ModelConfig = serde_json::from_slice(&cfg_buf)
            .map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;
        let epoch = r.read_u64::<LittleEndian>().map_err(io)?;
        let best_val_dsc = f64::from_bits(r.read_u64::<LittleEndian>().map_err(io)?);
        let seed = r.read_u64::<LittleEndian>().map_err(io)?;
        let n = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut params = ParamTable::default();
        for _ in 0..n {
            let name_len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf).map_err(io)?;
            let name = String::from_utf8(name_buf)
                .map_err(|e| Error::Data(format!("checkpoint name: {e}")))?;
            let ndim = r.read_u64::<LittleEndian>().map_err(io)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u64::<LittleEndian>().map_err(io)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from_bits(r.read_u64::<LittleEndian>().map_err(io)?));
            }
            params.insert(name, ArrD::from_shape_vec(IxDyn(&shape), data).unwrap());
        }
        Ok(Checkpoint {
            params,
            config,
            epoch,
            best_val_dsc,
            seed,
        })
    }

    /// Rebuilds the model, insisting the checkpoint's config echo matches
    /// the config the caller intends to run with.
    pub fn into_model(self, expected: &ModelConfig) -> Result<AweUNet> {
        if &self.config != expected {
            return Err(Error::contract(format!(
                "checkpoint config {:?} does not match requested config {:?}",
                self.config, expected
            )));
        }
        AweUNet::from_params(self.config, self.params)
    }
}

// ---- samples ----

/// One ROI training/eval sample: normalized image crop and binary mask.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Array3<f64>,
    pub mask: Array2<u8>,
    pub source: String,
}

/// Crops one ROI sample per ground-truth box of every entry in the split.
///
/// Crops come from the baseline detector's proposal when one overlaps the
/// ground-truth box (IoU >= 0.3), so the segmenter trains and evaluates on
/// the same box distribution the detection stage feeds it; unmatched boxes
/// fall back to the ground truth.
pub fn load_split_samples(
    manifest: &DatasetManifest,
    split: Split,
    cfg: &ExperimentConfig,
) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for entry in manifest.split_entries(split) {
        let image = data::load_gray_png(&entry.image_path)?;
        let mask = data::load_mask_png(&entry.mask_path).map_err(|_| {
            Error::Data(format!(
                "missing or unreadable mask file for entry {}",
                entry.mask_path.display()
            ))
        })?;
        let (extracted, _) = data::extract_lung_region(&image);
        let proposals = detect::propose_rois_baseline(
            &extracted,
            cfg.detector_min_area,
            cfg.detector_max_count,
            cfg.detector_quantile,
        );
        for (bi, gt_box) in entry.boxes.iter().enumerate() {
            let bbox = proposals
                .iter()
                .map(|d| (detect::box_iou(&d.bbox, gt_box), &d.bbox))
                .filter(|(iou, _)| *iou >= 0.3)
                .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
                .map_or(gt_box, |(_, b)| b);
            let roi = data::crop_resize_roi(&image, bbox, cfg.roi_pad_fraction, cfg.model.input_size)?;
            let roi_mask =
                data::crop_resize_mask(&mask, bbox, cfg.roi_pad_fraction, cfg.model.input_size)?;
            samples.push(Sample {
                image: roi,
                mask: roi_mask,
                source: format!(
                    "{}#{}",
                    entry
                        .image_path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default(),
                    bi
                ),
            });
        }
    }
    Ok(samples)
}

// ---- training ----

#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dsc: f64,
    pub val_iou: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "epoch,train_loss,val_loss,val_dsc,val_iou,wall_seconds")
            .map_err(|e| Error::io(path, e))?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                r.epoch, r.train_loss, r.val_loss, r.val_dsc, r.val_iou, r.wall_seconds
            )
            .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Forward + loss + backward for one sample. Returns the scalar loss and
/// named parameter gradients.
fn sample_grads(
    model: &AweUNet,
    sample: &Sample,
    w_bce: f64,
    w_iou: f64,
) -> Result<(f64, BTreeMap<String, ArrD>)> {
    let mut tape = Tape::new();
    let iv = tape.leaf(sample.image.clone().into_dyn());
    let (logits, bindings) = model.forward_on_tape(&mut tape, iv)?;
    let loss = loss_on_tape(&mut tape, logits, &sample.mask, w_bce, w_iou);
    let loss_val = tape.value(loss)[[0usize].as_ref()];
    let grads_raw = tape.backward(loss);
    let mut grads = BTreeMap::new();
    for (name, var) in bindings.vars {
        let shape = tape.value(var).shape().to_vec();
        grads.insert(name, grads_raw.get_or_zeros(var, &shape));
    }
    Ok((loss_val, grads))
}

/// Combined loss node: w_bce · BCE(logit margin) + w_iou · soft-IoU(σ(margin)).
/// The two-class softmax probability of the nodule class equals the sigmoid
/// of the logit difference, so this is the spec loss on class probabilities.
fn loss_on_tape(
    tape: &mut Tape,
    logits: crate::autograd::Var,
    mask: &Array2<u8>,
    w_bce: f64,
    w_iou: f64,
) -> crate::autograd::Var {
    let (c, h, w) = crate::autograd::as3(tape.value(logits)).dim();
    assert_eq!(c, 2, "training loss expects a 2-class head");
    let flat = tape.reshape(logits, &[2, h * w]);
    let target = ArrD::from_shape_vec(
        IxDyn(&[h * w]),
        mask.iter().map(|&m| f64::from(m)).collect(),
    )
    .unwrap();
    // margin z = z1 - z0 per pixel
    let row = ArrD::from_shape_vec(IxDyn(&[1, 2]), vec![-1.0, 1.0]).unwrap();
    let rv = tape.leaf(row);
    let z = tape.matmul(rv, flat);
    let z = tape.reshape(z, &[h * w]);
    let bce = tape.bce_with_logits(z, target.clone());
    let p = tape.sigmoid(z);
    let iou = tape.soft_iou(p, target, metrics::IOU_EPS);
    let bce_w = tape.scale_const(bce, w_bce);
    let iou_w = tape.scale_const(iou, w_iou);
    tape.add(bce_w, iou_w)
}

fn mean_val_metrics(model: &AweUNet, samples: &[Sample], cfg: &ExperimentConfig) -> Result<(f64, f64, f64)> {
    if samples.is_empty() {
        return Ok((f64::NAN, f64::NAN, f64::NAN));
    }
    let results = par::map_indexed(samples.len(), |i| -> Result<(f64, f64, f64)> {
        let s = &samples[i];
        let prob = model.nodule_probability(&s.image)?;
        let pred = prob.mapv(|v| u8::from(v >= cfg.threshold));
        let (dsc, iou) = metrics::overlap_metrics(&pred, &s.mask);
        let loss =
            metrics::combined_loss_weighted(&prob, &s.mask, cfg.loss_weight_bce, cfg.loss_weight_iou)?;
        Ok((loss, dsc, iou))
    });
    let mut acc = (0.0, 0.0, 0.0);
    for r in results {
        let (l, d, i) = r?;
        acc.0 += l;
        acc.1 += d;
        acc.2 += i;
    }
    let n = samples.len() as f64;
    Ok((acc.0 / n, acc.1 / n, acc.2 / n))
}

pub struct TrainOutput {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: TrainLog,
    pub final_train_dsc: f64,
}

/// Trains on the train split, validating each epoch with mean DSC on the
/// val split; keeps best-by-val-DSC and last checkpoints. Batches run in
/// manifest order and per-sample gradients are reduced in sample order, so
/// a fixed seed reproduces the loss log exactly.
pub fn train(cfg: &ExperimentConfig, manifest: &DatasetManifest) -> Result<TrainOutput> {
    cfg.validate()?;
    let train_samples = load_split_samples(manifest, Split::Train, cfg)?;
    if train_samples.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    let val_samples = load_split_samples(manifest, Split::Val, cfg)?;

    let mut model = AweUNet::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = Adam::new(
        cfg.optimizer.lr,
        cfg.optimizer.beta1,
        cfg.optimizer.beta2,
        cfg.optimizer.eps,
    );
    let mut log = TrainLog::default();
    let mut best: Option<Checkpoint> = None;
    let mut best_dsc = f64::NEG_INFINITY;
    let started = Instant::now();

    for epoch in 1..=cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut batch_start = 0;
        let mut batch_index = 0;
        while batch_start < train_samples.len() {
            let batch_end = (batch_start + cfg.batch_size).min(train_samples.len());
            let batch: Vec<Sample> = (batch_start..batch_end)
                .map(|i| {
                    let s = &train_samples[i];
                    if cfg.augment_enabled {
                        let draw = (epoch as u64) << 32 | i as u64;
                        let img2d = s
                            .image
                            .index_axis(ndarray::Axis(0), 0)
                            .to_owned();
                        let (ai, am) = data::augment(&img2d, &s.mask, &cfg.augmentation, draw);
                        let (h, w) = ai.dim();
                        Sample {
                            image: ai.into_shape((1, h, w)).unwrap(),
                            mask: am,
                            source: s.source.clone(),
                        }
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let results = par::map_indexed(batch.len(), |i| {
                sample_grads(&model, &batch[i], cfg.loss_weight_bce, cfg.loss_weight_iou)
            });
            let mut batch_loss = 0.0;
            let mut grads: BTreeMap<String, ArrD> = BTreeMap::new();
            for r in results {
                let (l, g) = r?;
                batch_loss += l;
                for (name, gv) in g {
                    grads
                        .entry(name)
                        .and_modify(|acc| *acc += &gv)
                        .or_insert(gv);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.values_mut() {
                g.mapv_inplace(|v| v * scale);
            }
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::Data(format!(
                    "NaN/Inf loss at epoch {epoch}, batch {batch_index}"
                )));
            }
            opt.step(&mut model.params, &grads);
            epoch_loss += batch_loss;
            batch_start = batch_end;
            batch_index += 1;
        }
        epoch_loss /= batch_index as f64;

        let (val_loss, val_dsc, val_iou) = mean_val_metrics(&model, &val_samples, cfg)?;
        log.rows.push(TrainLogRow {
            epoch,
            train_loss: epoch_loss,
            val_loss,
            val_dsc,
            val_iou,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        let select_dsc = if val_dsc.is_nan() { -epoch_loss } else { val_dsc };
        if select_dsc > best_dsc {
            best_dsc = select_dsc;
            best = Some(Checkpoint {
                params: model.params.clone(),
                config: cfg.model.clone(),
                epoch: epoch as u64,
                best_val_dsc: val_dsc,
                seed: cfg.seed,
            });
        }
    }

    let (_, train_dsc, _) = mean_val_metrics(&model, &train_samples, cfg)?;
    let last = Checkpoint {
        params: model.params.clone(),
        config: cfg.model.clone(),
        epoch: cfg.epochs as u64,
        best_val_dsc: best_dsc,
        seed: cfg.seed,
    };
    Ok(TrainOutput {
        best: best.unwrap_or_else(|| last.clone()),
        last,
        log,
        final_train_dsc: train_dsc,
    })
}

// ---- evaluation ----

#[derive(Debug, Clone)]
pub struct PerImageRow {
    pub source: String,
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub dsc: f64,
    pub iou: f64,
}

pub struct EvalOutput {
    /// Per-image means (the reported aggregation mode).
    pub mean: metrics::MetricsReport,
    /// Per-image standard deviations for acc/sen/spe/dsc/iou.
    pub std: [f64; 5],
    /// Pixel-pooled acc/sen/spe over the whole split.
    pub pooled: (f64, f64, f64),
    pub per_image: Vec<PerImageRow>,
    pub roc: metrics::Curve,
    pub pr: metrics::Curve,
}

/// Evaluates a model over ROI samples: per-image metrics (mean ± std),
/// pooled pixel rates, and split-level ROC/PR curves over pooled scores.
pub fn evaluate(model: &AweUNet, samples: &[Sample], threshold: f64) -> Result<EvalOutput> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let probs = par::map_indexed(samples.len(), |i| model.nodule_probability(&samples[i].image));
    let mut per_image = Vec::with_capacity(samples.len());
    let mut pooled_scores = Vec::new();
    let mut pooled_gt = Vec::new();
    let mut pooled_counts = metrics::ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (s, prob) in samples.iter().zip(probs) {
        let prob = prob?;
        let pred = prob.mapv(|v| u8::from(v >= threshold));
        let counts = metrics::confusion_counts(&pred, &s.mask)?;
        let (acc, sen, spe) = metrics::pixel_metrics(&counts);
        let (dsc, iou) = metrics::overlap_metrics(&pred, &s.mask);
        pooled_counts.tp += counts.tp;
        pooled_counts.fp += counts.fp;
        pooled_counts.tn += counts.tn;
        pooled_counts.fn_ += counts.fn_;
        pooled_scores.extend(prob.iter().cloned());
        pooled_gt.extend(s.mask.iter().cloned());
        per_image.push(PerImageRow {
            source: s.source.clone(),
            acc,
            sen,
            spe,
            dsc,
            iou,
        });
    }
    let n = per_image.len() as f64;
    let mean_of = |f: &dyn Fn(&PerImageRow) -> f64| per_image.iter().map(|r| f(r)).sum::<f64>() / n;
    let std_of = |f: &dyn Fn(&PerImageRow) -> f64, mu: f64| {
        (per_image.iter().map(|r| (f(r) - mu).powi(2)).sum::<f64>() / n).sqrt()
    };
    let mean_acc = mean_of(&|r| r.acc);
    let mean_sen = mean_of(&|r| r.sen);
    let mean_spe = mean_of(&|r| r.spe);
    let mean_dsc = mean_of(&|r| r.dsc);
    let mean_iou = mean_of(&|r| r.iou);
    let (roc, auc_roc) = metrics::roc_curve(&pooled_scores, &pooled_gt)?;
    let (pr, auc_pr) = metrics::pr_curve(&pooled_scores, &pooled_gt)?;
    Ok(EvalOutput {
        mean: metrics::MetricsReport {
            acc: mean_acc,
            sen: mean_sen,
            spe: mean_spe,
            dsc: mean_dsc,
            iou: mean_iou,
            auc_roc,
            auc_pr,
        },
        std: [
            std_of(&|r| r.acc, mean_acc),
            std_of(&|r| r.sen, mean_sen),
            std_of(&|r| r.spe, mean_spe),
            std_of(&|r| r.dsc, mean_dsc),
            std_of(&|r| r.iou, mean_iou),
        ],
        pooled: metrics::pixel_metrics(&pooled_counts),
        per_image,
        roc,
        pr,
    })
}

// ---- end-to-end pipeline ----

pub enum DetectorChoice {
    Baseline,
    /// Pre-computed detections for this image (external detector adapter).
    Provided(Vec<Detection>),
}

pub struct PipelineOutput {
    pub mask: Array2<u8>,
    pub probability: Array2<f64>,
    pub detections: Vec<Detection>,
    /// Set when no ROI was proposed and the mask is all zeros.
    pub empty_warning: bool,
}

/// Full-slice inference: lung extraction → ROI proposals → per-ROI
/// segmentation → probability paste-back (max over overlaps) → threshold.
pub fn predict_pipeline(
    image: &GrayImage,
    model: &AweUNet,
    detector: DetectorChoice,
    cfg: &ExperimentConfig,
) -> Result<PipelineOutput> {
    let (extracted, _degenerate) = data::extract_lung_region(image);
    let detections = match detector {
        DetectorChoice::Baseline => detect::propose_rois_baseline(
            &extracted,
            cfg.detector_min_area,
            cfg.detector_max_count,
            cfg.detector_quantile,
        ),
        DetectorChoice::Provided(d) => d,
    };
    let (h, w) = image.dim();
    let mut canvas = Array2::<f64>::zeros((h, w));
    if detections.is_empty() {
        log::warn!("predict_pipeline: no ROI proposals; emitting empty mask");
        return Ok(PipelineOutput {
            mask: Array2::zeros((h, w)),
            probability: canvas,
            detections,
            empty_warning: true,
        });
    }
    for det in &detections {
        let roi = data::crop_resize_roi(image, &det.bbox, cfg.roi_pad_fraction, cfg.model.input_size)?;
        let prob = model.nodule_probability(&roi)?;
        // paste back into the padded, clipped box footprint
        let px = det.bbox.w * cfg.roi_pad_fraction;
        let py = det.bbox.h * cfg.roi_pad_fraction;
        let x0 = (det.bbox.x - px).max(0.0).floor() as usize;
        let y0 = (det.bbox.y - py).max(0.0).floor() as usize;
        let x1 = ((det.bbox.x + det.bbox.w + px).ceil() as usize).min(w);
        let y1 = ((det.bbox.y + det.bbox.h + py).ceil() as usize).min(h);
        if x0 >= x1 || y0 >= y1 {
            continue;
        }
        let (bh, bw) = (y1 - y0, x1 - x0);
        let s = prob.dim().0;
        let prob3 = prob.into_shape((1, s, s)).unwrap();
        let resized = crate::kernels::resize_bilinear(prob3.view(), bh, bw);
        for yy in 0..bh {
            for xx in 0..bw {
                let v = resized[[0, yy, xx]];
                let cell = &mut canvas[[y0 + yy, x0 + xx]];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
    let mask = canvas.mapv(|v| u8::from(v >= cfg.threshold));
    Ok(PipelineOutput {
        mask,
        probability: canvas,
        detections,
        empty_warning: false,
    })
}
