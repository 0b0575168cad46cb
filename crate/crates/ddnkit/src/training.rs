//! Losses, optimizer, augmentation, the training loop, metrics, and the
//! checkpoint format.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::ads::total_loss;
use crate::data::{csv_string, pad_to_multiple, SegSample};
use crate::error::{Error, Result};
use crate::netspec::{build_graph, parse_spec, AuxAttachment, ComputeGraph, StateItem, StateItemMut};
use crate::objsize::MaskImage;
use crate::tensor::{Mode, Shape, Tape, Tensor, TensorData};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Ce,
    Dice,
    Jaccard,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "dice" => Ok(LossKind::Dice),
            "jaccard" => Ok(LossKind::Jaccard),
            other => Err(Error::Semantic {
                field: "main_loss",
                msg: format!("unknown loss `{other}` (ce|dice|jaccard)"),
            }),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossKind::Ce => write!(f, "ce"),
            LossKind::Dice => write!(f, "dice"),
            LossKind::Jaccard => write!(f, "jaccard"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub main_loss: LossKind,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            epochs: 100,
            batch_size: 4,
            main_loss: LossKind::Ce,
            seed: 0,
            augment: true,
        }
    }
}

/// Validation share of the provided sample set.
pub const VAL_FRACTION: f64 = 0.2;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed: it must leave parameters bit-identical.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Semantic {
                field: "lr",
                msg: format!("learning rate {} must be finite and >= 0", self.lr),
            });
        }
        for (v, name) in [(self.beta1, "beta1"), (self.beta2, "beta2")] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Semantic {
                    field: "beta",
                    msg: format!("{name} = {v} outside [0, 1)"),
                });
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Semantic {
                field: "batch_size",
                msg: "batch_size must be positive".into(),
            });
        }
        Ok(())
    }

    /// Parse `key value` lines (same lexical family as the network grammar:
    /// `#` comments, blank lines ignored).
    pub fn from_text(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let mut parts = body.split_whitespace();
            let key = parts.next().unwrap_or("");
            let val = parts.next().unwrap_or("");
            if parts.next().is_some() || val.is_empty() {
                return Err(Error::Syntax {
                    line: i + 1,
                    col: 1,
                    msg: format!("expected `key value`, got `{body}`"),
                });
            }
            let bad_num = |what: &str| Error::Syntax {
                line: i + 1,
                col: (key.len() + 2).min(raw.len().max(1)),
                msg: format!("bad {what} `{val}`"),
            };
            match key {
                "lr" => cfg.lr = val.parse().map_err(|_| bad_num("number"))?,
                "beta1" => cfg.beta1 = val.parse().map_err(|_| bad_num("number"))?,
                "beta2" => cfg.beta2 = val.parse().map_err(|_| bad_num("number"))?,
                "eps" => cfg.eps = val.parse().map_err(|_| bad_num("number"))?,
                "weight_decay" => cfg.weight_decay = val.parse().map_err(|_| bad_num("number"))?,
                "epochs" => cfg.epochs = val.parse().map_err(|_| bad_num("integer"))?,
                "batch_size" => cfg.batch_size = val.parse().map_err(|_| bad_num("integer"))?,
                "main_loss" => cfg.main_loss = val.parse()?,
                "seed" => cfg.seed = val.parse().map_err(|_| bad_num("integer"))?,
                "augment" => {
                    cfg.augment = match val {
                        "on" => true,
                        "off" => false,
                        _ => return Err(bad_num("flag (on|off)")),
                    }
                }
                other => {
                    return Err(Error::Syntax {
                        line: i + 1,
                        col: 1,
                        msg: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

// ── losses ───────────────────────────────────────────────────────────

const CE_CLAMP: f64 = 1e-12;
const OVERLAP_EPS: f64 = 1.0;

/// Dense target tensor for a mask: binary single channel when the model has
/// one class, one-hot over class ids otherwise.
pub fn mask_to_target(mask: &MaskImage, num_classes: usize) -> Result<TensorData> {
    let (h, w) = (mask.height, mask.width);
    if num_classes == 1 {
        let data: Vec<f64> = mask.labels.iter().map(|&v| if v != 0 { 1.0 } else { 0.0 }).collect();
        return TensorData::from_vec(Shape::new(1, 1, h, w), data);
    }
    let mut t = TensorData::zeros(Shape::new(1, num_classes, h, w));
    for (i, &v) in mask.labels.iter().enumerate() {
        let c = v as usize;
        if c >= num_classes {
            return Err(Error::BadOperand {
                op: "mask_to_target",
                msg: format!("label {c} >= num_classes {num_classes}"),
            });
        }
        t.data[c * h * w + i] = 1.0;
    }
    Ok(t)
}

fn check_loss_shapes(op: &'static str, pred: Tensor, target: &TensorData) -> Result<()> {
    if pred.shape != target.shape {
        return Err(Error::BadOperand {
            op,
            msg: format!("prediction {} vs target {}", pred.shape, target.shape),
        });
    }
    Ok(())
}

/// Cross-entropy over post-activation probabilities, mean over pixels.
/// Single-channel predictions use the two-term binary form.
pub fn ce_loss(tape: &mut Tape, pred: Tensor, target: &TensorData) -> Result<Tensor> {
    check_loss_shapes("ce_loss", pred, target)?;
    let px = (pred.shape.n * pred.shape.h * pred.shape.w) as f64;
    let t = std::sync::Arc::new(target.data.clone());
    if pred.shape.c == 1 {
        let lp = tape.ln_clamped(pred, CE_CLAMP);
        let pos = tape.weighted_sum(lp, t)?;
        let q = tape.affine(pred, -1.0, 1.0); // 1 - p
        let lq = tape.ln_clamped(q, CE_CLAMP);
        let tneg: Vec<f64> = target.data.iter().map(|v| 1.0 - v).collect();
        let neg = tape.weighted_sum(lq, std::sync::Arc::new(tneg))?;
        let s = tape.add(pos, neg)?;
        Ok(tape.affine(s, -1.0 / px, 0.0))
    } else {
        let lp = tape.ln_clamped(pred, CE_CLAMP);
        let s = tape.weighted_sum(lp, t)?;
        Ok(tape.affine(s, -1.0 / px, 0.0))
    }
}

/// 1 - (2Σpt + ε) / (Σp + Σt + ε), ε = 1.
pub fn dice_loss(tape: &mut Tape, pred: Tensor, target: &TensorData) -> Result<Tensor> {
    check_loss_shapes("dice_loss", pred, target)?;
    let t = std::sync::Arc::new(target.data.clone());
    let s_t: f64 = target.data.iter().sum();
    let s_pt = tape.weighted_sum(pred, t)?;
    let s_p = tape.sum(pred);
    let num = tape.affine(s_pt, 2.0, OVERLAP_EPS);
    let den = tape.affine(s_p, 1.0, s_t + OVERLAP_EPS);
    let frac = tape.div(num, den)?;
    Ok(tape.affine(frac, -1.0, 1.0))
}

/// 1 - (Σpt + ε) / (Σp + Σt - Σpt + ε), ε = 1.
pub fn jaccard_loss(tape: &mut Tape, pred: Tensor, target: &TensorData) -> Result<Tensor> {
    check_loss_shapes("jaccard_loss", pred, target)?;
    let t = std::sync::Arc::new(target.data.clone());
    let s_t: f64 = target.data.iter().sum();
    let s_pt = tape.weighted_sum(pred, t)?;
    let s_p = tape.sum(pred);
    let num = tape.affine(s_pt, 1.0, OVERLAP_EPS);
    let s_p_shift = tape.affine(s_p, 1.0, s_t + OVERLAP_EPS);
    let neg_pt = tape.affine(s_pt, -1.0, 0.0);
    let den = tape.add(s_p_shift, neg_pt)?;
    let frac = tape.div(num, den)?;
    Ok(tape.affine(frac, -1.0, 1.0))
}

pub fn loss_of_kind(
    kind: LossKind,
    tape: &mut Tape,
    pred: Tensor,
    target: &TensorData,
) -> Result<Tensor> {
    match kind {
        LossKind::Ce => ce_loss(tape, pred, target),
        LossKind::Dice => dice_loss(tape, pred, target),
        LossKind::Jaccard => jaccard_loss(tape, pred, target),
    }
}

// ── optimizer ────────────────────────────────────────────────────────

/// Adam moment buffers, keyed by parameter name so a branch attached after
/// some steps just starts fresh moments.
#[derive(Default)]
pub struct AdamState {
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update over every parameter of the graph, using
/// the gradients currently in the parameter buffers.
pub fn adam_step(graph: &mut ComputeGraph, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    state.t += 1;
    let t = state.t;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let mut bad: Option<String> = None;
    let (ms, vs) = (&mut state.m, &mut state.v);
    graph.visit_params_mut(|p| {
        if bad.is_some() {
            return;
        }
        if p.grad.iter().any(|g| !g.is_finite()) {
            bad = Some(p.name.clone());
            return;
        }
        let m = ms.entry(p.name.clone()).or_insert_with(|| vec![0.0; p.grad.len()]);
        let v = vs.entry(p.name.clone()).or_insert_with(|| vec![0.0; p.grad.len()]);
        let grad = &p.grad;
        let data: &mut Vec<f64> = std::sync::Arc::make_mut(&mut p.data);
        for i in 0..data.len() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    });
    match bad {
        Some(name) => Err(Error::NonFinite {
            what: format!("gradient of {name} at step {t}"),
        }),
        None => Ok(()),
    }
}

// ── augmentation ─────────────────────────────────────────────────────

/// Transform parameters: flips first, then a quarter-turn rotation count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub vflip: bool,
    pub quarter_turns: u8,
}

/// Apply one draw identically to image and mask. Rotation requires square
/// spatial dims.
pub fn apply_transform(sample: &SegSample, draw: AugmentDraw) -> Result<SegSample> {
    let s = sample.image.shape;
    if draw.quarter_turns % 4 != 0 && s.h != s.w {
        return Err(Error::BadOperand {
            op: "augment",
            msg: format!("rotation needs square images, got {}x{}", s.h, s.w),
        });
    }
    let (h, w) = (s.h, s.w);
    // coordinate map back into the source image
    let src_of = |y: usize, x: usize| -> (usize, usize) {
        let (mut y, mut x) = (y, x);
        // invert rotation (quarter turns counter-clockwise on output)
        for _ in 0..(draw.quarter_turns % 4) {
            let (py, px) = (y, x);
            // output(y, x) = input(x, H-1-y) rotates input 90° clockwise
            y = px;
            x = h - 1 - py;
        }
        if draw.vflip {
            y = h - 1 - y;
        }
        if draw.hflip {
            x = w - 1 - x;
        }
        (y, x)
    };
    let mut image = TensorData::zeros(s);
    for c in 0..s.c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = src_of(y, x);
                image.set(0, c, y, x, sample.image.get(0, c, sy, sx));
            }
        }
    }
    let mut mask = MaskImage::filled(w, h, 0);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src_of(y, x);
            mask.set(x, y, sample.mask.get(sx, sy));
        }
    }
    Ok(SegSample {
        id: sample.id.clone(),
        image,
        mask,
    })
}

/// Independent 50% horizontal flip, 50% vertical flip, rotation uniform over
/// the four quarter turns.
pub fn augment(sample: &SegSample, rng: &mut ChaCha12Rng) -> Result<SegSample> {
    let draw = AugmentDraw {
        hflip: rng.gen::<bool>(),
        vflip: rng.gen::<bool>(),
        quarter_turns: rng.gen_range(0..4u8),
    };
    apply_transform(sample, draw)
}

// ── metrics ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub jaccard: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub mean_iu: f64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> Vec<String> {
        [
            self.jaccard,
            self.dice,
            self.precision,
            self.recall,
            self.specificity,
            self.mean_iu,
        ]
        .iter()
        .map(|v| format!("{v}"))
        .collect()
    }
}

pub const METRICS_CSV_HEADER: [&str; 6] =
    ["jaccard", "dice", "precision", "recall", "specificity", "mean_iu"];

fn ratio(num: f64, den: f64, degenerate_ok: bool) -> f64 {
    if den == 0.0 {
        if degenerate_ok {
            1.0
        } else {
            0.0
        }
    } else {
        num / den
    }
}

/// Metrics from per-pixel class ids. Foreground statistics treat any nonzero
/// id as foreground; mean IU averages per-class IoU over ids 0..num_classes
/// (classes absent from both maps count as 1).
pub fn metrics_from_labels(pred: &[u8], gt: &[u8], num_classes: usize) -> MetricsRecord {
    debug_assert_eq!(pred.len(), gt.len());
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p != 0, g != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let (tp, fp, tn, fn_) = (tp as f64, fp as f64, tn as f64, fn_ as f64);
    let jaccard = ratio(tp, tp + fp + fn_, true);
    let dice = ratio(2.0 * tp, 2.0 * tp + fp + fn_, true);
    let precision = ratio(tp, tp + fp, fn_ == 0.0);
    let recall = ratio(tp, tp + fn_, fp == 0.0);
    let specificity = ratio(tn, tn + fp, fn_ == 0.0);

    let classes = num_classes.max(2); // binary masks still have bg + fg
    let mut iu_sum = 0.0;
    for c in 0..classes {
        let (mut inter, mut uni) = (0usize, 0usize);
        for (&p, &g) in pred.iter().zip(gt) {
            let (pc, gc) = if num_classes == 1 {
                ((p != 0) as usize == c.min(1), (g != 0) as usize == c.min(1))
            } else {
                (p as usize == c, g as usize == c)
            };
            if pc && gc {
                inter += 1;
            }
            if pc || gc {
                uni += 1;
            }
        }
        iu_sum += ratio(inter as f64, uni as f64, true);
    }
    MetricsRecord {
        jaccard,
        dice,
        precision,
        recall,
        specificity,
        mean_iu: iu_sum / classes as f64,
    }
}

fn mean_metrics(per_image: &[MetricsRecord]) -> MetricsRecord {
    let n = per_image.len() as f64;
    let sum = |f: fn(&MetricsRecord) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    MetricsRecord {
        jaccard: sum(|m| m.jaccard),
        dice: sum(|m| m.dice),
        precision: sum(|m| m.precision),
        recall: sum(|m| m.recall),
        specificity: sum(|m| m.specificity),
        mean_iu: sum(|m| m.mean_iu),
    }
}

/// Predicted class ids for one sample (eval mode). Pads to the pool multiple
/// and crops the prediction back.
pub fn predict_labels(graph: &ComputeGraph, sample: &SegSample, threshold: f64) -> Result<Vec<u8>> {
    let mut g = graph.clone();
    predict_labels_mut(&mut g, sample, threshold)
}

fn predict_labels_mut(g: &mut ComputeGraph, sample: &SegSample, threshold: f64) -> Result<Vec<u8>> {
    let m = g.spec.num_stages();
    let factor = 1usize << (m - 1);
    let (padded, (oh, ow)) = pad_to_multiple(sample, factor);
    let mut rng = ChaCha12Rng::seed_from_u64(0); // eval mode draws nothing
    let pass = g.forward(&padded.image, Mode::Eval, &mut rng)?;
    let out = pass.tape.to_data(pass.output);
    let (ph, pw) = (out.shape.h, out.shape.w);
    let mut labels = vec![0u8; oh * ow];
    if g.spec.num_classes == 1 {
        for y in 0..oh {
            for x in 0..ow {
                labels[y * ow + x] = u8::from(out.data[y * pw + x] >= threshold);
            }
        }
    } else {
        let plane = ph * pw;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = 0usize;
                let mut best_v = f64::NEG_INFINITY;
                for c in 0..g.spec.num_classes {
                    let v = out.data[c * plane + y * pw + x];
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                labels[y * ow + x] = best as u8;
            }
        }
    }
    Ok(labels)
}

/// Evaluate a graph over a dataset: per-image metrics plus their mean.
pub fn evaluate(
    graph: &ComputeGraph,
    samples: &[SegSample],
    threshold: f64,
) -> Result<(MetricsRecord, Vec<MetricsRecord>)> {
    if samples.is_empty() {
        return Err(Error::BadOperand {
            op: "evaluate",
            msg: "empty dataset".into(),
        });
    }
    let mut g = graph.clone();
    let mut per_image = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = predict_labels_mut(&mut g, s, threshold)?;
        per_image.push(metrics_from_labels(
            &pred,
            &s.mask.labels,
            graph.spec.num_classes,
        ));
    }
    Ok((mean_metrics(&per_image), per_image))
}

// ── checkpoints ──────────────────────────────────────────────────────

const CHECKPOINT_MAGIC: &[u8; 5] = b"DDNK1";

fn aux_descriptor(att: Option<&AuxAttachment>) -> String {
    match att {
        None => String::new(),
        Some(AuxAttachment::ReusedOcc { stage }) => format!("aux reused_occ stage={stage}\n"),
        Some(AuxAttachment::SynthesizedHead { stage }) => {
            format!("aux synthesized stage={stage}\n")
        }
        Some(AuxAttachment::EncoderTail { stacked }) => format!("aux tail stacked={stacked}\n"),
    }
}

fn parse_aux_descriptor(text: &str) -> Result<Option<AuxAttachment>> {
    let text = text.trim();
    if text.is_empty() {
        return Ok(None);
    }
    let toks: Vec<&str> = text.split_whitespace().collect();
    let bad = || Error::Checkpoint(format!("bad aux descriptor `{text}`"));
    if toks.len() != 3 || toks[0] != "aux" {
        return Err(bad());
    }
    let kv = |key: &str| -> Result<usize> {
        toks[2]
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .and_then(|v| v.parse().ok())
            .ok_or_else(bad)
    };
    Ok(Some(match toks[1] {
        "reused_occ" => AuxAttachment::ReusedOcc { stage: kv("stage")? },
        "synthesized" => AuxAttachment::SynthesizedHead { stage: kv("stage")? },
        "tail" => AuxAttachment::EncoderTail {
            stacked: kv("stacked")?,
        },
        _ => return Err(bad()),
    }))
}

/// Serialize graph weights and norm state. Little-endian layout:
/// magic `DDNK1`, u32 spec-text length + UTF-8 network grammar text,
/// u32 aux-descriptor length + text, u32 array count, then per array:
/// u32 name length + name, four u32 dims (n, c, h, w), numel f64 values.
pub fn checkpoint_bytes(graph: &ComputeGraph) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let spec_text = graph.spec.to_text();
    out.extend_from_slice(&(spec_text.len() as u32).to_le_bytes());
    out.extend_from_slice(spec_text.as_bytes());
    let aux = aux_descriptor(graph.aux_attachment());
    out.extend_from_slice(&(aux.len() as u32).to_le_bytes());
    out.extend_from_slice(aux.as_bytes());

    let mut arrays: Vec<(String, Shape, Vec<f64>)> = Vec::new();
    graph.visit_state(|item| match item {
        StateItem::Param(p) => arrays.push((p.name.clone(), p.shape, p.data.as_ref().clone())),
        StateItem::Stats { name, stats } => {
            let c = stats.mean.len();
            arrays.push((format!("{name}.rm"), Shape::new(1, c, 1, 1), stats.mean.clone()));
            arrays.push((format!("{name}.rv"), Shape::new(1, c, 1, 1), stats.var.clone()));
        }
    });
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, shape, data) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in [shape.n, shape.c, shape.h, shape.w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(graph: &ComputeGraph, path: &Path) -> Result<()> {
    crate::data::atomic_write(path, &checkpoint_bytes(graph))
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn text(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 text block".into()))
    }
}

pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<ComputeGraph> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(5)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic (not a DDNK1 file)".into()));
    }
    let spec_text = r.text()?;
    let aux_text = r.text()?;
    let spec = parse_spec(&spec_text)?;
    let mut rng = ChaCha12Rng::seed_from_u64(0); // weights are overwritten below
    let mut graph = build_graph(&spec, &mut rng)?;
    if let Some(att) = parse_aux_descriptor(&aux_text)? {
        graph
            .attach_aux(att, &mut rng)
            .map_err(|e| Error::Checkpoint(format!("aux attach failed: {e}")))?;
    }

    let count = r.u32()? as usize;
    let mut arrays: HashMap<String, (Shape, Vec<f64>)> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name = r.text()?;
        let dims: Vec<usize> = (0..4)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<_>>()?;
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let mut data = Vec::with_capacity(shape.numel());
        for _ in 0..shape.numel() {
            data.push(r.f64()?);
        }
        arrays.insert(name, (shape, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after arrays",
            bytes.len() - r.pos
        )));
    }

    let mut missing: Vec<String> = Vec::new();
    let mut shape_err: Option<String> = None;
    graph.visit_state_mut(|item| match item {
        StateItemMut::Param(p) => match arrays.remove(&p.name) {
            Some((shape, data)) => {
                if shape != p.shape {
                    shape_err =
                        Some(format!("{}: stored {} vs expected {}", p.name, shape, p.shape));
                } else {
                    p.values_mut().copy_from_slice(&data);
                }
            }
            None => missing.push(p.name.clone()),
        },
        StateItemMut::Stats { name, stats } => {
            for (suffix, dst) in [(".rm", &mut stats.mean), (".rv", &mut stats.var)] {
                let key = format!("{name}{suffix}");
                match arrays.remove(&key) {
                    Some((_, data)) if data.len() == dst.len() => dst.copy_from_slice(&data),
                    Some(_) => shape_err = Some(format!("{key}: wrong length")),
                    None => missing.push(key),
                }
            }
        }
    });
    if let Some(e) = shape_err {
        return Err(Error::Checkpoint(e));
    }
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "missing arrays: {}",
            missing.join(", ")
        )));
    }
    if !arrays.is_empty() {
        let extra: Vec<String> = arrays.keys().cloned().collect();
        return Err(Error::Checkpoint(format!(
            "unknown arrays: {}",
            extra.join(", ")
        )));
    }
    Ok(graph)
}

pub fn load_checkpoint(path: &Path) -> Result<ComputeGraph> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint_bytes(&bytes)
}

// ── the training loop ────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: MetricsRecord,
}

pub const TRAIN_LOG_HEADER: [&str; 8] = [
    "epoch",
    "train_loss",
    "val_jac",
    "val_dice",
    "val_precision",
    "val_recall",
    "val_specificity",
    "val_meaniu",
];

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .log
            .iter()
            .map(|e| {
                let mut row = vec![e.epoch.to_string(), format!("{}", e.train_loss)];
                row.extend([
                    format!("{}", e.val.jaccard),
                    format!("{}", e.val.dice),
                    format!("{}", e.val.precision),
                    format!("{}", e.val.recall),
                    format!("{}", e.val.specificity),
                    format!("{}", e.val.mean_iu),
                ]);
                row
            })
            .collect();
        csv_string(&TRAIN_LOG_HEADER, &rows)
    }
}

fn stack_batch(samples: &[&SegSample], num_classes: usize) -> Result<(TensorData, TensorData)> {
    let first = samples[0].image.shape;
    let n = samples.len();
    let mut input = TensorData::zeros(Shape::new(n, first.c, first.h, first.w));
    let mut target = TensorData::zeros(Shape::new(n, num_classes.max(1), first.h, first.w));
    let img_plane = first.c * first.h * first.w;
    let tgt_plane = num_classes.max(1) * first.h * first.w;
    for (i, s) in samples.iter().enumerate() {
        if s.image.shape != first {
            return Err(Error::ShapeMismatch {
                op: "stack_batch",
                axis: "height",
                expected: first.h,
                got: s.image.shape.h,
            });
        }
        input.data[i * img_plane..(i + 1) * img_plane].copy_from_slice(&s.image.data);
        let t = mask_to_target(&s.mask, num_classes)?;
        target.data[i * tgt_plane..(i + 1) * tgt_plane].copy_from_slice(&t.data);
    }
    Ok((input, target))
}

fn shuffled(indices: &mut [usize], rng: &mut ChaCha12Rng) {
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
}

/// Split, then run epochs of minibatch Adam over the total loss, evaluating
/// the validation slice each epoch. The best-validation-dice checkpoint is
/// kept at `checkpoint_path` (when given); a non-finite loss aborts with the
/// last best checkpoint already on disk.
pub fn train(
    graph: &mut ComputeGraph,
    samples: &[SegSample],
    cfg: &TrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::BadOperand {
            op: "train",
            msg: "empty dataset".into(),
        });
    }

    // Independent per-purpose rng streams.
    let mut split_rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x5EED_0001);
    let mut aug_rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x5EED_0002);
    let mut drop_rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x5EED_0003);

    let mut order: Vec<usize> = (0..samples.len()).collect();
    shuffled(&mut order, &mut split_rng);
    let val_count = if samples.len() >= 5 {
        ((samples.len() as f64 * VAL_FRACTION).round() as usize).max(1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(val_count);
    let val_set: Vec<SegSample> = val_idx.iter().map(|&i| samples[i].clone()).collect();
    let mut train_order: Vec<usize> = train_idx.to_vec();

    let num_classes = graph.spec.num_classes;
    let mut state = AdamState::new();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best_dice = f64::NEG_INFINITY;
    let mut best_epoch = 0;

    for epoch in 1..=cfg.epochs {
        shuffled(&mut train_order, &mut split_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in train_order.chunks(cfg.batch_size) {
            let mut batch: Vec<SegSample> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = if cfg.augment {
                    augment(&samples[i], &mut aug_rng)?
                } else {
                    samples[i].clone()
                };
                batch.push(s);
            }
            let refs: Vec<&SegSample> = batch.iter().collect();
            let (input, target) = stack_batch(&refs, num_classes)?;
            let mut pass = graph.forward(&input, Mode::Train, &mut drop_rng)?;
            let main = loss_of_kind(cfg.main_loss, &mut pass.tape, pass.output, &target)?;
            let aux = match pass.aux_output {
                Some(a) => Some(loss_of_kind(cfg.main_loss, &mut pass.tape, a, &target)?),
                None => None,
            };
            let total = total_loss(
                &mut pass.tape,
                main,
                aux,
                pass.registrar.conv_weight_nodes(),
                cfg.weight_decay,
            )?;
            let loss_value = pass.tape.scalar_value(total);
            if !loss_value.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("training loss at epoch {epoch}"),
                });
            }
            pass.tape.backward(total)?;
            graph.collect_grads(&pass.tape, &pass.registrar);
            drop(pass);
            adam_step(graph, &mut state, cfg)?;
            epoch_loss += loss_value;
            batches += 1;
        }
        let train_loss = epoch_loss / batches.max(1) as f64;

        let eval_set: &[SegSample] = if val_set.is_empty() { samples } else { &val_set };
        let (val, _) = evaluate(graph, eval_set, 0.5)?;
        if val.dice > best_dice {
            best_dice = val.dice;
            best_epoch = epoch;
            if let Some(path) = checkpoint_path {
                save_checkpoint(graph, path)?;
            }
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            val,
        });
    }

    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_dice: best_dice,
    })
}

#[cfg(test)]
#[path = "training_tests.rs"]
mod tests;
