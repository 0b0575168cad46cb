//! Layer-wise effective receptive field measurement.
//!
//! A trial seeds a one-hot gradient at the center output node of an encoder
//! conv layer, back-propagates to the input, and reads the input-gradient
//! magnitude map (max |∂q/∂p| over input channels). The smallest pixel set
//! carrying `mass` of the total magnitude, taken in descending magnitude
//! order, defines the trial's region; its square root is the LERF. Weights
//! and input are re-randomized every trial and the mean over trials is
//! reported, following the 2-standard-deviation (95.45% mass) threshold
//! convention with 20 trials.
//!
//! The independent oracle is [`brute_force_rf`]: one forward pass per
//! perturbed input pixel, no gradients involved.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::data::{atomic_write, csv_string, write_pgm, Raster};
use crate::error::{Error, Result};
use crate::netspec::ComputeGraph;
use crate::tensor::{Shape, TensorData};

pub const DEFAULT_TRIALS: usize = 20;
/// Gradient-mass fraction matching a two-standard-deviation cut.
pub const DEFAULT_MASS: f64 = 0.9545;
/// Extra input pixels beyond the theoretical RF so the probed region never
/// clips at the borders.
pub const RF_MARGIN: usize = 8;

#[derive(Clone, Copy, Debug)]
pub struct ProbeConfig {
    pub trials: usize,
    pub mass: f64,
    pub input_size: usize,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn new(trials: usize, mass: f64, input_size: usize, seed: u64) -> Self {
        ProbeConfig {
            trials,
            mass,
            input_size,
            seed,
        }
    }

    /// Config with the smallest input that fits every layer of `graph`.
    pub fn for_graph(graph: &ComputeGraph, seed: u64) -> Self {
        ProbeConfig {
            trials: DEFAULT_TRIALS,
            mass: DEFAULT_MASS,
            input_size: default_input_size(graph),
            seed,
        }
    }
}

/// Smallest input side that keeps the deepest layer's RF clear of borders
/// and divides evenly through every pool.
pub fn default_input_size(graph: &ComputeGraph) -> usize {
    let rf = graph.theoretical_rf();
    let need = rf.last().copied().unwrap_or(1) + RF_MARGIN;
    let div = 1usize << (graph.spec.num_stages() - 1);
    need.div_ceil(div) * div
}

/// Input-gradient magnitude map of one probe trial.
#[derive(Clone, Debug)]
pub struct GradMap {
    pub width: usize,
    pub height: usize,
    /// max over input channels of |∂q/∂p|, row-major.
    pub values: Vec<f64>,
}

impl GradMap {
    pub fn is_all_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Pixels with any gradient at all.
    pub fn nonzero_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn nonzero_bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.values[y * self.width + x] != 0.0 {
                    bbox = Some(match bbox {
                        None => (x, y, x, y),
                        Some(b) => (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y)),
                    });
                }
            }
        }
        bbox
    }

    /// Size of the smallest pixel set (descending by magnitude) whose summed
    /// magnitude reaches `mass` of the total. Zero-magnitude pixels never
    /// enter the set.
    pub fn threshold_count(&self, mass: f64) -> usize {
        let total = self.total();
        if total <= 0.0 {
            return 0;
        }
        let mut mags: Vec<f64> = self.values.iter().copied().filter(|&v| v != 0.0).collect();
        mags.sort_unstable_by(|a, b| b.partial_cmp(a).expect("finite magnitudes"));
        // Tiny relative slack so mass = 1.0 means "all nonzero pixels"
        // regardless of summation order.
        let target = mass * total * (1.0 - 1e-12);
        let mut acc = 0.0;
        for (i, v) in mags.iter().enumerate() {
            acc += v;
            if acc >= target {
                return i + 1;
            }
        }
        mags.len()
    }

    /// Trial LERF: square root of the thresholded region size.
    pub fn lerf(&self, mass: f64) -> f64 {
        (self.threshold_count(mass) as f64).sqrt()
    }

    /// Mean magnitude per integer-radius ring around the map's peak.
    pub fn ring_profile(&self) -> Vec<f64> {
        let peak = self
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let (cx, cy) = ((peak % self.width) as f64, (peak / self.width) as f64);
        let mut sums: Vec<(f64, usize)> = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let r = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt().round() as usize;
                if sums.len() <= r {
                    sums.resize(r + 1, (0.0, 0));
                }
                sums[r].0 += self.values[y * self.width + x];
                sums[r].1 += 1;
            }
        }
        sums.iter()
            .map(|(s, c)| if *c == 0 { 0.0 } else { s / *c as f64 })
            .collect()
    }
}

fn check_probe_pre(graph: &ComputeGraph, h: usize, input_size: usize) -> Result<()> {
    let n = graph.encoder_conv_count();
    if h == 0 || h > n {
        return Err(Error::BadOperand {
            op: "measure_lerf",
            msg: format!("layer {h} outside 1..={n}"),
        });
    }
    let rf = graph.theoretical_rf()[h - 1];
    if input_size < rf + RF_MARGIN {
        return Err(Error::BadOperand {
            op: "measure_lerf",
            msg: format!(
                "input_size {input_size} < theoretical_rf({h}) + {RF_MARGIN} = {}",
                rf + RF_MARGIN
            ),
        });
    }
    let div = 1usize << (graph.stage_of_layer(h)? - 1);
    if input_size % div != 0 {
        return Err(Error::BadOperand {
            op: "measure_lerf",
            msg: format!("input_size {input_size} not divisible by {div}"),
        });
    }
    Ok(())
}

/// Gradient map of a single probe at layer `h` with the graph's current
/// weights and the given input: forward, one-hot seed at the center node of
/// channel 0, backward.
pub fn probe_trial(graph: &ComputeGraph, h: usize, input: &TensorData) -> Result<GradMap> {
    let mut pass = graph.forward_encoder(input, Some(h))?;
    let t = pass.layer_outputs[h - 1];
    pass.tape
        .seed_gradient_at(t, 0, t.shape.h / 2, t.shape.w / 2)?;
    Ok(grad_map_of(&pass))
}

fn grad_map_of(pass: &crate::netspec::EncoderPass) -> GradMap {
    let shape = pass.input.shape;
    let g = pass
        .tape
        .grad(pass.input)
        .expect("input reachable from any encoder layer");
    let plane = shape.h * shape.w;
    let mut values = vec![0.0; plane];
    for c in 0..shape.c {
        for p in 0..plane {
            let m = g[c * plane + p].abs();
            if m > values[p] {
                values[p] = m;
            }
        }
    }
    GradMap {
        width: shape.w,
        height: shape.h,
        values,
    }
}

fn trial_rng(seed: u64, trial: usize, retry: usize) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(
        seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (retry as u64).wrapping_mul(0xD1B5_4A32_D192_ED03),
    )
}

const MAX_RETRIES: usize = 5;

/// One full trial: fresh weights, fresh unit-Gaussian input, one gradient
/// map per requested layer. Retries with fresh randomness when a map comes
/// back all-zero (dead activations).
fn run_trial(
    work: &mut ComputeGraph,
    layers: &[usize],
    input_size: usize,
    seed: u64,
    trial: usize,
) -> Result<Vec<GradMap>> {
    let cin = work.spec.input_channels;
    let deepest = *layers.iter().max().expect("at least one layer");
    for retry in 0..=MAX_RETRIES {
        let mut rng = trial_rng(seed, trial, retry);
        work.randomize_weights(&mut rng);
        let input = TensorData::randn(Shape::new(1, cin, input_size, input_size), &mut rng);
        let mut pass = work.forward_encoder(&input, Some(deepest))?;
        let mut maps = Vec::with_capacity(layers.len());
        let mut dead = false;
        for &h in layers {
            let t = pass.layer_outputs[h - 1];
            pass.tape
                .seed_gradient_at(t, 0, t.shape.h / 2, t.shape.w / 2)?;
            let map = grad_map_of(&pass);
            if map.is_all_zero() {
                dead = true;
                break;
            }
            maps.push(map);
        }
        if !dead {
            return Ok(maps);
        }
    }
    Err(Error::DeadGradient {
        layer: deepest,
        retries: MAX_RETRIES,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    // population std: well-defined for a single trial
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// LERF of encoder layer `h`: mean and std of the trial values.
pub fn measure_lerf(graph: &ComputeGraph, h: usize, cfg: &ProbeConfig) -> Result<(f64, f64)> {
    check_probe_pre(graph, h, cfg.input_size)?;
    let mut work = graph.encoder_only();
    let mut values = Vec::with_capacity(cfg.trials);
    for trial in 0..cfg.trials {
        let maps = run_trial(&mut work, &[h], cfg.input_size, cfg.seed, trial)?;
        values.push(maps[0].lerf(cfg.mass));
    }
    Ok(mean_std(&values))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LerfEntry {
    pub layer: usize,
    pub theoretical_rf: usize,
    pub lerf_mean: f64,
    pub lerf_std: f64,
    pub trials: usize,
}

/// Per-layer measurement report. `network_lerf` is the deepest layer's mean.
#[derive(Clone, Debug)]
pub struct LerfReport {
    pub entries: Vec<LerfEntry>,
    pub mass: f64,
    pub input_size: usize,
    pub seed: u64,
}

impl LerfReport {
    pub fn network_lerf(&self) -> f64 {
        self.entries.last().map(|e| e.lerf_mean).unwrap_or(0.0)
    }

    pub fn lerf_of(&self, layer: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.layer == layer)
            .map(|e| e.lerf_mean)
    }

    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .entries
            .iter()
            .map(|e| {
                vec![
                    e.layer.to_string(),
                    e.theoretical_rf.to_string(),
                    format!("{}", e.lerf_mean),
                    format!("{}", e.lerf_std),
                ]
            })
            .collect();
        csv_string(&["layer", "theoretical_rf", "lerf_mean", "lerf_std"], &rows)
    }

    /// Parse the 4-column CSV emitted by `to_csv`. Trial counts are not part
    /// of the wire format; parsed entries carry `trials = 0`.
    pub fn from_csv(text: &str) -> Result<LerfReport> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Syntax {
            line: 1,
            col: 1,
            msg: "empty report".into(),
        })?;
        if header.trim() != "layer,theoretical_rf,lerf_mean,lerf_std" {
            return Err(Error::Syntax {
                line: 1,
                col: 1,
                msg: format!("unexpected header `{header}`"),
            });
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(Error::Syntax {
                    line: i + 1,
                    col: 1,
                    msg: format!("expected 4 columns, got {}", cols.len()),
                });
            }
            let parse_f = |s: &str, col: usize| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|_| Error::Syntax {
                    line: i + 1,
                    col,
                    msg: format!("bad number `{s}`"),
                })
            };
            entries.push(LerfEntry {
                layer: parse_f(cols[0], 1)? as usize,
                theoretical_rf: parse_f(cols[1], 2)? as usize,
                lerf_mean: parse_f(cols[2], 3)?,
                lerf_std: parse_f(cols[3], 4)?,
                trials: 0,
            });
        }
        if entries.is_empty() {
            return Err(Error::Syntax {
                line: 1,
                col: 1,
                msg: "report has no entries".into(),
            });
        }
        Ok(LerfReport {
            entries,
            mass: DEFAULT_MASS,
            input_size: 0,
            seed: 0,
        })
    }
}

/// Measure every encoder layer. Each trial shares one forward pass across
/// all layers (the seeded backward runs per layer), so layers within a trial
/// see the same weights and input; trials stay independent.
pub fn measure_all_layers(graph: &ComputeGraph, cfg: &ProbeConfig) -> Result<LerfReport> {
    measure_layers(graph, cfg, None)
}

/// Like [`measure_all_layers`] with per-trial map capture for heatmaps.
pub fn measure_layers(
    graph: &ComputeGraph,
    cfg: &ProbeConfig,
    mut capture: Option<&mut Vec<(usize, usize, GradMap)>>,
) -> Result<LerfReport> {
    let n = graph.encoder_conv_count();
    let layers: Vec<usize> = (1..=n).collect();
    check_probe_pre(graph, n, cfg.input_size)?;
    let mut work = graph.encoder_only();
    let rf = graph.theoretical_rf();
    let mut per_layer: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.trials); n];
    for trial in 0..cfg.trials {
        let maps = run_trial(&mut work, &layers, cfg.input_size, cfg.seed, trial)?;
        for (li, map) in maps.into_iter().enumerate() {
            per_layer[li].push(map.lerf(cfg.mass));
            if let Some(sink) = capture.as_deref_mut() {
                sink.push((layers[li], trial, map));
            }
        }
    }
    let entries = layers
        .iter()
        .map(|&h| {
            let (mean, std) = mean_std(&per_layer[h - 1]);
            LerfEntry {
                layer: h,
                theoretical_rf: rf[h - 1],
                lerf_mean: mean,
                lerf_std: std,
                trials: cfg.trials,
            }
        })
        .collect();
    Ok(LerfReport {
        entries,
        mass: cfg.mass,
        input_size: cfg.input_size,
        seed: cfg.seed,
    })
}

// ── brute-force oracle ───────────────────────────────────────────────

/// Exact influence region found by input perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InfluenceRegion {
    pub pixels: usize,
    /// (min_x, min_y, max_x, max_y), inclusive.
    pub bbox: (usize, usize, usize, usize),
}

pub const BRUTE_DELTA: f64 = 1e-3;
pub const BRUTE_THRESHOLD: f64 = 1e-9;

/// Perturb input pixels one at a time (δ = 1e-3 per channel, max response
/// over channels) and record which pixels move the layer-`h` center output
/// by more than 1e-9. Entirely forward passes — independent of the tape's
/// backward path.
///
/// Large inputs are scanned in expanding square rings around the center
/// node's input projection, stopping after two fully dead rings; small
/// inputs are scanned exhaustively.
pub fn brute_force_rf(graph: &ComputeGraph, h: usize, input: &TensorData) -> Result<InfluenceRegion> {
    let n = graph.encoder_conv_count();
    if h == 0 || h > n {
        return Err(Error::BadOperand {
            op: "brute_force_rf",
            msg: format!("layer {h} outside 1..={n}"),
        });
    }
    let base_pass = graph.forward_encoder(input, Some(h))?;
    let t = base_pass.layer_outputs[h - 1];
    let (ci, cj) = (t.shape.h / 2, t.shape.w / 2);
    let center = t.shape.at(0, 0, ci, cj);
    let q0 = base_pass.tape.value(t)[center];
    drop(base_pass);

    let (ih, iw) = (input.shape.h, input.shape.w);
    let channels = input.shape.c;
    let respond = |x: usize, y: usize| -> bool {
        for c in 0..channels {
            let mut perturbed = input.clone();
            let idx = perturbed.shape.at(0, c, y, x);
            perturbed.data[idx] += BRUTE_DELTA;
            let pass = graph
                .forward_encoder(&perturbed, Some(h))
                .expect("same shape as baseline");
            let q = pass.tape.value(pass.layer_outputs[h - 1])[center];
            if (q - q0).abs() > BRUTE_THRESHOLD {
                return true;
            }
        }
        false
    };

    let mut pixels = 0usize;
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    fn absorb(
        hits: &[(usize, usize)],
        pixels: &mut usize,
        bbox: &mut Option<(usize, usize, usize, usize)>,
    ) {
        for &(x, y) in hits {
            *pixels += 1;
            *bbox = Some(match *bbox {
                None => (x, y, x, y),
                Some(b) => (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y)),
            });
        }
    }

    if ih * iw <= 64 * 64 {
        // Exhaustive scan.
        let all: Vec<(usize, usize)> = (0..ih * iw).map(|p| (p % iw, p / iw)).collect();
        let hits: Vec<(usize, usize)> = all
            .par_iter()
            .filter(|&&(x, y)| respond(x, y))
            .copied()
            .collect();
        absorb(&hits, &mut pixels, &mut bbox);
    } else {
        // Ring scan around the center node's input projection.
        let jump = 1usize << (graph.stage_of_layer(h)? - 1);
        let ax = (cj * jump + (jump - 1) / 2).min(iw - 1);
        let ay = (ci * jump + (jump - 1) / 2).min(ih - 1);
        let max_r = ih.max(iw);
        let mut dead_rings = 0usize;
        for r in 0..=max_r {
            let ring = ring_pixels(ax, ay, r, iw, ih);
            if ring.is_empty() {
                break;
            }
            let hits: Vec<(usize, usize)> = ring
                .par_iter()
                .filter(|&&(x, y)| respond(x, y))
                .copied()
                .collect();
            if hits.is_empty() {
                if pixels > 0 {
                    dead_rings += 1;
                    if dead_rings >= 2 {
                        break;
                    }
                }
            } else {
                dead_rings = 0;
                absorb(&hits, &mut pixels, &mut bbox);
            }
        }
    }

    Ok(InfluenceRegion {
        pixels,
        bbox: bbox.unwrap_or((0, 0, 0, 0)),
    })
}

fn ring_pixels(ax: usize, ay: usize, r: usize, w: usize, h: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let (axi, ayi) = (ax as i64, ay as i64);
    let ri = r as i64;
    let push = |x: i64, y: i64, out: &mut Vec<(usize, usize)>| {
        if x >= 0 && y >= 0 && x < w as i64 && y < h as i64 {
            out.push((x as usize, y as usize));
        }
    };
    if r == 0 {
        push(axi, ayi, &mut out);
        return out;
    }
    for x in (axi - ri)..=(axi + ri) {
        push(x, ayi - ri, &mut out);
        push(x, ayi + ri, &mut out);
    }
    for y in (ayi - ri + 1)..(ayi + ri) {
        push(axi - ri, y, &mut out);
        push(axi + ri, y, &mut out);
    }
    out
}

// ── heatmap emission ─────────────────────────────────────────────────

/// Write the map as a peak-normalized 8-bit PGM plus a full-precision CSV
/// grid (header row c0..c{W-1}, one CSV row per image row).
pub fn emit_heatmap(map: &GradMap, pgm_path: &Path, csv_path: &Path) -> Result<()> {
    let peak = map.values.iter().cloned().fold(0.0f64, f64::max);
    let pixels: Vec<u8> = map
        .values
        .iter()
        .map(|&v| {
            if peak == 0.0 {
                0
            } else {
                (v / peak * 255.0).round() as u8
            }
        })
        .collect();
    write_pgm(
        pgm_path,
        &Raster {
            width: map.width,
            height: map.height,
            pixels,
        },
    )?;
    let header: Vec<String> = (0..map.width).map(|i| format!("c{i}")).collect();
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let rows: Vec<Vec<String>> = map
        .values
        .chunks(map.width)
        .map(|row| row.iter().map(|v| format!("{v}")).collect())
        .collect();
    atomic_write(csv_path, csv_string(&header_refs, &rows).as_bytes())
}

#[cfg(test)]
#[path = "erf_tests.rs"]
mod tests;
