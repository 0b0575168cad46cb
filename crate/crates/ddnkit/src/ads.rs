//! Adaptive placement of the auxiliary supervision branch.
//!
//! The routing rule compares the dataset's characteristic object size Obj
//! with the network's measured receptive field (the deepest layer's LERF):
//!
//! - Case-1 (network LERF >= Obj): supervise from the existing layer whose
//!   LERF is closest to Obj, through the decoder head linked to its stage.
//! - Case-2 (network LERF < Obj): the network cannot see the object; stack
//!   extra convs on a side branch off the encoder tail until the extended
//!   LERF residual |Obj - LERF_{N+k}| stops improving.
//!
//! The total training loss is main + aux (unit coefficients) plus L2 over
//! conv weights.

use rand_chacha::ChaCha12Rng;

use crate::erf::{self, LerfReport, ProbeConfig};
use crate::error::{Error, Result};
use crate::netspec::{AuxAttachment, ComputeGraph};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdsCase {
    One,
    Two,
}

impl std::fmt::Display for AdsCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AdsCase::One => write!(f, "1"),
            AdsCase::Two => write!(f, "2"),
        }
    }
}

/// Where the branch will be wired, before graph-specific resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttachmentPlan {
    /// Case-1: the decoder head whose skip path links to this encoder layer.
    DecoderHeadForLayer(usize),
    /// Case-2: side branch of this many stacked convs off the encoder tail.
    EncoderTail(usize),
}

/// The placement decision record.
#[derive(Clone, Debug)]
pub struct AdsPlacement {
    pub case: AdsCase,
    /// Case-1 target layer h*.
    pub target_layer: Option<usize>,
    /// Case-2 stacked conv count k.
    pub stacked_layers: Option<usize>,
    pub attachment: AttachmentPlan,
    /// |Obj - LERF| at the chosen point.
    pub match_residual: f64,
    pub obj: f64,
    pub network_lerf: f64,
}

pub const PLACEMENT_CSV_HEADER: &str =
    "case,target_layer,stacked_layers,match_residual,obj,network_lerf";

impl AdsPlacement {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.case,
            self.target_layer.map(|v| v.to_string()).unwrap_or_default(),
            self.stacked_layers.map(|v| v.to_string()).unwrap_or_default(),
            self.match_residual,
            self.obj,
            self.network_lerf
        )
    }

    pub fn rationale(&self) -> String {
        match self.case {
            AdsCase::One => format!(
                "network LERF {:.2} >= Obj {:.2}: supervise existing layer {} (residual {:.2})",
                self.network_lerf,
                self.obj,
                self.target_layer.unwrap_or(0),
                self.match_residual
            ),
            AdsCase::Two => format!(
                "network LERF {:.2} < Obj {:.2}: stack {} convs on the encoder tail (residual {:.2})",
                self.network_lerf,
                self.obj,
                self.stacked_layers.unwrap_or(0),
                self.match_residual
            ),
        }
    }
}

/// Source of extended-tail LERF values for Case-2 probing.
pub trait ExtensionProber {
    /// LERF of encoder layer N+k after stacking k convs on the tail.
    fn lerf_extended(&mut self, k: usize) -> Result<f64>;
}

/// Fixed table of extension values, for tests and routing studies.
pub struct TableProber(pub Vec<f64>);

impl ExtensionProber for TableProber {
    fn lerf_extended(&mut self, k: usize) -> Result<f64> {
        self.0.get(k - 1).copied().ok_or_else(|| Error::BadOperand {
            op: "TableProber",
            msg: format!("no table entry for extension {k}"),
        })
    }
}

/// Probes real extended copies of a graph, one measurement per k.
pub struct GraphExtensionProber<'a> {
    pub graph: &'a ComputeGraph,
    pub trials: usize,
    pub mass: f64,
    pub seed: u64,
}

impl<'a> GraphExtensionProber<'a> {
    pub fn new(graph: &'a ComputeGraph, report: &LerfReport) -> Self {
        let trials = report.entries.first().map(|e| e.trials).unwrap_or(0);
        GraphExtensionProber {
            graph,
            trials: if trials == 0 { erf::DEFAULT_TRIALS } else { trials },
            mass: report.mass,
            seed: report.seed,
        }
    }
}

impl ExtensionProber for GraphExtensionProber<'_> {
    fn lerf_extended(&mut self, k: usize) -> Result<f64> {
        let mut rng = rand::SeedableRng::seed_from_u64(
            self.seed ^ (k as u64).wrapping_mul(0x517C_C1B7_2722_0A95),
        );
        let ext = self.graph.with_extended_tail(k, &mut rng);
        let n = ext.encoder_conv_count();
        let size = erf::default_input_size(&ext);
        let cfg = ProbeConfig::new(self.trials, self.mass, size, self.seed.wrapping_add(k as u64));
        let (mean, _) = erf::measure_lerf(&ext, n, &cfg)?;
        Ok(mean)
    }
}

const MAX_STACKED: usize = 128;

/// Route between the two supervision cases and pick the attachment point.
///
/// Case-1 picks argmin_h |obj - lerf(h)|, ties to the shallower layer.
/// Case-2 probes k = 1, 2, ... and stops at the first k whose residual is
/// no worse than k+1's (the first local minimum; extension LERF grows with
/// k, so that is the global one).
pub fn place_ads(
    report: &LerfReport,
    obj: f64,
    prober: &mut dyn ExtensionProber,
) -> Result<AdsPlacement> {
    if !obj.is_finite() || obj <= 0.0 {
        return Err(Error::NonFinite {
            what: format!("obj = {obj}"),
        });
    }
    if report.entries.is_empty() {
        return Err(Error::BadOperand {
            op: "place_ads",
            msg: "empty LERF report".into(),
        });
    }
    let network_lerf = report.network_lerf();

    if network_lerf >= obj {
        let mut best: Option<(usize, f64)> = None;
        for e in &report.entries {
            let r = (obj - e.lerf_mean).abs();
            let better = match best {
                None => true,
                Some((_, br)) => r < br, // strict: ties keep the shallower layer
            };
            if better {
                best = Some((e.layer, r));
            }
        }
        let (layer, residual) = best.expect("non-empty report");
        return Ok(AdsPlacement {
            case: AdsCase::One,
            target_layer: Some(layer),
            stacked_layers: None,
            attachment: AttachmentPlan::DecoderHeadForLayer(layer),
            match_residual: residual,
            obj,
            network_lerf,
        });
    }

    let mut prev = (obj - prober.lerf_extended(1)?).abs();
    let mut k = 1;
    loop {
        if k + 1 > MAX_STACKED {
            return Err(Error::BadOperand {
                op: "place_ads",
                msg: format!("extension residual still falling after {MAX_STACKED} convs"),
            });
        }
        let next = (obj - prober.lerf_extended(k + 1)?).abs();
        if prev <= next {
            return Ok(AdsPlacement {
                case: AdsCase::Two,
                target_layer: None,
                stacked_layers: Some(k),
                attachment: AttachmentPlan::EncoderTail(k),
                match_residual: prev,
                obj,
                network_lerf,
            });
        }
        prev = next;
        k += 1;
    }
}

/// Resolve the plan against a concrete graph and attach the branch.
///
/// Case-1 walks from the target layer toward deeper layers until one sits in
/// a stage with a commensurate skip edge, then reuses that stage's decoder
/// head (synthesizing an identical head when the topology has none there).
/// Case-2 always builds the stacked side branch.
pub fn attach_aux_branch(
    graph: &mut ComputeGraph,
    placement: &AdsPlacement,
    rng: &mut ChaCha12Rng,
) -> Result<AuxAttachment> {
    let attachment = match placement.attachment {
        AttachmentPlan::EncoderTail(k) => AuxAttachment::EncoderTail { stacked: k },
        AttachmentPlan::DecoderHeadForLayer(target) => {
            let n = graph.encoder_conv_count();
            if target == 0 || target > n {
                return Err(Error::Placement(format!(
                    "target layer {target} outside 1..={n}"
                )));
            }
            let edges = graph.icc_edges();
            let mut linked_stage = None;
            for h in target..=n {
                let s = graph.stage_of_layer(h)?;
                if edges.iter().any(|e| e.from_stage == s && e.to_stage == s) {
                    linked_stage = Some(s);
                    break;
                }
            }
            let stage = linked_stage.ok_or_else(|| {
                Error::Placement(format!(
                    "no decoder stage linked to layer {target} or deeper (no skip edges in this \
                     topology)"
                ))
            })?;
            if graph.occ_edges().contains(&stage) {
                AuxAttachment::ReusedOcc { stage }
            } else {
                AuxAttachment::SynthesizedHead { stage }
            }
        }
    };
    graph.attach_aux(attachment.clone(), rng)?;
    Ok(attachment)
}

/// Loss_total = Loss_main + Loss_aux + λ·Σ w² over conv weights. Main and
/// aux enter at unit weight; biases and norm parameters are not decayed.
pub fn total_loss(
    tape: &mut Tape,
    main: Tensor,
    aux: Option<Tensor>,
    conv_weights: &[Tensor],
    weight_decay: f64,
) -> Result<Tensor> {
    for (t, name) in [(Some(main), "main loss"), (aux, "aux loss")] {
        if let Some(t) = t {
            let v = tape.scalar_value(t);
            if !v.is_finite() {
                return Err(Error::NonFinite { what: name.into() });
            }
        }
    }
    let mut total = main;
    if let Some(aux) = aux {
        total = tape.add(total, aux)?;
    }
    if weight_decay != 0.0 && !conv_weights.is_empty() {
        let mut l2: Option<Tensor> = None;
        for w in conv_weights {
            let sq = tape.square_sum(*w);
            l2 = Some(match l2 {
                Some(acc) => tape.add(acc, sq)?,
                None => sq,
            });
        }
        let l2 = tape.affine(l2.expect("nonempty"), weight_decay, 0.0);
        total = tape.add(total, l2)?;
    }
    Ok(total)
}

#[cfg(test)]
#[path = "ads_tests.rs"]
mod tests;
