//! Declarative network description, graph construction, and analytic
//! receptive fields.
//!
//! A network is a VGG-style encoder of M stages (stage 1 = full resolution,
//! channels typically doubling per stage) and a mirrored decoder. Two kinds
//! of crutch connections wire the two together:
//!
//! - ICC: encoder stage i feeds decoder stage m for every i >= m (full mode).
//!   The feature map is bilinearly resized to stage-m resolution, projected
//!   by a 1x1 conv to stage-m width, and concatenated into the decoder input.
//! - OCC: each decoder stage output is resized to full resolution, projected
//!   to class logits by a 1x1 conv, and summed into the final prediction.
//!
//! Commensurate-only ICC plus last-only OCC degenerates to the U-Net skip
//! topology. The deepest decoder "stage" is the identity pass of the deepest
//! encoder output: its commensurate edge is that pass-through, so the full
//! topology has M(M+1)/2 ICC edges and the degenerate one has M.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Mode, RunningStats, Shape, Tape, Tensor, TensorData};

pub const DROPOUT_RATE: f64 = 0.5;

// ── specification ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IccMode {
    Full,
    Commensurate,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OccMode {
    All,
    Last,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    /// 1-based; stage 1 is the highest resolution.
    pub index: usize,
    pub convs: usize,
    pub channels: usize,
    /// Whether a 2x2 max pool follows the stage (true for all but the deepest).
    pub downsample: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
    pub icc_mode: IccMode,
    pub occ_mode: OccMode,
    pub input_channels: usize,
}

impl NetworkSpec {
    /// The reference network: 5 stages, 2 convs per stage, widths 64..1024,
    /// full ICC, all-stage OCC, single foreground class.
    pub fn reference() -> Self {
        NetworkSpec::with_widths(&[64, 128, 256, 512, 1024], 2, IccMode::Full, OccMode::All)
    }

    /// The degenerate topology equal to the classic U-Net skip layout.
    pub fn unet() -> Self {
        NetworkSpec::with_widths(
            &[64, 128, 256, 512, 1024],
            2,
            IccMode::Commensurate,
            OccMode::Last,
        )
    }

    pub fn with_widths(widths: &[usize], convs: usize, icc: IccMode, occ: OccMode) -> Self {
        let m = widths.len();
        NetworkSpec {
            stages: widths
                .iter()
                .enumerate()
                .map(|(i, &channels)| StageSpec {
                    index: i + 1,
                    convs,
                    channels,
                    downsample: i + 1 < m,
                })
                .collect(),
            num_classes: 1,
            icc_mode: icc,
            occ_mode: occ,
            input_channels: 1,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Total encoder conv count N.
    pub fn encoder_conv_count(&self) -> usize {
        self.stages.iter().map(|s| s.convs).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() < 2 {
            return Err(Error::Semantic {
                field: "stages",
                msg: format!("need at least 2 stages, got {}", self.stages.len()),
            });
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.index != i + 1 {
                return Err(Error::Semantic {
                    field: "stage",
                    msg: format!("stage {} out of order (expected {})", s.index, i + 1),
                });
            }
            if s.convs == 0 {
                return Err(Error::Semantic {
                    field: "convs",
                    msg: format!("stage {} has zero convs", s.index),
                });
            }
            if s.channels == 0 {
                return Err(Error::Semantic {
                    field: "channels",
                    msg: format!("stage {} has zero channels", s.index),
                });
            }
            let expect_pool = i + 1 < self.stages.len();
            if s.downsample != expect_pool {
                return Err(Error::Semantic {
                    field: "downsample",
                    msg: format!(
                        "stage {} must {} a pool (all stages but the deepest pool)",
                        s.index,
                        if expect_pool { "have" } else { "not have" }
                    ),
                });
            }
        }
        if self.num_classes == 0 {
            return Err(Error::Semantic {
                field: "classes",
                msg: "need at least 1 class".into(),
            });
        }
        if self.input_channels == 0 {
            return Err(Error::Semantic {
                field: "input_channels",
                msg: "need at least 1 input channel".into(),
            });
        }
        Ok(())
    }

    /// Canonical grammar serialization; `parse_spec` round-trips it.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "stages {}", self.stages.len());
        for st in &self.stages {
            let _ = writeln!(
                s,
                "stage {} convs={} channels={}",
                st.index, st.convs, st.channels
            );
        }
        let _ = writeln!(s, "classes {}", self.num_classes);
        let icc = match self.icc_mode {
            IccMode::Full => "full",
            IccMode::Commensurate => "commensurate",
            IccMode::None => "none",
        };
        let _ = writeln!(s, "icc {icc}");
        let occ = match self.occ_mode {
            OccMode::All => "all",
            OccMode::Last => "last",
        };
        let _ = writeln!(s, "occ {occ}");
        let _ = writeln!(s, "input_channels {}", self.input_channels);
        s
    }
}

fn syntax(line: usize, col: usize, msg: impl Into<String>) -> Error {
    Error::Syntax {
        line,
        col,
        msg: msg.into(),
    }
}

struct LineTokens<'a> {
    line_no: usize,
    tokens: Vec<(usize, &'a str)>, // (1-based column, token)
}

fn tokenize(text: &str) -> Vec<LineTokens<'_>> {
    text.lines()
        .enumerate()
        .filter_map(|(i, raw)| {
            let body = raw.split('#').next().unwrap_or("");
            let tokens: Vec<(usize, &str)> = body
                .split_whitespace()
                .map(|tok| {
                    let col = tok.as_ptr() as usize - raw.as_ptr() as usize + 1;
                    (col, tok)
                })
                .collect();
            if tokens.is_empty() {
                None
            } else {
                Some(LineTokens {
                    line_no: i + 1,
                    tokens,
                })
            }
        })
        .collect()
}

fn parse_usize(line: usize, col: usize, tok: &str, what: &str) -> Result<usize> {
    tok.parse::<usize>()
        .map_err(|_| syntax(line, col, format!("expected {what}, got `{tok}`")))
}

fn parse_kv(line: usize, col: usize, tok: &str, key: &str) -> Result<usize> {
    match tok.strip_prefix(key).and_then(|r| r.strip_prefix('=')) {
        Some(v) => parse_usize(line, col + key.len() + 1, v, key),
        None => Err(syntax(line, col, format!("expected `{key}=<int>`, got `{tok}`"))),
    }
}

/// Parse the line-oriented network grammar:
///
/// ```text
/// stages <M>
/// stage <m> convs=<n> channels=<c>
/// classes <k>
/// icc full|commensurate|none
/// occ all|last
/// input_channels <c>
/// ```
///
/// `#` starts a comment; `stages` must come first, remaining lines are
/// order-insensitive. Missing `classes`, `icc`, `occ`, `input_channels`
/// default to 1 / full / all / 1.
pub fn parse_spec(text: &str) -> Result<NetworkSpec> {
    let lines = tokenize(text);
    let mut iter = lines.iter();
    let first = iter
        .next()
        .ok_or_else(|| syntax(1, 1, "empty specification"))?;
    if first.tokens[0].1 != "stages" {
        return Err(syntax(
            first.line_no,
            first.tokens[0].0,
            "specification must start with `stages <M>`",
        ));
    }
    if first.tokens.len() != 2 {
        return Err(syntax(first.line_no, first.tokens[0].0, "expected `stages <M>`"));
    }
    let m = parse_usize(first.line_no, first.tokens[1].0, first.tokens[1].1, "stage count")?;
    if m < 2 {
        return Err(Error::Semantic {
            field: "stages",
            msg: format!("need at least 2 stages, got {m}"),
        });
    }

    let mut stages: Vec<Option<StageSpec>> = vec![None; m];
    let mut num_classes = 1;
    let mut icc_mode = IccMode::Full;
    let mut occ_mode = OccMode::All;
    let mut input_channels = 1;

    for lt in iter {
        let (c0, key) = lt.tokens[0];
        let ln = lt.line_no;
        match key {
            "stage" => {
                if lt.tokens.len() != 4 {
                    return Err(syntax(ln, c0, "expected `stage <m> convs=<n> channels=<c>`"));
                }
                let idx = parse_usize(ln, lt.tokens[1].0, lt.tokens[1].1, "stage index")?;
                if idx == 0 || idx > m {
                    return Err(Error::Semantic {
                        field: "stage",
                        msg: format!("stage index {idx} outside 1..={m}"),
                    });
                }
                let convs = parse_kv(ln, lt.tokens[2].0, lt.tokens[2].1, "convs")?;
                let channels = parse_kv(ln, lt.tokens[3].0, lt.tokens[3].1, "channels")?;
                if stages[idx - 1].is_some() {
                    return Err(Error::Semantic {
                        field: "stage",
                        msg: format!("stage {idx} declared twice"),
                    });
                }
                stages[idx - 1] = Some(StageSpec {
                    index: idx,
                    convs,
                    channels,
                    downsample: idx < m,
                });
            }
            "classes" => {
                if lt.tokens.len() != 2 {
                    return Err(syntax(ln, c0, "expected `classes <k>`"));
                }
                num_classes = parse_usize(ln, lt.tokens[1].0, lt.tokens[1].1, "class count")?;
            }
            "icc" => {
                if lt.tokens.len() != 2 {
                    return Err(syntax(ln, c0, "expected `icc full|commensurate|none`"));
                }
                icc_mode = match lt.tokens[1].1 {
                    "full" => IccMode::Full,
                    "commensurate" => IccMode::Commensurate,
                    "none" => IccMode::None,
                    other => {
                        return Err(syntax(ln, lt.tokens[1].0, format!("unknown icc mode `{other}`")))
                    }
                };
            }
            "occ" => {
                if lt.tokens.len() != 2 {
                    return Err(syntax(ln, c0, "expected `occ all|last`"));
                }
                occ_mode = match lt.tokens[1].1 {
                    "all" => OccMode::All,
                    "last" => OccMode::Last,
                    other => {
                        return Err(syntax(ln, lt.tokens[1].0, format!("unknown occ mode `{other}`")))
                    }
                };
            }
            "input_channels" => {
                if lt.tokens.len() != 2 {
                    return Err(syntax(ln, c0, "expected `input_channels <c>`"));
                }
                input_channels = parse_usize(ln, lt.tokens[1].0, lt.tokens[1].1, "channel count")?;
            }
            "stages" => {
                return Err(syntax(ln, c0, "`stages` may only appear once, first"));
            }
            other => {
                return Err(syntax(ln, c0, format!("unknown keyword `{other}`")));
            }
        }
    }

    let mut resolved = Vec::with_capacity(m);
    for (i, s) in stages.into_iter().enumerate() {
        match s {
            Some(s) => resolved.push(s),
            None => {
                return Err(Error::Semantic {
                    field: "stage",
                    msg: format!("stage {} not declared", i + 1),
                })
            }
        }
    }
    let spec = NetworkSpec {
        stages: resolved,
        num_classes,
        icc_mode,
        occ_mode,
        input_channels,
    };
    spec.validate()?;
    Ok(spec)
}

// ── parameters and layers ────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    Gamma,
    Beta,
}

/// One learnable array. Values live behind `Arc` so a live tape snapshot
/// survives a later optimizer step (copy-on-write).
#[derive(Clone, Debug)]
pub struct ParamBuf {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Shape,
    pub data: Arc<Vec<f64>>,
    pub grad: Vec<f64>,
}

impl ParamBuf {
    fn new(name: String, kind: ParamKind, shape: Shape, data: Vec<f64>) -> Self {
        let grad = vec![0.0; data.len()];
        ParamBuf {
            name,
            kind,
            shape,
            data: Arc::new(data),
            grad,
        }
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        let v: &mut Vec<f64> = Arc::make_mut(&mut self.data);
        v
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: ParamBuf,
    bias: ParamBuf,
    padding: usize,
}

impl ConvLayer {
    /// He initialization: w ~ N(0, sqrt(2 / fan_in)), zero bias.
    fn new(name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha12Rng) -> Self {
        let ws = Shape::new(cout, cin, k, k);
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("he init std");
        let w: Vec<f64> = (0..ws.numel()).map(|_| normal.sample(rng)).collect();
        ConvLayer {
            weight: ParamBuf::new(format!("{name}.w"), ParamKind::ConvWeight, ws, w),
            bias: ParamBuf::new(
                format!("{name}.b"),
                ParamKind::ConvBias,
                Shape::new(1, cout, 1, 1),
                vec![0.0; cout],
            ),
            padding: k / 2,
        }
    }

    fn ones(name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let ws = Shape::new(cout, cin, k, k);
        ConvLayer {
            weight: ParamBuf::new(
                format!("{name}.w"),
                ParamKind::ConvWeight,
                ws,
                vec![1.0; ws.numel()],
            ),
            bias: ParamBuf::new(
                format!("{name}.b"),
                ParamKind::ConvBias,
                Shape::new(1, cout, 1, 1),
                vec![0.0; cout],
            ),
            padding: k / 2,
        }
    }

    fn forward(&self, tape: &mut Tape, x: Tensor, reg: &mut Registrar) -> Result<Tensor> {
        let w = reg.bind(tape, &self.weight);
        let b = reg.bind(tape, &self.bias);
        tape.conv2d(x, w, b, 1, self.padding)
    }
}

#[derive(Clone, Debug)]
struct BnLayer {
    gamma: ParamBuf,
    beta: ParamBuf,
    running: RunningStats,
}

impl BnLayer {
    fn new(name: &str, channels: usize) -> Self {
        BnLayer {
            gamma: ParamBuf::new(
                format!("{name}.g"),
                ParamKind::Gamma,
                Shape::new(1, channels, 1, 1),
                vec![1.0; channels],
            ),
            beta: ParamBuf::new(
                format!("{name}.bt"),
                ParamKind::Beta,
                Shape::new(1, channels, 1, 1),
                vec![0.0; channels],
            ),
            running: RunningStats::identity(channels),
        }
    }
}

/// conv 3x3 → batch norm → relu, the standard block of both paths.
#[derive(Clone, Debug)]
struct ConvBlock {
    conv: ConvLayer,
    bn: BnLayer,
}

impl ConvBlock {
    fn new(name: &str, cin: usize, cout: usize, rng: &mut ChaCha12Rng) -> Self {
        ConvBlock {
            conv: ConvLayer::new(&format!("{name}.conv"), cin, cout, 3, rng),
            bn: BnLayer::new(&format!("{name}.bn"), cout),
        }
    }

    fn ones(name: &str, cin: usize, cout: usize) -> Self {
        ConvBlock {
            conv: ConvLayer::ones(&format!("{name}.conv"), cin, cout, 3),
            bn: BnLayer::new(&format!("{name}.bn"), cout),
        }
    }

    /// Returns (conv output, block output). Linearized graphs skip bn + relu.
    fn forward(
        &mut self,
        tape: &mut Tape,
        x: Tensor,
        mode: Mode,
        linearized: bool,
        reg: &mut Registrar,
    ) -> Result<(Tensor, Tensor)> {
        let conv_out = self.conv.forward(tape, x, reg)?;
        if linearized {
            return Ok((conv_out, conv_out));
        }
        let g = reg.bind(tape, &self.bn.gamma);
        let b = reg.bind(tape, &self.bn.beta);
        let bn = tape.batch_norm2d(conv_out, g, b, &mut self.bn.running, mode)?;
        let out = tape.relu(bn);
        Ok((conv_out, out))
    }

    /// Eval forward without touching block state (running stats are only
    /// read in eval mode).
    fn forward_eval(
        &self,
        tape: &mut Tape,
        x: Tensor,
        linearized: bool,
        reg: &mut Registrar,
    ) -> Result<(Tensor, Tensor)> {
        let conv_out = self.conv.forward(tape, x, reg)?;
        if linearized {
            return Ok((conv_out, conv_out));
        }
        let g = reg.bind(tape, &self.bn.gamma);
        let b = reg.bind(tape, &self.bn.beta);
        let mut rs = self.bn.running.clone();
        let bn = tape.batch_norm2d(conv_out, g, b, &mut rs, Mode::Eval)?;
        let out = tape.relu(bn);
        Ok((conv_out, out))
    }
}

/// Records which tape node each parameter was bound to during one forward
/// pass, so gradients can be pulled back into the graph afterwards.
#[derive(Default)]
pub struct Registrar {
    bindings: Vec<(String, Tensor)>,
    conv_weights: Vec<Tensor>,
}

impl Registrar {
    fn bind(&mut self, tape: &mut Tape, p: &ParamBuf) -> Tensor {
        let t = tape.leaf_shared(p.shape, p.data.clone(), true);
        self.bindings.push((p.name.clone(), t));
        if p.kind == ParamKind::ConvWeight {
            self.conv_weights.push(t);
        }
        t
    }

    pub fn bindings(&self) -> &[(String, Tensor)] {
        &self.bindings
    }

    /// Tape nodes of every bound conv weight (the L2-regularized set).
    pub fn conv_weight_nodes(&self) -> &[Tensor] {
        &self.conv_weights
    }
}

// ── the compute graph ────────────────────────────────────────────────

/// One ICC edge, as topology information.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IccEdgeInfo {
    pub from_stage: usize,
    pub to_stage: usize,
}

#[derive(Clone, Debug)]
struct IccEdge {
    from_stage: usize,
    to_stage: usize,
    /// Absent only for the deepest stage's pass-through edge (M → M),
    /// which carries the encoder output unchanged.
    proj: Option<ConvLayer>,
}

#[derive(Clone, Debug)]
struct OccHead {
    stage: usize,
    head: ConvLayer,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    /// Receiving stage index m (1..M-1).
    stage: usize,
    upsampler: ConvBlock,
    blocks: Vec<ConvBlock>,
}

/// One element of the graph's persistent state.
pub enum StateItem<'a> {
    Param(&'a ParamBuf),
    Stats {
        name: &'a str,
        stats: &'a RunningStats,
    },
}

pub enum StateItemMut<'a> {
    Param(&'a mut ParamBuf),
    Stats {
        name: &'a str,
        stats: &'a mut RunningStats,
    },
}

/// Where the auxiliary supervision branch reads from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AuxAttachment {
    /// Reuses the existing OCC head of this decoder stage; adds no weights.
    ReusedOcc { stage: usize },
    /// A synthesized OCC-style head on this decoder stage's output (used
    /// when the topology has no head there, e.g. last-only OCC).
    SynthesizedHead { stage: usize },
    /// Case-2: stacked convs extending the encoder tail as a side branch.
    EncoderTail { stacked: usize },
}

#[derive(Clone, Debug)]
struct AuxBranch {
    attachment: AuxAttachment,
    /// Case-2 stacked blocks; empty for Case-1.
    blocks: Vec<ConvBlock>,
    /// Class head for the synthesized / Case-2 variants.
    head: Option<ConvLayer>,
}

/// Output of a full forward pass, with every intermediate the probes and
/// the supervision logic need to inspect.
pub struct ForwardPass {
    pub tape: Tape,
    /// Post-activation class probabilities at input resolution.
    pub output: Tensor,
    pub merged_logits: Tensor,
    /// E_1..E_M (deepest entry is post-dropout).
    pub encoder_stages: Vec<Tensor>,
    /// y_1..y_M; y_M is the deepest encoder output itself.
    pub decoder_stages: Vec<Tensor>,
    /// Conv outputs (pre-norm) of encoder layers h = 1..N.
    pub encoder_layers: Vec<Tensor>,
    pub occ_logits: Vec<(usize, Tensor)>,
    /// Post-activation auxiliary probabilities when a branch is attached.
    pub aux_output: Option<Tensor>,
    pub registrar: Registrar,
}

/// Encoder-only forward pass used by the receptive-field probes.
pub struct EncoderPass {
    pub tape: Tape,
    pub input: Tensor,
    /// Conv outputs (pre-norm) of encoder layers h = 1..N.
    pub layer_outputs: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ComputeGraph {
    pub spec: NetworkSpec,
    encoder: Vec<Vec<ConvBlock>>,
    decoder: Vec<DecoderStage>,
    icc: Vec<IccEdge>,
    occ: Vec<OccHead>,
    aux: Option<AuxBranch>,
    /// Probe copy: relu/norm/dropout skipped, max pool averaged.
    pub linearized: bool,
}

/// Build an executable graph from a validated spec, He-initialized.
pub fn build_graph(spec: &NetworkSpec, rng: &mut ChaCha12Rng) -> Result<ComputeGraph> {
    spec.validate()?;
    let m = spec.num_stages();
    let ch = |s: usize| spec.stages[s - 1].channels;

    let mut encoder = Vec::with_capacity(m);
    for s in 1..=m {
        let mut blocks = Vec::with_capacity(spec.stages[s - 1].convs);
        for b in 0..spec.stages[s - 1].convs {
            let cin = if b == 0 {
                if s == 1 {
                    spec.input_channels
                } else {
                    ch(s - 1)
                }
            } else {
                ch(s)
            };
            blocks.push(ConvBlock::new(&format!("enc.s{s}.b{b}"), cin, ch(s), rng));
        }
        encoder.push(blocks);
    }

    let mut icc = Vec::new();
    match spec.icc_mode {
        IccMode::Full => {
            for to in 1..=m {
                for from in to..=m {
                    icc.push(make_icc_edge(spec, from, to, rng));
                }
            }
        }
        IccMode::Commensurate => {
            for s in 1..=m {
                icc.push(make_icc_edge(spec, s, s, rng));
            }
        }
        IccMode::None => {}
    }

    let mut decoder = Vec::with_capacity(m - 1);
    for s in (1..m).rev() {
        let upsampler = ConvBlock::new(&format!("up.s{s}"), ch(s + 1), ch(s), rng);
        let incoming = icc
            .iter()
            .filter(|e| e.to_stage == s && e.proj.is_some())
            .count();
        let concat_width = ch(s) * (1 + incoming);
        let mut blocks = Vec::with_capacity(spec.stages[s - 1].convs);
        for b in 0..spec.stages[s - 1].convs {
            let cin = if b == 0 { concat_width } else { ch(s) };
            blocks.push(ConvBlock::new(&format!("dec.s{s}.b{b}"), cin, ch(s), rng));
        }
        decoder.push(DecoderStage {
            stage: s,
            upsampler,
            blocks,
        });
    }

    let occ_stages: Vec<usize> = match spec.occ_mode {
        OccMode::All => (1..=m).collect(),
        OccMode::Last => vec![1],
    };
    let occ = occ_stages
        .into_iter()
        .map(|s| OccHead {
            stage: s,
            head: ConvLayer::new(&format!("occ.s{s}"), ch(s), spec.num_classes, 1, rng),
        })
        .collect();

    Ok(ComputeGraph {
        spec: spec.clone(),
        encoder,
        decoder,
        icc,
        occ,
        aux: None,
        linearized: false,
    })
}

fn make_icc_edge(spec: &NetworkSpec, from: usize, to: usize, rng: &mut ChaCha12Rng) -> IccEdge {
    let m = spec.num_stages();
    let proj = if from == m && to == m {
        None
    } else {
        Some(ConvLayer::new(
            &format!("icc.e{from}.d{to}"),
            spec.stages[from - 1].channels,
            spec.stages[to - 1].channels,
            1,
            rng,
        ))
    };
    IccEdge {
        from_stage: from,
        to_stage: to,
        proj,
    }
}

impl ComputeGraph {
    pub fn icc_edges(&self) -> Vec<IccEdgeInfo> {
        self.icc
            .iter()
            .map(|e| IccEdgeInfo {
                from_stage: e.from_stage,
                to_stage: e.to_stage,
            })
            .collect()
    }

    /// Stages that feed the output merge.
    pub fn occ_edges(&self) -> Vec<usize> {
        self.occ.iter().map(|h| h.stage).collect()
    }

    pub fn aux_attachment(&self) -> Option<&AuxAttachment> {
        self.aux.as_ref().map(|a| &a.attachment)
    }

    /// Encoder conv count N, tail extension included.
    pub fn encoder_conv_count(&self) -> usize {
        self.encoder.iter().map(|b| b.len()).sum()
    }

    /// Stage of encoder layer h (1-based both ways).
    pub fn stage_of_layer(&self, h: usize) -> Result<usize> {
        if h >= 1 {
            let mut seen = 0;
            for (i, blocks) in self.encoder.iter().enumerate() {
                seen += blocks.len();
                if h <= seen {
                    return Ok(i + 1);
                }
            }
        }
        Err(Error::BadOperand {
            op: "stage_of_layer",
            msg: format!("layer {h} outside 1..={}", self.encoder_conv_count()),
        })
    }

    /// Analytic receptive-field size (square side, in input pixels) of every
    /// encoder conv layer h = 1..N: r_h = r_{h-1} + (k_h - 1)·∏_{i<h} s_i,
    /// pool strides included, independent of weights.
    pub fn theoretical_rf(&self) -> Vec<usize> {
        let m = self.encoder.len();
        let mut rf = Vec::with_capacity(self.encoder_conv_count());
        let mut r = 1usize;
        let mut jump = 1usize;
        for (i, blocks) in self.encoder.iter().enumerate() {
            for _ in blocks {
                r += 2 * jump; // k = 3
                rf.push(r);
            }
            if i + 1 < m {
                r += jump; // pool k = 2
                jump *= 2;
            }
        }
        rf
    }

    /// Exact count of learnable scalars (aux branch included when attached).
    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        self.visit_params(|p| total += p.shape.numel());
        total
    }

    pub fn visit_params(&self, mut f: impl FnMut(&ParamBuf)) {
        self.walk(&mut |item| {
            if let StateItem::Param(p) = item {
                f(p);
            }
        });
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&mut ParamBuf)) {
        self.walk_mut(&mut |item| {
            if let StateItemMut::Param(p) = item {
                f(p);
            }
        });
    }

    /// Visit checkpoint state: every parameter plus batch-norm running stats.
    pub fn visit_state(&self, mut f: impl FnMut(StateItem)) {
        self.walk(&mut f);
    }

    pub fn visit_state_mut(&mut self, mut f: impl FnMut(StateItemMut)) {
        self.walk_mut(&mut f);
    }

    fn walk(&self, f: &mut dyn FnMut(StateItem)) {
        fn block(b: &ConvBlock, f: &mut dyn FnMut(StateItem)) {
            f(StateItem::Param(&b.conv.weight));
            f(StateItem::Param(&b.conv.bias));
            f(StateItem::Param(&b.bn.gamma));
            f(StateItem::Param(&b.bn.beta));
        }
        for blocks in &self.encoder {
            for b in blocks {
                block(b, f);
            }
        }
        for d in &self.decoder {
            block(&d.upsampler, f);
            for b in &d.blocks {
                block(b, f);
            }
        }
        for e in &self.icc {
            if let Some(p) = &e.proj {
                f(StateItem::Param(&p.weight));
                f(StateItem::Param(&p.bias));
            }
        }
        for h in &self.occ {
            f(StateItem::Param(&h.head.weight));
            f(StateItem::Param(&h.head.bias));
        }
        if let Some(aux) = &self.aux {
            for b in &aux.blocks {
                block(b, f);
            }
            if let Some(h) = &aux.head {
                f(StateItem::Param(&h.weight));
                f(StateItem::Param(&h.bias));
            }
        }
        // Running stats share the block's bn name.
        for (s, blocks) in self.encoder.iter().enumerate() {
            for (i, b) in blocks.iter().enumerate() {
                f(StateItem::Stats {
                    name: &format!("enc.s{}.b{i}.bn", s + 1),
                    stats: &b.bn.running,
                });
            }
        }
        for d in &self.decoder {
            f(StateItem::Stats {
                name: &format!("up.s{}.bn", d.stage),
                stats: &d.upsampler.bn.running,
            });
            for (i, b) in d.blocks.iter().enumerate() {
                f(StateItem::Stats {
                    name: &format!("dec.s{}.b{i}.bn", d.stage),
                    stats: &b.bn.running,
                });
            }
        }
        if let Some(aux) = &self.aux {
            for (i, b) in aux.blocks.iter().enumerate() {
                f(StateItem::Stats {
                    name: &format!("aux.b{i}.bn"),
                    stats: &b.bn.running,
                });
            }
        }
    }

    fn walk_mut(&mut self, f: &mut dyn FnMut(StateItemMut)) {
        fn block(b: &mut ConvBlock, f: &mut dyn FnMut(StateItemMut)) {
            f(StateItemMut::Param(&mut b.conv.weight));
            f(StateItemMut::Param(&mut b.conv.bias));
            f(StateItemMut::Param(&mut b.bn.gamma));
            f(StateItemMut::Param(&mut b.bn.beta));
        }
        for blocks in &mut self.encoder {
            for b in blocks {
                block(b, f);
            }
        }
        for d in &mut self.decoder {
            block(&mut d.upsampler, f);
            for b in &mut d.blocks {
                block(b, f);
            }
        }
        for e in &mut self.icc {
            if let Some(p) = &mut e.proj {
                f(StateItemMut::Param(&mut p.weight));
                f(StateItemMut::Param(&mut p.bias));
            }
        }
        for h in &mut self.occ {
            f(StateItemMut::Param(&mut h.head.weight));
            f(StateItemMut::Param(&mut h.head.bias));
        }
        if let Some(aux) = &mut self.aux {
            for b in &mut aux.blocks {
                block(b, f);
            }
            if let Some(h) = &mut aux.head {
                f(StateItemMut::Param(&mut h.weight));
                f(StateItemMut::Param(&mut h.bias));
            }
        }
        for (s, blocks) in self.encoder.iter_mut().enumerate() {
            for (i, b) in blocks.iter_mut().enumerate() {
                f(StateItemMut::Stats {
                    name: &format!("enc.s{}.b{i}.bn", s + 1),
                    stats: &mut b.bn.running,
                });
            }
        }
        for d in &mut self.decoder {
            f(StateItemMut::Stats {
                name: &format!("up.s{}.bn", d.stage),
                stats: &mut d.upsampler.bn.running,
            });
            for (i, b) in d.blocks.iter_mut().enumerate() {
                f(StateItemMut::Stats {
                    name: &format!("dec.s{}.b{i}.bn", d.stage),
                    stats: &mut b.bn.running,
                });
            }
        }
        if let Some(aux) = &mut self.aux {
            for (i, b) in aux.blocks.iter_mut().enumerate() {
                f(StateItemMut::Stats {
                    name: &format!("aux.b{i}.bn"),
                    stats: &mut b.bn.running,
                });
            }
        }
    }

    /// Fresh He draw for every conv weight, zero biases, identity norms.
    /// Probe trials call this between measurements. No-op on linearized
    /// graphs, whose all-positive weights are part of their construction.
    pub fn randomize_weights(&mut self, rng: &mut ChaCha12Rng) {
        if self.linearized {
            return;
        }
        self.visit_params_mut(|p| {
            match p.kind {
                ParamKind::ConvWeight => {
                    let fan_in = p.shape.c * p.shape.h * p.shape.w;
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("std");
                    for v in Arc::make_mut(&mut p.data).iter_mut() {
                        *v = normal.sample(rng);
                    }
                }
                ParamKind::ConvBias | ParamKind::Beta => {
                    for v in Arc::make_mut(&mut p.data).iter_mut() {
                        *v = 0.0;
                    }
                }
                ParamKind::Gamma => {
                    for v in Arc::make_mut(&mut p.data).iter_mut() {
                        *v = 1.0;
                    }
                }
            }
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        });
        self.visit_state_mut(|item| {
            if let StateItemMut::Stats { stats, .. } = item {
                stats.mean.iter_mut().for_each(|v| *v = 0.0);
                stats.var.iter_mut().for_each(|v| *v = 1.0);
            }
        });
    }

    /// Single-channel all-positive copy with identity nonlinearities and
    /// average pooling: same spatial connectivity, hence the exact analytic
    /// influence support. Only the encoder is materialized — this is the
    /// oracle-side twin for receptive-field checks, probed via
    /// [`ComputeGraph::forward_encoder`].
    pub fn linearize(&self) -> ComputeGraph {
        let mut spec = self.spec.clone();
        for s in &mut spec.stages {
            s.channels = 1;
        }
        spec.input_channels = 1;
        spec.num_classes = 1;
        let mut encoder = Vec::with_capacity(self.encoder.len());
        for (s, blocks) in self.encoder.iter().enumerate() {
            let mut nb = Vec::with_capacity(blocks.len());
            for i in 0..blocks.len() {
                nb.push(ConvBlock::ones(&format!("enc.s{}.b{i}", s + 1), 1, 1));
            }
            encoder.push(nb);
        }
        ComputeGraph {
            spec,
            encoder,
            decoder: Vec::new(),
            icc: Vec::new(),
            occ: Vec::new(),
            aux: None,
            linearized: true,
        }
    }

    /// Copy holding just the encoder, for probe work: cloning skips the
    /// decoder's parameter and gradient buffers.
    pub fn encoder_only(&self) -> ComputeGraph {
        ComputeGraph {
            spec: self.spec.clone(),
            encoder: self.encoder.clone(),
            decoder: Vec::new(),
            icc: Vec::new(),
            occ: Vec::new(),
            aux: None,
            linearized: self.linearized,
        }
    }

    /// Copy with `k` extra 3x3 channel-preserving conv blocks appended to the
    /// deepest encoder stage (layers N+1..N+k). Probe-side construction for
    /// evaluating extended-tail receptive fields; only meant for
    /// [`ComputeGraph::forward_encoder`].
    pub fn with_extended_tail(&self, k: usize, rng: &mut ChaCha12Rng) -> ComputeGraph {
        let mut g = self.clone();
        let last = g.encoder.len() - 1;
        let ch = g.spec.stages[last].channels;
        let base = g.encoder[last].len();
        for i in 0..k {
            let name = format!("enc.s{}.b{}", last + 1, base + i);
            let block = if self.linearized {
                ConvBlock::ones(&name, ch, ch)
            } else {
                ConvBlock::new(&name, ch, ch, rng)
            };
            g.encoder[last].push(block);
        }
        g
    }

    /// Forward through encoder layers 1..=upto (default all), eval-style:
    /// running norm stats, no dropout. Returns per-layer conv outputs.
    pub fn forward_encoder(&self, input: &TensorData, upto: Option<usize>) -> Result<EncoderPass> {
        let n_total = self.encoder_conv_count();
        let upto = upto.unwrap_or(n_total);
        if upto == 0 || upto > n_total {
            return Err(Error::BadOperand {
                op: "forward_encoder",
                msg: format!("layer {upto} outside 1..={n_total}"),
            });
        }
        if input.shape.c != self.spec.input_channels {
            return Err(Error::ShapeMismatch {
                op: "forward_encoder",
                axis: "input channels",
                expected: self.spec.input_channels,
                got: input.shape.c,
            });
        }
        let mut tape = Tape::new();
        let mut reg = Registrar::default();
        let xt = tape.leaf(input.clone());
        let mut x = xt;
        let mut layer_outputs = Vec::with_capacity(upto);
        let stages = self.encoder.len();
        'outer: for (i, blocks) in self.encoder.iter().enumerate() {
            for b in blocks {
                let (conv_out, out) = b.forward_eval(&mut tape, x, self.linearized, &mut reg)?;
                layer_outputs.push(conv_out);
                x = out;
                if layer_outputs.len() == upto {
                    break 'outer;
                }
            }
            if i + 1 < stages {
                x = if self.linearized {
                    tape.avg_pool2d(x)?
                } else {
                    tape.max_pool2d(x)?
                };
            }
        }
        Ok(EncoderPass {
            tape,
            input: xt,
            layer_outputs,
        })
    }

    /// Full forward pass. Train mode needs the dropout rng; eval ignores it.
    pub fn forward(
        &mut self,
        input: &TensorData,
        mode: Mode,
        rng: &mut ChaCha12Rng,
    ) -> Result<ForwardPass> {
        let m = self.spec.num_stages();
        let div = 1usize << (m - 1);
        if input.shape.h % div != 0 || input.shape.w % div != 0 {
            return Err(Error::BadOperand {
                op: "forward",
                msg: format!(
                    "input {}x{} not divisible by 2^{} = {div}; pad the input",
                    input.shape.h,
                    input.shape.w,
                    m - 1
                ),
            });
        }
        if input.shape.c != self.spec.input_channels {
            return Err(Error::ShapeMismatch {
                op: "forward",
                axis: "input channels",
                expected: self.spec.input_channels,
                got: input.shape.c,
            });
        }

        let mut tape = Tape::new();
        let mut reg = Registrar::default();
        let linearized = self.linearized;
        let xt = tape.leaf(input.clone());

        // Encoder.
        let mut encoder_stages = Vec::with_capacity(m);
        let mut encoder_layers = Vec::new();
        let mut x = xt;
        for s in 0..m {
            for b in self.encoder[s].iter_mut() {
                let (conv_out, out) = b.forward(&mut tape, x, mode, linearized, &mut reg)?;
                encoder_layers.push(conv_out);
                x = out;
            }
            if s + 1 < m {
                encoder_stages.push(x);
                x = if linearized {
                    tape.avg_pool2d(x)?
                } else {
                    tape.max_pool2d(x)?
                };
            } else {
                // One dropout at the end of the encoder.
                let dropped = if linearized {
                    x
                } else {
                    tape.dropout(x, DROPOUT_RATE, mode, rng)?
                };
                encoder_stages.push(dropped);
            }
        }

        // Decoder; stage M is the identity pass of E_M.
        let mut y: Vec<Option<Tensor>> = vec![None; m + 1];
        y[m] = Some(encoder_stages[m - 1]);
        for di in 0..self.decoder.len() {
            let s = self.decoder[di].stage;
            let prev = y[s + 1].expect("deeper decoder stage computed");
            let up_in = tape.upsample_bilinear2x(prev);
            let (_, main) =
                self.decoder[di]
                    .upsampler
                    .forward(&mut tape, up_in, mode, linearized, &mut reg)?;
            let mut parts = vec![main];
            let proj_edges: Vec<usize> = self
                .icc
                .iter()
                .enumerate()
                .filter(|(_, e)| e.to_stage == s && e.proj.is_some())
                .map(|(i, _)| i)
                .collect();
            for ei in proj_edges {
                let from = self.icc[ei].from_stage;
                let mut f = encoder_stages[from - 1];
                for _ in 0..(from - s) {
                    f = tape.upsample_bilinear2x(f);
                }
                let proj = self.icc[ei].proj.as_ref().expect("filtered on proj");
                parts.push(proj.forward(&mut tape, f, &mut reg)?);
            }
            let mut xd = tape.concat_channels(&parts)?;
            for b in self.decoder[di].blocks.iter_mut() {
                let (_, out) = b.forward(&mut tape, xd, mode, linearized, &mut reg)?;
                xd = out;
            }
            y[s] = Some(xd);
        }
        let decoder_stages: Vec<Tensor> = (1..=m).map(|s| y[s].expect("all stages built")).collect();

        // OCC heads and merge.
        let mut occ_logits = Vec::with_capacity(self.occ.len());
        let mut merged: Option<Tensor> = None;
        for headspec in &self.occ {
            let s = headspec.stage;
            let mut f = decoder_stages[s - 1];
            for _ in 0..(s - 1) {
                f = tape.upsample_bilinear2x(f);
            }
            let logits = headspec.head.forward(&mut tape, f, &mut reg)?;
            occ_logits.push((s, logits));
            merged = Some(match merged {
                Some(acc) => tape.add(acc, logits)?,
                None => logits,
            });
        }
        let merged_logits = merged.expect("at least one OCC head by construction");
        let output = self.activate(&mut tape, merged_logits);

        // Auxiliary branch: a pure reader of the trunk, never an input to it.
        let aux_output = if let Some(aux) = &mut self.aux {
            let logits = match aux.attachment {
                AuxAttachment::ReusedOcc { stage } => occ_logits
                    .iter()
                    .find(|(s, _)| *s == stage)
                    .map(|(_, t)| *t)
                    .ok_or_else(|| {
                        Error::Placement(format!("no OCC head at stage {stage} to reuse"))
                    })?,
                AuxAttachment::SynthesizedHead { stage } => {
                    let head = aux.head.as_ref().expect("synthesized head has a conv");
                    let mut f = decoder_stages[stage - 1];
                    for _ in 0..(stage - 1) {
                        f = tape.upsample_bilinear2x(f);
                    }
                    head.forward(&mut tape, f, &mut reg)?
                }
                AuxAttachment::EncoderTail { .. } => {
                    let mut f = encoder_stages[m - 1];
                    for b in aux.blocks.iter_mut() {
                        let (_, out) = b.forward(&mut tape, f, mode, linearized, &mut reg)?;
                        f = out;
                    }
                    let head = aux.head.as_ref().expect("tail branch has a class head");
                    let mut l = head.forward(&mut tape, f, &mut reg)?;
                    for _ in 0..(m - 1) {
                        l = tape.upsample_bilinear2x(l);
                    }
                    l
                }
            };
            Some(self.activate(&mut tape, logits))
        } else {
            None
        };

        Ok(ForwardPass {
            tape,
            output,
            merged_logits,
            encoder_stages,
            decoder_stages,
            encoder_layers,
            occ_logits,
            aux_output,
            registrar: reg,
        })
    }

    fn activate(&self, tape: &mut Tape, logits: Tensor) -> Tensor {
        if self.spec.num_classes == 1 {
            tape.sigmoid(logits)
        } else {
            tape.softmax_channels(logits)
        }
    }

    /// Pull gradients off a finished tape into the parameter buffers.
    pub fn collect_grads(&mut self, tape: &Tape, reg: &Registrar) {
        let mut by_name: HashMap<&str, Tensor> = HashMap::new();
        for (name, t) in reg.bindings() {
            by_name.insert(name.as_str(), *t);
        }
        self.visit_params_mut(|p| {
            if let Some(t) = by_name.get(p.name.as_str()) {
                match tape.grad(*t) {
                    Some(g) => p.grad.copy_from_slice(g),
                    None => p.grad.iter_mut().for_each(|v| *v = 0.0),
                }
            }
        });
    }

    // ── supervision branch surgery ───────────────────────────────────

    /// Attach an auxiliary branch. Case-1 reuses (or synthesizes) a decoder
    /// head; Case-2 stacks conv blocks off the encoder tail. The main path
    /// is never altered.
    pub fn attach_aux(&mut self, attachment: AuxAttachment, rng: &mut ChaCha12Rng) -> Result<()> {
        let m = self.spec.num_stages();
        let ch_m = self.spec.stages[m - 1].channels;
        let aux = match attachment {
            AuxAttachment::ReusedOcc { stage } => {
                if !self.occ.iter().any(|h| h.stage == stage) {
                    return Err(Error::Placement(format!(
                        "no OCC head at stage {stage}; topology has heads at {:?}",
                        self.occ_edges()
                    )));
                }
                AuxBranch {
                    attachment,
                    blocks: Vec::new(),
                    head: None,
                }
            }
            AuxAttachment::SynthesizedHead { stage } => {
                if stage == 0 || stage > m {
                    return Err(Error::Placement(format!("stage {stage} outside 1..={m}")));
                }
                let ch = self.spec.stages[stage - 1].channels;
                AuxBranch {
                    attachment,
                    blocks: Vec::new(),
                    head: Some(ConvLayer::new("aux.head", ch, self.spec.num_classes, 1, rng)),
                }
            }
            AuxAttachment::EncoderTail { stacked } => {
                if stacked == 0 {
                    return Err(Error::Placement("tail branch needs at least 1 conv".into()));
                }
                let blocks = (0..stacked)
                    .map(|i| ConvBlock::new(&format!("aux.b{i}"), ch_m, ch_m, rng))
                    .collect();
                AuxBranch {
                    attachment,
                    blocks,
                    head: Some(ConvLayer::new(
                        "aux.head",
                        ch_m,
                        self.spec.num_classes,
                        1,
                        rng,
                    )),
                }
            }
        };
        self.aux = Some(aux);
        Ok(())
    }

    pub fn detach_aux(&mut self) {
        self.aux = None;
    }
}

#[cfg(test)]
#[path = "netspec_tests.rs"]
mod tests;
