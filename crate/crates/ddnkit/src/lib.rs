//! Encoder-decoder segmentation networks with densely decoded skip topology
//! and adaptively placed deep supervision, built on a self-contained f64
//! reverse-mode autodiff engine.

pub mod ads;
pub mod data;
pub mod erf;
pub mod error;
pub mod objsize;
pub mod netspec;
pub mod tensor;
pub mod training;

pub use ads::{attach_aux_branch, place_ads, total_loss, AdsCase, AdsPlacement, AttachmentPlan, ExtensionProber, GraphExtensionProber, TableProber};
pub use data::{generate_synthetic, read_dataset, SegSample, SyntheticConfig};
pub use erf::{brute_force_rf, measure_all_layers, measure_lerf, GradMap, InfluenceRegion, LerfEntry, LerfReport, ProbeConfig};
pub use error::{Error, Result};
pub use objsize::{binarize, connected_components, estimate_obj, Connectivity, MaskImage, ObjEstimate};
pub use netspec::{build_graph, parse_spec, ComputeGraph, IccMode, NetworkSpec, OccMode, StageSpec};
pub use tensor::{Mode, Shape, Tape, Tensor, TensorData};
pub use training::{
    adam_step, augment, ce_loss, dice_loss, evaluate, jaccard_loss, load_checkpoint,
    save_checkpoint, train, AdamState, LossKind, MetricsRecord, TrainConfig, TrainOutcome,
};
