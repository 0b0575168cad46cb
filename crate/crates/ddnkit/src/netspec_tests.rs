use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::*;

fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

const REFERENCE_TEXT: &str = "\
# reference network
stages 5
stage 1 convs=2 channels=64
stage 2 convs=2 channels=128
stage 3 convs=2 channels=256
stage 4 convs=2 channels=512
stage 5 convs=2 channels=1024
classes 1
icc full
occ all
input_channels 1
";

#[test]
fn parses_reference_spec() {
    let spec = parse_spec(REFERENCE_TEXT).unwrap();
    assert_eq!(spec, NetworkSpec::reference());
    assert_eq!(spec.encoder_conv_count(), 10);
    // canonical serialization round-trips
    assert_eq!(parse_spec(&spec.to_text()).unwrap(), spec);
}

#[test]
fn parses_unet_spec() {
    let text = "\
stages 5
stage 1 convs=2 channels=64
stage 2 convs=2 channels=128
stage 3 convs=2 channels=256
stage 4 convs=2 channels=512
stage 5 convs=2 channels=1024
icc commensurate
occ last
";
    let spec = parse_spec(text).unwrap();
    assert_eq!(spec, NetworkSpec::unet());
}

#[test]
fn rejects_single_stage() {
    let err = parse_spec("stages 1\nstage 1 convs=2 channels=8\n").unwrap_err();
    match err {
        Error::Semantic { field, .. } => assert_eq!(field, "stages"),
        other => panic!("expected semantic error, got {other:?}"),
    }
}

#[test]
fn syntax_errors_carry_line_and_column() {
    let err = parse_spec("stages 2\nstage 1 convs=2 channels=8\nbogus 3\n").unwrap_err();
    match err {
        Error::Syntax { line, col, .. } => {
            assert_eq!(line, 3);
            assert_eq!(col, 1);
        }
        other => panic!("expected syntax error, got {other:?}"),
    }
    let err = parse_spec("stages 2\nstage 1 convs=x channels=8\nstage 2 convs=1 channels=8\n")
        .unwrap_err();
    match err {
        Error::Syntax { line, col, .. } => {
            assert_eq!(line, 2);
            assert_eq!(col, 15); // the value after `convs=`
        }
        other => panic!("expected syntax error, got {other:?}"),
    }
}

#[test]
fn missing_stage_is_reported_by_field() {
    let err = parse_spec("stages 3\nstage 1 convs=1 channels=4\nstage 3 convs=1 channels=4\n")
        .unwrap_err();
    match err {
        Error::Semantic { field, msg } => {
            assert_eq!(field, "stage");
            assert!(msg.contains("stage 2"));
        }
        other => panic!("{other:?}"),
    }
}

fn small_spec(icc: IccMode, occ: OccMode) -> NetworkSpec {
    NetworkSpec::with_widths(&[4, 6, 8], 2, icc, occ)
}

#[test]
fn full_icc_edge_counts() {
    let spec = NetworkSpec::with_widths(&[2, 2, 2, 2, 2], 1, IccMode::Full, OccMode::All);
    let g = build_graph(&spec, &mut rng(1)).unwrap();
    let m = 5;
    assert_eq!(g.icc_edges().len(), m * (m + 1) / 2);
    let into = |s: usize| g.icc_edges().iter().filter(|e| e.to_stage == s).count();
    assert_eq!(into(1), 5);
    assert_eq!(into(4), 2);
    for e in g.icc_edges() {
        assert!(e.from_stage >= e.to_stage);
    }
    assert_eq!(g.occ_edges(), vec![1, 2, 3, 4, 5]);
}

#[test]
fn unet_degenerate_edge_counts() {
    let spec = small_spec(IccMode::Commensurate, OccMode::Last);
    let g = build_graph(&spec, &mut rng(2)).unwrap();
    assert_eq!(g.icc_edges().len(), 3);
    for (i, e) in g.icc_edges().iter().enumerate() {
        assert_eq!((e.from_stage, e.to_stage), (i + 1, i + 1));
    }
    assert_eq!(g.occ_edges(), vec![1]);
}

#[test]
fn forward_output_shape_and_stage_resolutions() {
    for (icc, occ) in [
        (IccMode::Full, OccMode::All),
        (IccMode::Commensurate, OccMode::Last),
        (IccMode::None, OccMode::All),
    ] {
        let mut spec = small_spec(icc, occ);
        spec.num_classes = 3;
        let mut g = build_graph(&spec, &mut rng(3)).unwrap();
        let input = TensorData::randn(Shape::new(2, 1, 16, 16), &mut rng(4));
        let pass = g.forward(&input, Mode::Eval, &mut rng(5)).unwrap();
        assert_eq!(pass.output.shape, Shape::new(2, 3, 16, 16));
        // y_m at the resolution of encoder stage m
        for (m, y) in pass.decoder_stages.iter().enumerate() {
            let scale = 1 << m;
            assert_eq!(y.shape.h, 16 / scale, "stage {} height", m + 1);
            assert_eq!(y.shape.w, 16 / scale);
        }
        for (i, e) in pass.encoder_stages.iter().enumerate() {
            let scale = 1 << i;
            assert_eq!(e.shape.h, 16 / scale);
        }
        assert_eq!(pass.encoder_layers.len(), 6);
    }
}

#[test]
fn forward_rejects_indivisible_input() {
    let spec = small_spec(IccMode::Full, OccMode::All);
    let mut g = build_graph(&spec, &mut rng(6)).unwrap();
    let input = TensorData::zeros(Shape::new(1, 1, 18, 18));
    let err = match g.forward(&input, Mode::Eval, &mut rng(7)) {
        Err(e) => e,
        Ok(_) => panic!("expected divisibility error"),
    };
    assert!(err.to_string().contains("pad"), "{err}");
}

#[test]
fn eval_forward_is_pure() {
    let spec = small_spec(IccMode::Full, OccMode::All);
    let mut g = build_graph(&spec, &mut rng(8)).unwrap();
    let input = TensorData::randn(Shape::new(1, 1, 16, 16), &mut rng(9));
    let a = {
        let p = g.forward(&input, Mode::Eval, &mut rng(10)).unwrap();
        p.tape.to_data(p.output)
    };
    let b = {
        let p = g.forward(&input, Mode::Eval, &mut rng(11)).unwrap();
        p.tape.to_data(p.output)
    };
    assert_eq!(a, b);
}

#[test]
fn merge_is_a_sum_of_occ_heads() {
    let spec = small_spec(IccMode::Full, OccMode::All);
    let mut g = build_graph(&spec, &mut rng(12)).unwrap();
    // Zero every OCC head except stage 2.
    g.visit_params_mut(|p| {
        if p.name.starts_with("occ.") && !p.name.starts_with("occ.s2.") {
            for v in p.values_mut() {
                *v = 0.0;
            }
        }
    });
    let input = TensorData::randn(Shape::new(1, 1, 16, 16), &mut rng(13));
    let pass = g.forward(&input, Mode::Eval, &mut rng(14)).unwrap();
    let merged = pass.tape.value(pass.merged_logits).to_vec();
    let (_, head2) = pass.occ_logits.iter().find(|(s, _)| *s == 2).unwrap();
    let head2 = pass.tape.value(*head2).to_vec();
    for (m, h) in merged.iter().zip(&head2) {
        assert_eq!(*m, *h);
    }
}

#[test]
fn theoretical_rf_composition() {
    // one 3x3 conv → 3; two → 5; pool doubles the jump for everything after
    let spec = NetworkSpec::with_widths(&[2, 2], 2, IccMode::Commensurate, OccMode::Last);
    let g = build_graph(&spec, &mut rng(15)).unwrap();
    assert_eq!(g.theoretical_rf(), vec![3, 5, 10, 14]);

    let reference = build_graph(&NetworkSpec::reference(), &mut rng(16)).unwrap();
    let rf = reference.theoretical_rf();
    assert_eq!(rf, vec![3, 5, 10, 14, 24, 32, 52, 68, 108, 140]);
    // strictly increasing, independent of weights
    for w in rf.windows(2) {
        assert!(w[0] < w[1]);
    }
}

#[test]
fn parameter_count_arithmetic() {
    let spec = NetworkSpec::with_widths(&[2, 4], 1, IccMode::Full, OccMode::All);
    let g = build_graph(&spec, &mut rng(17)).unwrap();
    // encoder: conv(1→2)+bn(2), conv(2→4)+bn(4)
    let enc = (2 * 9 + 2 + 4) + (4 * 2 * 9 + 4 + 8);
    // icc projections: (1→1) 2→2, (2→1) 4→2; the (2→2) edge is a pass-through
    let icc = (2 * 2 + 2) + (2 * 4 + 2);
    // decoder stage 1: upsampler conv(4→2)+bn(2); one block conv(6→2)+bn(2)
    let dec = (2 * 4 * 9 + 2 + 4) + (2 * 6 * 9 + 2 + 4);
    // occ heads: s1 1x1 2→1, s2 1x1 4→1
    let occ = (2 + 1) + (4 + 1);
    assert_eq!(g.parameter_count(), enc + icc + dec + occ);
}

#[test]
fn stage_of_layer_maps_ordinals() {
    let spec = small_spec(IccMode::Full, OccMode::All); // 2 convs per stage, 3 stages
    let g = build_graph(&spec, &mut rng(18)).unwrap();
    assert_eq!(g.stage_of_layer(1).unwrap(), 1);
    assert_eq!(g.stage_of_layer(2).unwrap(), 1);
    assert_eq!(g.stage_of_layer(3).unwrap(), 2);
    assert_eq!(g.stage_of_layer(6).unwrap(), 3);
    assert!(g.stage_of_layer(7).is_err());
    assert!(g.stage_of_layer(0).is_err());
}

#[test]
fn linearized_copy_keeps_layer_structure() {
    let g = build_graph(&small_spec(IccMode::Full, OccMode::All), &mut rng(19)).unwrap();
    let lin = g.linearize();
    assert!(lin.linearized);
    assert_eq!(lin.encoder_conv_count(), g.encoder_conv_count());
    assert_eq!(lin.theoretical_rf(), g.theoretical_rf());
    // all-ones weights, zero bias
    lin.visit_params(|p| {
        let expect = match p.kind {
            ParamKind::ConvWeight => 1.0,
            _ => 0.0,
        };
        if p.kind == ParamKind::ConvWeight || p.kind == ParamKind::ConvBias {
            assert!(p.data.iter().all(|&v| v == expect), "{}", p.name);
        }
    });
}

#[test]
fn extended_tail_adds_layers() {
    let g = build_graph(&small_spec(IccMode::Full, OccMode::All), &mut rng(20)).unwrap();
    let ext = g.with_extended_tail(2, &mut rng(21));
    assert_eq!(ext.encoder_conv_count(), g.encoder_conv_count() + 2);
    let rf = ext.theoretical_rf();
    let base = g.theoretical_rf();
    assert_eq!(&rf[..base.len()], &base[..]);
    // each extension conv grows the rf by 2·jump at the deepest stage
    let jump = 1 << (g.spec.num_stages() - 1);
    assert_eq!(rf[base.len()], base[base.len() - 1] + 2 * jump);
}

#[test]
fn encoder_prefix_matches_full_forward() {
    let spec = small_spec(IccMode::Full, OccMode::All);
    let mut g = build_graph(&spec, &mut rng(22)).unwrap();
    let input = TensorData::randn(Shape::new(1, 1, 16, 16), &mut rng(23));
    let full = g.forward(&input, Mode::Eval, &mut rng(24)).unwrap();
    let enc = g.forward_encoder(&input, None).unwrap();
    assert_eq!(enc.layer_outputs.len(), 6);
    for (a, b) in enc.layer_outputs.iter().zip(&full.encoder_layers) {
        assert_eq!(enc.tape.value(*a), full.tape.value(*b));
    }
}

#[test]
fn aux_attach_detach_leaves_eval_output_bit_identical() {
    let spec = small_spec(IccMode::Full, OccMode::All);
    let mut g = build_graph(&spec, &mut rng(25)).unwrap();
    let input = TensorData::randn(Shape::new(1, 1, 16, 16), &mut rng(26));
    let before = {
        let p = g.forward(&input, Mode::Eval, &mut rng(0)).unwrap();
        p.tape.to_data(p.output)
    };
    let count_before = g.parameter_count();

    // Case-1 reuse: no new weights, aux output present, main output unchanged.
    g.attach_aux(AuxAttachment::ReusedOcc { stage: 2 }, &mut rng(27)).unwrap();
    assert_eq!(g.parameter_count(), count_before);
    let with_aux = g.forward(&input, Mode::Eval, &mut rng(0)).unwrap();
    assert!(with_aux.aux_output.is_some());
    assert_eq!(with_aux.tape.to_data(with_aux.output), before);

    // Case-2 tail: parameter count grows by exactly the stacked blocks + head.
    g.detach_aux();
    g.attach_aux(AuxAttachment::EncoderTail { stacked: 2 }, &mut rng(28)).unwrap();
    let ch = 8; // deepest width of small_spec
    let expected_growth = 2 * (ch * ch * 9 + ch + 2 * ch) + (ch + 1);
    assert_eq!(g.parameter_count(), count_before + expected_growth);
    let with_tail = g.forward(&input, Mode::Eval, &mut rng(0)).unwrap();
    assert_eq!(with_tail.tape.to_data(with_tail.output), before);

    g.detach_aux();
    assert_eq!(g.parameter_count(), count_before);
    let after = {
        let p = g.forward(&input, Mode::Eval, &mut rng(0)).unwrap();
        p.tape.to_data(p.output)
    };
    assert_eq!(after, before);
}

#[test]
fn aux_reuse_requires_existing_head() {
    let spec = small_spec(IccMode::Commensurate, OccMode::Last);
    let mut g = build_graph(&spec, &mut rng(29)).unwrap();
    assert!(g.attach_aux(AuxAttachment::ReusedOcc { stage: 2 }, &mut rng(30)).is_err());
    // synthesized head works on any stage and adds exactly head weights
    let count = g.parameter_count();
    g.attach_aux(AuxAttachment::SynthesizedHead { stage: 2 }, &mut rng(31)).unwrap();
    assert_eq!(g.parameter_count(), count + 6 + 1); // 1x1 conv 6→1 + bias
}

#[test]
fn randomize_weights_resets_norm_state() {
    let spec = small_spec(IccMode::Full, OccMode::All);
    let mut g = build_graph(&spec, &mut rng(32)).unwrap();
    let input = TensorData::randn(Shape::new(2, 1, 16, 16), &mut rng(33));
    // drift the running stats
    g.forward(&input, Mode::Train, &mut rng(34)).unwrap();
    g.randomize_weights(&mut rng(35));
    g.visit_state(|item| {
        if let StateItem::Stats { stats, .. } = item {
            assert!(stats.mean.iter().all(|&v| v == 0.0));
            assert!(stats.var.iter().all(|&v| v == 1.0));
        }
    });
}
