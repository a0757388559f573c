use cotlab::formats::*;
use cotlab::svg::{emit_svg, Axes, PlotSeries};
use cotlab_core::task::{build_instance, build_tree, ground_truth_labels, sample_augmented, sample_inputs};
use cotlab_core::train::{train, DataSpec};
use cotlab_core::{Regime, TargetSource, TrainConfig};

#[test]
fn trace_csv_round_trips_exactly() {
    let tree = build_tree(&build_instance(12, 8, TargetSource::Seeded(3)).unwrap());
    let spec = DataSpec { d: 12, k: 8, n: 300, n_prime: 32 };
    let data = ground_truth_labels(&tree, &sample_inputs(12, spec.n, 3)).unwrap();
    let aug = sample_augmented(12, spec.n_prime, 3);
    let mut config = TrainConfig::for_regime(Regime::CotSelfConsistency, spec, 3);
    config.epochs = 12;
    let trace = train(&config, &data, Some(aug.tokens()), &tree).unwrap();
    let mut buf = Vec::new();
    write_trace(&mut buf, &trace.records).unwrap();
    let header = String::from_utf8(buf.clone()).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "epoch,cot_loss,pred_loss,filter_l1,filter_l2,filter_l3,child_mass_mean");
    assert_eq!(read_trace(buf.as_slice()).unwrap(), trace.records);
}

#[test]
fn checkpoint_json_round_trips() {
    let tree = build_tree(&build_instance(8, 4, TargetSource::Seeded(1)).unwrap());
    let data = ground_truth_labels(&tree, &sample_inputs(8, 200, 1)).unwrap();
    let mut config = TrainConfig::for_regime(Regime::Cot, DataSpec { d: 8, k: 4, n: 200, n_prime: 0 }, 1);
    config.epochs = 5;
    let trace = train(&config, &data, None, &tree).unwrap();
    let ck = Checkpoint::new(&trace.weights, &tree);
    let text = serde_json::to_string(&ck).unwrap();
    assert!(text.starts_with(r#"{"d":8,"k":4,"maskKind":"block_level","entries":[{"j":1,"m":9,"w":"#));
    let back: Checkpoint = serde_json::from_str(&text).unwrap();
    assert_eq!(back.weights(&tree).unwrap(), trace.weights);
    assert!(back.entries.windows(2).all(|w| (w[0].m, w[0].j) < (w[1].m, w[1].j)));
}

#[test]
fn gradient_dump_lists_unmasked_entries() {
    let tree = build_tree(&build_instance(8, 4, TargetSource::Seeded(1)).unwrap());
    let layout = tree.layout();
    let data = ground_truth_labels(&tree, &sample_inputs(8, 100, 1)).unwrap();
    let w = cotlab_core::AttentionWeights::zeros(&layout, cotlab_core::MaskKind::TeacherForcingCausal);
    let link = cotlab_core::LinkFunction::default();
    let g = cotlab_core::grad::grad_teacher_forcing(&w, &data, &layout, &link).unwrap();
    let dump = GradientDump::new(&g, &w, &tree, "cot_teacher_forcing");
    assert_eq!(dump.grad.len(), w.unmasked_count());
    let v = serde_json::to_value(&dump).unwrap();
    assert!(v["grad"].is_array());
    assert_eq!(v["grad"][0]["w"], g.get(1, 9));
}

#[test]
fn svg_is_well_formed_xml() {
    let mut a = PlotSeries::new("cot", vec![0.0, 1.0, 2.0], vec![1.0, 0.1, 0.001]);
    a.markers = vec![1.0, 2.0];
    let b = PlotSeries::new("direct & friends", vec![0.0, 1.0, 2.0], vec![0.9, 0.9, 0.9]);
    for log_y in [true, false] {
        let axes = Axes { title: "loss <d=8>".into(), x_label: "epoch".into(), y_label: "loss".into(), log_y };
        let svg = emit_svg(&[a.clone(), b.clone()], &axes);
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let root = doc.root_element();
        assert_eq!(root.tag_name().name(), "svg");
        assert_eq!(doc.root().children().filter(|n| n.is_element()).count(), 1);
        let dashed = doc.descendants().filter(|n| n.attribute("stroke-dasharray").is_some()).count();
        assert_eq!(dashed, 2);
    }
}

#[test]
fn link_report_matches_defaults() {
    let r = LinkReport::new(&cotlab_core::LinkFunction::default());
    assert_eq!((r.c, r.sup_deriv, r.g, r.c_prime), (4.0, 4.0, 2.5, 4.0));
}
