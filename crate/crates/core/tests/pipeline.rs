use scenecrnn::calibrate::{extract_features, train_svm, SvmConfig};
use scenecrnn::data::{generate_synth_dataset, Split, SynthSceneSpec};
use scenecrnn::dsp::{FeatureConfig, FeatureExtractor};
use scenecrnn::infer::{segment_posteriors, RecordingPrediction};
use scenecrnn::layers::{ModelConfig, ModelKind};
use scenecrnn::train::{train, SegmentSet, TrainConfig};
use scenecrnn::Model32;

fn tiny(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        conv_filters: [4, 4, 4],
        hidden: 4,
        att_size: 4,
        ..ModelConfig::standard(kind, 2)
    }
}

#[test]
fn synth_to_recording_predictions() {
    let spec = SynthSceneSpec::builtin(2, 2.0, 22050).unwrap();
    let ds = generate_synth_dataset(&spec, 3, 1).unwrap();
    let ex = FeatureExtractor::new(FeatureConfig::default()).unwrap();
    let mut set = SegmentSet::new(ds.classes());
    for (i, it) in ds.items.iter().enumerate().filter(|(_, it)| it.split == Split::Train) {
        let inputs = ex.recording_inputs(&ds.audio(it).unwrap()).unwrap();
        assert_eq!(inputs.len(), 1);
        set.push_recording(i, it.label, inputs);
    }
    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 6,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    for kind in [ModelKind::AttCrnn, ModelKind::CnnBaseline] {
        let model = Model32::new(tiny(kind), 0).unwrap();
        let out = train(model, &set, None, &TrainConfig { kind, ..cfg.clone() }, |_| {}).unwrap();
        assert_eq!(out.history.records.len(), 40);
        assert!(out.history.records.iter().all(|r| r.train_loss.is_finite()));

        let feats = extract_features(&out.last, &set.images).unwrap();
        let (svm, _) = train_svm(&feats, &set.labels, 2, &SvmConfig::default()).unwrap();
        let post = segment_posteriors(&out.last, Some(&svm), &set.images).unwrap();
        for p in &post {
            assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        let rec = RecordingPrediction::from_segments(post).unwrap();
        assert!(rec.label < 2);
    }
}
