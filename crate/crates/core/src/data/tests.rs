use super::*;
use crate::dsp::{segment, FeatureConfig, FeatureExtractor};

fn write_manifest(dir: &Path, rows: &[&str]) -> PathBuf {
    let p = dir.join("manifest.csv");
    let mut text = "id,path,class,split\n".to_string();
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    std::fs::write(&p, text).unwrap();
    p
}

fn tiny_wav(dir: &Path, name: &str) {
    write_wav(dir.join(name), &AudioClip::new(vec![0.1, -0.2, 0.3], 22050).unwrap()).unwrap();
}

fn row_of(e: Error) -> usize {
    match e {
        Error::Manifest { row, .. } => row,
        other => panic!("expected a manifest error, got {other}"),
    }
}

#[test]
fn manifest_loading() {
    let dir = tempfile::tempdir().unwrap();
    tiny_wav(dir.path(), "a.wav");
    tiny_wav(dir.path(), "b.wav");
    let p = write_manifest(dir.path(), &["r1,a.wav,bus,train", "r2,b.wav,beach,test"]);
    let ds = load_manifest(&p, None).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.class_names, ["beach", "bus"]);
    assert_eq!((ds.items[0].label, ds.items[0].split), (1, Split::Train));
    assert_eq!(ds.audio(&ds.items[1]).unwrap().samples, vec![0.1, -0.2, 0.3]);

    let p = write_manifest(dir.path(), &["r1,a.wav,bus,train", "r2,nope.wav,beach,test"]);
    let e = load_manifest(&p, None).unwrap_err();
    assert!(e.to_string().contains("nope.wav"));
    assert_eq!(row_of(e), 2);

    let p = write_manifest(dir.path(), &["r1,a.wav,bus,train", "r1,b.wav,beach,test"]);
    assert_eq!(row_of(load_manifest(&p, None).unwrap_err()), 2);

    let p = write_manifest(dir.path(), &["r1,a.wav,tram,train"]);
    let known = ["beach".to_string(), "bus".to_string()];
    assert_eq!(row_of(load_manifest(&p, Some(&known)).unwrap_err()), 1);

    let p = write_manifest(dir.path(), &["r1,a.wav,bus,validation"]);
    assert_eq!(row_of(load_manifest(&p, None).unwrap_err()), 1);

    std::fs::write(dir.path().join("junk.wav"), b"not a wav file").unwrap();
    let p = write_manifest(dir.path(), &["r1,a.wav,bus,train", "r2,junk.wav,bus,train"]);
    let e = load_manifest(&p, None).unwrap_err();
    assert!(e.to_string().contains("unreadable"));
    assert_eq!(row_of(e), 2);

    std::fs::write(&p, "name,file,label\nr1,a.wav,bus\n").unwrap();
    assert_eq!(row_of(load_manifest(&p, None).unwrap_err()), 0);
    assert!(load_manifest(dir.path().join("absent.csv"), None).is_err());
}

#[test]
fn synthetic_counts_and_determinism() {
    let spec = SynthSceneSpec::builtin(4, 30.0, 22050).unwrap();
    let ds = generate_synth_dataset(&spec, 10, 7).unwrap();
    assert_eq!(ds.len(), 40);
    assert_eq!(ds.classes(), 4);
    let again = generate_synth_dataset(&spec, 10, 7).unwrap();
    for (i, it) in ds.items.iter().enumerate().step_by(9) {
        let clip = ds.audio(it).unwrap();
        assert_eq!(segment(&clip, 2.0).unwrap().len(), 15);
        assert_eq!(clip, again.audio(&again.items[i]).unwrap());
        assert!(clip.samples.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }
    let other = generate_synth_dataset(&spec, 10, 8).unwrap();
    assert_ne!(ds.audio(&ds.items[0]).unwrap(), other.audio(&other.items[0]).unwrap());
    // recordings of one class differ from each other
    assert_ne!(ds.audio(&ds.items[0]).unwrap(), ds.audio(&ds.items[1]).unwrap());
}

#[test]
fn recipe_validation() {
    assert!(SynthSceneSpec::builtin(1, 30.0, 22050).is_err());
    assert!(SynthSceneSpec::builtin(9, 30.0, 22050).is_err());
    let spec = SynthSceneSpec::builtin(3, 30.0, 22050).unwrap();
    let mut dup = spec.recipes.clone();
    dup[2] = SynthRecipe {
        name: "copy".into(),
        ..dup[0].clone()
    };
    assert!(SynthSceneSpec::new(dup, 30.0, 22050).is_err());
    let mut high = spec.recipes.clone();
    high[0].tones[0] = 12_000.0;
    assert!(SynthSceneSpec::new(high, 30.0, 22050).is_err());
    assert!(generate_synth_dataset(&spec, 0, 0).is_err());
}

#[test]
fn tone_center_shows_in_log_mel_centroids() {
    let base = SynthRecipe {
        name: "low".into(),
        tones: vec![1000.0],
        modulation: vec![1.0],
        noise_color: 1.0,
        transient_rate: 0.0,
        transient_freq: 1000.0,
    };
    let high = SynthRecipe {
        name: "high".into(),
        tones: vec![1600.0],
        ..base.clone()
    };
    let spec = SynthSceneSpec::new(vec![base, high], 4.0, 22050).unwrap();
    let ds = generate_synth_dataset(&spec, 3, 1).unwrap();
    let ex = FeatureExtractor::new(FeatureConfig::default()).unwrap();
    let m = ex.bank().len();
    let mut centroid = vec![vec![0.0; m]; 2];
    let mut frames = [0usize; 2];
    for it in &ds.items {
        let s = ex.log_spectrogram(&ds.audio(it).unwrap()).unwrap();
        for b in 0..m {
            centroid[it.label][b] += s.row(b).iter().sum::<f64>();
        }
        frames[it.label] += s.cols;
    }
    let db = 10.0 / std::f64::consts::LN_10;
    let nearest = |f: f64| (0..m).min_by(|&a, &b| (ex.bank().centers[a] - f).abs().total_cmp(&(ex.bank().centers[b] - f).abs())).unwrap();
    let (b0, b1) = (nearest(1000.0), nearest(1600.0));
    assert!(b1 - b0 >= 4, "bands {b0} {b1}");
    let c = |k: usize, b: usize| centroid[k][b] / frames[k] as f64;
    assert!(db * (c(0, b0) - c(1, b0)) > 3.0);
    assert!(db * (c(1, b1) - c(0, b1)) > 3.0);
}

#[test]
fn wav_manifest_round_trip() {
    let spec = SynthSceneSpec::builtin(2, 3.0, 22050).unwrap();
    let mut ds = generate_synth_dataset(&spec, 3, 2).unwrap();
    ds.resplit(1.0 / 3.0, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(&ds, dir.path()).unwrap();
    let back = load_manifest(&manifest, None).unwrap();
    assert_eq!(back.class_names, ds.class_names);
    assert_eq!(back.len(), ds.len());
    for (a, b) in ds.items.iter().zip(&back.items) {
        assert_eq!((&a.id, a.label, a.split), (&b.id, b.label, b.split));
        assert_eq!(ds.audio(a).unwrap(), back.audio(b).unwrap());
    }
    back.validate().unwrap();
}

#[test]
fn stratified_split_keeps_proportions() {
    let labels: Vec<usize> = (0..4).flat_map(|c| std::iter::repeat_n(c, 7 + 3 * c)).collect();
    for frac in [0.2, 10.0 / 35.0, 0.5] {
        let s = stratified_split(&labels, frac, 3).unwrap();
        assert_eq!(s, stratified_split(&labels, frac, 3).unwrap());
        for c in 0..4 {
            let n = labels.iter().filter(|&&l| l == c).count();
            let t = (0..labels.len()).filter(|&i| labels[i] == c && s[i] == Split::Test).count();
            assert!((t as f64 - n as f64 * frac).abs() <= 1.0, "class {c}: {t} of {n}");
        }
    }
    let bench: Vec<usize> = (0..4).flat_map(|c| std::iter::repeat_n(c, 35)).collect();
    let s = stratified_split(&bench, 10.0 / 35.0, 0).unwrap();
    assert_eq!(s.iter().filter(|&&x| x == Split::Test).count(), 40);
    assert!(stratified_split(&labels, 0.0, 0).is_err());
    assert!(stratified_split(&[0, 1, 1], 0.5, 0).is_err());
}

#[test]
fn validation_requires_both_splits() {
    let spec = SynthSceneSpec::builtin(2, 2.0, 22050).unwrap();
    let mut ds = generate_synth_dataset(&spec, 2, 0).unwrap();
    assert!(ds.validate().is_err());
    ds.resplit(0.5, 0).unwrap();
    ds.validate().unwrap();
    ds.items[1].id = ds.items[0].id.clone();
    assert!(ds.validate().is_err());
}
