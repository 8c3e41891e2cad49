use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use scenecrnn::calibrate::{extract_features, train_svm, SvmConfig, SvmModel};
use scenecrnn::data::{generate_synth_dataset, load_manifest, write_dataset, Dataset, Split, SynthSceneSpec};
use scenecrnn::dsp::{FeatureConfig, FilterKind};
use scenecrnn::infer::{fuse_models, save_predictions, segment_posteriors, ConfusionMatrix, RecordingPrediction};
use scenecrnn::layers::ModelConfig;
use scenecrnn::train::{train as fit, TrainConfig};
use scenecrnn::{Error, Model32};

use crate::features::{cache_dir, FeatureCache};
use crate::{ArchArgs, CalibrateArgs, DataArgs, EvalArgs, InspectArgs, KeepArg, SplitArg, SynthArgs, TrainArgs};

/// Usage errors exit with 1, everything else with 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) => f.write_str(m),
            Self::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        Self::Runtime(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// Everything a training run depends on, echoed before it starts.
struct RunConfig {
    train: TrainConfig,
    model: ModelConfig,
    features: FilterKind,
    svm_c: f64,
    manifest: PathBuf,
    cache: PathBuf,
    checkpoint: PathBuf,
    out: PathBuf,
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (t, m) = (&self.train, &self.model);
        write!(
            f,
            "model={} features={} epochs={} batch={} lr={} seed={} H={} att size={} conv filters={:?} \
             dropout={}/{} C_svm={} manifest={} cache={} checkpoint={} out={}",
            m.kind,
            self.features,
            t.epochs,
            t.batch_size,
            t.learning_rate,
            t.seed,
            m.hidden,
            m.att_size,
            m.conv_filters,
            t.conv_dropout,
            t.rnn_dropout,
            self.svm_c,
            self.manifest.display(),
            self.cache.display(),
            self.checkpoint.display(),
            self.out.display()
        )
    }
}

fn model_config(arch: &ArchArgs, classes: usize) -> Result<ModelConfig> {
    let cfg = ModelConfig {
        conv_filters: arch.conv_channels,
        hidden: arch.hidden,
        att_size: arch.att_size,
        ..ModelConfig::standard(arch.model.into(), classes)
    };
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn open_dataset(data: &DataArgs, kind: FilterKind) -> Result<(Dataset, FeatureCache)> {
    let ds = load_manifest(&data.manifest, None).with_context(|| format!("loading {}", data.manifest.display()))?;
    let cache = FeatureCache::new(cache_dir(data.cache.as_deref(), &data.manifest), FeatureConfig::with_kind(kind))?;
    Ok((ds, cache))
}

fn load_model(path: &Path) -> Result<Model32> {
    Ok(Model32::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?)
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSceneSpec::builtin(a.classes, a.duration, a.sample_rate).map_err(usage)?;
    if a.test_per_class >= a.per_class && a.per_class > 0 {
        return Err(usage(format!(
            "--test-per-class {} leaves no training recordings out of {}",
            a.test_per_class, a.per_class
        )));
    }
    let mut ds = generate_synth_dataset(&spec, a.per_class, a.seed).map_err(usage)?;
    let frac = match a.test_per_class {
        0 => 0.5,
        n => n as f64 / a.per_class as f64,
    };
    if a.per_class >= 2 {
        ds.resplit(frac, a.seed)?;
    }
    let manifest = write_dataset(&ds, &a.out).with_context(|| format!("writing dataset to {}", a.out.display()))?;
    let test = ds.split(Split::Test).count();
    println!(
        "wrote {} recordings ({} train, {test} test) of {} classes to {}",
        ds.len(),
        ds.len() - test,
        ds.classes(),
        manifest.display()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let train_cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed: a.seed,
        conv_dropout: a.conv_dropout,
        rnn_dropout: a.rnn_dropout,
        kind: a.arch.model.into(),
    };
    train_cfg.validate().map_err(usage)?;
    let features: FilterKind = a.data.features.into();
    let (ds, cache) = open_dataset(&a.data, features)?;
    let model_cfg = model_config(&a.arch, ds.classes())?;
    let run = RunConfig {
        train: train_cfg,
        model: model_cfg,
        features,
        svm_c: scenecrnn::calibrate::DEFAULT_C,
        manifest: a.data.manifest.clone(),
        cache: cache_dir(a.data.cache.as_deref(), &a.data.manifest),
        checkpoint: a.checkpoint.clone().unwrap_or_else(|| a.out.join("model.ckpt")),
        out: a.out.clone(),
    };
    eprintln!("config: {run}");
    std::fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
    if let Some(dir) = run.checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }

    let train_set = cache.segment_set(&ds, Split::Train)?;
    let test_set = cache.segment_set(&ds, Split::Test)?;
    if train_set.is_empty() {
        return Err(anyhow!("manifest has no training recordings").into());
    }
    let eval = (!test_set.is_empty()).then_some(&test_set);
    eprintln!(
        "{} training segments, {} evaluation segments",
        train_set.len(),
        eval.map_or(train_set.len(), |s| s.len())
    );
    let model = Model32::new(run.model.clone(), run.train.seed)?;
    let outcome = fit(model, &train_set, eval, &run.train, |r| {
        eprintln!("epoch {:>4}  loss {:.5}  seg acc {:.4}", r.epoch, r.train_loss, r.seg_accuracy)
    })
    .map_err(|e| match e {
        Error::NonFiniteLoss { .. } => anyhow!("{e}; try a lower --lr"),
        e => e.into(),
    })?;
    let history = run.out.join("history.csv");
    outcome.history.save_csv(&history)?;
    let (kept, epoch) = match a.keep {
        KeepArg::Best => (&outcome.best, outcome.best_epoch),
        KeepArg::Last => (&outcome.last, run.train.epochs),
    };
    kept.save(&run.checkpoint)?;
    println!(
        "saved epoch {epoch} to {} and history to {}",
        run.checkpoint.display(),
        history.display()
    );
    Ok(())
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let cfg = SvmConfig {
        c: a.svm_c,
        epochs: a.svm_epochs,
        seed: a.seed,
    };
    let (ds, cache) = open_dataset(&a.data, a.data.features.into())?;
    if ds.classes() != model.config.classes {
        return Err(anyhow!("checkpoint has {} classes, manifest {}", model.config.classes, ds.classes()).into());
    }
    let set = cache.segment_set(&ds, Split::Train)?;
    let feats = extract_features(&model, &set.images)?;
    let (svm, report) = train_svm(&feats, &set.labels, ds.classes(), &cfg).map_err(|e| match e {
        Error::Config(_) => usage(e),
        e => e.into(),
    })?;
    for (c, obj) in report.objective.iter().enumerate() {
        if let Some(last) = obj.last() {
            eprintln!("class {}: final objective {last:.6}", ds.class_names[c]);
        }
    }
    let out = a.svm.unwrap_or_else(|| {
        let mut p = a.checkpoint.clone().into_os_string();
        p.push(".svm");
        p.into()
    });
    svm.save(&out)?;
    println!("saved SVM over {} segments to {}", set.len(), out.display());
    Ok(())
}

struct Member {
    model: Model32,
    svm: Option<SvmModel>,
    cache: FeatureCache,
}

impl Member {
    fn new(checkpoint: &Path, svm: Option<&Path>, data: &DataArgs, kind: FilterKind, classes: usize) -> Result<Self> {
        let model = load_model(checkpoint)?;
        if model.config.classes != classes {
            return Err(anyhow!(
                "{} predicts {} classes, the dataset has {classes}",
                checkpoint.display(),
                model.config.classes
            )
            .into());
        }
        let svm = svm
            .map(|p| SvmModel::load(p).with_context(|| format!("loading SVM {}", p.display())))
            .transpose()?;
        if let Some(s) = &svm {
            if s.classes() != classes {
                return Err(anyhow!("SVM has {} classes, the dataset has {classes}", s.classes()).into());
            }
        }
        let cache = FeatureCache::new(cache_dir(data.cache.as_deref(), &data.manifest), FeatureConfig::with_kind(kind))?;
        Ok(Self { model, svm, cache })
    }

    fn predict(&self, ds: &Dataset, split: Split) -> Result<Vec<(usize, RecordingPrediction)>> {
        self.cache
            .split_images(ds, split)?
            .into_iter()
            .map(|(i, images)| {
                let segs = segment_posteriors(&self.model, self.svm.as_ref(), &images)?;
                Ok((i, RecordingPrediction::from_segments(segs)?))
            })
            .collect()
    }
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let ds = load_manifest(&a.data.manifest, None).with_context(|| format!("loading {}", a.data.manifest.display()))?;
    let c = ds.classes();
    let first = Member::new(&a.checkpoint, a.svm.as_deref(), &a.data, a.data.features.into(), c)?;
    let mut preds = first.predict(&ds, split)?;
    if preds.is_empty() {
        return Err(anyhow!("no {split} recordings in the manifest").into());
    }

    let mut seg = ConfusionMatrix::new(c);
    for (i, p) in &preds {
        for s in &p.segments {
            seg.add(ds.items[*i].label, s.argmax())?;
        }
    }

    if let Some(other) = &a.fuse_with {
        let kind = a.fuse_features.unwrap_or(a.data.features).into();
        let second = Member::new(other, a.fuse_svm.as_deref(), &a.data, kind, c)?;
        for ((i, p), (j, q)) in preds.iter_mut().zip(second.predict(&ds, split)?) {
            debug_assert_eq!(*i, j);
            let fused = fuse_models(&p.fused, &q.fused)?;
            p.label = fused.argmax();
            p.fused = fused;
        }
    }

    let truth: Vec<usize> = preds.iter().map(|(i, _)| ds.items[*i].label).collect();
    let predicted: Vec<usize> = preds.iter().map(|(_, p)| p.label).collect();
    let rec = ConfusionMatrix::from_pairs(c, &truth, &predicted)?;
    println!("segments        {}", seg.total());
    println!("recordings      {}", rec.total());
    println!("segment accuracy    {:.4}", seg.accuracy());
    println!("recording accuracy  {:.4}", rec.accuracy());
    println!("macro F1            {:.4}", rec.macro_f1());
    println!("macro precision     {:.4}", rec.macro_precision());
    println!("confusion (rows true, columns predicted; {})", ds.class_names.join(", "));
    for row in &rec.counts {
        println!("  {}", row.iter().map(|v| format!("{v:>4}")).collect::<String>());
    }
    if let Some(out) = &a.out {
        let rows: Vec<_> = preds.into_iter().map(|(i, p)| (ds.items[i].id.clone(), p)).collect();
        save_predictions(out, &ds.class_names, &rows)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let cfg = model_config(&a.arch, a.classes)?;
    let model = Model32::new(cfg, 0)?;
    for (name, shape) in model.shape_trace()? {
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        println!("{name:<8} {}", dims.join(" x "));
    }
    Ok(())
}
