use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use dietcnn::analysis::{
    assoc_experiment, count_lookups, count_lookups_for, count_macs, footprint, parse_energy,
    speedup, AssocConfig, CostParams, SymbolDraw,
};
use dietcnn::calibrate::{
    activation_samples, calibrate, fit_activation_codebook, fit_filter_codebooks,
};
use dietcnn::codebook::{Codebook, CodebookKind};
use dietcnn::engine::diet_forward_full;
use dietcnn::eval::{evaluate_diet, evaluate_float, evaluate_reconstructed};
use dietcnn::io::{load_bundle, load_mnist, load_model, save_bundle, save_model, Split};
use dietcnn::model::{lenet5, vgg11, vgg11_diet_layout, Activation, Init, LayerDef};
use dietcnn::trainer::{finetune_diet_with, train_float_with};
use dietcnn::{build_luts, transform_model, Dataset, ModelSpec, SymbolicModel};
use log::info;

use crate::config::RunConfig;
use crate::report::Report;
use crate::{ConfigError, ReportArg};

fn mnist(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let dir = cfg.data_dir();
    load_mnist(&dir, split).with_context(|| format!("loading MNIST from {}", dir.display()))
}

fn limited(cfg: &RunConfig, data: Dataset) -> Result<Dataset> {
    match cfg.limit {
        Some(n) if n < data.len() => Ok(data.first(n)?),
        _ => Ok(data),
    }
}

fn activation(cfg: &RunConfig) -> Result<Activation> {
    match cfg.activation.as_str() {
        "relu" => Ok(Activation::Relu),
        "sigmoid" => Ok(Activation::Sigmoid),
        other => Err(ConfigError(format!("unknown activation `{other}` (relu, sigmoid)")).into()),
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Where to write the trained model.
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// relu or sigmoid.
    #[arg(long)]
    pub activation: Option<String>,
    #[command(flatten)]
    pub report: ReportArg,
}

pub fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    if let Some(act) = a.activation {
        cfg.activation = act;
    }
    let tc = cfg.train();
    tc.validate()?;
    let init = lenet5(Init::FanInUniform { seed: cfg.seed }, activation(&cfg)?);
    let train = match cfg.train_images {
        Some(n) => mnist(&cfg, Split::Train)?.first(n)?,
        None => mnist(&cfg, Split::Train)?,
    };
    let test = limited(&cfg, mnist(&cfg, Split::Test)?)?;

    let mut rep = Report::new("train", &cfg);
    let (images, _) = dietcnn::io::idx::mnist_paths(&cfg.data_dir(), Split::Train);
    rep.input(&images)?;
    rep.line("epoch,loss,train_accuracy");
    let mut rows = Vec::new();
    let model = train_float_with(&init, &train, &tc, |s, _| {
        info!(
            "epoch {}: loss {:.4}, train accuracy {} ({:.1?})",
            s.epoch,
            s.loss,
            pct(s.train_accuracy),
            s.elapsed
        );
        rows.push(format!("{},{:.6},{:.6}", s.epoch, s.loss, s.train_accuracy));
        Ok(())
    })?;
    for r in rows {
        rep.line(r);
    }
    save_model(&model, &a.output)?;
    let eval = evaluate_float(&model, &test)?;
    rep.line(format!(
        "test_accuracy,{:.6},{}/{}",
        eval.accuracy, eval.correct, eval.images
    ));
    rep.line(format!("model,{}", a.output.display()));
    rep.emit(a.report.report.as_deref())
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    /// Float model file.
    #[arg(long, short)]
    pub model: PathBuf,
    /// Where to write the diet bundle.
    #[arg(long, short)]
    pub output: PathBuf,
    /// Fine-tune epochs before building the bundle (0 = post-facto).
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    /// Where to write the fine-tuned float model.
    #[arg(long)]
    pub finetuned_model: Option<PathBuf>,
    /// Emit the footprint as CSV instead of a table.
    #[arg(long)]
    pub csv: bool,
    #[command(flatten)]
    pub report: ReportArg,
}

pub fn transform(mut cfg: RunConfig, a: TransformArgs) -> Result<()> {
    cfg.finetune_epochs = a.finetune_epochs.unwrap_or(cfg.finetune_epochs);
    let mut rep = Report::new("transform", &cfg);
    rep.input(&a.model)?;
    let model =
        load_model(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let train = mnist(&cfg, Split::Train)?;
    let calib = cfg.calib();
    let cbs = calibrate(&model, &train, &calib)?;
    info!(
        "codebooks: {} activation, {} conv-filter, {} fc-filter symbols",
        cbs.act.len(),
        cbs.conv.len(),
        cbs.fc.len()
    );
    let (model, sym) = if cfg.finetune_epochs > 0 {
        let ft = cfg.finetune()?;
        let data = match cfg.finetune_images {
            Some(n) => train.first(n)?,
            None => train,
        };
        rep.line("finetune_epoch,loss,diet_monitor_accuracy,refits");
        let mut rows = Vec::new();
        let (tuned, sym) = finetune_diet_with(&model, &cbs, &data, &ft, |s, _, _| {
            info!(
                "finetune epoch {}: loss {:.4} ({:.1?})",
                s.epoch, s.loss, s.elapsed
            );
            rows.push(format!(
                "{},{:.6},{:.6},{}",
                s.epoch,
                s.loss,
                s.diet_accuracy.unwrap_or(f64::NAN),
                s.refits
            ));
            Ok(())
        })?;
        for r in rows {
            rep.line(r);
        }
        if let Some(p) = &a.finetuned_model {
            save_model(&tuned, p)?;
        }
        let sym = match &cfg.diet_layout {
            Some(l) if !l.is_empty() => {
                let luts = dietcnn::lut::rebuild_with(
                    sym.luts(),
                    sym.act_codebook(),
                    sym.conv_codebook(),
                    sym.fc_codebook(),
                    &tuned,
                )?;
                transform_model(
                    &tuned,
                    sym.act_codebook(),
                    sym.conv_codebook(),
                    sym.fc_codebook(),
                    &luts,
                    Some(l),
                )?
            }
            _ => sym,
        };
        (tuned, sym)
    } else {
        let luts = build_luts(&cbs.act, &cbs.conv, &cbs.fc, &model)?;
        let sym = transform_model(
            &model,
            &cbs.act,
            &cbs.conv,
            &cbs.fc,
            &luts,
            cfg.diet_layout.as_ref(),
        )?;
        (model, sym)
    };
    save_bundle(&sym, &a.output)?;
    let fp = footprint(&model, &sym);
    rep.text(&if a.csv { fp.to_csv() } else { fp.to_table() });
    rep.line(format!("bundle,{}", a.output.display()));
    rep.emit(a.report.report.as_deref())
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Diet bundle.
    #[arg(long, short)]
    pub bundle: PathBuf,
    /// Float model to compare against.
    #[arg(long, short)]
    pub model: Option<PathBuf>,
    /// train or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Run a single image and print per-layer symbol statistics.
    #[arg(long)]
    pub image: Option<usize>,
    #[command(flatten)]
    pub report: ReportArg,
}

/// Fails unless `model` has the structure `sym` was built from.
fn check_pair(sym: &SymbolicModel, model: &ModelSpec) -> Result<()> {
    let shapes = |layers: &[LayerDef]| -> Vec<Vec<usize>> {
        layers
            .iter()
            .filter_map(|l| match l {
                LayerDef::Conv2d(c) => Some(c.weight.shape().to_vec()),
                LayerDef::Linear(l) => Some(l.weight.shape().to_vec()),
                _ => None,
            })
            .collect()
    };
    let decoded = sym.decoded_model(model)?;
    if model.input_shape() != sym.input_shape()
        || model.class_count() != sym.class_count()
        || shapes(model.layers()) != shapes(decoded.layers())
    {
        return Err(
            dietcnn::Error::InvalidArgument("bundle was not built from this model".into()).into(),
        );
    }
    Ok(())
}

pub fn infer(cfg: RunConfig, a: InferArgs) -> Result<()> {
    let split = match a.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(ConfigError(format!("unknown split `{other}` (train, test)")).into()),
    };
    let order = cfg.fold_order()?;
    let mut rep = Report::new("infer", &cfg);
    rep.input(&a.bundle)?;
    let sym =
        load_bundle(&a.bundle).with_context(|| format!("loading bundle {}", a.bundle.display()))?;
    let model = match &a.model {
        Some(p) => {
            rep.input(p)?;
            let m = load_model(p).with_context(|| format!("loading model {}", p.display()))?;
            check_pair(&sym, &m)?;
            Some(m)
        }
        None => None,
    };
    let data = limited(&cfg, mnist(&cfg, split)?)?;

    if let Some(i) = a.image {
        if i >= data.len() {
            return Err(
                ConfigError(format!("image {i} out of range ({} images)", data.len())).into(),
            );
        }
        let out = diet_forward_full(&sym, &data.image(i), order, true)?;
        rep.line(format!("image,{i},label,{}", data.labels()[i]));
        rep.line("layer,kind,shape,distinct_symbols,zero_fraction,min,max,mul,add,bias,act,pool");
        let cb = sym.act_codebook();
        let zero = cb.zero_symbol();
        for (lt, act) in out.trace.layers.iter().zip(&out.activations) {
            let syms = act.symbols();
            let distinct = syms.iter().collect::<std::collections::BTreeSet<_>>().len();
            let zeros = syms.iter().filter(|&&s| Some(s) == zero).count();
            let (lo, hi) = syms
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
                    let v = cb.value(s);
                    (lo.min(v), hi.max(v))
                });
            rep.line(format!(
                "{},{},{:?},{distinct},{:.4},{lo:.6},{hi:.6},{},{},{},{},{}",
                lt.index,
                lt.kind.map_or("-".to_string(), |k| k.to_string()),
                lt.output_shape,
                zeros as f64 / syms.len().max(1) as f64,
                lt.mul_lookups,
                lt.add_lookups,
                lt.bias_lookups,
                lt.act_lookups,
                lt.pool_lookups
            ));
        }
        rep.line(format!("diet_prediction,{}", out.prediction()));
        if let Some(m) = &model {
            let logits = m.forward(&data.image(i))?;
            rep.line(format!(
                "float_prediction,{}",
                dietcnn::tensor::argmax(logits.data())
            ));
        }
        return rep.emit(a.report.report.as_deref());
    }

    let (diet, trace) = evaluate_diet(&sym, &data, order)?;
    rep.line(format!("images,{}", diet.images));
    rep.line(format!("diet_accuracy,{:.6}", diet.accuracy));
    if let Some(m) = &model {
        let float = evaluate_float(m, &data)?;
        rep.line(format!("float_accuracy,{:.6}", float.accuracy));
        rep.line(format!(
            "accuracy_drop_pp,{:.4}",
            100.0 * (float.accuracy - diet.accuracy)
        ));
        rep.line(format!("agreement,{:.6}", float.agreement(&diet)));
        let recon = evaluate_reconstructed(m, sym.act_codebook(), &data)?;
        rep.line(format!("reconstructed_accuracy,{:.6}", recon.accuracy));
    }
    rep.line("layer,kind,mul,add,bias,act,pool");
    let n = diet.images.max(1) as u64;
    for lt in &trace.layers {
        rep.line(format!(
            "{},{},{},{},{},{},{}",
            lt.index,
            lt.kind.map_or("-".to_string(), |k| k.to_string()),
            lt.mul_lookups / n,
            lt.add_lookups / n,
            lt.bias_lookups / n,
            lt.act_lookups / n,
            lt.pool_lookups / n
        ));
    }
    rep.line(format!(
        "total_per_image,,{},{},{},{},{}",
        trace.mul_lookups() / n,
        trace.add_lookups() / n,
        trace.bias_lookups() / n,
        trace.act_lookups() / n,
        trace.pool_lookups() / n
    ));
    rep.emit(a.report.report.as_deref())
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Model file to analyze.
    #[arg(long, short, conflicts_with = "graph")]
    pub model: Option<PathBuf>,
    /// Built-in graph: vgg11 or lenet5.
    #[arg(long)]
    pub graph: Option<String>,
    /// Count lookups on the built-in diet layout of the VGG-11 graph.
    #[arg(long)]
    pub diet: bool,
    /// Patch size for lookup counts.
    #[arg(long, default_value_t = 1)]
    pub patch: u32,
    /// Diet bundle for a footprint report (needs --model).
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Cost parameters, e.g. M=10,L=2,A=1[,P=1].
    #[arg(long)]
    pub speedup: Option<String>,
    /// Power and latency, e.g. P=1.2,t=0.05.
    #[arg(long)]
    pub energy: Option<String>,
    #[arg(long)]
    pub csv: bool,
    #[command(flatten)]
    pub report: ReportArg,
}

pub fn analyze(cfg: RunConfig, a: AnalyzeArgs) -> Result<()> {
    let mut rep = Report::new("analyze", &cfg);
    let model = match (&a.model, a.graph.as_deref()) {
        (Some(p), _) => {
            rep.input(p)?;
            Some(load_model(p).with_context(|| format!("loading model {}", p.display()))?)
        }
        (None, Some("vgg11")) => Some(vgg11(Init::Zeros)),
        (None, Some("lenet5")) => Some(lenet5(Init::Zeros, Activation::Relu)),
        (None, Some(other)) => {
            return Err(ConfigError(format!("unknown graph `{other}` (vgg11, lenet5)")).into())
        }
        (None, None) => None,
    };
    if let Some(spec) = &a.speedup {
        let p = CostParams::parse(spec)?;
        rep.line(format!("speedup,{spec},{:.6}", speedup(&p)));
    }
    if let Some(spec) = &a.energy {
        let e = parse_energy(spec)?;
        rep.line(format!("energy_joules,{spec},{e:.6}"));
    }
    if let Some(model) = &model {
        let fmt =
            |r: &dietcnn::analysis::OpCountReport| if a.csv { r.to_csv() } else { r.to_table() };
        rep.text(&fmt(&count_macs(model)?));
        let layout = match (&cfg.diet_layout, a.diet) {
            (Some(l), _) => Some(l.clone()),
            (None, true) => Some(vgg11_diet_layout(model)),
            (None, false) => None,
        };
        let diet = match &layout {
            Some(l) => model.with_layout(l)?,
            None => model.clone(),
        };
        rep.text(&fmt(&count_lookups_for(&diet, a.patch as usize)?));
        if let Some(b) = &a.bundle {
            rep.input(b)?;
            let sym = load_bundle(b).with_context(|| format!("loading bundle {}", b.display()))?;
            rep.text(&fmt(&count_lookups(&sym, a.patch as usize)?));
            let fp = footprint(model, &sym);
            rep.text(&if a.csv { fp.to_csv() } else { fp.to_table() });
        }
    } else if a.bundle.is_some() {
        bail!(ConfigError("--bundle needs --model".into()));
    }
    if a.speedup.is_none() && a.energy.is_none() && model.is_none() {
        bail!(ConfigError(
            "nothing to analyze: give --model, --graph, --speedup or --energy".into()
        ));
    }
    rep.emit(a.report.report.as_deref())
}

#[derive(Debug, Args)]
pub struct AssocArgs {
    /// Bundle whose activation codebook and add table are used.
    #[arg(long, short, conflicts_with = "closure")]
    pub bundle: Option<PathBuf>,
    /// Use the integer codebook -R..=R instead of a bundle.
    #[arg(long, value_name = "R")]
    pub closure: Option<u16>,
    #[arg(long, short, default_value_t = 840)]
    pub n: usize,
    #[arg(long, default_value_t = 1000)]
    pub perms: usize,
    /// uniform, bounded or strict.
    #[arg(long)]
    pub draw: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub near_k: usize,
    #[command(flatten)]
    pub report: ReportArg,
}

pub fn assoc(cfg: RunConfig, a: AssocArgs) -> Result<()> {
    let mut rep = Report::new("assoc", &cfg);
    let (cb, luts, default_draw) = match (&a.bundle, a.closure) {
        (Some(p), _) => {
            rep.input(p)?;
            let sym = load_bundle(p).with_context(|| format!("loading bundle {}", p.display()))?;
            (
                sym.act_codebook().clone(),
                sym.luts().clone(),
                SymbolDraw::Uniform,
            )
        }
        (None, Some(r)) => {
            let act = Codebook::integers(r, CodebookKind::Activation)?;
            let filt = Codebook::integers(1, CodebookKind::ConvFilter)?;
            let host = ModelSpec::new(vec![LayerDef::Flatten], [1, 1, 1], 1)?;
            let luts = build_luts(&act, &filt, &filt, &host)?;
            (act, luts, SymbolDraw::Strict)
        }
        (None, None) => bail!(ConfigError("give --bundle or --closure".into())),
    };
    let draw = match &a.draw {
        Some(d) => d.parse()?,
        None => default_draw,
    };
    let ac = AssocConfig {
        n_symbols: a.n,
        permutations: a.perms,
        seed: cfg.seed,
        near_k: a.near_k,
        draw,
    };
    let r = assoc_experiment(&cb, &luts, &ac)?;
    rep.line(format!("# draw {draw:?}, near_k {}", a.near_k));
    rep.text(&r.to_csv());
    rep.emit(a.report.report.as_deref())
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Float model file.
    #[arg(long, short)]
    pub model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
    pub clusters: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
    pub cfilters: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "16,32")]
    pub ffilters: Vec<usize>,
    #[command(flatten)]
    pub report: ReportArg,
}

pub fn gridsearch(cfg: RunConfig, a: GridArgs) -> Result<()> {
    if a.clusters.is_empty() || a.cfilters.is_empty() || a.ffilters.is_empty() {
        bail!(ConfigError(
            "every grid axis needs at least one value".into()
        ));
    }
    let mut rep = Report::new("gridsearch", &cfg);
    rep.input(&a.model)?;
    let model =
        load_model(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let train = mnist(&cfg, Split::Train)?;
    let test = limited(&cfg, mnist(&cfg, Split::Test)?)?;
    let order = cfg.fold_order()?;
    let float = evaluate_float(&model, &test)?;
    rep.line(format!("float_accuracy,{:.6}", float.accuracy));
    rep.line("n_clusters,n_cfilters,n_ffilters,diet_accuracy");

    let samples = activation_samples(&model, &train, cfg.calib_images)?;
    let mut by_k: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &k in &a.clusters {
        let act = fit_activation_codebook(
            &samples,
            &dietcnn::calibrate::CalibConfig {
                n_clusters: k,
                ..cfg.calib()
            },
        )?
        .codebook;
        for &cf in &a.cfilters {
            for &ff in &a.ffilters {
                let c = dietcnn::calibrate::CalibConfig {
                    n_cfilters: cf,
                    n_ffilters: ff,
                    ..cfg.calib()
                };
                let (conv, fc) = fit_filter_codebooks(&model, &c)?;
                let luts = build_luts(&act, &conv.codebook, &fc.codebook, &model)?;
                let sym = transform_model(&model, &act, &conv.codebook, &fc.codebook, &luts, None)?;
                let (e, _) = evaluate_diet(&sym, &test, order)?;
                info!("K={k} Fc={cf} Ff={ff}: {}", pct(e.accuracy));
                rep.line(format!("{k},{cf},{ff},{:.6}", e.accuracy));
                by_k.entry(k).or_default().push(e.accuracy);
            }
        }
    }
    rep.line("n_clusters,mean_diet_accuracy");
    let means: Vec<f64> = by_k
        .iter()
        .map(|(k, v)| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            rep.line(format!("{k},{m:.6}"));
            m
        })
        .collect();
    let monotone = means.windows(2).all(|w| w[1] >= w[0]);
    rep.line(format!(
        "mean_accuracy_non_decreasing_in_n_clusters,{monotone}"
    ));
    rep.emit(a.report.report.as_deref())
}
