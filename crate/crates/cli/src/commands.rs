use std::path::{Path, PathBuf};

use hifi_core::checks;
use hifi_core::datagen::{
    dataset_stats, filter_samples, generate_samples, load_dataset, read_manifest, render_histogram,
    split_diptych, write_dataset, write_manifest, FilterThresholds, WORKING,
};
use hifi_core::embed::{Embedder, HistogramEmbedder};
use hifi_core::evalkit::{evaluate, metric_filter, EvalItem};
use hifi_core::hifidit::{load_checkpoint, ModelState};
use hifi_core::image::{encode_netpbm, read_netpbm, write_atomic, Image, Mask};
use hifi_core::objective::Conditioning;
use hifi_core::spectral::{extract_hf, HighPassConfig, Normalize};
use hifi_core::trainer::{run_to_end, sample, TrainConfig, TrainRecord, Trainer};
use hifi_core::{vocab, HifiError, Result};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::{
    Command, EvalArgs, ExtractHfArgs, FilterArgs, GenDataArgs, GradCheckArgs, InferArgs,
    NormalizeArg, SplitArgs, StatsArgs, TrainArgs,
};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Filter(a) => filter(a),
        Command::Stats(a) => stats(a),
        Command::ExtractHf(a) => extract_hf_cmd(a),
        Command::SplitDiptych(a) => split(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Selftest => selftest(),
    }
}

fn sibling(manifest: &Path, name: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(name)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    if a.count == 0 {
        return Err(HifiError::Contract("--count must be positive".into()));
    }
    let samples = generate_samples(a.count, a.seed)?;
    let path = write_dataset(&a.out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), path.display());
    Ok(())
}

fn filter(a: FilterArgs) -> Result<()> {
    let samples = load_dataset(&a.manifest)?;
    let th = FilterThresholds {
        semantic: a.sem_th,
        textual: a.txt_th,
    };
    let verdicts = filter_samples(&samples, &HistogramEmbedder, th)?;
    let kept: Vec<_> = samples
        .iter()
        .zip(&verdicts)
        .filter(|(_, v)| v.passed)
        .map(|(s, v)| {
            let mut r = s.record.clone();
            r.verdict = Some(*v);
            r
        })
        .collect();
    let out = a
        .out
        .unwrap_or_else(|| sibling(&a.manifest, "filtered.jsonl"));
    write_manifest(&out, &kept)?;
    println!(
        "{}",
        serde_json::json!({"input": samples.len(), "passed": kept.len(), "thresholds": th, "out": out})
    );
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let records = read_manifest(&a.manifest)?;
    let stats = dataset_stats(&records, WORKING * WORKING)?;
    let json = a
        .out_json
        .unwrap_or_else(|| sibling(&a.manifest, "stats.json"));
    let pgm = a
        .out_pgm
        .unwrap_or_else(|| sibling(&a.manifest, "area_hist.pgm"));
    write_json(&json, &stats)?;
    write_atomic(&pgm, &encode_netpbm(&render_histogram(&stats))?)?;
    println!(
        "{}",
        serde_json::to_string(&stats).expect("stats serialize")
    );
    Ok(())
}

fn extract_hf_cmd(a: ExtractHfArgs) -> Result<()> {
    let img = read_netpbm(&a.input)?;
    let normalize = match a.normalize {
        NormalizeArg::None => Normalize::None,
        NormalizeArg::Minmax => Normalize::MinMax,
    };
    let cfg = HighPassConfig::new(a.radius_frac, normalize)?;
    let hf = extract_hf(&img.luma(), &cfg)?;
    write_atomic(&a.out, &encode_netpbm(&hf)?)
}

fn split(a: SplitArgs) -> Result<()> {
    let img = read_netpbm(&a.input)?;
    let s = split_diptych(&img, a.size)?;
    write_atomic(a.out_dir.join("product.ppm"), &encode_netpbm(&s.product)?)?;
    write_atomic(a.out_dir.join("scene.ppm"), &encode_netpbm(&s.scene)?)?;
    println!("{}", serde_json::json!({"seam": s.seam}));
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let t = &mut cfg.train;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag { t.$field = v; })*
        };
    }
    set!(steps => steps, batch => batch, lr => lr, seed => seed, lambda_da => lambda_da,
         radius_frac => radius_fraction, checkpoint_every => checkpoint_every);
    if a.no_sea {
        t.use_sea = false;
    }
    if a.no_dal {
        t.use_dal = false;
    }
    if a.no_synth {
        t.use_synth_data = false;
    }
    cfg.model.use_sea = t.use_sea;
    if let Some(d) = &a.data {
        cfg.data.manifest = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(&a)?;
    let manifest = cfg
        .data
        .manifest
        .clone()
        .ok_or_else(|| HifiError::Config("no training manifest (use --data)".into()))?;
    let samples = load_dataset(&manifest)?;
    let hf = cfg.train.condition_filter();
    let records: Vec<TrainRecord> = samples
        .par_iter()
        .map(|s| s.to_train_record(cfg.model.patch, &hf))
        .collect::<Result<_>>()?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(&load_checkpoint(p)?, &cfg.train, &records)?,
        None => Trainer::new(&cfg.model, &cfg.train, &records)?,
    };
    write_json(&a.out.join("run.json"), &cfg)?;
    let (_, log) = run_to_end(&mut trainer, Some(&a.out))?;
    if let Some(last) = log.last() {
        println!("{}", serde_json::to_string(last).expect("log serializes"));
    }
    Ok(())
}

/// Conditioning filter recorded in the checkpoint, or the default.
fn checkpoint_filter(meta: &serde_json::Value) -> Result<HighPassConfig> {
    let train: TrainConfig = match meta.get("train") {
        Some(v) => {
            serde_json::from_value(v.clone()).map_err(|e| HifiError::Config(e.to_string()))?
        }
        None => TrainConfig::default(),
    };
    Ok(train.condition_filter())
}

fn predict_one(
    state: &ModelState,
    hf: &HighPassConfig,
    prompt: &str,
    human: &Image,
    product: &Image,
    mask: &Mask,
    steps: usize,
    seed: u64,
) -> Result<Image> {
    let cond = Conditioning::new(
        vocab::tokenize(prompt),
        human,
        product,
        mask,
        state.config.patch,
        hf,
    )?;
    sample(state, &cond, human, steps, seed)
}

fn infer(a: InferArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let hf = checkpoint_filter(&ck.meta)?;
    let state = &ck.state;
    if let Some(manifest) = &a.manifest {
        let out_dir = a
            .out_dir
            .as_ref()
            .ok_or_else(|| HifiError::Contract("--manifest needs --out-dir".into()))?;
        let samples = load_dataset(manifest)?;
        let preds: Vec<Image> = samples
            .par_iter()
            .map(|s| {
                predict_one(
                    state,
                    &hf,
                    &s.record.prompt,
                    &s.human,
                    &s.product,
                    &s.mask,
                    a.steps,
                    a.seed,
                )
            })
            .collect::<Result<_>>()?;
        for (s, p) in samples.iter().zip(&preds) {
            write_atomic(
                out_dir.join(format!("{}.ppm", s.record.id)),
                &encode_netpbm(p)?,
            )?;
        }
        println!("wrote {} predictions to {}", preds.len(), out_dir.display());
        return Ok(());
    }
    let need = |v: &Option<PathBuf>, flag: &str| {
        v.clone()
            .ok_or_else(|| HifiError::Contract(format!("missing --{flag} (or use --manifest)")))
    };
    let prompt = a
        .prompt
        .clone()
        .ok_or_else(|| HifiError::Contract("missing --prompt (or use --manifest)".into()))?;
    let human = read_netpbm(need(&a.human, "human")?)?;
    let product = read_netpbm(need(&a.product, "product")?)?;
    let mask = Mask::from_image(&read_netpbm(need(&a.mask, "mask")?)?)?;
    let out = need(&a.out, "out")?;
    let g = predict_one(
        state, &hf, &prompt, &human, &product, &mask, a.steps, a.seed,
    )?;
    write_atomic(&out, &encode_netpbm(&g)?)
}

fn eval(a: EvalArgs) -> Result<()> {
    let samples = load_dataset(&a.manifest)?;
    let preds: Vec<Image> = samples
        .iter()
        .map(|s| read_netpbm(a.pred_dir.join(format!("{}.ppm", s.record.id))))
        .collect::<Result<_>>()?;
    let items: Vec<EvalItem> = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| EvalItem {
            id: s.record.id.clone(),
            pred: p,
            target: &s.target,
            mask: &s.mask,
        })
        .collect();
    let embedder = HistogramEmbedder;
    let report = evaluate(
        &items,
        &metric_filter(a.radius_frac)?,
        a.embed.then_some(&embedder as &dyn Embedder),
    )?;
    write_json(&a.report, &report)?;
    println!(
        "{}",
        serde_json::json!({"count": report.rows.len(), "ssim": report.ssim, "ssim_hf": report.ssim_hf, "embed_sim": report.embed_sim})
    );
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<()> {
    let model = checks::model_grad_check(a.params, a.seed)?;
    let hf = checks::hf_grad_check(a.seed)?;
    println!(
        "{}",
        serde_json::json!({"params": a.params, "model_rel_err": model, "extract_hf_rel_err": hf})
    );
    if model >= a.tol || hf >= a.tol {
        return Err(HifiError::Contract(format!(
            "gradient error above {}",
            a.tol
        )));
    }
    Ok(())
}

fn selftest() -> Result<()> {
    let spectral = checks::spectral_identities(0)?;
    let sea = checks::sea_invariants(0)?;
    let dal = checks::dal_locality(0)?;
    let results = [
        (
            "dft round trip",
            spectral.round_trip_err < 1e-6
                && spectral.parseval_rel_err < 1e-5
                && spectral.constant_hf_max < 1e-6,
        ),
        (
            "sea alpha=0 reduction",
            sea.alpha_zero_exact && sea.empty_mask_exact,
        ),
        ("sea mask locality", sea.locality_exact),
        ("dal mask locality", dal.passed()),
    ];
    for (name, ok) in &results {
        println!("{} {name}", if *ok { "PASS" } else { "FAIL" });
    }
    if results.iter().all(|(_, ok)| *ok) {
        Ok(())
    } else {
        Err(HifiError::Contract("selftest failed".into()))
    }
}
