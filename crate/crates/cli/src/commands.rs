// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::{json, Value};

use reasonlens_core::archive::write_atomically;
use reasonlens_core::datasets::{generate_2wmh_pair, load_prompt_pairs, load_triples, write_prompt_pairs, PosLexicon};
use reasonlens_core::experiments::{
    answer_probability, average_total_flops, dataset_stats, flops_for_encoding, percent_difference,
    run_injection_sweep, run_pos_sweep, run_random_injection, write_sweep, LogBase, MemorySource, SweepConfig,
    REFERENCE_MEMORY_LENGTHS,
};
use reasonlens_core::interventions::{
    encode_memory, inject, EncodeOptions, EncodingStyle, InjectionSpec, InjectionTarget, StyleKind,
};
use reasonlens_core::lens::{project_head, top_k, train_lenses, Lens, TrainConfig};
use reasonlens_core::{load_model, HookPoint, LogitRows, Model, ModelConfig, Scalar};

use crate::options::Options;
use crate::Command;

/// Resolved options plus the command name; embedded in every artifact.
fn provenance(cmd: &Command, o: &Options) -> Value {
    json!({ "command": cmd.name(), "seed": o.seed(), "config": o })
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomically(path, text.as_bytes()).with_context(|| format!("out: writing {}", path.display()))
}

fn print_json(value: &Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load<T: Scalar>(o: &Options) -> Result<Model<T>> {
    let path = o.model_path()?;
    let tok = o.tokenizer_dir(&path)?;
    let t = Instant::now();
    let model = load_model::<T>(&path, &tok, o.processing()).with_context(|| format!("model: {}", path.display()))?;
    eprintln!(
        "loaded {} ({} layers, {} heads) in {:.1}s",
        model.id(),
        model.config.n_layer,
        model.config.n_head,
        t.elapsed().as_secs_f64()
    );
    Ok(model)
}

fn target(o: &Options) -> InjectionTarget {
    o.inject_head.map_or(InjectionTarget::Layer, InjectionTarget::Head)
}

fn sweep_config<T: Scalar>(o: &Options, model: &Model<T>) -> Result<SweepConfig> {
    Ok(SweepConfig {
        layers: o.layers(model.config.n_layer)?,
        taus: o.taus()?,
        style: o.style.unwrap_or_default(),
        memory: o.memory.clone().map_or(MemorySource::Curated, MemorySource::Fixed),
        rows: o.broadcast.unwrap_or_default(),
        target: target(o),
        encode: EncodeOptions::default(),
        seed: o.seed(),
    })
}

fn out_path(o: &Options) -> Result<PathBuf> {
    Ok(Options::require(&o.out, "out")?.clone())
}

pub fn run<T: Scalar>(cmd: &Command, o: &Options) -> Result<()> {
    match cmd {
        Command::InspectHead => inspect_head::<T>(cmd, o),
        Command::Inject => inject_one::<T>(cmd, o),
        Command::Sweep => sweep::<T>(cmd, o),
        Command::PosSweep => pos_sweep::<T>(cmd, o),
        Command::RandomSweep => random_sweep::<T>(cmd, o),
        Command::Gen2wmh => gen_2wmh(cmd, o),
        Command::Stats => stats::<T>(cmd, o),
        Command::TrainLens => train_lens::<T>(cmd, o),
        Command::Flops => flops(cmd, o),
    }
}

fn inspect_head<T: Scalar>(cmd: &Command, o: &Options) -> Result<()> {
    let lens_path = o.lens.as_ref().map(|_| o.existing(&o.lens, "lens")).transpose()?;
    let model = load::<T>(o)?;
    let prompt = Options::require(&o.prompt, "prompt")?;
    let k = o.top_k.unwrap_or(10);
    let ids = model.encode(prompt)?;
    let lens = lens_path
        .map(|p| Lens::<T>::load(&p).with_context(|| format!("lens: {}", p.display())))
        .transpose()?;
    let (layer, head) = match &lens {
        Some(l) => (o.layer.unwrap_or(l.layer), o.head.unwrap_or(l.head)),
        None => (
            *Options::require(&o.layer, "layer")?,
            *Options::require(&o.head, "head")?,
        ),
    };
    if let Some(l) = &lens {
        if (l.layer, l.head) != (layer, head) {
            bail!(
                "lens: trained for head ({}, {}), asked for ({layer}, {head})",
                l.layer,
                l.head
            );
        }
    }
    let out = model
        .forward(&ids, &[], &[HookPoint::HeadOutput { layer, head }])
        .with_context(|| format!("layer/head: ({layer}, {head})"))?;
    let top = match &lens {
        Some(l) => {
            let h = out.cache.head_output(layer, head)?;
            top_k(&l.apply(h.row(ids.len() - 1))?, k)
        }
        None => project_head(&model, &out.cache, layer, head, k)?.top,
    };
    let vocab = model.tokenizer()?;
    let rows = top
        .iter()
        .map(|&(id, p)| Ok(json!({ "id": id, "token": vocab.decode(&[id])?, "probability": p.as_f64() })))
        .collect::<Result<Vec<_>>>()?;
    let result = json!({ "layer": layer, "head": head, "top": rows, "run": provenance(cmd, o) });
    for (i, r) in rows.iter().enumerate() {
        println!(
            "{}\t{}\t{:?}\t{:.6}",
            i + 1,
            r["id"],
            r["token"].as_str().unwrap_or(""),
            r["probability"].as_f64().unwrap_or(0.0)
        );
    }
    if let Some(path) = &o.out {
        write_json(path, &result)?;
    }
    Ok(())
}

fn inject_one<T: Scalar>(cmd: &Command, o: &Options) -> Result<()> {
    let model = load::<T>(o)?;
    let prompt = Options::require(&o.prompt, "prompt")?;
    let answer = Options::require(&o.answer, "answer")?;
    let memory = Options::require(&o.memory, "memory")?;
    let layer = *Options::require(&o.layer, "layer")?;
    let tau = *Options::require(&o.tau, "tau")?;
    if !(tau >= 0.0) || !tau.is_finite() {
        bail!("tau: {tau} must be finite and nonnegative");
    }
    if layer >= model.config.n_layer {
        bail!("layer: {layer} outside 0..{}", model.config.n_layer);
    }
    let style = EncodingStyle::for_layer(o.style.unwrap_or_default(), layer);
    let encoded = encode_memory(&model, memory, style, &EncodeOptions::default()).context("memory")?;
    let mut spec = InjectionSpec::new(layer, T::of(tau), encoded);
    spec.rows = o.broadcast.unwrap_or_default();
    spec.target = target(o);
    spec.validate(&model).context("inject-head")?;

    let ids = model.encode(prompt)?;
    let answer_id = reasonlens_core::experiments::answer_token(&model, answer).context("answer")?;
    let p_pre = answer_probability(&model, prompt, answer)?.as_f64();
    let logits = inject(&model, &ids, &spec, &[], LogitRows::Last)?.logits;
    let dist = reasonlens_core::next_token_distribution(&logits);
    let p_post = dist.data()[answer_id as usize].as_f64();
    let diff = percent_difference(p_pre, p_post)?;
    let result = json!({
        "p_pre": p_pre,
        "p_post": p_post,
        "percent_diff": diff,
        "memory_tokens": spec.memory.provenance.tokens,
        "run": provenance(cmd, o),
    });
    print_json(&result)?;
    if let Some(path) = &o.out {
        write_json(path, &result)?;
    }
    Ok(())
}

fn sweep<T: Scalar>(cmd: &Command, o: &Options) -> Result<()> {
    let dataset = o.existing(&o.dataset, "dataset")?;
    let out = out_path(o)?;
    let model = load::<T>(o)?;
    let pairs = load_prompt_pairs(&dataset).context("dataset")?;
    let cfg = sweep_config(o, &model)?;
    eprintln!(
        "sweep: {} prompts x {} layers x {} magnitudes",
        pairs.len(),
        cfg.layers.len(),
        cfg.taus.len()
    );
    let t = Instant::now();
    let grid = run_injection_sweep(&model, &pairs, &cfg, None)?;
    eprintln!("sweep finished in {:.1}s", t.elapsed().as_secs_f64());
    report_best(&grid);
    let sidecar = write_sweep(&grid, &out, &provenance(cmd, o)).context("out")?;
    eprintln!("wrote {} and {}", out.display(), sidecar.display());
    Ok(())
}

fn report_best(grid: &reasonlens_core::experiments::SweepGrid) {
    if let Some(best) = grid.best() {
        eprintln!(
            "best cell: layer {} tau {} robust mean {:+.3}%",
            best.layer, best.tau, best.robust_mean
        );
    }
}

fn lexicon(o: &Options) -> Result<PosLexicon> {
    let dir = o.existing(&o.lexicon, "lexicon")?;
    PosLexicon::load(&dir, false).with_context(|| format!("lexicon: {}", dir.display()))
}

fn pos_sweep<T: Scalar>(cmd: &Command, o: &Options) -> Result<()> {
    let dataset = o.existing(&o.dataset, "dataset")?;
    let lex = lexicon(o)?;
    let out = out_path(o)?;
    let pos = match Options::require(&o.pos, "pos")?.as_slice() {
        [p] => *p,
        other => bail!("pos: pos-sweep takes one part of speech, got {}", other.len()),
    };
    let model = load::<T>(o)?;
    let pairs = load_prompt_pairs(&dataset).context("dataset")?;
    let cfg = sweep_config(o, &model)?;
    eprintln!(
        "pos-sweep ({pos}): {} prompts x {} cells",
        pairs.len(),
        cfg.layers.len() * cfg.taus.len()
    );
    let grid = run_pos_sweep(&model, &pairs, &cfg, pos, &lex)?;
    report_best(&grid);
    let sidecar = write_sweep(&grid, &out, &provenance(cmd, o)).context("out")?;
    eprintln!("wrote {} and {}", out.display(), sidecar.display());
    Ok(())
}

fn random_sweep<T: Scalar>(cmd: &Command, o: &Options) -> Result<()> {
    let dataset = o.existing(&o.dataset, "dataset")?;
    let lex = lexicon(o)?;
    let out = out_path(o)?;
    let model = load::<T>(o)?;
    let pairs = load_prompt_pairs(&dataset).context("dataset")?;
    let layer = *Options::require(&o.layer, "layer")?;
    let tau = *Options::require(&o.tau, "tau")?;
    let parts = o.pos.clone().unwrap_or_else(|| lex.parts().collect());
    let n_words = o.n_words.unwrap_or(40);
    let cfg = SweepConfig {
        layers: vec![layer],
        taus: vec![tau],
        ..sweep_config(o, &model)?
    };
    eprintln!(
        "random-sweep: {} parts of speech x {n_words} words x {} prompts",
        parts.len(),
        pairs.len()
    );
    let results = run_random_injection(&model, &pairs, layer, tau, &cfg, &lex, &parts, n_words)?;
    let mut csv = String::from("pos,robust_mean_pct,n_words,n_values,n_excluded\n");
    for r in &results {
        csv.push_str(&format!(
            "{},{:.6},{},{},{}\n",
            r.pos,
            r.robust_mean,
            r.words.len(),
            r.results.len(),
            r.n_excluded
        ));
    }
    let sidecar = out.with_extension("json");
    write_atomically(&out, csv.as_bytes()).context("out")?;
    write_json(&sidecar, &json!({ "run": provenance(cmd, o), "results": results }))?;
    eprintln!("wrote {} and {}", out.display(), sidecar.display());
    Ok(())
}

fn gen_2wmh(cmd: &Command, o: &Options) -> Result<()> {
    let triples = o.existing(&o.triples, "triples")?;
    let out = out_path(o)?;
    let records = load_triples(&triples).context("triples")?;
    let pairs = records
        .iter()
        .enumerate()
        .map(|(i, t)| generate_2wmh_pair(t).with_context(|| format!("triples: record {}", i + 1)))
        .collect::<Result<Vec<_>>>()?;
    write_prompt_pairs(&out, &pairs).context("out")?;
    let sidecar = out.with_extension("json");
    write_json(&sidecar, &json!({ "run": provenance(cmd, o), "n_pairs": pairs.len() }))?;
    eprintln!("wrote {} pairs to {}", pairs.len(), out.display());
    Ok(())
}

fn stats<T: Scalar>(cmd: &Command, o: &Options) -> Result<()> {
    let dataset = o.existing(&o.dataset, "dataset")?;
    let base = match o.log_base.as_deref() {
        None | Some("e") | Some("natural") => LogBase::Natural,
        Some("2") | Some("two") => LogBase::Two,
        Some(other) => bail!("log-base: `{other}` (expected e|2)"),
    };
    let model = load::<T>(o)?;
    let pairs = load_prompt_pairs(&dataset).context("dataset")?;
    let s = dataset_stats(&model, &pairs, base)?;
    let result = json!({ "stats": s, "run": provenance(cmd, o) });
    print_json(&result)?;
    if let Some(path) = &o.out {
        write_json(path, &result)?;
    }
    Ok(())
}

fn train_lens<T: Scalar>(cmd: &Command, o: &Options) -> Result<()> {
    let corpus_path = o.existing(&o.corpus, "corpus")?;
    let out = out_path(o)?;
    let heads = o.head_list()?;
    let model = load::<T>(o)?;
    let text = std::fs::read_to_string(&corpus_path).with_context(|| format!("corpus: {}", corpus_path.display()))?;
    let records: Vec<String> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_owned)
        .collect();
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        steps: o.steps.unwrap_or(defaults.steps),
        learning_rate: o.learning_rate.unwrap_or(defaults.learning_rate),
        batch_size: o.batch_size.unwrap_or(defaults.batch_size),
        seed: o.seed(),
        direction: o.direction.unwrap_or_default(),
        max_tokens: o.max_tokens.unwrap_or(defaults.max_tokens),
        corpus_id: corpus_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    eprintln!(
        "train-lens: {} heads, {} records, {} steps",
        heads.len(),
        records.len(),
        cfg.steps
    );
    let t = Instant::now();
    let run = train_lenses(&model, &records, &heads, &cfg)?;
    eprintln!("training finished in {:.1}s", t.elapsed().as_secs_f64());
    let mut written = Vec::new();
    for (lens, losses) in run.lenses.iter().zip(&run.batch_losses) {
        let path = out.join(format!("lens_{}_{}.safetensors", lens.layer, lens.head));
        lens.save(&path).with_context(|| format!("out: {}", path.display()))?;
        written.push(json!({
            "layer": lens.layer,
            "head": lens.head,
            "file": path.file_name().map(|f| f.to_string_lossy().into_owned()),
            "batch_losses": losses,
        }));
        eprintln!(
            "head ({}, {}): loss {:.4} -> {:.4}",
            lens.layer,
            lens.head,
            losses.first().copied().unwrap_or(f64::NAN),
            losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    write_json(
        &out.join("train_lens.json"),
        &json!({ "run": provenance(cmd, o), "train": cfg, "lenses": written }),
    )
}

fn flops(cmd: &Command, o: &Options) -> Result<()> {
    let configs = match &o.models {
        None => ModelConfig::flop_reference_models(),
        Some(names) => names
            .iter()
            .map(|n| ModelConfig::by_name(n).ok_or_else(|| anyhow!("models: unknown model `{n}`")))
            .collect::<Result<_>>()?,
    };
    let n_ctx = o.n_ctx.clone().unwrap_or_else(|| REFERENCE_MEMORY_LENGTHS.to_vec());
    let styles = match o.style {
        Some(s) => vec![s],
        None => vec![StyleKind::Unembed, StyleKind::Embed, StyleKind::LayerWise],
    };
    let mut reports = Vec::new();
    let mut averages = serde_json::Map::new();
    for &style in &styles {
        for c in &configs {
            for &n in &n_ctx {
                reports.push(flops_for_encoding(style, n, c).context("n-ctx")?);
            }
        }
        let key = serde_json::to_value(style)?.as_str().unwrap_or_default().to_owned();
        averages.insert(key, json!(average_total_flops(style, &configs, &n_ctx)?));
    }
    let result = json!({ "reports": reports, "averages": averages, "run": provenance(cmd, o) });
    print_json(&result)?;
    if let Some(path) = &o.out {
        write_json(path, &result)?;
    }
    Ok(())
}
