//! Command-line front end.
//!
//! Every command that writes an artifact also writes
//! `<artifact>.settings.json`, a record of the settings that produced it.
//! Exit status: 0 on success, 1 on validation or tolerance failure, 2 on
//! I/O or format errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{load_checkpoint, parse_header, resolve_mlp, save_checkpoint, Checkpoint, LayerMlp};
use crate::engine::{
    build_toy_model, byte_tokens, forward_logits, generate, proxy_perplexity_windowed,
    ToyModelConfig, TokenId, BUNDLED_CORPUS,
};
use crate::error::{Error, Result};
use crate::report::{count_header_params, count_params, emit_report, VariantResult};
use crate::sparsity::{fade_checkpoint, prune_checkpoint, DEFAULT_MAX_RATIO};
use crate::tensor::Tensor;
use crate::transform::{convert_checkpoint, plan_conversion_shapes};

pub const DEFAULT_SEED: u64 = 42;
pub const THREADS_ENV: &str = "MLPMOE_THREADS";

pub const MLP_TOLERANCE: f32 = 1e-5;
pub const LOGIT_TOLERANCE: f32 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "moe-surgery", version, about = "Slice dense transformer MLPs into summed branches")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded toy model checkpoint.
    BuildToy(BuildToyArgs),
    /// Split every dense MLP into B contiguous branches.
    Convert(ConvertArgs),
    /// Apply differential magnitude sparsity to branch MLPs.
    Sparsify(SparsifyArgs),
    /// Keep the first K branches with compensated gates.
    Prune(PruneArgs),
    /// Check a transformed checkpoint against its dense source.
    Verify(VerifyArgs),
    /// Proxy perplexity and greedy generation timing.
    Eval(EvalArgs),
    /// Combine eval records into a variant table.
    Report(ReportArgs),
    /// convert, then optionally sparsify and prune, in one step.
    Pipeline(PipelineArgs),
    /// Parameter totals from a checkpoint header, without loading weights.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct BuildToyArgs {
    #[arg(long)]
    pub output: PathBuf,
    /// JSON file with a toy model config; defaults to the 2-layer fixture.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub branches: usize,
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SparsifyArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAX_RATIO)]
    pub fade_max_ratio: f64,
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub prune_k: usize,
    /// Remove zero-gated branches from the stored checkpoint.
    #[arg(long)]
    pub drop_dead: bool,
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Dense reference checkpoint.
    #[arg(long)]
    pub input: PathBuf,
    /// Transformed checkpoint to check.
    #[arg(long)]
    pub candidate: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub samples: usize,
    #[arg(long, default_value_t = 128)]
    pub tokens: usize,
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Raw bytes, or whitespace-separated token ids when the file ends in
    /// `.ids`. Defaults to the bundled corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long, default_value_t = 128)]
    pub window: usize,
    #[arg(long, default_value_t = 64)]
    pub gen_tokens: usize,
    #[arg(long, default_value_t = 16)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Eval records, one per variant, in row order.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub branches: usize,
    #[arg(long)]
    pub fade_max_ratio: Option<f64>,
    #[arg(long)]
    pub prune_k: Option<usize>,
    #[arg(long)]
    pub drop_dead: bool,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Also report the total after conversion with this many branches.
    #[arg(long)]
    pub branches: Option<usize>,
}

/// Everything a convert/sparsify/prune/eval run is parameterized by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub input: PathBuf,
    pub output: PathBuf,
    pub branches: usize,
    /// `Some(max_ratio)` enables fractal fade.
    pub fade_max_ratio: Option<f64>,
    pub prune_k: Option<usize>,
    pub drop_dead: bool,
    pub corpus: Option<PathBuf>,
    pub seed: u64,
    pub variant: String,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branches < 1 {
            return Err(Error::arg("--branches must be at least 1"));
        }
        if let Some(r) = self.fade_max_ratio {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::arg(format!("--fade-max-ratio {r} outside [0, 1)")));
            }
        }
        if let Some(k) = self.prune_k {
            if k < 1 || k > self.branches {
                return Err(Error::arg(format!(
                    "--prune-k {k} must lie in 1..={}",
                    self.branches
                )));
            }
        }
        Ok(())
    }

    /// Applies the configured steps in order: convert, fade, prune.
    pub fn apply(&self, ckpt: &Checkpoint) -> Result<Checkpoint> {
        self.validate()?;
        let mut out = convert_checkpoint(ckpt, self.branches)?;
        if let Some(r) = self.fade_max_ratio {
            out = fade_checkpoint(&out, r)?.0;
        }
        if let Some(k) = self.prune_k {
            out = prune_checkpoint(&out, k, self.drop_dead)?;
        }
        Ok(out)
    }
}

/// Sizes the rayon pool from `MLPMOE_THREADS` (default 1).
pub fn init_threads() {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1);
    // a pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::from(e).context(path.display().to_string()))
}

pub fn settings_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".settings.json");
    PathBuf::from(s)
}

fn write_settings(artifact: &Path, command: &str, settings: serde_json::Value) -> Result<()> {
    write_json(
        &settings_path(artifact),
        &json!({
            "command": command,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "settings": settings,
        }),
    )
}

fn load(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path)
}

fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    save_checkpoint(ckpt, path).map_err(|e| e.context(path.display().to_string()))
}

/// Token ids from a corpus file: `.ids` files hold whitespace-separated ids,
/// anything else is read as bytes.
pub fn read_corpus(path: Option<&Path>) -> Result<Vec<TokenId>> {
    let Some(path) = path else {
        return Ok(byte_tokens(BUNDLED_CORPUS));
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "ids") {
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::format(e.utf8_error().valid_up_to() as u64, "token-id file is not UTF-8"))?;
        text.split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::arg(format!("bad token id '{t}' in {}", path.display())))
            })
            .collect()
    } else {
        Ok(byte_tokens(&bytes))
    }
}

fn label_for(label: &Option<String>, path: &Path) -> String {
    label.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildToy(a) => cmd_build_toy(&a),
        Command::Convert(a) => cmd_convert(&a),
        Command::Sparsify(a) => cmd_sparsify(&a),
        Command::Prune(a) => cmd_prune(&a),
        Command::Verify(a) => cmd_verify(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Report(a) => cmd_report(&a),
        Command::Pipeline(a) => cmd_pipeline(&a),
        Command::Inspect(a) => cmd_inspect(&a),
    }
}

pub fn cmd_build_toy(args: &BuildToyArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => read_json::<ToyModelConfig>(p)?,
        None => ToyModelConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let ckpt = build_toy_model(&cfg)?;
    save(&ckpt, &args.output)?;
    write_settings(&args.output, "build-toy", serde_json::to_value(&cfg)?)?;
    println!(
        "wrote toy model: {} layers, d_model {}, d_inter {}, {} params",
        cfg.num_layers,
        cfg.d_model,
        cfg.d_inter,
        count_params(&ckpt).total
    );
    Ok(())
}

pub fn cmd_convert(args: &ConvertArgs) -> Result<()> {
    let ckpt = load(&args.input)?;
    let out = convert_checkpoint(&ckpt, args.branches)?;
    save(&out, &args.output)?;
    write_settings(
        &args.output,
        "convert",
        json!({ "input": args.input, "branches": args.branches }),
    )?;
    let before = count_params(&ckpt);
    let after = count_params(&out);
    let summary = json!({
        "num_layers": out.meta.num_layers,
        "branches_per_layer": out.meta.source_branches,
        "total_before": before.total,
        "total_after": after.total,
        "param_delta": after.total as i64 - before.total as i64,
    });
    println!(
        "converted {} layers to {} branches each; params {} -> {} (+{})",
        out.meta.num_layers,
        args.branches,
        before.total,
        after.total,
        after.total - before.total
    );
    if let Some(p) = &args.json_out {
        write_json(p, &summary)?;
    }
    Ok(())
}

pub fn cmd_sparsify(args: &SparsifyArgs) -> Result<()> {
    let ckpt = load(&args.input)?;
    let (out, kept) = fade_checkpoint(&ckpt, args.fade_max_ratio)?;
    save(&out, &args.output)?;
    write_settings(
        &args.output,
        "sparsify",
        json!({ "input": args.input, "fade_max_ratio": args.fade_max_ratio }),
    )?;
    let counts = count_params(&out);
    println!(
        "fade applied (max ratio {}): gate+up nonzero fraction {:.6}, nonzero params {} of {}",
        args.fade_max_ratio,
        counts.mlp_gate_up_density(),
        counts.nonzero,
        counts.total
    );
    if let Some(p) = &args.json_out {
        write_json(
            p,
            &json!({
                "gate_up_nonzero_fraction": counts.mlp_gate_up_density(),
                "total": counts.total,
                "nonzero": counts.nonzero,
                "per_layer_kept": kept,
            }),
        )?;
    }
    Ok(())
}

pub fn cmd_prune(args: &PruneArgs) -> Result<()> {
    let ckpt = load(&args.input)?;
    let out = prune_checkpoint(&ckpt, args.prune_k, args.drop_dead)?;
    save(&out, &args.output)?;
    write_settings(
        &args.output,
        "prune",
        json!({ "input": args.input, "prune_k": args.prune_k, "drop_dead": args.drop_dead }),
    )?;
    let mut alphas = BTreeMap::new();
    for layer in 0..out.meta.num_layers {
        if let LayerMlp::Moe(m) = resolve_mlp(&out, layer)? {
            alphas.insert(layer, m.alphas());
        }
    }
    if let Some(a) = alphas.values().next() {
        println!("pruned to K = {}; layer 0 gates {a:?}", args.prune_k);
    }
    if let Some(p) = &args.json_out {
        write_json(p, &json!({ "alphas": alphas, "params": count_params(&out) }))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub per_layer_mlp_max_dev: Vec<f32>,
    pub logits_max_dev: f32,
    pub mlp_tolerance: f32,
    pub logit_tolerance: f32,
    pub passed: bool,
}

/// Compares per-layer MLP outputs on random inputs and end-to-end logits on a
/// random token sequence.
pub fn verify_checkpoints(
    reference: &Checkpoint,
    candidate: &Checkpoint,
    seed: u64,
    samples: usize,
    tokens: usize,
) -> Result<VerifyOutcome> {
    let (r, c) = (&reference.meta, &candidate.meta);
    if (r.num_layers, r.d_model, r.vocab_size) != (c.num_layers, c.d_model, c.vocab_size) {
        return Err(Error::Schema(format!(
            "architecture mismatch: reference (layers {}, d_model {}, vocab {}) vs candidate (layers {}, d_model {}, vocab {})",
            r.num_layers, r.d_model, r.vocab_size, c.num_layers, c.d_model, c.vocab_size
        )));
    }
    if samples == 0 || tokens == 0 {
        return Err(Error::arg("verification needs at least one sample and one token"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let x = Tensor::matrix(
        samples,
        r.d_model,
        (0..samples * r.d_model).map(|_| normal.sample(&mut rng)).collect(),
    )?;
    let mut per_layer = Vec::with_capacity(r.num_layers);
    for layer in 0..r.num_layers {
        let want = resolve_mlp(reference, layer)?.forward(&x)?;
        let got = resolve_mlp(candidate, layer)?.forward(&x)?;
        per_layer.push(got.max_abs_diff(&want)?);
    }
    let ids = Uniform::new(0, r.vocab_size as TokenId).map_err(|e| Error::arg(e.to_string()))?;
    let seq: Vec<TokenId> = (0..tokens).map(|_| ids.sample(&mut rng)).collect();
    let logits_max_dev = forward_logits(candidate, &seq)?.max_abs_diff(&forward_logits(reference, &seq)?)?;
    let passed = per_layer.iter().all(|&d| d <= MLP_TOLERANCE) && logits_max_dev <= LOGIT_TOLERANCE;
    Ok(VerifyOutcome {
        per_layer_mlp_max_dev: per_layer,
        logits_max_dev,
        mlp_tolerance: MLP_TOLERANCE,
        logit_tolerance: LOGIT_TOLERANCE,
        passed,
    })
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<VerifyOutcome> {
    let reference = load(&args.input)?;
    let candidate = load(&args.candidate)?;
    let outcome = verify_checkpoints(&reference, &candidate, args.seed, args.samples, args.tokens)?;
    for (layer, d) in outcome.per_layer_mlp_max_dev.iter().enumerate() {
        println!("layer {layer}: MLP max abs deviation {d:.3e} (tolerance {MLP_TOLERANCE:.0e})");
    }
    println!(
        "logits: max abs deviation {:.3e} (tolerance {LOGIT_TOLERANCE:.0e})",
        outcome.logits_max_dev
    );
    if let Some(p) = &args.json_out {
        write_json(p, &outcome)?;
    }
    if outcome.passed {
        println!("PASS");
        Ok(outcome)
    } else {
        println!("FAIL");
        Err(Error::Tolerance(format!(
            "deviation exceeds tolerance (max MLP {:.3e}, logits {:.3e})",
            outcome.per_layer_mlp_max_dev.iter().copied().fold(0.0, f32::max),
            outcome.logits_max_dev
        )))
    }
}

/// Scores a checkpoint and times greedy generation.
pub fn evaluate(
    ckpt: &Checkpoint,
    tokens: &[TokenId],
    window: usize,
    prompt_len: usize,
    gen_tokens: usize,
    variant: String,
) -> Result<VariantResult> {
    let mut eval = proxy_perplexity_windowed(ckpt, tokens, window)?;
    let prompt = &tokens[..prompt_len.clamp(1, tokens.len())];
    let (_, secs) = generate(ckpt, prompt, gen_tokens)?;
    eval.tokens_generated = gen_tokens;
    eval.generation_seconds = Some(secs);
    Ok(VariantResult {
        variant,
        params: count_params(ckpt),
        eval,
    })
}

pub fn cmd_eval(args: &EvalArgs) -> Result<VariantResult> {
    let ckpt = load(&args.input)?;
    let tokens = read_corpus(args.corpus.as_deref())?;
    let result = evaluate(
        &ckpt,
        &tokens,
        args.window,
        args.prompt_len,
        args.gen_tokens,
        label_for(&args.label, &args.input),
    )?;
    println!(
        "{}: proxy PPL {:.4} over {} tokens, generated {} tokens in {:.3}s",
        result.variant,
        result.eval.proxy_ppl,
        result.eval.token_count,
        result.eval.tokens_generated,
        result.eval.generation_seconds.unwrap_or_default()
    );
    if let Some(p) = &args.json_out {
        write_json(p, &result)?;
        write_settings(
            p,
            "eval",
            json!({
                "input": args.input,
                "corpus": args.corpus,
                "window": args.window,
                "gen_tokens": args.gen_tokens,
                "prompt_len": args.prompt_len,
                "seed": args.seed,
            }),
        )?;
    }
    Ok(result)
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    let results = args
        .inputs
        .iter()
        .map(|p| read_json::<VariantResult>(p))
        .collect::<Result<Vec<_>>>()?;
    let report = emit_report(&results)?;
    print!("{}", report.to_text());
    for path in args.output.iter().chain(&args.json_out) {
        write_bytes(path, format!("{}\n", report.to_json()?).as_bytes())?;
        write_settings(path, "report", json!({ "inputs": args.inputs }))?;
    }
    Ok(())
}

pub fn cmd_pipeline(args: &PipelineArgs) -> Result<()> {
    let cfg = PipelineConfig {
        input: args.input.clone(),
        output: args.output.clone(),
        branches: args.branches,
        fade_max_ratio: args.fade_max_ratio,
        prune_k: args.prune_k,
        drop_dead: args.drop_dead,
        corpus: args.corpus.clone(),
        seed: args.seed,
        variant: label_for(&args.label, &args.output),
    };
    let ckpt = load(&cfg.input)?;
    let out = cfg.apply(&ckpt)?;
    save(&out, &cfg.output)?;
    write_settings(&cfg.output, "pipeline", serde_json::to_value(&cfg)?)?;
    let counts = count_params(&out);
    println!(
        "{}: {} params, {} nonzero",
        cfg.variant, counts.total, counts.nonzero
    );
    if let Some(p) = &args.json_out {
        let tokens = read_corpus(cfg.corpus.as_deref())?;
        let result = evaluate(&out, &tokens, 128, 16, 64, cfg.variant.clone())?;
        write_json(p, &result)?;
    }
    Ok(())
}

pub fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let bytes = fs::read(&args.input).map_err(|e| Error::io(&args.input, e))?;
    let header = parse_header(&bytes)?;
    let total = count_header_params(&header);
    println!("{} tensors, {total} params", header.tensors.len());
    if let Some(b) = args.branches {
        let shapes: BTreeMap<String, Vec<usize>> = header
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.shape.clone()))
            .collect();
        let planned = plan_conversion_shapes(&shapes, &Default::default(), b)?;
        let after: u64 = planned
            .values()
            .map(|s| s.iter().product::<usize>() as u64)
            .sum();
        println!("after conversion to {b} branches: {after} params (+{})", after - total);
    }
    Ok(())
}
