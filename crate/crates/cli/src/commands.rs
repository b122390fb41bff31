use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use sddprobe::augment::{build_plan, read_plan, write_plan, AugmentParams, AugmentationPlan, BalanceMode};
use sddprobe::backend::text::HashTextEncoder;
use sddprobe::backend::{
    fuse_stores, materialize, store_synthetic, BackendSpec, FeatureStore, PrecomputedStates, StoreKey, TextProvider,
};
use sddprobe::corpus::{generate_synthetic, load_manifest, write_manifest, BlockGain, Corpus, SpeakerFilter, Split, SyntheticConfig};
use sddprobe::evalharness::{
    block_sweep, ensemble, m_plus_sweep, read_sweep, report, seed_protocol_with_plan, write_sweep, EnsembleSpec,
    ProtocolConfig, SeedStats, SweepAxis, SweepPoint, SweepResult, SystemSweep,
};
use sddprobe::detector::TrainingData;

use crate::config::{read_structured, starter_toml, ExperimentConfig};
use crate::{
    AxisArg, Cli, Command, EnsembleArgs, ExperimentArgs, ExtractArgs, ExtractKind, FilterArg, ModeArg, PlanArgs,
    ReportArgs, SweepArgs, SynthArgs, TrainArgs, UsageError,
};

pub const SYNTHETIC_FILE: &str = "synthetic.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const EXPERIMENT_FILE: &str = "experiment.toml";
pub const RESOLVED_FILE: &str = "experiment.json";
pub const SWEEP_FILE: &str = "sweep.json";

pub fn run(cli: Cli) -> Result<()> {
    let store = cli.store;
    match cli.command {
        Command::Synth(a) => synth(a, store),
        Command::Extract(a) => extract(a, store),
        Command::Plan(a) => plan(a),
        Command::Train(a) => train(a, store),
        Command::Sweep(a) => sweep(a, store),
        Command::Ensemble(a) => cmd_ensemble(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

/// Refuses to touch an existing target unless forced; forced directories are cleared.
fn claim_output(path: &Path, force: bool) -> Result<()> {
    let occupied = match std::fs::read_dir(path) {
        Ok(mut entries) => entries.next().is_some(),
        Err(_) => path.exists(),
    };
    if !occupied {
        return Ok(());
    }
    if !force {
        return Err(usage(format!("{} already exists; pass --force to overwrite", path.display())));
    }
    if path.is_dir() {
        std::fs::remove_dir_all(path).with_context(|| format!("clearing {}", path.display()))?;
    }
    Ok(())
}

fn filter_of(f: FilterArg) -> SpeakerFilter {
    match f {
        FilterArg::ParticipantOnly => SpeakerFilter::ParticipantOnly,
        FilterArg::All => SpeakerFilter::All,
    }
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new("")).join(name)
}

fn synth(a: SynthArgs, store_root: Option<PathBuf>) -> Result<()> {
    let mut cfg: SyntheticConfig = match &a.config {
        Some(p) => serde_json::from_value(read_structured(p)?).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => SyntheticConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    set!(seed, n_pos, n_neg, dev_pos, dev_neg, dim, signal, noise_sigma);
    if !a.block_gains.is_empty() {
        cfg.block_gains = a.block_gains.iter().map(|&(block, gain)| BlockGain { block, gain }).collect();
    }
    cfg.validate()?;

    let manifest = a.out.join(MANIFEST_FILE);
    for f in [MANIFEST_FILE, SYNTHETIC_FILE, EXPERIMENT_FILE] {
        claim_output(&a.out.join(f), a.force)?;
    }
    let (corpus, features) = generate_synthetic(&cfg)?;
    write_manifest(&corpus, &manifest)?;
    write_json(&a.out.join(SYNTHETIC_FILE), &cfg)?;
    let blocks: Vec<u32> = cfg.blocks().iter().map(|b| b.block).collect();
    std::fs::write(a.out.join(EXPERIMENT_FILE), starter_toml(blocks[0], &blocks))?;

    let root = store_root.unwrap_or_else(|| a.out.join("store"));
    let mut store = FeatureStore::open(&root)?;
    let reports = store_synthetic(&mut store, &corpus, &features)?;
    let cached: Vec<_> = reports
        .iter()
        .map(|(spec, r)| serde_json::json!({"key": spec.key().to_string(), "written": r.written, "skipped": r.skipped}))
        .collect();
    print_json(&serde_json::json!({
        "manifest": manifest,
        "store": root,
        "sessions": corpus.len(),
        "cached": cached,
    }))
}

fn extract(a: ExtractArgs, store_root: Option<PathBuf>) -> Result<()> {
    let corpus = load_manifest(&a.manifest)?;
    let root = store_root.unwrap_or_else(|| sibling(&a.manifest, "store"));
    let mut store = FeatureStore::open(&root)?;
    let filter = filter_of(a.filter);
    let mut cached = Vec::new();
    let mut record = |spec: &BackendSpec, r: sddprobe::backend::MaterializeReport| {
        cached.push(serde_json::json!({"key": spec.key().to_string(), "written": r.written, "skipped": r.skipped}));
    };

    if !a.fuse.is_empty() {
        let keys = a.fuse.iter().map(|k| k.parse()).collect::<sddprobe::Result<Vec<StoreKey>>>()?;
        if let Some(k) = keys.iter().find(|k| !store.has_key(k)) {
            return Err(usage(format!("store has no features for {k}; extract it first")));
        }
        let (spec, r) = fuse_stores(&mut store, &corpus, &keys)?;
        record(&spec, r);
    } else {
        match a.kind {
            ExtractKind::Synthetic => {
                let path = a.synthetic.clone().unwrap_or_else(|| sibling(&a.manifest, SYNTHETIC_FILE));
                let cfg: SyntheticConfig = serde_json::from_value(read_structured(&path)?)
                    .map_err(|e| usage(format!("{}: {e}", path.display())))?;
                let (generated, features) = generate_synthetic(&cfg)?;
                if generated.dialogues() != corpus.dialogues() {
                    return Err(usage(format!(
                        "{} does not describe the corpus in {}",
                        path.display(),
                        a.manifest.display()
                    )));
                }
                for (spec, r) in store_synthetic(&mut store, &corpus, &features)? {
                    record(&spec, r);
                }
            }
            ExtractKind::Speech => {
                let name = a.name.clone().ok_or_else(|| usage("--name is required for speech extraction"))?;
                let states = a.states.clone().ok_or_else(|| usage("--states is required for speech extraction"))?;
                let blocks = if a.blocks.is_empty() { (1..=a.depth).collect() } else { a.blocks.clone() };
                for b in blocks {
                    let spec = BackendSpec::speech(name.clone(), b, a.depth, a.dim)?;
                    let provider = PrecomputedStates::new(spec.clone(), &states)?;
                    let r = materialize(&mut store, &corpus, &provider, filter)?;
                    record(&spec, r);
                }
            }
            ExtractKind::Text => {
                let name = a.name.clone().unwrap_or_else(|| "hashtext".into());
                let provider = TextProvider::new(name, HashTextEncoder::new(a.dim, a.text_seed))?;
                let r = materialize(&mut store, &corpus, &provider, filter)?;
                let spec = sddprobe::backend::FeatureProvider::spec(&provider).clone();
                record(&spec, r);
            }
        }
    }
    print_json(&serde_json::json!({"store": root, "cached": cached}))
}

fn plan(a: PlanArgs) -> Result<()> {
    let mut params = match &a.config {
        Some(p) => ExperimentConfig::load(p)?.augment,
        None => AugmentParams::default(),
    };
    if let Some(v) = a.m_plus {
        params.m_plus = v;
    }
    if let Some(v) = a.eps_low {
        params.eps_low = v;
    }
    if let Some(v) = a.eps_high {
        params.eps_high = v;
    }
    if let Some(v) = a.seed {
        params.seed = v;
    }
    if let Some(m) = a.mode {
        params.balance_mode = match m {
            ModeArg::Corrected => BalanceMode::Corrected,
            ModeArg::Literal => BalanceMode::Literal,
        };
    }
    params.validate()?;
    claim_output(&a.out, a.force)?;
    let corpus = load_manifest(&a.manifest)?;
    let filter = a.filter.map_or(SpeakerFilter::default(), filter_of);
    let plan = build_plan(&corpus, &params, filter)?;
    write_plan(&plan, &a.out)?;
    print_json(&serde_json::json!({
        "plan": a.out,
        "m_minus": plan.m_minus,
        "entries": plan.entries.len(),
        "positive": plan.count_label(sddprobe::corpus::Label::Positive),
        "negative": plan.count_label(sddprobe::corpus::Label::Negative),
    }))
}

/// Experiment file with command-line overrides applied, plus what it resolves to.
struct Prepared {
    cfg: ExperimentConfig,
    corpus: Corpus,
    store: FeatureStore,
    protocol: ProtocolConfig,
}

fn prepare(e: &ExperimentArgs, store_root: Option<PathBuf>) -> Result<Prepared> {
    let mut cfg = ExperimentConfig::load(&e.config)?;
    if let Some(m) = &e.manifest {
        cfg.manifest = m.clone();
    }
    if let Some(o) = &e.out {
        cfg.output = o.clone();
    }
    if let Some(s) = store_root {
        cfg.store = Some(s);
    }
    if let Some(s) = &e.seeds {
        cfg.seeds = s.clone();
    } else if e.seed.is_some() || e.n_seeds.is_some() {
        let start = e.seed.unwrap_or(0);
        let n = e.n_seeds.unwrap_or(cfg.seeds.len() as u64);
        cfg.seeds = (start..start + n).collect();
    }
    if let Some(b) = &e.backend {
        cfg.backend.name = b.clone();
        cfg.backend.fusion.clear();
    }
    if let Some(b) = e.block {
        cfg.backend.block = b;
    }
    if let Some(m) = e.m_plus {
        cfg.augment.m_plus = m;
    }
    if let Some(n) = e.epochs {
        cfg.train.max_epochs = n;
    }
    if let Some(lr) = e.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if e.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    cfg.check_paths()?;
    let store_root = cfg
        .store
        .clone()
        .ok_or_else(|| usage("no store root: set `store` in the experiment, --store or SDDPROBE_STORE_ROOT"))?;
    let corpus = load_manifest(&cfg.manifest)?;
    let store = FeatureStore::open(&store_root)?;
    let protocol = ProtocolConfig {
        augment: cfg.augment,
        detector: cfg.detector.clone(),
        train: cfg.train.clone(),
        seeds: cfg.seeds.clone(),
        filter: cfg.filter,
        jobs: e.jobs,
    };
    Ok(Prepared { cfg, corpus, store, protocol })
}

/// Feature width of `key`, read from the store entry of any dev session.
fn cached_dim(store: &FeatureStore, corpus: &Corpus, key: &StoreKey) -> Result<usize> {
    corpus
        .split(Split::Dev)
        .find_map(|d| store.entry(&d.session_id, key))
        .map(|e| e.cols)
        .ok_or_else(|| usage(format!("store has no features for {key}; run extract first")))
}

fn fill_input_dim(p: &mut Prepared, key: &StoreKey) -> Result<()> {
    if !p.cfg.input_dim_given {
        let dim = cached_dim(&p.store, &p.corpus, key)?;
        p.protocol.detector.input_dim = dim;
        p.cfg.detector.input_dim = dim;
    }
    Ok(())
}

fn train(a: TrainArgs, store_root: Option<PathBuf>) -> Result<()> {
    let mut p = prepare(&a.exp, store_root)?;
    if let Some(plan) = &a.plan {
        p.cfg.plan = Some(plan.clone());
        p.cfg.check_paths()?;
    }
    p.protocol.validate()?;
    let key = if p.cfg.backend.fusion.is_empty() {
        StoreKey {
            backend: p.cfg.backend.name.clone(),
            block: p.cfg.backend.block,
        }
    } else {
        let members = p
            .cfg
            .backend
            .fusion
            .iter()
            .map(|k| k.parse())
            .collect::<sddprobe::Result<Vec<StoreKey>>>()?;
        if let Some(k) = members.iter().find(|k| !p.store.has_key(k)) {
            return Err(usage(format!("store has no features for fusion member {k}")));
        }
        fuse_stores(&mut p.store, &p.corpus, &members)?.0.key()
    };
    fill_input_dim(&mut p, &key)?;
    let plan: AugmentationPlan = match &p.cfg.plan {
        Some(path) => read_plan(path)?,
        None => build_plan(&p.corpus, &p.protocol.augment, p.protocol.filter)?,
    };
    let out = p.cfg.output.clone();
    claim_output(&out, a.exp.force)?;
    let data = TrainingData::load(&p.store, &key, &p.corpus, &plan)?;
    let result = seed_protocol_with_plan(&data, &plan, &p.protocol, Some(&out))?;
    write_json(&out.join(RESOLVED_FILE), &p.cfg)?;
    let point = SweepResult {
        axis: SweepAxis::Block,
        points: vec![SweepPoint {
            value: u64::from(key.block),
            stats: result.stats,
        }],
    };
    write_sweep(&point, out.join(SWEEP_FILE))?;
    print_json(&serde_json::json!({"output": out, "key": key.to_string(), "stats": result.stats, "runs": result.runs}))
}

fn sweep(a: SweepArgs, store_root: Option<PathBuf>) -> Result<()> {
    let mut p = prepare(&a.exp, store_root)?;
    if !p.cfg.backend.fusion.is_empty() && a.axis == AxisArg::Block {
        return Err(usage("block sweeps need a single backend, not a fusion"));
    }
    let out = p.cfg.output.clone();
    let result = match a.axis {
        AxisArg::Block => {
            let blocks: Vec<u32> = if a.values.is_empty() {
                p.cfg.sweep.blocks.clone()
            } else {
                a.values
                    .iter()
                    .map(|&v| u32::try_from(v).map_err(|_| usage(format!("block {v} out of range"))))
                    .collect::<Result<_>>()?
            };
            let first = StoreKey {
                backend: p.cfg.backend.name.clone(),
                block: *blocks.first().ok_or_else(|| usage("no blocks to sweep"))?,
            };
            fill_input_dim(&mut p, &first)?;
            p.protocol.validate()?;
            claim_output(&out, a.exp.force)?;
            block_sweep(&p.store, &p.cfg.backend.name, &blocks, &p.corpus, &p.protocol, Some(&out))?
        }
        AxisArg::MPlus => {
            let values = if a.values.is_empty() { p.cfg.sweep.m_plus.clone() } else { a.values.clone() };
            let key = StoreKey {
                backend: p.cfg.backend.name.clone(),
                block: p.cfg.backend.block,
            };
            fill_input_dim(&mut p, &key)?;
            p.protocol.validate()?;
            claim_output(&out, a.exp.force)?;
            m_plus_sweep(&p.store, &key, &values, &p.corpus, &p.protocol, Some(&out))?
        }
    };
    write_json(&out.join(RESOLVED_FILE), &p.cfg)?;
    print_json(&result)
}

fn cmd_ensemble(a: EnsembleArgs) -> Result<()> {
    let k = a.members.len();
    if k < 3 || k % 2 == 0 {
        return Err(usage(format!("ensemble needs an odd number of at least 3 members, got {k}")));
    }
    if let Some(o) = &a.out {
        claim_output(o, a.force)?;
    }
    let result = ensemble(&EnsembleSpec { members: a.members })?;
    if let Some(o) = &a.out {
        write_json(o, &result)?;
    }
    print_json(&result)
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let mut systems = Vec::new();
    for input in &a.inputs {
        let (name, path) = match input.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(input);
                let stem = if p.is_dir() { p.file_name() } else { p.parent().and_then(Path::file_name) };
                (stem.map_or_else(|| input.clone(), |s| s.to_string_lossy().into_owned()), p)
            }
        };
        let file = if path.is_dir() { path.join(SWEEP_FILE) } else { path };
        if !file.is_file() {
            return Err(usage(format!("{} is not a sweep result", file.display())));
        }
        systems.push(SystemSweep { system: name, sweep: read_sweep(&file)? });
    }
    for f in ["summary.csv", "summary.json", "trend.svg"] {
        claim_output(&a.out.join(f), a.force)?;
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    report(&systems, &a.out)?;
    let best: Vec<_> = systems
        .iter()
        .map(|s| {
            let top = s.sweep.argmax();
            let stats: Option<SeedStats> = s.sweep.points.iter().find(|p| Some(p.value) == top).map(|p| p.stats);
            serde_json::json!({"system": s.system, "axis": s.sweep.axis.to_string(), "best": top, "stats": stats})
        })
        .collect();
    print_json(&serde_json::json!({"output": a.out, "systems": best}))
}
