use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Serialize;
use streamrec::datastream::{
    generate_synthetic_stream, ingest_csv, read_blocks, split_blocks, write_blocks, BlockSpec,
    DataBlock, SyntheticConfig,
};
use streamrec::evalkit::{bench_attention, magnitude_probe, BenchConfig, Mechanism};
use streamrec::trainer::{
    continue_stream, evaluate_blocks, parse_ablation, run_stream, BlockData, BlockReport, Regime, StreamHooks,
    StreamState, TrainConfig,
};
use streamrec::Error;

use crate::output::{bench_csv, metrics_csv, write_file, JsonLines, RunManifest};
use crate::Command;

/// Message plus process exit code: 1 for runtime failures, 2 for usage.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            Error::Usage(_) | Error::Config(_) => Failure::usage(e.to_string()),
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Failure::usage(e.to_string()),
            _ => Failure::runtime(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn require_file(path: &Path) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::usage(format!("{} is not a readable file", path.display())))
    }
}

fn require_dir(path: &Path) -> Outcome {
    if path.join("manifest.json").is_file() {
        Ok(())
    } else {
        Err(Failure::usage(format!("{} holds no block manifest", path.display())))
    }
}

fn create_dir(path: &Path) -> Outcome {
    std::fs::create_dir_all(path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else { return Ok(T::default()) };
    require_file(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Failure::runtime(e.to_string()))?;
    toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn load_blocks(dir: &Path) -> Result<Vec<DataBlock>, Failure> {
    require_dir(dir)?;
    Ok(read_blocks(dir)?)
}

pub fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Prepare {
            input,
            blocks,
            boundaries,
            out,
        } => prepare(&input, blocks, boundaries, &out),
        Command::Generate {
            out,
            config,
            users,
            items,
            blocks,
            drift,
            new_user_rate,
            hyperactive_factor,
            seed,
        } => {
            let mut cfg: SyntheticConfig = read_toml(config.as_deref())?;
            cfg.n_users = users.unwrap_or(cfg.n_users);
            cfg.n_items = items.unwrap_or(cfg.n_items);
            cfg.blocks = blocks.unwrap_or(cfg.blocks);
            cfg.drift_rate = drift.unwrap_or(cfg.drift_rate);
            cfg.new_user_rate = new_user_rate.unwrap_or(cfg.new_user_rate);
            cfg.hyperactive_factor = hyperactive_factor.unwrap_or(cfg.hyperactive_factor);
            cfg.seed = seed.unwrap_or(cfg.seed);
            generate(&cfg, &out)
        }
        Command::Train {
            data,
            config,
            regime,
            out,
            resume,
            seed,
            csv,
        } => train(&data, config.as_deref(), regime.as_deref(), &out, resume.as_deref(), seed, csv.as_deref()),
        Command::Eval {
            data,
            checkpoint,
            probe_active,
            csv,
        } => eval(&data, &checkpoint, probe_active, csv.as_deref()),
        Command::Ablate {
            data,
            config,
            toggles,
            out,
            seed,
            csv,
        } => ablate(&data, config.as_deref(), &toggles, &out, seed, csv.as_deref()),
        Command::Bench {
            mechanisms,
            lengths,
            reps,
            d,
            heads,
            train_step,
            seed,
            csv,
            out,
        } => {
            let mechanisms = mechanisms
                .iter()
                .map(|m| m.parse::<Mechanism>())
                .collect::<Result<Vec<_>, _>>()?;
            let cfg = BenchConfig {
                mechanisms,
                lengths,
                reps,
                d,
                heads,
                train_step,
                seed,
            };
            bench(&cfg, csv.as_deref(), out.as_deref())
        }
        Command::ExportPools { checkpoint, out } => export_pools(&checkpoint, out.as_deref()),
    }
}

fn prepare(input: &Path, blocks: Option<usize>, boundaries: Option<Vec<u64>>, out: &Path) -> Outcome {
    require_file(input)?;
    let spec = match (blocks, boundaries) {
        (Some(t), None) => BlockSpec::Count(t),
        (None, Some(b)) => BlockSpec::Boundaries(b),
        _ => return Err(Failure::usage("give exactly one of --blocks and --boundaries")),
    };
    let ingested = ingest_csv(input)?;
    let split = split_blocks(&ingested.interactions, &spec)?;
    write_blocks(out, &split)?;
    let names = serde_json::json!({
        "users": ingested.user_names,
        "items": ingested.item_names,
    });
    write_file(&out.join("ids.json"), names.to_string())?;
    eprintln!("wrote {} blocks to {}", split.len(), out.display());
    Ok(())
}

fn generate(cfg: &SyntheticConfig, out: &Path) -> Outcome {
    let blocks = generate_synthetic_stream(cfg)?;
    write_blocks(out, &blocks)?;
    RunManifest::new("generate", cfg, Some(cfg.seed))?.write(out)?;
    eprintln!("wrote {} synthetic blocks to {}", blocks.len(), out.display());
    Ok(())
}

fn train_config(config: Option<&Path>, regime: Option<&str>, seed: Option<u64>) -> Result<TrainConfig, Failure> {
    let mut cfg: TrainConfig = read_toml(config)?;
    if let Some(r) = regime {
        cfg.regime = r.parse::<Regime>()?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(
    data: &Path,
    config: Option<&Path>,
    regime: Option<&str>,
    out: &Path,
    resume: Option<&Path>,
    seed: Option<u64>,
    csv: Option<&Path>,
) -> Outcome {
    let blocks = load_blocks(data)?;
    let (mut state, resumed) = match resume {
        Some(path) => {
            require_file(path)?;
            let state = StreamState::load(path)?;
            if let Some(r) = regime {
                if r.parse::<Regime>()? != state.config.regime {
                    return Err(Failure::usage("--regime differs from the checkpoint"));
                }
            }
            if config.is_some() || seed.is_some() {
                let cfg = train_config(config, regime, seed)?;
                if cfg != state.config {
                    return Err(Failure::usage("config differs from the checkpoint"));
                }
            }
            (state, Some(path.display().to_string()))
        }
        None => {
            let cfg = train_config(config, regime, seed)?;
            let n_items = blocks[0].max_item().map_or(0, |m| m + 1);
            (StreamState::new(&cfg, n_items)?, None)
        }
    };
    let ckpt = out.join("checkpoints");
    create_dir(&ckpt)?;
    let mut manifest = RunManifest::new("train", &state.config, Some(state.config.seed))?;
    manifest.resumed_from = resumed.clone();
    manifest.write(out)?;
    write_file(
        &out.join("config.toml"),
        toml::to_string(&state.config).map_err(|e| Failure::runtime(e.to_string()))?,
    )?;
    let append = resumed.is_some();
    let mut log = JsonLines::create(&out.join("train_log.jsonl"), append)?;
    let mut metrics = JsonLines::create(&out.join("metrics.jsonl"), append)?;
    let mut rows = Vec::new();
    let mut on_block = |st: &StreamState, r: &BlockReport| -> streamrec::Result<()> {
        st.save(&ckpt.join(format!("state_block_{:03}.bin", r.block)))?;
        std::fs::write(
            ckpt.join(format!("memories_block_{:03}.bin", r.block)),
            st.memories.to_bytes(),
        )?;
        let io = |f: Failure| Error::Checkpoint(f.message);
        for e in &r.epochs {
            log.write(e).map_err(io)?;
        }
        metrics.write(&r.metrics).map_err(io)?;
        eprintln!(
            "block {}: loss {:.4}, LA {:.4}, H-mean {:.4}",
            r.block,
            r.epochs.last().map_or(f64::NAN, |e| e.total),
            r.metrics.la,
            r.metrics.hmean
        );
        rows.push(("train".to_string(), r.metrics.clone()));
        Ok(())
    };
    let mut hooks = StreamHooks {
        on_block: Some(&mut on_block),
        ..StreamHooks::default()
    };
    continue_stream(&mut state, &blocks, &mut hooks)?;
    if let Some(path) = csv {
        write_file(path, metrics_csv(&rows))?;
    }
    Ok(())
}

fn eval(data: &Path, checkpoint: &Path, probe_active: Option<Vec<usize>>, csv: Option<&Path>) -> Outcome {
    let blocks = load_blocks(data)?;
    require_file(checkpoint)?;
    let state = StreamState::load(checkpoint)?;
    let t = state.block;
    if t == 0 || t > blocks.len() {
        return Err(Failure::usage(format!(
            "checkpoint is at block {t}, data has {} blocks",
            blocks.len()
        )));
    }
    let report = evaluate_blocks(&state, &blocks[..t])?;
    println!("{}", json_line(&report)?);
    if let Some(active) = probe_active {
        let data = BlockData::new(&blocks[t - 1], state.config.model.max_seq_len);
        let active: BTreeSet<usize> = active.into_iter().collect();
        let probe = magnitude_probe(&state, &data, &active)?;
        println!("{}", json_line(&probe)?);
    }
    if let Some(path) = csv {
        write_file(path, metrics_csv(&[("eval".into(), report)]))?;
    }
    Ok(())
}

fn dir_name(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '=' || c == '+' { c } else { '_' })
        .collect()
}

#[derive(Serialize)]
struct AblationSummary<'a> {
    variant: &'a str,
    block: usize,
    ra: Option<f64>,
    la: f64,
    hmean: f64,
    new_user_recall: f64,
}

fn ablate(
    data: &Path,
    config: Option<&Path>,
    spec: &str,
    out: &Path,
    seed: Option<u64>,
    csv: Option<&Path>,
) -> Outcome {
    let blocks = load_blocks(data)?;
    let base = train_config(config, None, seed)?;
    let variants = parse_ablation(spec, &base.toggles)?;
    create_dir(out)?;
    RunManifest::new("ablate", &base, Some(base.seed))?.write(out)?;
    let mut summary = JsonLines::create(&out.join("summary.jsonl"), false)?;
    let mut rows = Vec::new();
    for v in &variants {
        let dir: PathBuf = out.join(dir_name(&v.name));
        create_dir(&dir)?;
        let cfg = v.apply(&base);
        let (_, reports) = run_stream(&cfg, &blocks, &mut StreamHooks::default())?;
        RunManifest::new("ablate", &cfg, Some(cfg.seed))?.write(&dir)?;
        let mut log = JsonLines::create(&dir.join("train_log.jsonl"), false)?;
        let mut metrics = JsonLines::create(&dir.join("metrics.jsonl"), false)?;
        for r in &reports {
            for e in &r.epochs {
                log.write(e)?;
            }
            metrics.write(&r.metrics)?;
            rows.push((v.name.clone(), r.metrics.clone()));
        }
        if let Some(last) = reports.last() {
            let m = &last.metrics;
            summary.write(&AblationSummary {
                variant: &v.name,
                block: m.block,
                ra: m.ra,
                la: m.la,
                hmean: m.hmean,
                new_user_recall: m.new_users.recall,
            })?;
            eprintln!("{}: H-mean {:.4}", v.name, m.hmean);
        }
    }
    if let Some(path) = csv {
        write_file(path, metrics_csv(&rows))?;
    }
    Ok(())
}

fn bench(cfg: &BenchConfig, csv: Option<&Path>, out: Option<&Path>) -> Outcome {
    let (records, fits) = bench_attention(cfg)?;
    for r in &records {
        println!("{}", json_line(r)?);
    }
    for f in &fits {
        println!("{}", json_line(f)?);
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        RunManifest::new("bench", cfg, Some(cfg.seed))?.write(dir)?;
        let mut lines = JsonLines::create(&dir.join("bench.jsonl"), false)?;
        for r in &records {
            lines.write(r)?;
        }
        let mut lines = JsonLines::create(&dir.join("fits.jsonl"), false)?;
        for f in &fits {
            lines.write(f)?;
        }
    }
    if let Some(path) = csv {
        write_file(path, bench_csv(&records))?;
    }
    Ok(())
}

fn json_line<T: Serialize>(v: &T) -> Result<String, Failure> {
    serde_json::to_string(v).map_err(|e| Failure::runtime(e.to_string()))
}

#[derive(Serialize)]
struct PoolDump {
    size: usize,
    pattern_len: usize,
    keys: Vec<Vec<f64>>,
    patterns: Vec<Vec<Vec<f64>>>,
    selection_counts: Vec<usize>,
}

#[derive(Serialize)]
struct PoolsExport {
    block: usize,
    historical: PoolDump,
    current: PoolDump,
    /// user -> [historical index, current index]
    selected: BTreeMap<usize, [usize; 2]>,
}

fn export_pools(checkpoint: &Path, out: Option<&Path>) -> Outcome {
    require_file(checkpoint)?;
    let state = StreamState::load(checkpoint)?;
    let store = &state.model.store;
    let dump = |pool: &streamrec::cie::InterestPool, pick: fn(&(usize, usize)) -> usize| {
        let keys = pool.key_matrix(store);
        let mut counts = vec![0; pool.size];
        for ix in state.indices.values() {
            counts[pick(ix)] += 1;
        }
        PoolDump {
            size: pool.size,
            pattern_len: pool.pattern_len,
            keys: (0..pool.size).map(|i| keys.row(i).to_vec()).collect(),
            patterns: (0..pool.size)
                .map(|i| {
                    let p = pool.pattern(store, i);
                    (0..p.rows()).map(|r| p.row(r).to_vec()).collect()
                })
                .collect(),
            selection_counts: counts,
        }
    };
    let export = PoolsExport {
        block: state.block,
        historical: dump(&state.pools.historical, |p| p.0),
        current: dump(&state.pools.current, |p| p.1),
        selected: state.indices.iter().map(|(&u, &(i, j))| (u, [i, j])).collect(),
    };
    let text = serde_json::to_string_pretty(&export).map_err(|e| Failure::runtime(e.to_string()))?;
    match out {
        Some(path) => write_file(path, text),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}
