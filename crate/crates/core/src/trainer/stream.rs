use serde::{Deserialize, Serialize};

use super::config::{Regime, Toggles, TrainConfig};
use super::data::BlockData;
use super::flow::{commit_block, evaluate, fit_block, EpochRecord, FitHooks};
use super::state::StreamState;
use crate::datastream::DataBlock;
use crate::error::{Error, Result};
use crate::evalkit::MetricsReport;

/// Outcome of one block: training curve and evaluation before commit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: usize,
    pub epochs: Vec<EpochRecord>,
    pub refreshes: usize,
    /// Users that received pseudo-historical memories.
    pub pseudo_users: Vec<usize>,
    pub metrics: MetricsReport,
}

/// Optional instrumentation for a stream run.
#[derive(Default)]
pub struct StreamHooks<'a> {
    pub fit: FitHooks<'a>,
    /// Called after each committed block, e.g. to write a checkpoint.
    pub on_block: Option<&'a mut dyn FnMut(&StreamState, &BlockReport) -> Result<()>>,
}

fn initial_items(blocks: &[DataBlock]) -> Result<usize> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::EmptyInput("stream has no blocks".into()))?;
    Ok(first.max_item().map_or(0, |m| m + 1))
}

/// Trains and evaluates every block in order from a fresh state.
pub fn run_stream(
    config: &TrainConfig,
    blocks: &[DataBlock],
    hooks: &mut StreamHooks<'_>,
) -> Result<(StreamState, Vec<BlockReport>)> {
    let mut state = StreamState::new(config, initial_items(blocks)?)?;
    let reports = continue_stream(&mut state, blocks, hooks)?;
    Ok((state, reports))
}

/// Processes the blocks after `state.block`. `blocks` is the whole stream
/// starting at block 1.
pub fn continue_stream(
    state: &mut StreamState,
    blocks: &[DataBlock],
    hooks: &mut StreamHooks<'_>,
) -> Result<Vec<BlockReport>> {
    for (i, b) in blocks.iter().enumerate() {
        if b.index != i + 1 {
            return Err(Error::Usage(format!("block at position {} has index {}", i + 1, b.index)));
        }
    }
    if state.block > blocks.len() {
        return Err(Error::Usage(format!(
            "state is at block {} but the stream has {} blocks",
            state.block,
            blocks.len()
        )));
    }
    let max_len = state.config.model.max_seq_len;
    let datas: Vec<BlockData<'_>> = blocks.iter().map(|b| BlockData::new(b, max_len)).collect();
    let mut reports = Vec::new();
    for t in state.block + 1..=blocks.len() {
        let data = &datas[t - 1];
        let replay = match state.config.regime {
            Regime::FineTune => &datas[..0],
            Regime::FullBatch => &datas[..t - 1],
        };
        let fit = fit_block(state, data, replay, &mut hooks.fit)?;
        let metrics = evaluate(state, &blocks[..t], &datas[..t])?;
        commit_block(state, data)?;
        let report = BlockReport {
            block: t,
            epochs: fit.epochs,
            refreshes: fit.refreshes,
            pseudo_users: fit.neighbors.iter().map(|n| n.user).collect(),
            metrics,
        };
        if let Some(cb) = hooks.on_block.as_deref_mut() {
            cb(state, &report)?;
        }
        reports.push(report);
    }
    Ok(reports)
}

/// One configuration of an ablation study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub toggles: Toggles,
    /// Overrides the neighbor count when set.
    pub top_k: Option<usize>,
}

impl Variant {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.toggles = self.toggles;
        if let Some(k) = self.top_k {
            cfg.top_k = k;
        }
        cfg
    }
}

fn toggle_name(t: &Toggles) -> String {
    let on: Vec<&str> = Toggles::NAMES.iter().copied().filter(|n| t.get(n) == Some(true)).collect();
    if on.is_empty() {
        "none".into()
    } else {
        on.join("+")
    }
}

fn parse_factor(part: &str, base: &Toggles) -> Result<Vec<Variant>> {
    let part = part.trim();
    if part == "drop-one" {
        let mut out = vec![Variant {
            name: "full".into(),
            toggles: Toggles::default(),
            top_k: None,
        }];
        for n in Toggles::NAMES {
            let mut t = Toggles::default();
            t.set(n, false)?;
            out.push(Variant {
                name: format!("-{n}"),
                toggles: t,
                top_k: None,
            });
        }
        return Ok(out);
    }
    if let Some((name, sweep)) = part.split_once(':') {
        if name.trim() != "pka" {
            return Err(Error::Usage(format!("only pka supports a sweep, got {name:?}")));
        }
        let values = sweep
            .trim()
            .strip_prefix("K=")
            .ok_or_else(|| Error::Usage(format!("expected K=<list> in {part:?}")))?;
        return values
            .split(',')
            .map(|v| {
                let k: usize = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Usage(format!("bad neighbor count {v:?}")))?;
                let mut t = *base;
                t.pka = k > 0;
                Ok(Variant {
                    name: format!("K={k}"),
                    toggles: t,
                    top_k: Some(k),
                })
            })
            .collect();
    }
    let names: Vec<&str> = part.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if names.is_empty() {
        return Err(Error::Usage("empty ablation spec".into()));
    }
    let mut out = Vec::with_capacity(1 << names.len());
    for mask in 0..1usize << names.len() {
        let mut t = *base;
        for (i, n) in names.iter().enumerate() {
            t.set(n, mask >> i & 1 == 1)?;
        }
        out.push(Variant {
            name: toggle_name(&t),
            toggles: t,
            top_k: None,
        });
    }
    Ok(out)
}

/// Parses an ablation spec. `csn,pka` enumerates every on/off combination
/// of the listed components, `pka:K=0,1,5` sweeps the neighbor count,
/// `drop-one` gives the full model and each single component removed, and
/// `;` combines factors as a cross product.
pub fn parse_ablation(spec: &str, base: &Toggles) -> Result<Vec<Variant>> {
    let mut acc = vec![Variant {
        name: String::new(),
        toggles: *base,
        top_k: None,
    }];
    for part in spec.split(';') {
        let mut next = Vec::new();
        for v in &acc {
            for f in parse_factor(part, &v.toggles)? {
                let name = if v.name.is_empty() {
                    f.name
                } else {
                    format!("{};{}", v.name, f.name)
                };
                next.push(Variant {
                    name,
                    toggles: f.toggles,
                    top_k: f.top_k.or(v.top_k),
                });
            }
        }
        acc = next;
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub reports: Vec<BlockReport>,
}

/// Runs the whole stream once per variant.
pub fn ablation_run(
    base: &TrainConfig,
    blocks: &[DataBlock],
    variants: &[Variant],
) -> Result<Vec<VariantResult>> {
    variants
        .iter()
        .map(|v| {
            let (_, reports) = run_stream(&v.apply(base), blocks, &mut StreamHooks::default())?;
            Ok(VariantResult {
                variant: v.clone(),
                reports,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combinations_cover_all_masks() {
        let v = parse_ablation("csn,pka", &Toggles::default()).unwrap();
        assert_eq!(v.len(), 4);
        assert!(v.iter().all(|x| x.toggles.cie_h && x.toggles.cie_c));
        assert!(v.iter().any(|x| !x.toggles.csn && !x.toggles.pka));
    }

    #[test]
    fn sweep_and_cross_product() {
        let v = parse_ablation("pka:K=0,1,5", &Toggles::default()).unwrap();
        assert_eq!(v.iter().map(|x| x.top_k).collect::<Vec<_>>(), [Some(0), Some(1), Some(5)]);
        assert!(!v[0].toggles.pka && v[1].toggles.pka);
        let v = parse_ablation("csn;pka:K=1,3", &Toggles::default()).unwrap();
        assert_eq!(v.len(), 4);
        assert!(v.iter().any(|x| !x.toggles.csn && x.top_k == Some(3)));
    }

    #[test]
    fn drop_one_lists_full_and_each_removal() {
        let v = parse_ablation("drop-one", &Toggles::default()).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v[0].toggles, Toggles::default());
        assert!(!v[3].toggles.cie_c);
    }

    #[test]
    fn unknown_component_is_rejected() {
        assert!(parse_ablation("dropout", &Toggles::default()).is_err());
        assert!(parse_ablation("csn:K=1", &Toggles::default()).is_err());
    }
}
