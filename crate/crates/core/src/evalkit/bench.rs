use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{HeadKind, ModelConfig, ModelParameters};
use crate::cie::{compute_deltas, InterestPool, PoolKind};
use crate::error::{Error, Result};
use crate::numerics::{
    concat_cols, linear_attention, softmax_attention, Bound, Normalization, Tape, Tensor, Var,
};

/// Shortest measurement taken as reliable; faster runs are repeated in a
/// loop until the loop takes at least this long.
const MIN_SAMPLE_SECS: f64 = 0.005;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    /// Causal softmax attention.
    SelfAttention,
    /// Kernelized attention with the plain denominator and no memory seed.
    Linear,
    /// Kernelized attention seeded with a historical memory plus a pool
    /// delta, read with the Cauchy-Schwarz denominator.
    Csa,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [Mechanism::SelfAttention, Mechanism::Linear, Mechanism::Csa];

    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::SelfAttention => "self_attention",
            Mechanism::Linear => "linear",
            Mechanism::Csa => "csa",
        }
    }
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown mechanism {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub mechanisms: Vec<Mechanism>,
    /// Sequence lengths, strictly increasing.
    pub lengths: Vec<usize>,
    pub reps: usize,
    pub d: usize,
    pub heads: usize,
    /// Also time forward plus backward.
    pub train_step: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            mechanisms: Mechanism::ALL.to_vec(),
            lengths: vec![256, 512, 1024, 2048, 4096, 8192],
            reps: 5,
            d: 64,
            heads: 2,
            train_step: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub mechanism: Mechanism,
    pub n: usize,
    /// Median seconds of one inference forward pass.
    pub infer_secs: f64,
    pub train_secs: Option<f64>,
    /// Bytes held by tape values after one training-mode forward pass.
    pub peak_bytes: usize,
    /// Runs per timed sample.
    pub inner: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub mechanism: Mechanism,
    /// Least-squares slope of log(time) against log(N).
    pub slope: f64,
    pub intercept: f64,
}

struct Fixture {
    model: ModelParameters,
    pool: Option<InterestPool>,
    seed: Option<(Tensor, Tensor)>,
}

fn fixture(mech: Mechanism, cfg: &BenchConfig, rng: &mut ChaCha8Rng) -> Result<Fixture> {
    let model_cfg = ModelConfig {
        layers: 1,
        heads: cfg.heads,
        d: cfg.d,
        d_ff: cfg.d,
        dropout: 0.0,
        max_seq_len: 1,
        head_kind: match mech {
            Mechanism::SelfAttention => HeadKind::SelfAttention,
            _ => HeadKind::Csa,
        },
        positional: Some(false),
        ..ModelConfig::default()
    };
    let mut model = ModelParameters::new(model_cfg, 1, rng)?;
    let dh = model.config.head_dim();
    let (pool, seed) = if mech == Mechanism::Csa {
        let pool = InterestPool::register(&mut model.store, PoolKind::Historical, 4, 4, cfg.d, rng)?;
        let s = Tensor::randn(&[1, dh * dh], 0.1, rng);
        let mut z = Tensor::randn(&[1, dh], 0.1, rng);
        z.data_mut().iter_mut().for_each(|v| *v = v.abs() + 1.0);
        (Some(pool), Some((s, z)))
    } else {
        (None, None)
    };
    Ok(Fixture { model, pool, seed })
}

/// Multi-head attention sublayer: projections, attention, output projection.
fn sublayer<'t>(fx: &Fixture, bound: &Bound<'t>, x: Var<'t>, mech: Mechanism) -> Result<Var<'t>> {
    let p = &fx.model.layers[0];
    let n = x.value().rows();
    let segments = [0, n];
    let mut outs = Vec::with_capacity(p.wq.len());
    for h in 0..p.wq.len() {
        let q = x.matmul(bound.get(p.wq[h]))?;
        let k = x.matmul(bound.get(p.wk[h]))?;
        let v = x.matmul(bound.get(p.wv[h]))?;
        let out = match mech {
            Mechanism::SelfAttention => {
                let scale = 1.0 / (fx.model.config.d as f64).sqrt();
                softmax_attention(q, k, v, &segments, scale)?
            }
            Mechanism::Linear => linear_attention(
                q.phi()?,
                k.phi()?,
                v,
                None,
                None,
                &segments,
                Normalization::Plain,
            )?,
            Mechanism::Csa => {
                let tape = x.tape();
                let pool = fx.pool.as_ref().expect("csa fixture has a pool");
                let (s0, z0) = fx.seed.as_ref().expect("csa fixture has a seed");
                let (ds, dz) = compute_deltas(bound, pool, bound.get(p.wk[h]), bound.get(p.wv[h]))?;
                let s = tape.constant(s0.clone()).add(ds.gather_rows(&[0])?)?;
                let z = tape.constant(z0.clone()).add(dz.gather_rows(&[0])?)?;
                linear_attention(
                    q.phi()?,
                    k.phi()?,
                    v,
                    Some(s),
                    Some(z),
                    &segments,
                    Normalization::CauchySchwarz,
                )?
            }
        };
        outs.push(out);
    }
    concat_cols(&outs)?.matmul(bound.get(p.wo))
}

/// Median seconds per call of `f`, looping short calls so each sample lasts
/// at least [`MIN_SAMPLE_SECS`].
fn time_median(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, usize)> {
    f()?;
    let mut inner = 1usize;
    loop {
        let start = Instant::now();
        for _ in 0..inner {
            f()?;
        }
        if start.elapsed().as_secs_f64() >= MIN_SAMPLE_SECS || inner >= 1 << 20 {
            break;
        }
        inner *= 2;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        for _ in 0..inner {
            f()?;
        }
        samples.push(start.elapsed().as_secs_f64() / inner as f64);
    }
    samples.sort_by(f64::total_cmp);
    Ok((samples[samples.len() / 2], inner))
}

/// Least-squares line through `(ln x, ln y)`.
pub fn log_log_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Usage("scaling fit needs at least two points".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Usage("scaling fit needs distinct lengths".into()));
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Times the attention sublayer of each mechanism over a length sweep on a
/// single sequence and fits the scaling exponent.
pub fn bench_attention(cfg: &BenchConfig) -> Result<(Vec<BenchRecord>, Vec<ScalingFit>)> {
    if cfg.reps == 0 {
        return Err(Error::Usage("reps must be at least 1".into()));
    }
    if cfg.mechanisms.is_empty() || cfg.lengths.is_empty() {
        return Err(Error::Usage("nothing to benchmark".into()));
    }
    if cfg.lengths[0] == 0 || cfg.lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Usage("lengths must be positive and strictly increasing".into()));
    }
    if cfg.heads == 0 || cfg.d % cfg.heads != 0 {
        return Err(Error::Usage("d must be divisible by heads".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    let mut fits = Vec::new();
    for &mech in &cfg.mechanisms {
        let fx = fixture(mech, cfg, &mut rng)?;
        let mut times = Vec::with_capacity(cfg.lengths.len());
        for &n in &cfg.lengths {
            let x = Tensor::randn(&[n, cfg.d], 1.0, &mut rng);
            let (infer, inner) = time_median(cfg.reps, || {
                let tape = Tape::no_grad();
                let bound = fx.model.store.bind(&tape);
                let out = sublayer(&fx, &bound, tape.constant(x.clone()), mech)?;
                std::hint::black_box(out.value().data()[0]);
                Ok(())
            })?;
            let peak_bytes = {
                let tape = Tape::new();
                let bound = fx.model.store.bind(&tape);
                sublayer(&fx, &bound, tape.constant(x.clone()), mech)?;
                tape.value_bytes()
            };
            let train = if cfg.train_step {
                Some(
                    time_median(cfg.reps, || {
                        let tape = Tape::new();
                        let bound = fx.model.store.bind(&tape);
                        let out = sublayer(&fx, &bound, tape.constant(x.clone()), mech)?;
                        let grads = tape.backward(out.sum()?)?;
                        std::hint::black_box(grads.get(bound.get(fx.model.layers[0].wo)).is_some());
                        Ok(())
                    })?
                    .0,
                )
            } else {
                None
            };
            times.push(infer);
            records.push(BenchRecord {
                mechanism: mech,
                n,
                infer_secs: infer,
                train_secs: train,
                peak_bytes,
                inner,
            });
        }
        if cfg.lengths.len() >= 2 {
            let ns: Vec<f64> = cfg.lengths.iter().map(|&n| n as f64).collect();
            let (slope, intercept) = log_log_fit(&ns, &times)?;
            fits.push(ScalingFit {
                mechanism: mech,
                slope,
                intercept,
            });
        }
    }
    Ok((records, fits))
}
