//! Benchmark harness: builds workloads, runs one of the attention paths,
//! optionally verifies against the dense oracle, and reports timing, MACs,
//! errors and cost estimates as JSON or CSV.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flash::{flash_entropy_fwd, TileConfig};
use crate::mac;
use crate::matn::{self, MatnTensor};
use crate::monarch::{attention_scale, monarch_attention, monarch_attention_fused, MonarchConfig};
use crate::oracle::{dense_attention, materialize_monarch};
use crate::tensor::{Element, Mat};
use crate::video::{
    find_preset, flops_estimate, vmonarch_attention, MonarchKernel, TokenGrid, VMonarchConfig,
    FLOPS_CONVENTION,
};
use crate::workload::{random_mat, Dist};

/// Largest `N` the O(N²) oracle is allowed to verify.
pub const VERIFY_MAX_N: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Dense,
    Flash,
    Monarch,
    Vmonarch,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Dense => "dense",
            Mode::Flash => "flash",
            Mode::Monarch => "monarch",
            Mode::Vmonarch => "vmonarch",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub mode: Mode,
    pub preset: Option<String>,
    /// Latent `(T, h, w)` when not using a preset.
    pub frames_hw: Option<(usize, usize, usize)>,
    pub n: Option<usize>,
    pub d: usize,
    pub m: Option<usize>,
    pub b: Option<usize>,
    pub iters: usize,
    pub clamp_min: f64,
    pub clamp: bool,
    pub recompute: bool,
    pub heads: usize,
    pub batch: usize,
    pub tiles: TileConfig,
    pub kernel: Option<MonarchKernel>,
    pub seed: u64,
    pub repeats: usize,
    pub verify: bool,
    pub precision: Precision,
    pub dist: Dist,
    pub threads: usize,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            mode: Mode::Flash,
            preset: None,
            frames_hw: None,
            n: None,
            d: 64,
            m: None,
            b: None,
            iters: 2,
            clamp_min: 0.1,
            clamp: true,
            recompute: true,
            heads: 1,
            batch: 1,
            tiles: TileConfig::default(),
            kernel: None,
            seed: 0,
            repeats: 1,
            verify: false,
            precision: Precision::F32,
            dist: Dist::Normal,
            threads: 1,
            input: None,
            output: None,
        }
    }
}

/// One run's results. Field order is the JSON key order and matches
/// [`CSV_COLUMNS`]; optional fields are omitted from JSON when absent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub mode: Mode,
    pub precision: Precision,
    pub dist: Dist,
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub units: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clamp_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recompute: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<MonarchKernel>,
    pub block_rows: usize,
    pub block_cols: usize,
    pub repeats: usize,
    pub threads: usize,
    pub wall_ns_median: u64,
    pub wall_ns_min: u64,
    pub macs: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_abs_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rel_fro_error: Option<f64>,
    /// `max |O - materialize(F)·V|` for the blocked Monarch path.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub factor_identity_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sparsity_approx: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reported_sparsity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monarch_flops: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub full_attn_flops: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recompute_flops: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduction_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flops_convention: Option<&'static str>,
}

pub const CSV_COLUMNS: &[&str] = &[
    "mode",
    "precision",
    "dist",
    "seed",
    "n",
    "d",
    "units",
    "preset",
    "frames",
    "height",
    "width",
    "m",
    "b",
    "iters",
    "clamp_min",
    "recompute",
    "kernel",
    "block_rows",
    "block_cols",
    "repeats",
    "threads",
    "wall_ns_median",
    "wall_ns_min",
    "macs",
    "max_abs_error",
    "rel_fro_error",
    "factor_identity_error",
    "sparsity",
    "sparsity_approx",
    "reported_sparsity",
    "monarch_flops",
    "full_attn_flops",
    "recompute_flops",
    "reduction_ratio",
];

/// Fields that vary between identical runs.
pub const TIMING_FIELDS: &[&str] = &["wall_ns_median", "wall_ns_min"];

fn cell<T: ToString>(x: &Option<T>) -> String {
    x.as_ref().map(ToString::to_string).unwrap_or_default()
}

impl Report {
    pub fn csv_row(&self) -> Vec<String> {
        let kernel = self.kernel.map(|k| match k {
            MonarchKernel::Blocked => "blocked",
            MonarchKernel::Fused => "fused",
        });
        vec![
            self.mode.name().to_string(),
            match self.precision {
                Precision::F32 => "f32".into(),
                Precision::F64 => "f64".into(),
            },
            match self.dist {
                Dist::Normal => "normal".into(),
                Dist::Uniform => "uniform".into(),
            },
            self.seed.to_string(),
            self.n.to_string(),
            self.d.to_string(),
            self.units.to_string(),
            cell(&self.preset),
            cell(&self.frames),
            cell(&self.height),
            cell(&self.width),
            cell(&self.m),
            cell(&self.b),
            cell(&self.iters),
            cell(&self.clamp_min),
            cell(&self.recompute),
            cell(&kernel),
            self.block_rows.to_string(),
            self.block_cols.to_string(),
            self.repeats.to_string(),
            self.threads.to_string(),
            self.wall_ns_median.to_string(),
            self.wall_ns_min.to_string(),
            self.macs.to_string(),
            cell(&self.max_abs_error),
            cell(&self.rel_fro_error),
            cell(&self.factor_identity_error),
            cell(&self.sparsity),
            cell(&self.sparsity_approx),
            cell(&self.reported_sparsity),
            cell(&self.monarch_flops),
            cell(&self.full_attn_flops),
            cell(&self.recompute_flops),
            cell(&self.reduction_ratio),
        ]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// CSV header plus one row.
    pub fn to_csv(&self) -> String {
        let mut s = CSV_COLUMNS.join(",");
        s.push('\n');
        s.push_str(&self.csv_row().join(","));
        s.push('\n');
        s
    }
}

/// Problem shape after presets, grids and input files are reconciled.
#[derive(Debug, Clone, PartialEq)]
struct Resolved {
    n: usize,
    d: usize,
    units: usize,
    grid: Option<TokenGrid>,
    reported_sparsity: Option<f64>,
    monarch: Option<(usize, usize)>,
}

fn refuse(msg: impl Into<String>) -> Error {
    Error::Refused(msg.into())
}

fn resolve(spec: &RunSpec, file: Option<&MatnTensor>) -> Result<Resolved> {
    if spec.repeats == 0 {
        return Err(refuse("--repeats must be at least 1"));
    }
    if spec.threads == 0 {
        return Err(refuse("--threads must be at least 1"));
    }
    if spec.iters == 0 {
        return Err(refuse("--t must be at least 1"));
    }
    let units = spec.heads * spec.batch;
    if units == 0 {
        return Err(refuse("--heads and --batch must be at least 1"));
    }
    let mut reported_sparsity = None;
    let mut grid = match (&spec.preset, spec.frames_hw) {
        (Some(_), Some(_)) => return Err(refuse("--preset conflicts with --frames/--height/--width")),
        (Some(name), None) => {
            let p = find_preset(name).ok_or_else(|| refuse(format!("unknown preset `{name}`")))?;
            reported_sparsity = p.reported_sparsity;
            Some(p.grid.with_head_dim(spec.d).with_heads(spec.heads, spec.batch))
        }
        (None, Some((t, h, w))) => Some(
            TokenGrid::new(t, h, w, spec.d)
                .map_err(|e| refuse(e.to_string()))?
                .with_heads(spec.heads, spec.batch),
        ),
        (None, None) => None,
    };

    let (mut n, mut d) = (spec.n, spec.d);
    if let Some(t) = file {
        let (file_units, file_n, file_d) = match t.dims.as_slice() {
            [3, n, d] => (1, *n as usize, *d as usize),
            [u, 3, n, d] => (*u as usize, *n as usize, *d as usize),
            dims => {
                return Err(refuse(format!(
                    "input tensor must be [3, N, d] or [units, 3, N, d], got {dims:?}"
                )))
            }
        };
        if file_units != units {
            return Err(refuse(format!(
                "input has {file_units} units but --heads x --batch = {units}"
            )));
        }
        if spec.n.is_some_and(|x| x != file_n) {
            return Err(refuse(format!("--n disagrees with the input file's N={file_n}")));
        }
        n = Some(file_n);
        d = file_d;
        if let Some(g) = grid.as_mut() {
            g.head_dim = d;
        }
    }

    let n = match (n, grid) {
        (Some(n), Some(g)) if n != g.tokens() => {
            return Err(refuse(format!("N={n} does not match the grid's {} tokens", g.tokens())))
        }
        (_, Some(g)) => g.tokens(),
        (Some(n), None) => n,
        (None, None) => return Err(refuse("one of --n, --preset, --frames/--height/--width or --in is required")),
    };
    if n == 0 || d == 0 {
        return Err(refuse("N and d must be positive"));
    }

    let monarch = match spec.mode {
        Mode::Dense | Mode::Flash => None,
        Mode::Vmonarch => {
            let g = grid.ok_or_else(|| refuse("vmonarch mode needs a token grid (--preset or --frames/--height/--width)"))?;
            let cfg = vmonarch_config(spec, None);
            let cfg = VMonarchConfig {
                override_m_b: override_pair(spec, n)?,
                ..cfg
            };
            Some(crate::video::factorize(&g, &cfg).map_err(|e| refuse(e.to_string()))?)
        }
        Mode::Monarch => Some(match (override_pair(spec, n)?, grid) {
            (Some(p), _) => p,
            (None, Some(g)) => (g.t_frames, g.frame_tokens()),
            (None, None) => {
                // largest divisor not above sqrt(N)
                let m = (1..=n).take_while(|x| x * x <= n).filter(|x| n % x == 0).last().unwrap_or(1);
                (m, n / m)
            }
        }),
    };

    if spec.verify && n > VERIFY_MAX_N {
        return Err(refuse(format!(
            "--verify needs the O(N^2) dense oracle and is capped at N <= {VERIFY_MAX_N}; N = {n}"
        )));
    }

    Ok(Resolved {
        n,
        d,
        units,
        grid,
        reported_sparsity,
        monarch,
    })
}

fn override_pair(spec: &RunSpec, n: usize) -> Result<Option<(usize, usize)>> {
    let pair = match (spec.m, spec.b) {
        (None, None) => return Ok(None),
        (Some(m), Some(b)) => (m, b),
        (Some(m), None) if m > 0 && n.is_multiple_of(m) => (m, n / m),
        (None, Some(b)) if b > 0 && n.is_multiple_of(b) => (n / b, b),
        (m, b) => return Err(refuse(format!("--m {m:?} / --b {b:?} do not divide N={n}"))),
    };
    if pair.0 == 0 || pair.1 == 0 || pair.0 * pair.1 != n {
        return Err(refuse(format!("m={} times b={} is not N={n}", pair.0, pair.1)));
    }
    Ok(Some(pair))
}

fn vmonarch_config(spec: &RunSpec, mb: Option<(usize, usize)>) -> VMonarchConfig {
    VMonarchConfig {
        iters: spec.iters,
        clamp_min: spec.clamp_min,
        clamp_enabled: spec.clamp,
        recompute_first_frame: spec.recompute,
        override_m_b: mb,
        kernel: spec.kernel.unwrap_or(MonarchKernel::Fused),
        tiles: spec.tiles,
    }
}

struct Inputs<T> {
    q: Vec<Mat<T>>,
    k: Vec<Mat<T>>,
    v: Vec<Mat<T>>,
}

fn generate<T: Element>(spec: &RunSpec, r: &Resolved, file: Option<&MatnTensor>) -> Result<Inputs<T>> {
    let mut inputs = Inputs {
        q: Vec::with_capacity(r.units),
        k: Vec::with_capacity(r.units),
        v: Vec::with_capacity(r.units),
    };
    match file {
        Some(t) => {
            let data: Vec<T> = t.to_vec();
            let per = r.n * r.d;
            for u in 0..r.units {
                let base = u * 3 * per;
                let take = |i: usize| Mat::from_vec(r.n, r.d, data[base + i * per..base + (i + 1) * per].to_vec());
                inputs.q.push(take(0)?);
                inputs.k.push(take(1)?);
                inputs.v.push(take(2)?);
            }
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            for _ in 0..r.units {
                inputs.q.push(random_mat(&mut rng, r.n, r.d, spec.dist));
                inputs.k.push(random_mat(&mut rng, r.n, r.d, spec.dist));
                inputs.v.push(random_mat(&mut rng, r.n, r.d, spec.dist));
            }
        }
    }
    Ok(inputs)
}

/// Runs `f` on every unit in parallel and folds worker MAC counts back in.
fn per_unit<T: Element, X: Send>(
    inputs: &Inputs<T>,
    f: impl Fn(&Mat<T>, &Mat<T>, &Mat<T>) -> Result<X> + Sync,
) -> Result<Vec<X>> {
    let results: Vec<(Result<X>, u64)> = (0..inputs.q.len())
        .into_par_iter()
        .map(|u| mac::measure(|| f(&inputs.q[u], &inputs.k[u], &inputs.v[u])))
        .collect();
    let mut out = Vec::with_capacity(results.len());
    for (r, macs) in results {
        mac::add(macs);
        out.push(r?);
    }
    Ok(out)
}

/// Output per unit, plus the blocked-path factor identity error when known.
fn execute<T: Element>(
    spec: &RunSpec,
    r: &Resolved,
    inputs: &Inputs<T>,
    identity_check: bool,
) -> Result<(Vec<Mat<T>>, Option<f64>)> {
    match spec.mode {
        Mode::Dense => {
            let tiles = TileConfig::new(spec.tiles.block_rows, r.n)?;
            let outs = per_unit(inputs, |q, k, v| {
                let q = q.scale(attention_scale(q.cols()));
                Ok(flash_entropy_fwd(&q, k, v, tiles)?.out)
            })?;
            Ok((outs, None))
        }
        Mode::Flash => {
            let outs = per_unit(inputs, |q, k, v| {
                let q = q.scale(attention_scale(q.cols()));
                Ok(flash_entropy_fwd(&q, k, v, spec.tiles)?.out)
            })?;
            Ok((outs, None))
        }
        Mode::Monarch => {
            let (m, b) = r.monarch.expect("resolved");
            let cfg = MonarchConfig {
                m,
                b,
                iters: spec.iters,
                clamp_min: spec.clamp_min,
                clamp_enabled: spec.clamp,
            };
            match spec.kernel.unwrap_or(MonarchKernel::Blocked) {
                MonarchKernel::Blocked => {
                    let res = per_unit(inputs, |q, k, v| monarch_attention(q, k, v, &cfg))?;
                    let mut identity = None;
                    if identity_check {
                        let mut worst = 0.0f64;
                        for ((o, f), v) in res.iter().zip(&inputs.v) {
                            let via = materialize_monarch(f)?.matmul(&v.cast::<f64>())?;
                            worst = worst.max(o.max_abs_diff(&via));
                        }
                        identity = Some(worst);
                    }
                    Ok((res.into_iter().map(|(o, _)| o).collect(), identity))
                }
                MonarchKernel::Fused => {
                    let outs = per_unit(inputs, |q, k, v| {
                        Ok(monarch_attention_fused(q, k, v, &cfg, spec.tiles)?.0)
                    })?;
                    Ok((outs, None))
                }
            }
        }
        Mode::Vmonarch => {
            let grid = r.grid.expect("resolved").with_head_dim(r.d);
            let cfg = vmonarch_config(spec, override_pair(spec, r.n)?);
            Ok((vmonarch_attention(&inputs.q, &inputs.k, &inputs.v, &grid, &cfg)?, None))
        }
    }
}

struct Timed<T> {
    times: Vec<u64>,
    macs: u64,
    outs: Vec<Mat<T>>,
}

/// Times each configuration `repeats` times on shared inputs. Repeats are
/// interleaved across configurations so slow drift in machine speed hits
/// all of them alike; with more than one repeat, one untimed warmup per
/// configuration keeps first-touch costs out of the measurements.
fn timed_runs<T: Element>(configs: &[(&RunSpec, &Resolved)], inputs: &Inputs<T>, repeats: usize) -> Result<Vec<Timed<T>>> {
    if repeats > 1 {
        for (spec, r) in configs {
            execute(spec, r, inputs, false)?;
        }
    }
    let mut timed: Vec<Timed<T>> = configs
        .iter()
        .map(|_| Timed {
            times: Vec::with_capacity(repeats),
            macs: 0,
            outs: Vec::new(),
        })
        .collect();
    for rep in 0..repeats {
        for ((spec, r), t) in configs.iter().zip(timed.iter_mut()) {
            let start = Instant::now();
            let (res, count) = mac::measure(|| execute(spec, r, inputs, false));
            t.times.push(start.elapsed().as_nanos() as u64);
            t.outs = res?.0;
            if rep == 0 {
                t.macs = count;
            }
        }
    }
    Ok(timed)
}

fn run_typed<T: Element>(spec: &RunSpec, r: &Resolved, file: Option<&MatnTensor>) -> Result<(Report, Vec<Mat<T>>)> {
    let inputs = generate::<T>(spec, r, file)?;
    let timed = timed_runs(&[(spec, r)], &inputs, spec.repeats)?.pop().expect("one config");
    let report = build_report(spec, r, &inputs, &timed)?;
    Ok((report, timed.outs))
}

fn build_report<T: Element>(spec: &RunSpec, r: &Resolved, inputs: &Inputs<T>, timed: &Timed<T>) -> Result<Report> {
    let (macs, outs) = (timed.macs, &timed.outs);
    let mut times = timed.times.clone();
    times.sort_unstable();
    let median = times[times.len() / 2];

    let (mut max_abs_error, mut rel_fro_error, mut factor_identity_error) = (None, None, None);
    if spec.verify {
        let mut worst = 0.0f64;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (u, o) in outs.iter().enumerate() {
            let want = dense_attention(&inputs.q[u], &inputs.k[u], &inputs.v[u], true)?.output;
            worst = worst.max(o.max_abs_diff(&want));
            for (a, b) in o.as_slice().iter().zip(want.as_slice()) {
                let diff = a.as_f64() - b;
                num += diff * diff;
                den += b * b;
            }
        }
        max_abs_error = Some(worst);
        rel_fro_error = Some(if den > 0.0 { (num / den).sqrt() } else { num.sqrt() });
        if spec.mode == Mode::Monarch {
            factor_identity_error = execute(spec, r, inputs, true)?.1;
        }
    }

    let monarch_like = matches!(spec.mode, Mode::Monarch | Mode::Vmonarch);
    let cost = match (monarch_like, r.monarch) {
        (true, Some((m, b))) => {
            let grid = match (spec.mode, r.grid) {
                (Mode::Vmonarch, Some(g)) => g.with_head_dim(r.d),
                // plain Monarch: an m-frame grid of b tokens, no recomputation
                _ => TokenGrid::new(m, 1, b, r.d)?.with_heads(spec.heads, spec.batch),
            };
            let cfg = VMonarchConfig {
                recompute_first_frame: spec.mode == Mode::Vmonarch && spec.recompute,
                override_m_b: Some((m, b)),
                ..vmonarch_config(spec, None)
            };
            Some(flops_estimate(&grid, &cfg)?)
        }
        _ => None,
    };

    let monarch_fields = monarch_like.then_some(());
    let report = Report {
        mode: spec.mode,
        precision: spec.precision,
        dist: spec.dist,
        seed: spec.seed,
        n: r.n,
        d: r.d,
        units: r.units,
        preset: spec.preset.clone(),
        frames: r.grid.map(|g| g.t_frames),
        height: r.grid.map(|g| g.h),
        width: r.grid.map(|g| g.w),
        m: r.monarch.map(|p| p.0),
        b: r.monarch.map(|p| p.1),
        iters: monarch_fields.map(|_| spec.iters),
        clamp_min: monarch_fields.and((spec.clamp).then_some(spec.clamp_min)),
        recompute: (spec.mode == Mode::Vmonarch).then_some(spec.recompute),
        kernel: monarch_fields.map(|_| {
            spec.kernel.unwrap_or(if spec.mode == Mode::Monarch {
                MonarchKernel::Blocked
            } else {
                MonarchKernel::Fused
            })
        }),
        block_rows: spec.tiles.block_rows,
        block_cols: if spec.mode == Mode::Dense { r.n } else { spec.tiles.block_cols },
        repeats: spec.repeats,
        threads: spec.threads,
        wall_ns_median: median,
        wall_ns_min: times[0],
        macs,
        max_abs_error,
        rel_fro_error,
        factor_identity_error,
        sparsity: cost.map(|c| c.sparsity),
        sparsity_approx: cost.map(|c| c.sparsity_approx),
        reported_sparsity: r.reported_sparsity,
        monarch_flops: cost.map(|c| c.monarch_flops),
        full_attn_flops: cost.map(|c| c.full_attn_flops),
        recompute_flops: cost.map(|c| c.recompute_flops),
        reduction_ratio: cost.map(|c| c.reduction_ratio),
        flops_convention: cost.map(|_| FLOPS_CONVENTION),
    };
    Ok(report)
}

fn with_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Domain(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn write_output<T: Element>(path: &PathBuf, outs: &[Mat<T>]) -> Result<()> {
    let (n, d) = outs[0].shape();
    let dims = if outs.len() == 1 {
        vec![n as u64, d as u64]
    } else {
        vec![outs.len() as u64, n as u64, d as u64]
    };
    let data: Vec<T> = outs.iter().flat_map(|o| o.as_slice().iter().copied()).collect();
    matn::write(path, &MatnTensor::new(dims, data)?)
}

/// Executes one run. Inputs come from `spec.input` when set, otherwise
/// from the seeded generator.
pub fn run(spec: &RunSpec) -> Result<Report> {
    let file = spec.input.as_ref().map(matn::read).transpose()?;
    let resolved = resolve(spec, file.as_ref())?;
    with_pool(spec.threads, || match spec.precision {
        Precision::F32 => {
            let (report, outs) = run_typed::<f32>(spec, &resolved, file.as_ref())?;
            if let Some(p) = &spec.output {
                write_output(p, &outs)?;
            }
            Ok(report)
        }
        Precision::F64 => {
            let (report, outs) = run_typed::<f64>(spec, &resolved, file.as_ref())?;
            if let Some(p) = &spec.output {
                write_output(p, &outs)?;
            }
            Ok(report)
        }
    })?
}

/// One frame count of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub frames: usize,
    pub n: usize,
    pub report: Option<Report>,
    pub dense_wall_ns_median: Option<u64>,
    pub dense_macs: Option<u64>,
    /// Dense median time over the swept mode's median time.
    pub speedup: Option<f64>,
    pub refused: Option<String>,
}

pub const SWEEP_COLUMNS: &[&str] = &[
    "frames",
    "n",
    "mode",
    "wall_ns_median",
    "dense_wall_ns_median",
    "speedup",
    "macs",
    "dense_macs",
    "max_abs_error",
    "sparsity",
    "reduction_ratio",
    "refused",
];

impl SweepRow {
    pub fn csv_row(&self) -> Vec<String> {
        let rep = self.report.as_ref();
        vec![
            self.frames.to_string(),
            self.n.to_string(),
            rep.map(|r| r.mode.name().to_string()).unwrap_or_default(),
            cell(&rep.map(|r| r.wall_ns_median)),
            cell(&self.dense_wall_ns_median),
            cell(&self.speedup),
            cell(&rep.map(|r| r.macs)),
            cell(&self.dense_macs),
            cell(&rep.and_then(|r| r.max_abs_error)),
            cell(&rep.and_then(|r| r.sparsity)),
            cell(&rep.and_then(|r| r.reduction_ratio)),
            self.refused.as_deref().unwrap_or("").replace(',', ";"),
        ]
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = SWEEP_COLUMNS.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row().join(","));
        s.push('\n');
    }
    s
}

/// Main and dense reports for one sweep point, with the median of the
/// per-repeat dense/main time ratios.
fn sweep_point_typed<T: Element>(point: &RunSpec, dense: &RunSpec) -> Result<(Report, Report, f64)> {
    let r = resolve(point, None)?;
    let rd = resolve(dense, None)?;
    let inputs = generate::<T>(point, &r, None)?;
    let mut timed = timed_runs(&[(point, &r), (dense, &rd)], &inputs, point.repeats)?;
    let d = timed.pop().expect("dense");
    let m = timed.pop().expect("main");
    let mut ratios: Vec<f64> = m
        .times
        .iter()
        .zip(&d.times)
        .map(|(&a, &b)| b as f64 / a.max(1) as f64)
        .collect();
    ratios.sort_by(f64::total_cmp);
    let speedup = ratios[ratios.len() / 2];
    Ok((build_report(point, &r, &inputs, &m)?, build_report(dense, &rd, &inputs, &d)?, speedup))
}

/// Runs `spec` (with its latent height/width) once per frame count, timing
/// dense attention on the same inputs alongside with interleaved repeats.
/// `speedup` is the median per-repeat ratio of dense to main wall time.
/// Refusals are recorded per row and do not stop the sweep.
pub fn sweep(spec: &RunSpec, frames: impl IntoIterator<Item = usize>) -> Result<Vec<SweepRow>> {
    if spec.input.is_some() || spec.output.is_some() {
        return Err(refuse("--sweep generates its own inputs; --in/--out are not supported"));
    }
    let (h, w) = match (spec.frames_hw, &spec.preset) {
        (Some((_, h, w)), _) => (h, w),
        (None, Some(name)) => {
            let p = find_preset(name).ok_or_else(|| refuse(format!("unknown preset `{name}`")))?;
            (p.grid.h, p.grid.w)
        }
        (None, None) => return Err(refuse("a sweep needs --height/--width or --preset")),
    };
    let mut rows = Vec::new();
    for t in frames {
        let point = RunSpec {
            preset: None,
            frames_hw: Some((t, h, w)),
            n: None,
            ..spec.clone()
        };
        let dense = RunSpec {
            mode: Mode::Dense,
            verify: false,
            ..point.clone()
        };
        let n = t * h * w;
        let result = with_pool(spec.threads, || match spec.precision {
            Precision::F32 => sweep_point_typed::<f32>(&point, &dense),
            Precision::F64 => sweep_point_typed::<f64>(&point, &dense),
        })?;
        match result {
            Ok((main, dense, speedup)) => rows.push(SweepRow {
                frames: t,
                n,
                speedup: Some(speedup),
                dense_wall_ns_median: Some(dense.wall_ns_median),
                dense_macs: Some(dense.macs),
                report: Some(main),
                refused: None,
            }),
            Err(Error::Refused(msg)) => rows.push(SweepRow {
                frames: t,
                n,
                report: None,
                dense_wall_ns_median: None,
                dense_macs: None,
                speedup: None,
                refused: Some(msg),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(rows)
}

/// Parses `START:END[:STEP]` (inclusive).
pub fn parse_range(s: &str) -> std::result::Result<Vec<usize>, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("`{x}`: {e}"));
    let (start, end, step) = match parts.as_slice() {
        [a, b] => (num(a)?, num(b)?, 1),
        [a, b, c] => (num(a)?, num(b)?, num(c)?),
        _ => return Err(format!("expected START:END[:STEP], got `{s}`")),
    };
    if step == 0 {
        return Err("STEP must be positive".into());
    }
    Ok((start..=end).step_by(step).filter(|&t| t > 0).collect())
}

/// Frame counts parsed from `--sweep`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameRange(pub Vec<usize>);

fn parse_frames(s: &str) -> std::result::Result<FrameRange, String> {
    parse_range(s).map(FrameRange)
}

/// Command-line flags of `vmonarch-bench`.
#[derive(Debug, Parser)]
#[command(name = "vmonarch-bench", about = "Benchmark dense, flash, Monarch and video-Monarch attention")]
pub struct Cli {
    #[arg(long, value_enum, default_value = "flash")]
    pub mode: Mode,
    /// Latent grid preset: wan-61f, wan-141f, wan-321f, wan-93f.
    #[arg(long)]
    pub preset: Option<String>,
    /// Latent frame count T.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Latent height h.
    #[arg(long)]
    pub height: Option<usize>,
    /// Latent width w.
    #[arg(long)]
    pub width: Option<usize>,
    /// Monarch iterations.
    #[arg(long = "t", default_value_t = 2)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.1)]
    pub clamp_min: f64,
    #[arg(long)]
    pub no_clamp: bool,
    #[arg(long)]
    pub no_recompute: bool,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub b: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 64)]
    pub br: usize,
    #[arg(long, default_value_t = 64)]
    pub bc: usize,
    #[arg(long, value_enum)]
    pub kernel: Option<KernelArg>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long, value_enum, default_value = "off", num_args = 0..=1, default_missing_value = "on")]
    pub verify: Toggle,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
    #[arg(long)]
    pub csv: bool,
    #[arg(long, value_enum, default_value = "normal")]
    pub dist: DistArg,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Sweep latent frame counts START:END[:STEP] at fixed height/width.
    #[arg(long, value_parser = parse_frames)]
    pub sweep: Option<FrameRange>,
    /// MATN input: [3, N, d] or [units, 3, N, d].
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// MATN output: [N, d] or [units, N, d].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Blocked,
    Fused,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DistArg {
    Normal,
    Uniform,
}

impl Cli {
    pub fn to_spec(&self) -> Result<RunSpec> {
        let frames_hw = match (self.frames, self.height, self.width) {
            (None, None, None) => None,
            (t, Some(h), Some(w)) => Some((t.unwrap_or(1), h, w)),
            _ => return Err(refuse("--height and --width must be given together")),
        };
        Ok(RunSpec {
            mode: self.mode,
            preset: self.preset.clone(),
            frames_hw,
            n: self.n,
            d: self.d,
            m: self.m,
            b: self.b,
            iters: self.iters,
            clamp_min: self.clamp_min,
            clamp: !self.no_clamp,
            recompute: !self.no_recompute,
            heads: self.heads,
            batch: self.batch,
            tiles: TileConfig::new(self.br, self.bc).map_err(|e| refuse(e.to_string()))?,
            kernel: self.kernel.map(|k| match k {
                KernelArg::Blocked => MonarchKernel::Blocked,
                KernelArg::Fused => MonarchKernel::Fused,
            }),
            seed: self.seed,
            repeats: self.repeats,
            verify: self.verify == Toggle::On,
            precision: self.precision,
            dist: match self.dist {
                DistArg::Normal => Dist::Normal,
                DistArg::Uniform => Dist::Uniform,
            },
            threads: self.threads,
            input: self.input.clone(),
            output: self.out.clone(),
        })
    }
}

/// Runs the CLI and returns the process exit code: 0 on success, 2 when a
/// request is refused, 1 on any other error.
pub fn cli_main<I, S>(args: I, stdout: &mut impl Write, stderr: &mut impl Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = write!(stderr, "{e}");
            return if code == 0 { 0 } else { 2 };
        }
    };
    let result = cli.to_spec().and_then(|spec| match &cli.sweep {
        Some(frames) => sweep(&spec, frames.0.iter().copied()).map(|rows| sweep_csv(&rows)),
        None => run(&spec).map(|r| if cli.csv { r.to_csv() } else { r.to_json() + "\n" }),
    });
    match result {
        Ok(text) => {
            let _ = stdout.write_all(text.as_bytes());
            0
        }
        Err(Error::Refused(msg)) => {
            let _ = writeln!(stderr, "refused: {msg}");
            2
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            1
        }
    }
}
