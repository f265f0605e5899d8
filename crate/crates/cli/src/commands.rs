use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use guikv::baselines::LayerBudgetPlan;
use guikv::flops::{flops_report, FlopsReport, ModelConfig};
use guikv::pixel_saliency::{override_frame_norms, saliency_to_scores, ImagePlane};
use guikv::policy::{run_policy, Policy, PolicyConfig};
use guikv::sparsity::{layer_sparsity_profile, SparsityProfile, PROFILE_SCHEMA};
use guikv::workload::{
    gen_trajectory, prompt_reconstruction_error, read_trace, window_probes, write_trace,
    TraceFile, TrajectoryParams,
};
use guikv::{CompressionConfig, KeepSet, ScoreSheet};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::CliError;
use crate::output::{csv_field, csv_schema_line, emit, json};
use crate::{CompressArgs, FlopsArgs, GenArgs, PixelArgs, ScoringArgs, SparsityArgs, SweepArgs};

pub const KEEPSET_SCHEMA: &str = "guikv.keepset.v1";
pub const SCORES_SCHEMA: &str = "guikv.scores.v1";
pub const SWEEP_SCHEMA: &str = "guikv.sweep.v1";
pub const RUN_SCHEMA: &str = "guikv.run.v1";
pub const PIXEL_SCHEMA: &str = "guikv.pixel-saliency.v1";

fn load_trace(path: &Path) -> Result<TraceFile, CliError> {
    read_trace(path).map_err(|e| CliError::from(e).in_file(path))
}

pub fn gen(a: GenArgs) -> Result<(), CliError> {
    let d = TrajectoryParams::default();
    let params = TrajectoryParams {
        layers: a.layers.unwrap_or(d.layers),
        kv_heads: a.kv_heads.unwrap_or(d.kv_heads),
        group_size: a.group_size.unwrap_or(d.group_size),
        head_dim: a.head_dim.unwrap_or(d.head_dim),
        frames: a.frames.unwrap_or(d.frames),
        tokens_per_frame: a.tokens_per_frame.unwrap_or(d.tokens_per_frame),
        text_prefix: a.text_prefix.unwrap_or(d.text_prefix),
        text_suffix: a.text_suffix.unwrap_or(d.text_suffix),
        omega: a.omega.unwrap_or(d.omega),
        overlap_eta: a.eta.unwrap_or(d.overlap_eta),
        noise_sigma: a.noise.unwrap_or(d.noise_sigma),
        register_fraction: a.register_fraction.unwrap_or(d.register_fraction),
        register_norm_scale: a.register_scale.unwrap_or(d.register_norm_scale),
        concentration: a.concentration.unwrap_or(d.concentration),
        with_values: !a.no_values,
        seed: a.seed,
        ..d
    };
    let t = gen_trajectory(&params)?;
    write_trace(&a.out, &t.layout, &t.traces).map_err(|e| CliError::from(e).in_file(&a.out))
}

fn policy_config(s: &ScoringArgs, gamma: f64, rank: usize) -> PolicyConfig {
    let mut cc = CompressionConfig::new(gamma);
    cc.alpha = s.alpha;
    cc.tau = s.tau;
    cc.rank_r = rank;
    cc.omega = s.omega;
    cc.pool_kernel = Some(s.pool_kernel);
    PolicyConfig {
        compression: cc,
        pyramid_beta: s.pyramid_beta,
        sink_tokens: s.sink_tokens,
        sparsity_p: s.p,
    }
}

#[derive(Serialize)]
struct TraceShape {
    n: usize,
    omega: usize,
    layers: usize,
    kv_heads: usize,
    group_size: usize,
    head_dim: usize,
    frames: usize,
}

impl TraceShape {
    fn of(t: &TraceFile) -> Self {
        let first = &t.traces[0];
        Self {
            n: t.layout.n(),
            omega: t.layout.omega(),
            layers: t.traces.len(),
            kv_heads: first.kv_heads(),
            group_size: first.group_size(),
            head_dim: first.head_dim(),
            frames: t.layout.frame_count(),
        }
    }
}

#[derive(Serialize)]
struct CompressOutput<'a> {
    schema: &'static str,
    method: Policy,
    config: &'a PolicyConfig,
    trace: TraceShape,
    plan: Option<LayerBudgetPlan>,
    keep: KeepSet,
}

fn scores_csv(sheets: &[ScoreSheet], keep: &KeepSet) -> String {
    let mut out = csv_schema_line(SCORES_SCHEMA);
    out.push_str("layer,kv_head,token,attention,saliency,redundancy,gated,final,kept\n");
    for s in sheets {
        let kept = keep.kept(s.layer, s.kv_head);
        for i in 0..s.attention.len() {
            let rho = s
                .previous_indices
                .binary_search(&i)
                .ok()
                .map(|j| s.redundancy[j]);
            let gated = matches!((rho, s.threshold), (Some(r), Some(t)) if r < t);
            let _ = writeln!(
                out,
                "{},{},{},{:.9e},{:.9e},{},{},{:.9e},{}",
                s.layer,
                s.kv_head,
                i,
                s.attention[i],
                s.saliency[i],
                rho.map_or(String::new(), |r| format!("{r:.9e}")),
                u8::from(gated),
                s.final_scores[i],
                u8::from(kept.binary_search(&i).is_ok()),
            );
        }
    }
    out
}

pub fn compress(a: CompressArgs) -> Result<(), CliError> {
    let mut trace = load_trace(&a.trace)?;
    if let Some(img_path) = &a.saliency_image {
        let bytes = std::fs::read(img_path).map_err(|e| CliError::Input(format!("{}: {e}", img_path.display())))?;
        let img = ImagePlane::from_pnm(&bytes).map_err(|e| CliError::from(e).in_file(img_path))?;
        let grid = a.saliency_method.compute(&img, a.patch_size)?;
        trace.traces = override_frame_norms(&trace.traces, &trace.layout, 0, &grid)?;
    }
    if a.scores.is_some() && a.method.scoring_method().is_none() {
        return Err(CliError::Usage(format!(
            "--scores needs a scoring method, not `{}`",
            a.method
        )));
    }
    let config = policy_config(&a.scoring, a.budget, a.rank);
    let outcome = run_policy(&trace.traces, &trace.layout, a.method, &config)?;
    if let Some(path) = &a.scores {
        emit(Some(path), &scores_csv(&outcome.sheets, &outcome.keep))?;
    }
    let out = CompressOutput {
        schema: KEEPSET_SCHEMA,
        method: a.method,
        config: &config,
        trace: TraceShape::of(&trace),
        plan: outcome.plan,
        keep: outcome.keep,
    };
    emit(a.out.as_deref(), &json(&out)?)
}

#[derive(Debug, Clone, Serialize)]
struct SweepRow {
    method: Policy,
    budget: f64,
    rank: usize,
    status: String,
    kept_min: Option<usize>,
    kept_max: Option<usize>,
    kept_total: Option<usize>,
    window_retained: Option<bool>,
    overlap_with_gui_kv: Option<f64>,
    recon_mean: Option<f64>,
    recon_max: Option<f64>,
}

impl SweepRow {
    fn failed(method: Policy, budget: f64, rank: usize, e: guikv::Error) -> Self {
        Self {
            method,
            budget,
            rank,
            status: format!("error: {e}"),
            kept_min: None,
            kept_max: None,
            kept_total: None,
            window_retained: None,
            overlap_with_gui_kv: None,
            recon_mean: None,
            recon_max: None,
        }
    }

    fn csv_line(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            self.method,
            self.budget,
            self.rank,
            csv_field(&self.status),
            opt(self.kept_min.map(|v| v.to_string())),
            opt(self.kept_max.map(|v| v.to_string())),
            opt(self.kept_total.map(|v| v.to_string())),
            opt(self.window_retained.map(|v| u8::from(v).to_string())),
            opt(self.overlap_with_gui_kv.map(|v| format!("{v:.6}"))),
            opt(self.recon_mean.map(|v| format!("{v:.9e}"))),
            opt(self.recon_max.map(|v| format!("{v:.9e}"))),
        )
    }
}

const SWEEP_HEADER: &str = "method,budget,rank,status,kept_min,kept_max,kept_total,window_retained,overlap_with_gui_kv,recon_mean,recon_max\n";

fn overlap_fraction(keep: &KeepSet, reference: &KeepSet) -> f64 {
    let mut both = 0;
    let mut total = 0;
    for (l, h, kept) in reference.iter() {
        both += keep.overlap(reference, l, h);
        total += kept.len();
    }
    if total == 0 {
        0.0
    } else {
        both as f64 / total as f64
    }
}

#[derive(Serialize)]
struct SweepConfigEcho<'a> {
    trace: String,
    methods: &'a [Policy],
    budgets: &'a [f64],
    ranks: &'a [usize],
    alpha: f64,
    tau: f64,
    omega: Option<usize>,
    pool_kernel: usize,
    pyramid_beta: f64,
    sink_tokens: usize,
    p: f64,
    probes: &'static str,
}

#[derive(Serialize)]
struct RunReport<'a> {
    schema: &'static str,
    config: SweepConfigEcho<'a>,
    trace: TraceShape,
    rows: Vec<SweepRow>,
    sparsity: Option<SparsityProfile>,
    flops: Vec<FlopsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_time_ms: Option<u128>,
}

pub fn sweep(a: SweepArgs) -> Result<(), CliError> {
    if a.methods.is_empty() || a.budgets.is_empty() || a.ranks.is_empty() {
        return Err(CliError::Usage("--methods, --budgets and --ranks must be non-empty".into()));
    }
    let started = Instant::now();
    let trace = load_trace(&a.trace)?;
    let (traces, layout) = (&trace.traces, &trace.layout);
    let with_values = traces.iter().all(|t| t.has_values());
    let probes: Vec<_> = traces.iter().map(window_probes).collect();

    let cells: Vec<(f64, usize)> = a
        .budgets
        .iter()
        .flat_map(|&g| a.ranks.iter().map(move |&r| (g, r)))
        .collect();
    let references: Vec<Option<KeepSet>> = cells
        .par_iter()
        .map(|&(g, r)| {
            run_policy(traces, layout, Policy::GuiKv, &policy_config(&a.scoring, g, r))
                .ok()
                .map(|o| o.keep)
        })
        .collect();

    let grid: Vec<(Policy, usize)> = a
        .methods
        .iter()
        .flat_map(|&m| (0..cells.len()).map(move |c| (m, c)))
        .collect();
    let rows: Vec<SweepRow> = grid
        .par_iter()
        .map(|&(method, c)| {
            let (gamma, rank) = cells[c];
            let cfg = policy_config(&a.scoring, gamma, rank);
            let keep = match run_policy(traces, layout, method, &cfg) {
                Ok(o) => o.keep,
                Err(e) => return SweepRow::failed(method, gamma, rank, e),
            };
            let counts: Vec<usize> = keep.iter().map(|(_, _, k)| k.len()).collect();
            let recon = if with_values {
                match prompt_reconstruction_error(traces, layout, &keep, &probes) {
                    Ok((heads, mean)) => Some((mean, heads.iter().map(|h| h.max).fold(0.0, f64::max))),
                    Err(e) => return SweepRow::failed(method, gamma, rank, e),
                }
            } else {
                None
            };
            SweepRow {
                method,
                budget: gamma,
                rank,
                status: "ok".into(),
                kept_min: counts.iter().min().copied(),
                kept_max: counts.iter().max().copied(),
                kept_total: Some(keep.total_kept()),
                window_retained: Some(keep.retains_window()),
                overlap_with_gui_kv: references[c].as_ref().map(|r| overlap_fraction(&keep, r)),
                recon_mean: recon.map(|r| r.0),
                recon_max: recon.map(|r| r.1),
            }
        })
        .collect();

    let mut csv = csv_schema_line(SWEEP_SCHEMA);
    csv.push_str(SWEEP_HEADER);
    rows.iter().for_each(|r| csv.push_str(&r.csv_line()));
    emit(a.out.as_deref(), &csv)?;

    if let Some(path) = &a.report {
        let omega = a.scoring.omega.unwrap_or(layout.omega());
        let cfg = ModelConfig::calibrated();
        let flops = a
            .budgets
            .iter()
            .filter_map(|&g| flops_report(&cfg, layout.frame_count().max(1), g, omega, a.ranks[0]).ok())
            .collect();
        let report = RunReport {
            schema: RUN_SCHEMA,
            config: SweepConfigEcho {
                trace: a.trace.display().to_string(),
                methods: &a.methods,
                budgets: &a.budgets,
                ranks: &a.ranks,
                alpha: a.scoring.alpha,
                tau: a.scoring.tau,
                omega: a.scoring.omega,
                pool_kernel: a.scoring.pool_kernel,
                pyramid_beta: a.scoring.pyramid_beta,
                sink_tokens: a.scoring.sink_tokens,
                p: a.scoring.p,
                probes: "window-queries",
            },
            trace: TraceShape::of(&trace),
            rows,
            sparsity: layer_sparsity_profile(traces, layout, a.scoring.p).ok(),
            flops,
            wall_time_ms: a.timing.then(|| started.elapsed().as_millis()),
        };
        emit(Some(path), &json(&report)?)?;
    }
    Ok(())
}

pub fn sparsity(a: SparsityArgs) -> Result<(), CliError> {
    let trace = load_trace(&a.trace)?;
    let profile = layer_sparsity_profile(&trace.traces, &trace.layout, a.p)?;
    let text = if a.format == "json" {
        json(&profile)?
    } else {
        csv_schema_line(PROFILE_SCHEMA) + &profile.to_csv()
    };
    emit(a.out.as_deref(), &text)
}

pub fn flops(a: FlopsArgs) -> Result<(), CliError> {
    let cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<ModelConfig>(&text)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
        }
        None => ModelConfig::calibrated(),
    };
    let report = flops_report(&cfg, a.screenshots, a.budget, a.omega, a.rank)?;
    emit(a.out.as_deref(), &json(&report)?)
}

pub fn pixel_saliency(a: PixelArgs) -> Result<(), CliError> {
    let bytes = std::fs::read(&a.image)
        .map_err(|e| CliError::Input(format!("{}: {e}", a.image.display())))?;
    let img = ImagePlane::from_pnm(&bytes).map_err(|e| CliError::from(e).in_file(&a.image))?;
    let grid = a.method.compute(&img, a.patch_size)?;
    let scores = saliency_to_scores(&grid, a.tau, guikv::cache_model::DEFAULT_EPSILON)?;
    let mut out = csv_schema_line(PIXEL_SCHEMA);
    out.push_str("patch,row,col,saliency,score\n");
    for (i, (v, s)) in grid.values.iter().zip(&scores).enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{:.9e},{:.9e}",
            i,
            i / grid.grid_w,
            i % grid.grid_w,
            v,
            s
        );
    }
    emit(a.out.as_deref(), &out)
}
