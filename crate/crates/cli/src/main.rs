//! `morphfit` command-line tool.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on data or validation errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use morphfit::bench::{mem, mem_normalized, run_benchmark, synth_instance, BenchConfig, SynthSpec};
use morphfit::io::{export_obj, parse_pts, write_atomic, write_pts};
use morphfit::{
    fit, make_synthetic_model, pifr_fit, project, Coefficients, Error, FitConfig, FitResult, FusionMode, LandmarkSet,
    MorphableModel, ParamVector, PifrOptions,
};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "morphfit", version, about = "Fit a linear face model to 2D landmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic morphable model and save it as JSON.
    SynthModel(SynthModelArgs),
    /// Draw a random face and pose from a model and write its landmarks as `.pts`.
    SynthData(SynthDataArgs),
    /// Fit the model to a `.pts` file; prints the result as JSON.
    Fit(FitArgs),
    /// Dual fit (original view plus frontalized view) with loss-weighted fusion.
    Pifr(PifrArgs),
    /// Run the yaw-binned synthetic benchmark and emit a CSV report.
    Bench(BenchArgs),
    /// MEM between ground-truth landmarks and an estimate.
    Eval(EvalArgs),
    /// Export the synthesized mesh as Wavefront OBJ.
    ExportObj(ExportObjArgs),
}

#[derive(Args)]
struct SynthModelArgs {
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    vertices: usize,
    #[arg(long, default_value_t = 40)]
    d_id: usize,
    #[arg(long, default_value_t = 10)]
    d_exp: usize,
    /// Number of landmarks.
    #[arg(long, default_value_t = 68)]
    k: usize,
}

#[derive(Args)]
struct SynthDataArgs {
    #[arg(short, long)]
    model: PathBuf,
    /// Output `.pts` path.
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    yaw_min: f64,
    #[arg(long, default_value_t = 30.0)]
    yaw_max: f64,
    /// Noise standard deviation as a fraction of the face bounding-box diagonal.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, action = ArgAction::Set, default_value_t = false)]
    occlude: bool,
    /// Also write the ground truth (parameters, visibility) as JSON here.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SolverArgs {
    /// Keep uniform landmark weights (plain least squares).
    #[arg(long)]
    no_reweight: bool,
    #[arg(long)]
    lambda_id: Option<f64>,
    #[arg(long)]
    lambda_exp: Option<f64>,
    #[arg(long)]
    max_outer: Option<usize>,
}

impl SolverArgs {
    fn config(&self) -> Result<FitConfig, Error> {
        let d = FitConfig::default();
        let config = FitConfig {
            reweight: !self.no_reweight,
            lambda_id: self.lambda_id.unwrap_or(d.lambda_id),
            lambda_exp: self.lambda_exp.unwrap_or(d.lambda_exp),
            max_outer: self.max_outer.unwrap_or(d.max_outer),
            ..d
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(short, long)]
    model: PathBuf,
    #[arg(short, long)]
    landmarks: PathBuf,
    /// Also write the JSON result here.
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct PifrArgs {
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, default_value = "full", value_parser = parse_mode)]
    mode: FusionMode,
    /// Gaussian jitter added to the frontalized landmarks (image units).
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    /// Seed of the jitter noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Model to benchmark; defaults to the synthetic model of `synth-model --seed 1`.
    #[arg(short, long)]
    model: Option<PathBuf>,
    /// CSV output path; stdout when omitted.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Trials per yaw bin.
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    trials: u64,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    occlude: bool,
    /// Master seed; trial i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = one per core). Output does not depend on it.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[arg(long, default_value = "full", value_parser = parse_mode)]
    mode: FusionMode,
    #[arg(long)]
    lambda_id: Option<f64>,
    #[arg(long)]
    lambda_exp: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(short, long)]
    model: PathBuf,
    /// Ground-truth `.pts`.
    #[arg(short, long)]
    landmarks: PathBuf,
    /// JSON result of `fit` or `pifr`; its parameters are reprojected.
    #[arg(long, conflicts_with = "estimate", required_unless_present = "estimate")]
    fit: Option<PathBuf>,
    /// Estimated landmarks as `.pts`.
    #[arg(long)]
    estimate: Option<PathBuf>,
}

#[derive(Args)]
struct ExportObjArgs {
    #[arg(short, long)]
    model: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    /// JSON result of `fit` or `pifr` supplying the coefficients; mean shape when omitted.
    #[arg(long)]
    fit: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<FusionMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn read_text(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_pts(path: &Path) -> Result<LandmarkSet, Error> {
    parse_pts(&read_text(path)?).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

fn params_json(p: &ParamVector) -> Value {
    json!({
        "f": p.pose.f,
        "pitch": p.pose.pitch,
        "yaw": p.pose.yaw,
        "roll": p.pose.roll,
        "t": p.pose.t.as_slice(),
        "alpha_id": p.coeffs.alpha_id.as_slice(),
        "alpha_exp": p.coeffs.alpha_exp.as_slice(),
    })
}

fn params_from_json(value: &Value, model: &MorphableModel) -> Result<ParamVector, Error> {
    let bad = |what: &str| Error::Validation(format!("result JSON: missing or invalid `{what}`"));
    let params = value.get("params").ok_or_else(|| bad("params"))?;
    let num = |key: &str| params.get(key).and_then(Value::as_f64).ok_or_else(|| bad(key));
    let list = |key: &str| -> Result<Vec<f64>, Error> {
        params
            .get(key)
            .and_then(Value::as_array)
            .ok_or_else(|| bad(key))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| bad(key)))
            .collect()
    };
    let mut flat = vec![num("f")?, num("pitch")?, num("yaw")?, num("roll")?];
    let t = list("t")?;
    if t.len() != 3 {
        return Err(bad("t"));
    }
    flat.extend(t);
    flat.extend(list("alpha_id")?);
    flat.extend(list("alpha_exp")?);
    ParamVector::from_slice(&flat, model.d_id(), model.d_exp())
}

fn fit_json(result: &FitResult) -> Value {
    json!({
        "params": params_json(&result.params),
        "loss": result.loss,
        "weighted_loss": result.weighted_loss,
        "iterations": result.iterations,
        "converged": result.converged,
        "weights": result.weights,
    })
}

fn emit(value: &Value, out: Option<&Path>) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).expect("JSON values always serialize") + "\n";
    if let Some(path) = out {
        write_atomic(path, text.as_bytes())?;
    }
    print!("{text}");
    Ok(())
}

/// RMS reprojection error over visible landmarks.
fn reprojection_loss(model: &MorphableModel, params: &ParamVector, observed: &LandmarkSet) -> Result<f64, Error> {
    let proj = project(model, &params.coeffs, &params.pose)?;
    let (sum, n) = (0..observed.len())
        .filter(|&j| observed.is_visible(j))
        .fold((0.0, 0usize), |(s, n), j| {
            (s + (proj.points()[j] - observed.points()[j]).norm_squared(), n + 1)
        });
    Ok((sum / n as f64).sqrt())
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::SynthModel(a) => {
            let model = make_synthetic_model(a.seed, a.vertices, a.d_id, a.d_exp, a.k)?;
            model.save(&a.out)
        }
        Command::SynthData(a) => {
            let model = MorphableModel::load(&a.model)?;
            let spec = SynthSpec {
                yaw_deg: (a.yaw_min, a.yaw_max),
                noise_frac: a.noise,
                occlude: a.occlude,
                ..SynthSpec::default()
            };
            let inst = synth_instance(&model, a.seed, &spec)?;
            let truth = json!({
                "params": params_json(&inst.truth),
                "visibility": inst.observed.visibility(),
                "seed": a.seed,
            });
            write_atomic(&a.out, write_pts(&inst.observed).as_bytes())?;
            emit(&truth, a.truth.as_deref())
        }
        Command::Fit(a) => {
            let config = a.solver.config()?;
            let model = MorphableModel::load(&a.model)?;
            let observed = read_pts(&a.landmarks)?;
            let result = fit(&model, &observed, &config)?;
            emit(&fit_json(&result), a.out.as_deref())
        }
        Command::Pifr(a) => {
            let config = a.fit.solver.config()?;
            let model = MorphableModel::load(&a.fit.model)?;
            let observed = read_pts(&a.fit.landmarks)?;
            let options = PifrOptions {
                mode: a.mode,
                jitter_sigma: a.jitter,
                jitter_seed: a.seed,
            };
            let r = pifr_fit(&model, &observed, &config, &options)?;
            let value = json!({
                "params": params_json(&r.fused),
                "loss": reprojection_loss(&model, &r.fused, &observed)?,
                "iterations": r.original_fit.iterations + r.frontal_fit.iterations,
                "mode": a.mode.to_string(),
                "w1": r.w1,
                "w2": r.w2,
                "frontal": fit_json(&r.frontal_fit),
                "original": fit_json(&r.original_fit),
            });
            emit(&value, a.fit.out.as_deref())
        }
        Command::Bench(a) => {
            let model = match &a.model {
                Some(path) => MorphableModel::load(path)?,
                None => make_synthetic_model(1, 500, 40, 10, 68)?,
            };
            let defaults = BenchConfig::default();
            let config = BenchConfig {
                trials_per_bin: usize::try_from(a.trials).map_err(|_| Error::invalid("--trials is too large"))?,
                master_seed: a.seed,
                synth: SynthSpec {
                    noise_frac: a.noise,
                    occlude: a.occlude,
                    ..defaults.synth
                },
                fit: FitConfig {
                    lambda_id: a.lambda_id.unwrap_or(defaults.fit.lambda_id),
                    lambda_exp: a.lambda_exp.unwrap_or(defaults.fit.lambda_exp),
                    ..defaults.fit
                },
                pifr: PifrOptions {
                    mode: a.mode,
                    ..defaults.pifr
                },
                workers: a.workers,
            };
            let csv = run_benchmark(&model, &config)?.to_csv();
            match &a.out {
                Some(path) => write_atomic(path, csv.as_bytes()),
                None => {
                    print!("{csv}");
                    Ok(())
                }
            }
        }
        Command::Eval(a) => {
            let model = MorphableModel::load(&a.model)?;
            let truth = read_pts(&a.landmarks)?;
            let estimate = match (&a.fit, &a.estimate) {
                (Some(path), _) => {
                    let value: Value = serde_json::from_str(&read_text(path)?)
                        .map_err(|e| Error::Parse { line: e.line(), message: format!("{}: {e}", path.display()) })?;
                    let params = params_from_json(&value, &model)?;
                    project(&model, &params.coeffs, &params.pose)?
                }
                (None, Some(path)) => read_pts(path)?,
                (None, None) => unreachable!("clap requires one of --fit/--estimate"),
            };
            let (g, e) = ([truth], [estimate]);
            emit(
                &json!({ "mem": mem(&g, &e)?, "mem_normalized": mem_normalized(&g, &e)? }),
                None,
            )
        }
        Command::ExportObj(a) => {
            let model = MorphableModel::load(&a.model)?;
            let coeffs = match &a.fit {
                Some(path) => {
                    let value: Value = serde_json::from_str(&read_text(path)?)
                        .map_err(|e| Error::Parse { line: e.line(), message: format!("{}: {e}", path.display()) })?;
                    params_from_json(&value, &model)?.coeffs
                }
                None => Coefficients::zeros(&model),
            };
            export_obj(&model, &coeffs, &a.out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
