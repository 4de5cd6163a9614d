use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use hard_ising::gadget::{self, GadgetInstance, PlanOptions};
use hard_ising::harness::{self, ExperimentParams, KeySource, PipelineParams};
use hard_ising::io::SampleSet;
use hard_ising::samplers::{self, JsOptions, RejectOptions, RngStream, ZSource};
use hard_ising::waters::{self, KeyFile, Layout};
use hard_ising::IsingModel;

#[derive(Parser)]
#[command(name = "hard-ising", version, about = "Signature-verifier Ising models and their gadget amplification")]
struct Cli {
    /// Root seed; every stage derives its own stream from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file (or directory for `pipeline`); stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Encoding for sample files.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Bin,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Level {
    Mu,
    Gadget,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Importance,
    Js,
    Exact,
}

#[derive(clap::Args, Clone)]
struct SchemeArgs {
    /// Group order (prime).
    #[arg(long, default_value_t = 3)]
    p: u64,
    /// Message length in bits.
    #[arg(long = "msg-bits", default_value_t = 1)]
    msg_bits: usize,
}

#[derive(clap::Args, Clone)]
struct GadgetArgs {
    #[arg(long, default_value_t = 1.5)]
    gamma: f64,
    #[arg(long, default_value_t = 0.04)]
    epsilon: f64,
    /// Multiplier on the proof-valid block size.
    #[arg(long = "r-scale", default_value_t = 1.0)]
    r_scale: f64,
    /// Fixed odd block size for every gadget (not proof-valid).
    #[arg(long = "r-override")]
    r_override: Option<u128>,
    #[arg(long = "zero-diagonal")]
    zero_diagonal: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a key pair.
    Keygen {
        #[command(flatten)]
        scheme: SchemeArgs,
    },
    /// Compile the verifier circuit.
    BuildCircuit {
        #[command(flatten)]
        scheme: SchemeArgs,
    },
    /// Embed the verifier under a public key as an Ising model.
    Embed {
        #[arg(long)]
        keys: PathBuf,
        /// Gate penalty (default: scaled with circuit size).
        #[arg(long)]
        w: Option<f64>,
    },
    /// Replace every spin of a model by a gadget.
    Gadgetize {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        gadget: GadgetArgs,
    },
    /// Run keygen through gadgetize and write every artifact into --out.
    Pipeline {
        #[command(flatten)]
        scheme: SchemeArgs,
        #[arg(long)]
        w: Option<f64>,
        #[command(flatten)]
        gadget: GadgetArgs,
    },
    /// Draw training samples at the source or gadget level.
    Sample {
        #[arg(long, value_enum, default_value_t = Level::Mu)]
        level: Level,
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        w: Option<f64>,
        /// Gadget instance (gadget level).
        #[arg(long)]
        instance: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Rejection slack.
        #[arg(long, default_value_t = 0.04)]
        epsilon: f64,
        #[arg(long = "epsilon-js", default_value_t = 0.01)]
        epsilon_js: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        /// Use exact phase partition functions instead of estimates.
        #[arg(long)]
        exact: bool,
        /// Pad a short stream with the all-plus configuration.
        #[arg(long)]
        pad: bool,
        /// Acceptance log CSV (gadget level).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Estimate log Z of a gadget instance restricted to a phase vector.
    EstimateZ {
        #[arg(long)]
        instance: PathBuf,
        /// Phase vector as a string of '+' and '-'.
        #[arg(long)]
        phase: String,
        #[arg(long, value_enum, default_value_t = Method::Importance)]
        method: Method,
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
    },
    /// Classify learner outputs as memorized, hallucinated or forged.
    EvalLearner {
        #[command(flatten)]
        scheme: SchemeArgs,
        /// Key file; the key is recovered from training rows when absent.
        #[arg(long)]
        keys: Option<PathBuf>,
        #[arg(long)]
        training: PathBuf,
        #[arg(long)]
        outputs: PathBuf,
        /// Gadget instance for decoding gadget-level rows.
        #[arg(long)]
        instance: Option<PathBuf>,
    },
    /// Run an experiment suite and write its CSV.
    Experiment {
        /// single-gadget | phase-pushforward | spectral | constants | estimators
        name: String,
        #[arg(long, default_value_t = 1.5)]
        beta: f64,
        #[arg(long, default_value_t = 2)]
        t: usize,
        /// Comma-separated block sizes.
        #[arg(long, value_delimiter = ',')]
        r: Vec<u128>,
        #[arg(long, default_value_t = 2.0)]
        gamma: f64,
        #[arg(long, default_value_t = 0.04)]
        epsilon: f64,
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
}

fn threads() -> usize {
    std::env::var("HARD_ISING_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn emit(out: &Option<PathBuf>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn load_keys(path: &Path) -> Result<KeyFile> {
    Ok(serde_json::from_str(&read(path)?)?)
}

fn load_instance(path: &Path) -> Result<GadgetInstance> {
    Ok(GadgetInstance::from_json(&read(path)?)?)
}

fn load_samples(path: &Path) -> Result<SampleSet> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(SampleSet::decode(&bytes)?)
}

fn encode_samples(set: &SampleSet, format: Format) -> Result<Vec<u8>> {
    Ok(match format {
        Format::Json => set.to_json()?.into_bytes(),
        Format::Bin => set.to_bytes(),
    })
}

fn parse_phase(s: &str) -> Result<Vec<i8>> {
    s.chars()
        .map(|c| match c {
            '+' | '1' => Ok(1),
            '-' | '0' => Ok(-1),
            _ => Err(anyhow!("phase character {c:?} is not + or -")),
        })
        .collect()
}

fn plan_options(g: &GadgetArgs) -> PlanOptions {
    PlanOptions {
        r_scale: g.r_scale,
        r_override: g.r_override,
    }
}

fn run(cli: Cli) -> Result<bool> {
    let root = RngStream::new(cli.seed, 0);
    match cli.cmd {
        Cmd::Keygen { scheme } => {
            let (pk, sk) = waters::keygen(scheme.p, scheme.msg_bits, &mut root.split("keygen").rng())?;
            let text = serde_json::to_string_pretty(&KeyFile::new(&pk, Some(&sk)))? + "\n";
            emit(&cli.out, text.as_bytes())?;
        }
        Cmd::BuildCircuit { scheme } => {
            let c = waters::compile_verifier(scheme.p, scheme.msg_bits)?;
            emit(&cli.out, c.to_json()?.as_bytes())?;
            eprintln!("inputs={} gates={}", c.n_inputs, c.gates.len());
        }
        Cmd::Embed { keys, w } => {
            let pk = load_keys(&keys)?.public();
            let circuit = waters::compile_verifier(pk.p, pk.msg_bits())?;
            let w = w.unwrap_or_else(|| waters::default_w(&circuit));
            let mu = waters::build_mu_pk_with(&pk, w, circuit)?;
            emit(&cli.out, mu.model.to_json()?.as_bytes())?;
            eprintln!("m={} w={w}", mu.model.n());
        }
        Cmd::Gadgetize { model, gadget: g } => {
            let model = IsingModel::from_json(&read(&model)?)?;
            let plan = gadget::plan(&model, g.gamma, g.epsilon, &plan_options(&g))?;
            let inst = gadget::materialize(&plan, g.zero_diagonal)?;
            emit(&cli.out, inst.to_json()?.as_bytes())?;
            eprintln!(
                "m={} N={} proof_valid={} spectral_width={}",
                inst.m(),
                inst.n_total(),
                inst.proof_valid(),
                inst.spectral_width()
            );
        }
        Cmd::Pipeline { scheme, w, gadget: g } => {
            if g.r_override.is_some() {
                bail!("--r-override is not available for pipeline builds");
            }
            let params = PipelineParams {
                p: scheme.p,
                ell: scheme.msg_bits,
                w,
                gamma: g.gamma,
                epsilon: g.epsilon,
                r_scale: g.r_scale,
                zero_diagonal: g.zero_diagonal,
                seed: cli.seed,
            };
            let dir = cli.out.clone().ok_or_else(|| anyhow!("pipeline needs --out DIR"))?;
            let pipe = harness::pipeline_build(&params)?;
            for p in pipe.write(&dir)? {
                println!("{}", p.display());
            }
            let (m, n) = pipe.sizes();
            eprintln!("m={m} N={n}");
        }
        Cmd::Sample {
            level,
            keys,
            w,
            instance,
            k,
            epsilon,
            epsilon_js,
            delta,
            exact,
            pad,
            log,
        } => {
            let kf = load_keys(&keys)?;
            let pk = kf.public();
            let sk = kf.secret().ok_or_else(|| anyhow!("sampling needs the secret key"))?;
            let circuit = waters::compile_verifier(pk.p, pk.msg_bits())?;
            let w = w.unwrap_or_else(|| waters::default_w(&circuit));
            let mu = waters::build_mu_pk_with(&pk, w, circuit)?;
            let set = match level {
                Level::Mu => SampleSet::Full {
                    n: mu.model.n(),
                    configs: harness::draw_traces(&mu, &pk, &sk, None, k, &mut root.split("mu").rng())?,
                },
                Level::Gadget => {
                    let path = instance.ok_or_else(|| anyhow!("gadget level needs --instance"))?;
                    let inst = load_instance(&path)?;
                    if inst.source() != &mu.model {
                        bail!("instance was not built from this key's model (check --w)");
                    }
                    let pipe = harness::Pipeline {
                        params: PipelineParams::default(),
                        pk,
                        sk,
                        mu,
                        instance: inst,
                    };
                    let source = if exact {
                        ZSource::Exact
                    } else {
                        ZSource::Estimated { epsilon_js, delta }
                    };
                    let opts = RejectOptions {
                        k,
                        epsilon,
                        source,
                        pad,
                        delta,
                    };
                    let (set, out) = harness::gen_training_gadget(&pipe, &opts, root)?;
                    if let Some(p) = log {
                        fs::write(&p, samplers::acceptance_csv(&out.log))?;
                    }
                    eprintln!("acceptance rate {:.4} padded {}", out.acceptance_rate(), out.padded);
                    set
                }
            };
            emit(&cli.out, &encode_samples(&set, cli.format)?)?;
        }
        Cmd::EstimateZ {
            instance,
            phase,
            method,
            epsilon,
            delta,
        } => {
            let inst = load_instance(&instance)?;
            let y = parse_phase(&phase)?;
            let mut rng = root.split("estimate").rng();
            let res = match method {
                Method::Importance => samplers::estimate_z_phase(&inst, &y, epsilon, delta, &mut rng)?,
                Method::Js => samplers::estimate_z_phase_js(&inst, &y, epsilon, delta, &JsOptions::default(), &mut rng)?,
                Method::Exact => samplers::EstimateResult {
                    log_value: inst.exact_log_z_phase(&y)?,
                    epsilon: 0.0,
                    delta: 0.0,
                    repetitions: 0,
                    samples: 0,
                    retries: 0,
                },
            };
            let text = serde_json::to_string_pretty(&serde_json::json!({
                "estimate": res,
                "log_reference": inst.log_reference(),
                "log_A": inst.log_a(),
                "log_mu_source": inst.log_mu_source(&y)?,
            }))? + "\n";
            emit(&cli.out, text.as_bytes())?;
        }
        Cmd::EvalLearner {
            scheme,
            keys,
            training,
            outputs,
            instance,
        } => {
            let pk = keys.as_deref().map(load_keys).transpose()?.map(|k| k.public());
            let (p, ell) = pk.as_ref().map_or((scheme.p, scheme.msg_bits), |k| (k.p, k.msg_bits()));
            let circuit = waters::compile_verifier(p, ell)?;
            let layout = Layout::new(p, ell);
            let inst = instance.as_deref().map(load_instance).transpose()?;
            let m = circuit.m();
            let train = harness::phase_configs(&load_samples(&training)?, m, inst.as_ref())?;
            let outs = harness::phase_configs(&load_samples(&outputs)?, m, inst.as_ref())?;
            let source = match &pk {
                Some(k) => KeySource::Known(k),
                None => KeySource::Recover,
            };
            let rep = harness::eval_learner(&circuit, &layout, source, &train, &outs)?;
            emit(&cli.out, (serde_json::to_string_pretty(&rep)? + "\n").as_bytes())?;
        }
        Cmd::Experiment {
            name,
            beta,
            t,
            r,
            gamma,
            epsilon,
            count,
        } => {
            let params = ExperimentParams {
                beta,
                t,
                r,
                gamma,
                epsilon,
                count,
                seed: cli.seed,
                threads: threads(),
            };
            let rep = harness::experiment(&name, &params)?;
            emit(&cli.out, rep.to_csv().as_bytes())?;
            eprintln!("{}", rep.summary());
            return Ok(rep.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
