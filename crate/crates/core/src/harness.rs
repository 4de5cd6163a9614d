//! End-to-end orchestration: pipeline builds, training sets at the source
//! and gadget levels, learner evaluation, and experiment suites.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::circuit::NandCircuit;
use crate::error::{check_len, Error, Result};
use crate::gadget::{self, GadgetInstance, PlanOptions};
use crate::io::SampleSet;
use crate::ising::{brute_force_table, IsingModel};
use crate::samplers::{self, JsOptions, RejectOptions, RejectionOutput, RngStream};
use crate::scalar;
use crate::spin::SpinConfiguration;
use crate::waters::{self, KeyFile, Layout, MuPk, PublicKey, SecretKey};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineParams {
    pub p: u64,
    pub ell: usize,
    /// Gate penalty; `None` uses the circuit-size default.
    pub w: Option<f64>,
    pub gamma: f64,
    pub epsilon: f64,
    pub r_scale: f64,
    pub zero_diagonal: bool,
    pub seed: u64,
}

impl Default for PipelineParams {
    fn default() -> Self {
        PipelineParams {
            p: 3,
            ell: 1,
            w: None,
            gamma: 1.5,
            epsilon: 0.04,
            r_scale: 1.0,
            zero_diagonal: false,
            seed: 0,
        }
    }
}

pub struct Pipeline {
    pub params: PipelineParams,
    pub pk: PublicKey,
    pub sk: SecretKey,
    pub mu: MuPk,
    pub instance: GadgetInstance,
}

/// keygen → verifier circuit → μ^pk → gadget instance, all from one seed.
pub fn pipeline_build(params: &PipelineParams) -> Result<Pipeline> {
    let root = RngStream::new(params.seed, 0);
    let (pk, sk) = waters::keygen(params.p, params.ell, &mut root.split("keygen").rng()).map_err(|e| e.at("keygen"))?;
    let circuit = waters::compile_verifier(params.p, params.ell).map_err(|e| e.at("build-circuit"))?;
    let w = params.w.unwrap_or_else(|| waters::default_w(&circuit));
    let mu = waters::build_mu_pk_with(&pk, w, circuit).map_err(|e| e.at("embed"))?;
    let opts = PlanOptions {
        r_scale: params.r_scale,
        r_override: None,
    };
    let plan = gadget::plan(&mu.model, params.gamma, params.epsilon, &opts).map_err(|e| e.at("gadgetize"))?;
    let instance = gadget::materialize(&plan, params.zero_diagonal).map_err(|e| e.at("gadgetize"))?;
    Ok(Pipeline {
        params: params.clone(),
        pk,
        sk,
        mu,
        instance,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
struct Manifest<'a> {
    params: &'a PipelineParams,
    n_total: String,
    m: usize,
    spectral_width: f64,
    proof_valid: bool,
    files: Vec<(String, String)>,
}

impl Pipeline {
    /// Source spins m and total gadget spins N.
    pub fn sizes(&self) -> (usize, u128) {
        (self.mu.model.n(), self.instance.n_total())
    }

    /// Writes keys, circuit, source model, instance and a manifest of
    /// sha256 hashes into `dir`; returns the written paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let keys = KeyFile::new(&self.pk, Some(&self.sk));
        let blobs = [
            ("keys.json", crate::jsonfmt::to_string(&keys)?),
            ("circuit.json", self.mu.circuit.to_json()?),
            ("mu_pk.json", self.mu.model.to_json()?),
            ("instance.json", self.instance.to_json()?),
        ];
        let mut paths = Vec::new();
        let mut files = Vec::new();
        for (name, text) in &blobs {
            let path = dir.join(name);
            std::fs::write(&path, text)?;
            files.push((name.to_string(), sha256_hex(text.as_bytes())));
            paths.push(path);
        }
        let manifest = Manifest {
            params: &self.params,
            n_total: self.instance.n_total().to_string(),
            m: self.instance.m(),
            spectral_width: self.instance.spectral_width(),
            proof_valid: self.instance.proof_valid(),
            files,
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, crate::jsonfmt::to_string(&manifest)?)?;
        paths.push(path);
        Ok(paths)
    }
}

// ---------------------------------------------------------------------------
// Training sets

fn random_message<R: Rng + ?Sized>(ell: usize, rng: &mut R) -> Vec<bool> {
    (0..ell).map(|_| rng.gen()).collect()
}

/// k valid traces for uniformly chosen messages from `messages`
/// (all messages when `None`).
pub fn draw_traces<R: Rng>(
    mu: &MuPk,
    pk: &PublicKey,
    sk: &SecretKey,
    messages: Option<&[Vec<bool>]>,
    k: usize,
    rng: &mut R,
) -> Result<Vec<SpinConfiguration>> {
    (0..k)
        .map(|_| {
            let m = match messages {
                Some(list) if list.is_empty() => {
                    return Err(Error::InvalidArgument("empty message list".into()));
                }
                Some(list) => list[rng.gen_range(0..list.len())].clone(),
                None => random_message(pk.msg_bits(), rng),
            };
            let sig = waters::sign_with(sk, pk, &m, rng)?;
            mu.trace_config(pk, &m, &sig)
        })
        .collect()
}

pub fn gen_training_mu(pipe: &Pipeline, k: usize, stream: RngStream) -> Result<SampleSet> {
    let configs = draw_traces(&pipe.mu, &pipe.pk, &pipe.sk, None, k, &mut stream.split("mu").rng())?;
    Ok(SampleSet::Full {
        n: pipe.mu.model.n(),
        configs,
    })
}

/// Gadget-level training samples: source traces pushed through the
/// rejection step. The source stream is capped at 20k + 100 draws.
pub fn gen_training_gadget(
    pipe: &Pipeline,
    opts: &RejectOptions,
    stream: RngStream,
) -> Result<(SampleSet, RejectionOutput)> {
    let mut src = stream.split("source").rng();
    let cap = opts.k.saturating_mul(20).saturating_add(100);
    let ys: Vec<Vec<i8>> = (0..cap)
        .map(|_| {
            let m = random_message(pipe.pk.msg_bits(), &mut src);
            let sig = waters::sign_with(&pipe.sk, &pipe.pk, &m, &mut src)?;
            Ok(pipe.mu.trace_config(&pipe.pk, &m, &sig)?.spins())
        })
        .collect::<Result<_>>()?;
    let out = samplers::rejection_reduce(ys, &pipe.instance, opts, &mut stream.split("reject").rng())?;
    let set = SampleSet::Compact {
        n_sites: pipe.instance.n_sites(),
        m: pipe.instance.m(),
        samples: out.samples.clone(),
    };
    Ok((set, out))
}

/// Source-level configurations behind a sample file: identity for length-m
/// rows, the phase readout for gadget rows.
pub fn phase_configs(set: &SampleSet, m: usize, inst: Option<&GadgetInstance>) -> Result<Vec<SpinConfiguration>> {
    match set {
        SampleSet::Full { n, configs } if *n == m => Ok(configs.clone()),
        SampleSet::Full { configs, .. } => {
            let inst = inst.ok_or_else(|| Error::InvalidArgument("gadget rows need an instance".into()))?;
            configs
                .iter()
                .map(|c| SpinConfiguration::from_spins(&inst.phase_readout(c)?))
                .collect()
        }
        SampleSet::Compact { samples, .. } => {
            let inst = inst.ok_or_else(|| Error::InvalidArgument("gadget rows need an instance".into()))?;
            check_len(m, inst.m())?;
            samples
                .iter()
                .map(|s| SpinConfiguration::from_spins(&s.phase(inst)))
                .collect()
        }
    }
}

// ---------------------------------------------------------------------------
// Learner evaluation

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub total: usize,
    pub memorized: usize,
    pub hallucinated: usize,
    pub forged: usize,
    pub other: usize,
    pub memorized_fraction: f64,
    pub hallucinated_fraction: f64,
    pub forged_fraction: f64,
    pub other_fraction: f64,
    /// Fraction of training rows whose key bits disagree with the key used.
    pub pk_disagreement: f64,
}

pub enum KeySource<'a> {
    Known(&'a PublicKey),
    /// Majority vote over the training rows; ties go to +1.
    Recover,
}

/// Majority vote per key bit over the rows.
pub fn recover_pk_bits(layout: &Layout, training: &[SpinConfiguration]) -> Vec<bool> {
    (0..layout.pk_len())
        .map(|i| {
            let plus = training.iter().filter(|x| x.bit(i)).count();
            2 * plus >= training.len()
        })
        .collect()
}

/// Classifies each output: memorized if its message appears in the
/// training set, else hallucinated if it is not a valid pinned trace,
/// else forged.
pub fn eval_learner(
    circuit: &NandCircuit,
    layout: &Layout,
    keys: KeySource,
    training: &[SpinConfiguration],
    outputs: &[SpinConfiguration],
) -> Result<EvalReport> {
    let m = circuit.m();
    for x in training.iter().chain(outputs) {
        check_len(m, x.len())?;
    }
    let pk_bits = match keys {
        KeySource::Known(pk) => layout.encode_pk(pk),
        KeySource::Recover => {
            if training.is_empty() {
                return Err(Error::InvalidArgument("key recovery needs training rows".into()));
            }
            recover_pk_bits(layout, training)
        }
    };
    let disagree = training
        .iter()
        .filter(|x| pk_bits.iter().enumerate().any(|(i, &b)| x.bit(i) != b))
        .count();
    let mut pinned: Vec<usize> = (0..layout.pk_len()).collect();
    let mut values: Vec<i8> = pk_bits.iter().map(|&b| if b { 1 } else { -1 }).collect();
    pinned.push(circuit.output());
    values.push(1);
    let seen: HashSet<Vec<bool>> = training
        .iter()
        .map(|x| waters::psi_msg(layout, x))
        .collect::<Result<_>>()?;
    let (mut memorized, mut hallucinated, mut forged, mut other) = (0, 0, 0, 0);
    for x in outputs {
        if seen.contains(&waters::psi_msg(layout, x)?) {
            memorized += 1;
        } else if !circuit.validity_check(x, Some((&pinned, &values))) {
            hallucinated += 1;
        } else if layout.verify_bits(&x.bits()[..layout.n_inputs()]) {
            forged += 1;
        } else {
            other += 1;
        }
    }
    let total = outputs.len();
    let frac = |c: usize| if total == 0 { 0.0 } else { c as f64 / total as f64 };
    Ok(EvalReport {
        total,
        memorized,
        hallucinated,
        forged,
        other,
        memorized_fraction: frac(memorized),
        hallucinated_fraction: frac(hallucinated),
        forged_fraction: frac(forged),
        other_fraction: frac(other),
        pk_disagreement: if training.is_empty() {
            0.0
        } else {
            disagree as f64 / training.len() as f64
        },
    })
}

/// Learner that replays its training set.
pub fn learner_echo(training: &[SpinConfiguration], count: usize) -> Vec<SpinConfiguration> {
    (0..count).map(|i| training[i % training.len()].clone()).collect()
}

/// Learner that outputs uniform configurations.
pub fn learner_uniform<R: Rng + ?Sized>(m: usize, count: usize, rng: &mut R) -> Vec<SpinConfiguration> {
    (0..count)
        .map(|_| SpinConfiguration::from_bits(&(0..m).map(|_| rng.gen()).collect::<Vec<bool>>()))
        .collect()
}

/// Learner holding the signing key that signs messages absent from training.
pub fn learner_forger<R: Rng>(
    mu: &MuPk,
    pk: &PublicKey,
    sk: &SecretKey,
    training: &[SpinConfiguration],
    count: usize,
    rng: &mut R,
) -> Result<Vec<SpinConfiguration>> {
    let ell = pk.msg_bits();
    if ell > 20 {
        return Err(Error::SizeGuard {
            what: "message bits",
            value: ell,
            limit: 20,
        });
    }
    let seen: HashSet<Vec<bool>> = training
        .iter()
        .map(|x| waters::psi_msg(&mu.layout, x))
        .collect::<Result<_>>()?;
    let fresh: Vec<Vec<bool>> = (0..1u64 << ell)
        .map(|i| (0..ell).map(|b| i >> b & 1 == 1).collect::<Vec<bool>>())
        .filter(|m| !seen.contains(m))
        .collect();
    if fresh.is_empty() {
        return Err(Error::InvalidArgument("every message already appears in training".into()));
    }
    draw_traces(mu, pk, sk, Some(&fresh), count, rng)
}

// ---------------------------------------------------------------------------
// Experiment suites

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentParams {
    pub beta: f64,
    pub t: usize,
    pub r: Vec<u128>,
    pub gamma: f64,
    pub epsilon: f64,
    pub count: usize,
    pub seed: u64,
    pub threads: usize,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        ExperimentParams {
            beta: 1.5,
            t: 2,
            r: Vec::new(),
            gamma: 2.0,
            epsilon: 0.04,
            count: 10,
            seed: 0,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub notes: Vec<String>,
    pub passed: bool,
}

impl ExperimentReport {
    fn new(name: &str, columns: &[&str]) -> Self {
        ExperimentReport {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            notes: Vec::new(),
            passed: true,
        }
    }

    fn check(&mut self, ok: bool, what: String) {
        if !ok {
            self.passed = false;
            self.notes.push(format!("FAILED: {what}"));
        }
    }

    /// Notes as `#` lines, then the header and rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for n in &self.notes {
            out.push_str(&format!("# {n}\n"));
        }
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {} rows, {}",
            self.name,
            self.rows.len(),
            if self.passed { "all checks passed" } else { "CHECKS FAILED" }
        )
    }
}

pub const SUITES: [&str; 5] = ["single-gadget", "phase-pushforward", "spectral", "constants", "estimators"];

pub fn experiment(name: &str, params: &ExperimentParams) -> Result<ExperimentReport> {
    match name {
        "single-gadget" => single_gadget(params),
        "phase-pushforward" => phase_pushforward(params),
        "spectral" => spectral(params),
        "constants" => constants(params),
        "estimators" => estimators(params),
        _ => Err(Error::InvalidArgument(format!(
            "unknown suite {name:?}; known: {}",
            SUITES.join(", ")
        ))),
    }
}

/// Fixed S-site fields for the single-block suite.
pub fn block_fields(t: usize) -> Vec<f64> {
    const BASE: [f64; 6] = [0.3, -0.2, 0.1, 0.25, -0.15, 0.05];
    (0..t).map(|i| BASE[i % BASE.len()]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockErrors {
    pub plus: f64,
    pub minus: f64,
    /// max over j and both phases of |conditional/product − 1|
    pub ratio: f64,
}

/// Relative errors of the single-block approximations from exact sector sums.
pub fn block_errors(beta: f64, r: u128, fields: &[f64]) -> Result<BlockErrors> {
    let k = scalar::solve_q_plus(beta)?;
    let sp = gadget::sector_sums(&k, r, fields, 1)?;
    let sm = gadget::sector_sums(&k, r, fields, -1)?;
    let plus = (sp.log_z - sp.log_a - sp.log_lambda_plus).exp_m1().abs();
    let minus = (sm.log_z - sm.log_a - sm.log_lambda_minus).exp_m1().abs();
    let mut ratio = 0.0f64;
    for y in [1, -1] {
        for l in gadget::conditional_product_log_ratios(&k, r, fields, y)? {
            ratio = ratio.max(l.exp_m1().abs());
        }
    }
    Ok(BlockErrors { plus, minus, ratio })
}

fn single_gadget(p: &ExperimentParams) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::new("single-gadget", &["r", "err_plus", "err_minus", "max_ratio_err"]);
    let fields = block_fields(p.t);
    rep.notes.push(format!("beta={} t={} fields={:?}", p.beta, p.t, fields));
    let rs = if p.r.is_empty() { vec![51, 101, 201] } else { p.r.clone() };
    let mut prev = f64::INFINITY;
    for &r in &rs {
        let e = block_errors(p.beta, r, &fields)?;
        rep.rows.push(vec![r.to_string(), fmt(e.plus), fmt(e.minus), fmt(e.ratio)]);
        rep.check(e.ratio <= prev, format!("ratio error grew at r={r}"));
        prev = e.ratio;
    }
    Ok(rep)
}

/// The two-vertex source used by the pushforward suite.
pub fn pushforward_source() -> IsingModel {
    IsingModel::new(2, vec![0.0, 0.3, 0.3, 0.0], vec![0.2, -0.1]).expect("valid model")
}

/// sup_y |Z_𝓗(y)/(A·μ_H(y)) − 1| by exact dynamic programming.
pub fn phase_sup_error(inst: &GadgetInstance) -> Result<f64> {
    let mut worst = 0.0f64;
    for y in gadget::all_phases(inst.m())? {
        let l = inst.exact_log_z_phase(&y)? - inst.log_a() - inst.log_mu_source(&y)?;
        worst = worst.max(l.exp_m1().abs());
    }
    Ok(worst)
}

fn phase_pushforward(p: &ExperimentParams) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::new("phase-pushforward", &["r", "proof_valid", "sup_ratio_err"]);
    let source = pushforward_source();
    rep.notes.push(format!("gamma={} epsilon={} source m=2", p.gamma, p.epsilon));
    let rs = if p.r.is_empty() { vec![5, 9, 13] } else { p.r.clone() };
    let mut prev = f64::INFINITY;
    for &r in &rs {
        let opts = PlanOptions {
            r_scale: 1.0,
            r_override: Some(r),
        };
        let inst = gadget::materialize(&gadget::plan(&source, p.gamma, p.epsilon, &opts)?, false)?;
        let e = phase_sup_error(&inst)?;
        rep.rows.push(vec![r.to_string(), "false".into(), fmt(e)]);
        rep.check(e <= prev, format!("sup error grew at r={r}"));
        prev = e;
    }
    let inst = gadget::materialize(&gadget::plan(&source, p.gamma, p.epsilon, &PlanOptions::default())?, false)?;
    let e = phase_sup_error(&inst)?;
    let rmax = (0..inst.m()).map(|v| inst.r(v)).max().unwrap_or(0);
    rep.rows.push(vec![rmax.to_string(), "true".into(), fmt(e)]);
    rep.check(e <= p.epsilon, format!("proof-valid sup error {e} exceeds {}", p.epsilon));
    Ok(rep)
}

/// Random source model on 1..=4 spins scaled to width at most 2.
pub fn random_micro_model<R: Rng + ?Sized>(rng: &mut R) -> IsingModel {
    let m = rng.gen_range(1..=4);
    let mut j = vec![0.0; m * m];
    for a in 0..m {
        for b in a + 1..m {
            let x = rng.gen_range(-1.0..1.0);
            j[a * m + b] = x;
            j[b * m + a] = x;
        }
    }
    let h: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let model = IsingModel::new(m, j.clone(), h.clone()).expect("valid model");
    let w = model.width();
    if w <= 2.0 {
        return model;
    }
    let s = 2.0 / w;
    IsingModel::new(m, j.iter().map(|x| x * s).collect(), h.iter().map(|x| x * s).collect()).expect("valid model")
}

/// Runs `f` over `items` on up to `threads` scoped threads, keeping order.
pub fn parallel_map<T: Sync, U: Send, F: Fn(&T) -> U + Sync>(items: &[T], threads: usize, f: F) -> Vec<U> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<U>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

fn spectral(p: &ExperimentParams) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::new(
        "spectral",
        &["instance", "m", "gamma", "zero_diagonal", "spectral_width", "width"],
    );
    let mut rng = RngStream::new(p.seed, 0).split("spectral").rng();
    let models: Vec<IsingModel> = (0..p.count).map(|_| random_micro_model(&mut rng)).collect();
    let mut jobs = Vec::new();
    for (i, _) in models.iter().enumerate() {
        for gamma in [1.25, 1.5, 2.0] {
            for zd in [false, true] {
                jobs.push((i, gamma, zd));
            }
        }
    }
    let results = parallel_map(&jobs, p.threads, |&(i, gamma, zd)| -> Result<(f64, f64)> {
        let plan = gadget::plan(&models[i], gamma, p.epsilon, &PlanOptions::default())?;
        let inst = gadget::materialize(&plan, zd)?;
        Ok((inst.spectral_width(), inst.width()))
    });
    for (&(i, gamma, zd), res) in jobs.iter().zip(results) {
        let (sw, w) = res?;
        rep.rows.push(vec![
            i.to_string(),
            models[i].n().to_string(),
            gamma.to_string(),
            zd.to_string(),
            fmt(sw),
            fmt(w),
        ]);
        rep.check(sw > 1.0 && sw <= gamma + 1e-9, format!("instance {i}: spectral width {sw} outside (1,{gamma}]"));
        rep.check(w <= 6.0, format!("instance {i}: width {w} above 6"));
    }
    Ok(rep)
}

fn constants(p: &ExperimentParams) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::new("constants", &["name", "value"]);
    let k = scalar::solve_q_plus(p.beta)?;
    let fp = scalar::f1(p.beta, k.q_plus)?;
    for (name, v) in [
        ("beta", k.beta),
        ("q_plus", k.q_plus),
        ("q_minus", k.q_minus),
        ("alpha_plus", k.alpha_plus),
        ("m_plus", k.m_plus()),
        ("C1", k.c1),
        ("C", k.c),
        ("C2", k.c2),
        ("delta0", k.delta0),
        ("f_prime_at_q_plus", fp),
    ] {
        rep.rows.push(vec![name.into(), fmt(v)]);
    }
    rep.check(fp.abs() < 1e-12, format!("f'(q+) = {fp}"));
    Ok(rep)
}

/// Two-vertex instance whose 𝓢 has 8 sites at r = 5.
pub fn estimator_instance() -> Result<GadgetInstance> {
    let source = IsingModel::new(2, vec![0.0, 0.25, 0.25, 0.0], vec![0.3, -0.2])?;
    let opts = PlanOptions {
        r_scale: 1.0,
        r_override: Some(5),
    };
    gadget::materialize(&gadget::plan(&source, 2.0, 0.04, &opts)?, false)
}

fn estimators(p: &ExperimentParams) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::new(
        "estimators",
        &["seed", "y", "exact_log_z", "importance", "js", "rel_importance", "rel_js"],
    );
    let inst = estimator_instance()?;
    let y = vec![1i8, -1];
    let exact = inst.exact_log_z_phase(&y)?;
    let seeds: Vec<u64> = (0..p.count as u64).map(|i| p.seed + i).collect();
    let results = parallel_map(&seeds, p.threads, |&seed| -> Result<(f64, f64)> {
        let s = RngStream::new(seed, 0);
        let imp = samplers::estimate_z_phase(&inst, &y, 0.05, 0.25, &mut s.split("importance").rng())?;
        let js = samplers::estimate_z_phase_js(&inst, &y, 0.1, 0.25, &JsOptions::default(), &mut s.split("js").rng())?;
        Ok((imp.log_value, js.log_value))
    });
    let (mut ok_imp, mut ok_js, mut ok_mut) = (0, 0, 0);
    for (&seed, res) in seeds.iter().zip(results) {
        let (imp, js) = res?;
        let (ri, rj) = ((imp - exact).exp_m1(), (js - exact).exp_m1());
        ok_imp += (ri.abs() <= 0.1) as usize;
        ok_js += (rj.abs() <= 0.1) as usize;
        ok_mut += ((imp - js).exp_m1().abs() <= 0.1) as usize;
        rep.rows.push(vec![
            seed.to_string(),
            samplers::phase_key(&y),
            fmt(exact),
            fmt(imp),
            fmt(js),
            fmt(ri),
            fmt(rj),
        ]);
    }
    let need = (9 * seeds.len()).div_ceil(10);
    rep.check(ok_imp >= need, format!("importance within 10% in {ok_imp}/{}", seeds.len()));
    rep.check(ok_js >= need, format!("js within 10% in {ok_js}/{}", seeds.len()));
    rep.check(ok_mut >= need, format!("estimators mutually within 10% in {ok_mut}/{}", seeds.len()));
    Ok(rep)
}

fn fmt(x: f64) -> String {
    format!("{x:.10e}")
}

/// Brute-force conditional sampler on a small model: full assignment given a
/// prefix of fixed coordinates.
pub struct PrefixSampler {
    n: usize,
    probs: Vec<f64>,
}

impl PrefixSampler {
    pub fn new(model: &IsingModel) -> Result<Self> {
        let t = brute_force_table(model)?;
        Ok(PrefixSampler {
            n: model.n(),
            probs: t.probs(),
        })
    }

    /// Law of the full assignment given the leading coordinates.
    pub fn conditional(&self, prefix: &[i8]) -> PrefixLaw {
        let fixed = prefix.iter().enumerate().fold(0usize, |acc, (i, &s)| acc | (((s > 0) as usize) << i));
        let stride = 1usize << prefix.len();
        let free = self.n - prefix.len();
        let states: Vec<usize> = (0..1usize << free).map(|u| fixed | (u * stride)).collect();
        let total: f64 = states.iter().map(|&i| self.probs[i]).sum();
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = states
            .iter()
            .map(|&i| {
                acc += self.probs[i] / total;
                acc
            })
            .collect();
        *cdf.last_mut().expect("at least one state") = 1.0;
        PrefixLaw { n: self.n, states, cdf }
    }

    /// Draws x with x_i = prefix_i for i < prefix.len(), proportionally to ν.
    pub fn draw<R: Rng + ?Sized>(&self, prefix: &[i8], rng: &mut R) -> Vec<i8> {
        self.conditional(prefix).draw(rng)
    }
}

pub struct PrefixLaw {
    n: usize,
    states: Vec<usize>,
    cdf: Vec<f64>,
}

impl PrefixLaw {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<i8> {
        let u: f64 = rng.gen();
        let pick = self.states[self.cdf.partition_point(|&c| c <= u).min(self.states.len() - 1)];
        (0..self.n).map(|i| if pick >> i & 1 == 1 { 1 } else { -1 }).collect()
    }
}
