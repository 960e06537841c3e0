use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use agm_core::agm::{train_agm as run_agm, write_trace_csv, AgmConfig, TrainState};
use agm_core::data::{tile_images, write_pgm, Dataset};
use agm_core::egm::{train_egm as run_egm, write_egm_trace_csv, EgmConfig};
use agm_core::ensemble::{make_queries, sample_members, sweep_members, write_predictions_csv, TaskReport};
use agm_core::experiments::{
    agm_oneshot, bench_grid, distill as run_distill, doubling_ratios, samples_to_dataset, write_bench_csv,
};
use agm_core::gibbs::{self, write_sample_dump, GibbsConfig};
use agm_core::graph::{make_grid_structure, make_random_structure, Assignment, GraphStructure, LogPotentials};
use agm_core::nn::LearnerParams;
use agm_core::query::{Curriculum, TaskList, TaskSpec};
use agm_core::store::{self, Artifact, Checkpoint, LearnerCheckpoint, PotentialsCheckpoint};
use agm_core::tensor::Tensor;
use agm_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::manifest::RunManifest;
use crate::{BenchArgs, DistillArgs, InferArgs, Output, SampleArgs, StructureArgs, SweepArgs, TrainArgs};

pub const AGM_BP_STEPS: usize = 5;
const T_RATIO_BAND: (f64, f64) = (1.6, 2.6);
const E_RATIO_BAND: (f64, f64) = (1.5, 3.0);

pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Parse { .. } => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: 1,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

/// Caps the global thread pool at `MRF_THREADS` when set.
pub fn init_threads() -> CmdResult {
    if let Ok(v) = std::env::var("MRF_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::usage(format!("MRF_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(e.to_string()))?;
    }
    Ok(())
}

fn input(path: &Path) -> Result<&Path, Failure> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Failure::usage(format!("input file {} does not exist", path.display())))
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    Ok(fs::read_to_string(input(path)?)?)
}

fn out_dir(out: &Output) -> Result<PathBuf, Failure> {
    fs::create_dir_all(&out.out_dir)?;
    Ok(out.out_dir.clone())
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> CmdResult {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn parse_list(s: &str, what: &str) -> Result<Vec<usize>, Failure> {
    let v: Result<Vec<usize>, _> = s.split(',').map(|p| p.trim().parse()).collect();
    match v {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(Failure::usage(format!("invalid {what} list `{s}`"))),
    }
}

fn parse_task(s: &str, dataset: &Dataset) -> Result<Curriculum, Failure> {
    let list: TaskList = s.parse()?;
    Ok(Curriculum::from_list(&list.with_image_shape(dataset.image_shape()))?)
}

fn check_queries(n: usize) -> CmdResult {
    if n == 0 {
        return Err(Failure::usage("--queries must be at least 1"));
    }
    Ok(())
}

/// A trained model: a learner generating an ensemble, or one potential vector.
enum Model {
    Agm(LearnerParams),
    Egm(LogPotentials),
}

fn load_model(path: &Path, structure: &GraphStructure) -> Result<Model, Failure> {
    let ckpt = store::load(input(path)?)?;
    let model = match ckpt.artifact {
        Artifact::Learner(l) => Model::Agm(l.params),
        Artifact::TrainState(s) => Model::Agm(s.learner),
        Artifact::Potentials(p) => Model::Egm(p.potentials_for(structure)?),
        other => {
            return Err(Failure::usage(format!(
                "{} holds a {} artifact, not a model",
                path.display(),
                other.kind()
            )))
        }
    };
    if let Model::Agm(l) = &model {
        if l.output_dim() != structure.n_params() {
            return Err(Error::Shape(format!(
                "learner emits {} potentials, structure needs {}",
                l.output_dim(),
                structure.n_params()
            ))
            .into());
        }
    }
    Ok(model)
}

/// Member matrix for querying: `M` sampled rows or the single vector.
fn members_for(model: &Model, m: Option<usize>, seed: u64) -> Result<Tensor, Failure> {
    match model {
        Model::Agm(l) => {
            let m = m.unwrap_or(1000);
            if m == 0 {
                return Err(Failure::usage("--ensemble-size must be at least 1"));
            }
            Ok(sample_members(l, m, &mut ChaCha8Rng::seed_from_u64(seed))?)
        }
        Model::Egm(psi) => {
            if m.is_some() {
                eprintln!("warning: --ensemble-size is ignored for a single-model checkpoint");
            }
            Ok(Tensor::new(vec![1, psi.len()], psi.values().to_vec())?)
        }
    }
}

fn default_bp_steps(model: &Model) -> usize {
    match model {
        Model::Agm(_) => AGM_BP_STEPS,
        Model::Egm(_) => EgmConfig::default().bp_steps,
    }
}

fn save(path: &Path, artifact: Artifact, seed: u64) -> CmdResult {
    let mut c = Checkpoint::new(artifact);
    c.seed = Some(seed);
    store::save(&c, path)?;
    Ok(())
}

pub fn train_agm(a: TrainArgs) -> CmdResult {
    let mut cfg = match &a.config {
        Some(p) => AgmConfig::from_text(&read_text(p)?)?,
        None => AgmConfig::default(),
    };
    if a.task.is_some() {
        return Err(Failure::usage("--task applies to train-egm only"));
    }
    if let Some(s) = a.out.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.bp_steps {
        cfg.bp_steps = t;
    }
    cfg.validate()?;
    let structure = GraphStructure::load(input(&a.structure)?)?;
    let dataset = Dataset::load(input(&a.dataset)?)?;
    let dir = out_dir(&a.out)?;
    let mut manifest = RunManifest::new("train-agm");
    manifest.config(&cfg.to_text());
    manifest.seed("train", cfg.seed);
    let state_path = dir.join("trainstate.ckpt");
    let result = run_agm(&dataset, &structure, &cfg, |s: &TrainState| {
        let mut c = Checkpoint::new(Artifact::TrainState(s.clone()));
        c.seed = Some(cfg.seed);
        store::save(&c, &state_path)
    });
    let state = match result {
        Ok(s) => s,
        Err(Error::Divergence {
            step,
            reason,
            last_good,
        }) => {
            if let Some(good) = last_good {
                save(&dir.join("last_good.ckpt"), *good, cfg.seed)?;
            }
            return Err(Failure {
                code: 1,
                message: format!("training diverged at step {step}: {reason}"),
            });
        }
        Err(e) => return Err(e.into()),
    };
    let learner_path = dir.join("learner.ckpt");
    save(
        &learner_path,
        Artifact::Learner(LearnerCheckpoint {
            params: state.learner.clone(),
            n_vars: structure.n_nodes(),
            support_size: structure.support_size(),
        }),
        cfg.seed,
    )?;
    let critic_path = dir.join("discriminator.ckpt");
    save(&critic_path, Artifact::Discriminator(state.critic.clone()), cfg.seed)?;
    let trace_path = dir.join("trace.csv");
    write_file(&trace_path, |w| write_trace_csv(w, &state.trace))?;
    for p in [&learner_path, &critic_path, &state_path, &trace_path] {
        manifest.output(p);
    }
    manifest.finish(&dir)?;
    println!("wrote {}", learner_path.display());
    Ok(())
}

pub fn train_egm(a: TrainArgs) -> CmdResult {
    let mut cfg = match &a.config {
        Some(p) => EgmConfig::from_text(&read_text(p)?)?,
        None => EgmConfig::default(),
    };
    if let Some(s) = a.out.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.bp_steps {
        cfg.bp_steps = t;
    }
    if let Some(t) = &a.task {
        cfg.tasks = t.parse()?;
    }
    cfg.validate()?;
    let structure = GraphStructure::load(input(&a.structure)?)?;
    let dataset = Dataset::load(input(&a.dataset)?)?;
    let dir = out_dir(&a.out)?;
    let mut manifest = RunManifest::new("train-egm");
    manifest.config(&cfg.to_text());
    manifest.seed("train", cfg.seed);
    let ckpt_path = dir.join("potentials.ckpt");
    let structure_ref = a.structure.display().to_string();
    let result = run_egm(&dataset, &structure, &cfg, |_, psi| {
        let mut c = Checkpoint::new(Artifact::Potentials(PotentialsCheckpoint::new(
            &structure,
            &structure_ref,
            psi,
        )));
        c.seed = Some(cfg.seed);
        store::save(&c, &ckpt_path)
    });
    let outcome = match result {
        Ok(o) => o,
        Err(Error::Divergence {
            step,
            reason,
            last_good,
        }) => {
            if let Some(good) = last_good {
                save(&dir.join("last_good.ckpt"), *good, cfg.seed)?;
            }
            return Err(Failure {
                code: 1,
                message: format!("training diverged at step {step}: {reason}"),
            });
        }
        Err(e) => return Err(e.into()),
    };
    if outcome.clamped > 0 {
        eprintln!("note: {} target beliefs were floored during training", outcome.clamped);
    }
    let trace_path = dir.join("trace.csv");
    write_file(&trace_path, |w| write_egm_trace_csv(w, &outcome.trace))?;
    manifest.output(&ckpt_path);
    manifest.output(&trace_path);
    manifest.finish(&dir)?;
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

fn write_summary(path: &Path, task: &str, rows: &[(usize, &TaskReport)]) -> CmdResult {
    write_file(path, |w| {
        writeln!(w, "task,ensemble_size,queries,correct,total,accuracy")?;
        for (m, r) in rows {
            writeln!(
                w,
                "{task},{m},{},{},{},{}",
                r.outcomes.len(),
                r.correct,
                r.total,
                r.accuracy
            )?;
        }
        Ok(())
    })
}

pub fn infer(a: InferArgs) -> CmdResult {
    check_queries(a.queries)?;
    let structure = GraphStructure::load(input(&a.structure)?)?;
    let dataset = Dataset::load(input(&a.dataset)?)?;
    let curriculum = parse_task(&a.task, &dataset)?;
    let model = load_model(&a.checkpoint, &structure)?;
    let seed = a.out.seed.unwrap_or(0);
    let t = a.bp_steps.unwrap_or_else(|| default_bp_steps(&model));
    let members = members_for(&model, a.ensemble_size, seed)?;
    let m = members.shape()[0];
    let queries = make_queries(
        &dataset,
        &curriculum,
        a.queries,
        &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)),
    )?;
    let report = sweep_members(&structure, &members, &queries, &[m], t, 250)?.remove(0);
    let dir = out_dir(&a.out)?;
    let mut manifest = RunManifest::new("infer");
    manifest.seed("infer", seed);
    manifest.config(&format!(
        "task={}\nensemble_size={m}\nqueries={}\nbp_steps={t}\ncheckpoint={}",
        a.task,
        a.queries,
        a.checkpoint.display()
    ));
    let pred_path = dir.join("predictions.csv");
    write_file(&pred_path, |w| {
        write_predictions_csv(w, &report, structure.support_size())
    })?;
    let sum_path = dir.join("accuracy.csv");
    write_summary(&sum_path, &a.task, &[(m, &report)])?;
    manifest.output(&pred_path);
    manifest.output(&sum_path);
    manifest.finish(&dir)?;
    println!(
        "accuracy={:.3} ({} / {})",
        report.accuracy, report.correct, report.total
    );
    Ok(())
}

pub fn sweep(a: SweepArgs) -> CmdResult {
    check_queries(a.queries)?;
    let sizes = parse_list(&a.ensemble_size, "ensemble size")?;
    if sizes.contains(&0) {
        return Err(Failure::usage("ensemble sizes must be at least 1"));
    }
    let structure = GraphStructure::load(input(&a.structure)?)?;
    let dataset = Dataset::load(input(&a.dataset)?)?;
    let curriculum = parse_task(&a.task, &dataset)?;
    let model = load_model(&a.checkpoint, &structure)?;
    if matches!(model, Model::Egm(_)) {
        return Err(Failure::usage("sweep-M needs an ensemble (learner) checkpoint"));
    }
    let seed = a.out.seed.unwrap_or(0);
    let t = a.bp_steps.unwrap_or(AGM_BP_STEPS);
    let max = *sizes.iter().max().expect("non-empty");
    let members = members_for(&model, Some(max), seed)?;
    let queries = make_queries(
        &dataset,
        &curriculum,
        a.queries,
        &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)),
    )?;
    let reports = sweep_members(&structure, &members, &queries, &sizes, t, 250)?;
    let dir = out_dir(&a.out)?;
    let mut manifest = RunManifest::new("sweep-M");
    manifest.seed("sweep", seed);
    manifest.config(&format!(
        "task={}\nensemble_sizes={}\nqueries={}\nbp_steps={t}",
        a.task, a.ensemble_size, a.queries
    ));
    let path = dir.join("sweep.csv");
    let rows: Vec<(usize, &TaskReport)> = sizes.iter().copied().zip(reports.iter()).collect();
    write_summary(&path, &a.task, &rows)?;
    manifest.output(&path);
    manifest.finish(&dir)?;
    for (m, r) in rows {
        println!("M={m} accuracy={:.3}", r.accuracy);
    }
    Ok(())
}

enum SampleMode {
    OneShot,
    Gibbs { burn_in: usize },
}

fn parse_mode(s: &str) -> Result<SampleMode, Failure> {
    match s {
        "agm-oneshot" => Ok(SampleMode::OneShot),
        "gibbs" => Ok(SampleMode::Gibbs { burn_in: 0 }),
        _ => s
            .strip_prefix("gibbs:burn=")
            .and_then(|b| b.parse().ok())
            .map(|burn_in| SampleMode::Gibbs { burn_in })
            .ok_or_else(|| {
                Failure::usage(format!(
                    "unknown sample mode `{s}`; use agm-oneshot, gibbs or gibbs:burn=B"
                ))
            }),
    }
}

/// Draws `n` samples; one-shot also returns the per-sample node marginals.
fn draw_samples(
    model: &Model,
    structure: &GraphStructure,
    mode: &SampleMode,
    n: usize,
    bp_steps: usize,
    seed: u64,
) -> Result<(Vec<Assignment>, Option<Tensor>), Failure> {
    match (mode, model) {
        (SampleMode::OneShot, Model::Agm(l)) => {
            let s = agm_oneshot(l, structure, n, bp_steps, &mut ChaCha8Rng::seed_from_u64(seed))?;
            Ok((s.draws, Some(s.marginals)))
        }
        (SampleMode::Gibbs { burn_in }, Model::Egm(psi)) => {
            let cfg = GibbsConfig {
                burn_in: *burn_in,
                seed,
                ..GibbsConfig::default()
            };
            Ok((gibbs::sample_independent(structure, psi, &cfg, n)?, None))
        }
        (SampleMode::OneShot, Model::Egm(_)) => Err(Failure::usage("agm-oneshot needs a learner checkpoint")),
        (SampleMode::Gibbs { .. }, Model::Agm(_)) => Err(Failure::usage("gibbs needs a potentials checkpoint")),
    }
}

fn parse_shape(s: &str) -> Result<(usize, usize), Failure> {
    s.split_once('x')
        .and_then(|(h, w)| Some((h.parse().ok()?, w.parse().ok()?)))
        .filter(|&(h, w): &(usize, usize)| h > 0 && w > 0)
        .ok_or_else(|| Failure::usage(format!("invalid image shape `{s}`, expected HxW")))
}

pub fn sample(a: SampleArgs) -> CmdResult {
    if a.count == 0 {
        return Err(Failure::usage("--count must be at least 1"));
    }
    let mode = parse_mode(&a.mode)?;
    let structure = GraphStructure::load(input(&a.structure)?)?;
    let model = load_model(&a.checkpoint, &structure)?;
    let shape = match (&a.image_shape, &a.dataset) {
        (Some(s), _) => Some(parse_shape(s)?),
        (None, Some(d)) => Dataset::load(input(d)?)?.image_shape(),
        (None, None) => None,
    };
    if let Some((h, w)) = shape {
        if h * w != structure.n_nodes() {
            return Err(Failure::usage(format!(
                "image shape {h}x{w} does not cover {} nodes",
                structure.n_nodes()
            )));
        }
    }
    let seed = a.out.seed.unwrap_or(0);
    let t = a.bp_steps.unwrap_or(AGM_BP_STEPS);
    let (draws, marginals) = draw_samples(&model, &structure, &mode, a.count, t, seed)?;
    let dir = out_dir(&a.out)?;
    let mut manifest = RunManifest::new("sample");
    manifest.seed("sample", seed);
    manifest.config(&format!("mode={}\ncount={}\nbp_steps={t}", a.mode, a.count));
    let dump = dir.join("samples.txt");
    let (sref, cref) = (a.structure.display().to_string(), a.checkpoint.display().to_string());
    write_file(&dump, |w| write_sample_dump(w, &sref, &cref, &draws))?;
    manifest.output(&dump);
    let s = structure.support_size();
    if let Some(m) = &marginals {
        let path = dir.join("marginals.csv");
        write_file(&path, |w| {
            for r in 0..m.shape()[0] {
                let line: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
                writeln!(w, "{}", line.join(","))?;
            }
            Ok(())
        })?;
        manifest.output(&path);
    }
    if let (Some((h, w)), 2) = (shape, s) {
        // Probability of value 1 per pixel for one-shot samples, the draw itself for Gibbs.
        let images: Vec<Vec<f64>> = match &marginals {
            Some(m) => (0..m.shape()[0])
                .map(|r| m.row(r).chunks(2).map(|p| p[1]).collect())
                .collect(),
            None => draws.iter().map(|d| d.0.iter().map(|&v| v as f64).collect()).collect(),
        };
        let cols = (images.len() as f64).sqrt().ceil() as usize;
        let (gh, gw, px) = tile_images(&images, h, w, cols);
        let path = dir.join("grid.pgm");
        write_file(&path, |f| write_pgm(f, gh, gw, &px))?;
        manifest.output(&path);
    }
    manifest.finish(&dir)?;
    println!("wrote {} samples to {}", draws.len(), dump.display());
    Ok(())
}

pub fn distill(a: DistillArgs) -> CmdResult {
    check_queries(a.queries)?;
    if a.count == 0 {
        return Err(Failure::usage("--count must be at least 1"));
    }
    let structure = GraphStructure::load(input(&a.structure)?)?;
    let test = Dataset::load(input(&a.dataset)?)?;
    let mut cfg = match &a.config {
        Some(p) => EgmConfig::from_text(&read_text(p)?)?,
        None => EgmConfig::default(),
    };
    let seed = a.out.seed.unwrap_or(0);
    cfg.seed = seed;
    let spec: TaskSpec = a.task.parse()?;
    cfg.tasks = TaskList {
        specs: vec![spec.clone()],
        exclude: None,
    };
    let (samples, sampler) = match (&a.samples, &a.checkpoint) {
        (Some(p), _) => (Dataset::load(input(p)?)?, format!("dataset:{}", p.display())),
        (None, Some(c)) => {
            let mode = parse_mode(&a.mode)?;
            let model = load_model(c, &structure)?;
            let t = a.bp_steps.unwrap_or(AGM_BP_STEPS);
            let (draws, _) = draw_samples(&model, &structure, &mode, a.count, t, seed)?;
            (
                samples_to_dataset(&draws, structure.support_size())?,
                format!("{}:{}", a.mode, c.display()),
            )
        }
        (None, None) => return Err(Failure::usage("either --checkpoint or --samples is required")),
    };
    let report = run_distill(
        &samples,
        &test,
        &structure,
        &cfg,
        &spec,
        a.queries,
        seed.wrapping_add(1),
    )?;
    let dir = out_dir(&a.out)?;
    let mut manifest = RunManifest::new("distill");
    manifest.seed("distill", seed);
    manifest.config(&format!(
        "sampler={sampler}\ncount={}\n{}",
        samples.n_points(),
        cfg.to_text()
    ));
    let path = dir.join("distill.csv");
    write_file(&path, |w| {
        writeln!(w, "sampler,samples,queries,correct,total,accuracy")?;
        writeln!(
            w,
            "{sampler},{},{},{},{},{}",
            samples.n_points(),
            report.outcomes.len(),
            report.correct,
            report.total,
            report.accuracy
        )
    })?;
    manifest.output(&path);
    manifest.finish(&dir)?;
    println!("distillation accuracy={:.3}", report.accuracy);
    Ok(())
}

fn in_band(r: f64, band: (f64, f64)) -> bool {
    r >= band.0 && r <= band.1
}

pub fn bench(a: BenchArgs) -> CmdResult {
    let ts = parse_list(&a.bp_steps, "bp step")?;
    let es = parse_list(&a.edges, "edge count")?;
    let seed = a.out.seed.unwrap_or(0);
    let rows = bench_grid(a.nodes, a.support, &es, &ts, a.batch, a.reps, seed)?;
    let dir = out_dir(&a.out)?;
    let mut manifest = RunManifest::new("bench-bp");
    manifest.seed("bench", seed);
    manifest.config(&format!(
        "nodes={}\nsupport={}\nbp_steps={}\nedges={}\nbatch={}\nreps={}",
        a.nodes, a.support, a.bp_steps, a.edges, a.batch, a.reps
    ));
    let path = dir.join("bench.csv");
    write_file(&path, |w| write_bench_csv(w, &rows))?;
    let (rt, re) = doubling_ratios(&rows);
    let fmt = |v: &[f64]| v.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(" ");
    println!("t doubling ratios: {}", fmt(&rt));
    println!("|E| doubling ratios: {}", fmt(&re));
    let ok = rt.iter().all(|&r| in_band(r, T_RATIO_BAND)) && re.iter().all(|&r| in_band(r, E_RATIO_BAND));
    manifest.output(&path);
    if !ok && !a.no_check {
        return Err(Failure {
            code: 1,
            message: format!(
                "scaling outside the linear band (t in [{}, {}], |E| in [{}, {}])",
                T_RATIO_BAND.0, T_RATIO_BAND.1, E_RATIO_BAND.0, E_RATIO_BAND.1
            ),
        });
    }
    manifest.finish(&dir)?;
    Ok(())
}

pub fn make_structure(a: StructureArgs) -> CmdResult {
    let g = match (&a.grid, a.nodes) {
        (Some(shape), None) => {
            let (h, w) = parse_shape(shape)?;
            make_grid_structure(h, w, a.support)?
        }
        (None, Some(n)) => make_random_structure(n, a.support, a.edge_factor, a.seed)?,
        _ => return Err(Failure::usage("give exactly one of --nodes or --grid")),
    };
    g.save(&a.out)?;
    println!(
        "wrote {} ({} nodes, {} edges)",
        a.out.display(),
        g.n_nodes(),
        g.n_edges()
    );
    Ok(())
}
