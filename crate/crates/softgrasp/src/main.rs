//! Command-line front end: dataset generation, training, evaluation, grasp
//! ranking, pose refinement, plain oracle solves, and experiment reports.
//!
//! Every subcommand reads one JSON job description (`--config`); `--seed`
//! overrides the seed stored in the config wherever the job uses one. Jobs
//! print a JSON summary on stdout and write any CSV or JSON artifacts named
//! in the config. On failure the process exits nonzero after printing a
//! `{"kind", "message"}` JSON envelope on stderr.

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use softgrasp::fem::{
    build_contact_load, run_grasp_trajectory, Material, DEFAULT_PEAK_FORCE_N,
    DEFAULT_POISSON_RATIO, DEFAULT_SUBSTEPS,
};
use softgrasp::grasp::{
    compute_joint_closure, find_contacts, load_grasp_list, pose_gripper, sample_antipodal, Grasp,
    GripperModel, DEFAULT_CONTACT_EPS_M,
};
use softgrasp::mesh::TetMesh;
use softgrasp::net::{load_checkpoint, save_checkpoint};
use softgrasp::plan::{
    full_experiment, summarize_ranking, threshold_refinement_experiment, write_boxplot_csv,
    write_eval_csv, ExperimentConfig, Objective, Planner, RefineConfig,
};
use softgrasp::train::{
    evaluate, generate_dataset, load_dataset, train_model, write_history_csv, DataGenConfig,
    ObjectSpec, TrainConfig, TrainVariant,
};
use softgrasp::{Error, Result};

#[derive(Parser)]
#[command(
    name = "softgrasp",
    version,
    about = "Grasp outcome prediction on deformable solids: FEM oracle, \
             graph-network surrogate, and gradient-based grasp planning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample grasps, solve each with the FEM oracle, and write a dataset.
    GenData(JobArgs),
    /// Train the surrogate on a dataset directory.
    Train(JobArgs),
    /// Evaluate a checkpoint against a dataset split.
    Eval(JobArgs),
    /// Rank freshly sampled candidate grasps with a trained surrogate.
    Rank(JobArgs),
    /// Refine the threshold bands of a ranking and compare with the oracle.
    Refine(JobArgs),
    /// Solve grasps with the FEM oracle alone.
    FemSolve(JobArgs),
    /// Run a generalization experiment and write its report files.
    Report(JobArgs),
}

#[derive(Args)]
struct JobArgs {
    /// JSON job description.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed recorded in the config.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "kind": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(load_job(&a)?, a.seed),
        Command::Train(a) => train(load_job(&a)?, a.seed),
        Command::Eval(a) => eval(load_job(&a)?),
        Command::Rank(a) => rank(load_job(&a)?, a.seed),
        Command::Refine(a) => refine(load_job(&a)?, a.seed),
        Command::FemSolve(a) => fem_solve(load_job(&a)?, a.seed),
        Command::Report(a) => report(load_job(&a)?, a.seed),
    }
}

/// Reads and parses the job config, wrapping failures with the path.
fn load_job<T: DeserializeOwned>(args: &JobArgs) -> Result<T> {
    let path = &args.config;
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("invalid job config {}: {e}", path.display())))
}

/// Pretty-prints to stdout; a closed pipe (e.g. `| head`) is not an error.
fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct GenDataJob {
    out_dir: PathBuf,
    #[serde(flatten)]
    gen: DataGenConfig,
}

fn gen_data(mut job: GenDataJob, seed: Option<u64>) -> Result<()> {
    if let Some(seed) = seed {
        job.gen.seed = seed;
    }
    let meta = generate_dataset(&job.gen, &job.out_dir)?;
    print_json(&meta)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct TrainJob {
    data_dir: PathBuf,
    out_dir: PathBuf,
    #[serde(flatten)]
    train: TrainConfig,
}

fn train(mut job: TrainJob, seed: Option<u64>) -> Result<()> {
    if let Some(seed) = seed {
        job.train.seed = seed;
    }
    let dataset = load_dataset(&job.data_dir)?;
    let records = dataset.train_records();
    let outcome = train_model(&records, &job.train)?;
    fs::create_dir_all(&job.out_dir)?;
    save_checkpoint(&job.out_dir.join("checkpoint.json"), &outcome.params, &outcome.stats)?;
    write_history_csv(&job.out_dir.join("history.csv"), &outcome.history)?;
    print_json(&json!({
        "n_train_records": records.len(),
        "initial_epoch_loss": outcome.epoch_mean_loss(0),
        "final_epoch_loss": outcome.epoch_mean_loss(job.train.epochs.saturating_sub(1)),
        "checkpoint": job.out_dir.join("checkpoint.json"),
        "history": job.out_dir.join("history.csv"),
    }))
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SplitChoice {
    Train,
    Test,
    All,
}

#[derive(Debug, Deserialize)]
struct EvalJob {
    data_dir: PathBuf,
    checkpoint: PathBuf,
    variant: TrainVariant,
    split: SplitChoice,
    #[serde(default)]
    out_csv: Option<PathBuf>,
}

fn eval(job: EvalJob) -> Result<()> {
    let dataset = load_dataset(&job.data_dir)?;
    let records = match job.split {
        SplitChoice::Train => dataset.train_records(),
        SplitChoice::Test => dataset.test_records(),
        SplitChoice::All => dataset.records.iter().collect(),
    };
    if records.is_empty() {
        return Err(Error::Config("the requested split has no records".into()));
    }
    let (params, stats) = load_checkpoint(&job.checkpoint)?;
    let evals = evaluate(&records, &params, &stats, job.variant)?;
    if let Some(path) = &job.out_csv {
        write_eval_csv(path, &evals)?;
    }
    print_json(&json!({
        "n_records": records.len(),
        "summary": summarize_ranking(&evals)?,
    }))
}

// ---------------------------------------------------------------------------
// rank and refine
// ---------------------------------------------------------------------------

/// Scene shared by the planning jobs: one object, one gripper, and the
/// antipodal sampling that produces the candidate grasps.
#[derive(Debug, Deserialize)]
struct SceneJob {
    object: ObjectSpec,
    elastic_modulus_pa: f64,
    #[serde(default)]
    gripper: GripperModel,
    n_surface_points: usize,
    n_rotations: usize,
    #[serde(default = "default_peak_force")]
    peak_force_n: f64,
    #[serde(default = "default_contact_eps")]
    contact_eps_m: f64,
    seed: u64,
}

fn default_peak_force() -> f64 {
    DEFAULT_PEAK_FORCE_N
}

fn default_contact_eps() -> f64 {
    DEFAULT_CONTACT_EPS_M
}

fn default_poisson() -> f64 {
    DEFAULT_POISSON_RATIO
}

fn default_substeps() -> usize {
    DEFAULT_SUBSTEPS
}

impl SceneJob {
    fn build_mesh(&self) -> Result<TetMesh> {
        self.object.build(self.elastic_modulus_pa)
    }

    fn sample_candidates(&self, mesh: &TetMesh) -> Result<Vec<Grasp>> {
        let mut grasps = sample_antipodal(
            mesh,
            &self.gripper,
            self.n_surface_points,
            self.n_rotations,
            self.seed,
        )?;
        for g in &mut grasps {
            g.f_g = self.peak_force_n;
        }
        Ok(grasps)
    }
}

/// The smooth-max objective is the only one whose value depends on the
/// stress scale, so only it insists on an explicit one.
fn resolve_sigma(objective: Objective, sigma_ref_pa: Option<f64>) -> Result<f64> {
    match (objective, sigma_ref_pa) {
        (Objective::SmoothMaxStress, None) => Err(Error::Config(
            "the smooth-max stress objective needs sigma_ref_pa".into(),
        )),
        (_, s) => Ok(s.unwrap_or(1.0)),
    }
}

#[derive(Debug, Deserialize)]
struct RankJob {
    #[serde(flatten)]
    scene: SceneJob,
    checkpoint: PathBuf,
    variant: TrainVariant,
    objective: Objective,
    #[serde(default)]
    sigma_ref_pa: Option<f64>,
    #[serde(default)]
    out_csv: Option<PathBuf>,
}

fn rank(mut job: RankJob, seed: Option<u64>) -> Result<()> {
    if let Some(seed) = seed {
        job.scene.seed = seed;
    }
    let mesh = job.scene.build_mesh()?;
    let grasps = job.scene.sample_candidates(&mesh)?;
    let (params, stats) = load_checkpoint(&job.checkpoint)?;
    let sigma = resolve_sigma(job.objective, job.sigma_ref_pa)?;
    let mut planner = Planner::new(
        &mesh,
        &job.scene.gripper,
        &params,
        &stats,
        job.variant,
        job.objective,
        sigma,
    )?;
    planner.contact_eps_m = job.scene.contact_eps_m;
    let ranked = planner.rank(&grasps);

    if let Some(path) = &job.out_csv {
        let mut out =
            String::from("rank,grasp_index,predicted_q,qw,qx,qy,qz,tx,ty,tz,squeeze_force_n\n");
        for (rank, r) in ranked.iter().enumerate() {
            let g = &grasps[r.index];
            let q = r.q.map_or("NA".into(), |q| q.to_string());
            let pose: Vec<String> = g.pose.to_array().iter().map(f64::to_string).collect();
            out.push_str(&format!(
                "{rank},{},{q},{},{}\n",
                r.index,
                pose.join(","),
                g.f_g
            ));
        }
        fs::write(path, out)?;
    }

    let rows: Vec<_> = ranked
        .iter()
        .enumerate()
        .map(|(rank, r)| {
            json!({
                "rank": rank,
                "grasp_index": r.index,
                "predicted_q": r.q,
                "pose": grasps[r.index].pose.to_array(),
                "squeeze_force_n": grasps[r.index].f_g,
            })
        })
        .collect();
    print_json(&rows)
}

#[derive(Debug, Deserialize)]
struct RefineJob {
    #[serde(flatten)]
    scene: SceneJob,
    checkpoint: PathBuf,
    variant: TrainVariant,
    objective: Objective,
    #[serde(default)]
    sigma_ref_pa: Option<f64>,
    #[serde(default = "default_poisson")]
    poisson_ratio: f64,
    /// Worst-predicted candidates to refine.
    n_low: usize,
    /// Best-predicted candidates to refine.
    n_high: usize,
    #[serde(default)]
    refine: RefineConfig,
    #[serde(default)]
    boxplot_csv: Option<PathBuf>,
    /// Also write the refined-pose JSON printed on stdout to this file.
    #[serde(default)]
    poses_json: Option<PathBuf>,
}

fn refine(mut job: RefineJob, seed: Option<u64>) -> Result<()> {
    if let Some(seed) = seed {
        job.scene.seed = seed;
    }
    let mesh = job.scene.build_mesh()?;
    let grasps = job.scene.sample_candidates(&mesh)?;
    let (params, stats) = load_checkpoint(&job.checkpoint)?;
    let sigma = resolve_sigma(job.objective, job.sigma_ref_pa)?;
    let mut planner = Planner::new(
        &mesh,
        &job.scene.gripper,
        &params,
        &stats,
        job.variant,
        job.objective,
        sigma,
    )?;
    planner.contact_eps_m = job.scene.contact_eps_m;
    let material = Material::new(job.scene.elastic_modulus_pa, job.poisson_ratio)?;
    let experiment = threshold_refinement_experiment(
        &planner,
        &material,
        &grasps,
        job.n_low,
        job.n_high,
        &job.refine,
        job.scene.seed,
    )?;

    if let Some(path) = &job.boxplot_csv {
        write_boxplot_csv(path, &experiment.rows)?;
    }
    let poses = json!({
        "objective": job.objective,
        "low": experiment.low,
        "high": experiment.high,
    });
    if let Some(path) = &job.poses_json {
        fs::write(path, serde_json::to_string_pretty(&poses)?)?;
    }
    print_json(&poses)
}

// ---------------------------------------------------------------------------
// fem-solve
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct FemSolveJob {
    object: ObjectSpec,
    elastic_modulus_pa: f64,
    #[serde(default = "default_poisson")]
    poisson_ratio: f64,
    #[serde(default)]
    gripper: GripperModel,
    /// Grasp-list file to solve; absent means sample candidates instead.
    #[serde(default)]
    grasps: Option<PathBuf>,
    #[serde(default)]
    n_surface_points: usize,
    #[serde(default)]
    n_rotations: usize,
    #[serde(default = "default_peak_force")]
    peak_force_n: f64,
    #[serde(default = "default_substeps")]
    substeps: usize,
    #[serde(default = "default_contact_eps")]
    contact_eps_m: f64,
    #[serde(default)]
    seed: u64,
    /// One CSV row per grasp per substep.
    #[serde(default)]
    out_csv: Option<PathBuf>,
}

fn fem_solve(mut job: FemSolveJob, seed: Option<u64>) -> Result<()> {
    if let Some(seed) = seed {
        job.seed = seed;
    }
    let mesh = job.object.build(job.elastic_modulus_pa)?;
    let material = Material::new(job.elastic_modulus_pa, job.poisson_ratio)?;
    let grasps = match &job.grasps {
        Some(path) => {
            let (object_id, grasps) = load_grasp_list(path)?;
            if object_id != mesh.id {
                return Err(Error::Config(format!(
                    "grasp list is for object '{object_id}', config builds '{}'",
                    mesh.id
                )));
            }
            grasps
        }
        None => {
            if job.n_surface_points * job.n_rotations == 0 {
                return Err(Error::Config(
                    "need a grasp list or a nonzero sampling budget".into(),
                ));
            }
            let mut grasps = sample_antipodal(
                &mesh,
                &job.gripper,
                job.n_surface_points,
                job.n_rotations,
                job.seed,
            )?;
            for g in &mut grasps {
                g.f_g = job.peak_force_n;
            }
            grasps
        }
    };

    let mut csv = String::from(
        "grasp_index,substep,force_n,mean_stress_pa,max_stress_pa,\
         mean_deformation_m,max_deformation_m\n",
    );
    let mut rows = Vec::with_capacity(grasps.len());
    for (grasp_index, grasp) in grasps.iter().enumerate() {
        match solve_grasp(&mesh, &material, &job, grasp) {
            Ok(trajectory) => {
                for (substep, s) in trajectory.iter().enumerate() {
                    csv.push_str(&format!(
                        "{grasp_index},{},{},{},{},{},{}\n",
                        substep + 1,
                        s.force_n,
                        s.mean_stress_pa,
                        s.max_stress_pa,
                        s.mean_deformation_m,
                        s.max_deformation_m,
                    ));
                }
                let peak = trajectory.last().expect("at least one substep");
                rows.push(json!({ "grasp_index": grasp_index, "peak": peak }));
            }
            Err(e) => rows.push(json!({ "grasp_index": grasp_index, "error": e.to_string() })),
        }
    }
    if let Some(path) = &job.out_csv {
        fs::write(path, csv)?;
    }
    print_json(&rows)
}

/// Field summary of one solved substep.
#[derive(Debug, Serialize)]
struct SubstepSummary {
    force_n: f64,
    mean_stress_pa: f64,
    max_stress_pa: f64,
    mean_deformation_m: f64,
    max_deformation_m: f64,
}

fn solve_grasp(
    mesh: &TetMesh,
    material: &Material,
    job: &FemSolveJob,
    grasp: &Grasp,
) -> Result<Vec<SubstepSummary>> {
    let p_g = compute_joint_closure(mesh, &job.gripper, &grasp.pose)?;
    let posed = pose_gripper(&job.gripper, &grasp.pose, p_g);
    let contacts = find_contacts(mesh, &posed, job.contact_eps_m)?;
    if !contacts.both_fingers_touch() {
        return Err(Error::Grasp("only one finger touches the object".into()));
    }
    let load = build_contact_load(
        mesh,
        [&contacts.object_nodes_per_finger[0], &contacts.object_nodes_per_finger[1]],
        posed.closing_dirs_world,
        grasp.f_g,
    )?;
    let fields = run_grasp_trajectory(mesh, material, &load, job.substeps)?;
    Ok(fields
        .iter()
        .map(|f| SubstepSummary {
            force_n: f.force_level_n,
            mean_stress_pa: f.mean_stress_pa(),
            max_stress_pa: f.stress_pa.iter().fold(0.0, |m, &s| s.max(m)),
            mean_deformation_m: f.mean_deformation_m(),
            max_deformation_m: f.displacement_m.iter().fold(0.0, |m, d| d.norm().max(m)),
        })
        .collect())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct ReportJob {
    out_dir: PathBuf,
    #[serde(flatten)]
    experiment: ExperimentConfig,
}

fn report(mut job: ReportJob, seed: Option<u64>) -> Result<()> {
    if let Some(seed) = seed {
        job.experiment.train.seed = seed;
    }
    let report = full_experiment(&job.experiment, &job.out_dir)?;
    print_json(&report)
}
