//! The staged run: data generation, base training, rollout recovery,
//! distillation and evaluation, each reading and writing files in one output
//! directory. Every random stream is forked from the run seed.

use std::path::{Path, PathBuf};

use crate::denoiser::DenoiserParams;
use crate::diffusion::SamplerConfig;
use crate::error::{ensure, Error, Result};
use crate::io::checkpoint::{load_checkpoint, save_checkpoint};
use crate::io::config::{RunConfig, Stage, TeacherChoice};
use crate::io::dataset::{load_dataset, save_dataset};
use crate::io::report::write_report;
use crate::metrics::{pooled_drift_report, DriftReport, EvalPair};
use crate::rollout::{closed_loop_rollout, rollout_clip, ClosedLoopRun, PurePursuit};
use crate::srr::{train_base, train_srr};
use crate::tensor::RngState;
use crate::trd::distill;
use crate::worldsim::{generate_scene, make_clips, recover_pose, Clip, Scene};

const STREAM_DATA: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_BASE: u64 = 3;
const STREAM_SRR: u64 = 4;
const STREAM_DISTILL: u64 = 5;
const STREAM_EVAL: u64 = 6;
const STREAM_CLOSED: u64 = 7;

/// A model to evaluate: a named stage output, ground truth, or a file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelRef {
    GroundTruth,
    Base,
    Srr,
    Student,
    File(PathBuf),
}

impl ModelRef {
    pub fn parse(s: &str) -> Self {
        match s {
            "gt" => Self::GroundTruth,
            "base" => Self::Base,
            "srr" => Self::Srr,
            "student" => Self::Student,
            other => Self::File(PathBuf::from(other)),
        }
    }

    /// Short name used in output file names.
    pub fn label(&self) -> String {
        match self {
            Self::GroundTruth => "gt".into(),
            Self::Base => "base".into(),
            Self::Srr => "srr".into(),
            Self::Student => "student".into(),
            Self::File(p) => p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into()),
        }
    }
}

/// Summary of a training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSummary {
    pub stage: &'static str,
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub output: PathBuf,
}

fn summary(stage: &'static str, losses: &[f64], output: PathBuf) -> StageSummary {
    StageSummary {
        stage,
        steps: losses.len(),
        first_loss: losses.first().copied(),
        last_loss: losses.last().copied(),
        output,
    }
}

pub struct Pipeline {
    pub config: RunConfig,
    /// Accept checkpoints written under a different model configuration.
    pub allow_config_mismatch: bool,
    root: RngState,
}

impl Pipeline {
    /// Validates the configuration; warnings are returned alongside.
    pub fn new(config: RunConfig) -> Result<(Self, Vec<String>)> {
        let warnings = config.validate()?;
        let root = RngState::new(config.seed);
        Ok((
            Self {
                config,
                allow_config_mismatch: false,
                root,
            },
            warnings,
        ))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    pub fn train_data_path(&self) -> PathBuf {
        self.path("train.hdds")
    }

    pub fn eval_data_path(&self) -> PathBuf {
        self.path("eval.hdds")
    }

    pub fn checkpoint_path(&self, model: &ModelRef) -> Result<PathBuf> {
        Ok(match model {
            ModelRef::GroundTruth => return Err(Error::contract("ground truth has no checkpoint")),
            ModelRef::Base => self.path("base.hdwm"),
            ModelRef::Srr => self.path("srr.hdwm"),
            ModelRef::Student => self.path("student.hdwm"),
            ModelRef::File(p) => p.clone(),
        })
    }

    pub fn load_model(&self, model: &ModelRef) -> Result<DenoiserParams> {
        load_checkpoint(&self.checkpoint_path(model)?, &self.config.denoiser, self.allow_config_mismatch)
    }

    fn sampler_for(&self, model: &ModelRef) -> Result<SamplerConfig> {
        match model {
            ModelRef::Student => SamplerConfig::new(self.config.trd.student_steps),
            _ => SamplerConfig::new(self.config.eval.sampler_steps),
        }
    }

    pub fn generate_data(&self) -> Result<(Vec<Clip>, Vec<Clip>)> {
        let c = &self.config;
        let mut rng = self.root.fork(STREAM_DATA);
        let (train_seed, eval_seed) = (rng.next_u64(), rng.next_u64());
        let train = make_clips(&c.world, train_seed, c.data.train_clips, c.data.frames)?;
        let eval = make_clips(&c.world, eval_seed, c.data.eval_clips, c.data.frames)?;
        save_dataset(&self.train_data_path(), &train)?;
        save_dataset(&self.eval_data_path(), &eval)?;
        Ok((train, eval))
    }

    pub fn train_base(&self) -> Result<StageSummary> {
        let clips = load_dataset(&self.train_data_path())?;
        let mut init = self.root.fork(STREAM_INIT);
        let mut params = DenoiserParams::init(&self.config.denoiser, &mut init)?;
        let losses = train_base(&mut params, &clips, &self.config.base, &mut self.root.fork(STREAM_BASE))?;
        let out = self.checkpoint_path(&ModelRef::Base)?;
        save_checkpoint(&out, &params)?;
        Ok(summary("train-base", &losses, out))
    }

    pub fn train_srr(&self) -> Result<StageSummary> {
        let clips = load_dataset(&self.train_data_path())?;
        let mut params = self.load_model(&ModelRef::Base)?;
        let losses = train_srr(&mut params, &clips, &self.config.srr, &mut self.root.fork(STREAM_SRR))?;
        let out = self.checkpoint_path(&ModelRef::Srr)?;
        save_checkpoint(&out, &params)?;
        Ok(summary("train-srr", &losses, out))
    }

    pub fn distill(&self) -> Result<StageSummary> {
        let clips = load_dataset(&self.train_data_path())?;
        let teacher = match self.config.teacher {
            TeacherChoice::Base => ModelRef::Base,
            TeacherChoice::Srr => ModelRef::Srr,
        };
        let teacher = self.load_model(&teacher)?;
        let (student, log) = distill(&teacher, &clips, &self.config.trd, &mut self.root.fork(STREAM_DISTILL))?;
        let out = self.checkpoint_path(&ModelRef::Student)?;
        save_checkpoint(&out, &student)?;
        let losses: Vec<f64> = log.iter().map(|s| s.critic_losses.iter().sum::<f64>() / s.critic_losses.len().max(1) as f64).collect();
        Ok(summary("distill", &losses, out))
    }

    fn eval_set(&self) -> Result<Vec<(Scene, Clip)>> {
        let clips = load_dataset(&self.eval_data_path())?;
        clips
            .into_iter()
            .map(|c| Ok((generate_scene(&self.config.world, c.seed)?, c)))
            .collect()
    }

    /// Generated frames after the history for every evaluation clip.
    pub fn generate(&self, model: &ModelRef) -> Result<Vec<(Scene, Clip, crate::tensor::Tensor)>> {
        let e = &self.config.eval;
        let set = self.eval_set()?;
        let frames = e.depth * e.chunk;
        if *model == ModelRef::GroundTruth {
            return set
                .into_iter()
                .map(|(s, c)| {
                    let g = c.latents.slice_rows(e.history, frames)?;
                    Ok((s, c, g))
                })
                .collect();
        }
        let params = self.load_model(model)?;
        let sampler = self.sampler_for(model)?;
        let rng = self.root.fork(STREAM_EVAL);
        let fp = params.fingerprint();
        set.into_iter()
            .enumerate()
            .map(|(i, (s, c))| {
                let traj = rollout_clip(&params, &c, e.history, e.depth, e.chunk, &sampler, &mut rng.fork(i as u64), fp)?;
                let g = traj.latents()?.ok_or_else(|| Error::contract("empty rollout"))?;
                Ok((s, c, g))
            })
            .collect()
    }

    /// Open-loop rollouts of `model` written as a dataset whose latents are
    /// the history followed by generated frames and whose poses are decoded.
    pub fn rollout(&self, model: &ModelRef) -> Result<PathBuf> {
        let e = &self.config.eval;
        let generated = self.generate(model)?;
        let clips = generated
            .into_iter()
            .map(|(scene, clip, gen)| {
                let n = e.history + gen.rows();
                let latents = crate::tensor::Tensor::concat_rows(&[&clip.latents.slice_rows(0, e.history)?, &gen])?;
                let poses = (0..n)
                    .map(|i| {
                        recover_pose(&self.config.world, latents.row(i), &scene, &clip.anchor_ids)
                            .map(|p| p.at_f32_precision())
                            .map_err(|err| Error::Degenerate(format!("clip {} frame {}: {err}", clip.seed, i + 1)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Clip {
                    latents,
                    actions: clip.actions.slice_rows(0, n - 1)?,
                    layout: clip.layout.slice_rows(0, n)?,
                    poses,
                    anchor_ids: clip.anchor_ids.clone(),
                    seed: clip.seed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let out = self.path(&format!("rollout_{}.hdds", model.label()));
        save_dataset(&out, &clips)?;
        Ok(out)
    }

    /// Pooled drift report of `model` on the evaluation clips, written to
    /// `eval_<label>.csv`.
    pub fn evaluate(&self, model: &ModelRef) -> Result<(DriftReport, PathBuf)> {
        let e = &self.config.eval;
        let generated = self.generate(model)?;
        let pairs: Vec<EvalPair<'_>> = generated
            .iter()
            .map(|(s, c, g)| EvalPair {
                generated: g,
                clip: c,
                scene: s,
            })
            .collect();
        let report = pooled_drift_report(&self.config.world, &pairs, e.history, e.chunk, e.window())?;
        let out = self.path(&format!("eval_{}.csv", model.label()));
        write_report(&report, &out)?;
        Ok((report, out))
    }

    /// Closed-loop runs with the pure-pursuit controller on the first
    /// configured evaluation scenes.
    pub fn closed_loop(&self, model: &ModelRef) -> Result<(Vec<Result<ClosedLoopRun>>, PathBuf)> {
        ensure!(*model != ModelRef::GroundTruth, "closed-loop runs need a trained model");
        let (e, cl) = (&self.config.eval, &self.config.closed_loop);
        let params = self.load_model(model)?;
        let sampler = self.sampler_for(model)?;
        let controller = PurePursuit {
            world: self.config.world.clone(),
        };
        let rng = self.root.fork(STREAM_CLOSED);
        let fp = params.fingerprint();
        let set = self.eval_set()?;
        let mut csv = String::from("scene,chunk,x,y,yaw,max_latent_norm\n");
        let mut runs = Vec::new();
        for (i, (scene, clip)) in set.iter().take(cl.scenes).enumerate() {
            let run = closed_loop_rollout(
                &params,
                &self.config.world,
                scene,
                clip,
                e.history,
                &controller,
                cl.depth,
                e.chunk,
                &sampler,
                &mut rng.fork(i as u64),
                fp,
            );
            if let Ok(r) = &run {
                for (n, (pose, chunk)) in r.recovered.iter().zip(&r.trajectory.chunks).enumerate() {
                    let norm = (0..chunk.rows())
                        .map(|j| chunk.row(j).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt())
                        .fold(0.0, f64::max);
                    csv.push_str(&format!("{},{},{:.6},{:.6},{:.6},{:.6}\n", i, n + 1, pose.x, pose.y, pose.yaw, norm));
                }
            }
            runs.push(run);
        }
        let out = self.path(&format!("closed_loop_{}.csv", model.label()));
        crate::io::write_bytes(&out, csv.as_bytes())?;
        Ok((runs, out))
    }

    /// Runs every stage up to and including `self.config.stage`.
    pub fn run(&self) -> Result<Vec<String>> {
        let upto = self.config.stage;
        let order = [Stage::GenData, Stage::TrainBase, Stage::TrainSrr, Stage::Distill, Stage::Eval];
        let mut log = Vec::new();
        for stage in order {
            match stage {
                Stage::GenData => {
                    let (t, e) = self.generate_data()?;
                    log.push(format!("gen-data: {} train and {} eval clips", t.len(), e.len()));
                }
                Stage::TrainBase => log.push(describe(&self.train_base()?)),
                Stage::TrainSrr => log.push(describe(&self.train_srr()?)),
                Stage::Distill => log.push(describe(&self.distill()?)),
                Stage::Eval => {
                    for m in [ModelRef::Base, ModelRef::Srr, ModelRef::Student] {
                        let (r, out) = self.evaluate(&m)?;
                        log.push(format!(
                            "eval {}: final lfd {:.6} -> {}",
                            m.label(),
                            r.final_lfd().unwrap_or(f64::NAN),
                            out.display()
                        ));
                    }
                }
                Stage::All => unreachable!(),
            }
            if stage == upto {
                break;
            }
        }
        Ok(log)
    }
}

pub fn describe(s: &StageSummary) -> String {
    let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
    format!(
        "{}: {} steps, loss {} -> {}, wrote {}",
        s.stage,
        s.steps,
        f(s.first_loss),
        f(s.last_loss),
        s.output.display()
    )
}

/// True when two files hold the same bytes.
pub fn same_bytes(a: &Path, b: &Path) -> Result<bool> {
    let x = std::fs::read(a).map_err(|e| Error::io(a, e))?;
    let y = std::fs::read(b).map_err(|e| Error::io(b, e))?;
    Ok(x == y)
}
