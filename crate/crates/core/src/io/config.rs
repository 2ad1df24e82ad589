//! The single TOML file that drives a run. Unknown keys anywhere are fatal,
//! and the whole tree is validated before any stage starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::metrics::FrechetWindow;
use crate::srr::{BaseTrainConfig, SrrConfig};
use crate::trd::TrdConfig;
use crate::worldsim::WorldConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    TrainBase,
    TrainSrr,
    Distill,
    Eval,
    #[default]
    All,
}

/// Which trained model the distiller starts from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherChoice {
    Base,
    #[default]
    Srr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_clips: usize,
    pub eval_clips: usize,
    pub frames: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_clips: 64,
            eval_clips: 16,
            frames: 48,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub history: usize,
    pub chunk: usize,
    /// Chunks per open-loop rollout.
    pub depth: usize,
    /// Sampler steps for teacher-style models; students use their own.
    pub sampler_steps: usize,
    pub cumulative: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            history: 8,
            chunk: 4,
            depth: 10,
            sampler_steps: 16,
            cumulative: true,
        }
    }
}

impl EvalConfig {
    pub fn window(&self) -> FrechetWindow {
        if self.cumulative {
            FrechetWindow::Cumulative
        } else {
            FrechetWindow::ChunkOnly
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClosedLoopConfig {
    pub depth: usize,
    /// Evaluation clips whose scenes host a closed-loop run.
    pub scenes: usize,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        Self { depth: 50, scenes: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub stage: Stage,
    pub out_dir: PathBuf,
    pub teacher: TeacherChoice,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub denoiser: DenoiserConfig,
    pub base: BaseTrainConfig,
    pub srr: SrrConfig,
    pub trd: TrdConfig,
    pub eval: EvalConfig,
    pub closed_loop: ClosedLoopConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let world = WorldConfig::default();
        let denoiser = DenoiserConfig {
            latent_dim: world.latent_dim(),
            layout_dim: world.layout_dim(),
            ..DenoiserConfig::default()
        };
        Self {
            seed: 0,
            stage: Stage::All,
            out_dir: PathBuf::from("runs/default"),
            teacher: TeacherChoice::Srr,
            world,
            data: DataConfig::default(),
            denoiser,
            base: BaseTrainConfig::default(),
            srr: SrrConfig::default(),
            trd: TrdConfig::default(),
            eval: EvalConfig::default(),
            closed_loop: ClosedLoopConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Validates every section and their agreement; returns warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        self.world.validate()?;
        self.denoiser.validate()?;
        self.base.validate()?;
        self.srr.validate()?;
        let mut warnings = self.trd.validate()?;
        let (d, w) = (&self.denoiser, &self.world);
        if d.latent_dim != w.latent_dim() || d.layout_dim != w.layout_dim() {
            return Err(Error::config(format!(
                "denoiser widths ({}, {}) do not match the world ({}, {})",
                d.latent_dim,
                d.layout_dim,
                w.latent_dim(),
                w.layout_dim()
            )));
        }
        let t = self.base.history;
        for (name, h) in [("srr", self.srr.history), ("trd", self.trd.history), ("eval", self.eval.history)] {
            if h != t {
                return Err(Error::config(format!("{name} history {h} differs from base history {t}")));
            }
        }
        if self.data.train_clips == 0 || self.data.eval_clips == 0 {
            return Err(Error::config("datasets need at least one clip each"));
        }
        if self.eval.chunk == 0 || self.eval.depth == 0 || self.eval.sampler_steps == 0 {
            return Err(Error::config("evaluation sizes must be positive"));
        }
        if self.closed_loop.scenes > self.data.eval_clips {
            return Err(Error::config("closed-loop scenes exceed the evaluation clips"));
        }
        let base_chunk = self.base.chunks.iter().copied().max().unwrap_or(0);
        let needs = [
            ("base training", t + base_chunk),
            ("the rollout cache", t + self.srr.max_depth() * self.srr.chunk),
            ("distillation", t + self.trd.depth * self.trd.student_chunk),
            ("evaluation", t + self.eval.depth * self.eval.chunk),
        ];
        for (what, n) in needs {
            if self.data.frames < n {
                return Err(Error::config(format!("{what} needs clips of {n} frames, data has {}", self.data.frames)));
            }
        }
        let widest = [base_chunk, self.srr.chunk, self.trd.teacher_chunk, self.trd.student_chunk, self.eval.chunk]
            .into_iter()
            .max()
            .unwrap_or(0);
        if d.max_frames < t + widest {
            return Err(Error::config(format!("denoiser max_frames {} below window {}", d.max_frames, t + widest)));
        }
        if !self.base.chunks.contains(&self.trd.teacher_chunk) {
            warnings.push(format!("teacher chunk {} never seen in base training", self.trd.teacher_chunk));
        }
        Ok(warnings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_cleanly() {
        assert!(RunConfig::default().validate().unwrap().is_empty());
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let c = RunConfig::from_toml_str("seed = 7\n[srr]\nsteps = 10\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.srr.steps, 10);
        assert_eq!(c.srr.chunk, SrrConfig::default().chunk);
    }

    #[test]
    fn unknown_keys_are_fatal() {
        for text in ["sed = 1\n", "[srr]\nstep = 3\n", "[bogus]\n", "[trd]\ncfg = 1.0\n"] {
            assert!(matches!(RunConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn cross_section_checks() {
        let mut c = RunConfig::default();
        c.srr.history = 6;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.data.frames = 20;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.denoiser.latent_dim = 6;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.trd.dmd_interval = Some(2);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn stage_names_are_kebab_case() {
        let c = RunConfig::from_toml_str("stage = \"train-srr\"\nteacher = \"base\"\n").unwrap();
        assert_eq!(c.stage, Stage::TrainSrr);
        assert_eq!(c.teacher, TeacherChoice::Base);
    }
}
