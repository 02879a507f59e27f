//! Layered run configuration: built-in defaults, overridden by a flat
//! key=value config file, overridden by command-line flags. The resolved
//! configuration is snapshotted alongside every output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::SynthSpec;
use crate::distribution::{DistanceKind, GraphConfig, Head, ProtoMode};
use crate::embedding::EmbeddingConfig;
use crate::error::Error;
use crate::harness::export::ExportStage;
use crate::model::{default_learning_rate, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "desk" => Some(Preset::Desk),
            "paper" => Some(Preset::Paper),
            _ => None,
        }
    }

    pub fn embedding(self) -> EmbeddingConfig {
        match self {
            Preset::Desk => EmbeddingConfig::desk(),
            Preset::Paper => EmbeddingConfig::paper(),
        }
    }

    pub fn side(self) -> usize {
        match self {
            Preset::Desk => 32,
            Preset::Paper => 100,
        }
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub n_way: usize,
    pub k_shot: usize,
    pub iterations: usize,
    pub dense: bool,
    pub proto_mode: ProtoMode,
    pub head: Head,
    pub distance: DistanceKind,
    /// None means the task-dependent default (0.001 3-way / 0.01 5-way).
    pub lr: Option<f64>,
    pub steps: usize,
    pub episodes: usize,
    pub jobs: usize,
    pub out: PathBuf,
    pub preset: Preset,
    pub data: Option<PathBuf>,
    pub params: Option<PathBuf>,
    // Synthetic generation.
    pub classes: usize,
    pub samples: usize,
    pub side: Option<usize>,
    pub delta: Option<f64>,
    pub noise: f64,
    pub calibrate_target: f64,
    // Robustness experiment.
    pub runs: usize,
    pub run_episodes: usize,
    // Embedding export.
    pub stage: ExportStage,
    pub episode: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            n_way: 3,
            k_shot: 5,
            iterations: 3,
            dense: true,
            proto_mode: ProtoMode::Nodes,
            head: Head::AdjacencyRow,
            distance: DistanceKind::Abs,
            lr: None,
            steps: 3000,
            episodes: 300,
            jobs: 1,
            out: PathBuf::from("out"),
            preset: Preset::Desk,
            data: None,
            params: None,
            classes: 10,
            samples: 40,
            side: None,
            delta: None,
            noise: 0.06,
            calibrate_target: 0.75,
            runs: 100,
            run_episodes: 100,
            stage: ExportStage::Final,
            episode: 0,
        }
    }
}

impl RunConfig {
    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or_else(|| default_learning_rate(self.n_way))
    }

    /// Model configuration for a dataset of the given side length.
    pub fn model_config(&self, side: usize) -> ModelConfig {
        let mut embedding = self.preset.embedding();
        embedding.input_size = side;
        let graph = GraphConfig {
            iterations: self.iterations,
            dense: self.dense,
            proto_mode: self.proto_mode,
            distance_kind: self.distance,
            head: self.head,
            ..GraphConfig::preset(self.n_way, self.k_shot)
        };
        ModelConfig {
            embedding,
            graph,
            learning_rate: self.learning_rate(),
            seed: self.seed,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            n_classes: self.classes,
            samples_per_class_angle: self.samples,
            side: self.side.unwrap_or_else(|| self.preset.side()),
            deviation: self.delta.unwrap_or(1.0),
            noise: self.noise,
            seed: self.seed,
            ..SynthSpec::default()
        }
    }

    /// Apply one key=value override (config-file key or flag name).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        let bad = |what: &str| Error::Config(format!("bad value {value:?} for {what}"));
        match key {
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "n_way" => self.n_way = value.parse().map_err(|_| bad("n_way"))?,
            "k_shot" => self.k_shot = value.parse().map_err(|_| bad("k_shot"))?,
            "iterations" => self.iterations = value.parse().map_err(|_| bad("iterations"))?,
            "dense" => self.dense = parse_bool(value).ok_or_else(|| bad("dense"))?,
            "proto_mode" => {
                self.proto_mode = ProtoMode::parse(value).ok_or_else(|| bad("proto_mode"))?
            }
            "head" => self.head = Head::parse(value).ok_or_else(|| bad("head"))?,
            "distance" => {
                self.distance = DistanceKind::parse(value).ok_or_else(|| bad("distance"))?
            }
            "lr" => self.lr = Some(value.parse().map_err(|_| bad("lr"))?),
            "steps" => self.steps = value.parse().map_err(|_| bad("steps"))?,
            "episodes" => self.episodes = value.parse().map_err(|_| bad("episodes"))?,
            "jobs" => self.jobs = value.parse().map_err(|_| bad("jobs"))?,
            "out" => self.out = PathBuf::from(value),
            "preset" => self.preset = Preset::parse(value).ok_or_else(|| bad("preset"))?,
            "data" => self.data = Some(PathBuf::from(value)),
            "params" => self.params = Some(PathBuf::from(value)),
            "classes" => self.classes = value.parse().map_err(|_| bad("classes"))?,
            "samples" => self.samples = value.parse().map_err(|_| bad("samples"))?,
            "side" => self.side = Some(value.parse().map_err(|_| bad("side"))?),
            "delta" => self.delta = Some(value.parse().map_err(|_| bad("delta"))?),
            "noise" => self.noise = value.parse().map_err(|_| bad("noise"))?,
            "calibrate_target" => {
                self.calibrate_target = value.parse().map_err(|_| bad("calibrate_target"))?
            }
            "runs" => self.runs = value.parse().map_err(|_| bad("runs"))?,
            "run_episodes" => self.run_episodes = value.parse().map_err(|_| bad("run_episodes"))?,
            "stage" => self.stage = ExportStage::parse(value).ok_or_else(|| bad("stage"))?,
            "episode" => self.episode = value.parse().map_err(|_| bad("episode"))?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// All keys in snapshot form.
    pub fn snapshot(&self) -> String {
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        kv.insert("seed", self.seed.to_string());
        kv.insert("n_way", self.n_way.to_string());
        kv.insert("k_shot", self.k_shot.to_string());
        kv.insert("iterations", self.iterations.to_string());
        kv.insert("dense", self.dense.to_string());
        kv.insert("proto_mode", self.proto_mode.as_str().to_string());
        kv.insert("head", self.head.as_str().to_string());
        kv.insert("distance", self.distance.as_str().to_string());
        kv.insert("lr", format!("{}", self.learning_rate()));
        kv.insert("steps", self.steps.to_string());
        kv.insert("episodes", self.episodes.to_string());
        kv.insert("jobs", self.jobs.to_string());
        kv.insert("out", self.out.display().to_string());
        kv.insert("preset", self.preset.as_str().to_string());
        if let Some(d) = &self.data {
            kv.insert("data", d.display().to_string());
        }
        if let Some(p) = &self.params {
            kv.insert("params", p.display().to_string());
        }
        kv.insert("classes", self.classes.to_string());
        kv.insert("samples", self.samples.to_string());
        kv.insert("side", self.side.unwrap_or_else(|| self.preset.side()).to_string());
        if let Some(d) = self.delta {
            kv.insert("delta", format!("{d}"));
        }
        kv.insert("noise", format!("{}", self.noise));
        kv.insert("calibrate_target", format!("{}", self.calibrate_target));
        kv.insert("runs", self.runs.to_string());
        kv.insert("run_episodes", self.run_episodes.to_string());
        kv.insert(
            "stage",
            match self.stage {
                ExportStage::Embedding => "embedding".to_string(),
                ExportStage::Final => "final".to_string(),
            },
        );
        kv.insert("episode", self.episode.to_string());
        let mut out = String::new();
        for (k, v) in kv {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<(), Error> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("run_config.txt"), self.snapshot())?;
        Ok(())
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

/// Parse a flat key=value config file (a TOML-compatible subset: comments
/// with `#`, optional double quotes around values).
pub fn parse_config_file(path: &Path) -> Result<Vec<(String, String)>, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("{}:{}: expected key = value", path.display(), i + 1))
        })?;
        let v = v.trim().trim_matches('"');
        pairs.push((k.trim().to_string(), v.to_string()));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.txt");
        std::fs::write(&p, "# comment\nn_way = 5\nsteps = 100\nout = \"from_file\"\n").unwrap();
        let mut rc = RunConfig::default();
        for (k, v) in parse_config_file(&p).unwrap() {
            rc.set(&k, &v).unwrap();
        }
        assert_eq!(rc.n_way, 5);
        assert_eq!(rc.steps, 100);
        assert_eq!(rc.out, PathBuf::from("from_file"));
        // flag override beats the file
        rc.set("steps", "7").unwrap();
        assert_eq!(rc.steps, 7);
        // defaults survive for untouched keys
        assert_eq!(rc.k_shot, 5);
    }

    #[test]
    fn learning_rate_defaults_by_way() {
        let mut rc = RunConfig::default();
        rc.n_way = 3;
        assert_eq!(rc.learning_rate(), 0.001);
        rc.n_way = 5;
        assert_eq!(rc.learning_rate(), 0.01);
        rc.set("lr", "0.5").unwrap();
        assert_eq!(rc.learning_rate(), 0.5);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut rc = RunConfig::default();
        assert!(rc.set("nope", "1").is_err());
        assert!(rc.set("dense", "perhaps").is_err());
    }

    #[test]
    fn snapshot_round_trips_through_parser() {
        let dir = tempfile::tempdir().unwrap();
        let mut rc = RunConfig::default();
        rc.set("n_way", "5").unwrap();
        rc.set("delta", "1.5").unwrap();
        rc.write_snapshot(dir.path()).unwrap();
        let pairs = parse_config_file(&dir.path().join("run_config.txt")).unwrap();
        let mut rc2 = RunConfig::default();
        for (k, v) in &pairs {
            rc2.set(k, v).unwrap();
        }
        assert_eq!(rc2.n_way, 5);
        assert_eq!(rc2.delta, Some(1.5));
        assert_eq!(rc2.snapshot(), rc.snapshot());
    }
}
