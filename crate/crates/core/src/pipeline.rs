//! Run directories: configuration, copied inputs, the event log, and the
//! exported artifacts.
//!
//! ```text
//! run/
//!   config.json
//!   inputs/{opinions.jsonl, embeddings.bin, embedding_ids.json, quality.jsonl, topics.json}
//!   events.jsonl
//!   sessions.json  topic_shortlist.json  topic_assignments.json  labels.jsonl
//!   consolidation_stats.json  clustering.json  representatives.json
//!   baseline.json  matches.jsonl  report.json  report.txt
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{ArgumentEmbedder, Engine, EngineConfig, EngineError, RunInputs, SourceOpinionEmbedder};
use crate::eventlog::{Clock, EventLog, LogError};
use crate::io::{
    read_corpus, read_embeddings, read_json, read_quality, read_topics, write_embeddings, write_json, write_jsonl,
    IoError, QualityRow, TopicAssignmentRow, TopicFile,
};
use crate::model::{ingest_corpus, IngestError, RawOpinionRow};
use crate::selection::SynthesisClient;
use crate::sim::{drive, DriverConfig, SyntheticWorld, WorldConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSource {
    /// Inputs supplied by the user and copied into the run directory.
    Files,
    /// Generated world answered by simulated annotators.
    Synthetic { world: WorldConfig, driver: DriverConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub engine: EngineConfig,
    pub clock: Clock,
    pub source: InputSource,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("{0}")]
    Config(String),
}

impl PipelineError {
    /// True when a deliberate halt stopped the run.
    pub fn is_halt(&self) -> bool {
        matches!(self, PipelineError::Engine(EngineError::Log(LogError::Halted(_))))
    }
}

/// User-supplied input files.
#[derive(Debug, Clone)]
pub struct InputPaths {
    pub corpus: PathBuf,
    pub embeddings: PathBuf,
    pub embedding_ids: PathBuf,
    pub quality: Option<PathBuf>,
    pub topics: Option<PathBuf>,
}

impl InputPaths {
    /// Reads and validates the inputs for `corpus_id`.
    pub fn load(&self, corpus_id: &str) -> Result<RunInputs, PipelineError> {
        let corpus = ingest_corpus(&read_corpus(&self.corpus)?)?;
        let opinions: Vec<_> = corpus.of_corpus(corpus_id).cloned().collect();
        if opinions.is_empty() {
            return Err(PipelineError::Config(format!("corpus {corpus_id} has no opinions")));
        }
        let embeddings = read_embeddings(&self.embeddings, &self.embedding_ids)?;
        let quality = match &self.quality {
            Some(p) => read_quality(p)?,
            None => Default::default(),
        };
        let topics = match &self.topics {
            Some(p) => {
                let file = read_topics(p)?;
                if file.corpus_id != corpus_id {
                    return Err(PipelineError::Config(format!(
                        "topics are for corpus {}, not {corpus_id}",
                        file.corpus_id
                    )));
                }
                file.topics
            }
            None => Vec::new(),
        };
        Ok(RunInputs { opinions, embeddings, quality, topics })
    }
}

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
    config: RunConfig,
}

impl RunDir {
    pub fn config_path(root: &Path) -> PathBuf {
        root.join("config.json")
    }

    pub fn exists(root: &Path) -> bool {
        Self::config_path(root).exists()
    }

    /// Creates the directory and copies `inputs` into it.
    pub fn create(root: &Path, config: RunConfig, inputs: &RunInputs) -> Result<Self, PipelineError> {
        if Self::exists(root) {
            return Err(PipelineError::Config(format!("{} already holds a run", root.display())));
        }
        config.engine.validate()?;
        let dir = root.join("inputs");
        std::fs::create_dir_all(&dir)
            .map_err(|source| IoError::Io { path: dir.display().to_string(), source })?;
        let rows: Vec<RawOpinionRow> = inputs
            .opinions
            .iter()
            .map(|o| RawOpinionRow {
                id: o.id.clone(),
                corpus_id: o.corpus_id.clone(),
                text: o.text.clone(),
                original_text: o.original_text.clone(),
                stance: o.stance.as_str().to_string(),
            })
            .collect();
        write_jsonl(&dir.join("opinions.jsonl"), &rows)?;
        let mut ids: Vec<String> = inputs.opinions.iter().map(|o| o.id.clone()).collect();
        ids.sort();
        let vectors: Vec<Vec<f32>> = ids
            .iter()
            .map(|id| inputs.embeddings.require(id).map(|v| v.iter().map(|&x| x as f32).collect()))
            .collect::<Result<_, _>>()
            .map_err(IoError::from)?;
        write_embeddings(
            &dir.join("embeddings.bin"),
            &dir.join("embedding_ids.json"),
            &ids,
            &vectors,
            inputs.embeddings.dim(),
        )?;
        let mut quality: Vec<QualityRow> =
            inputs.quality.iter().map(|(id, &q)| QualityRow { id: id.clone(), quality: q }).collect();
        quality.sort_by(|a, b| a.id.cmp(&b.id));
        write_jsonl(&dir.join("quality.jsonl"), &quality)?;
        write_json(
            &dir.join("topics.json"),
            &TopicFile { corpus_id: config.engine.corpus_id.clone(), topics: inputs.topics.clone() },
        )?;
        write_json(&Self::config_path(root), &config)?;
        Ok(Self { root: root.to_path_buf(), config })
    }

    pub fn open(root: &Path) -> Result<Self, PipelineError> {
        let config: RunConfig = read_json(&Self::config_path(root))?;
        Ok(Self { root: root.to_path_buf(), config })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn events_path(&self) -> PathBuf {
        self.root.join("events.jsonl")
    }

    pub fn input_paths(&self) -> InputPaths {
        let dir = self.root.join("inputs");
        InputPaths {
            corpus: dir.join("opinions.jsonl"),
            embeddings: dir.join("embeddings.bin"),
            embedding_ids: dir.join("embedding_ids.json"),
            quality: Some(dir.join("quality.jsonl")),
            topics: Some(dir.join("topics.json")),
        }
    }

    pub fn load_inputs(&self) -> Result<RunInputs, PipelineError> {
        self.input_paths().load(&self.config.engine.corpus_id)
    }

    pub fn world(&self) -> Option<SyntheticWorld> {
        match &self.config.source {
            InputSource::Synthetic { world, .. } => Some(SyntheticWorld::generate(world.clone())),
            InputSource::Files => None,
        }
    }

    fn embedder(&self, world: Option<&SyntheticWorld>) -> Box<dyn ArgumentEmbedder> {
        match world {
            Some(w) => Box::new(w.embedder()),
            None => Box::new(SourceOpinionEmbedder),
        }
    }

    /// Opens the engine on the run's log file, replaying what it holds.
    pub fn open_engine(
        &self,
        synthesis: Option<Box<dyn SynthesisClient>>,
        halt_after: Option<usize>,
    ) -> Result<Engine, PipelineError> {
        let world = self.world();
        let log = EventLog::open(&self.events_path(), self.config.clock)?;
        Ok(Engine::open(
            self.config.engine.clone(),
            self.load_inputs()?,
            self.embedder(world.as_ref()),
            synthesis,
            log,
            halt_after,
        )?)
    }

    /// Rebuilds the engine in memory from the log; the file is not touched.
    pub fn replay(&self) -> Result<Engine, PipelineError> {
        let records = if self.events_path().exists() { EventLog::read(&self.events_path())? } else { Vec::new() };
        let world = self.world();
        Ok(Engine::open(
            self.config.engine.clone(),
            self.load_inputs()?,
            self.embedder(world.as_ref()),
            None,
            EventLog::from_records(records, self.config.clock),
            None,
        )?)
    }

    /// Writes every artifact the engine has produced so far.
    pub fn write_artifacts(&self, engine: &Engine) -> Result<(), PipelineError> {
        let a = engine.artifacts();
        let root = &self.root;
        write_json(&root.join("sessions.json"), &a.sessions)?;
        write_json(&root.join("topic_shortlist.json"), &a.shortlist)?;
        let rows: Vec<TopicAssignmentRow> = a
            .topic_vectors
            .iter()
            .map(|(id, v)| TopicAssignmentRow { argument_id: id.clone(), counts: v.counts.clone() })
            .collect();
        write_json(&root.join("topic_assignments.json"), &rows)?;
        if let Some(stats) = &a.consolidation {
            write_jsonl(&root.join("labels.jsonl"), &a.labels)?;
            write_json(&root.join("consolidation_stats.json"), stats)?;
        }
        if let Some(c) = &a.clustering {
            write_json(&root.join("clustering.json"), c)?;
            write_json(&root.join("representatives.json"), &a.representatives)?;
        }
        if let Some(b) = &a.baseline {
            write_json(&root.join("baseline.json"), b)?;
        }
        if !a.matches.is_empty() {
            write_jsonl(&root.join("matches.jsonl"), &a.matches)?;
        }
        if let Some(r) = &a.report {
            write_json(&root.join("report.json"), r)?;
            std::fs::write(root.join("report.txt"), r.render_text())
                .map_err(|source| IoError::Io { path: root.join("report.txt").display().to_string(), source })?;
        }
        Ok(())
    }
}

/// Runs (or resumes) a simulated pipeline in `root` and exports artifacts.
/// `halt_after` stops once the log holds that many records.
pub fn simulate(root: &Path, config: RunConfig, halt_after: Option<usize>) -> Result<Engine, PipelineError> {
    let InputSource::Synthetic { world, driver } = &config.source else {
        return Err(PipelineError::Config("simulate needs a synthetic source".into()));
    };
    driver.annotator.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    if world.corpus_id != config.engine.corpus_id {
        return Err(PipelineError::Config("world and engine corpus ids differ".into()));
    }
    let dir = if RunDir::exists(root) {
        let dir = RunDir::open(root)?;
        if dir.config != config {
            return Err(PipelineError::Config(format!("{} holds a run with a different config", root.display())));
        }
        dir
    } else {
        let w = SyntheticWorld::generate(world.clone());
        RunDir::create(root, config.clone(), &w.inputs())?
    };
    let world = dir.world().expect("synthetic source");
    let mut engine = dir.open_engine(None, halt_after)?;
    drive(&mut engine, &world, driver)?;
    dir.write_artifacts(&engine)?;
    Ok(engine)
}

/// Default configuration for a simulated run.
pub fn simulated_config(run_id: &str, world: WorldConfig, driver: DriverConfig, engine: EngineConfig) -> RunConfig {
    RunConfig {
        engine: EngineConfig { run_id: run_id.into(), corpus_id: world.corpus_id.clone(), ..engine },
        clock: Clock::Logical,
        source: InputSource::Synthetic { world, driver },
    }
}
