//! Deployment commands are stateless between invocations: every run rebuilds the world from
//! its scenario file and replays the journal of earlier commands on the virtual clock, one
//! second per entry.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use fedorch::orchestrator::OrchestratorError;
use fedorch::ranker::PreferenceList;
use fedorch::sim::{Engine, SimError};
use fedorch::{OrchConfig, Scenario, Uuid};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Entry {
    Create { template: String, user: String, prefs: Option<Vec<String>> },
    Delete { uuid: Uuid, user: String },
}

pub struct Session {
    pub engine: Engine,
    path: PathBuf,
    entries: usize,
}

impl Session {
    pub fn open(world: &Path, state: &Path, fallback: Option<OrchConfig>) -> Result<Self, String> {
        let mut scenario = Scenario::load(world, fallback).map_err(|e| e.to_string())?;
        let entries: Vec<Entry> = match fs::read_to_string(state) {
            Ok(text) => text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .enumerate()
                .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("{}:{}: {e}", state.display(), i + 1)))
                .collect::<Result<_, _>>()?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(format!("{}: {e}", state.display())),
        };
        scenario.events.clear();
        scenario.horizon_s = scenario.horizon_s.max(entries.len() as u64 + 2);
        let mut engine = Engine::new(scenario).map_err(|e| e.to_string())?;
        for (i, entry) in entries.iter().enumerate() {
            let _ = apply(&mut engine, entry, i as u64 + 1).map_err(|e| e.to_string())?;
        }
        Ok(Session { engine, path: state.to_owned(), entries: entries.len() })
    }

    pub fn now(&self) -> u64 {
        self.entries as u64 + 1
    }

    /// Applies a new command and appends it to the journal.
    pub fn run(&mut self, entry: Entry) -> Result<Result<Uuid, OrchestratorError>, String> {
        let t = self.now();
        let outcome = apply(&mut self.engine, &entry, t).map_err(|e| e.to_string())?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| format!("{}: {e}", self.path.display()))?;
        let line = serde_json::to_string(&entry).expect("journal entries serialize");
        writeln!(f, "{line}").map_err(|e| format!("{}: {e}", self.path.display()))?;
        self.entries += 1;
        Ok(outcome)
    }
}

fn apply(engine: &mut Engine, entry: &Entry, t: u64) -> Result<Result<Uuid, OrchestratorError>, SimError> {
    engine.run_until(t)?;
    Ok(match entry {
        Entry::Create { template, user, prefs } => {
            let prefs = match prefs.clone().map(PreferenceList::new).transpose() {
                Ok(p) => p,
                Err(e) => return Ok(Err(OrchestratorError::Ranker(e))),
            };
            let reference = format!("cli-{t}");
            engine.submit(&reference, template, user, prefs, None, t)
        }
        Entry::Delete { uuid, user } => engine.delete(*uuid, user, t).map(|r| r.uuid),
    })
}
